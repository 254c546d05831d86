//! Two-sample effect sizes and tests: Cohen's d with pooled SD, Welch's t-test, Student-t
//! tail probabilities and Benjamini–Hochberg adjustment.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Mean and unbiased (n − 1) variance.
pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() < 2 {
        0.0
    } else {
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    };
    (mean, var)
}

fn need_two(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Insufficient(format!(
            "two-sample statistics need at least 2 values per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohensD {
    pub d: f64,
    /// Pooled standard deviation.
    pub s_p: f64,
}

/// `d = (mean(a) − mean(b)) / s_p`. `None` when the pooled SD is zero.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<Option<CohensD>> {
    need_two(a, b)?;
    let ((ma, va), (mb, vb)) = (mean_var(a), mean_var(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let s_p = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
    if s_p == 0.0 {
        return Ok(None);
    }
    Ok(Some(CohensD { d: (ma - mb) / s_p, s_p }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchT {
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// Welch's unequal-variance t-test. `None` when both variances are zero.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<Option<WelchT>> {
    need_two(a, b)?;
    let ((ma, va), (mb, vb)) = (mean_var(a), mean_var(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (qa, qb) = (va / na, vb / nb);
    let se2 = qa + qb;
    if se2 == 0.0 {
        return Ok(None);
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    Ok(Some(WelchT {
        t,
        df,
        p: student_t_two_sided(t, df),
    }))
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom, via the regularized incomplete
/// beta `I_{df/(df+t²)}(df/2, 1/2)`.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    if !t.is_finite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Benjamini–Hochberg adjusted p-values in input order.
pub fn benjamini_hochberg(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    let mut out = vec![0.0; m];
    let mut running = 1.0f64;
    for (k, &i) in order.iter().enumerate() {
        let rank = (m - k) as f64;
        running = running.min(p[i] * (m as f64 / rank));
        out[i] = running.min(1.0);
    }
    out
}
