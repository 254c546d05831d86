use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{init_model, train, TrainConfig};
use crate::error::{invalid, Error, Result};
use crate::metrics::auprc;
use crate::model::ModelConfig;
use crate::seqdata::DnaSample;

/// Seeded stratified fold index for each sample. Each class is shuffled and dealt round-robin,
/// the negatives continuing where the positives stopped, so fold sizes differ by at most one.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        invalid!("cross-validation needs at least 2 folds, got {k}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    let mut next = 0;
    for class in [1u8, 0] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < k {
            return Err(Error::Insufficient(format!(
                "class {class} has {} samples, fewer than {k} folds",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for i in idx {
            fold[i] = next % k;
            next += 1;
        }
    }
    Ok(fold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub config: TrainConfig,
    pub fold_auprc: Vec<f64>,
    pub mean_auprc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub rows: Vec<CvRow>,
    pub best: usize,
}

impl CvReport {
    pub fn best_config(&self) -> &TrainConfig {
        &self.rows[self.best].config
    }

    /// `config<TAB>fold_1..fold_k<TAB>mean`, config as compact JSON.
    pub fn to_tsv(&self) -> String {
        let k = self.rows.first().map_or(0, |r| r.fold_auprc.len());
        let mut out = String::from("config");
        for f in 1..=k {
            out.push_str(&format!("\tfold_{f}"));
        }
        out.push_str("\tmean_auprc\n");
        for r in &self.rows {
            out.push_str(&serde_json::to_string(&r.config).expect("config serializes"));
            for a in &r.fold_auprc {
                out.push_str(&format!("\t{a}"));
            }
            out.push_str(&format!("\t{}\n", r.mean_auprc));
        }
        out
    }
}

/// Mean validation AUPRC of every grid entry under `folds`-fold stratified CV. The best entry
/// maximizes the mean; ties go to the lexicographically smallest config JSON.
pub fn cross_validate(
    model_config: &ModelConfig,
    train_split: &[DnaSample],
    grid: &[TrainConfig],
    folds: usize,
    seed: u64,
) -> Result<CvReport> {
    if grid.is_empty() {
        invalid!("empty hyperparameter grid");
    }
    let labels: Vec<u8> = train_split.iter().map(|s| s.label).collect();
    let assignment = stratified_folds(&labels, folds, seed)?;
    let mut rows = Vec::with_capacity(grid.len());
    for cfg in grid {
        let mut fold_auprc = Vec::with_capacity(folds);
        for f in 0..folds {
            let (mut fit, mut val) = (Vec::new(), Vec::new());
            for (s, &a) in train_split.iter().zip(&assignment) {
                if a == f { val.push(s.clone()) } else { fit.push(s.clone()) }
            }
            let mut model = init_model::<f64>(model_config, &fit, cfg.seed)?;
            train(&mut model, &fit, None, cfg, |_| {})?;
            let scores = model.predict_proba(&val)?;
            let val_labels: Vec<u8> = val.iter().map(|s| s.label).collect();
            fold_auprc.push(auprc(&scores, &val_labels)?);
        }
        let mean_auprc = fold_auprc.iter().sum::<f64>() / folds as f64;
        rows.push(CvRow {
            config: cfg.clone(),
            fold_auprc,
            mean_auprc,
        });
    }
    let best = select_best(&rows);
    Ok(CvReport { rows, best })
}

/// Index of the highest mean AUPRC; ties go to the lexicographically smallest config JSON.
pub fn select_best(rows: &[CvRow]) -> usize {
    let key = |r: &CvRow| serde_json::to_string(&r.config).expect("config serializes");
    (0..rows.len())
        .max_by(|&a, &b| {
            rows[a]
                .mean_auprc
                .total_cmp(&rows[b].mean_auprc)
                .then_with(|| key(&rows[b]).cmp(&key(&rows[a])))
        })
        .expect("non-empty grid")
}
