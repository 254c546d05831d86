use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::seqdata::DnaSample;

/// A motif occurrence with flanking context, clipped to the sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotifWindow {
    pub seq_id: String,
    pub motif: String,
    /// Half-open window bounds in the source sequence.
    pub start: usize,
    pub end: usize,
    pub sequence: String,
}

/// Windows around the first occurrence of each motif in each sequence. A motif written as
/// `TOKEN@offset` is matched only at that offset.
pub fn motif_windows(motifs: &[String], sequences: &[DnaSample], flank: usize) -> Vec<MotifWindow> {
    let mut out = Vec::new();
    for motif in motifs {
        let (token, at) = match motif.rsplit_once('@') {
            Some((t, p)) => (t, p.parse::<usize>().ok()),
            None => (motif.as_str(), None),
        };
        if token.is_empty() {
            continue;
        }
        for s in sequences {
            let hit = match at {
                Some(p) => s.sequence.get(p..p + token.len()).filter(|w| *w == token).map(|_| p),
                None => s.sequence.find(token),
            };
            if let Some(p) = hit {
                let start = p.saturating_sub(flank);
                let end = (p + token.len() + flank).min(s.sequence.len());
                out.push(MotifWindow {
                    seq_id: s.id.clone(),
                    motif: motif.clone(),
                    start,
                    end,
                    sequence: s.sequence[start..end].to_string(),
                });
            }
        }
    }
    out
}

/// Writes windows for the first `top_n` motifs to a FASTA file and returns them.
pub fn export_motif_fasta(
    motifs: &[String],
    sequences: &[DnaSample],
    top_n: usize,
    flank: usize,
    path: &Path,
) -> Result<Vec<MotifWindow>> {
    let windows = motif_windows(&motifs[..top_n.min(motifs.len())], sequences, flank);
    let mut text = format!("; motif windows: top {top_n}, flank {flank}\n");
    for w in &windows {
        let _ = writeln!(text, ">{}|{}|{}-{}\n{}", w.seq_id, w.motif, w.start, w.end, w.sequence);
    }
    std::fs::write(path, text)?;
    Ok(windows)
}
