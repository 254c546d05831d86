use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::first_invalid;
use crate::error::{invalid, Error, Result};

/// A fixed-length A/C/G/T sequence with a binary methylation label (1 = methylated).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DnaSample {
    pub id: String,
    pub sequence: String,
    pub label: u8,
}

impl DnaSample {
    pub fn new(id: impl Into<String>, sequence: impl Into<String>, label: u8) -> Self {
        Self {
            id: id.into(),
            sequence: sequence.into(),
            label,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Tsv,
    Fasta,
}

impl Format {
    /// Guesses the format from a file extension, defaulting to TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("fa" | "fasta" | "fna") => Format::Fasta,
            _ => Format::Tsv,
        }
    }
}

/// A sample that was dropped during loading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub line: usize,
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub samples: Vec<DnaSample>,
    pub rejected: Vec<Rejection>,
}

impl LoadReport {
    pub fn length(&self) -> Option<usize> {
        self.samples.first().map(|s| s.sequence.len())
    }
}

/// Parses one split file. Ambiguous bases reject the sample; a length disagreement with
/// the first sample is fatal.
pub fn parse_samples(path: &Path, format: Format) -> Result<LoadReport> {
    let text = fs::read_to_string(path)?;
    let name = path.display().to_string();
    let records = match format {
        Format::Tsv => tsv_records(&text, &name)?,
        Format::Fasta => fasta_records(&text, &name)?,
    };
    let mut report = LoadReport::default();
    let mut length = None;
    for (line, id, sequence, label) in records {
        let sequence = sequence.to_ascii_uppercase();
        if let Some((pos, c)) = first_invalid(&sequence) {
            report.rejected.push(Rejection {
                line,
                id,
                reason: format!("character {c:?} at position {pos}"),
            });
            continue;
        }
        match length {
            None => length = Some(sequence.len()),
            Some(l) if l != sequence.len() => {
                return Err(Error::Parse {
                    path: name,
                    line,
                    msg: format!("sequence length {} differs from {l}", sequence.len()),
                })
            }
            _ => {}
        }
        report.samples.push(DnaSample { id, sequence, label });
    }
    if report.samples.is_empty() {
        return Err(Error::NoSamples(name));
    }
    Ok(report)
}

type Record = (usize, String, String, u8);

fn parse_label(raw: &str, path: &str, line: usize) -> Result<u8> {
    match raw.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Parse {
            path: path.to_string(),
            line,
            msg: format!("label {other:?} is not 0 or 1"),
        }),
    }
}

fn tsv_records(text: &str, path: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_string(),
                line,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                path: path.to_string(),
                line,
                msg: "empty id or sequence".into(),
            });
        }
        let label = parse_label(fields[2], path, line)?;
        out.push((line, fields[0].to_string(), fields[1].to_string(), label));
    }
    Ok(out)
}

fn fasta_records(text: &str, path: &str) -> Result<Vec<Record>> {
    let mut out: Vec<Record> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with(';') {
            continue;
        }
        if let Some(header) = raw.strip_prefix('>') {
            let (id, label) = header.split_once("|label=").ok_or_else(|| Error::Parse {
                path: path.to_string(),
                line,
                msg: "header lacks |label=<0|1>".into(),
            })?;
            let label = parse_label(label, path, line)?;
            out.push((line, id.to_string(), String::new(), label));
        } else {
            match out.last_mut() {
                Some(rec) => rec.2.push_str(raw),
                None => {
                    return Err(Error::Parse {
                        path: path.to_string(),
                        line,
                        msg: "sequence data before the first header".into(),
                    })
                }
            }
        }
    }
    if let Some(rec) = out.iter().find(|r| r.2.is_empty()) {
        return Err(Error::Parse {
            path: path.to_string(),
            line: rec.0,
            msg: "record has no sequence".into(),
        });
    }
    Ok(out)
}

pub fn write_tsv(samples: &[DnaSample], path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        writeln!(out, "{}\t{}\t{}", s.id, s.sequence, s.label).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_fasta(samples: &[DnaSample], path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        writeln!(out, ">{}|label={}\n{}", s.id, s.label, s.sequence).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Train/test partitions sharing one sequence length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub length: usize,
    pub train: Vec<DnaSample>,
    pub test: Vec<DnaSample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, train: Vec<DnaSample>, test: Vec<DnaSample>) -> Result<Self> {
        let name = name.into();
        let length = match train.first().or(test.first()) {
            Some(s) => s.sequence.len(),
            None => return Err(Error::NoSamples(name)),
        };
        for (split, samples) in [("train", &train), ("test", &test)] {
            let mut seen = HashSet::new();
            for s in samples.iter() {
                if s.sequence.len() != length {
                    invalid!("{name}/{split}: sample {} has length {} (expected {length})", s.id, s.sequence.len());
                }
                if let Some((i, c)) = first_invalid(&s.sequence) {
                    invalid!("{name}/{split}: sample {} has {c:?} at {i}", s.id);
                }
                if s.label > 1 {
                    invalid!("{name}/{split}: sample {} has label {}", s.id, s.label);
                }
                if !seen.insert(s.id.as_str()) {
                    invalid!("{name}/{split}: duplicate id {}", s.id);
                }
            }
        }
        Ok(Self { name, length, train, test })
    }

    /// Loads `train.{tsv,fasta}` and `test.{tsv,fasta}` from a directory. Returns the
    /// dataset plus every rejected sample from both files.
    pub fn load_dir(dir: &Path) -> Result<(Self, Vec<Rejection>)> {
        let find = |stem: &str| -> Result<std::path::PathBuf> {
            for ext in ["tsv", "fasta", "fa"] {
                let p = dir.join(format!("{stem}.{ext}"));
                if p.exists() {
                    return Ok(p);
                }
            }
            Err(Error::Invalid(format!("{} has no {stem}.tsv or {stem}.fasta", dir.display())))
        };
        let train_path = find("train")?;
        let test_path = find("test")?;
        let train = parse_samples(&train_path, Format::from_path(&train_path))?;
        let test = parse_samples(&test_path, Format::from_path(&test_path))?;
        let mut rejected = train.rejected;
        rejected.extend(test.rejected);
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        Ok((Self::new(name, train.samples, test.samples)?, rejected))
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_tsv(&self.train, &dir.join("train.tsv"))?;
        write_tsv(&self.test, &dir.join("test.tsv"))
    }
}
