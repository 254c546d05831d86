use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use medna_core::interpret::{
    cad_analysis, cwga, export_motif_fasta, select_high_confidence, Baseline, CadOptions, CwgaOptions, PositionMode,
    Route, View,
};
use medna_core::metrics::{evaluate, REPORT_TSV_HEADER};
use medna_core::model::{checkpoint_dtype, export_stage_embeddings, load_checkpoint, save_checkpoint, Model, ModelConfig, Stage};
use medna_core::perturb::{default_rule_sets, mutagenesis_eval, transfer_matrix, MutationRule, RuleSet, TransferMetric};
use medna_core::seqdata::{synth_planted_dataset, Dataset, DnaSample, SynthSpec};
use medna_core::trainer::{init_model, train, TrainConfig};
use medna_core::{Error, Scalar};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::manifest::Recorder;
use crate::*;

/// Runs `$f::<T>` with `T` matching the checkpoint's stored dtype.
macro_rules! by_dtype {
    ($ckpt:expr, $f:ident($($arg:expr),*)) => {
        match checkpoint_dtype($ckpt).with_context(|| format!("reading {}", $ckpt.display()))?.as_str() {
            "f32" => $f::<f32>($($arg),*),
            _ => $f::<f64>($($arg),*),
        }
    };
}

pub fn run(command: Command, out: &Path) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => match a.dtype {
            Dtype::F32 => train_cmd::<f32>(a, out),
            Dtype::F64 => train_cmd::<f64>(a, out),
        },
        Command::Eval(a) => by_dtype!(&a.ckpt, eval_cmd(&a, out)),
        Command::Cad(a) => by_dtype!(&a.ckpt, cad_cmd(&a, out)),
        Command::Cwga(a) => by_dtype!(&a.ckpt, cwga_cmd(&a, out)),
        Command::Mutate(a) => by_dtype!(&a.ckpt, mutate_cmd(&a, out)),
        Command::Transfer(a) => {
            let first = a.ckpts.first().context("no checkpoints given")?;
            by_dtype!(first, transfer_cmd(&a, out))
        }
        Command::Embed(a) => by_dtype!(&a.ckpt, embed_cmd(&a, out)),
    }
}

fn load_data(dir: &Path, rec: &mut Recorder) -> Result<Dataset> {
    let (ds, rejected) = Dataset::load_dir(dir).with_context(|| format!("loading {}", dir.display()))?;
    for stem in ["train", "test"] {
        if let Some(p) = ["tsv", "fasta", "fa"].iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.exists()) {
            rec.input(&p);
        }
    }
    for r in &rejected {
        eprintln!("warning: skipped {} (line {}): {}", r.id, r.line, r.reason);
    }
    Ok(ds)
}

fn split_of(ds: &Dataset, split: Split) -> &[DnaSample] {
    match split {
        Split::Train => &ds.train,
        Split::Test => &ds.test,
    }
}

fn load_model<T: Scalar>(path: &Path, rec: &mut Recorder) -> Result<Model<T>> {
    rec.input(path);
    Ok(load_checkpoint::<T>(path).with_context(|| format!("loading {}", path.display()))?.model)
}

fn read_json(path: &Path, rec: &mut Recorder) -> Result<Value> {
    rec.input(path);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// The `model` section of a config file. A missing `seq_len` takes `length`; a conflicting
/// one is an error.
fn model_section(config: &Value, length: usize) -> Result<ModelConfig> {
    let section = config.get("model").cloned().unwrap_or_else(|| json!({}));
    match section.get("seq_len").and_then(Value::as_u64) {
        Some(l) if l as usize != length => bail!("config seq_len {l} does not match sequence length {length}"),
        _ => {}
    }
    let mut model: ModelConfig = serde_json::from_value(section).context("invalid model config")?;
    model.seq_len = length;
    Ok(model)
}

fn synth(a: SynthArgs, out: &Path) -> Result<()> {
    let mut rec = Recorder::new("synth");
    let spec: SynthSpec = match &a.spec {
        Some(p) => serde_json::from_value(read_json(p, &mut rec)?).context("invalid synth spec")?,
        None => SynthSpec::default(),
    };
    let ds = synth_planted_dataset(&spec, a.seed)?;
    ds.save_dir(out)?;
    rec.output(out.join("train.tsv"));
    rec.output(out.join("test.tsv"));
    let snapshot = serde_json::to_value(&spec)?;
    rec.write(out.join("spec.json"), serde_json::to_vec_pretty(&snapshot)?)?;
    eprintln!("synth: {} train, {} test samples of length {}", ds.train.len(), ds.test.len(), ds.length);
    rec.finish(out, &snapshot, Some(a.seed))
}

fn train_cmd<T: Scalar>(a: TrainArgs, out: &Path) -> Result<()> {
    let mut rec = Recorder::new("train");
    let ds = load_data(&a.data, &mut rec)?;
    let file = match &a.config {
        Some(p) => read_json(p, &mut rec)?,
        None => json!({}),
    };
    let model_config = model_section(&file, ds.length)?;
    let mut tc: TrainConfig =
        serde_json::from_value(file.get("train").cloned().unwrap_or_else(|| json!({}))).context("invalid train config")?;
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.lr {
        tc.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.flood_level {
        tc.flood_level = v;
    }
    if let Some(v) = a.fgm_epsilon {
        tc.fgm_epsilon = v;
    }
    if a.no_adversarial {
        tc.adversarial = false;
    }
    if a.fine_tune_init {
        tc.fine_tune_init = true;
    }
    let snapshot = json!({ "model": model_config, "train": tc, "dtype": T::DTYPE });
    let mut model = init_model::<T>(&model_config, &ds.train, tc.seed)?;
    let val_header: Vec<String> = REPORT_TSV_HEADER.split('\t').map(|h| format!("val_{h}")).collect();
    let mut log = format!("phase\tepoch\ttrain_loss\ttrain_ce\t{}\n", val_header.join("\t"));
    let logs = train(&mut model, &ds.train, Some(&ds.test), &tc, |l| {
        let val = l.val.as_ref().map(|v| format!(" val_acc {:.4} val_auc {:.4}", v.acc, v.auc)).unwrap_or_default();
        eprintln!("{} epoch {}: loss {:.5} ce {:.5}{val}", l.phase, l.epoch, l.train_loss, l.train_ce);
    })?;
    for l in &logs {
        let val = l.val.as_ref().map(|v| v.tsv_row()).unwrap_or_default();
        log.push_str(&format!("{}\t{}\t{}\t{}\t{val}\n", l.phase, l.epoch, l.train_loss, l.train_ce));
    }
    let ckpt = out.join("checkpoint.json");
    save_checkpoint(&ckpt, &model, json!({ "train": tc, "data": ds.name }))?;
    rec.output(ckpt);
    rec.write(out.join("train_log.tsv"), log)?;
    rec.finish(out, &snapshot, Some(tc.seed))
}

fn eval_cmd<T: Scalar>(a: &EvalArgs, out: &Path) -> Result<()> {
    let mut rec = Recorder::new("eval");
    let model = load_model::<T>(&a.ckpt, &mut rec)?;
    if let Some(p) = &a.config {
        let expected = model_section(&read_json(p, &mut rec)?, model.config.seq_len)?;
        if expected.hash() != model.config.hash() {
            return Err(Error::ConfigMismatch(format!(
                "{} was trained with config {} but {} describes {}",
                a.ckpt.display(),
                model.config.hash(),
                p.display(),
                expected.hash()
            ))
            .into());
        }
    }
    let ds = load_data(&a.data, &mut rec)?;
    let samples = split_of(&ds, a.split);
    let scores = model.predict_proba(samples)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let report = evaluate(&scores, &labels)?;
    let mut preds = String::from("id\tlabel\tp_positive\tprediction\n");
    for (s, p) in samples.iter().zip(&scores) {
        preds.push_str(&format!("{}\t{}\t{}\t{}\n", s.id, s.label, p, u8::from(*p > 0.5)));
    }
    rec.write(out.join("metrics.json"), serde_json::to_vec_pretty(&report)?)?;
    rec.write(out.join("metrics.tsv"), report.to_tsv())?;
    rec.write(out.join("predictions.tsv"), preds)?;
    eprintln!("eval: acc {:.4} sn {:.4} sp {:.4} mcc {:.4} auc {:.4}", report.acc, report.sn, report.sp, report.mcc, report.auc);
    rec.finish(out, &json!({ "split": format!("{:?}", a.split).to_lowercase() }), Some(model.seed))
}

fn view_of(v: ViewArg) -> View {
    match v {
        ViewArg::Kmer => View::Kmer,
        ViewArg::Bpe => View::Bpe,
    }
}

fn position_mode(positional: bool) -> PositionMode {
    if positional {
        PositionMode::Positional
    } else {
        PositionMode::Surface
    }
}

fn cad_cmd<T: Scalar>(a: &CadArgs, out: &Path) -> Result<()> {
    let mut rec = Recorder::new("cad");
    let model = load_model::<T>(&a.ckpt, &mut rec)?;
    let ds = load_data(&a.data, &mut rec)?;
    let sets = select_high_confidence(&model, split_of(&ds, a.split), a.threshold, None)?;
    let opts = CadOptions {
        view: view_of(a.view),
        position_mode: position_mode(a.positional),
        per_sequence: a.per_sequence,
    };
    let report = cad_analysis(&sets, opts)?;
    rec.write(out.join("cad.tsv"), report.to_tsv())?;
    if a.fasta_top > 0 {
        let motifs: Vec<String> = report.records.iter().map(|r| r.motif.clone()).collect();
        let positives: Vec<DnaSample> = sets.pos.iter().map(|s| s.sample.clone()).collect();
        let path = out.join("motifs.fasta");
        export_motif_fasta(&motifs, &positives, a.fasta_top, a.flank, &path)?;
        rec.output(path);
    }
    eprintln!(
        "cad: {} positives, {} negatives, {} motifs ranked, {} below the occurrence threshold",
        sets.pos.len(),
        sets.neg.len(),
        report.records.len(),
        report.below_min_samples
    );
    let config = json!({ "options": opts, "threshold": a.threshold, "fasta_top": a.fasta_top, "flank": a.flank });
    rec.finish(out, &config, Some(model.seed))
}

fn cwga_cmd<T: Scalar>(a: &CwgaArgs, out: &Path) -> Result<()> {
    let mut rec = Recorder::new("cwga");
    let model = load_model::<T>(&a.ckpt, &mut rec)?;
    let ds = load_data(&a.data, &mut rec)?;
    let sets = select_high_confidence(&model, split_of(&ds, a.split), a.threshold, None)?;
    let views = if model.config.uses_bpe_view() { vec![View::Kmer, View::Bpe] } else { vec![View::Kmer] };
    let opts = CwgaOptions {
        n_samples: a.n_samples,
        top_dims: a.top_dims,
        ig_steps: a.ig_steps,
        baseline: match a.baseline {
            BaselineArg::Zero => Baseline::Zero,
            BaselineArg::Pad => Baseline::Pad,
        },
        route: match a.route {
            RouteArg::Fused => Route::Fused,
            RouteArg::PerDimension => Route::PerDimension,
        },
        position_mode: position_mode(a.positional),
        views,
    };
    let report = cwga(&model, &sets, &opts)?;
    if report.dims.len() < a.top_dims {
        eprintln!("warning: only {} dimensions available; using all of them", report.dims.len());
    }
    for v in &report.all_zero {
        eprintln!("warning: every {} contribution is zero", v.name());
    }
    let mut dims = String::from("rank\tdim\tdelta\tcohens_d\tp\n");
    for d in &report.dims {
        dims.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", d.rank, d.dim, d.delta, d.cohens_d, d.p_value));
    }
    let mut pos = String::from("id\tview\ttop_token\tstart\tend\tcontribution\n");
    for p in &report.positives {
        let (start, end) = p.top_span();
        pos.push_str(&format!(
            "{}\t{}\t{}\t{start}\t{end}\t{}\n",
            p.id,
            p.view.name(),
            p.tokens[p.top],
            p.contributions[p.top]
        ));
    }
    rec.write(out.join("cwga.tsv"), report.to_tsv())?;
    rec.write(out.join("cwga_dims.tsv"), dims)?;
    rec.write(out.join("cwga_positives.tsv"), pos)?;
    let summary = json!({
        "n_pos": report.n_pos,
        "n_neg": report.n_neg,
        "max_relative_gap": report.max_relative_gap,
        "all_zero": report.all_zero,
    });
    rec.write(out.join("cwga_summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    if a.fasta_top > 0 {
        let positives: Vec<DnaSample> = sets.pos.iter().map(|s| s.sample.clone()).collect();
        for &view in &opts.views {
            let tokens: Vec<String> = report
                .records
                .iter()
                .filter(|r| r.view == view)
                .map(|r| match r.position {
                    Some(p) => format!("{}@{p}", r.token),
                    None => r.token.clone(),
                })
                .collect();
            let path = out.join(format!("cwga_{}.fasta", view.name()));
            export_motif_fasta(&tokens, &positives, a.fasta_top, a.flank, &path)?;
            rec.output(path);
        }
    }
    eprintln!("cwga: {} positives, {} negatives, {} dimensions", report.n_pos, report.n_neg, report.dims.len());
    rec.finish(out, &json!({ "options": opts, "threshold": a.threshold }), Some(model.seed))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RulesFile {
    Sets(Vec<RuleSet>),
    Rules(Vec<MutationRule>),
}

fn mutate_cmd<T: Scalar>(a: &MutateArgs, out: &Path) -> Result<()> {
    let mut rec = Recorder::new("mutate");
    let model = load_model::<T>(&a.ckpt, &mut rec)?;
    let sets = match &a.rules {
        None => default_rule_sets(),
        Some(p) => match serde_json::from_value(read_json(p, &mut rec)?).context("invalid rules file")? {
            RulesFile::Sets(s) => s,
            RulesFile::Rules(r) => r
                .into_iter()
                .map(|rule| RuleSet {
                    name: format!("{}>{}", rule.pattern, rule.replacement),
                    rules: vec![rule],
                })
                .collect(),
        },
    };
    let ds = load_data(&a.data, &mut rec)?;
    let report = mutagenesis_eval(&model, split_of(&ds, a.split), &sets)?;
    rec.write(out.join("mutagenesis.tsv"), report.to_tsv())?;
    rec.write(out.join("mutagenesis.json"), serde_json::to_vec_pretty(&report)?)?;
    for c in &report.conditions {
        eprintln!("mutate: {} sn {:.4} sp {:.4} ({} mutated)", c.name, c.report.sn, c.report.sp, c.n_mutated);
    }
    rec.finish(out, &json!({ "rule_sets": sets }), Some(model.seed))
}

/// Name for a checkpoint: its file stem, or its directory for the default file name.
fn model_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(Path::file_name) {
        Some(dir) if stem == "checkpoint" => dir.to_string_lossy().into_owned(),
        _ => stem,
    }
}

fn transfer_cmd<T: Scalar>(a: &TransferArgs, out: &Path) -> Result<()> {
    let mut rec = Recorder::new("transfer");
    let mut models = Vec::new();
    for p in &a.ckpts {
        if checkpoint_dtype(p)? != T::DTYPE {
            bail!("{} is not {}; all checkpoints must share one dtype", p.display(), T::DTYPE);
        }
        models.push((model_name(p), load_model::<T>(p, &mut rec)?));
    }
    let mut data = Vec::new();
    for d in &a.datasets {
        data.push(load_data(d, &mut rec)?);
    }
    let metric = match a.metric {
        MetricArg::Acc => TransferMetric::Acc,
        MetricArg::Auc => TransferMetric::Auc,
    };
    let model_refs: Vec<(String, &Model<T>)> = models.iter().map(|(n, m)| (n.clone(), m)).collect();
    let data_refs: Vec<(String, &[DnaSample])> = data.iter().map(|d| (d.name.clone(), split_of(d, a.split))).collect();
    let matrix = transfer_matrix(&model_refs, &data_refs, metric)?;
    for &i in &matrix.unnormalized_rows {
        eprintln!("warning: {} scores 0 on its own data; row left unnormalized", matrix.sources[i]);
    }
    rec.write(out.join("transfer_raw.tsv"), matrix.raw_tsv())?;
    rec.write(out.join("transfer_normalized.tsv"), matrix.normalized_tsv())?;
    rec.write(out.join("transfer.json"), serde_json::to_vec_pretty(&matrix)?)?;
    rec.finish(out, &json!({ "metric": metric, "sources": matrix.sources, "targets": matrix.targets }), None)
}

fn embed_cmd<T: Scalar>(a: &EmbedArgs, out: &Path) -> Result<()> {
    let mut rec = Recorder::new("embed");
    let model = load_model::<T>(&a.ckpt, &mut rec)?;
    let ds = load_data(&a.data, &mut rec)?;
    let stage = match a.stage {
        StageArg::Raw => Stage::Raw,
        StageArg::PostEncoder => Stage::PostEncoder,
        StageArg::PostFilm => Stage::PostFilm,
        StageArg::PostMoe => Stage::PostMoe,
    };
    let path: PathBuf = out.join(format!("embeddings_{}.tsv", stage.name()));
    let n = export_stage_embeddings(&model, split_of(&ds, a.split), stage, &path)?;
    rec.output(path);
    eprintln!("embed: {n} samples at {}", stage.name());
    rec.finish(out, &json!({ "stage": stage }), Some(model.seed))
}
