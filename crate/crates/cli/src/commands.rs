use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cape_core::data::{generate_synthetic, parse_csv_dataset, write_synthetic, Interaction, SyntheticSpec, Vocab};
use cape_core::model::gradcheck::check_combo;
use cape_core::model::{load_checkpoint, save_checkpoint, Backbone, Model};
use cape_core::position::PeVariant;
use cape_core::train::{evaluate, train_with, write_history_jsonl, MetricsReport};
use serde::Serialize;

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.json";

pub struct GenDataArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub users: Option<usize>,
    pub items: Option<usize>,
    pub intents: Option<usize>,
    pub context_len: Option<usize>,
    pub noise: Option<f64>,
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub backbone: Option<String>,
    pub variant: Option<String>,
    pub epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Valid,
    Test,
}

pub struct EvalArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
}

pub struct GradcheckArgs {
    pub seed: Option<u64>,
    pub combo: Option<String>,
    pub tolerance: f64,
}

#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub seed: u64,
    pub backbone: String,
    pub variant: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub train: MetricsReport,
    pub valid: MetricsReport,
    pub test: Option<MetricsReport>,
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn gen_data(args: GenDataArgs) -> anyhow::Result<PathBuf> {
    let run = RunConfig::load_or_default(args.config.as_deref())?;
    let base = run.synthetic.unwrap_or_else(|| SyntheticSpec::new(1000, 500, 10, 30, 0));
    let n_items = args.items.unwrap_or(base.n_items);
    let n_intents = args.intents.unwrap_or(base.n_intents);
    let mut spec = SyntheticSpec {
        n_users: args.users.unwrap_or(base.n_users),
        n_items,
        n_intents,
        items_per_intent: n_items.checked_div(n_intents).unwrap_or(0),
        seed: args.seed.unwrap_or(base.seed),
        ..base
    };
    if let Some(n) = args.context_len {
        spec.context_length_range = (n, n);
    }
    if let Some(noise) = args.noise {
        spec.noise = noise;
    }
    if spec.n_intents < 2 {
        spec.noise = 0.0;
    }
    let out = args.out.unwrap_or_else(|| run.out_dir.join("data"));
    let data = generate_synthetic(&spec)?;
    write_synthetic(&out, &data)?;
    Ok(out)
}

fn read_split(path: &Path, n_max: usize) -> anyhow::Result<Vec<Interaction>> {
    if !path.exists() {
        bail!("data file {} does not exist", path.display());
    }
    Ok(parse_csv_dataset(path, n_max)?)
}

struct Loaded {
    train: Vec<Interaction>,
    valid: Vec<Interaction>,
    test: Option<Vec<Interaction>>,
}

/// Reads the configured splits, generating synthetic data first when the
/// config asks for it and names no files.
fn load_data(run: &mut RunConfig) -> anyhow::Result<Loaded> {
    if run.data.train.is_none() {
        let Some(spec) = &run.synthetic else {
            bail!("data.train is not set and no synthetic spec is given");
        };
        let dir = run.out_dir.join("data");
        write_synthetic(&dir, &generate_synthetic(spec)?)?;
        run.data.train = Some(dir.join("train.csv"));
        run.data.valid = Some(dir.join("valid.csv"));
        run.data.test = Some(dir.join("test.csv"));
    }
    let n_max = run.model.n_max.unwrap_or(usize::MAX);
    let train = read_split(run.data.train.as_ref().expect("set above"), n_max)?;
    let Some(valid) = &run.data.valid else {
        bail!("data.valid is required for early stopping");
    };
    let valid = read_split(valid, n_max)?;
    let test = run.data.test.as_ref().map(|p| read_split(p, n_max)).transpose()?;
    Ok(Loaded { train, valid, test })
}

fn longest(parts: &[&[Interaction]]) -> usize {
    parts.iter().flat_map(|p| p.iter()).map(Interaction::len).max().unwrap_or(1)
}

fn all_splits(d: &Loaded) -> Vec<&[Interaction]> {
    let mut parts = vec![d.train.as_slice(), d.valid.as_slice()];
    if let Some(t) = &d.test {
        parts.push(t);
    }
    parts
}

pub fn train(args: TrainArgs) -> anyhow::Result<TrainReport> {
    let mut run = RunConfig::load_or_default(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    if let Some(out) = args.out {
        run.out_dir = out;
    }
    if let Some(b) = args.backbone {
        run.model.backbone = b;
    }
    if let Some(v) = args.variant {
        run.model.variant = v;
    }
    if let Some(e) = args.epochs {
        run.train.max_epochs = e;
    }
    let problems = run.problems(None);
    if !problems.is_empty() {
        bail!("invalid configuration:\n  - {}", problems.join("\n  - "));
    }
    create_dir(&run.out_dir)?;
    let mut data = load_data(&mut run)?;
    let parts = all_splits(&data);
    let mut all: Vec<Interaction> = Vec::new();
    parts.iter().for_each(|p| all.extend_from_slice(p));
    let inferred = (Vocab::covering(&all), longest(&parts));
    let model_cfg = run.model_config(Some(inferred))?;
    let vocab = Vocab {
        n_items: model_cfg.n_items,
        n_categories: model_cfg.n_categories,
    };
    for part in [&mut data.train, &mut data.valid] {
        vocab.remap_unknown(part);
    }
    if let Some(t) = &mut data.test {
        vocab.remap_unknown(t);
    }
    run.pin(&model_cfg);

    let model = Model::new(model_cfg, run.train.seed)?;
    let outcome = train_with(model, &data.train, &data.valid, &run.train, |r| {
        eprintln!(
            "epoch {:>3}  train loss {:.5}  valid auc {:.5}  valid logloss {:.5}",
            r.epoch, r.train_loss, r.valid.auc, r.valid.logloss
        );
    })?;

    let out = &run.out_dir;
    save_checkpoint(out.join(CHECKPOINT_FILE), outcome.model.params())?;
    let path = out.join(METRICS_FILE);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write_history_jsonl(&mut w, &outcome.history)?;
    w.flush()?;
    run.save(&out.join(CONFIG_FILE))?;

    let best = outcome.best_epoch;
    let report = TrainReport {
        seed: run.train.seed,
        backbone: run.model.backbone.clone(),
        variant: run.model.variant.clone(),
        best_epoch: best,
        epochs_run: outcome.history.len(),
        train: evaluate(&outcome.model, &data.train, &run.train, best)?,
        valid: outcome.best().valid.clone(),
        test: data
            .test
            .as_ref()
            .map(|t| evaluate(&outcome.model, t, &run.train, best))
            .transpose()?,
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    }
}

/// Metrics of a saved checkpoint on one split. The config defaults to the
/// `config.json` written next to the checkpoint; the reported epoch is the
/// best epoch recorded there when a training report is present, else 0.
pub fn eval(args: EvalArgs) -> anyhow::Result<(MetricsReport, PathBuf)> {
    let default_run = RunConfig::default();
    let out = args.out.clone().unwrap_or_else(|| default_run.out_dir.clone());
    let checkpoint = args.checkpoint.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let ckpt_dir = checkpoint.parent().map(Path::to_path_buf).unwrap_or_default();
    let config = args.config.unwrap_or_else(|| ckpt_dir.join(CONFIG_FILE));
    let mut run = RunConfig::load(&config)?;
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    let out = args.out.unwrap_or_else(|| run.out_dir.clone());
    let path = match args.split {
        Split::Train => run.data.train.clone(),
        Split::Valid => run.data.valid.clone(),
        Split::Test => run.data.test.clone(),
    };
    let name = split_name(args.split);
    let Some(path) = path else {
        bail!("config {} names no data.{name} file", config.display());
    };
    let n_max = run.model.n_max.unwrap_or(usize::MAX);
    let mut data = read_split(&path, n_max)?;
    let inferred = (Vocab::covering(&data), longest(&[&data]));
    let model_cfg = run.model_config(Some(inferred))?;
    Vocab {
        n_items: model_cfg.n_items,
        n_categories: model_cfg.n_categories,
    }
    .remap_unknown(&mut data);

    let mut model = Model::new(model_cfg, run.train.seed)?;
    if !checkpoint.exists() {
        bail!("checkpoint {} does not exist", checkpoint.display());
    }
    model.load_params(load_checkpoint(&checkpoint)?)?;
    let epoch = fs::read_to_string(ckpt_dir.join(REPORT_FILE))
        .ok()
        .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
        .and_then(|v| v["best_epoch"].as_u64())
        .unwrap_or(0) as usize;
    let report = evaluate(&model, &data, &run.train, epoch)?;
    create_dir(&out)?;
    let dest = out.join(format!("eval_{name}.json"));
    write_json(&dest, &report)?;
    Ok((report, dest))
}

/// Result for one backbone and PE pair.
pub struct ComboResult {
    pub backbone: Backbone,
    pub variant: PeVariant,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub passed: bool,
}

pub fn parse_combo(s: &str) -> anyhow::Result<(Backbone, PeVariant)> {
    let Some((b, v)) = s.split_once('+') else {
        bail!("combo `{s}` must look like BACKBONE+VARIANT, e.g. din+cape");
    };
    Ok((b.parse()?, v.parse()?))
}

pub fn gradcheck(args: GradcheckArgs) -> anyhow::Result<Vec<ComboResult>> {
    let combos: Vec<(Backbone, PeVariant)> = match &args.combo {
        Some(c) => vec![parse_combo(c)?],
        None => Backbone::ALL
            .into_iter()
            .flat_map(|b| PeVariant::ALL.into_iter().map(move |v| (b, v)))
            .collect(),
    };
    let seed = args.seed.unwrap_or(0);
    let mut out = Vec::with_capacity(combos.len());
    for (backbone, variant) in combos {
        let checks = check_combo(backbone, variant, seed)?;
        let worst = checks
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .expect("every model has parameters");
        out.push(ComboResult {
            backbone,
            variant,
            max_rel_err: worst.max_rel_err,
            worst_param: worst.name.clone(),
            passed: checks.iter().all(|c| c.max_rel_err < args.tolerance),
        });
    }
    Ok(out)
}
