//! Command-line front end: `gen`, `train`, `eval`, `suite` and `report`.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 configuration or usage
//! error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{self, DatasetCounts, GenerateOptions, GeneratorFamily, Split};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, RunSummary};
use crate::losses::{LossConfig, LossVariant};
use crate::model::{CamClassifier, Geometry};
use crate::train::{self, TrainConfig, TrainData};

/// Environment variable holding the suite worker count.
pub const WORKERS_ENV: &str = "FOCUSLAB_WORKERS";
/// Synthetic family held out from training and used for headline AUROC.
pub const HELD_OUT: GeneratorFamily = GeneratorFamily::GenC;
/// Per-run evaluation file written next to `run.meta`.
pub const RUN_EVAL: &str = "eval_test.csv";

#[derive(Debug, Parser)]
#[command(name = "focuslab", version, about = "Entropy-controlled saliency training lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset tree with manifests.
    Gen(GenArgs),
    /// Train one (variant, seed) run.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train and evaluate every (variant, seed) pair, then aggregate.
    Suite(ExperimentArgs),
    /// Rebuild aggregate CSVs from finished suite runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub train_n: usize,
    #[arg(long, default_value_t = 400)]
    pub val_n: usize,
    #[arg(long, default_value_t = 2000)]
    pub test_n: usize,
    /// Write "-" in place of every human map.
    #[arg(long)]
    pub no_human_maps: bool,
}

/// Experiment settings; flags override values from `--config`.
#[derive(Debug, Args, Default, Clone)]
pub struct ExperimentArgs {
    /// key=value file
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// comma-separated variant names
    #[arg(long)]
    pub variants: Option<String>,
    /// comma-separated seeds
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub variant: String,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub experiment: ExperimentArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Directory for report files; the summary goes to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub out: PathBuf,
}

/// Fully resolved experiment configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub variants: Vec<LossVariant>,
    pub seeds: Vec<u64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

const KEYS: [&str; 10] = [
    "dataset",
    "out",
    "variants",
    "seeds",
    "alpha",
    "beta",
    "gamma",
    "lr",
    "epochs",
    "batch_size",
];

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{s}'"))))
        .collect()
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

impl ExperimentConfig {
    /// Merge the optional config file with flag overrides.
    pub fn resolve(args: &ExperimentArgs) -> Result<Self> {
        let mut kv = BTreeMap::new();
        if let Some(path) = &args.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (k, v) in train::parse_key_values(&text, path).map_err(|e| Error::Config(e.to_string()))? {
                if !KEYS.contains(&k.as_str()) {
                    return Err(Error::Config(format!("{}: unknown key '{k}'", path.display())));
                }
                kv.insert(k, v);
            }
        }
        let flag = |k: &str, v: Option<String>, kv: &mut BTreeMap<String, String>| {
            if let Some(v) = v {
                kv.insert(k.to_string(), v);
            }
        };
        flag("dataset", args.dataset.as_ref().map(|p| p.display().to_string()), &mut kv);
        flag("out", args.out.as_ref().map(|p| p.display().to_string()), &mut kv);
        flag("variants", args.variants.clone(), &mut kv);
        flag("seeds", args.seeds.clone(), &mut kv);
        flag("alpha", args.alpha.map(|v| v.to_string()), &mut kv);
        flag("beta", args.beta.map(|v| v.to_string()), &mut kv);
        flag("gamma", args.gamma.map(|v| v.to_string()), &mut kv);
        flag("lr", args.lr.map(|v| v.to_string()), &mut kv);
        flag("epochs", args.epochs.map(|v| v.to_string()), &mut kv);
        flag("batch_size", args.batch_size.map(|v| v.to_string()), &mut kv);

        let need = |k: &str| kv.get(k).cloned().ok_or_else(|| Error::Config(format!("missing required setting '{k}'")));
        let defaults = TrainConfig::new(LossVariant::Ce, 0, "");
        let cfg = Self {
            dataset: need("dataset")?.into(),
            out: need("out")?.into(),
            variants: match kv.get("variants") {
                Some(v) => parse_list("variants", v)?,
                None => LossVariant::ALL.to_vec(),
            },
            seeds: match kv.get("seeds") {
                Some(v) => parse_list("seeds", v)?,
                None => (1..=5).collect(),
            },
            alpha: kv.get("alpha").map(|v| parse_num("alpha", v)).transpose()?,
            beta: kv.get("beta").map(|v| parse_num("beta", v)).transpose()?,
            gamma: kv.get("gamma").map(|v| parse_num("gamma", v)).transpose()?,
            learning_rate: kv.get("lr").map_or(Ok(defaults.learning_rate), |v| parse_num("lr", v))?,
            epochs: kv.get("epochs").map_or(Ok(defaults.epochs), |v| parse_num("epochs", v))?,
            batch_size: kv.get("batch_size").map_or(Ok(defaults.batch_size), |v| parse_num("batch_size", v))?,
        };
        if cfg.variants.is_empty() || cfg.seeds.is_empty() {
            return Err(Error::Config("variants and seeds must be non-empty".into()));
        }
        Ok(cfg)
    }

    pub fn train_config(&self, variant: LossVariant, seed: u64) -> Result<TrainConfig> {
        let mut loss = LossConfig::new(variant);
        if let Some(a) = self.alpha {
            loss.alpha = a;
        }
        if let Some(b) = self.beta {
            loss.beta = b;
        }
        if let Some(g) = self.gamma {
            loss.gamma = g;
        }
        let c = TrainConfig {
            loss,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            dataset: self.dataset.clone(),
        };
        c.validate()?;
        Ok(c)
    }
}

/// Worker count from the environment, defaulting to the available cores.
pub fn workers_from_env() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{WORKERS_ENV} must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Suite(a) => cmd_suite(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

/// Map a result to the process exit code, printing any error.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

pub fn cmd_gen(a: &GenArgs) -> Result<()> {
    let mut o = GenerateOptions::new(a.seed, DatasetCounts::balanced(a.train_n, a.val_n, a.test_n));
    o.human_maps = !a.no_human_maps;
    let ms = data::generate_dataset(&a.out, &o)?;
    for m in ms {
        eprintln!("{}: {} samples", m.split, m.rows.len());
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let variant: LossVariant = a.variant.parse()?;
    let exp = ExperimentConfig::resolve(&a.experiment)?;
    let config = exp.train_config(variant, a.seed)?;
    let data = TrainData::load(&exp.dataset)?;
    train::check_preconditions(&config, &data)?;
    let dir = train::run_dir(&exp.out, &config);
    let rec = train::train_one(&config, &data, Some(&dir), |row, _| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  val_acc {:.4}  val_cam_entropy {:.4}",
            row.epoch, row.train_loss, row.val_acc, row.val_cam_entropy
        );
    })?;
    println!("{}", dir.display());
    print!("{}", rec.meta_text());
    Ok(())
}

fn write_eval(dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    eval::write_text(&dir.join(format!("{stem}.csv")), &report.to_csv())?;
    eval::write_text(&dir.join(format!("{stem}_samples.csv")), &report.samples_csv())?;
    if !report.roc.is_empty() {
        eval::write_text(&dir.join(format!("{stem}_roc.csv")), &eval::roc_csv(&report.roc))?;
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let model = CamClassifier::load(&a.checkpoint, Geometry::default())?;
    let samples = data::load_split(&a.dataset, split)?;
    let report = eval::evaluate(&model, &samples)?;
    match &a.out {
        Some(dir) => write_eval(dir, &format!("eval_{split}"), &report)?,
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

/// Held-out AUROC and mean CAM entropy of a finished run, from its evaluation file.
fn read_run_summary(dir: &Path, variant: LossVariant, seed: u64) -> Result<RunSummary> {
    let path = dir.join(RUN_EVAL);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut auroc = None;
    let mut entropy = None;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::format(&path, format!("malformed row '{line}'")));
        }
        let v: f64 = f[2].parse().map_err(|_| Error::format(&path, format!("bad value '{}'", f[2])))?;
        match (f[0], f[1]) {
            ("auroc", g) if g == HELD_OUT.as_str() => auroc = Some(v),
            ("cam_entropy", "ALL") => entropy = Some(v),
            _ => {}
        }
    }
    Ok(RunSummary {
        variant,
        seed,
        auroc: auroc.ok_or_else(|| Error::format(&path, format!("no {HELD_OUT} auroc row")))?,
        cam_entropy: entropy.ok_or_else(|| Error::format(&path, "no cam_entropy row"))?,
    })
}

/// Write scatter, summary, boxplot and metadata files under `out`.
pub fn write_aggregates(out: &Path, runs: &[RunSummary]) -> Result<Vec<eval::VariantSummary>> {
    let summary = eval::aggregate(runs)?;
    eval::write_text(&out.join("scatter.csv"), &eval::scatter_csv(runs))?;
    eval::write_text(&out.join("summary.csv"), &eval::summary_csv(&summary))?;
    eval::write_text(&out.join("boxplot.csv"), &eval::boxplot_csv(&summary))?;
    let meta = format!(
        "entropy_split=test\nauroc_split=test\nauroc_family={HELD_OUT}\nruns={}\n",
        runs.len()
    );
    eval::write_text(&out.join("summary.meta"), &meta)?;
    Ok(summary)
}

pub fn cmd_suite(a: &ExperimentArgs) -> Result<()> {
    let exp = ExperimentConfig::resolve(a)?;
    let workers = workers_from_env()?;
    let mut configs = Vec::new();
    for &v in &exp.variants {
        for &s in &exp.seeds {
            configs.push(exp.train_config(v, s)?);
        }
    }
    let data = TrainData::load(&exp.dataset)?;
    let test = data::load_split(&exp.dataset, Split::Test)?;
    fs::create_dir_all(&exp.out).map_err(|e| Error::io(&exp.out, e))?;

    let outcomes = train::train_suite(&configs, &data, &exp.out, workers)?;
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        let name = o.config.run_name();
        let rec = match o.result {
            Ok(r) => r,
            Err(e) => {
                eprintln!("{name}: FAILED: {e}");
                failures.push(name);
                continue;
            }
        };
        let dir = train::run_dir(&exp.out, &o.config);
        let model = CamClassifier::load(&dir.join(train::CHECKPOINT), Geometry::default())?;
        let report = eval::evaluate(&model, &test)?;
        eval::write_text(&dir.join(RUN_EVAL), &report.to_csv())?;
        let held = report.scores.restrict(HELD_OUT);
        let roc = eval::roc_curve(&held.scores, &held.labels)?;
        eval::write_text(
            &exp.out.join(format!("roc_{}_{}.csv", rec.variant, rec.seed)),
            &eval::roc_csv(&roc),
        )?;
        let summary = read_run_summary(&dir, rec.variant, rec.seed)?;
        eprintln!(
            "{name}{}: best_epoch {} cam_entropy {:.4} auroc_{HELD_OUT} {:.4}",
            if o.resumed { " (resumed)" } else { "" },
            rec.best_epoch,
            summary.cam_entropy,
            summary.auroc
        );
        runs.push(summary);
    }
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no run finished".into()));
    }
    let summary = write_aggregates(&exp.out, &runs)?;
    print!("{}", eval::summary_csv(&summary));
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{} run(s) failed: {}", failures.len(), failures.join(", "))))
    }
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let runs_dir = a.out.join("runs");
    let entries = fs::read_dir(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
    let mut runs = Vec::new();
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    dirs.sort();
    for dir in dirs {
        if !dir.join(train::RUN_META).is_file() || !dir.join(RUN_EVAL).is_file() {
            continue;
        }
        let rec = train::RunRecord::load(&dir)?;
        runs.push(read_run_summary(&dir, rec.variant, rec.seed)?);
    }
    if runs.is_empty() {
        return Err(Error::InvalidArgument(format!("no evaluated runs under {}", runs_dir.display())));
    }
    let summary = write_aggregates(&a.out, &runs)?;
    print!("{}", eval::summary_csv(&summary));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolve_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.conf");
        fs::write(&p, "dataset=d\nout=o\nlearning_rate=0.1\n").unwrap();
        let args = ExperimentArgs {
            config: Some(p),
            ..Default::default()
        };
        let e = ExperimentConfig::resolve(&args).unwrap_err();
        assert!(e.is_config() && e.to_string().contains("learning_rate"), "{e}");
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.conf");
        fs::write(&p, "# desk run\ndataset=d\nout=o\nepochs=3\nvariants=ce, droid\nseeds=4,5\n").unwrap();
        let args = ExperimentArgs {
            config: Some(p),
            epochs: Some(7),
            ..Default::default()
        };
        let c = ExperimentConfig::resolve(&args).unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.variants, vec![LossVariant::Ce, LossVariant::Droid]);
        assert_eq!(c.seeds, vec![4, 5]);
        assert_eq!(c.batch_size, 32);
    }

    #[test]
    fn missing_dataset_is_config_error() {
        let args = ExperimentArgs {
            out: Some("o".into()),
            ..Default::default()
        };
        assert!(ExperimentConfig::resolve(&args).unwrap_err().is_config());
    }

    #[test]
    fn weight_overrides_apply() {
        let args = ExperimentArgs {
            dataset: Some("d".into()),
            out: Some("o".into()),
            beta: Some(0.1),
            ..Default::default()
        };
        let c = ExperimentConfig::resolve(&args).unwrap();
        let t = c.train_config(LossVariant::CyborgDroid, 1).unwrap();
        assert_eq!((t.loss.alpha, t.loss.beta, t.loss.gamma), (0.5, 0.1, 0.5));
    }
}
