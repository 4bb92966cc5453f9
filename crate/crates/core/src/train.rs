//! Plain SGD training with per-epoch logging and best-validation checkpointing.
//!
//! A run directory holds:
//!
//! - `run.csv`: `epoch,train_loss,val_acc,val_cam_entropy`
//! - `best.ckpt`: weights of the best validation epoch
//! - `run.meta`: effective configuration and outcome as `key=value` lines;
//!   written last, so its presence marks a finished run

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::data::{self, Sample, Split};
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{self, Batch, LossConfig, LossVariant};
use crate::model::{CamClassifier, Geometry, InitSpec};

pub const RUN_CSV: &str = "run.csv";
pub const RUN_META: &str = "run.meta";
pub const CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: PathBuf,
}

impl TrainConfig {
    /// Desk defaults: lr 0.02, 40 epochs, batch 32.
    pub fn new(variant: LossVariant, seed: u64, dataset: impl Into<PathBuf>) -> Self {
        Self {
            loss: LossConfig::new(variant),
            learning_rate: 0.02,
            epochs: 40,
            batch_size: 32,
            seed,
            dataset: dataset.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.loss.validate()
    }

    pub fn run_name(&self) -> String {
        format!("{}_seed{}", self.loss.variant, self.seed)
    }
}

/// Train and validation samples held in memory.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    /// 7×7 range-normalized human maps of `train`
    human_grids: Vec<Option<Tensor>>,
    /// mean human-map entropy of `train`, when it has maps
    pub human_entropy_target: Option<f64>,
}

impl TrainData {
    pub fn new(train: Vec<Sample>, val: Vec<Sample>) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config("train and val splits must be non-empty".into()));
        }
        let human_grids = train.iter().map(|s| s.human_grid(7, 7)).collect::<Result<_>>()?;
        let target = data::human_entropy_target(&train).ok();
        Ok(Self {
            train,
            val,
            human_grids,
            human_entropy_target: target,
        })
    }

    pub fn load(root: &Path) -> Result<Self> {
        Self::new(data::load_split(root, Split::Train)?, data::load_split(root, Split::Val)?)
    }

    fn has_all_maps(&self) -> bool {
        self.human_grids.iter().all(Option::is_some)
    }

    /// Assemble the training samples at `idx` into a loss batch.
    pub fn batch(&self, idx: &[usize], target: Option<f64>, with_maps: bool) -> Result<Batch> {
        let images = data::image_batch(idx.iter().map(|&i| &self.train[i]))?;
        let human_maps = if with_maps {
            let grids: Vec<Tensor> = idx
                .iter()
                .map(|&i| self.human_grids[i].clone().expect("checked before training"))
                .collect();
            Some(Tensor::stack(&grids)?)
        } else {
            None
        };
        Ok(Batch {
            images,
            labels: idx.iter().map(|&i| self.train[i].label).collect(),
            human_maps,
            target_human_entropy: target,
        })
    }
}

/// One line of `run.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_cam_entropy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub variant: LossVariant,
    pub seed: u64,
    pub rows: Vec<EpochRow>,
    /// 1-based epoch with the highest validation accuracy, earliest on ties
    pub best_epoch: usize,
    pub checkpoint_sha256: String,
    pub run_dir: Option<PathBuf>,
    /// `key=value` lines of `run.meta`
    pub meta: Vec<(String, String)>,
}

impl RunRecord {
    pub fn best_row(&self) -> &EpochRow {
        &self.rows[self.best_epoch - 1]
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        self.run_dir.as_ref().map(|d| d.join(CHECKPOINT))
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_acc,val_cam_entropy\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_acc, r.val_cam_entropy);
        }
        s
    }

    pub fn meta_text(&self) -> String {
        self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Read a finished run back from its directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(RUN_META);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta = parse_key_values(&text, &meta_path)?;
        let get = |k: &str| {
            meta.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::format(&meta_path, format!("missing key {k}")))
        };
        let bad = |k: &str| Error::format(&meta_path, format!("bad value for {k}"));
        let variant: LossVariant = get("variant")?.parse().map_err(|_| bad("variant"))?;
        let seed: u64 = get("seed")?.parse().map_err(|_| bad("seed"))?;
        let best_epoch: usize = get("best_epoch")?.parse().map_err(|_| bad("best_epoch"))?;
        let checkpoint_sha256 = get("checkpoint_sha256")?;

        let csv_path = dir.join(RUN_CSV);
        let mut rdr = csv::Reader::from_path(&csv_path).map_err(|e| Error::format(&csv_path, e.to_string()))?;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::format(&csv_path, e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::format(&csv_path, "malformed row"))
            };
            rows.push(EpochRow {
                epoch: num(0)? as usize,
                train_loss: num(1)?,
                val_acc: num(2)?,
                val_cam_entropy: num(3)?,
            });
        }
        if best_epoch == 0 || best_epoch > rows.len() {
            return Err(bad("best_epoch"));
        }
        Ok(Self {
            variant,
            seed,
            rows,
            best_epoch,
            checkpoint_sha256,
            run_dir: Some(dir.to_path_buf()),
            meta,
        })
    }
}

/// Parse `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(origin, format!("line {}: expected key=value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// `p ← p − lr·g` for every parameter.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!("sgd_step: {} params, {} grads", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "sgd_step: parameter {i} {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (a, b) in p.data_mut().iter_mut().zip(g.data()) {
            *a -= lr * b;
        }
    }
    Ok(())
}

/// Training order for one epoch; depends only on (seed, epoch).
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Check that `data` can feed `config` before any training happens.
pub fn check_preconditions(config: &TrainConfig, data: &TrainData) -> Result<()> {
    config.validate()?;
    let v = config.loss.variant;
    if v.needs_human_maps() && !data.has_all_maps() {
        return Err(Error::Config(format!(
            "variant {v} requires human_maps for every training sample"
        )));
    }
    if v.needs_entropy_target() && data.human_entropy_target.is_none() {
        return Err(Error::Config(format!(
            "variant {v} requires target_human_entropy, which needs training human maps"
        )));
    }
    Ok(())
}

/// Train one model. Files are written to `out_dir` when given; `observer`
/// sees every epoch row together with that epoch's weights.
pub fn train_one(
    config: &TrainConfig,
    data: &TrainData,
    out_dir: Option<&Path>,
    mut observer: impl FnMut(&EpochRow, &CamClassifier),
) -> Result<RunRecord> {
    check_preconditions(config, data)?;
    let variant = config.loss.variant;
    let target = variant.needs_entropy_target().then_some(data.human_entropy_target).flatten();
    let with_maps = variant.needs_human_maps();

    let mut model = CamClassifier::init(InitSpec::new(config.seed), Geometry::default());
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut rows = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let order = epoch_order(config.seed, epoch, data.train.len());
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let batch = data.batch(idx, target, with_maps)?;
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let obj = losses::objective(&mut g, &model, &vars, &batch, &config.loss)?;
            let loss = g.value(obj.loss).item()?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{} seed {}: loss is {loss} at epoch {epoch}, batch {}",
                    variant,
                    config.seed,
                    bi + 1
                )));
            }
            let grads = g.backward(obj.loss)?;
            let gs: Vec<Tensor> = vars.params.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();
            sgd_step(model.params_mut(), &gs, config.learning_rate).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}, batch {}", bi + 1)),
                other => other,
            })?;
            loss_sum += loss * idx.len() as f64;
        }

        let val = eval::score(&model, &data.val)?;
        let val_h = eval::entropy_report(&model, &data.val)?;
        let row = EpochRow {
            epoch,
            train_loss: loss_sum / data.train.len() as f64,
            val_acc: val.accuracy(),
            val_cam_entropy: val_h.mean,
        };
        observer(&row, &model);
        if best.as_ref().is_none_or(|b| row.val_acc > b.1) {
            best = Some((epoch, row.val_acc, model.params().to_vec()));
        }
        rows.push(row);
    }

    let (best_epoch, best_acc, best_params) = best.expect("at least one epoch");
    model.params_mut().clone_from_slice(&best_params);
    let checksum = model.checksum();

    let mut meta: Vec<(String, String)> = vec![
        ("variant".into(), variant.to_string()),
        ("seed".into(), config.seed.to_string()),
        ("alpha".into(), config.loss.alpha.to_string()),
        ("beta".into(), config.loss.beta.to_string()),
        ("gamma".into(), config.loss.gamma.to_string()),
        ("learning_rate".into(), config.learning_rate.to_string()),
        ("epochs".into(), config.epochs.to_string()),
        ("batch_size".into(), config.batch_size.to_string()),
        ("dataset".into(), config.dataset.display().to_string()),
    ];
    if let Some(t) = target {
        meta.push(("human_entropy_target".into(), t.to_string()));
    }
    meta.extend([
        ("best_epoch".into(), best_epoch.to_string()),
        ("best_val_acc".into(), best_acc.to_string()),
        ("checkpoint".into(), CHECKPOINT.into()),
        ("checkpoint_sha256".into(), checksum.clone()),
    ]);

    let record = RunRecord {
        variant,
        seed: config.seed,
        rows,
        best_epoch,
        checkpoint_sha256: checksum,
        run_dir: out_dir.map(Path::to_path_buf),
        meta,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        model.save(&dir.join(CHECKPOINT))?;
        eval::write_text(&dir.join(RUN_CSV), &record.csv())?;
        eval::write_text(&dir.join(RUN_META), &record.meta_text())?;
    }
    Ok(record)
}

/// Outcome of one job of a suite.
#[derive(Debug)]
pub struct SuiteOutcome {
    pub config: TrainConfig,
    pub resumed: bool,
    pub result: Result<RunRecord>,
}

/// Directory of a run under a suite output root.
pub fn run_dir(out: &Path, config: &TrainConfig) -> PathBuf {
    out.join("runs").join(config.run_name())
}

/// Run every config on a pool of `workers` threads. Runs whose directory
/// already holds `run.meta` are loaded instead of retrained. Failures are
/// reported per run; the other runs continue.
pub fn train_suite(configs: &[TrainConfig], data: &TrainData, out: &Path, workers: usize) -> Result<Vec<SuiteOutcome>> {
    use rayon::prelude::*;

    let mut seeds: Vec<u64> = configs.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.len() < 2 {
        return Err(Error::Config(format!("a suite needs at least 2 seeds, got {}", seeds.len())));
    }
    for c in configs {
        check_preconditions(c, data)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(|| {
        configs
            .par_iter()
            .map(|c| {
                let dir = run_dir(out, c);
                if dir.join(RUN_META).is_file() {
                    return SuiteOutcome {
                        config: c.clone(),
                        resumed: true,
                        result: RunRecord::load(&dir),
                    };
                }
                SuiteOutcome {
                    config: c.clone(),
                    resumed: false,
                    result: train_one(c, data, Some(&dir), |_, _| {}),
                }
            })
            .collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn sgd_examples() {
        let mut p = vec![Tensor::scalar(1.0)];
        sgd_step(&mut p, &[Tensor::scalar(2.0)], 0.5).unwrap();
        assert_eq!(p[0].item().unwrap(), 0.0);

        let mut q = vec![Tensor::from_vec(vec![0.3, -2.0])];
        let before = q.clone();
        sgd_step(&mut q, &[Tensor::zeros(&[2])], 0.1).unwrap();
        assert_eq!(q, before);

        assert!(sgd_step(&mut q, &[Tensor::zeros(&[3])], 0.1).is_err());
        let e = sgd_step(&mut q, &[Tensor::from_vec(vec![f64::NAN, 0.0])], 0.1).unwrap_err();
        assert!(matches!(e, Error::NonFinite(_)));
        assert_eq!(q, before);
    }

    #[test]
    fn sgd_matches_elementwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let shapes = [vec![3, 4], vec![5], vec![2, 2, 3]];
        let mut params: Vec<Tensor> = shapes
            .iter()
            .map(|s| Tensor::new(s.clone(), (0..s.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let grads: Vec<Tensor> = shapes
            .iter()
            .map(|s| Tensor::new(s.clone(), (0..s.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let lr = 0.037;
        let mut expect: Vec<Vec<f64>> = params.iter().map(|p| p.data().to_vec()).collect();
        for (e, g) in expect.iter_mut().zip(&grads) {
            for i in 0..e.len() {
                e[i] -= lr * g.data()[i];
            }
        }
        sgd_step(&mut params, &grads, lr).unwrap();
        for (p, e) in params.iter().zip(&expect) {
            assert_eq!(p.data(), e.as_slice());
        }
    }

    #[test]
    fn order_depends_on_seed_and_epoch() {
        assert_eq!(epoch_order(3, 1, 50), epoch_order(3, 1, 50));
        assert_ne!(epoch_order(3, 1, 50), epoch_order(3, 2, 50));
        assert_ne!(epoch_order(3, 1, 50), epoch_order(4, 1, 50));
        let mut o = epoch_order(9, 5, 100);
        o.sort_unstable();
        assert_eq!(o, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(LossVariant::Ce, 1, "d");
        assert!(c.validate().is_ok());
        c.learning_rate = -1.0;
        assert!(c.validate().unwrap_err().is_config());
        c.learning_rate = 0.0;
        c.epochs = 0;
        assert!(c.validate().unwrap_err().is_config());
        assert_eq!(TrainConfig::new(LossVariant::CyborgDroid, 4, "d").run_name(), "cyborg_droid_seed4");
    }

    #[test]
    fn key_values() {
        let kv = parse_key_values("# c\na = 1\n\nb=x=y\n", Path::new("f")).unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "x=y".into())]);
        assert!(parse_key_values("novalue\n", Path::new("f")).is_err());
    }
}
