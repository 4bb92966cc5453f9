//! Scoring, ROC/AUROC, CAM entropy statistics and multi-seed aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::{softmax_row, Graph};
use crate::data::{self, GeneratorFamily, Sample};
use crate::error::{Error, Result};
use crate::losses::LossVariant;
use crate::model::CamClassifier;
use crate::salience;

/// Samples per inference forward pass.
const CHUNK: usize = 100;

/// Probability of the synthetic class under a two-logit softmax.
pub fn synthetic_probability(logits: &[f64]) -> Result<f64> {
    if logits.len() != 2 {
        return Err(Error::Shape(format!("expected 2 logits, got {}", logits.len())));
    }
    Ok(softmax_row(logits)[1])
}

/// Per-sample model outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub scores: Vec<f64>,
    /// entropy of the probability-normalized range01 true-class CAM
    pub entropies: Vec<f64>,
}

/// Forward `samples` without gradients.
pub fn infer(model: &CamClassifier, samples: &[Sample]) -> Result<Inference> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut entropies = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let images = g.constant(data::image_batch(chunk)?);
        let out = model.forward(&mut g, &vars, images)?;
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let cam = salience::cam_batch(&mut g, out.features, vars.head_weight(), &labels)?;
        let range01 = salience::range01_batch(&mut g, cam)?;
        let prob = salience::probability_batch(&mut g, range01)?;
        let h = salience::entropy_batch(&mut g, prob)?;
        for row in g.value(out.logits).data().chunks(2) {
            scores.push(synthetic_probability(row)?);
        }
        entropies.extend_from_slice(g.value(h).data());
    }
    Ok(Inference { scores, entropies })
}

/// Scores with labels (1 = synthetic) and generator families.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
    pub generators: Vec<Option<GeneratorFamily>>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<usize>, generators: Vec<Option<GeneratorFamily>>) -> Result<Self> {
        if scores.len() != labels.len() || scores.len() != generators.len() {
            return Err(Error::Shape(format!(
                "score set: {} scores, {} labels, {} generators",
                scores.len(),
                labels.len(),
                generators.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidArgument(format!("score {s} outside [0, 1]")));
        }
        Ok(Self {
            scores,
            labels,
            generators,
        })
    }

    /// Real samples plus the synthetic ones from `family`.
    pub fn restrict(&self, family: GeneratorFamily) -> Self {
        let keep: Vec<usize> = (0..self.scores.len())
            .filter(|&i| self.labels[i] == 0 || self.generators[i] == Some(family))
            .collect();
        Self {
            scores: keep.iter().map(|&i| self.scores[i]).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            generators: keep.iter().map(|&i| self.generators[i]).collect(),
        }
    }

    /// Fraction of samples where `score > 0.5` agrees with the label.
    pub fn accuracy(&self) -> f64 {
        let hits = self
            .scores
            .iter()
            .zip(&self.labels)
            .filter(|&(&s, &l)| (s > 0.5) == (l == 1))
            .count();
        hits as f64 / self.scores.len().max(1) as f64
    }
}

/// Softmax probability of the synthetic class for each sample.
pub fn score(model: &CamClassifier, samples: &[Sample]) -> Result<ScoreSet> {
    let inf = infer(model, samples)?;
    ScoreSet::new(
        inf.scores,
        samples.iter().map(|s| s.label).collect(),
        samples.iter().map(|s| s.generator).collect(),
    )
}

fn class_counts(labels: &[usize]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(format!(
            "auroc needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// P(score of a synthetic sample > score of a real one) + ½ P(tie), by midranks.
pub fn auroc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("auroc: {} scores, {} labels", scores.len(), labels.len())));
    }
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps midranks integral
    let mut rank2_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        rank2_sum += mid2 * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    let u2 = rank2_sum - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// ROC points (FPR, TPR) at every distinct threshold, from (0, 0) to (1, 1).
pub fn roc_curve(scores: &[f64], labels: &[usize]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("roc: {} scores, {} labels", scores.len(), labels.len())));
    }
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(pts)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyReport {
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

/// True-class CAM entropy of every sample, taken after range and then
/// probability normalization.
pub fn entropy_report(model: &CamClassifier, samples: &[Sample]) -> Result<EntropyReport> {
    let inf = infer(model, samples)?;
    let mean = mean(&inf.entropies)?;
    Ok(EntropyReport {
        per_sample: inf.entropies,
        mean,
    })
}

/// Evaluation of one model on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// over all samples, when both classes are present
    pub auroc: Option<f64>,
    pub roc: Vec<(f64, f64)>,
    pub mean_cam_entropy: f64,
    /// real samples against each synthetic family present
    pub per_generator: Vec<(GeneratorFamily, f64)>,
    pub scores: ScoreSet,
    pub entropies: Vec<f64>,
}

pub fn evaluate(model: &CamClassifier, samples: &[Sample]) -> Result<EvalReport> {
    let inf = infer(model, samples)?;
    let scores = ScoreSet::new(
        inf.scores,
        samples.iter().map(|s| s.label).collect(),
        samples.iter().map(|s| s.generator).collect(),
    )?;
    let both = class_counts(&scores.labels).is_ok();
    let mut per_generator = Vec::new();
    for family in GeneratorFamily::ALL {
        if !scores.generators.contains(&Some(family)) {
            continue;
        }
        let sub = scores.restrict(family);
        if class_counts(&sub.labels).is_ok() {
            per_generator.push((family, auroc(&sub.scores, &sub.labels)?));
        }
    }
    Ok(EvalReport {
        accuracy: scores.accuracy(),
        auroc: if both { Some(auroc(&scores.scores, &scores.labels)?) } else { None },
        roc: if both { roc_curve(&scores.scores, &scores.labels)? } else { Vec::new() },
        mean_cam_entropy: mean(&inf.entropies)?,
        per_generator,
        scores,
        entropies: inf.entropies,
    })
}

impl EvalReport {
    pub fn generator_auroc(&self, family: GeneratorFamily) -> Option<f64> {
        self.per_generator.iter().find(|(g, _)| *g == family).map(|&(_, a)| a)
    }

    /// `metric,generator,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,generator,value\n");
        let _ = writeln!(s, "accuracy,ALL,{}", self.accuracy);
        if let Some(a) = self.auroc {
            let _ = writeln!(s, "auroc,ALL,{a}");
        }
        for (g, a) in &self.per_generator {
            let _ = writeln!(s, "auroc,{g},{a}");
        }
        let _ = writeln!(s, "cam_entropy,ALL,{}", self.mean_cam_entropy);
        s
    }

    pub fn samples_csv(&self) -> String {
        let mut s = String::from("index,label,generator,score,cam_entropy\n");
        for i in 0..self.scores.scores.len() {
            let g = self.scores.generators[i].map_or(data::REAL_GENERATOR, GeneratorFamily::as_str);
            let _ = writeln!(
                s,
                "{i},{},{g},{},{}",
                self.scores.labels[i], self.scores.scores[i], self.entropies[i]
            );
        }
        s
    }
}

pub fn roc_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("fpr,tpr\n");
    for (f, t) in points {
        let _ = writeln!(s, "{f},{t}");
    }
    s
}

pub fn mean(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("mean of an empty list".into()));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Population standard deviation.
pub fn std_dev(v: &[f64]) -> Result<f64> {
    let m = mean(v)?;
    Ok((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
}

/// Quantile by piecewise-linear interpolation between order statistics placed
/// at (i − ½)/n.
pub fn quantile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("quantile {p} of {} values", values.len())));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let h = (n as f64 * p + 0.5).clamp(1.0, n as f64);
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    let a = v[lo - 1];
    Ok(if lo < n { a + frac * (v[lo] - a) } else { a })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
}

impl BoxStats {
    pub fn new(values: &[f64]) -> Result<Self> {
        let q1 = quantile(values, 0.25)?;
        let median = quantile(values, 0.5)?;
        let q3 = quantile(values, 0.75)?;
        let iqr = q3 - q1;
        Ok(Self {
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            q1,
            median,
            q3,
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            whisker_low: q1 - 1.5 * iqr,
            whisker_high: q3 + 1.5 * iqr,
        })
    }
}

/// Headline numbers of one trained run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub variant: LossVariant,
    pub seed: u64,
    /// mean test CAM entropy of the best checkpoint
    pub cam_entropy: f64,
    /// held-out family AUROC
    pub auroc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: LossVariant,
    pub seeds: usize,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub entropy_mean: f64,
    pub entropy_std: f64,
    pub auroc_box: BoxStats,
    pub entropy_box: BoxStats,
}

/// Per-variant statistics, ordered by mean AUROC descending.
pub fn aggregate(runs: &[RunSummary]) -> Result<Vec<VariantSummary>> {
    let mut by: BTreeMap<LossVariant, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        by.entry(r.variant).or_default().push(r);
    }
    if by.is_empty() {
        return Err(Error::InvalidArgument("aggregate: no runs".into()));
    }
    let mut out = Vec::new();
    for (variant, rs) in by {
        if rs.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "aggregate: variant {variant} has {} seed(s), need at least 2",
                rs.len()
            )));
        }
        let a: Vec<f64> = rs.iter().map(|r| r.auroc).collect();
        let e: Vec<f64> = rs.iter().map(|r| r.cam_entropy).collect();
        out.push(VariantSummary {
            variant,
            seeds: rs.len(),
            auroc_mean: mean(&a)?,
            auroc_std: std_dev(&a)?,
            entropy_mean: mean(&e)?,
            entropy_std: std_dev(&e)?,
            auroc_box: BoxStats::new(&a)?,
            entropy_box: BoxStats::new(&e)?,
        });
    }
    out.sort_by(|x, y| y.auroc_mean.total_cmp(&x.auroc_mean).then(x.variant.cmp(&y.variant)));
    Ok(out)
}

pub fn scatter_csv(runs: &[RunSummary]) -> String {
    let mut rs: Vec<&RunSummary> = runs.iter().collect();
    rs.sort_by_key(|r| (r.variant, r.seed));
    let mut s = String::from("variant,seed,cam_entropy,auroc\n");
    for r in rs {
        let _ = writeln!(s, "{},{},{},{}", r.variant, r.seed, r.cam_entropy, r.auroc);
    }
    s
}

pub fn summary_csv(summary: &[VariantSummary]) -> String {
    let mut s = String::from("variant,auroc_mean,auroc_std,entropy_mean,entropy_std\n");
    for v in summary {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            v.variant, v.auroc_mean, v.auroc_std, v.entropy_mean, v.entropy_std
        );
    }
    s
}

pub fn boxplot_csv(summary: &[VariantSummary]) -> String {
    let mut s = String::from("variant,metric,min,whisker_low,q1,median,q3,whisker_high,max\n");
    for v in summary {
        for (metric, b) in [("auroc", &v.auroc_box), ("cam_entropy", &v.entropy_box)] {
            let _ = writeln!(
                s,
                "{},{metric},{},{},{},{},{},{},{}",
                v.variant, b.min, b.whisker_low, b.q1, b.median, b.q3, b.whisker_high, b.max
            );
        }
    }
    s
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
