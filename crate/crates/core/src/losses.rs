//! The six training objectives as differentiable scalars over a batch.
//!
//! | variant        | objective                                          |
//! |----------------|----------------------------------------------------|
//! | `ce`           | α·CE                                               |
//! | `cyborg`       | (1−α)·MSE(human, CAM) + α·CE                       |
//! | `hseb`         | (1−α)·(mean H − H_human)² + α·CE                   |
//! | `fmmmse`       | (1−α)·mean H + α·CE                                |
//! | `droid`        | (1−α)·mean ln max(H, ε_H) + α·CE                   |
//! | `cyborg_droid` | α·MSE + β·mean ln max(H, ε_H) + γ·CE               |
//!
//! The model salience is the range-normalized CAM of the true class. The MSE
//! compares it with the human map, H is the entropy of its probability
//! normalization, and every term is a batch mean.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{CamClassifier, ModelVars};
use crate::salience::{self, MapBatch, SalienceState};

/// Floor applied to CAM entropy before the logarithm in DROID.
pub const DROID_ENTROPY_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossVariant {
    Ce,
    Cyborg,
    Hseb,
    Fmmmse,
    Droid,
    CyborgDroid,
}

impl LossVariant {
    pub const ALL: [LossVariant; 6] = [
        LossVariant::Ce,
        LossVariant::Cyborg,
        LossVariant::Hseb,
        LossVariant::Fmmmse,
        LossVariant::Droid,
        LossVariant::CyborgDroid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::Ce => "ce",
            LossVariant::Cyborg => "cyborg",
            LossVariant::Hseb => "hseb",
            LossVariant::Fmmmse => "fmmmse",
            LossVariant::Droid => "droid",
            LossVariant::CyborgDroid => "cyborg_droid",
        }
    }

    pub fn needs_human_maps(self) -> bool {
        matches!(self, LossVariant::Cyborg | LossVariant::CyborgDroid)
    }

    pub fn needs_entropy_target(self) -> bool {
        self == LossVariant::Hseb
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['+', '-'], "_");
        LossVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown loss variant '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossConfig {
    /// Default weights: α = 1 for CE, α = 0.5 for the two-term losses,
    /// and (α, β, γ) = (0.5, 0.3, 0.5) for CYBORG+DROID.
    pub fn new(variant: LossVariant) -> Self {
        let (alpha, beta, gamma) = match variant {
            LossVariant::Ce => (1.0, 0.0, 0.0),
            LossVariant::CyborgDroid => (0.5, 0.3, 0.5),
            _ => (0.5, 0.0, 0.0),
        };
        Self {
            variant,
            alpha,
            beta,
            gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// One training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// (K, C, H, W)
    pub images: Tensor,
    /// 0 = real, 1 = synthetic
    pub labels: Vec<usize>,
    /// (K, h, w) range-normalized human maps at CAM resolution
    pub human_maps: Option<Tensor>,
    /// Target CAM entropy in nats for HSEB.
    pub target_human_entropy: Option<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Check the batch carries everything `variant` needs.
    pub fn check(&self, variant: LossVariant) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::InvalidArgument("batch: no samples".into()));
        }
        if self.images.shape().first() != Some(&self.labels.len()) {
            return Err(Error::Shape(format!(
                "batch: {} labels for images {:?}",
                self.labels.len(),
                self.images.shape()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidArgument(format!("batch: label {bad} is not 0 or 1")));
        }
        if variant.needs_human_maps() && self.human_maps.is_none() {
            return Err(Error::Config(format!("variant {variant} requires human_maps")));
        }
        if variant.needs_entropy_target() && self.target_human_entropy.is_none() {
            return Err(Error::Config(format!("variant {variant} requires target_human_entropy")));
        }
        Ok(())
    }
}

fn require(maps: MapBatch, state: SalienceState, what: &str) -> Result<()> {
    if maps.state != state {
        return Err(Error::InvalidArgument(format!("{what}: expected {state:?} maps, got {:?}", maps.state)));
    }
    Ok(())
}

/// Mean over the batch of −ln softmax(logits)[label].
pub fn classification_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = g.log_softmax(logits)?;
    let picked = g.pick_last(logp, labels)?;
    let m = g.mean(picked);
    Ok(g.neg(m))
}

/// Mean squared difference between human and model range-normalized maps,
/// averaged over cells and then over the batch.
pub fn mse_component(g: &mut Graph, human: Var, model_maps: MapBatch) -> Result<Var> {
    require(model_maps, SalienceState::Range01, "mse_component")?;
    if g.value(human).shape() != g.value(model_maps.var).shape() {
        return Err(Error::Shape(format!(
            "mse_component: human maps {:?} vs model maps {:?}",
            g.value(human).shape(),
            g.value(model_maps.var).shape()
        )));
    }
    let d = g.sub(human, model_maps.var)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// (1−α)·MSE + α·CE.
pub fn cyborg_loss(
    g: &mut Graph,
    human: Var,
    model_maps: MapBatch,
    logits: Var,
    labels: &[usize],
    alpha: f64,
) -> Result<Var> {
    let mse = mse_component(g, human, model_maps)?;
    let ce = classification_loss(g, logits, labels)?;
    weighted_sum(g, &[(1.0 - alpha, mse), (alpha, ce)])
}

/// (batch-mean CAM entropy − target)².
pub fn hseb_component(g: &mut Graph, model_maps: MapBatch, target: f64) -> Result<Var> {
    require(model_maps, SalienceState::Probability, "hseb_component")?;
    let s = g.value(model_maps.var).shape();
    let max = ((s[1] * s[2]) as f64).ln();
    if !(0.0..=max).contains(&target) {
        return Err(Error::InvalidArgument(format!(
            "hseb_component: target entropy {target} outside [0, {max}]"
        )));
    }
    let h = salience::mean_entropy_batch(g, model_maps)?;
    let d = g.add_scalar(h, -target);
    Ok(g.square(d))
}

/// Batch-mean CAM entropy.
pub fn fmmmse_component(g: &mut Graph, model_maps: MapBatch) -> Result<Var> {
    require(model_maps, SalienceState::Probability, "fmmmse_component")?;
    salience::mean_entropy_batch(g, model_maps)
}

/// Batch mean of ln max(H, ε_H).
pub fn droid_component(g: &mut Graph, model_maps: MapBatch) -> Result<Var> {
    require(model_maps, SalienceState::Probability, "droid_component")?;
    let h = salience::entropy_batch(g, model_maps)?;
    let h = g.clamp_min(h, DROID_ENTROPY_FLOOR);
    let l = g.ln(h);
    Ok(g.mean(l))
}

fn weighted_sum(g: &mut Graph, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let t = g.scale(v, w);
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidArgument("weighted_sum: no terms".into()))
}

/// Dispatch to the variant's objective.
pub fn combined_loss(
    g: &mut Graph,
    batch: &Batch,
    range01_maps: MapBatch,
    probability_maps: MapBatch,
    logits: Var,
    config: &LossConfig,
) -> Result<Var> {
    batch.check(config.variant)?;
    config.validate()?;
    let labels = &batch.labels;
    let human = |g: &mut Graph| -> Result<Var> {
        let t = batch
            .human_maps
            .as_ref()
            .ok_or_else(|| Error::Config(format!("variant {} requires human_maps", config.variant)))?;
        Ok(g.constant(t.clone()))
    };
    let alpha = config.alpha;
    match config.variant {
        LossVariant::Ce => {
            let ce = classification_loss(g, logits, labels)?;
            Ok(g.scale(ce, alpha))
        }
        LossVariant::Cyborg => {
            let h = human(g)?;
            cyborg_loss(g, h, range01_maps, logits, labels, alpha)
        }
        LossVariant::Hseb | LossVariant::Fmmmse | LossVariant::Droid => {
            let sec = match config.variant {
                LossVariant::Hseb => {
                    let target = batch
                        .target_human_entropy
                        .ok_or_else(|| Error::Config("variant hseb requires target_human_entropy".into()))?;
                    hseb_component(g, probability_maps, target)?
                }
                LossVariant::Fmmmse => fmmmse_component(g, probability_maps)?,
                _ => droid_component(g, probability_maps)?,
            };
            let ce = classification_loss(g, logits, labels)?;
            weighted_sum(g, &[(1.0 - alpha, sec), (alpha, ce)])
        }
        LossVariant::CyborgDroid => {
            let h = human(g)?;
            let mse = mse_component(g, h, range01_maps)?;
            let droid = droid_component(g, probability_maps)?;
            let ce = classification_loss(g, logits, labels)?;
            weighted_sum(g, &[(alpha, mse), (config.beta, droid), (config.gamma, ce)])
        }
    }
}

/// Nodes produced by running a batch through model, CAM and loss.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub loss: Var,
    pub logits: Var,
    /// (K) per-sample CAM entropy of the true class
    pub entropies: Var,
}

/// Forward pass, true-class CAM, its range and probability normalizations,
/// and the configured loss.
pub fn objective(
    g: &mut Graph,
    model: &CamClassifier,
    vars: &ModelVars,
    batch: &Batch,
    config: &LossConfig,
) -> Result<Objective> {
    batch.check(config.variant)?;
    let images = g.constant(batch.images.clone());
    let out = model.forward(g, vars, images)?;
    let cam = salience::cam_batch(g, out.features, vars.head_weight(), &batch.labels)?;
    let range01 = salience::range01_batch(g, cam)?;
    let prob = salience::probability_batch(g, range01)?;
    let entropies = salience::entropy_batch(g, prob)?;
    let loss = combined_loss(g, batch, range01, prob, out.logits, config)?;
    Ok(Objective {
        loss,
        logits: out.logits,
        entropies,
    })
}
