//! Procedural scenes: a smooth random texture, plus one local artifact on
//! synthetic images, and the matching synthetic human salience.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Side of generated images and human maps in pixels.
pub const IMAGE_SIZE: usize = 56;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Class {
    Real,
    Synthetic,
}

impl Class {
    pub fn label(self) -> usize {
        match self {
            Class::Real => 0,
            Class::Synthetic => 1,
        }
    }

    pub fn from_label(label: usize) -> Result<Self> {
        match label {
            0 => Ok(Class::Real),
            1 => Ok(Class::Synthetic),
            _ => Err(Error::InvalidArgument(format!("label {label} is not 0 or 1"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Class::Real => "real",
            Class::Synthetic => "synthetic",
        }
    }
}

/// Artifact family of a synthetic image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GeneratorFamily {
    /// periodic grid patch
    GenA,
    /// ringing edge
    GenB,
    /// 2-px checkerboard block, held out from training
    GenC,
}

impl GeneratorFamily {
    pub const ALL: [GeneratorFamily; 3] = [GeneratorFamily::GenA, GeneratorFamily::GenB, GeneratorFamily::GenC];

    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorFamily::GenA => "GEN_A",
            GeneratorFamily::GenB => "GEN_B",
            GeneratorFamily::GenC => "GEN_C",
        }
    }
}

impl fmt::Display for GeneratorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GeneratorFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GeneratorFamily::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown generator family '{s}'")))
    }
}

/// Knobs of the scene generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneParams {
    /// Pixel standard deviation around the 0.5 mean.
    pub contrast: f64,
    /// Gaussian blur of the smooth texture component, in pixels.
    pub blur_sigma: f64,
    /// Share of texture variance carried by per-pixel grain.
    pub grain: f64,
    /// Artifact side range in pixels, inclusive.
    pub artifact_side: (usize, usize),
    /// Share of local variance given to the artifact pattern.
    pub artifact_strength: (f64, f64),
    /// Blob width of the human map over a real image.
    pub real_prior_sigma: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            contrast: 0.2,
            blur_sigma: 1.5,
            grain: 0.3,
            artifact_side: (12, 21),
            artifact_strength: (0.8, 0.95),
            real_prior_sigma: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Artifact {
    pub family: GeneratorFamily,
    /// top-left corner
    pub x: usize,
    pub y: usize,
    pub side: usize,
    pub strength: f64,
    /// GEN_B edge orientation
    pub vertical: bool,
}

impl Artifact {
    pub fn area_fraction(&self) -> f64 {
        (self.side * self.side) as f64 / (IMAGE_SIZE * IMAGE_SIZE) as f64
    }

    fn center(&self) -> (f64, f64) {
        let c = |v: usize| v as f64 + (self.side as f64 - 1.0) / 2.0;
        (c(self.x), c(self.y))
    }

    /// Unit-variance pattern value at patch-local coordinates.
    fn pattern(&self, u: usize, v: usize) -> f64 {
        match self.family {
            GeneratorFamily::GenA => {
                // lines every 4 px: 7 of 16 cells are on a line
                let on = u % 4 == 0 || v % 4 == 0;
                let p = 7.0 / 16.0;
                ((on as u8 as f64) - p) / (p * (1.0 - p)).sqrt()
            }
            GeneratorFamily::GenB => {
                let (a, half) = if self.vertical { (u, self.side / 2) } else { (v, self.side / 2) };
                let d = a as f64 - half as f64 + 0.5;
                let ring = (std::f64::consts::PI * d / 2.0).cos() * (-d.abs() / 5.0).exp();
                let step = d.signum() * 0.6;
                (ring + step) / 0.9
            }
            GeneratorFamily::GenC => {
                if (u / 2 + v / 2) % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

/// Everything needed to render one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub class: Class,
    pub generator: Option<GeneratorFamily>,
    pub artifact: Option<Artifact>,
}

impl SceneSpec {
    pub fn new(seed: u64, class: Class, generator: Option<GeneratorFamily>, params: &SceneParams) -> Result<Self> {
        match (class, generator) {
            (Class::Real, Some(g)) => {
                return Err(Error::InvalidArgument(format!("real scene cannot have generator {g}")));
            }
            (Class::Synthetic, None) => {
                return Err(Error::InvalidArgument("synthetic scene needs a generator family".into()));
            }
            _ => {}
        }
        let (lo, hi) = params.artifact_side;
        if lo == 0 || lo > hi || hi > IMAGE_SIZE {
            return Err(Error::InvalidArgument(format!("artifact side range ({lo}, {hi})")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7e);
        let artifact = generator.map(|family| {
            let side = rng.random_range(lo..=hi);
            let (slo, shi) = params.artifact_strength;
            Artifact {
                family,
                x: rng.random_range(0..=IMAGE_SIZE - side),
                y: rng.random_range(0..=IMAGE_SIZE - side),
                side,
                strength: if shi > slo { rng.random_range(slo..shi) } else { slo },
                vertical: rng.random_bool(0.5),
            }
        });
        Ok(Self {
            seed,
            class,
            generator,
            artifact,
        })
    }

    /// Render the image (row-major, values in [0, 1]).
    pub fn render_image(&self, params: &SceneParams) -> Vec<f64> {
        let n = IMAGE_SIZE;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let smooth = standardize(blurred_noise(&mut rng, n, params.blur_sigma));
        let grain: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
        let (ws, wg) = ((1.0 - params.grain).sqrt(), params.grain.sqrt());
        let mut tex: Vec<f64> = smooth.iter().zip(&grain).map(|(s, g)| ws * s + wg * g).collect();
        if let Some(a) = &self.artifact {
            let (wt, wp) = ((1.0 - a.strength).sqrt(), a.strength.sqrt());
            for v in 0..a.side {
                for u in 0..a.side {
                    let i = (a.y + v) * n + a.x + u;
                    tex[i] = wt * tex[i] + wp * a.pattern(u, v);
                }
            }
        }
        tex.iter().map(|t| (0.5 + params.contrast * t).clamp(0.0, 1.0)).collect()
    }

    /// Human salience at image resolution, range-normalized.
    pub fn render_human_map(&self, params: &SceneParams) -> Vec<f64> {
        let n = IMAGE_SIZE;
        let (cx, cy, sigma) = match &self.artifact {
            Some(a) => {
                let (cx, cy) = a.center();
                (cx, cy, a.side as f64 / 2.0)
            }
            None => {
                let c = (n as f64 - 1.0) / 2.0;
                (c, c, params.real_prior_sigma)
            }
        };
        let mut m = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                m.push((-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
        let (lo, hi) = m.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        m.iter().map(|v| (v - lo) / (hi - lo)).collect()
    }
}

fn blurred_noise(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as usize;
    let m = n + 2 * r;
    let noise: Vec<f64> = (0..m * m).map(|_| rng.sample(StandardNormal)).collect();
    let kernel: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let ks: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / ks).collect();
    // rows: (m, m) → (m, n)
    let mut tmp = vec![0.0; m * n];
    for y in 0..m {
        for x in 0..n {
            tmp[y * n + x] = kernel.iter().enumerate().map(|(i, k)| k * noise[y * m + x + i]).sum();
        }
    }
    // columns: (m, n) → (n, n)
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = kernel.iter().enumerate().map(|(i, k)| k * tmp[(y + i) * n + x]).sum();
        }
    }
    out
}

fn standardize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
    v
}
