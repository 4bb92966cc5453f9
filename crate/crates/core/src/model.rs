//! Three-block CNN with a global-average-pooling head, so class activation
//! maps can be read off the last feature maps and head weights.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const CONV_WIDTHS: [usize; 3] = [8, 16, 32];
pub const NUM_CLASSES: usize = 2;
/// Fixed input standardization: the network sees `(x - INPUT_MEAN) / INPUT_STD`.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

/// Input geometry. Each spatial side must be divisible by 8 (three 2×2 pools).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            channels: 1,
            height: 56,
            width: 56,
        }
    }
}

impl Geometry {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || height % 8 != 0 || width % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "geometry {channels}x{height}x{width}: sides must be positive multiples of 8"
            )));
        }
        Ok(Self { channels, height, width })
    }

    /// Spatial size of the final feature maps, i.e. of the CAM.
    pub fn cam_grid(&self) -> (usize, usize) {
        (self.height / 8, self.width / 8)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitScheme {
    /// Weights uniform in ±√(6 / fan_in), biases zero.
    #[default]
    FanInUniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InitSpec {
    pub seed: u64,
    pub scheme: InitScheme,
}

impl InitSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            scheme: InitScheme::FanInUniform,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamClassifier {
    geometry: Geometry,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Model parameters bound into one graph, in [`CamClassifier::param_names`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub params: Vec<Var>,
}

impl ModelVars {
    pub fn head_weight(&self) -> Var {
        self.params[6]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// (K, 2)
    pub logits: Var,
    /// (K, 32, h, w), the maps a CAM is built from
    pub features: Var,
}

fn param_shapes(channels: usize) -> Vec<(String, Vec<usize>)> {
    let mut shapes = Vec::new();
    let mut cin = channels;
    for (i, &cout) in CONV_WIDTHS.iter().enumerate() {
        shapes.push((format!("conv{}.weight", i + 1), vec![cout, cin, 3, 3]));
        shapes.push((format!("conv{}.bias", i + 1), vec![cout]));
        cin = cout;
    }
    shapes.push(("head.weight".into(), vec![NUM_CLASSES, cin]));
    shapes.push(("head.bias".into(), vec![NUM_CLASSES]));
    shapes
}

impl CamClassifier {
    pub fn init(spec: InitSpec, geometry: Geometry) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (names, params) = param_shapes(geometry.channels)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::new(shape, data).expect("param shape")
                };
                (name, t)
            })
            .unzip();
        Self {
            geometry,
            names,
            params,
        }
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Zero the linear head; logits become zero and every CAM becomes flat.
    pub fn zero_head(&mut self) {
        for (name, p) in self.names.iter().zip(&mut self.params) {
            if name.starts_with("head.") {
                p.data_mut().fill(0.0);
            }
        }
    }

    /// Place the parameters in `g`, tracked when gradients are wanted.
    pub fn bind(&self, g: &mut Graph, tracked: bool) -> ModelVars {
        let params = self
            .params
            .iter()
            .map(|p| if tracked { g.param(p.clone()) } else { g.constant(p.clone()) })
            .collect();
        ModelVars { params }
    }

    /// Run `images` (K, C, H, W) through the network.
    pub fn forward(&self, g: &mut Graph, vars: &ModelVars, images: Var) -> Result<ForwardOutput> {
        let s = g.value(images).shape();
        let geo = self.geometry;
        if s.len() != 4 || s[1] != geo.channels || s[2] != geo.height || s[3] != geo.width {
            return Err(Error::Shape(format!(
                "forward: images {:?} do not match model geometry {}x{}x{}",
                s, geo.channels, geo.height, geo.width
            )));
        }
        let p = &vars.params;
        let centered = g.add_scalar(images, -INPUT_MEAN);
        let mut x = g.scale(centered, 1.0 / INPUT_STD);
        for block in 0..CONV_WIDTHS.len() {
            x = g.conv2d(x, p[2 * block], Some(p[2 * block + 1]), 1)?;
            x = g.relu(x);
            x = g.max_pool2d(x)?;
        }
        let features = x;
        let pooled = g.global_avg_pool(features)?;
        let logits = g.linear(pooled, p[6], Some(p[7]))?;
        Ok(ForwardOutput { logits, features })
    }

    /// Serialize to the little-endian checkpoint format.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.params) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Hex SHA-256 of the checkpoint encoding.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_checkpoint_bytes()))
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], geometry: Geometry, origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(origin, format!("checkpoint: {reason}"));
        let mut r = ByteReader { bytes, pos: 0 };
        fn take<'a>(r: &mut ByteReader<'a>, n: usize, origin: &Path) -> Result<&'a [u8]> {
            r.take(n).ok_or_else(|| Error::format(origin, "checkpoint: truncated"))
        }
        if take(&mut r, 4, origin)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(&mut r, 4, origin)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut loaded = Vec::new();
        while !r.is_empty() {
            let len = u16::from_le_bytes(take(&mut r, 2, origin)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(take(&mut r, len, origin)?.to_vec()).map_err(|_| bad("parameter name is not UTF-8"))?;
            let rank = take(&mut r, 1, origin)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut r, 4, origin)?.try_into().expect("4 bytes")) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut r, n * 8, origin)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?;
            loaded.push((name, t));
        }

        let expected = param_shapes(geometry.channels);
        if loaded.len() != expected.len() {
            return Err(bad(&format!("expected {} parameters, found {}", expected.len(), loaded.len())));
        }
        for ((name, t), (ename, eshape)) in loaded.iter().zip(&expected) {
            if name != ename || t.shape() != eshape.as_slice() {
                return Err(bad(&format!(
                    "parameter {name} {:?} does not match expected {ename} {eshape:?}",
                    t.shape()
                )));
            }
        }
        let (names, params) = loaded.into_iter().unzip();
        Ok(Self {
            geometry,
            names,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, geometry: Geometry) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, geometry, path)
    }
}


struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len())?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Some(out)
    }

    fn is_empty(&self) -> bool {
        self.pos >= self.bytes.len()
    }
}
