//! Class activation maps, their two normalizations, and differentiable
//! Shannon entropy.
//!
//! Batched routines work on (K, h, w) graph nodes wrapped in [`MapBatch`],
//! which carries the normalization state so entropy can only be taken of a
//! probability map. The single-map functions at the bottom go through the
//! same graph code with constant inputs.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Guard inside `ln` so that `0 · ln 0` evaluates to 0.
pub const LN_GUARD: f64 = 1e-12;

/// Maps whose clipped mass falls below this become uniform.
pub const MIN_MASS: f64 = 1e-12;

/// Range below which a map counts as constant during range normalization.
const MIN_RANGE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SalienceState {
    Raw,
    Range01,
    Probability,
}

/// A stack of K salience maps of size h×w living in a graph.
#[derive(Clone, Copy, Debug)]
pub struct MapBatch {
    pub var: Var,
    pub state: SalienceState,
}

/// A single h×w salience map.
#[derive(Clone, Debug, PartialEq)]
pub struct SalienceMap {
    grid: Tensor,
    state: SalienceState,
}

/// Shannon entropy in nats.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct EntropyValue(pub f64);

impl EntropyValue {
    pub fn value(self) -> f64 {
        self.0
    }
}

fn map_dims(g: &Graph, var: Var) -> Result<(usize, usize, usize)> {
    match *g.value(var).shape() {
        [k, h, w] => Ok((k, h, w)),
        ref s => Err(Error::Shape(format!("salience: expected (K, h, w) maps, got {s:?}"))),
    }
}

/// CAM of each sample for the class in `classes`: Σ_c W[class][c] · F[c].
///
/// `features` is (K, C, h, w) and `head_weight` is (classes, C). Head bias
/// plays no part.
pub fn cam_batch(g: &mut Graph, features: Var, head_weight: Var, classes: &[usize]) -> Result<MapBatch> {
    let fc = g.value(features).shape().get(1).copied();
    let wc = g.value(head_weight).shape().get(1).copied();
    if fc != wc {
        return Err(Error::Shape(format!(
            "compute_cam: features {:?} and head weights {:?} disagree on channel count",
            g.value(features).shape(),
            g.value(head_weight).shape()
        )));
    }
    let w = g.gather_rows(head_weight, classes)?;
    let var = g.channel_weighted_sum(features, w)?;
    Ok(MapBatch {
        var,
        state: SalienceState::Raw,
    })
}

/// `(m − min) / (max − min)` per map; constant maps become all zeros.
pub fn range01_batch(g: &mut Graph, maps: MapBatch) -> Result<MapBatch> {
    let (k, h, w) = map_dims(g, maps.var)?;
    let flat = g.reshape(maps.var, &[k, h * w])?;
    let lo = g.min_last(flat)?;
    let hi = g.max_last(flat)?;
    let num = g.sub(flat, lo)?;
    let span = g.sub(hi, lo)?;
    let span = g.clamp_min(span, MIN_RANGE);
    let out = g.div(num, span)?;
    let var = g.reshape(out, &[k, h, w])?;
    Ok(MapBatch {
        var,
        state: SalienceState::Range01,
    })
}

/// Clip negatives to zero, then divide by the total; massless maps become uniform.
pub fn probability_batch(g: &mut Graph, maps: MapBatch) -> Result<MapBatch> {
    let (k, h, w) = map_dims(g, maps.var)?;
    let flat = g.reshape(maps.var, &[k, h * w])?;
    let clipped = g.relu(flat);
    let p = g.normalize_rows(clipped, MIN_MASS)?;
    let var = g.reshape(p, &[k, h, w])?;
    Ok(MapBatch {
        var,
        state: SalienceState::Probability,
    })
}

/// Per-map entropy `−Σ p ln max(p, ε)`, shape (K).
pub fn entropy_batch(g: &mut Graph, maps: MapBatch) -> Result<Var> {
    if maps.state != SalienceState::Probability {
        return Err(Error::InvalidArgument(format!(
            "shannon_entropy: map must be probability-normalized, state is {:?}",
            maps.state
        )));
    }
    let (k, h, w) = map_dims(g, maps.var)?;
    let p = g.reshape(maps.var, &[k, h * w])?;
    let guarded = g.clamp_min(p, LN_GUARD);
    let logp = g.ln(guarded);
    let plogp = g.mul(p, logp)?;
    let s = g.sum_last(plogp)?;
    let s = g.reshape(s, &[k])?;
    Ok(g.neg(s))
}

/// Mean of per-map entropies as a scalar node.
pub fn mean_entropy_batch(g: &mut Graph, maps: MapBatch) -> Result<Var> {
    let h = entropy_batch(g, maps)?;
    Ok(g.mean(h))
}

/// Area-average an (H, W) map down to (h, w); H and W must be multiples.
pub fn downsample_area(map: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [hh, ww] = *map.shape() else {
        return Err(Error::Shape(format!("downsample_area: expected 2-D map, got {:?}", map.shape())));
    };
    if h == 0 || w == 0 || hh % h != 0 || ww % w != 0 {
        return Err(Error::Shape(format!("downsample_area: {hh}x{ww} is not a multiple of {h}x{w}")));
    }
    let (fy, fx) = (hh / h, ww / w);
    let mut out = vec![0.0; h * w];
    for y in 0..hh {
        for x in 0..ww {
            out[(y / fy) * w + x / fx] += map.data()[y * ww + x];
        }
    }
    let area = (fy * fx) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    Tensor::new(vec![h, w], out)
}

impl SalienceMap {
    pub fn new(grid: Tensor, state: SalienceState) -> Result<Self> {
        if grid.rank() != 2 {
            return Err(Error::Shape(format!("salience map must be 2-D, got {:?}", grid.shape())));
        }
        Ok(Self { grid, state })
    }

    pub fn raw(grid: Tensor) -> Result<Self> {
        Self::new(grid, SalienceState::Raw)
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn state(&self) -> SalienceState {
        self.state
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    fn batch_of_one(&self, g: &mut Graph) -> Result<MapBatch> {
        let t = self.grid.reshape(&[1, self.height(), self.width()])?;
        Ok(MapBatch {
            var: g.constant(t),
            state: self.state,
        })
    }

    fn from_batch(g: &Graph, m: MapBatch) -> Result<Self> {
        let s = g.value(m.var).shape();
        let grid = g.value(m.var).reshape(&s[1..])?;
        Self::new(grid, m.state)
    }
}

/// CAM of one sample: `features` is (C, h, w), `head_weights` is (classes, C).
pub fn compute_cam(features: &Tensor, head_weights: &Tensor, class_index: usize) -> Result<SalienceMap> {
    let [c, h, w] = *features.shape() else {
        return Err(Error::Shape(format!("compute_cam: expected (C, h, w) features, got {:?}", features.shape())));
    };
    let mut g = Graph::new();
    let f = g.constant(features.reshape(&[1, c, h, w])?);
    let hw = g.constant(head_weights.clone());
    let cam = cam_batch(&mut g, f, hw, &[class_index])?;
    SalienceMap::from_batch(&g, cam)
}

pub fn normalize_range01(m: &SalienceMap) -> Result<SalienceMap> {
    let mut g = Graph::new();
    let b = m.batch_of_one(&mut g)?;
    let r = range01_batch(&mut g, b)?;
    SalienceMap::from_batch(&g, r)
}

pub fn normalize_probability(m: &SalienceMap) -> Result<SalienceMap> {
    let mut g = Graph::new();
    let b = m.batch_of_one(&mut g)?;
    let p = probability_batch(&mut g, b)?;
    SalienceMap::from_batch(&g, p)
}

pub fn shannon_entropy(m: &SalienceMap) -> Result<EntropyValue> {
    let mut g = Graph::new();
    let b = m.batch_of_one(&mut g)?;
    let h = entropy_batch(&mut g, b)?;
    Ok(EntropyValue(g.value(h).data()[0]))
}

pub fn mean_batch_entropy(maps: &[SalienceMap]) -> Result<EntropyValue> {
    if maps.is_empty() {
        return Err(Error::InvalidArgument("mean_batch_entropy: empty list".into()));
    }
    let total = maps.iter().map(|m| shannon_entropy(m).map(EntropyValue::value)).sum::<Result<f64>>()?;
    Ok(EntropyValue(total / maps.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN49: f64 = 3.8918202981106265;

    fn grid(h: usize, w: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![h, w], v.to_vec()).unwrap()
    }

    fn prob(h: usize, w: usize, v: &[f64]) -> SalienceMap {
        SalienceMap::new(grid(h, w, v), SalienceState::Probability).unwrap()
    }

    fn uniform49() -> SalienceMap {
        prob(7, 7, &[1.0 / 49.0; 49])
    }

    fn delta49() -> SalienceMap {
        let mut v = [0.0; 49];
        v[17] = 1.0;
        prob(7, 7, &v)
    }

    fn random_prob(rng: &mut ChaCha8Rng, floor: f64) -> SalienceMap {
        let v: Vec<f64> = (0..49).map(|_| rng.random_range(floor..1.0)).collect();
        let s: f64 = v.iter().sum();
        prob(7, 7, &v.iter().map(|x| x / s).collect::<Vec<_>>())
    }

    #[test]
    fn ln49_constant() {
        assert!((49f64.ln() - LN49).abs() < 1e-15);
    }

    #[test]
    fn cam_zero_weights_is_zero_map() {
        let f = Tensor::full(&[4, 7, 7], 0.3);
        let w = Tensor::zeros(&[2, 4]);
        let cam = compute_cam(&f, &w, 1).unwrap();
        assert_eq!(cam.grid().data(), &[0.0; 49]);
        assert_eq!(cam.state(), SalienceState::Raw);
    }

    #[test]
    fn cam_single_channel_is_identity() {
        let f = Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let cam = compute_cam(&f, &w, 0).unwrap();
        assert_eq!(cam.grid().data(), f.data());
    }

    #[test]
    fn cam_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f: Vec<f64> = (0..3 * 49).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..2 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ft = Tensor::new(vec![3, 7, 7], f.clone()).unwrap();
        let wt = Tensor::new(vec![2, 3], w.clone()).unwrap();
        for class in 0..2 {
            let cam = compute_cam(&ft, &wt, class).unwrap();
            for i in 0..7 {
                for j in 0..7 {
                    let mut s = 0.0;
                    for c in 0..3 {
                        s += w[class * 3 + c] * f[c * 49 + i * 7 + j];
                    }
                    assert!((cam.grid().data()[i * 7 + j] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cam_channel_mismatch_errors() {
        let f = Tensor::zeros(&[3, 7, 7]);
        let w = Tensor::zeros(&[2, 4]);
        assert!(compute_cam(&f, &w, 0).is_err());
        assert!(compute_cam(&f, &Tensor::zeros(&[2, 3]), 2).is_err());
    }

    #[test]
    fn range01_examples() {
        let m = SalienceMap::raw(grid(2, 2, &[0.0, 1.0, 2.0, 3.0])).unwrap();
        let r = normalize_range01(&m).unwrap();
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in r.grid().data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(r.state(), SalienceState::Range01);

        let c = SalienceMap::raw(Tensor::full(&[7, 7], 2.5)).unwrap();
        assert_eq!(normalize_range01(&c).unwrap().grid().data(), &[0.0; 49]);

        let u = SalienceMap::raw(grid(2, 2, &[0.0, 0.25, 1.0, 0.5])).unwrap();
        assert_eq!(normalize_range01(&u).unwrap().grid().data(), u.grid().data());
    }

    #[test]
    fn probability_examples() {
        let ones = SalienceMap::raw(Tensor::full(&[7, 7], 1.0)).unwrap();
        let p = normalize_probability(&ones).unwrap();
        assert!(p.grid().data().iter().all(|&v| (v - 1.0 / 49.0).abs() < 1e-15));

        let m = SalienceMap::raw(grid(2, 2, &[-1.0, 1.0, 1.0, 1.0])).unwrap();
        let p = normalize_probability(&m).unwrap();
        let third = 1.0 / 3.0;
        for (a, b) in p.grid().data().iter().zip([0.0, third, third, third]) {
            assert!((a - b).abs() < 1e-15);
        }

        let z = SalienceMap::raw(Tensor::zeros(&[7, 7])).unwrap();
        let p = normalize_probability(&z).unwrap();
        assert!(p.grid().data().iter().all(|&v| v == 1.0 / 49.0));
        assert_eq!(p.state(), SalienceState::Probability);
    }

    #[test]
    fn entropy_examples() {
        assert!((shannon_entropy(&uniform49()).unwrap().value() - 3.8918).abs() < 1e-4);
        assert!((shannon_entropy(&uniform49()).unwrap().value() - LN49).abs() < 1e-12);
        assert!(shannon_entropy(&delta49()).unwrap().value().abs() < 1e-9);
        let two = prob(1, 4, &[0.5, 0.0, 0.5, 0.0]);
        assert!((shannon_entropy(&two).unwrap().value() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_requires_probability_state() {
        let m = SalienceMap::raw(Tensor::full(&[7, 7], 1.0 / 49.0)).unwrap();
        assert!(shannon_entropy(&m).is_err());
        let r = SalienceMap::new(Tensor::full(&[7, 7], 1.0 / 49.0), SalienceState::Range01).unwrap();
        assert!(shannon_entropy(&r).is_err());
    }

    #[test]
    fn mean_batch_entropy_examples() {
        let uu = mean_batch_entropy(&[uniform49(), uniform49()]).unwrap().value();
        assert!((uu - LN49).abs() < 1e-12);
        let ud = mean_batch_entropy(&[uniform49(), delta49()]).unwrap().value();
        assert!((ud - LN49 / 2.0).abs() < 1e-9);
        assert!((ud - 1.9459).abs() < 1e-4);
        assert!(mean_batch_entropy(&[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let maps: Vec<_> = (0..10).map(|_| random_prob(&mut rng, 0.0)).collect();
        let oracle: f64 = maps
            .iter()
            .map(|m| -m.grid().data().iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
            .sum::<f64>()
            / 10.0;
        assert!((mean_batch_entropy(&maps).unwrap().value() - oracle).abs() < 1e-12);
    }

    #[test]
    fn entropy_bounded_and_maximal_only_at_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let m = random_prob(&mut rng, 0.0);
            let h = shannon_entropy(&m).unwrap().value();
            assert!(h <= LN49 + 1e-9);
            let is_uniform = m.grid().data().iter().all(|&p| (p - 1.0 / 49.0).abs() < 1e-9);
            assert_eq!((h - LN49).abs() < 1e-9, is_uniform);
        }
    }

    #[test]
    fn concentration_never_increases_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let m = random_prob(&mut rng, 0.01);
            let mut v = m.grid().data().to_vec();
            let (i, j) = (rng.random_range(0..49), rng.random_range(0..49));
            let (lo, hi) = if v[i] < v[j] { (i, j) } else { (j, i) };
            if lo == hi {
                continue;
            }
            let delta = 0.5 * v[lo];
            let before = shannon_entropy(&prob(7, 7, &v)).unwrap().value();
            v[lo] -= delta;
            v[hi] += delta;
            let after = shannon_entropy(&prob(7, 7, &v)).unwrap().value();
            assert!(after <= before + 1e-12);
        }
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            // a few cells pinned near the 1e-6 floor, the rest random
            let mut v = random_prob(&mut rng, 0.0).grid().data().to_vec();
            for _ in 0..5 {
                v[rng.random_range(0..49)] = 1e-6;
            }
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x = (*x / s).max(1e-6));
            let x = Tensor::new(vec![1, 7, 7], v).unwrap();
            let err = finite_diff_check(
                |g, v| {
                    let h = entropy_batch(
                        g,
                        MapBatch {
                            var: v,
                            state: SalienceState::Probability,
                        },
                    )?;
                    Ok(g.sum(h))
                },
                &x,
                // the third derivative of p ln p is 1/p², so cells at 1e-6 need a step well below them
                1e-8,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn downsample_averages_blocks() {
        let t = Tensor::new(vec![2, 4], vec![1.0, 3.0, 0.0, 0.0, 5.0, 7.0, 2.0, 2.0]).unwrap();
        let d = downsample_area(&t, 1, 2).unwrap();
        assert_eq!(d.data(), &[4.0, 1.0]);
        assert!(downsample_area(&t, 3, 2).is_err());
    }

    proptest! {
        #[test]
        fn entropy_is_permutation_invariant(v in proptest::collection::vec(0.0f64..1.0, 49), seed in any::<u64>()) {
            let s: f64 = v.iter().sum();
            prop_assume!(s > 1e-6);
            let p: Vec<f64> = v.iter().map(|x| x / s).collect();
            let mut q = p.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..q.len()).rev() {
                q.swap(i, rng.random_range(0..=i));
            }
            let a = shannon_entropy(&prob(7, 7, &p)).unwrap().value();
            let b = shannon_entropy(&prob(7, 7, &q)).unwrap().value();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn probability_output_is_a_distribution(v in proptest::collection::vec(-1.0f64..1.0, 49)) {
            let p = normalize_probability(&SalienceMap::raw(grid(7, 7, &v)).unwrap()).unwrap();
            prop_assert!(p.grid().data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((p.grid().sum() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn range01_output_spans_unit_interval(v in proptest::collection::vec(-5.0f64..5.0, 49)) {
            let r = normalize_range01(&SalienceMap::raw(grid(7, 7, &v)).unwrap()).unwrap();
            let d = r.grid().data();
            prop_assert!(d.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let max = d.iter().copied().fold(f64::MIN, f64::max);
            let min = d.iter().copied().fold(f64::MAX, f64::min);
            prop_assert_eq!(min, 0.0);
            prop_assert!((max - 1.0).abs() < 1e-12);
        }
    }
}
