use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>())
}

/// Reduce an arbitrary output to a scalar with fixed pseudo-random weights,
/// so every output coordinate contributes a distinct gradient.
fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let n = g.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn relu_forward() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn relu_gradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn global_avg_pool_of_2x2() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(y).data(), &[2.5]);
}

#[test]
fn conv2d_of_ones_without_padding() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, None, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[9.0]);
}

#[test]
fn conv2d_matches_naive_oracle_with_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, c, h, w, o) = (2, 3, 5, 4, 2);
    let xt = random(&mut rng, &[n, c, h, w], -1.0, 1.0);
    let wt = random(&mut rng, &[o, c, 3, 3], -1.0, 1.0);
    let bt = random(&mut rng, &[o], -1.0, 1.0);
    let mut g = Graph::new();
    let (x, wv, b) = (g.constant(xt.clone()), g.constant(wt.clone()), g.constant(bt.clone()));
    let y = g.conv2d(x, wv, Some(b), 1).unwrap();
    assert_eq!(g.value(y).shape(), &[n, o, h, w]);
    let at = |ni: usize, ci: usize, yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            xt.data()[((ni * c + ci) * h + yy as usize) * w + xx as usize]
        }
    };
    for ni in 0..n {
        for oi in 0..o {
            for oy in 0..h {
                for ox in 0..w {
                    let mut s = bt.data()[oi];
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                s += wt.data()[((oi * c + ci) * 3 + ky) * 3 + kx]
                                    * at(ni, ci, oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                            }
                        }
                    }
                    let got = g.value(y).data()[((ni * o + oi) * h + oy) * w + ox];
                    assert!((got - s).abs() < 1e-12, "{got} vs {s}");
                }
            }
        }
    }
}

#[test]
fn shape_errors_name_primitive_and_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let err = g.conv2d(x, w, None, 1).unwrap_err().to_string();
    assert!(err.contains("conv2d") && err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");

    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
}

#[test]
fn square_gradient_is_analytic() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.square(x);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn entropy_gradient_matches_central_difference() {
    let entropy = |g: &mut Graph, p: Var| -> Result<Var> {
        let l = g.ln(p);
        let pl = g.mul(p, l)?;
        let s = g.sum(pl);
        Ok(g.neg(s))
    };
    // oracle: central difference with step 1e-6 on each coordinate
    let h = 1e-6;
    let f = |p: [f64; 2]| -p.iter().map(|v| v * v.ln()).sum::<f64>();
    let oracle = (f([0.5 + h, 0.5]) - f([0.5 - h, 0.5])) / (2.0 * h);
    assert!((oracle - (-0.30685281944)).abs() < 1e-8);

    let mut g = Graph::new();
    let p = g.param(Tensor::from_vec(vec![0.5, 0.5]));
    let e = entropy(&mut g, p).unwrap();
    let grads = g.backward(e).unwrap();
    for &d in grads.get(p).unwrap().data() {
        assert!((d - oracle).abs() < 1e-8, "{d} vs {oracle}");
    }
}

#[test]
fn constant_loss_has_zero_gradients() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let c = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let s = g.sum(c);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).is_none());
    assert_eq!(grads.get_or_zeros(&g, x).data(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let y = g.square(x);
    assert!(g.backward(y).is_err());
}

#[test]
fn finite_diff_check_square() {
    let err = finite_diff_check(|g, x| Ok(g.square(x)), &Tensor::scalar(3.0), 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn finite_diff_check_rejects_non_finite() {
    let r = finite_diff_check(|g, x| Ok(g.ln(x)), &Tensor::scalar(-1.0), 1e-5);
    assert!(r.is_err());
}

#[test]
fn untracked_graph_records_no_ops() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let y = g.exp(x);
    assert!(!g.is_tracked(y));
    let p = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let z = g.mul(y, p).unwrap();
    assert!(g.is_tracked(z));
}

#[test]
fn broadcasting_rows() {
    let mut g = Graph::new();
    let a = g.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let b = g.param(t(&[2, 1], &[10.0, 20.0]));
    let c = g.sub(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[-9.0, -8.0, -7.0, -16.0, -15.0, -14.0]);
    let s = g.sum(c);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(b).unwrap().data(), &[-3.0, -3.0]);
    assert_eq!(grads.get(a).unwrap().data(), &[1.0; 6]);
}

#[test]
fn repeated_forward_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xt = random(&mut rng, &[2, 2, 6, 6], -1.0, 1.0);
    let wt = random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let w = g.param(wt.clone());
        let y = g.conv2d(x, w, None, 1).unwrap();
        let y = g.relu(y);
        let y = g.max_pool2d(y).unwrap();
        let y = g.global_avg_pool(y).unwrap();
        let y = g.softmax(y).unwrap();
        let s = project(&mut g, y).unwrap();
        let grads = g.backward(s).unwrap();
        (g.value(s).clone(), grads.get(w).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
    assert!(ga.data().iter().zip(gb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn gradient_accumulation_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xt = random(&mut rng, &[4], 0.5, 2.0);
    let part1 = |g: &mut Graph, x: Var| -> Result<Var> {
        let e = g.exp(x);
        Ok(g.sum(e))
    };
    let part2 = |g: &mut Graph, x: Var| -> Result<Var> {
        let l = g.ln(x);
        let q = g.square(l);
        Ok(g.mean(q))
    };
    let grad_of = |f: &dyn Fn(&mut Graph, Var) -> Result<Var>| {
        let mut g = Graph::new();
        let x = g.param(xt.clone());
        let y = f(&mut g, x).unwrap();
        g.backward(y).unwrap().get(x).unwrap().clone()
    };
    let g1 = grad_of(&part1);
    let g2 = grad_of(&part2);
    let both = grad_of(&|g: &mut Graph, x: Var| {
        let a = part1(g, x)?;
        let b = part2(g, x)?;
        g.add(a, b)
    });
    for i in 0..4 {
        assert!((both.data()[i] - g1.data()[i] - g2.data()[i]).abs() < 1e-12);
    }
}

type Prim = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Every primitive, with input shapes and sampling ranges that keep away
/// from domain boundaries.
fn primitive_cases() -> Vec<(&'static str, Vec<(Vec<usize>, f64, f64)>, Prim)> {
    vec![
        ("conv2d", vec![(vec![2, 2, 5, 5], -1.0, 1.0), (vec![3, 2, 3, 3], -1.0, 1.0), (vec![3], -1.0, 1.0)], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1)?;
            project(g, y)
        }),
        ("relu", vec![(vec![3, 4], -1.0, 1.0)], |g, v| {
            let y = g.relu(v[0]);
            project(g, y)
        }),
        ("max_pool2d", vec![(vec![2, 2, 4, 6], -1.0, 1.0)], |g, v| {
            let y = g.max_pool2d(v[0])?;
            project(g, y)
        }),
        ("global_avg_pool", vec![(vec![2, 3, 3, 3], -1.0, 1.0)], |g, v| {
            let y = g.global_avg_pool(v[0])?;
            project(g, y)
        }),
        ("linear", vec![(vec![3, 4], -1.0, 1.0), (vec![2, 4], -1.0, 1.0), (vec![2], -1.0, 1.0)], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y)
        }),
        ("add", vec![(vec![2, 3], -1.0, 1.0), (vec![2, 1], -1.0, 1.0)], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y)
        }),
        ("sub", vec![(vec![2, 3], -1.0, 1.0), (vec![2, 3], -1.0, 1.0)], |g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y)
        }),
        ("mul", vec![(vec![2, 3], -1.0, 1.0), (vec![1, 3], -1.0, 1.0)], |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y)
        }),
        ("div", vec![(vec![2, 3], -1.0, 1.0), (vec![2, 1], 0.5, 2.0)], |g, v| {
            let y = g.div(v[0], v[1])?;
            project(g, y)
        }),
        ("scale", vec![(vec![5], -1.0, 1.0)], |g, v| {
            let y = g.scale(v[0], -2.5);
            project(g, y)
        }),
        ("add_scalar", vec![(vec![5], -1.0, 1.0)], |g, v| {
            let y = g.add_scalar(v[0], 0.7);
            let y = g.square(y);
            project(g, y)
        }),
        ("ln", vec![(vec![5], 0.2, 3.0)], |g, v| {
            let y = g.ln(v[0]);
            project(g, y)
        }),
        ("exp", vec![(vec![5], -2.0, 2.0)], |g, v| {
            let y = g.exp(v[0]);
            project(g, y)
        }),
        ("sigmoid", vec![(vec![5], -4.0, 4.0)], |g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y)
        }),
        ("softmax", vec![(vec![3, 4], -2.0, 2.0)], |g, v| {
            let y = g.softmax(v[0])?;
            project(g, y)
        }),
        ("log_softmax", vec![(vec![3, 4], -2.0, 2.0)], |g, v| {
            let y = g.log_softmax(v[0])?;
            project(g, y)
        }),
        ("mean", vec![(vec![2, 3], -1.0, 1.0)], |g, v| {
            let y = g.square(v[0]);
            Ok(g.mean(y))
        }),
        ("sum", vec![(vec![2, 3], -1.0, 1.0)], |g, v| {
            let y = g.exp(v[0]);
            Ok(g.sum(y))
        }),
        ("sum_last", vec![(vec![2, 3], -1.0, 1.0)], |g, v| {
            let y = g.sum_last(v[0])?;
            let y = g.square(y);
            project(g, y)
        }),
        ("square", vec![(vec![4], -2.0, 2.0)], |g, v| {
            let y = g.square(v[0]);
            project(g, y)
        }),
        ("max_last", vec![(vec![3, 5], -1.0, 1.0)], |g, v| {
            let y = g.max_last(v[0])?;
            project(g, y)
        }),
        ("min_last", vec![(vec![3, 5], -1.0, 1.0)], |g, v| {
            let y = g.min_last(v[0])?;
            project(g, y)
        }),
        ("clamp_min", vec![(vec![6], -1.0, 1.0)], |g, v| {
            let y = g.clamp_min(v[0], 0.1);
            project(g, y)
        }),
        ("reshape", vec![(vec![2, 6], -1.0, 1.0)], |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            let y = g.square(y);
            project(g, y)
        }),
        ("gather_rows", vec![(vec![2, 4], -1.0, 1.0)], |g, v| {
            let y = g.gather_rows(v[0], &[1, 0, 1])?;
            let y = g.square(y);
            project(g, y)
        }),
        ("pick_last", vec![(vec![3, 2], -1.0, 1.0)], |g, v| {
            let y = g.pick_last(v[0], &[1, 0, 1])?;
            let y = g.exp(y);
            project(g, y)
        }),
        ("channel_weighted_sum", vec![(vec![2, 3, 2, 2], -1.0, 1.0), (vec![2, 3], -1.0, 1.0)], |g, v| {
            let y = g.channel_weighted_sum(v[0], v[1])?;
            let y = g.square(y);
            project(g, y)
        }),
        ("normalize_rows", vec![(vec![2, 5], 0.1, 1.0)], |g, v| {
            let y = g.normalize_rows(v[0], 1e-12)?;
            let y = g.ln(y);
            project(g, y)
        }),
    ]
}

#[test]
fn every_primitive_passes_gradient_check_on_100_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (name, specs, f) in primitive_cases() {
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let inputs: Vec<Tensor> = specs.iter().map(|(s, lo, hi)| random(&mut rng, s, *lo, *hi)).collect();
            let r = check_gradients(f, &inputs, 1e-5).unwrap();
            worst = worst.max(r.max_rel_error);
        }
        assert!(worst < 1e-4, "{name}: max relative error {worst}");
    }
}

#[test]
fn normalize_rows_falls_back_to_uniform() {
    let mut g = Graph::new();
    let x = g.param(t(&[2, 2], &[0.0, 0.0, 1.0, 3.0]));
    let y = g.normalize_rows(x, 1e-12).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.25, 0.75]);
    let p = project(&mut g, y).unwrap();
    let grads = g.backward(p).unwrap();
    assert_eq!(&grads.get(x).unwrap().data()[..2], &[0.0, 0.0]);
}
