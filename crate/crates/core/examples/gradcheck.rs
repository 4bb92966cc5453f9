//! Verify reverse-mode gradients of a small conv stack against central differences.

use focuslab::autodiff::{check_gradients, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> focuslab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        random(&mut rng, &[2, 1, 8, 8]),
        random(&mut rng, &[4, 1, 3, 3]),
        random(&mut rng, &[4]),
        random(&mut rng, &[2, 4]),
    ];
    let report = check_gradients(
        |g, v| {
            let c = g.conv2d(v[0], v[1], Some(v[2]), 1)?;
            let r = g.relu(c);
            let p = g.max_pool2d(r)?;
            let f = g.global_avg_pool(p)?;
            let logits = g.linear(f, v[3], None)?;
            let ls = g.log_softmax(logits)?;
            let picked = g.pick_last(ls, &[0, 1])?;
            let m = g.mean(picked);
            Ok(g.neg(m))
        },
        &inputs,
        1e-5,
    )?;
    println!(
        "checked {} coordinates, max relative error {:.3e} at input {} coordinate {}",
        report.coordinates, report.max_rel_error, report.worst.0, report.worst.1
    );
    Ok(())
}
