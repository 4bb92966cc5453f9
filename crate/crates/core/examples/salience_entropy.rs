//! Class activation maps and their entropy: a focused map against a diffuse one.

use focuslab::autodiff::Tensor;
use focuslab::salience::{compute_cam, normalize_probability, normalize_range01, shannon_entropy};

fn main() -> focuslab::Result<()> {
    let (c, h, w) = (2, 7, 7);
    let mut features = vec![0.0; c * h * w];
    // channel 0 fires at one location, channel 1 everywhere
    features[3 * w + 3] = 5.0;
    for v in &mut features[h * w..] {
        *v = 1.0;
    }
    let features = Tensor::new(vec![c, h, w], features)?;

    for (name, head) in [("focused", [1.0, 0.0]), ("diffuse", [0.0, 1.0]), ("mixed", [1.0, 0.3])] {
        let weights = Tensor::new(vec![2, c], vec![head[0], head[1], -head[0], -head[1]])?;
        let cam = compute_cam(&features, &weights, 0)?;
        let p = normalize_probability(&normalize_range01(&cam)?)?;
        println!("{name:>8}: H = {:.4} (uniform bound {:.4})", shannon_entropy(&p)?.value(), (49f64).ln());
    }
    Ok(())
}
