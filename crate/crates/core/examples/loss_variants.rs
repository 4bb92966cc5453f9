//! Evaluate every training objective on one batch of generated scenes.

use focuslab::autodiff::{Graph, Tensor};
use focuslab::data::scene::{Class, GeneratorFamily, SceneParams, SceneSpec};
use focuslab::data::{self, Sample};
use focuslab::losses::{objective, Batch, LossConfig, LossVariant};
use focuslab::model::{CamClassifier, Geometry, InitSpec};

fn main() -> focuslab::Result<()> {
    let params = SceneParams::default();
    let specs = [
        (1, Class::Real, None),
        (2, Class::Synthetic, Some(GeneratorFamily::GenA)),
        (3, Class::Real, None),
        (4, Class::Synthetic, Some(GeneratorFamily::GenB)),
    ];
    let mut samples = Vec::new();
    for (seed, class, generator) in specs {
        let s = SceneSpec::new(seed, class, generator, &params)?;
        samples.push(Sample {
            image: s.render_image(&params),
            label: class.label(),
            human_map: Some(s.render_human_map(&params)),
            generator,
            seed,
        });
    }
    let grids: Vec<Tensor> = samples
        .iter()
        .map(|s| s.human_grid(7, 7).map(|g| g.expect("map present")))
        .collect::<focuslab::Result<_>>()?;
    let batch = Batch {
        images: data::image_batch(&samples)?,
        labels: samples.iter().map(|s| s.label).collect(),
        human_maps: Some(Tensor::stack(&grids)?),
        target_human_entropy: Some(data::human_entropy_target(&samples)?),
    };

    let model = CamClassifier::init(InitSpec::new(11), Geometry::default());
    for variant in LossVariant::ALL {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let obj = objective(&mut g, &model, &vars, &batch, &LossConfig::new(variant))?;
        let grads = g.backward(obj.loss)?;
        let norm: f64 = vars
            .params
            .iter()
            .map(|&p| grads.get_or_zeros(&g, p).data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let h = g.value(obj.entropies).data();
        println!(
            "{:>13}: loss {:.5}  |grad| {norm:.4e}  mean CAM entropy {:.4}",
            variant.to_string(),
            g.value(obj.loss).item()?,
            h.iter().sum::<f64>() / h.len() as f64
        );
    }
    Ok(())
}
