//! Train briefly, then score the test split per generator family.

use focuslab::data::{self, DatasetCounts, GenerateOptions, Split};
use focuslab::eval;
use focuslab::losses::LossVariant;
use focuslab::model::{CamClassifier, Geometry};
use focuslab::train::{self, TrainConfig, TrainData};

fn main() -> focuslab::Result<()> {
    let dir = tempfile::tempdir().expect("temporary directory");
    let root = dir.path().join("data");
    data::generate_dataset(&root, &GenerateOptions::new(5, DatasetCounts::balanced(160, 60, 160)))?;
    let data = TrainData::load(&root)?;

    let mut config = TrainConfig::new(LossVariant::Ce, 2, &root);
    config.epochs = 3;
    config.learning_rate = 0.01;
    let out = train::run_dir(&dir.path().join("out"), &config);
    train::train_one(&config, &data, Some(&out), |_, _| {})?;

    let model = CamClassifier::load(&out.join(train::CHECKPOINT), Geometry::default())?;
    let test = data::load_split(&root, Split::Test)?;
    let report = eval::evaluate(&model, &test)?;
    print!("{}", report.to_csv());
    let roc = eval::roc_curve(&report.scores.scores, &report.scores.labels)?;
    println!("ROC points {}, trapezoid area {:.4}", roc.len(), eval::trapezoid_area(&roc));
    Ok(())
}
