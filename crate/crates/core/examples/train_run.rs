//! Train one short run on a freshly generated dataset and print its epoch log.

use focuslab::data::{self, DatasetCounts, GenerateOptions};
use focuslab::losses::LossVariant;
use focuslab::train::{self, TrainConfig, TrainData};

fn main() -> focuslab::Result<()> {
    let dir = tempfile::tempdir().expect("temporary directory");
    let root = dir.path().join("data");
    data::generate_dataset(&root, &GenerateOptions::new(7, DatasetCounts::balanced(160, 60, 40)))?;
    let data = TrainData::load(&root)?;

    let variant: LossVariant = std::env::args().nth(1).as_deref().unwrap_or("droid").parse()?;
    let mut config = TrainConfig::new(variant, 1, &root);
    config.epochs = 4;
    config.learning_rate = 0.01;
    let out = train::run_dir(&dir.path().join("out"), &config);
    let record = train::train_one(&config, &data, Some(&out), |row, _| {
        println!(
            "epoch {}  loss {:.4}  val_acc {:.3}  val_cam_entropy {:.4}",
            row.epoch, row.train_loss, row.val_acc, row.val_cam_entropy
        );
    })?;
    println!("best epoch {} checkpoint sha256 {}", record.best_epoch, record.checkpoint_sha256);
    print!("{}", record.meta_text());
    Ok(())
}
