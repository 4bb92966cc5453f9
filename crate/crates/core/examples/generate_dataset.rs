//! Generate a small dataset and report its shortcut and salience statistics.
//!
//! Usage: `generate_dataset [OUT_DIR]` (defaults to a temporary directory).

use std::path::PathBuf;

use focuslab::data::{self, DatasetCounts, GenerateOptions, Split};

fn main() -> focuslab::Result<()> {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = std::env::args().nth(1).map_or_else(|| tmp.path().to_path_buf(), PathBuf::from);
    let opts = GenerateOptions::new(7, DatasetCounts::balanced(200, 40, 80));
    for m in data::generate_dataset(&root, &opts)? {
        println!("{}: {} rows -> {}", m.split, m.rows.len(), m.split.manifest_path(&root).display());
    }

    let train = data::load_split(&root, Split::Train)?;
    let real: Vec<&[f64]> = train.iter().filter(|s| s.label == 0).map(|s| s.image.as_slice()).collect();
    let fake: Vec<&[f64]> = train.iter().filter(|s| s.label == 1).map(|s| s.image.as_slice()).collect();
    println!("pixel histogram EMD real vs synthetic: {:.5}", data::pixel_histogram_emd(&real, &fake)?);
    println!("human salience entropy target: {:.4}", data::human_entropy_target(&train)?);
    Ok(())
}
