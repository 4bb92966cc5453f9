//! A miniature multi-seed suite: train, evaluate on the held-out family, aggregate.

use focuslab::cli::{self, ExperimentArgs, ReportArgs};
use focuslab::data::{self, DatasetCounts, GenerateOptions};

fn main() -> focuslab::Result<()> {
    let dir = tempfile::tempdir().expect("temporary directory");
    let root = dir.path().join("data");
    data::generate_dataset(&root, &GenerateOptions::new(9, DatasetCounts::balanced(120, 40, 80)))?;
    let out = dir.path().join("suite");
    let args = ExperimentArgs {
        dataset: Some(root),
        out: Some(out.clone()),
        variants: Some("ce,hseb".into()),
        seeds: Some("1,2".into()),
        lr: Some(0.01),
        epochs: Some(2),
        ..Default::default()
    };
    cli::cmd_suite(&args)?;
    println!("-- rebuilt from run directories --");
    cli::cmd_report(&ReportArgs { out: out.clone() })?;
    for f in ["scatter.csv", "boxplot.csv", "summary.meta"] {
        println!("-- {f} --\n{}", std::fs::read_to_string(out.join(f)).expect("written by the suite"));
    }
    Ok(())
}
