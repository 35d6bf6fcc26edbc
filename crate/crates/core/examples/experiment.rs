//! Run one of the CLI experiments from code with a different seed and output
//! directory.
//!
//! ```text
//! cargo run --release --example experiment -- [config.toml] [out_dir]
//! ```

use std::path::PathBuf;

use semcom::experiments::{cmd_simulate, read_csv, ExperimentConfig, RunContext, SimulateSummaryRow};

fn main() -> semcom::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/paper.toml"));
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("semcom-example"));

    let ctx = RunContext::new(ExperimentConfig::load(&config)?, Some(7), Some(out.clone()), false);
    for line in cmd_simulate(&ctx)?.lines {
        println!("{line}");
    }
    let rows: Vec<SimulateSummaryRow> = read_csv(&out.join("simulate/summary.csv"))?;
    for r in rows {
        println!("{} -> {:.4} with {:.0} W over {} objects", r.image_id, r.mist, r.total_power_w, r.objects);
    }
    Ok(())
}
