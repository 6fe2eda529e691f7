//! The architecture × method grid, written as one CSV table.
//!
//! `cargo run --release --example grid -- [out_dir] [rounds]`. With the full
//! 50 rounds this is twelve benchmark runs; the default of 5 rounds gives a
//! quick preview of the table layout.

use std::path::PathBuf;

use fedpart::harness::{default_methods, run_grid, ExperimentConfig, Method};
use fedpart::nets::Architecture;

fn main() -> fedpart::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map_or_else(|| std::env::temp_dir().join("fedpart-grid"), PathBuf::from);
    let rounds: usize = args.next().map_or(5, |a| a.parse().expect("rounds"));
    let mut base = ExperimentConfig::benchmark(Method::FedAvg, 0.5);
    base.training.rounds = rounds;
    base.out_dir = Some(out.clone());
    let grid = run_grid(&base, &[Architecture::TinyUnet, Architecture::AttentionTinyUnet], &default_methods())?;
    for cell in &grid.cells {
        match &cell.outcome {
            Ok(r) => println!("{:<36} test dice {:.4}", r.method, r.test_dice()),
            Err(e) => println!("{:?} {:?} failed: {e}", cell.architecture, cell.method),
        }
    }
    println!("grid table in {}", out.join("grid.csv").display());
    Ok(())
}
