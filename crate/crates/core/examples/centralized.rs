//! Centralized training on the pooled benchmark cohort.
//!
//! `cargo run --release --example centralized -- [rounds]` (50 by default,
//! about a minute in release mode).

use fedpart::harness::{run_experiment, ExperimentConfig, Method};

fn main() -> fedpart::Result<()> {
    let rounds: usize = std::env::args().nth(1).map_or(50, |a| a.parse().expect("rounds"));
    let mut config = ExperimentConfig::benchmark(Method::Centralized, 0.0);
    config.training.rounds = rounds;
    let record = run_experiment(&config)?;
    for h in &record.history {
        let loss = h.client_losses.iter().map(|c| c.loss).sum::<f64>();
        println!("epoch {:>3}  loss {loss:.4}  val dice {:.4}", h.round, h.val_dice);
    }
    println!(
        "best epoch {} (val {:.4}), test dice {:.4}, {} gradient steps",
        record.best_round,
        record.best_val_dice,
        record.test_dice(),
        record.gradient_steps()
    );
    print!("{}", record.csv());
    Ok(())
}
