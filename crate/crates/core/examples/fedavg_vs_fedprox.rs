//! FedAvg against FedProx on a heterogeneous cohort: test Dice and how much
//! the validation curve jumps from round to round.
//!
//! `cargo run --release --example fedavg_vs_fedprox -- [heterogeneity] [rounds] [mu...]`

use fedpart::harness::{round_to_round_variance, run_experiment, ExperimentConfig, Method};

fn main() -> fedpart::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let heterogeneity: f64 = args.first().map_or(1.0, |a| a.parse().expect("heterogeneity"));
    let rounds: usize = args.get(1).map_or(20, |a| a.parse().expect("rounds"));
    let mut mus: Vec<f64> = args.iter().skip(2).map(|a| a.parse().expect("mu")).collect();
    if mus.is_empty() {
        mus = vec![0.001, 0.01];
    }
    let methods = std::iter::once(Method::FedAvg).chain(mus.into_iter().map(|mu| Method::FedProx { mu }));
    println!("{:<28} {:>9} {:>9} {:>12}", "method", "best val", "test", "var(diff)");
    for method in methods {
        let mut config = ExperimentConfig::benchmark(method, heterogeneity);
        config.training.rounds = rounds;
        let r = run_experiment(&config)?;
        println!(
            "{:<28} {:>9.4} {:>9.4} {:>12.3e}",
            r.method,
            r.best_val_dice,
            r.test_dice(),
            round_to_round_variance(&r.val_dice_series())
        );
    }
    Ok(())
}
