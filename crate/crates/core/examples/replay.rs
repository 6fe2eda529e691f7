//! Runs a small experiment, replays it from its artifacts, then tampers with
//! the stored record and replays again.

use fedpart::harness::{read_record, replay, run_experiment, ExperimentConfig, RECORD_FILE};

fn main() -> fedpart::Result<()> {
    let dir = std::env::temp_dir().join(format!("fedpart-replay-{}", std::process::id()));
    let config = ExperimentConfig {
        out_dir: Some(dir.clone()),
        ..ExperimentConfig::smoke()
    };
    let record = run_experiment(&config)?;
    println!("ran {} into {} (config hash {})", record.method, dir.display(), record.config_hash);
    println!("replay: {}", replay(&dir)?);

    let path = dir.join(RECORD_FILE);
    let mut stored = read_record(&path)?;
    stored.reports[0].report.average.dice += 0.01;
    std::fs::write(&path, serde_json::to_vec_pretty(&stored).expect("record serializes")).expect("writable run dir");
    println!("after editing a stored Dice value:\n{}", replay(&dir)?);
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
