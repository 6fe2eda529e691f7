//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs the frozen benchmark, so expect several minutes.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use common::{
    aggregation_fuzz, check_split, dice_iou_identity_fuzz, metric_fuzz, privacy_leaks, rounds_by_hand, small_sites,
};
use fedpart::federation::{Algorithm, FederationConfig};
use fedpart::harness::{
    replay, round_to_round_variance, run_experiment, ExperimentConfig, Method, RunRecord, MU_SWEEP, REPORT_FILE,
};
use fedpart::nets::{build_attention_variant, build_model, Architecture, NetConfig};
use fedpart::objectives::{gradient_check, DiceObjective};
use fedpart::rng;
use fedpart::synthdata::{generate_phantom, Modality, Sample, SiteProfile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let profile = SiteProfile::iid(0, 2);
    let mut stream = rng::stream(5, rng::domain::PHANTOM, &[0]);
    let samples: Vec<Sample> = (0..2)
        .map(|i| generate_phantom(&mut stream, &profile, 32, 32, Modality::ALL[i]).unwrap())
        .collect();
    let batch: Vec<&Sample> = samples.iter().collect();
    let mut ok = true;
    let mut parts = Vec::new();
    for arch in [Architecture::TinyUnet, Architecture::AttentionTinyUnet] {
        let cfg = NetConfig {
            architecture: arch,
            init_seed: 3,
            ..NetConfig::default()
        };
        let model = match arch {
            Architecture::TinyUnet => build_model(&cfg),
            Architecture::AttentionTinyUnet => build_attention_variant(&cfg),
        }
        .map_err(|e| e.to_string())?;
        let r = gradient_check(&model, &batch, &DiceObjective::default(), 200, 1e-5, 11).map_err(|e| e.to_string())?;
        ok &= r.probed >= 200 && r.worst < 1e-4;
        parts.push(format!("{arch:?} worst {:.2e} over {} probes ({} kink resamples)", r.worst, r.probed, r.resampled));
    }
    let secs = started.elapsed().as_secs_f64();
    check(ok && secs < 30.0, format!("{}; {secs:.1}s", parts.join(", ")))
}

fn fedprox_degeneracy() -> Outcome {
    let data = small_sites(3, 24, 1.0, 77);
    let net = NetConfig {
        init_seed: 21,
        ..NetConfig::default()
    };
    let cfg = |algorithm| FederationConfig {
        algorithm,
        rounds: 5,
        seed: 5,
        ..FederationConfig::default()
    };
    let avg = rounds_by_hand(&net, &cfg(Algorithm::FedAvg), &data);
    let prox = rounds_by_hand(&net, &cfg(Algorithm::FedProx { mu: 0.0 }), &data);
    let mut worst = 0.0f64;
    let mut history_equal = true;
    for (a, p) in avg.iter().zip(&prox) {
        for (x, y) in a.w_global.values().iter().zip(p.w_global.values()) {
            worst = worst.max((x - y).abs());
        }
        history_equal &= a.history == p.history;
    }
    check(
        worst <= 1e-12 && history_equal && avg.len() == 5,
        format!("{} rounds, worst coordinate gap {worst:.1e}, histories equal: {history_equal}", avg.len()),
    )
}

fn aggregation_oracle() -> Outcome {
    let s = aggregation_fuzz(2, 1000);
    check(
        s.cases == 1000 && s.worst <= 1e-12 && s.single_client_cases > 0 && s.single_client_exact,
        format!(
            "{} cases, worst deviation {:.1e}, K=1 exact in {} cases: {}",
            s.cases, s.worst, s.single_client_cases, s.single_client_exact
        ),
    )
}

fn metric_oracle() -> Outcome {
    let flat = metric_fuzz(11, 1000, false, false);
    let vol = metric_fuzz(12, 300, true, false);
    let ids = dice_iou_identity_fuzz(5, 1000);
    let worst = flat.worst.max(vol.worst);
    let below = flat.hd95_below_assd + vol.hd95_below_assd;
    check(
        flat.cases >= 1000 && worst <= 1e-9 && ids.rational_violations == 0 && below == 0,
        format!(
            "{} 2-D + {} 3-D pairs, worst distance gap {worst:.1e}; dice/iou identity broken in {} of {} (float gap {:.1e}); hd95 < assd in {below}",
            flat.cases, vol.cases, ids.rational_violations, ids.cases, ids.float_worst
        ),
    )
}

fn timed_run(config: &ExperimentConfig) -> Result<(RunRecord, f64), String> {
    let started = Instant::now();
    let record = run_experiment(config).map_err(|e| e.to_string())?;
    Ok((record, started.elapsed().as_secs_f64()))
}

fn centralized_convergence(central: &Result<(RunRecord, f64), String>) -> Outcome {
    let (record, secs) = central.as_ref().map_err(Clone::clone)?;
    let dice = record.test_dice();
    check(
        dice >= 0.85 && *secs < 300.0 && record.history.len() == 50,
        format!("test Dice {dice:.4} after {} epochs in {secs:.0}s", record.history.len()),
    )
}

fn fl_gap(central: &Result<(RunRecord, f64), String>) -> Outcome {
    let (central, _) = central.as_ref().map_err(Clone::clone)?;
    let (fed, secs) = timed_run(&ExperimentConfig::benchmark(Method::FedAvg, 0.0))?;
    let gap = central.test_dice() - fed.test_dice();
    let (cs, fs) = (central.gradient_steps(), fed.gradient_steps());
    // Per-client batching rounds up once per client per round.
    let slack = fed.config.sites.sites * fed.history.len();
    check(
        gap.abs() <= 0.05 && fs.abs_diff(cs) <= slack,
        format!(
            "centralized {:.4}, FedAvg {:.4} ({secs:.0}s), gap {gap:.4}; gradient steps {cs} vs {fs}",
            central.test_dice(),
            fed.test_dice()
        ),
    )
}

fn non_iid_stabilization() -> Outcome {
    let (avg, _) = timed_run(&ExperimentConfig::benchmark(Method::FedAvg, 1.0))?;
    let mut best: Option<(f64, RunRecord)> = None;
    for mu in MU_SWEEP {
        let (rec, _) = timed_run(&ExperimentConfig::benchmark(Method::FedProx { mu }, 1.0))?;
        // Selection on validation Dice; the earliest μ wins ties.
        if best.as_ref().is_none_or(|(_, b)| rec.best_val_dice > b.best_val_dice) {
            best = Some((mu, rec));
        }
    }
    let (mu, prox) = best.expect("non-empty sweep");
    let (va, vp) = (round_to_round_variance(&avg.val_dice_series()), round_to_round_variance(&prox.val_dice_series()));
    check(
        prox.test_dice() >= avg.test_dice() - 0.01 && va > vp,
        format!(
            "selected mu={mu} (val {:.4}); test Dice FedProx {:.4} vs FedAvg {:.4}; variance FedAvg {va:.3e} vs FedProx {vp:.3e}",
            prox.best_val_dice,
            prox.test_dice(),
            avg.test_dice()
        ),
    )
}

fn determinism_and_replay() -> Outcome {
    let mut parts = Vec::new();
    for method in [Method::FedProx { mu: 0.01 }, Method::Centralized] {
        let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
        for d in &dirs {
            let cfg = ExperimentConfig {
                seed: 6,
                method,
                out_dir: Some(d.path().to_path_buf()),
                ..ExperimentConfig::smoke()
            };
            run_experiment(&cfg).map_err(|e| e.to_string())?;
        }
        let [a, b] = &dirs;
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join(REPORT_FILE)).map_err(|e| e.to_string());
        if read(a)? != read(b)? {
            return Err(format!("{method:?}: report.csv differs between runs"));
        }
        let verdict = replay(a.path()).map_err(|e| e.to_string())?;
        if verdict.to_string() != "identical" {
            return Err(format!("{method:?}: replay says {verdict}"));
        }
        parts.push(format!("{method:?}"));
    }
    Ok(format!("byte-identical CSV and replay \"identical\" for {}", parts.join(", ")))
}

fn split_protocol() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut cases = 0;
    while cases < 500 {
        let (n_t1, n_t2) = (rng.random_range(0..400), rng.random_range(0..400));
        if n_t1 + n_t2 < 10 {
            continue;
        }
        check_split(n_t1, n_t2, rng.random())?;
        cases += 1;
    }
    Ok(format!("{cases} fuzzed dataset sizes"))
}

fn privacy_boundary() -> Outcome {
    let leaks = privacy_leaks();
    check(leaks.is_empty(), format!("raw-data types reachable from messages: {leaks:?}"))
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} {id:>2} {name}: {detail}");
    outcome.is_ok()
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= run(1, "gradient correctness", gradient_correctness);
    ok &= run(2, "FedProx degeneracy", fedprox_degeneracy);
    ok &= run(3, "aggregation oracle", aggregation_oracle);
    ok &= run(4, "metric oracle", metric_oracle);
    let central = timed_run(&ExperimentConfig::benchmark(Method::Centralized, 0.0));
    ok &= run(5, "centralized convergence", || centralized_convergence(&central));
    ok &= run(6, "FL vs centralized gap", || fl_gap(&central));
    ok &= run(7, "non-IID stabilization", non_iid_stabilization);
    ok &= run(8, "determinism and replay", determinism_and_replay);
    ok &= run(9, "split protocol", split_protocol);
    ok &= run(10, "privacy boundary", privacy_boundary);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
