//! Reverse-mode gradients of the region-aware Dice loss against central
//! finite differences, for both architectures.

use fedpart::nets::{build_attention_variant, build_model, Architecture, NetConfig};
use fedpart::objectives::{gradient_check, DiceObjective};
use fedpart::synthdata::{generate_cohort, CohortSpec, Sample};

fn main() -> fedpart::Result<()> {
    let spec = CohortSpec {
        sites: 1,
        samples_per_site: 20,
        imbalance_alpha: None,
        ..CohortSpec::default()
    };
    let site = generate_cohort(&spec, 1)?.remove(0);
    let batch: Vec<&Sample> = site.train.iter().take(2).collect();
    for arch in [Architecture::TinyUnet, Architecture::AttentionTinyUnet] {
        let cfg = NetConfig {
            architecture: arch,
            ..NetConfig::default()
        };
        let model = match arch {
            Architecture::TinyUnet => build_model(&cfg)?,
            Architecture::AttentionTinyUnet => build_attention_variant(&cfg)?,
        };
        let started = std::time::Instant::now();
        let r = gradient_check(&model, &batch, &DiceObjective::default(), 200, 1e-5, 0)?;
        println!(
            "{arch:?}: {} parameters, {} probed, {} resampled at kinks, max relative error {:.2e} ({:.1}s)",
            model.param_count(),
            r.probed,
            r.resampled,
            r.worst,
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
