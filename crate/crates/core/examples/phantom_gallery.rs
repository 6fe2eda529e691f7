//! One phantom per site on a heterogeneous cohort, drawn as text.
//!
//! `cargo run --example phantom_gallery -- [heterogeneity] [seed]`

use fedpart::synthdata::{generate_cohort, CohortSpec, Sample};

fn draw(s: &Sample) {
    let glyph = [' ', 'H', 'B', 'T'];
    for y in 0..s.labels.height() {
        let row: String = (0..s.labels.width()).map(|x| glyph[s.labels.get(y, x) as usize]).collect();
        println!("  |{row}|");
    }
}

fn main() -> fedpart::Result<()> {
    let mut args = std::env::args().skip(1);
    let heterogeneity: f64 = args.next().map_or(1.0, |a| a.parse().expect("heterogeneity"));
    let seed: u64 = args.next().map_or(2024, |a| a.parse().expect("seed"));
    let spec = CohortSpec {
        heterogeneity,
        ..CohortSpec::default()
    };
    let sites = generate_cohort(&spec, seed)?;
    for site in &sites {
        let s = &site.train[0];
        let mut area = [0usize; 4];
        for &l in s.labels.data() {
            area[l as usize] += 1;
        }
        let mean = s.image.data().iter().sum::<f64>() / s.image.data().len() as f64;
        println!(
            "site {} ({} samples, {:?}): head {} body {} tail {} px, mean intensity {mean:.3}",
            site.site,
            site.len(),
            s.modality,
            area[1],
            area[2],
            area[3]
        );
        draw(s);
    }
    Ok(())
}
