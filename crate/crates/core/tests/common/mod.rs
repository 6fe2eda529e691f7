//! Oracles and fuzz drivers shared by the integration tests and the
//! acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use fedpart::federation::{
    aggregate, run_round, shard_validator, Broadcast, ClientState, ClientUpdate, FederationConfig, ServerState,
    TypeInventory,
};
use fedpart::metrics::{self, BinaryMask};
use fedpart::nets::{build_model, layout_for, Layout, NetConfig, ParameterVector};
use fedpart::synthdata::{
    generate_cohort, preprocess_site, split_dataset, CohortSpec, Grid, Modality, Preprocessing, Sample, SiteDataset,
};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod oracle {
    /// Coordinates of foreground voxels with a background or outside face neighbour.
    pub fn surface(shape: &[usize], data: &[bool]) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let n: usize = shape.iter().product();
        for i in 0..n {
            if !data[i] {
                continue;
            }
            let c = unflatten(shape, i);
            let mut edge = false;
            for a in 0..shape.len() {
                for delta in [-1i64, 1] {
                    let v = c[a] as i64 + delta;
                    if v < 0 || v >= shape[a] as i64 {
                        edge = true;
                    } else {
                        let mut nc = c.clone();
                        nc[a] = v as usize;
                        if !data[flatten(shape, &nc)] {
                            edge = true;
                        }
                    }
                }
            }
            if edge {
                out.push(c);
            }
        }
        out
    }

    pub fn unflatten(shape: &[usize], mut i: usize) -> Vec<usize> {
        let mut c = vec![0; shape.len()];
        for a in (0..shape.len()).rev() {
            c[a] = i % shape[a];
            i /= shape[a];
        }
        c
    }

    pub fn flatten(shape: &[usize], c: &[usize]) -> usize {
        c.iter().zip(shape).fold(0, |acc, (&x, &s)| acc * s + x)
    }

    fn dist(a: &[usize], b: &[usize], spacing: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(spacing)
            .map(|((&x, &y), &s)| {
                let d = (x as f64 - y as f64) * s;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Pooled nearest-surface distances in both directions, all pairs.
    pub fn pooled(shape: &[usize], spacing: &[f64], a: &[bool], b: &[bool]) -> Vec<f64> {
        let (sa, sb) = (surface(shape, a), surface(shape, b));
        let directed = |from: &[Vec<usize>], to: &[Vec<usize>]| -> Vec<f64> {
            from.iter()
                .map(|p| to.iter().map(|q| dist(p, q, spacing)).fold(f64::INFINITY, f64::min))
                .collect()
        };
        let mut d = directed(&sa, &sb);
        d.extend(directed(&sb, &sa));
        d
    }

    pub fn assd(d: &[f64]) -> f64 {
        d.iter().sum::<f64>() / d.len() as f64
    }

    /// Linear interpolation between order statistics at rank q·(n−1).
    pub fn quantile(d: &[f64], q: f64) -> f64 {
        let mut s = d.to_vec();
        s.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let rank = q * (s.len() - 1) as f64;
        let lo = rank.floor() as usize;
        let hi = rank.ceil() as usize;
        s[lo] + (rank - lo as f64) * (s[hi] - s[lo])
    }
}

pub fn random_mask(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<bool> {
    let n: usize = shape.iter().product();
    let density = rng.random_range(0.02..0.7);
    let mut d: Vec<bool> = (0..n).map(|_| rng.random_bool(density)).collect();
    if rng.random_bool(0.3) {
        // A solid box, to get large interior regions too.
        let lo: Vec<usize> = shape.iter().map(|&s| rng.random_range(0..s)).collect();
        let hi: Vec<usize> = shape.iter().zip(&lo).map(|(&s, &l)| rng.random_range(l..s) + 1).collect();
        for (i, v) in d.iter_mut().enumerate() {
            let c = oracle::unflatten(shape, i);
            *v = c.iter().zip(&lo).zip(&hi).all(|((&x, &l), &h)| x >= l && x < h);
        }
    }
    if !d.contains(&true) {
        let i = rng.random_range(0..n);
        d[i] = true;
    }
    d
}

pub fn random_shape(rng: &mut ChaCha8Rng, three_d: bool) -> Vec<usize> {
    if three_d {
        (0..3).map(|_| rng.random_range(1..=8)).collect()
    } else {
        (0..2).map(|_| rng.random_range(1..=16)).collect()
    }
}

pub struct FuzzSummary {
    pub cases: usize,
    pub worst: f64,
    pub hd95_below_assd: usize,
}

pub fn metric_fuzz(seed: u64, cases: usize, three_d: bool, spacing_jitter: bool) -> FuzzSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = FuzzSummary {
        cases: 0,
        worst: 0.0,
        hd95_below_assd: 0,
    };
    for _ in 0..cases {
        let shape = random_shape(&mut rng, three_d);
        let spacing: Vec<f64> = shape
            .iter()
            .map(|_| if spacing_jitter { rng.random_range(0.3..2.5) } else { 1.0 })
            .collect();
        let a = random_mask(&mut rng, &shape);
        let b = random_mask(&mut rng, &shape);
        let ma = BinaryMask::with_spacing(&shape, a.clone(), &spacing).unwrap();
        let mb = BinaryMask::with_spacing(&shape, b.clone(), &spacing).unwrap();
        let d = oracle::pooled(&shape, &spacing, &a, &b);
        let (want_assd, want_hd95) = (oracle::assd(&d), oracle::quantile(&d, 0.95));
        let got_assd = metrics::assd(&ma, &mb).unwrap().unwrap();
        let got_hd95 = metrics::hd95(&ma, &mb).unwrap().unwrap();
        s.worst = s.worst.max((got_assd - want_assd).abs()).max((got_hd95 - want_hd95).abs());
        if got_hd95 < got_assd {
            s.hd95_below_assd += 1;
        }
        // Symmetry and the 100th-percentile bound.
        assert!((metrics::assd(&mb, &ma).unwrap().unwrap() - got_assd).abs() <= 1e-12);
        assert_eq!(metrics::hd95(&mb, &ma).unwrap().unwrap(), got_hd95);
        assert!(got_hd95 <= oracle::quantile(&d, 1.0) + 1e-12);
        s.cases += 1;
    }
    s
}

/// Smallest real parameter layout, large enough for 512-entry fuzz vectors.
pub fn small_layout() -> Arc<Layout> {
    layout_for(&NetConfig {
        base_width: 1,
        depth: 1,
        ..NetConfig::default()
    })
    .unwrap()
}

/// `Σ N_k w_k / Σ N_k` in exact rationals; f64 inputs convert losslessly.
pub fn exact_weighted_mean(ws: &[Vec<f64>], ns: &[usize], dim: usize) -> Vec<f64> {
    let total = BigRational::from_integer(BigInt::from(ns.iter().sum::<usize>()));
    (0..dim)
        .map(|i| {
            let mut acc = BigRational::zero();
            for (w, &n) in ws.iter().zip(ns) {
                acc += BigRational::from_f64(w[i]).unwrap() * BigRational::from_integer(BigInt::from(n));
            }
            (acc / &total).to_f64().unwrap()
        })
        .collect()
}

pub struct AggregationSummary {
    pub cases: usize,
    /// Largest absolute deviation from the exact mean.
    pub worst: f64,
    pub single_client_cases: usize,
    pub single_client_exact: bool,
}

/// Fuzzed aggregation cases with K ≤ 7 clients and dimension ≤ 512.
pub fn aggregation_fuzz(seed: u64, cases: usize) -> AggregationSummary {
    let layout = small_layout();
    let full = layout.total_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = AggregationSummary {
        cases: 0,
        worst: 0.0,
        single_client_cases: 0,
        single_client_exact: true,
    };
    for case in 0..cases {
        let k = rng.random_range(1..=7);
        let dim = rng.random_range(1..=512.min(full));
        let scale = [1e-3, 1.0, 1e3][case % 3];
        let ws: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..full).map(|i| if i < dim { rng.random_range(-scale..scale) } else { 0.0 }).collect())
            .collect();
        let ns: Vec<usize> = (0..k).map(|_| rng.random_range(1..=500)).collect();
        let pvs: Vec<ParameterVector> =
            ws.iter().map(|w| ParameterVector::load(layout.clone(), w.clone()).unwrap()).collect();
        let pairs: Vec<(&ParameterVector, usize)> = pvs.iter().zip(&ns).map(|(p, &n)| (p, n)).collect();
        let got = aggregate(&pairs).unwrap();
        let want = exact_weighted_mean(&ws, &ns, dim);
        for i in 0..dim {
            s.worst = s.worst.max((got.values()[i] - want[i]).abs());
        }
        if k == 1 {
            s.single_client_cases += 1;
            s.single_client_exact &= got == pvs[0];
        }
        s.cases += 1;
    }
    s
}

pub struct IdentitySummary {
    pub cases: usize,
    /// Pairs where `dice = 2·iou/(1+iou)` fails in exact rationals.
    pub rational_violations: usize,
    /// Largest float deviation from the identity.
    pub float_worst: f64,
}

pub fn dice_iou_identity_fuzz(seed: u64, cases: usize) -> IdentitySummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = IdentitySummary {
        cases: 0,
        rational_violations: 0,
        float_worst: 0.0,
    };
    for case in 0..cases {
        let shape = random_shape(&mut rng, case % 4 == 3);
        let a = BinaryMask::new(&shape, random_mask(&mut rng, &shape)).unwrap();
        let b = BinaryMask::new(&shape, random_mask(&mut rng, &shape)).unwrap();
        let c = metrics::confusion(&a, &b).unwrap();
        if c.tp + c.fp + c.fn_ == 0 {
            continue;
        }
        let r = |v: u64| BigRational::from_u64(v).unwrap();
        let dice = r(2 * c.tp) / r(2 * c.tp + c.fp + c.fn_);
        let iou = r(c.tp) / r(c.tp + c.fp + c.fn_);
        if dice != r(2) * iou.clone() / (r(1) + iou) {
            s.rational_violations += 1;
        }
        let (fd, fi) = (c.dice(), c.iou());
        s.float_worst = s.float_worst.max((fd - 2.0 * fi / (1.0 + fi)).abs());
        s.cases += 1;
    }
    s
}

fn split_dummy(index: usize, modality: Modality) -> Sample {
    Sample {
        image: Grid::filled(2, 2, index as f64),
        labels: Grid::filled(2, 2, 0u8),
        site: 3,
        modality,
        index,
    }
}

/// Splits `n_t1` T1 and `n_t2` T2 samples and checks the 10% test and 80/20
/// train/val fractions (±1 per modality), disjointness and exhaustiveness.
pub fn check_split(n_t1: usize, n_t2: usize, seed: u64) -> Result<(), String> {
    let mut samples: Vec<Sample> = (0..n_t1).map(|i| split_dummy(i, Modality::T1)).collect();
    samples.extend((0..n_t2).map(|i| split_dummy(n_t1 + i, Modality::T2)));
    let ds = split_dataset(samples, seed).map_err(|e| e.to_string())?;
    let count = |v: &[Sample], m: Modality| v.iter().filter(|s| s.modality == m).count();
    for (m, n) in [(Modality::T1, n_t1), (Modality::T2, n_t2)] {
        let (test, val, train) = (count(&ds.test, m), count(&ds.val, m), count(&ds.train, m));
        if test + val + train != n {
            return Err(format!("{m:?}: {test}+{val}+{train} != {n}"));
        }
        let rest = (n - test) as f64;
        if (test as f64 - 0.1 * n as f64).abs() > 1.0
            || (val as f64 - 0.2 * rest).abs() > 1.0
            || (train as f64 - 0.8 * rest).abs() > 1.0
        {
            return Err(format!("{m:?} of {n}: test {test}, val {val}, train {train}"));
        }
    }
    let ids = |v: &[Sample]| v.iter().map(|s| s.index).collect::<BTreeSet<_>>();
    let (a, b, c) = (ids(&ds.train), ids(&ds.val), ids(&ds.test));
    if !(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c)) {
        return Err(format!("overlapping splits for ({n_t1}, {n_t2})"));
    }
    let all: BTreeSet<usize> = a.union(&b).chain(c.iter()).copied().collect();
    if all != (0..n_t1 + n_t2).collect::<BTreeSet<_>>() {
        return Err(format!("splits of ({n_t1}, {n_t2}) do not cover every sample"));
    }
    Ok(())
}

/// Generated and preprocessed sites without sample-count imbalance.
pub fn small_sites(k: usize, n: usize, heterogeneity: f64, seed: u64) -> Vec<SiteDataset> {
    let spec = CohortSpec {
        sites: k,
        samples_per_site: n,
        imbalance_alpha: None,
        heterogeneity,
        image_size: 32,
        ..CohortSpec::default()
    };
    let mut out = generate_cohort(&spec, seed).unwrap();
    for s in &mut out {
        preprocess_site(s, &Preprocessing::default()).unwrap();
    }
    out
}

/// Server state after every round, driving `run_round` directly.
pub fn rounds_by_hand(net: &NetConfig, cfg: &FederationConfig, data: &[SiteDataset]) -> Vec<ServerState> {
    let clients: Vec<ClientState> =
        data.iter().enumerate().map(|(k, s)| ClientState::from_site(k, net, s).unwrap()).collect();
    let validate = shard_validator(net, &clients);
    let mut server = ServerState::new(build_model(net).unwrap().params);
    let mut states = Vec::new();
    for _ in 0..cfg.rounds {
        server = run_round(server, &clients, cfg, &validate).unwrap();
        states.push(server.clone());
    }
    states
}

/// Names of every type that carries pixels or labels.
pub const RAW_DATA_TYPES: [&str; 7] = ["Sample", "Image", "LabelGrid", "Grid", "SiteDataset", "Tensor", "u8"];

/// `(message type, raw type)` pairs where a raw-data type is reachable from
/// a type on the aggregation path. Empty when the boundary holds.
pub fn privacy_leaks() -> Vec<(&'static str, &'static str)> {
    let mut leaks = Vec::new();
    for (name, types) in [
        ("Broadcast", Broadcast::reachable_types()),
        ("ClientUpdate", ClientUpdate::reachable_types()),
        ("ServerState", ServerState::reachable_types()),
    ] {
        assert!(types.contains(name), "{name} missing from its own inventory");
        for raw in RAW_DATA_TYPES {
            if types.contains(raw) {
                leaks.push((name, raw));
            }
        }
    }
    leaks
}
