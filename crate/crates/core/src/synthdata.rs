//! Synthetic multi-site phantoms, split protocol and preprocessing.
//!
//! A phantom is an elongated organ drawn around a random cubic Bézier spine.
//! It is cut along the spine: the head runs up to a landmark fraction of the
//! arc length, and the remaining length is halved into body and tail.
//! Site profiles skew geometry, intensity and pathology to simulate non-IID
//! institutions.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Row-major 2-D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

pub type Image = Grid<f64>;
pub type LabelGrid = Grid<u8>;

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "grid {height}x{width} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Grid {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    T1,
    T2,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::T1, Modality::T2];

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T2 => "T2",
        }
    }

    fn code(self) -> u8 {
        match self {
            Modality::T1 => 0,
            Modality::T2 => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Modality::T1),
            1 => Some(Modality::T2),
            _ => None,
        }
    }

    /// Mean intensity of background, head, body and tail.
    pub fn region_means(self) -> [f64; 4] {
        match self {
            Modality::T1 => [0.15, 0.48, 0.62, 0.76],
            Modality::T2 => [0.22, 0.80, 0.66, 0.52],
        }
    }
}

/// One image with its per-pixel region labels (0 background, 1 head, 2 body, 3 tail).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub labels: LabelGrid,
    pub site: usize,
    pub modality: Modality,
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathologyMix {
    pub tail_atrophy: f64,
    pub head_mass: f64,
}

impl PathologyMix {
    /// Probabilities over (none, tail atrophy, head mass).
    pub fn distribution(&self) -> [f64; 3] {
        [1.0 - self.tail_atrophy - self.head_mass, self.tail_atrophy, self.head_mass]
    }

    pub fn total_variation(&self, other: &PathologyMix) -> f64 {
        let (a, b) = (self.distribution(), other.distribution());
        0.5 * a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteProfile {
    pub site: usize,
    pub sample_count: usize,
    /// Mean head fraction of the spine; body and tail split the rest evenly.
    pub head_fraction: f64,
    /// Scale on the organ thickness.
    pub thickness: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub pathology: PathologyMix,
}

impl SiteProfile {
    pub fn iid(site: usize, sample_count: usize) -> Self {
        SiteProfile {
            site,
            sample_count,
            head_fraction: 0.4,
            thickness: 1.0,
            brightness: 0.0,
            contrast: 1.0,
            noise_sigma: 0.05,
            pathology: PathologyMix {
                tail_atrophy: 0.1,
                head_mass: 0.1,
            },
        }
    }

    /// Head, body and tail fractions of the spine length.
    pub fn size_fractions(&self) -> [f64; 3] {
        let rest = (1.0 - self.head_fraction) / 2.0;
        [self.head_fraction, rest, rest]
    }
}

/// Site profiles whose skew grows linearly with `heterogeneity`.
pub fn make_sites(
    k: usize,
    heterogeneity: f64,
    counts: &[usize],
    master_seed: u64,
) -> Result<Vec<SiteProfile>> {
    if k == 0 {
        return Err(Error::field("sites", "need at least one site"));
    }
    if counts.len() != k {
        return Err(Error::field("counts", format!("expected {k} counts, got {}", counts.len())));
    }
    if !(0.0..=1.0).contains(&heterogeneity) {
        return Err(Error::field("heterogeneity", "must lie in [0, 1]"));
    }
    let h = heterogeneity;
    Ok((0..k)
        .map(|site| {
            let mut s = rng::stream(master_seed, rng::domain::SITES, &[site as u64]);
            let mut u = || s.random_range(-1.0..=1.0f64);
            let (geo, thick, bright, contrast, noise) = (u(), u(), u(), u(), u());
            let base = SiteProfile::iid(site, counts[site]);
            // Extreme pathology mixes alternate between sites so that at full
            // heterogeneity neighbouring sites disagree on which region is affected.
            let extreme = if site % 2 == 0 {
                PathologyMix {
                    tail_atrophy: 0.0,
                    head_mass: 0.8,
                }
            } else {
                PathologyMix {
                    tail_atrophy: 0.8,
                    head_mass: 0.0,
                }
            };
            SiteProfile {
                head_fraction: base.head_fraction + h * 0.12 * geo,
                thickness: base.thickness + h * 0.2 * thick,
                brightness: base.brightness + h * 0.15 * bright,
                contrast: base.contrast + h * 0.3 * contrast,
                noise_sigma: base.noise_sigma + h * 0.03 * (noise + 1.0),
                pathology: PathologyMix {
                    tail_atrophy: (1.0 - h) * base.pathology.tail_atrophy + h * extreme.tail_atrophy,
                    head_mass: (1.0 - h) * base.pathology.head_mass + h * extreme.head_mass,
                },
                ..base
            }
        })
        .collect())
}

/// Splits `total` samples over `k` sites by a seeded Dirichlet(α) draw,
/// giving every site at least `min_per_site`.
pub fn dirichlet_counts(total: usize, k: usize, alpha: f64, min_per_site: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || total < k * min_per_site {
        return Err(Error::field(
            "counts",
            format!("{total} samples cannot give {k} sites at least {min_per_site} each"),
        ));
    }
    if !(alpha > 0.0) {
        return Err(Error::field("imbalance_alpha", "must be positive"));
    }
    let mut s = rng::stream(seed, rng::domain::SITES, &[u64::MAX]);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::field("imbalance_alpha", e.to_string()))?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(&mut s)).collect();
    let z: f64 = draws.iter().sum();
    let spare = total - k * min_per_site;
    let exact: Vec<f64> = draws.iter().map(|d| d / z * spare as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = spare - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts.into_iter().map(|c| c + min_per_site).collect())
}

/// Spine bookkeeping of a generated phantom.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomGeometry {
    pub spine_length: f64,
    pub head_length: f64,
    pub body_length: f64,
    pub tail_length: f64,
    /// Arc-length spacing between consecutive spine samples.
    pub spine_step: f64,
    /// Arc length covered by spine samples assigned to each region.
    pub sampled_lengths: [f64; 3],
    pub pathology: Pathology,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pathology {
    None,
    TailAtrophy,
    HeadMass,
}

const SPINE_SAMPLES: usize = 241;
const MIN_REGION_PIXELS: usize = 8;
const MAX_ATTEMPTS: usize = 100;

pub fn generate_phantom(
    rng: &mut Stream,
    profile: &SiteProfile,
    height: usize,
    width: usize,
    modality: Modality,
) -> Result<Sample> {
    generate_phantom_with_geometry(rng, profile, height, width, modality).map(|(s, _)| s)
}

pub fn generate_phantom_with_geometry(
    rng: &mut Stream,
    profile: &SiteProfile,
    height: usize,
    width: usize,
    modality: Modality,
) -> Result<(Sample, PhantomGeometry)> {
    if height < 32 || width < 32 || height % 4 != 0 || width % 4 != 0 {
        return Err(Error::field(
            "image_size",
            format!("phantoms need extents >= 32 and divisible by 4, got {height}x{width}"),
        ));
    }
    let mut last = String::new();
    for _ in 0..MAX_ATTEMPTS {
        match draw_labels(rng, profile, height, width) {
            Ok((labels, geo)) => {
                let image = paint(rng, &labels, profile, modality)?;
                let sample = Sample {
                    image,
                    labels,
                    site: profile.site,
                    modality,
                    index: 0,
                };
                return Ok((sample, geo));
            }
            Err(reason) => last = reason,
        }
    }
    Err(Error::Degenerate {
        attempts: MAX_ATTEMPTS,
        reason: last,
    })
}

fn bezier(p: &[(f64, f64); 4], t: f64) -> (f64, f64) {
    let u = 1.0 - t;
    let (a, b, c, d) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
    (
        a * p[0].0 + b * p[1].0 + c * p[2].0 + d * p[3].0,
        a * p[0].1 + b * p[1].1 + c * p[2].1 + d * p[3].1,
    )
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn draw_labels(
    rng: &mut Stream,
    profile: &SiteProfile,
    height: usize,
    width: usize,
) -> std::result::Result<(LabelGrid, PhantomGeometry), String> {
    let (hf, wf) = (height as f64, width as f64);
    let scale = hf.min(wf);
    let mut jitter = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let ctrl = [
        (wf * jitter(0.16, 0.26), hf * jitter(0.50, 0.66)),
        (wf * jitter(0.34, 0.48), hf * jitter(0.30, 0.75)),
        (wf * jitter(0.52, 0.68), hf * jitter(0.25, 0.70)),
        (wf * jitter(0.76, 0.86), hf * jitter(0.28, 0.46)),
    ];
    let head_r = scale * 0.095 * profile.thickness * jitter(0.85, 1.15);
    let tail_r = scale * 0.055 * profile.thickness * jitter(0.85, 1.15);
    let frac = (profile.head_fraction + 0.04 * jitter(-1.0, 1.0)).clamp(0.2, 0.6);
    let roll: f64 = jitter(0.0, 1.0);
    let pathology = if roll < profile.pathology.tail_atrophy {
        Pathology::TailAtrophy
    } else if roll < profile.pathology.tail_atrophy + profile.pathology.head_mass {
        Pathology::HeadMass
    } else {
        Pathology::None
    };

    // Arc-length parametrised spine samples.
    let fine: Vec<(f64, f64)> = (0..=2000).map(|i| bezier(&ctrl, i as f64 / 2000.0)).collect();
    let mut cum = vec![0.0; fine.len()];
    for i in 1..fine.len() {
        let (dx, dy) = (fine[i].0 - fine[i - 1].0, fine[i].1 - fine[i - 1].1);
        cum[i] = cum[i - 1] + (dx * dx + dy * dy).sqrt();
    }
    let length = cum[cum.len() - 1];
    let step = length / (SPINE_SAMPLES - 1) as f64;
    let mut spine = Vec::with_capacity(SPINE_SAMPLES);
    let mut j = 0;
    for i in 0..SPINE_SAMPLES {
        let s = i as f64 * step;
        while j + 1 < cum.len() - 1 && cum[j + 1] < s {
            j += 1;
        }
        let seg = (cum[j + 1] - cum[j]).max(1e-12);
        let t = ((s - cum[j]) / seg).clamp(0.0, 1.0);
        spine.push((
            fine[j].0 + t * (fine[j + 1].0 - fine[j].0),
            fine[j].1 + t * (fine[j + 1].1 - fine[j].1),
            s,
        ));
    }

    let head_len = frac * length;
    let body_len = (length - head_len) / 2.0;
    let region_of = |s: f64| -> u8 {
        if s < head_len {
            1
        } else if s < head_len + body_len {
            2
        } else {
            3
        }
    };
    let radius = |s: f64| -> f64 {
        let u = s / length;
        let mut r = head_r + (tail_r - head_r) * smoothstep((u - 0.15) / 0.7);
        match pathology {
            Pathology::TailAtrophy if s >= head_len + body_len => r *= 0.6,
            Pathology::HeadMass if s < head_len => {
                let centre = 0.5 * head_len;
                let bump = (-(s - centre).powi(2) / (2.0 * (0.3 * head_len).powi(2))).exp();
                r *= 1.0 + 0.45 * bump;
            }
            _ => {}
        }
        r
    };
    let radii: Vec<f64> = spine.iter().map(|&(_, _, s)| radius(s)).collect();

    let mut sampled = [0usize; 3];
    for &(_, _, s) in &spine {
        sampled[region_of(s) as usize - 1] += 1;
    }

    let mut labels = LabelGrid::filled(height, width, 0);
    let rmax = radii.iter().cloned().fold(0.0, f64::max);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut best = f64::INFINITY;
            let mut best_i = 0;
            for (i, &(sx, sy, _)) in spine.iter().enumerate() {
                let (dx, dy) = (px - sx, py - sy);
                if dx.abs() > rmax + 1.0 && dx.abs() > best.sqrt() {
                    continue;
                }
                let d = dx * dx + dy * dy;
                if d < best {
                    best = d;
                    best_i = i;
                }
            }
            if best.sqrt() <= radii[best_i] {
                labels.set(y, x, region_of(spine[best_i].2));
            }
        }
    }

    check_topology(&labels)?;
    let geo = PhantomGeometry {
        spine_length: length,
        head_length: head_len,
        body_length: body_len,
        tail_length: length - head_len - body_len,
        spine_step: step,
        sampled_lengths: sampled.map(|n| n as f64 * step),
        pathology,
    };
    Ok((labels, geo))
}

fn neighbours4(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let cand = [
        (y.wrapping_sub(1), x),
        (y + 1, x),
        (y, x.wrapping_sub(1)),
        (y, x + 1),
    ];
    cand.into_iter().filter(move |&(yy, xx)| yy < h && xx < w)
}

/// Whether the pixels carrying `label` form one 4-connected component.
pub fn is_4_connected(labels: &LabelGrid, label: u8) -> bool {
    let (h, w) = (labels.height(), labels.width());
    let total = labels.data().iter().filter(|&&v| v == label).count();
    let Some(start) = labels.data().iter().position(|&v| v == label) else {
        return false;
    };
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::from([(start / w, start % w)]);
    seen[start] = true;
    let mut count = 0;
    while let Some((y, x)) = queue.pop_front() {
        count += 1;
        for (yy, xx) in neighbours4(y, x, h, w) {
            let i = yy * w + xx;
            if !seen[i] && labels.data()[i] == label {
                seen[i] = true;
                queue.push_back((yy, xx));
            }
        }
    }
    count == total
}

/// Whether some pixel of `a` is 4-adjacent to a pixel of `b`.
pub fn regions_touch(labels: &LabelGrid, a: u8, b: u8) -> bool {
    let (h, w) = (labels.height(), labels.width());
    (0..h).any(|y| {
        (0..w).any(|x| {
            labels.get(y, x) == a && neighbours4(y, x, h, w).any(|(yy, xx)| labels.get(yy, xx) == b)
        })
    })
}

fn check_topology(labels: &LabelGrid) -> std::result::Result<(), String> {
    for r in 1..=3u8 {
        let n = labels.data().iter().filter(|&&v| v == r).count();
        if n < MIN_REGION_PIXELS {
            return Err(format!("region {r} has only {n} pixels"));
        }
        if !is_4_connected(labels, r) {
            return Err(format!("region {r} is not 4-connected"));
        }
    }
    if regions_touch(labels, 1, 3) {
        return Err("head touches tail".into());
    }
    if !regions_touch(labels, 1, 2) || !regions_touch(labels, 2, 3) {
        return Err("regions are not chained along the spine".into());
    }
    Ok(())
}

fn paint(rng: &mut Stream, labels: &LabelGrid, profile: &SiteProfile, modality: Modality) -> Result<Image> {
    let means = modality.region_means();
    let noise = Normal::new(0.0, profile.noise_sigma.max(0.0))
        .map_err(|e| Error::field("noise_sigma", e.to_string()))?;
    let data = labels
        .data()
        .iter()
        .map(|&l| {
            let m = 0.5 + profile.contrast * (means[l as usize] - 0.5) + profile.brightness;
            (m + noise.sample(rng)).clamp(0.0, 1.0)
        })
        .collect();
    Grid::new(labels.height(), labels.width(), data)
}

/// Train / validation / test partition of one site.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SiteDataset {
    pub site: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SiteDataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn splits(&self) -> [(Split, &[Sample]); 3] {
        [
            (Split::Train, &self.train),
            (Split::Val, &self.val),
            (Split::Test, &self.test),
        ]
    }

    /// Concatenates sites in order into one pooled dataset.
    pub fn pool(sites: &[SiteDataset]) -> SiteDataset {
        let mut out = SiteDataset::default();
        for s in sites {
            out.train.extend(s.train.iter().cloned());
            out.val.extend(s.val.iter().cloned());
            out.test.extend(s.test.iter().cloned());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-modality stratified split: floor(10%) test, then floor(20%) of the rest
/// to validation, the remainder to training.
pub fn split_dataset(samples: Vec<Sample>, master_seed: u64) -> Result<SiteDataset> {
    if samples.len() < 10 {
        return Err(Error::Empty(format!(
            "splitting needs at least 10 samples, got {}",
            samples.len()
        )));
    }
    let site = samples[0].site;
    let mut by_modality: BTreeMap<Modality, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        by_modality.entry(s.modality).or_default().push(s);
    }
    let mut out = SiteDataset {
        site,
        ..SiteDataset::default()
    };
    for (modality, mut group) in by_modality {
        let mut s = rng::stream(master_seed, rng::domain::SPLIT, &[modality.code() as u64]);
        // Fisher-Yates with the split stream.
        for i in (1..group.len()).rev() {
            let j = s.random_range(0..=i);
            group.swap(i, j);
        }
        let n = group.len();
        let n_test = n / 10;
        let n_val = (n - n_test) / 5;
        let mut it = group.into_iter();
        out.test.extend(it.by_ref().take(n_test));
        out.val.extend(it.by_ref().take(n_val));
        out.train.extend(it);
    }
    Ok(out)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Normalized discrete Gaussian with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

/// Separable Gaussian blur with symmetric reflection at the borders.
pub fn gaussian_denoise(image: &Image, sigma: f64) -> Result<Image> {
    if !(sigma >= 0.0) {
        return Err(Error::field("sigma", "must be non-negative"));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (image.height(), image.width());
    let src = image.data();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * src[y * w + reflect(x as isize + j as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * tmp[reflect(y as isize + j as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    Grid::new(h, w, out)
}

/// `image + amount·(image − blur(image))` before clamping.
pub fn unsharp_mask_unclamped(image: &Image, sigma: f64, amount: f64) -> Result<Image> {
    if !(sigma > 0.0) {
        return Err(Error::field("unsharp_sigma", "must be positive"));
    }
    if !(amount >= 0.0) {
        return Err(Error::field("unsharp_amount", "must be non-negative"));
    }
    if amount == 0.0 {
        return Ok(image.clone());
    }
    let blur = gaussian_denoise(image, sigma)?;
    let data = image
        .data()
        .iter()
        .zip(blur.data())
        .map(|(&v, &b)| v + amount * (v - b))
        .collect();
    Grid::new(image.height(), image.width(), data)
}

pub fn unsharp_mask(image: &Image, sigma: f64, amount: f64) -> Result<Image> {
    Ok(unsharp_mask_unclamped(image, sigma, amount)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Percentiles at which landmarks are taken: 1, 10, 20, ..., 90, 99.
pub const LANDMARK_PERCENTILES: [f64; 11] = [1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0];

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn landmarks(image: &Image, percentiles: &[f64]) -> Result<Vec<f64>> {
    let mut sorted = image.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let lm: Vec<f64> = percentiles.iter().map(|&p| percentile(&sorted, p)).collect();
    if lm[lm.len() - 1] <= lm[0] {
        return Err(Error::NotStandardizable(format!(
            "landmarks collapse to {} (constant image)",
            lm[0]
        )));
    }
    Ok(lm)
}

/// Standard landmark scale learned from training images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkModel {
    pub percentiles: Vec<f64>,
    pub standard: Vec<f64>,
}

/// Learns the standard landmarks: each image's landmarks are rescaled so that
/// its outer landmarks land on the mean outer landmarks of the set, then the
/// rescaled landmark vectors are averaged.
pub fn intensity_standardize_train(images: &[&Image], percentiles: &[f64]) -> Result<LandmarkModel> {
    if images.is_empty() {
        return Err(Error::Empty("standardization needs training images".into()));
    }
    if percentiles.len() < 2 || percentiles.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::field("percentiles", "need at least two increasing percentiles"));
    }
    let all: Vec<Vec<f64>> = images
        .iter()
        .map(|im| landmarks(im, percentiles))
        .collect::<Result<_>>()?;
    let n = all.len() as f64;
    let last = percentiles.len() - 1;
    let s_lo = all.iter().map(|l| l[0]).sum::<f64>() / n;
    let s_hi = all.iter().map(|l| l[last]).sum::<f64>() / n;
    let mut standard = vec![0.0; percentiles.len()];
    for lm in &all {
        let (lo, hi) = (lm[0], lm[last]);
        for (s, &v) in standard.iter_mut().zip(lm) {
            *s += s_lo + (v - lo) / (hi - lo) * (s_hi - s_lo);
        }
    }
    for s in &mut standard {
        *s /= n;
    }
    Ok(LandmarkModel {
        percentiles: percentiles.to_vec(),
        standard,
    })
}

/// Piecewise-linear map from the image's own landmarks onto the standard
/// landmarks, extrapolating linearly past the outer landmarks.
pub fn intensity_standardize_apply(image: &Image, model: &LandmarkModel) -> Result<Image> {
    let own = landmarks(image, &model.percentiles)?;
    let std = &model.standard;
    // Drop zero-width segments so every kept segment has a finite slope.
    let mut knots: Vec<(f64, f64)> = Vec::with_capacity(own.len());
    for (&a, &b) in own.iter().zip(std) {
        match knots.last() {
            Some(&(pa, _)) if a <= pa => {}
            _ => knots.push((a, b)),
        }
    }
    let map = |v: f64| -> f64 {
        let seg = knots.partition_point(|&(a, _)| a <= v).clamp(1, knots.len() - 1);
        let (a0, b0) = knots[seg - 1];
        let (a1, b1) = knots[seg];
        b0 + (v - a0) * (b1 - b0) / (a1 - a0)
    };
    Ok(image.map(map))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Preprocessing {
    pub denoise_sigma: f64,
    pub unsharp_sigma: f64,
    pub unsharp_amount: f64,
    pub standardize: bool,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Preprocessing {
            denoise_sigma: 0.7,
            unsharp_sigma: 1.0,
            unsharp_amount: 0.5,
            standardize: true,
        }
    }
}

impl Preprocessing {
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.denoise_sigma >= 0.0) {
            out.push("preprocess.denoise_sigma: must be >= 0".into());
        }
        if !(self.unsharp_sigma > 0.0) {
            out.push("preprocess.unsharp_sigma: must be > 0".into());
        }
        if !(self.unsharp_amount >= 0.0) {
            out.push("preprocess.unsharp_amount: must be >= 0".into());
        }
        out
    }
}

/// Denoise → unsharp → standardize, done by each site on its own data.
/// Standardization models are fitted per modality on the site's training split.
pub fn preprocess_site(site: &mut SiteDataset, cfg: &Preprocessing) -> Result<()> {
    for split in [&mut site.train, &mut site.val, &mut site.test] {
        for s in split.iter_mut() {
            let d = gaussian_denoise(&s.image, cfg.denoise_sigma)?;
            s.image = unsharp_mask(&d, cfg.unsharp_sigma, cfg.unsharp_amount)?;
        }
    }
    if !cfg.standardize {
        return Ok(());
    }
    for modality in Modality::ALL {
        let train: Vec<&Image> = site
            .train
            .iter()
            .filter(|s| s.modality == modality)
            .map(|s| &s.image)
            .collect();
        let present = site.splits().iter().any(|(_, ss)| ss.iter().any(|s| s.modality == modality));
        if !present {
            continue;
        }
        if train.is_empty() {
            return Err(Error::Empty(format!(
                "site {} has no {} training images to fit standardization",
                site.site,
                modality.name()
            )));
        }
        let model = intensity_standardize_train(&train, &LANDMARK_PERCENTILES)?;
        for split in [&mut site.train, &mut site.val, &mut site.test] {
            for s in split.iter_mut().filter(|s| s.modality == modality) {
                s.image = intensity_standardize_apply(&s.image, &model)?;
            }
        }
    }
    Ok(())
}

/// Everything needed to regenerate the multi-site cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub sites: usize,
    pub samples_per_site: usize,
    /// Explicit per-site counts; overrides `samples_per_site` and the imbalance draw.
    pub counts: Option<Vec<usize>>,
    /// Dirichlet concentration for site-size imbalance; `None` gives equal sites.
    pub imbalance_alpha: Option<f64>,
    pub heterogeneity: f64,
    pub image_size: usize,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            sites: 7,
            samples_per_site: 60,
            counts: None,
            imbalance_alpha: Some(8.0),
            heterogeneity: 0.0,
            image_size: 32,
        }
    }
}

const MIN_SITE_SAMPLES: usize = 12;

impl CohortSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.sites == 0 {
            out.push("sites.count: must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            out.push("sites.heterogeneity: must lie in [0, 1]".into());
        }
        if self.image_size < 32 || self.image_size % 4 != 0 {
            out.push("image_size: must be >= 32 and divisible by 4".into());
        }
        match &self.counts {
            Some(c) if c.len() != self.sites => {
                out.push(format!("sites.counts: expected {} entries, got {}", self.sites, c.len()))
            }
            Some(c) if c.iter().any(|&n| n < 10) => out.push("sites.counts: every site needs >= 10 samples".into()),
            Some(_) => {}
            None if self.samples_per_site < MIN_SITE_SAMPLES => {
                out.push(format!("sites.samples_per_site: must be >= {MIN_SITE_SAMPLES}"))
            }
            None => {}
        }
        if let Some(a) = self.imbalance_alpha {
            if !(a > 0.0) {
                out.push("sites.imbalance_alpha: must be positive".into());
            }
        }
        out
    }

    pub fn site_counts(&self, seed: u64) -> Result<Vec<usize>> {
        if let Some(c) = &self.counts {
            return Ok(c.clone());
        }
        match self.imbalance_alpha {
            Some(alpha) => dirichlet_counts(
                self.samples_per_site * self.sites,
                self.sites,
                alpha,
                MIN_SITE_SAMPLES.min(self.samples_per_site),
                seed,
            ),
            None => Ok(vec![self.samples_per_site; self.sites]),
        }
    }
}

/// Generates, labels and splits every site's raw (unprocessed) data.
pub fn generate_cohort(spec: &CohortSpec, seed: u64) -> Result<Vec<SiteDataset>> {
    let problems = spec.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    let counts = spec.site_counts(seed)?;
    let profiles = make_sites(spec.sites, spec.heterogeneity, &counts, seed)?;
    profiles
        .iter()
        .map(|p| {
            let samples = (0..p.sample_count)
                .map(|i| {
                    let mut s = rng::stream(seed, rng::domain::PHANTOM, &[p.site as u64, i as u64]);
                    let modality = if i % 2 == 0 { Modality::T1 } else { Modality::T2 };
                    let mut sample = generate_phantom(&mut s, p, spec.image_size, spec.image_size, modality)?;
                    sample.index = i;
                    Ok(sample)
                })
                .collect::<Result<Vec<_>>>()?;
            split_dataset(samples, rng::derive_seed(seed, rng::domain::SPLIT, &[p.site as u64]))
        })
        .collect()
}

const SAMPLE_MAGIC: &[u8; 8] = b"FPSAMPLE";
const SAMPLE_VERSION: u32 = 1;

/// Binary sample file; see `docs/formats.md`.
pub fn sample_bytes(s: &Sample) -> Vec<u8> {
    let (h, w) = (s.image.height(), s.image.width());
    let mut out = Vec::with_capacity(32 + 9 * h * w);
    out.extend_from_slice(SAMPLE_MAGIC);
    for v in [SAMPLE_VERSION, h as u32, w as u32, s.site as u32, s.index as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&[s.modality.code(), 0, 0, 0]);
    for v in s.image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(s.labels.data());
    out
}

pub fn sample_from_bytes(bytes: &[u8], origin: &Path) -> Result<Sample> {
    let bad = |r: &str| Error::Format {
        path: origin.to_path_buf(),
        reason: r.to_string(),
    };
    if bytes.len() < 32 || &bytes[..8] != SAMPLE_MAGIC {
        return Err(bad("missing sample magic"));
    }
    let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    if u(8) != SAMPLE_VERSION as usize {
        return Err(bad("unsupported sample version"));
    }
    let (h, w, site, index) = (u(12), u(16), u(20), u(24));
    let modality = Modality::from_code(bytes[28]).ok_or_else(|| bad("unknown modality code"))?;
    if bytes.len() != 32 + 9 * h * w {
        return Err(bad("file length does not match header"));
    }
    let image = bytes[32..32 + 8 * h * w]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let labels = bytes[32 + 8 * h * w..].to_vec();
    if let Some(&v) = labels.iter().find(|&&v| v > 3) {
        return Err(Error::UnknownLabel { value: v, max: 3 });
    }
    Ok(Sample {
        image: Grid::new(h, w, image)?,
        labels: Grid::new(h, w, labels)?,
        site,
        modality,
        index,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub site: usize,
    pub index: usize,
    pub modality: Modality,
    pub split: Split,
    /// Seed of the stream that generated this sample.
    pub stream_seed: u64,
    pub sha256: String,
}

/// Index of an exported dataset with enough lineage to regenerate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub master_seed: u64,
    pub cohort: CohortSpec,
    pub height: usize,
    pub width: usize,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

pub fn sample_file_name(s: &Sample) -> String {
    format!("samples/site{:02}_{:05}.bin", s.site, s.index)
}

/// Manifest for a set of sites without writing any sample files. Entries
/// follow each split's stored order, which fixes the batch order on reload.
pub fn build_manifest(sites: &[SiteDataset], cohort: &CohortSpec, seed: u64) -> DatasetManifest {
    let mut entries = Vec::new();
    for site in sites {
        for (split, samples) in site.splits() {
            for s in samples {
                entries.push(ManifestEntry {
                    file: sample_file_name(s),
                    site: s.site,
                    index: s.index,
                    modality: s.modality,
                    split,
                    stream_seed: rng::derive_seed(seed, rng::domain::PHANTOM, &[s.site as u64, s.index as u64]),
                    sha256: hex::encode(Sha256::digest(sample_bytes(s))),
                });
            }
        }
    }
    DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        master_seed: seed,
        cohort: cohort.clone(),
        height: cohort.image_size,
        width: cohort.image_size,
        entries,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.json` plus one binary file per sample under `dir`.
pub fn export_dataset(dir: &Path, sites: &[SiteDataset], cohort: &CohortSpec, seed: u64) -> Result<DatasetManifest> {
    let manifest = build_manifest(sites, cohort, seed);
    for site in sites {
        for (_, samples) in site.splits() {
            for s in samples {
                write_file(&dir.join(sample_file_name(s)), &sample_bytes(s))?;
            }
        }
    }
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    write_file(&dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads an exported dataset back into per-site splits, verifying checksums.
pub fn import_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SiteDataset>)> {
    let manifest = read_manifest(&dir.join("manifest.json"))?;
    let mut sites: BTreeMap<usize, SiteDataset> = BTreeMap::new();
    for e in &manifest.entries {
        let path: PathBuf = dir.join(&e.file);
        let bytes = std::fs::read(&path).map_err(|err| Error::io(&path, err))?;
        if hex::encode(Sha256::digest(&bytes)) != e.sha256 {
            return Err(Error::Format {
                path,
                reason: "checksum does not match manifest".into(),
            });
        }
        let s = sample_from_bytes(&bytes, &path)?;
        let site = sites.entry(e.site).or_insert_with(|| SiteDataset {
            site: e.site,
            ..SiteDataset::default()
        });
        match e.split {
            Split::Train => site.train.push(s),
            Split::Val => site.val.push(s),
            Split::Test => site.test.push(s),
        }
    }
    Ok((manifest, sites.into_values().collect()))
}
