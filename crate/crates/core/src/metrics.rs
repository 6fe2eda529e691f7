//! Overlap and surface-distance metrics over 2-D or 3-D masks.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::Region;
use crate::synthdata::{percentile, LabelGrid};

/// Boolean grid with physical voxel spacing (millimetres).
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    shape: Vec<usize>,
    spacing: Vec<f64>,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: &[usize], data: Vec<bool>) -> Result<Self> {
        Self::with_spacing(shape, data, &vec![1.0; shape.len()])
    }

    pub fn with_spacing(shape: &[usize], data: Vec<bool>, spacing: &[f64]) -> Result<Self> {
        if !(2..=3).contains(&shape.len()) || shape.contains(&0) {
            return Err(Error::Shape(format!("masks are 2-D or 3-D with positive extents, got {shape:?}")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("shape {shape:?} cannot hold {} voxels", data.len())));
        }
        if spacing.len() != shape.len() || spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::field("spacing", format!("need {} positive finite entries", shape.len())));
        }
        Ok(BinaryMask {
            shape: shape.to_vec(),
            spacing: spacing.to_vec(),
            data,
        })
    }

    /// Mask of the pixels carrying `label`.
    pub fn from_labels(labels: &LabelGrid, label: u8, spacing: [f64; 2]) -> Result<Self> {
        Self::with_spacing(
            &[labels.height(), labels.width()],
            labels.data().iter().map(|&v| v == label).collect(),
            &spacing,
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.contains(&true)
    }

    pub fn with_scaled_spacing(&self, s: f64) -> Result<Self> {
        let spacing: Vec<f64> = self.spacing.iter().map(|v| v * s).collect();
        Self::with_spacing(&self.shape, self.data.clone(), &spacing)
    }

    fn strides(&self) -> Vec<usize> {
        let mut st = vec![1; self.shape.len()];
        for a in (0..self.shape.len() - 1).rev() {
            st[a] = st[a + 1] * self.shape[a + 1];
        }
        st
    }

    /// Coordinates of flat index `i`.
    pub fn coords(&self, mut i: usize) -> Vec<usize> {
        let mut c = vec![0; self.shape.len()];
        for a in (0..self.shape.len()).rev() {
            c[a] = i % self.shape[a];
            i /= self.shape[a];
        }
        c
    }

    fn check_pair(&self, other: &BinaryMask) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("mask shapes {:?} and {:?} differ", self.shape, other.shape)));
        }
        if self.spacing != other.spacing {
            return Err(Error::field("spacing", "masks have different spacing"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    /// Both masks empty gives 1; an empty denominator forces a zero numerator,
    /// so every other degenerate case falls out as 0.
    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            return if self.fn_ == 0 { 1.0 } else { 0.0 };
        }
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            return if self.fp == 0 { 1.0 } else { 0.0 };
        }
        ratio(self.tp, self.tp + self.fn_)
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
    if pred.shape != gt.shape {
        return Err(Error::Shape(format!("mask shapes {:?} and {:?} differ", pred.shape, gt.shape)));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    confusion(pred, gt).map(|c| c.dice())
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    confusion(pred, gt).map(|c| c.iou())
}

pub fn precision(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    confusion(pred, gt).map(|c| c.precision())
}

pub fn recall(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    confusion(pred, gt).map(|c| c.recall())
}

fn surface_indices(mask: &BinaryMask) -> Vec<usize> {
    let st = mask.strides();
    let n = mask.shape.len();
    (0..mask.data.len())
        .filter(|&i| {
            if !mask.data[i] {
                return false;
            }
            let c = mask.coords(i);
            (0..n).any(|a| {
                c[a] == 0 || c[a] + 1 == mask.shape[a] || !mask.data[i - st[a]] || !mask.data[i + st[a]]
            })
        })
        .collect()
}

/// Foreground voxels with a face-adjacent background or out-of-bounds neighbour,
/// in row-major order.
pub fn extract_surface(mask: &BinaryMask) -> Result<Vec<Vec<usize>>> {
    if mask.is_empty() {
        return Err(Error::Empty("surface of an empty mask is undefined".into()));
    }
    Ok(surface_indices(mask).into_iter().map(|i| mask.coords(i)).collect())
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_line(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let s2 = s * s;
    let key = |q: usize, fq: f64| fq + s2 * (q * q) as f64;
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_infinite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let sep = (key(q, fq) - key(p, f[p])) / (2.0 * s2 * (q - p) as f64);
            if sep <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(sep);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = s * (q as f64 - v[k] as f64);
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest site.
fn squared_distance_field(shape: &[usize], spacing: &[f64], sites: &[usize]) -> Vec<f64> {
    let len: usize = shape.iter().product();
    let mut field = vec![f64::INFINITY; len];
    for &i in sites {
        field[i] = 0.0;
    }
    let n = shape.len();
    let mut strides = vec![1; n];
    for a in (0..n - 1).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for a in 0..n {
        let (ext, st) = (shape[a], strides[a]);
        let mut line = vec![0.0; ext];
        let mut out = vec![0.0; ext];
        for start in 0..len {
            // Each line is visited once, from the voxel whose coordinate along `a` is 0.
            if (start / st) % ext != 0 {
                continue;
            }
            for (j, l) in line.iter_mut().enumerate() {
                *l = field[start + j * st];
            }
            edt_line(&line, spacing[a], &mut out, &mut v, &mut z);
            for (j, &o) in out.iter().enumerate() {
                field[start + j * st] = o;
            }
        }
    }
    field
}

/// Distances from every surface voxel of `from` to the surface of `to`.
pub fn directed_surface_distances(from: &BinaryMask, to: &BinaryMask) -> Result<Option<Vec<f64>>> {
    from.check_pair(to)?;
    if from.is_empty() || to.is_empty() {
        return Ok(None);
    }
    let sites = surface_indices(to);
    let field = squared_distance_field(&to.shape, &to.spacing, &sites);
    Ok(Some(surface_indices(from).into_iter().map(|i| field[i].sqrt()).collect()))
}

/// Both directed distance sets concatenated (a→b first), or `None` if either mask is empty.
pub fn pooled_surface_distances(a: &BinaryMask, b: &BinaryMask) -> Result<Option<Vec<f64>>> {
    let (Some(mut ab), Some(ba)) = (directed_surface_distances(a, b)?, directed_surface_distances(b, a)?) else {
        return Ok(None);
    };
    ab.extend(ba);
    Ok(Some(ab))
}

/// Average symmetric surface distance; `None` when either mask is empty.
pub fn assd(a: &BinaryMask, b: &BinaryMask) -> Result<Option<f64>> {
    Ok(pooled_surface_distances(a, b)?.map(|d| d.iter().sum::<f64>() / d.len() as f64))
}

/// 95th percentile of the pooled directed distances; `None` when either mask is empty.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<Option<f64>> {
    Ok(pooled_surface_distances(a, b)?.map(|mut d| {
        d.sort_by(f64::total_cmp);
        percentile(&d, 95.0)
    }))
}

/// Metrics for one region, or averaged over regions or samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub dice: f64,
    /// `None` when undefined for every contributing case.
    pub assd: Option<f64>,
    pub hd95: Option<f64>,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    /// Cases whose surface distances were undefined and left out of the means.
    pub undefined: usize,
    /// Cases averaged into this row.
    pub cases: usize,
}

impl RegionMetrics {
    pub fn from_masks(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        let c = confusion(pred, gt)?;
        let pooled = pooled_surface_distances(pred, gt)?;
        let (assd, hd95) = match pooled {
            Some(mut d) => {
                let mean = d.iter().sum::<f64>() / d.len() as f64;
                d.sort_by(f64::total_cmp);
                (Some(mean), Some(percentile(&d, 95.0)))
            }
            None => (None, None),
        };
        Ok(RegionMetrics {
            dice: c.dice(),
            assd,
            hd95,
            iou: c.iou(),
            precision: c.precision(),
            recall: c.recall(),
            undefined: usize::from(assd.is_none()),
            cases: 1,
        })
    }

    /// Unweighted mean; distances average only over defined entries.
    pub fn mean(rows: &[&RegionMetrics]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("no metric rows to average".into()));
        }
        let n = rows.len() as f64;
        let avg = |f: &dyn Fn(&RegionMetrics) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        let avg_opt = |f: &dyn Fn(&RegionMetrics) -> Option<f64>| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Ok(RegionMetrics {
            dice: avg(&|r| r.dice),
            assd: avg_opt(&|r| r.assd),
            hd95: avg_opt(&|r| r.hd95),
            iou: avg(&|r| r.iou),
            precision: avg(&|r| r.precision),
            recall: avg(&|r| r.recall),
            undefined: rows.iter().map(|r| r.undefined).sum(),
            cases: rows.iter().map(|r| r.cases).sum(),
        })
    }
}

/// Per-region rows for head, body and tail plus their unweighted average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub regions: Vec<RegionMetrics>,
    pub average: RegionMetrics,
}

impl MetricsReport {
    fn from_regions(regions: Vec<RegionMetrics>) -> Result<Self> {
        let refs: Vec<&RegionMetrics> = regions.iter().collect();
        let average = RegionMetrics::mean(&refs)?;
        Ok(MetricsReport { regions, average })
    }

    /// Per-region means over several reports (e.g. one per test image).
    pub fn mean(reports: &[MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::Empty("no reports to average".into()));
        }
        let regions = (0..Region::FOREGROUND.len())
            .map(|r| {
                let rows: Vec<&RegionMetrics> = reports.iter().map(|rep| &rep.regions[r]).collect();
                RegionMetrics::mean(&rows)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_regions(regions)
    }

    pub fn region(&self, r: Region) -> Option<&RegionMetrics> {
        Region::FOREGROUND.iter().position(|&x| x == r).map(|i| &self.regions[i])
    }

    pub fn mean_foreground_dice(&self) -> f64 {
        self.average.dice
    }
}

fn check_labels(labels: &[u8]) -> Result<()> {
    match labels.iter().find(|&&v| v as usize >= crate::objectives::NUM_REGIONS) {
        Some(&v) => Err(Error::UnknownLabel {
            value: v,
            max: (crate::objectives::NUM_REGIONS - 1) as u8,
        }),
        None => Ok(()),
    }
}

/// Scores a predicted label volume against ground truth on any 2-D or 3-D grid.
pub fn evaluate_volume(pred: &[u8], gt: &[u8], shape: &[usize], spacing: &[f64]) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("label grids hold {} and {} voxels", pred.len(), gt.len())));
    }
    check_labels(pred)?;
    check_labels(gt)?;
    let regions = Region::FOREGROUND
        .iter()
        .map(|r| {
            let l = r.label();
            let p = BinaryMask::with_spacing(shape, pred.iter().map(|&v| v == l).collect(), spacing)?;
            let g = BinaryMask::with_spacing(shape, gt.iter().map(|&v| v == l).collect(), spacing)?;
            RegionMetrics::from_masks(&p, &g)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_regions(regions)
}

pub fn evaluate(pred: &LabelGrid, gt: &LabelGrid, spacing: [f64; 2]) -> Result<MetricsReport> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape(format!(
            "label grids {}x{} and {}x{} differ",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    evaluate_volume(pred.data(), gt.data(), &[pred.height(), pred.width()], &spacing)
}

pub const CSV_HEADER: &str = "method,modality,region,dice,assd,hd95,miou,precision,recall";

/// One CSV block: a method's report on one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub method: String,
    pub modality: String,
    pub report: MetricsReport,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV with one row per region and an `average` row per entry.
/// Undefined distances are written as `NA`.
pub fn report_csv(entries: &[ReportEntry]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for e in entries {
        let rows = Region::FOREGROUND
            .iter()
            .map(|r| r.name())
            .zip(&e.report.regions)
            .chain(std::iter::once(("average", &e.report.average)));
        for (name, m) in rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                csv_field(&e.method),
                csv_field(&e.modality),
                name,
                m.dice,
                fmt_opt(m.assd),
                fmt_opt(m.hd95),
                m.iou,
                m.precision,
                m.recall
            );
        }
    }
    out
}

pub fn write_report_csv(path: &Path, entries: &[ReportEntry]) -> Result<()> {
    std::fs::write(path, report_csv(entries)).map_err(|e| Error::io(path, e))
}

const LABEL_MAGIC: &[u8; 4] = b"FPLB";
const LABEL_VERSION: u32 = 1;

/// Label volume file: magic, version, rank, extents, spacing, then one byte per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub shape: Vec<usize>,
    pub spacing: Vec<f64>,
    pub labels: Vec<u8>,
}

impl LabelVolume {
    pub fn from_grid(g: &LabelGrid) -> Self {
        LabelVolume {
            shape: vec![g.height(), g.width()],
            spacing: vec![1.0, 1.0],
            labels: g.data().to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(LABEL_MAGIC);
        out.extend_from_slice(&LABEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &s in &self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |r: &str| Error::Format {
            path: origin.to_path_buf(),
            reason: r.to_string(),
        };
        let u = |o: usize| -> Result<usize> {
            bytes
                .get(o..o + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
                .ok_or_else(|| bad("truncated header"))
        };
        if bytes.len() < 12 || &bytes[..4] != LABEL_MAGIC {
            return Err(bad("missing label magic"));
        }
        if u(4)? != LABEL_VERSION as usize {
            return Err(bad("unsupported label version"));
        }
        let rank = u(8)?;
        if !(2..=3).contains(&rank) {
            return Err(bad("label volumes are 2-D or 3-D"));
        }
        let shape = (0..rank).map(|a| u(12 + 4 * a)).collect::<Result<Vec<_>>>()?;
        let sp_at = 12 + 4 * rank;
        let spacing = (0..rank)
            .map(|a| {
                bytes
                    .get(sp_at + 8 * a..sp_at + 8 * a + 8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .ok_or_else(|| bad("truncated spacing"))
            })
            .collect::<Result<Vec<_>>>()?;
        let body = sp_at + 8 * rank;
        let n: usize = shape.iter().product();
        if bytes.len() != body + n {
            return Err(bad("file length does not match header"));
        }
        Ok(LabelVolume {
            shape,
            spacing,
            labels: bytes[body..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Scores two label files; spacing comes from the ground-truth file.
pub fn evaluate_files(pred: &Path, gt: &Path) -> Result<MetricsReport> {
    let (p, g) = (LabelVolume::load(pred)?, LabelVolume::load(gt)?);
    if p.shape != g.shape {
        return Err(Error::Shape(format!("label volumes {:?} and {:?} differ", p.shape, g.shape)));
    }
    evaluate_volume(&p.labels, &g.labels, &g.shape, &g.spacing)
}
