//! Region-aware soft Dice objective and the FedProx proximal objective.
//!
//! Per-sample, per-region losses are weighted and summed over regions, then
//! averaged over the batch (or the whole shard for `F_k`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Model, ParameterVector};
use crate::synthdata::{LabelGrid, Sample};
use crate::tensor::{finite_diff_check_branches, FdReport, Graph, Tensor, Var};

pub const DEFAULT_SMOOTH: f64 = 1.0;

/// Number of label classes in a sample: background, head, body, tail.
pub const NUM_REGIONS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Background = 0,
    Head = 1,
    Body = 2,
    Tail = 3,
}

impl Region {
    pub const FOREGROUND: [Region; 3] = [Region::Head, Region::Body, Region::Tail];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Background => "background",
            Region::Head => "head",
            Region::Body => "body",
            Region::Tail => "tail",
        }
    }
}

/// Non-negative per-region weights λ_r, indexed by [`Region`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct RegionWeights([f64; NUM_REGIONS]);

impl Default for RegionWeights {
    /// Background excluded, head/body/tail weighted equally.
    fn default() -> Self {
        RegionWeights([0.0, 1.0, 1.0, 1.0])
    }
}

impl TryFrom<[f64; 4]> for RegionWeights {
    type Error = Error;

    fn try_from(w: [f64; 4]) -> Result<Self> {
        RegionWeights::new(w)
    }
}

impl From<RegionWeights> for [f64; 4] {
    fn from(w: RegionWeights) -> Self {
        w.0
    }
}

impl RegionWeights {
    /// Weights in `[background, head, body, tail]` order.
    pub fn new(weights: [f64; NUM_REGIONS]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::field("region_weights", "weights must be finite and non-negative"));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::field("region_weights", "at least one weight must be positive"));
        }
        Ok(RegionWeights(weights))
    }

    /// Weight on a single region, zero elsewhere.
    pub fn only(region: Region) -> Self {
        let mut w = [0.0; NUM_REGIONS];
        w[region.index()] = 1.0;
        RegionWeights(w)
    }

    pub fn get(&self, region: Region) -> f64 {
        self.0[region.index()]
    }

    pub fn as_array(&self) -> [f64; NUM_REGIONS] {
        self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Rejects a positive weight on a class the model does not output.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        for (i, &w) in self.0.iter().enumerate() {
            if w > 0.0 && i >= num_classes {
                return Err(Error::field(
                    "region_weights",
                    format!("weight on region index {i} but the model has {num_classes} classes"),
                ));
            }
        }
        Ok(())
    }
}

/// Loss settings shared by every client.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiceObjective {
    pub weights: RegionWeights,
    pub smooth: f64,
}

impl Default for DiceObjective {
    fn default() -> Self {
        DiceObjective {
            weights: RegionWeights::default(),
            smooth: DEFAULT_SMOOTH,
        }
    }
}

impl DiceObjective {
    pub fn validate(&self) -> Result<()> {
        if !(self.smooth > 0.0) {
            return Err(Error::field("smooth", "must be positive"));
        }
        Ok(())
    }
}

/// One-hot `[B, C, H, W]` label tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotLabels {
    tensor: Tensor,
}

impl OneHotLabels {
    pub fn from_grids(grids: &[&LabelGrid], num_classes: usize) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::Empty("no label grids".into()))?;
        let (h, w) = (first.height(), first.width());
        let hw = h * w;
        let mut data = vec![0.0; grids.len() * num_classes * hw];
        for (b, grid) in grids.iter().enumerate() {
            if (grid.height(), grid.width()) != (h, w) {
                return Err(Error::Shape("label grids differ in size".into()));
            }
            for (p, &lab) in grid.data().iter().enumerate() {
                let c = lab as usize;
                if c >= num_classes {
                    return Err(Error::UnknownLabel {
                        value: lab,
                        max: num_classes as u8 - 1,
                    });
                }
                data[(b * num_classes + c) * hw + p] = 1.0;
            }
        }
        Ok(OneHotLabels {
            tensor: Tensor::new(vec![grids.len(), num_classes, h, w], data)?,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
}

/// Stacks samples into an input batch `[B,1,H,W]` with matching one-hot labels.
pub fn batch_from_samples(samples: &[&Sample], num_classes: usize) -> Result<(Tensor, OneHotLabels)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Empty("empty batch".into()))?;
    let (h, w) = (first.image.height(), first.image.width());
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.image.height(), s.image.width()) != (h, w) {
            return Err(Error::Shape("samples in a batch differ in size".into()));
        }
        data.extend_from_slice(s.image.data());
    }
    let x = Tensor::new(vec![samples.len(), 1, h, w], data)?;
    let grids: Vec<&LabelGrid> = samples.iter().map(|s| &s.labels).collect();
    Ok((x, OneHotLabels::from_grids(&grids, num_classes)?))
}

/// `1 − (2·Σ p⊙y + s) / (Σp + Σy + s)` for one region map.
pub fn soft_dice_loss_region(g: &mut Graph, p: Var, y: Var, smooth: f64) -> Result<Var> {
    if g.value(p).shape() != g.value(y).shape() {
        return Err(Error::Shape(format!(
            "dice: prediction {:?} vs target {:?}",
            g.value(p).shape(),
            g.value(y).shape()
        )));
    }
    let py = g.mul(p, y)?;
    let inter = g.sum(py);
    let sp = g.sum(p);
    let sy = g.sum(y);
    let twice = g.scale(inter, 2.0);
    let num = g.add_scalar(twice, smooth);
    let both = g.add(sp, sy)?;
    let den = g.add_scalar(both, smooth);
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Σ_r λ_r · ℓ_r per sample, averaged over the batch.
pub fn region_aware_loss(
    g: &mut Graph,
    probs: Var,
    labels: &OneHotLabels,
    objective: &DiceObjective,
) -> Result<Var> {
    let [b, c, _, _] = g.value(probs).dims4()?;
    if g.value(probs).shape() != labels.tensor.shape() {
        return Err(Error::Shape(format!(
            "probabilities {:?} vs labels {:?}",
            g.value(probs).shape(),
            labels.tensor.shape()
        )));
    }
    objective.weights.check_classes(c)?;
    let y = g.input(labels.tensor.clone());
    let py = g.mul(probs, y)?;
    let inter = g.sum_spatial(py)?;
    let sp = g.sum_spatial(probs)?;
    let sy = g.sum_spatial(y)?;
    let twice = g.scale(inter, 2.0);
    let num = g.add_scalar(twice, objective.smooth);
    let both = g.add(sp, sy)?;
    let den = g.add_scalar(both, objective.smooth);
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0);
    let per_region = g.add_scalar(neg, 1.0);
    let lambda: Vec<f64> = (0..b)
        .flat_map(|_| (0..c).map(|ci| objective.weights.as_array().get(ci).copied().unwrap_or(0.0)))
        .collect();
    let lambda = g.input(Tensor::new(vec![b, c], lambda)?);
    let weighted = g.mul(per_region, lambda)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, 1.0 / b as f64))
}

/// Batch loss and its flat gradient with respect to the model parameters.
pub fn batch_loss_and_grad(
    model: &Model,
    batch: &[&Sample],
    objective: &DiceObjective,
) -> Result<(f64, Vec<f64>)> {
    let (x, labels) = batch_from_samples(batch, model.config.num_classes)?;
    let mut g = Graph::new();
    let xin = g.input(x);
    let trace = model.forward_graph(&mut g, xin, true)?;
    let loss = region_aware_loss(&mut g, trace.probs, &labels, objective)?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    Ok((value, model.flatten_gradients(&grads)?))
}

pub fn batch_loss(model: &Model, batch: &[&Sample], objective: &DiceObjective) -> Result<f64> {
    let (x, labels) = batch_from_samples(batch, model.config.num_classes)?;
    let mut g = Graph::new();
    let xin = g.input(x);
    let trace = model.forward_graph(&mut g, xin, false)?;
    let loss = region_aware_loss(&mut g, trace.probs, &labels, objective)?;
    Ok(g.value(loss).data()[0])
}

/// Finite-difference check of the analytic batch gradient on `probes` seeded
/// parameter coordinates, resampling probes that straddle a relu or max-pool
/// kink.
pub fn gradient_check(
    model: &Model,
    batch: &[&Sample],
    objective: &DiceObjective,
    probes: usize,
    eps: f64,
    seed: u64,
) -> Result<FdReport> {
    let (_, grad) = batch_loss_and_grad(model, batch, objective)?;
    let (x, labels) = batch_from_samples(batch, model.config.num_classes)?;
    let mut probe = model.clone();
    finite_diff_check_branches(
        |w| {
            probe.params.values_mut().copy_from_slice(w);
            let mut g = Graph::new();
            let xin = g.input(x.clone());
            let trace = probe.forward_graph(&mut g, xin, false)?;
            let loss = region_aware_loss(&mut g, trace.probs, &labels, objective)?;
            Ok((g.value(loss).data()[0], g.branch_signature()))
        },
        &grad,
        model.params.values(),
        probes,
        eps,
        seed,
    )
}

const EVAL_CHUNK: usize = 8;

/// `F_k(w)`: mean region-aware loss over the shard.
pub fn local_objective(model: &Model, shard: &[Sample], objective: &DiceObjective) -> Result<f64> {
    if shard.is_empty() {
        return Err(Error::Empty("F_k needs at least one sample (N_k = 0)".into()));
    }
    let mut total = 0.0;
    for chunk in shard.chunks(EVAL_CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        total += batch_loss(model, &refs, objective)? * chunk.len() as f64;
    }
    Ok(total / shard.len() as f64)
}

pub fn local_objective_with_grad(
    model: &Model,
    shard: &[Sample],
    objective: &DiceObjective,
) -> Result<(f64, Vec<f64>)> {
    if shard.is_empty() {
        return Err(Error::Empty("F_k needs at least one sample (N_k = 0)".into()));
    }
    let n = shard.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; model.param_count()];
    for chunk in shard.chunks(EVAL_CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (v, gch) = batch_loss_and_grad(model, &refs, objective)?;
        let share = chunk.len() as f64;
        total += v * share;
        for (a, b) in grad.iter_mut().zip(gch) {
            *a += b * share;
        }
    }
    for a in &mut grad {
        *a /= n;
    }
    Ok((total / n, grad))
}

/// `(μ/2)‖w − w_global‖²` and its gradient `μ(w − w_global)`.
pub fn proximal_term(w: &ParameterVector, w_global: &ParameterVector, mu: f64) -> Result<(f64, Vec<f64>)> {
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(Error::field("mu", "must be finite and non-negative"));
    }
    w.check_layout(w_global)?;
    let value = 0.5 * mu * w.squared_distance(w_global)?;
    let grad = w
        .values()
        .iter()
        .zip(w_global.values())
        .map(|(a, b)| mu * (a - b))
        .collect();
    Ok((value, grad))
}

/// `F_k^prox(w) = F_k(w) + (μ/2)‖w − w_global‖²`.
pub fn fedprox_objective(
    model: &Model,
    shard: &[Sample],
    objective: &DiceObjective,
    w_global: &ParameterVector,
    mu: f64,
) -> Result<f64> {
    let (prox, _) = proximal_term(&model.params, w_global, mu)?;
    Ok(local_objective(model, shard, objective)? + prox)
}

pub fn fedprox_objective_with_grad(
    model: &Model,
    shard: &[Sample],
    objective: &DiceObjective,
    w_global: &ParameterVector,
    mu: f64,
) -> Result<(f64, Vec<f64>)> {
    let (prox, pgrad) = proximal_term(&model.params, w_global, mu)?;
    let (f, mut grad) = local_objective_with_grad(model, shard, objective)?;
    for (a, b) in grad.iter_mut().zip(pgrad) {
        *a += b;
    }
    Ok((f + prox, grad))
}
