//! In-process federated training: local client updates, sample-weighted
//! aggregation and validation-based best-model selection.
//!
//! Clients and server only talk through [`Broadcast`] and [`ClientUpdate`],
//! which carry parameter vectors and counts and nothing else.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, BinaryMask, MetricsReport};
use crate::nets::{build_model, Layout, Model, NetConfig, ParamEntry, ParameterVector};
use crate::objectives::{batch_loss_and_grad, DiceObjective, Region};
use crate::optim::{AdamWHyper, AdamWState};
use crate::rng;
use crate::synthdata::{LabelGrid, Sample, SiteDataset};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name")]
pub enum Algorithm {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx { mu: f64 },
}

impl Algorithm {
    pub fn mu(&self) -> Option<f64> {
        match self {
            Algorithm::FedAvg => None,
            Algorithm::FedProx { mu } => Some(*mu),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Algorithm::FedAvg => "FedAvg".into(),
            Algorithm::FedProx { mu } => format!("FedProx(mu={mu})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWHyper,
    pub objective: DiceObjective,
    pub seed: u64,
    /// Worker threads for client updates; never affects results.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            algorithm: Algorithm::FedAvg,
            rounds: 50,
            local_epochs: 1,
            batch_size: 4,
            optimizer: AdamWHyper::default(),
            objective: DiceObjective::default(),
            seed: 0,
            threads: 1,
        }
    }
}

impl FederationConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.optimizer.problems();
        if self.rounds == 0 {
            out.push("federation.rounds: must be at least 1".into());
        }
        if self.local_epochs == 0 {
            out.push("federation.local_epochs: must be at least 1".into());
        }
        if self.batch_size == 0 {
            out.push("federation.batch_size: must be at least 1".into());
        }
        if let Some(mu) = self.algorithm.mu() {
            if !(mu >= 0.0 && mu.is_finite()) {
                out.push(format!("federation.algorithm.mu: {mu} must be finite and >= 0"));
            }
        }
        if let Err(e) = self.objective.validate() {
            out.push(format!("objective: {e}"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }
}

/// A participant holding a private training shard.
pub trait Client: Sync {
    fn id(&self) -> usize;
    /// `N_k`, the size of the training shard.
    fn num_samples(&self) -> usize;
    /// Mean loss and gradient at `w` over the given training-sample indices.
    fn batch_loss_and_grad(&self, w: &ParameterVector, batch: &[usize], objective: &DiceObjective)
        -> Result<(f64, Vec<f64>)>;
}

/// Institution `k` with its train and validation shards.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub net: NetConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl ClientState {
    pub fn from_site(id: usize, net: &NetConfig, site: &SiteDataset) -> Result<Self> {
        if site.train.is_empty() {
            return Err(Error::Empty(format!("client {id} has no training samples")));
        }
        Ok(ClientState {
            id,
            net: net.clone(),
            train: site.train.clone(),
            val: site.val.clone(),
        })
    }
}

impl Client for ClientState {
    fn id(&self) -> usize {
        self.id
    }

    fn num_samples(&self) -> usize {
        self.train.len()
    }

    fn batch_loss_and_grad(
        &self,
        w: &ParameterVector,
        batch: &[usize],
        objective: &DiceObjective,
    ) -> Result<(f64, Vec<f64>)> {
        let model = Model {
            config: self.net.clone(),
            params: w.clone(),
        };
        let refs: Vec<&Sample> = batch.iter().map(|&i| &self.train[i]).collect();
        batch_loss_and_grad(&model, &refs, objective)
    }
}

/// Server → client message.
#[derive(Clone, Debug, PartialEq)]
pub struct Broadcast {
    pub round: usize,
    pub weights: ParameterVector,
}

/// Client → server message.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub weights: ParameterVector,
    pub num_samples: usize,
    pub train_loss: f64,
}

/// Lists the named types reachable from a value of this type, for auditing
/// what can cross the client/server boundary.
pub trait TypeInventory {
    fn collect_types(out: &mut BTreeSet<&'static str>);

    fn reachable_types() -> BTreeSet<&'static str> {
        let mut out = BTreeSet::new();
        Self::collect_types(&mut out);
        out
    }
}

macro_rules! leaf_inventory {
    ($($t:ty),*) => {
        $(impl TypeInventory for $t {
            fn collect_types(out: &mut BTreeSet<&'static str>) {
                out.insert(stringify!($t));
            }
        })*
    };
}

leaf_inventory!(usize, u64, f64, String);

impl<T: TypeInventory> TypeInventory for Vec<T> {
    fn collect_types(out: &mut BTreeSet<&'static str>) {
        out.insert("Vec");
        T::collect_types(out);
    }
}

impl<T: TypeInventory> TypeInventory for Option<T> {
    fn collect_types(out: &mut BTreeSet<&'static str>) {
        out.insert("Option");
        T::collect_types(out);
    }
}

impl TypeInventory for ParamEntry {
    fn collect_types(out: &mut BTreeSet<&'static str>) {
        if out.insert("ParamEntry") {
            String::collect_types(out);
            Vec::<usize>::collect_types(out);
        }
    }
}

impl TypeInventory for Layout {
    fn collect_types(out: &mut BTreeSet<&'static str>) {
        if out.insert("Layout") {
            Vec::<ParamEntry>::collect_types(out);
            out.insert("HashMap");
            String::collect_types(out);
            usize::collect_types(out);
        }
    }
}

impl TypeInventory for ParameterVector {
    fn collect_types(out: &mut BTreeSet<&'static str>) {
        if out.insert("ParameterVector") {
            Vec::<f64>::collect_types(out);
            Layout::collect_types(out);
        }
    }
}

impl TypeInventory for Broadcast {
    fn collect_types(out: &mut BTreeSet<&'static str>) {
        if out.insert("Broadcast") {
            usize::collect_types(out);
            ParameterVector::collect_types(out);
        }
    }
}

impl TypeInventory for ClientUpdate {
    fn collect_types(out: &mut BTreeSet<&'static str>) {
        if out.insert("ClientUpdate") {
            usize::collect_types(out);
            f64::collect_types(out);
            ParameterVector::collect_types(out);
        }
    }
}

impl TypeInventory for ClientLoss {
    fn collect_types(out: &mut BTreeSet<&'static str>) {
        if out.insert("ClientLoss") {
            usize::collect_types(out);
            f64::collect_types(out);
        }
    }
}

impl TypeInventory for RoundRecord {
    fn collect_types(out: &mut BTreeSet<&'static str>) {
        if out.insert("RoundRecord") {
            usize::collect_types(out);
            f64::collect_types(out);
            Vec::<ClientLoss>::collect_types(out);
            Vec::<Option<f64>>::collect_types(out);
        }
    }
}

impl TypeInventory for BestModel {
    fn collect_types(out: &mut BTreeSet<&'static str>) {
        if out.insert("BestModel") {
            usize::collect_types(out);
            f64::collect_types(out);
            ParameterVector::collect_types(out);
        }
    }
}

impl TypeInventory for ServerState {
    fn collect_types(out: &mut BTreeSet<&'static str>) {
        if out.insert("ServerState") {
            ParameterVector::collect_types(out);
            usize::collect_types(out);
            Option::<BestModel>::collect_types(out);
            Vec::<RoundRecord>::collect_types(out);
            Vec::<f64>::collect_types(out);
        }
    }
}

/// Bytes a client update occupies on the wire: the weights plus three scalars.
pub fn update_payload_bytes(u: &ClientUpdate) -> usize {
    8 * u.weights.len() + 3 * 8
}

/// Result of one client's local training.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate {
    pub weights: ParameterVector,
    /// Mean loss over the final local epoch.
    pub train_loss: f64,
}

/// `E` epochs of mini-batch AdamW from `w_start` on the client's objective,
/// with the proximal anchor at `w_start` for FedProx. Optimizer state starts
/// fresh and the batch order comes from a stream keyed by (client, round).
pub fn client_local_update(
    client: &dyn Client,
    w_start: &ParameterVector,
    config: &FederationConfig,
    round: usize,
) -> Result<LocalUpdate> {
    let n = client.num_samples();
    if n == 0 {
        return Err(Error::Empty(format!("client {} has no training samples", client.id())));
    }
    let mu = config.algorithm.mu();
    let mut w = w_start.clone();
    let mut opt = AdamWState::fresh(w.len(), config.optimizer);
    let mut order_rng = rng::stream(config.seed, rng::domain::BATCH, &[client.id() as u64, round as u64]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut last_loss = f64::NAN;
    for epoch in 0..config.local_epochs {
        for i in (1..n).rev() {
            let j = order_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let diverged = |detail: String| Error::Divergence {
            client: client.id(),
            epoch,
            detail,
        };
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (mut loss, mut grad) = client.batch_loss_and_grad(&w, batch, &config.objective)?;
            if let Some(mu) = mu {
                let mut sq = 0.0;
                for ((g, &wi), &ai) in grad.iter_mut().zip(w.values()).zip(w_start.values()) {
                    let d = wi - ai;
                    sq += d * d;
                    *g += mu * d;
                }
                loss += 0.5 * mu * sq;
            }
            if !loss.is_finite() {
                return Err(diverged(format!("loss became {loss}")));
            }
            opt.step_in_place(&mut w, &grad).map_err(|e| diverged(e.to_string()))?;
            total += loss * batch.len() as f64;
        }
        last_loss = total / n as f64;
    }
    Ok(LocalUpdate {
        weights: w,
        train_loss: last_loss,
    })
}

/// `Σ N_k w_k / Σ N_k`, accumulated in the given order as a running mean so
/// that a single input, or identical inputs, come back unchanged.
pub fn aggregate(updates: &[(&ParameterVector, usize)]) -> Result<ParameterVector> {
    let Some(&(first, n0)) = updates.first() else {
        return Err(Error::Empty("aggregation needs at least one update".into()));
    };
    if let Some(&(_, n)) = updates.iter().find(|(_, n)| *n == 0) {
        return Err(Error::field("num_samples", format!("every client needs N_k >= 1, got {n}")));
    }
    for (w, _) in &updates[1..] {
        first.check_layout(w)?;
    }
    let mut mean = first.clone();
    let mut seen = n0 as f64;
    for &(w, n) in &updates[1..] {
        seen += n as f64;
        let share = n as f64 / seen;
        for (m, &x) in mean.values_mut().iter_mut().zip(w.values()) {
            *m += share * (x - *m);
        }
    }
    Ok(mean)
}

/// Aggregates client messages in ascending client id.
pub fn aggregate_updates(updates: &[ClientUpdate]) -> Result<ParameterVector> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let pairs: Vec<(&ParameterVector, usize)> = sorted.iter().map(|u| (&u.weights, u.num_samples)).collect();
    aggregate(&pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientLoss {
    pub client: usize,
    pub samples: usize,
    pub loss: f64,
}

/// One line of round history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub client_losses: Vec<ClientLoss>,
    /// Mean foreground Dice on the union of validation shards.
    pub val_dice: f64,
    /// Same, per site, in client order; `None` for a site without validation data.
    pub site_val_dice: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestModel {
    pub round: usize,
    pub val_dice: f64,
    pub weights: ParameterVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub w_global: ParameterVector,
    /// Rounds completed so far.
    pub round: usize,
    pub best: Option<BestModel>,
    pub history: Vec<RoundRecord>,
    /// Wall-clock seconds per round; kept apart from the deterministic history.
    pub round_seconds: Vec<f64>,
}

impl ServerState {
    pub fn new(w_global: ParameterVector) -> Self {
        ServerState {
            w_global,
            round: 0,
            best: None,
            history: Vec::new(),
            round_seconds: Vec::new(),
        }
    }

    pub fn broadcast(&self) -> Broadcast {
        Broadcast {
            round: self.round,
            weights: self.w_global.clone(),
        }
    }

    pub fn val_dice_series(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.val_dice).collect()
    }
}

/// Validation scores of one global model.
#[derive(Clone, Debug, PartialEq)]
pub struct Validation {
    pub pooled: f64,
    pub per_site: Vec<Option<f64>>,
}

/// Client side of a round: train from the broadcast weights and reply.
pub fn respond(client: &dyn Client, msg: &Broadcast, config: &FederationConfig) -> Result<ClientUpdate> {
    let local = client_local_update(client, &msg.weights, config, msg.round)?;
    Ok(ClientUpdate {
        client_id: client.id(),
        weights: local.weights,
        num_samples: client.num_samples(),
        train_loss: local.train_loss,
    })
}

/// Broadcast, local updates, aggregation, validation and best-model bookkeeping.
pub fn run_round<C: Client>(
    mut server: ServerState,
    clients: &[C],
    config: &FederationConfig,
    validate: &(dyn Fn(&ParameterVector) -> Result<Validation> + Sync),
) -> Result<ServerState> {
    let started = Instant::now();
    let msg = server.broadcast();
    let updates: Vec<ClientUpdate> = if config.threads > 1 {
        clients.par_iter().map(|c| respond(c, &msg, config)).collect::<Result<_>>()?
    } else {
        clients.iter().map(|c| respond(c, &msg, config)).collect::<Result<_>>()?
    };
    server.w_global = aggregate_updates(&updates)?;
    let v = validate(&server.w_global)?;
    let mut losses: Vec<ClientLoss> = updates
        .iter()
        .map(|u| ClientLoss {
            client: u.client_id,
            samples: u.num_samples,
            loss: u.train_loss,
        })
        .collect();
    losses.sort_by_key(|l| l.client);
    let improved = server.best.as_ref().is_none_or(|b| v.pooled > b.val_dice);
    if improved {
        server.best = Some(BestModel {
            round: server.round,
            val_dice: v.pooled,
            weights: server.w_global.clone(),
        });
    }
    server.history.push(RoundRecord {
        round: server.round,
        client_losses: losses,
        val_dice: v.pooled,
        site_val_dice: v.per_site,
    });
    server.round += 1;
    server.round_seconds.push(started.elapsed().as_secs_f64());
    Ok(server)
}

const PREDICT_CHUNK: usize = 8;

fn argmax_labels(probs: &Tensor) -> Result<Vec<LabelGrid>> {
    let [b, c, h, w] = probs.dims4()?;
    let d = probs.data();
    (0..b)
        .map(|bi| {
            let labels = (0..h * w)
                .map(|p| {
                    let mut best = 0;
                    for ci in 1..c {
                        if d[(bi * c + ci) * h * w + p] > d[(bi * c + best) * h * w + p] {
                            best = ci;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelGrid::new(h, w, labels)
        })
        .collect()
}

/// Arg-max label maps for each sample.
pub fn predict_labels(model: &Model, samples: &[Sample]) -> Result<Vec<LabelGrid>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(PREDICT_CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _) = crate::objectives::batch_from_samples(&refs, model.config.num_classes)?;
        out.extend(argmax_labels(&model.forward(&x)?)?);
    }
    Ok(out)
}

/// Mean over regions of the per-region Dice for one prediction.
pub fn foreground_dice(pred: &LabelGrid, gt: &LabelGrid) -> Result<f64> {
    let mut total = 0.0;
    for r in Region::FOREGROUND {
        let p = BinaryMask::from_labels(pred, r.label(), [1.0, 1.0])?;
        let g = BinaryMask::from_labels(gt, r.label(), [1.0, 1.0])?;
        total += metrics::dice(&p, &g)?;
    }
    Ok(total / Region::FOREGROUND.len() as f64)
}

/// Mean foreground Dice over samples (overlap only, no distances).
pub fn mean_foreground_dice(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let preds = predict_labels(model, samples)?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        total += foreground_dice(p, &s.labels)?;
    }
    Ok(total / samples.len() as f64)
}

/// Full metric battery, averaged over samples.
pub fn evaluate_model(model: &Model, samples: &[Sample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    let preds = predict_labels(model, samples)?;
    let reports = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| metrics::evaluate(p, &s.labels, [1.0, 1.0]))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::mean(&reports)
}

/// Validation closure over the clients' validation shards.
pub fn shard_validator<'a>(
    net: &'a NetConfig,
    clients: &'a [ClientState],
) -> impl Fn(&ParameterVector) -> Result<Validation> + Sync + 'a {
    move |w: &ParameterVector| {
        let model = Model {
            config: net.clone(),
            params: w.clone(),
        };
        let mut per_site = Vec::with_capacity(clients.len());
        let (mut sum, mut count) = (0.0, 0usize);
        for c in clients {
            if c.val.is_empty() {
                per_site.push(None);
                continue;
            }
            let d = mean_foreground_dice(&model, &c.val)?;
            sum += d * c.val.len() as f64;
            count += c.val.len();
            per_site.push(Some(d));
        }
        let pooled = if count == 0 { f64::NAN } else { sum / count as f64 };
        Ok(Validation { pooled, per_site })
    }
}

/// Final state plus the best model's report on the union of test splits.
#[derive(Clone, Debug)]
pub struct FederationOutcome {
    pub server: ServerState,
    pub best_model: Model,
    pub report: MetricsReport,
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if threads <= 1 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::field("threads", e.to_string()))?;
    pool.install(f)
}

/// `R` rounds over one client per site, starting from the network's seeded init.
pub fn run_federation(config: &FederationConfig, net: &NetConfig, sites: &[SiteDataset]) -> Result<FederationOutcome> {
    config.validate()?;
    if sites.is_empty() {
        return Err(Error::Empty("federation needs at least one site".into()));
    }
    let clients = sites
        .iter()
        .enumerate()
        .map(|(k, s)| ClientState::from_site(k, net, s))
        .collect::<Result<Vec<_>>>()?;
    let init = build_model(net)?;
    let validate = shard_validator(net, &clients);
    let server = with_threads(config.threads, || {
        let mut server = ServerState::new(init.params.clone());
        for _ in 0..config.rounds {
            server = run_round(server, &clients, config, &validate)?;
        }
        Ok(server)
    })?;
    let best = server.best.as_ref().expect("at least one round ran");
    let best_model = init.with_params(best.weights.clone())?;
    let test: Vec<Sample> = sites.iter().flat_map(|s| s.test.iter().cloned()).collect();
    let report = evaluate_model(&best_model, &test)?;
    Ok(FederationOutcome {
        server,
        best_model,
        report,
    })
}

/// Single-site training: the same loop with one client holding the pooled data,
/// one epoch per round, for `rounds × local_epochs` epochs.
pub fn run_centralized(config: &FederationConfig, net: &NetConfig, pooled: &SiteDataset) -> Result<FederationOutcome> {
    let single = FederationConfig {
        algorithm: Algorithm::FedAvg,
        rounds: config.rounds * config.local_epochs,
        local_epochs: 1,
        ..config.clone()
    };
    run_federation(&single, net, std::slice::from_ref(pooled))
}

/// History as line-delimited JSON.
pub fn history_jsonl(history: &[RoundRecord]) -> Result<String> {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Serde(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_history_jsonl(text: &str) -> Result<Vec<RoundRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Serde(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::layout_for;

    fn small_layout() -> std::sync::Arc<Layout> {
        layout_for(&NetConfig {
            base_width: 1,
            depth: 1,
            ..NetConfig::default()
        })
        .unwrap()
    }

    fn vec_with(layout: &std::sync::Arc<Layout>, f: impl Fn(usize) -> f64) -> ParameterVector {
        let n = layout.total_len();
        ParameterVector::load(layout.clone(), (0..n).map(f).collect()).unwrap()
    }

    /// `½‖w − c‖²` per sample, independent of the batch contents.
    struct Quadratic {
        id: usize,
        n: usize,
        centre: f64,
    }

    impl Client for Quadratic {
        fn id(&self) -> usize {
            self.id
        }
        fn num_samples(&self) -> usize {
            self.n
        }
        fn batch_loss_and_grad(&self, w: &ParameterVector, _: &[usize], _: &DiceObjective) -> Result<(f64, Vec<f64>)> {
            let g: Vec<f64> = w.values().iter().map(|x| x - self.centre).collect();
            Ok((0.5 * g.iter().map(|d| d * d).sum::<f64>(), g))
        }
    }

    fn toy_config(algorithm: Algorithm) -> FederationConfig {
        FederationConfig {
            algorithm,
            rounds: 1,
            batch_size: 100,
            optimizer: AdamWHyper {
                lr: 0.1,
                weight_decay: 0.0,
                ..AdamWHyper::default()
            },
            ..FederationConfig::default()
        }
    }

    fn no_validation(_: &ParameterVector) -> Result<Validation> {
        Ok(Validation {
            pooled: 0.0,
            per_site: vec![],
        })
    }

    #[test]
    fn aggregate_small_cases() {
        let l = small_layout();
        let a = vec_with(&l, |_| 0.0);
        let b = vec_with(&l, |_| 4.0);
        let m = aggregate(&[(&a, 1), (&b, 3)]).unwrap();
        assert!(m.values().iter().all(|&v| v == 3.0));
        let odd = vec_with(&l, |i| (i as f64 * 0.37).sin());
        assert_eq!(aggregate(&[(&odd, 7)]).unwrap(), odd);
        assert_eq!(aggregate(&[(&odd, 3), (&odd, 5), (&odd, 2)]).unwrap(), odd);
        assert!(aggregate(&[]).is_err());
        assert!(aggregate(&[(&a, 0)]).is_err());
        let other = ParameterVector::zeros(layout_for(&NetConfig::default()).unwrap());
        assert!(aggregate(&[(&a, 1), (&other, 1)]).is_err());
    }

    #[test]
    fn zero_learning_rate_is_null() {
        let l = small_layout();
        let w = vec_with(&l, |i| i as f64 * 0.01);
        let mut cfg = toy_config(Algorithm::FedAvg);
        cfg.optimizer.lr = 0.0;
        cfg.local_epochs = 3;
        let c = Quadratic { id: 0, n: 5, centre: 1.0 };
        assert_eq!(client_local_update(&c, &w, &cfg, 0).unwrap().weights, w);
        let server = run_round(ServerState::new(w.clone()), &[c], &cfg, &no_validation).unwrap();
        assert_eq!(server.w_global, w);
    }

    #[test]
    fn fedprox_mu_zero_matches_fedavg() {
        let l = small_layout();
        let w = vec_with(&l, |i| (i as f64).cos());
        let c = Quadratic { id: 2, n: 9, centre: -0.5 };
        let mut a = toy_config(Algorithm::FedAvg);
        a.batch_size = 2;
        a.local_epochs = 2;
        let b = FederationConfig {
            algorithm: Algorithm::FedProx { mu: 0.0 },
            ..a.clone()
        };
        assert_eq!(
            client_local_update(&c, &w, &a, 4).unwrap(),
            client_local_update(&c, &w, &b, 4).unwrap()
        );
    }

    #[test]
    fn two_client_round_is_weighted_mean_of_single_steps() {
        let l = small_layout();
        let w = vec_with(&l, |_| 0.0);
        let cfg = toy_config(Algorithm::FedAvg);
        let clients = [Quadratic { id: 0, n: 1, centre: 1.0 }, Quadratic { id: 1, n: 3, centre: -2.0 }];
        // One Adam step from zero moves every coordinate by lr·sign(g)/(1 + eps/|g|).
        let step = |c: f64| {
            let g = -c;
            -0.1 * g / (g.abs() + 1e-8)
        };
        let want = (1.0 * step(1.0) + 3.0 * step(-2.0)) / 4.0;
        let server = run_round(ServerState::new(w), &clients, &cfg, &no_validation).unwrap();
        for &v in server.w_global.values() {
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn large_mu_stays_closer_to_start() {
        let l = small_layout();
        let w = vec_with(&l, |_| 0.0);
        let c = Quadratic { id: 0, n: 4, centre: 3.0 };
        let mut avg = toy_config(Algorithm::FedAvg);
        avg.batch_size = 1;
        avg.local_epochs = 5;
        let prox = FederationConfig {
            algorithm: Algorithm::FedProx { mu: 50.0 },
            ..avg.clone()
        };
        let da = client_local_update(&c, &w, &avg, 0).unwrap().weights.squared_distance(&w).unwrap();
        let dp = client_local_update(&c, &w, &prox, 0).unwrap().weights.squared_distance(&w).unwrap();
        assert!(dp < da, "{dp} vs {da}");
    }

    #[test]
    fn divergence_names_client_and_epoch() {
        struct Bad;
        impl Client for Bad {
            fn id(&self) -> usize {
                6
            }
            fn num_samples(&self) -> usize {
                2
            }
            fn batch_loss_and_grad(&self, w: &ParameterVector, _: &[usize], _: &DiceObjective) -> Result<(f64, Vec<f64>)> {
                Ok((f64::NAN, vec![0.0; w.len()]))
            }
        }
        let l = small_layout();
        let w = vec_with(&l, |_| 0.0);
        let err = run_round(ServerState::new(w), &[Bad], &toy_config(Algorithm::FedAvg), &no_validation).unwrap_err();
        assert!(matches!(err, Error::Divergence { client: 6, epoch: 0, .. }));
    }

    #[test]
    fn best_model_tracks_maximum() {
        let l = small_layout();
        let w = vec_with(&l, |_| 0.0);
        let scores = std::sync::Mutex::new(vec![0.3, 0.7, 0.5].into_iter());
        let validate = |_: &ParameterVector| {
            Ok(Validation {
                pooled: scores.lock().unwrap().next().unwrap(),
                per_site: vec![],
            })
        };
        let cfg = toy_config(Algorithm::FedAvg);
        let clients = [Quadratic { id: 0, n: 2, centre: 1.0 }];
        let mut s = ServerState::new(w);
        for _ in 0..3 {
            s = run_round(s, &clients, &cfg, &validate).unwrap();
        }
        assert_eq!(s.history.len(), 3);
        let best = s.best.unwrap();
        assert_eq!((best.round, best.val_dice), (1, 0.7));
    }

    #[test]
    fn message_path_carries_no_samples() {
        let mut types = ClientUpdate::reachable_types();
        types.extend(Broadcast::reachable_types());
        types.extend(ServerState::reachable_types());
        for forbidden in ["Sample", "Image", "LabelGrid", "Grid", "Tensor", "SiteDataset", "ClientState"] {
            assert!(!types.contains(forbidden), "{forbidden} reachable");
        }
    }

    #[test]
    fn history_round_trips_through_jsonl() {
        let h = vec![RoundRecord {
            round: 0,
            client_losses: vec![ClientLoss {
                client: 0,
                samples: 3,
                loss: 0.25,
            }],
            val_dice: 0.5,
            site_val_dice: vec![Some(0.5), None],
        }];
        let text = history_jsonl(&h).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(parse_history_jsonl(&text).unwrap(), h);
    }
}
