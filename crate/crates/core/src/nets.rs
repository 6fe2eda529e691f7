//! Toy-scale segmentation networks over a flat parameter vector.
//!
//! Both architectures share one builder. The attention variant inserts an
//! additive attention gate on every skip connection; all other parameters
//! carry the same names, so weights can be moved between the two by name.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{GradientMap, Graph, ParamId, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    TinyUnet,
    AttentionTinyUnet,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::TinyUnet => "tiny_unet",
            Architecture::AttentionTinyUnet => "attention_tiny_unet",
        }
    }

    /// Name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Architecture::TinyUnet => "U-Net",
            Architecture::AttentionTinyUnet => "Attention U-Net",
        }
    }

    fn code(self) -> u32 {
        match self {
            Architecture::TinyUnet => 0,
            Architecture::AttentionTinyUnet => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Architecture::TinyUnet),
            1 => Some(Architecture::AttentionTinyUnet),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub architecture: Architecture,
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub num_classes: usize,
    /// Set from the experiment's master seed rather than read from config files.
    #[serde(skip)]
    pub init_seed: u64,
    /// Initial background probability encoded in the output bias, so that a
    /// featureless input starts out as background. `1 / num_classes` gives zero
    /// output biases.
    pub background_prior: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            architecture: Architecture::TinyUnet,
            in_channels: 1,
            base_width: 8,
            depth: 2,
            num_classes: 4,
            init_seed: 0,
            background_prior: 0.9,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.in_channels == 0 {
            problems.push("in_channels: must be at least 1".to_string());
        }
        if self.base_width == 0 {
            problems.push("base_width: must be at least 1".to_string());
        }
        if self.depth == 0 {
            problems.push("depth: must be at least 1".to_string());
        }
        if self.depth > 8 {
            problems.push("depth: at most 8 levels are supported".to_string());
        }
        if self.num_classes < 2 {
            problems.push("num_classes: must be at least 2".to_string());
        }
        if !(self.background_prior > 0.0 && self.background_prior < 1.0) {
            problems.push(format!("background_prior: {} is outside (0, 1)", self.background_prior));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    /// Spatial extents must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered, contiguous placement of named parameters in a flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
    total: usize,
}

impl Layout {
    fn from_shapes(shapes: Vec<(String, Vec<usize>)>) -> Self {
        let mut entries = Vec::with_capacity(shapes.len());
        let mut by_name = HashMap::new();
        let mut offset = 0;
        for (i, (name, shape)) in shapes.into_iter().enumerate() {
            let n: usize = shape.iter().product();
            by_name.insert(name.clone(), i);
            entries.push(ParamEntry {
                name,
                shape,
                offset,
            });
            offset += n;
        }
        Layout {
            entries,
            by_name,
            total: offset,
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.index_of(name).map(|i| &self.entries[i])
    }

    /// Name of the parameter that owns flat index `i`.
    pub fn name_at(&self, i: usize) -> Option<&str> {
        let pos = self.entries.partition_point(|e| e.offset <= i);
        let e = self.entries.get(pos.checked_sub(1)?)?;
        (i < e.offset + e.len()).then_some(e.name.as_str())
    }
}

/// Flat weight vector `w` with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParameterVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        ParameterVector {
            values: vec![0.0; layout.total_len()],
            layout,
        }
    }

    /// Wraps a flat vector, checking that it fits the layout.
    pub fn load(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::LayoutMismatch(format!(
                "layout holds {} values, got {}",
                layout.total_len(),
                values.len()
            )));
        }
        Ok(ParameterVector { values, layout })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParameterVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn check_layout(&self, other: &ParameterVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(format!(
                "{} parameters in {} tensors vs {} in {}",
                self.len(),
                self.layout.entries.len(),
                other.len(),
                other.layout.entries.len()
            )))
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .entry(name)
            .map(|e| &self.values[e.offset..e.offset + e.len()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let e = self.layout.entry(name)?.clone();
        Some(&mut self.values[e.offset..e.offset + e.len()])
    }

    pub fn squared_distance(&self, other: &ParameterVector) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |acc, (a, b)| acc + (a - b) * (a - b)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: NetConfig,
    pub params: ParameterVector,
}

/// Layout for a config, without initializing weights.
pub fn layout_for(config: &NetConfig) -> Result<Arc<Layout>> {
    config.validate()?;
    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    let mut conv = |name: &str, cout: usize, cin: usize, k: usize| {
        shapes.push((format!("{name}.weight"), vec![cout, cin, k, k]));
        shapes.push((format!("{name}.bias"), vec![cout]));
    };
    let depth = config.depth;
    let mut cin = config.in_channels;
    for l in 0..depth {
        let c = config.width(l);
        conv(&format!("enc{l}.conv1"), c, cin, 3);
        conv(&format!("enc{l}.conv2"), c, c, 3);
        cin = c;
    }
    let cmid = config.width(depth);
    conv("mid.conv1", cmid, cin, 3);
    conv("mid.conv2", cmid, cmid, 3);
    for l in (0..depth).rev() {
        let (c, cup) = (config.width(l), config.width(l + 1));
        if config.architecture == Architecture::AttentionTinyUnet {
            let inter = (c / 2).max(1);
            conv(&format!("att{l}.wg"), inter, cup, 1);
            conv(&format!("att{l}.wx"), inter, c, 1);
            conv(&format!("att{l}.psi"), 1, inter, 1);
        }
        conv(&format!("dec{l}.conv1"), c, c + cup, 3);
        conv(&format!("dec{l}.conv2"), c, c, 3);
    }
    conv("head", config.num_classes, config.width(0), 1);
    Ok(Arc::new(Layout::from_shapes(shapes)))
}

fn name_key(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// He-uniform weights from a per-parameter stream keyed by name. Biases are
/// zero except the background output bias, `ln(p·(C−1)/(1−p))` for prior `p`.
fn init_params(config: &NetConfig, layout: Arc<Layout>) -> ParameterVector {
    let mut params = ParameterVector::zeros(layout.clone());
    for e in layout.entries() {
        if e.shape.len() != 4 {
            continue;
        }
        let fan_in = (e.shape[1] * e.shape[2] * e.shape[3]) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let mut s = rng::stream(config.init_seed, rng::domain::INIT, &[name_key(&e.name)]);
        for v in &mut params.values[e.offset..e.offset + e.len()] {
            *v = s.random_range(-bound..bound);
        }
    }
    let p = config.background_prior;
    if let Some(bias) = params.get_mut("head.bias") {
        bias[0] = (p * (config.num_classes - 1) as f64 / (1.0 - p)).ln();
    }
    params
}

pub fn build_model(config: &NetConfig) -> Result<Model> {
    let layout = layout_for(config)?;
    let params = init_params(config, layout);
    Ok(Model {
        config: config.clone(),
        params,
    })
}

/// Builds the attention-gated variant; the config must ask for it.
pub fn build_attention_variant(config: &NetConfig) -> Result<Model> {
    if config.architecture != Architecture::AttentionTinyUnet {
        return Err(Error::field(
            "architecture",
            "build_attention_variant needs attention_tiny_unet",
        ));
    }
    build_model(config)
}

/// Values recorded during a forward pass.
pub struct ForwardTrace {
    pub probs: Var,
    /// Attention coefficients per skip level, deepest first. Empty for the plain U-Net.
    pub gates: Vec<Var>,
}

impl Model {
    pub fn from_params(config: NetConfig, values: Vec<f64>) -> Result<Self> {
        let layout = layout_for(&config)?;
        Ok(Model {
            config,
            params: ParameterVector::load(layout, values)?,
        })
    }

    pub fn with_params(&self, params: ParameterVector) -> Result<Self> {
        self.params.check_layout(&params)?;
        Ok(Model {
            config: self.config.clone(),
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = match shape {
            &[b, c, h, w] => [b, c, h, w],
            _ => return Err(Error::Shape(format!("model input must be [B,C,H,W], got {shape:?}"))),
        };
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "spatial extent {h}x{w} is not divisible by {m}"
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `g`. With `track`, parameters become
    /// differentiable leaves whose [`ParamId`] is their layout index.
    pub fn forward_graph(&self, g: &mut Graph, input: Var, track: bool) -> Result<ForwardTrace> {
        self.check_input(g.value(input).shape())?;
        let layout = self.params.layout().clone();
        let leaf = |g: &mut Graph, name: &str| -> Result<Var> {
            let idx = layout
                .index_of(name)
                .ok_or_else(|| Error::LayoutMismatch(format!("no parameter named {name}")))?;
            let e = &layout.entries()[idx];
            let t = Tensor::new(
                e.shape.clone(),
                self.params.values()[e.offset..e.offset + e.len()].to_vec(),
            )?;
            Ok(if track {
                g.param(ParamId(idx), t)
            } else {
                g.input(t)
            })
        };
        let conv = |g: &mut Graph, x: Var, name: &str| -> Result<Var> {
            let k = leaf(g, &format!("{name}.weight"))?;
            let b = leaf(g, &format!("{name}.bias"))?;
            g.conv2d(x, k, b)
        };
        let conv_relu = |g: &mut Graph, x: Var, name: &str| -> Result<Var> {
            let y = conv(g, x, name)?;
            Ok(g.relu(y))
        };

        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut h = input;
        for l in 0..depth {
            h = conv_relu(g, h, &format!("enc{l}.conv1"))?;
            h = conv_relu(g, h, &format!("enc{l}.conv2"))?;
            skips.push(h);
            h = g.maxpool2(h)?;
        }
        h = conv_relu(g, h, "mid.conv1")?;
        h = conv_relu(g, h, "mid.conv2")?;
        let mut gates = Vec::new();
        for l in (0..depth).rev() {
            let up = g.upsample_nearest2(h)?;
            let mut skip = skips[l];
            if self.config.architecture == Architecture::AttentionTinyUnet {
                let gsig = conv(g, up, &format!("att{l}.wg"))?;
                let xsig = conv(g, skip, &format!("att{l}.wx"))?;
                let sum = g.add(gsig, xsig)?;
                let act = g.relu(sum);
                let psi = conv(g, act, &format!("att{l}.psi"))?;
                let alpha = g.sigmoid(psi);
                gates.push(alpha);
                skip = g.gate(skip, alpha)?;
            }
            h = g.concat_channels(skip, up)?;
            h = conv_relu(g, h, &format!("dec{l}.conv1"))?;
            h = conv_relu(g, h, &format!("dec{l}.conv2"))?;
        }
        let logits = conv(g, h, "head")?;
        let probs = g.softmax_channels(logits)?;
        Ok(ForwardTrace { probs, gates })
    }

    /// Per-pixel class probabilities `[B, num_classes, H, W]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let trace = self.forward_graph(&mut g, x, false)?;
        Ok(g.value(trace.probs).clone())
    }

    /// Forward pass that also returns the attention coefficients.
    pub fn forward_with_gates(&self, batch: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let trace = self.forward_graph(&mut g, x, false)?;
        let gates = trace.gates.iter().map(|&v| g.value(v).clone()).collect();
        Ok((g.value(trace.probs).clone(), gates))
    }

    /// Flattens a gradient map into layout order.
    pub fn flatten_gradients(&self, grads: &GradientMap) -> Result<Vec<f64>> {
        let layout = self.params.layout();
        let mut out = vec![0.0; layout.total_len()];
        for (id, t) in grads.iter() {
            let e = layout.entries().get(id.0).ok_or_else(|| {
                Error::LayoutMismatch(format!("gradient for unknown parameter {}", id.0))
            })?;
            if t.len() != e.len() {
                return Err(Error::LayoutMismatch(format!(
                    "gradient for {} has {} values, expected {}",
                    e.name,
                    t.len(),
                    e.len()
                )));
            }
            out[e.offset..e.offset + e.len()].copy_from_slice(t.data());
        }
        Ok(out)
    }

    /// Copies every parameter whose name and shape exist in `other`.
    /// Returns how many tensors were copied.
    pub fn copy_shared_from(&mut self, other: &Model) -> usize {
        let mut copied = 0;
        let layout = self.params.layout().clone();
        for e in layout.entries() {
            if let (Some(src), Some(oe)) = (other.params.get(&e.name), other.params.layout().entry(&e.name)) {
                if oe.shape == e.shape {
                    self.params.values[e.offset..e.offset + e.len()].copy_from_slice(src);
                    copied += 1;
                }
            }
        }
        copied
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FPCKPT\0\0";
const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 56;

/// Serializes a model in the portable checkpoint format (see `docs/formats.md`).
pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * model.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&c.architecture.code().to_le_bytes());
    for v in [c.in_channels, c.base_width, c.depth, c.num_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.init_seed.to_le_bytes());
    out.extend_from_slice(&c.background_prior.to_le_bytes());
    out.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for v in model.params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn model_from_checkpoint(bytes: &[u8], origin: &Path) -> Result<Model> {
    let bad = |reason: &str| Error::Format {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    if u32_at(8) != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {}", u32_at(8))));
    }
    let architecture = Architecture::from_code(u32_at(12)).ok_or_else(|| bad("unknown architecture code"))?;
    let config = NetConfig {
        architecture,
        in_channels: u32_at(16) as usize,
        base_width: u32_at(20) as usize,
        depth: u32_at(24) as usize,
        num_classes: u32_at(28) as usize,
        init_seed: u64_at(32),
        background_prior: f64::from_bits(u64_at(40)),
    };
    let count = u64_at(48) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * 8 {
        return Err(bad(&format!("expected {count} parameters, found {} bytes", body.len())));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Model::from_params(config, values)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(arch: Architecture) -> NetConfig {
        NetConfig {
            architecture: arch,
            init_seed: 11,
            ..NetConfig::default()
        }
    }

    fn ramp_input(b: usize, h: usize, w: usize) -> Tensor {
        let data = (0..b * h * w).map(|i| ((i * 7919) % 97) as f64 / 97.0).collect();
        Tensor::new(vec![b, 1, h, w], data).unwrap()
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = build_model(&cfg(Architecture::TinyUnet)).unwrap();
        let b = build_model(&cfg(Architecture::TinyUnet)).unwrap();
        assert_eq!(checkpoint_bytes(&a), checkpoint_bytes(&b));
        let mut other = cfg(Architecture::TinyUnet);
        other.init_seed = 12;
        assert_ne!(build_model(&other).unwrap().params, a.params);
    }

    #[test]
    fn parameter_count_matches_layer_list() {
        // (cout*cin*k*k + cout) per conv, widths 8/16/32:
        // enc0 80 + 584, enc1 1168 + 2320, mid 4640 + 9248,
        // dec1 (48→16) 6928 + 2320, dec0 (24→8) 1736 + 584, head 36.
        let m = build_model(&cfg(Architecture::TinyUnet)).unwrap();
        assert_eq!(m.param_count(), 29_644);
        // Gates add wg (16→4, 32→8), wx, psi per level:
        // level1: 8*32+8 + 8*16+8 + 8+1 = 409; level0: 4*16+4 + 4*8+4 + 4+1 = 109.
        let a = build_model(&cfg(Architecture::AttentionTinyUnet)).unwrap();
        assert_eq!(a.param_count(), 29_644 + 409 + 109);
    }

    #[test]
    fn layout_is_contiguous() {
        let m = build_model(&cfg(Architecture::AttentionTinyUnet)).unwrap();
        let mut next = 0;
        for e in m.params.layout().entries() {
            assert_eq!(e.offset, next);
            next += e.len();
        }
        assert_eq!(next, m.param_count());
        assert_eq!(m.params.layout().name_at(0), Some("enc0.conv1.weight"));
        assert_eq!(m.params.layout().name_at(m.param_count() - 1), Some("head.bias"));
        assert_eq!(m.params.layout().name_at(m.param_count()), None);
    }

    #[test]
    fn forward_shape_and_distribution() {
        let m = build_model(&cfg(Architecture::TinyUnet)).unwrap();
        let out = m.forward(&ramp_input(1, 16, 16)).unwrap();
        assert_eq!(out.shape(), &[1, 4, 16, 16]);
        for p in 0..256 {
            let s: f64 = (0..4).map(|c| out.data()[c * 256 + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_indivisible_extent() {
        let m = build_model(&cfg(Architecture::TinyUnet)).unwrap();
        assert!(matches!(m.forward(&ramp_input(1, 10, 16)), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_config_names_fields() {
        let bad = NetConfig {
            depth: 0,
            num_classes: 1,
            ..NetConfig::default()
        };
        let err = build_model(&bad).unwrap_err().to_string();
        assert!(err.contains("depth") && err.contains("num_classes"), "{err}");
        assert!(build_attention_variant(&NetConfig::default()).is_err());
    }

    #[test]
    fn batch_equals_stacked_singles() {
        for arch in [Architecture::TinyUnet, Architecture::AttentionTinyUnet] {
            let m = build_model(&cfg(arch)).unwrap();
            let batch = ramp_input(3, 8, 8);
            let out = m.forward(&batch).unwrap();
            let singles: Vec<Tensor> = (0..3)
                .map(|i| m.forward(&batch.batch_item(i).unwrap()).unwrap())
                .collect();
            assert_eq!(out, Tensor::stack(&singles).unwrap());
            assert_eq!(out, m.forward(&batch).unwrap());
        }
    }

    #[test]
    fn zero_head_gives_uniform_output() {
        let mut m = build_model(&cfg(Architecture::AttentionTinyUnet)).unwrap();
        m.params.get_mut("head.weight").unwrap().fill(0.0);
        m.params.get_mut("head.bias").unwrap().fill(0.0);
        let out = m.forward(&ramp_input(2, 8, 8)).unwrap();
        assert!(out.data().iter().all(|&p| p == 0.25));
    }

    fn force_gates(m: &mut Model, bias: f64) {
        for l in 0..m.config.depth {
            m.params.get_mut(&format!("att{l}.psi.weight")).unwrap().fill(0.0);
            m.params.get_mut(&format!("att{l}.psi.bias")).unwrap().fill(bias);
        }
    }

    #[test]
    fn open_gates_reduce_to_plain_unet() {
        let plain = build_model(&cfg(Architecture::TinyUnet)).unwrap();
        let mut att = build_model(&cfg(Architecture::AttentionTinyUnet)).unwrap();
        force_gates(&mut att, 40.0);
        // Same names, same init streams: shared weights already agree.
        assert_eq!(att.copy_shared_from(&plain), plain.params.layout().entries().len());
        let x = ramp_input(2, 16, 16);
        let (a, b) = (plain.forward(&x).unwrap(), att.forward(&x).unwrap());
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn closed_gates_remove_skip_contribution() {
        let mut att = build_model(&cfg(Architecture::AttentionTinyUnet)).unwrap();
        force_gates(&mut att, -40.0);
        let x = ramp_input(1, 16, 16);
        let base = att.forward(&x).unwrap();
        // Scramble the decoder weights that read the skip channels; with the
        // gates shut the output must not move.
        for l in 0..att.config.depth {
            let c = att.config.width(l);
            let cin = c + att.config.width(l + 1);
            let w = att.params.get_mut(&format!("dec{l}.conv1.weight")).unwrap();
            for (i, v) in w.iter_mut().enumerate() {
                let ci = (i / 9) % cin;
                if ci < c {
                    *v = ((i % 13) as f64 - 6.0) * 0.3;
                }
            }
        }
        let moved = att.forward(&x).unwrap();
        for (p, q) in base.data().iter().zip(moved.data()) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn gate_coefficients_in_open_interval() {
        let m = build_model(&cfg(Architecture::AttentionTinyUnet)).unwrap();
        let (_, gates) = m.forward_with_gates(&ramp_input(1, 16, 16)).unwrap();
        assert_eq!(gates.len(), 2);
        for g in gates {
            assert!(g.data().iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn checkpoint_round_trip_and_rejects_garbage() {
        let m = build_model(&cfg(Architecture::AttentionTinyUnet)).unwrap();
        let bytes = checkpoint_bytes(&m);
        assert_eq!(bytes.len(), HEADER_LEN + 8 * m.param_count());
        let back = model_from_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert!(model_from_checkpoint(&bytes[..100], Path::new("mem")).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(model_from_checkpoint(&wrong, Path::new("mem")).is_err());
    }
}
