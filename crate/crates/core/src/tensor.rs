//! Dense `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node whose
//! inputs all have smaller indices, so the tape order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Reductions always run left to right, which makes forward and backward
//! passes bit-deterministic for identical inputs.
//!
//! ```
//! use fedpart::tensor::{Graph, ParamId, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.param(ParamId(0), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! let sq = g.mul(w, w).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng;

/// Row-major dense tensor with up to four axes (batch, channel, height, width).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::Shape(format!(
                "tensors have 1 to 4 axes, got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(Error::Shape(format!(
                "expected a [B,C,H,W] tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Copies channels `start..start + count` out of a `[B,C,H,W]` tensor.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Tensor> {
        let [b, c, h, w] = self.dims4()?;
        if count == 0 || start + count > c {
            return Err(Error::Shape(format!(
                "channel slice {start}..{} out of range for C={c}",
                start + count
            )));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(b * count * hw);
        for bi in 0..b {
            let base = (bi * c + start) * hw;
            out.extend_from_slice(&self.data[base..base + count * hw]);
        }
        Tensor::new(vec![b, count, h, w], out)
    }

    /// Stacks equally shaped `[1,C,H,W]` tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Empty("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.dims4()?;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            if t.shape != [1, c, h, w] {
                return Err(Error::Shape(format!(
                    "stack expects [1,{c},{h},{w}], got {:?}",
                    t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        Tensor::new(vec![items.len(), c, h, w], data)
    }

    /// Returns batch element `i` as a `[1,C,H,W]` tensor.
    pub fn batch_item(&self, i: usize) -> Result<Tensor> {
        let [b, c, h, w] = self.dims4()?;
        if i >= b {
            return Err(Error::Shape(format!("batch index {i} out of range {b}")));
        }
        let n = c * h * w;
        Tensor::new(vec![1, c, h, w], self.data[i * n..(i + 1) * n].to_vec())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Identifier of a trainable parameter; indexes the model's parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d { input: Var, kernel: Var, bias: Var },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Upsample2(Var),
    Concat(Var, Var),
    Gate { input: Var, gate: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Sum(Var),
    SumSpatial(Var),
}

/// One recorded operation with its forward value.
#[derive(Debug)]
pub struct ComputationNode {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients keyed by parameter, one entry per parameter node on the tape.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<ComputationNode>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(ComputationNode {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant leaf (inputs, labels). Receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value, false)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(Op::Param(id), value, true)
    }

    /// Stride-1 cross-correlation with zero padding `(k-1)/2` plus bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let [b, cin, h, w] = self.value(input).dims4()?;
        let [cout, kcin, kh, kw] = self.value(kernel).dims4()?;
        if kcin != cin {
            return Err(Error::Shape(format!(
                "conv2d: input has {cin} channels, kernel expects {kcin}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d: kernel must be square with odd size, got {kh}x{kw}"
            )));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv2d: bias shape {:?} does not match {cout} output channels",
                self.value(bias).shape()
            )));
        }
        let k = kh;
        let geo = ConvGeometry { cin, h, w, k };
        let hw = h * w;
        let ckk = cin * k * k;
        let x = self.value(input).data();
        let kd = self.value(kernel).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; b * cout * hw];
        let mut cols = vec![0.0; if k == 1 { 0 } else { ckk * hw }];
        for bi in 0..b {
            let xb = &x[bi * cin * hw..(bi + 1) * cin * hw];
            let colsb: &[f64] = if k == 1 {
                xb
            } else {
                geo.im2col(xb, &mut cols);
                &cols
            };
            let ob = &mut out[bi * cout * hw..(bi + 1) * cout * hw];
            for (co, row) in ob.chunks_exact_mut(hw).enumerate() {
                row.fill(bd[co]);
            }
            gemm(
                cout,
                ckk,
                hw,
                MatRef::row_major(kd, ckk),
                MatRef::row_major(colsb, hw),
                ob,
                1.0,
            );
        }
        let value = Tensor::new(vec![b, cout, h, w], out)?;
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            value,
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(Op::Relu(x), value, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| sigmoid(a)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(Op::Sigmoid(x), value, rg)
    }

    /// Per-pixel softmax over the channel axis of a `[B,C,H,W]` tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let [b, c, h, w] = v.dims4()?;
        if c < 2 {
            return Err(Error::Shape(format!("softmax over C={c} channels")));
        }
        let hw = h * w;
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            let base = bi * c * hw;
            for p in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for ci in 0..c {
                    m = m.max(src[base + ci * hw + p]);
                }
                let mut z = 0.0;
                for ci in 0..c {
                    let e = (src[base + ci * hw + p] - m).exp();
                    out[base + ci * hw + p] = e;
                    z += e;
                }
                for ci in 0..c {
                    out[base + ci * hw + p] /= z;
                }
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Softmax(x), value, rg))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let [b, c, h, w] = v.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool2 needs even spatial extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = v.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::MaxPool2 { input: x, argmax }, value, rg))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let [b, c, h, w] = v.dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let src = v.data();
        let mut out = vec![0.0; b * c * oh * ow];
        for plane in 0..b * c {
            for oy in 0..oh {
                let srow = &src[plane * h * w + (oy / 2) * w..][..w];
                let orow = &mut out[plane * oh * ow + oy * ow..][..ow];
                for (ox, o) in orow.iter_mut().enumerate() {
                    *o = srow[ox / 2];
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Upsample2(x), value, rg))
    }

    /// Concatenates along channels, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = self.value(a).dims4()?;
        let [bb, cb, hb, wb] = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat: [{ba},_,{ha},{wa}] vs [{bb},_,{hb},{wb}]"
            )));
        }
        let hw = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * hw);
        for bi in 0..ba {
            out.extend_from_slice(&da[bi * ca * hw..(bi + 1) * ca * hw]);
            out.extend_from_slice(&db[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let value = Tensor::new(vec![ba, ca + cb, ha, wa], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Concat(a, b), value, rg))
    }

    /// Multiplies every channel of `input` `[B,C,H,W]` by a `[B,1,H,W]` gate.
    pub fn gate(&mut self, input: Var, gate: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4()?;
        if self.value(gate).shape() != [b, 1, h, w] {
            return Err(Error::Shape(format!(
                "gate shape {:?} does not broadcast over [{b},{c},{h},{w}]",
                self.value(gate).shape()
            )));
        }
        let hw = h * w;
        let (x, g) = (self.value(input).data(), self.value(gate).data());
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            let gb = &g[bi * hw..(bi + 1) * hw];
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                for p in 0..hw {
                    out[base + p] = x[base + p] * gb[p];
                }
            }
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        let rg = self.rg(input) || self.rg(gate);
        Ok(self.push(Op::Gate { input, gate }, value, rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "{name}: shapes {:?} and {:?} differ",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a + s).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(Op::AddScalar(x), value, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * s).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(Op::Scale(x, s), value, rg)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().fold(0.0, |acc, &a| acc + a);
        let rg = self.rg(x);
        self.push(Op::Sum(x), Tensor::scalar(total), rg)
    }

    /// `[B,C,H,W]` → `[B,C]`, summing each spatial plane.
    pub fn sum_spatial(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let [b, c, h, w] = v.dims4()?;
        let data = v
            .data()
            .chunks_exact(h * w)
            .map(|plane| plane.iter().fold(0.0, |acc, &a| acc + a))
            .collect();
        let value = Tensor::new(vec![b, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::SumSpatial(x), value, rg))
    }

    /// Hash of the branch taken by every relu (sign of each input entry) and
    /// max-pool (argmax) on the tape. Within one branch the graph is smooth.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar root. Every parameter node on the tape gets
    /// an entry, zero-filled when the root does not depend on it.
    pub fn backward(&self, root: Var) -> Result<GradientMap> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut out = GradientMap::default();

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else {
                if let Op::Param(id) = node.op {
                    out.grads
                        .entry(id)
                        .or_insert_with(|| Tensor::zeros(node.value.shape()).expect("valid"));
                }
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, &mut out)?;
        }
        // Parameters recorded after the root cannot influence it.
        for node in &self.nodes[root.0 + 1..] {
            if let Op::Param(id) = node.op {
                out.grads
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()).expect("valid"));
            }
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &ComputationNode,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut GradientMap,
    ) -> Result<()> {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                let t = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                match out.grads.get_mut(id) {
                    Some(existing) => {
                        for (e, v) in existing.data_mut().iter_mut().zip(t.data()) {
                            *e += v;
                        }
                    }
                    None => {
                        out.grads.insert(*id, t);
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => self.conv2d_backward(*input, *kernel, *bias, g, grads)?,
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for ((di, &gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *di += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, |d| {
                    for ((di, &gi), &yi) in d.iter_mut().zip(g).zip(y) {
                        *di += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Softmax(x) => {
                let [b, c, h, w] = node.value.dims4()?;
                let hw = h * w;
                let y = node.value.data();
                self.accumulate(grads, *x, |d| {
                    for bi in 0..b {
                        let base = bi * c * hw;
                        for p in 0..hw {
                            let mut dot = 0.0;
                            for ci in 0..c {
                                let idx = base + ci * hw + p;
                                dot += y[idx] * g[idx];
                            }
                            for ci in 0..c {
                                let idx = base + ci * hw + p;
                                d[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaxPool2 { input, argmax } => {
                self.accumulate(grads, *input, |d| {
                    for (&src, &gi) in argmax.iter().zip(g) {
                        d[src] += gi;
                    }
                });
            }
            Op::Upsample2(x) => {
                let [b, c, h, w] = self.value(*x).dims4()?;
                let ow = 2 * w;
                self.accumulate(grads, *x, |d| {
                    for plane in 0..b * c {
                        for oy in 0..2 * h {
                            let grow = &g[plane * 4 * h * w + oy * ow..][..ow];
                            let drow = &mut d[plane * h * w + (oy / 2) * w..][..w];
                            for (ox, &gi) in grow.iter().enumerate() {
                                drow[ox / 2] += gi;
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let [bsz, ca, h, w] = self.value(*a).dims4()?;
                let cb = self.value(*b).dims4()?[1];
                let hw = h * w;
                self.accumulate(grads, *a, |d| {
                    for bi in 0..bsz {
                        let src = &g[bi * (ca + cb) * hw..][..ca * hw];
                        for (di, &gi) in d[bi * ca * hw..][..ca * hw].iter_mut().zip(src) {
                            *di += gi;
                        }
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for bi in 0..bsz {
                        let src = &g[(bi * (ca + cb) + ca) * hw..][..cb * hw];
                        for (di, &gi) in d[bi * cb * hw..][..cb * hw].iter_mut().zip(src) {
                            *di += gi;
                        }
                    }
                });
            }
            Op::Gate { input, gate } => {
                let [b, c, h, w] = self.value(*input).dims4()?;
                let hw = h * w;
                let (x, gt) = (self.value(*input).data(), self.value(*gate).data());
                self.accumulate(grads, *input, |d| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            for p in 0..hw {
                                d[base + p] += g[base + p] * gt[bi * hw + p];
                            }
                        }
                    }
                });
                self.accumulate(grads, *gate, |d| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            for p in 0..hw {
                                d[bi * hw + p] += g[base + p] * x[base + p];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| {
                    for (di, &gi) in d.iter_mut().zip(g) {
                        *di -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((di, &gi), &bi) in d.iter_mut().zip(g).zip(vb) {
                        *di += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((di, &gi), &ai) in d.iter_mut().zip(g).zip(va) {
                        *di += gi * ai;
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((di, &gi), &bi) in d.iter_mut().zip(g).zip(vb) {
                        *di += gi / bi;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for (((di, &gi), &ai), &bi) in d.iter_mut().zip(g).zip(va).zip(vb) {
                        *di -= gi * ai / (bi * bi);
                    }
                });
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, |d| add_into(d, g)),
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |d| {
                    for (di, &gi) in d.iter_mut().zip(g) {
                        *di += gi * s;
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(grads, *x, |d| {
                    for di in d.iter_mut() {
                        *di += g0;
                    }
                });
            }
            Op::SumSpatial(x) => {
                let [_, _, h, w] = self.value(*x).dims4()?;
                self.accumulate(grads, *x, |d| {
                    for (plane, &gi) in d.chunks_exact_mut(h * w).zip(g) {
                        for di in plane {
                            *di += gi;
                        }
                    }
                });
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
        f(slot);
    }

    fn conv2d_backward(
        &self,
        input: Var,
        kernel: Var,
        bias: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let [b, cin, h, w] = self.value(input).dims4()?;
        let [cout, _, k, _] = self.value(kernel).dims4()?;
        let geo = ConvGeometry { cin, h, w, k };
        let hw = h * w;
        let ckk = cin * k * k;
        let x = self.value(input).data();
        let kd = self.value(kernel).data();

        self.accumulate(grads, bias, |d| {
            for bi in 0..b {
                for (co, dc) in d.iter_mut().enumerate() {
                    let row = &g[(bi * cout + co) * hw..][..hw];
                    *dc += row.iter().fold(0.0, |acc, &v| acc + v);
                }
            }
        });

        let need_kernel = self.rg(kernel);
        let need_input = self.rg(input);
        if !need_kernel && !need_input {
            return Ok(());
        }
        let mut cols = vec![0.0; if k == 1 { 0 } else { ckk * hw }];
        let mut dcols = vec![0.0; if need_input && k != 1 { ckk * hw } else { 0 }];
        let mut dkernel = need_kernel.then(|| vec![0.0; cout * ckk]);
        let mut dinput = need_input.then(|| vec![0.0; b * cin * hw]);
        for bi in 0..b {
            let gb = &g[bi * cout * hw..(bi + 1) * cout * hw];
            if let Some(dk) = dkernel.as_mut() {
                let xb = &x[bi * cin * hw..(bi + 1) * cin * hw];
                let colsb: &[f64] = if k == 1 {
                    xb
                } else {
                    geo.im2col(xb, &mut cols);
                    &cols
                };
                // dK += dOut · colsᵀ
                gemm(
                    cout,
                    hw,
                    ckk,
                    MatRef::row_major(gb, hw),
                    MatRef::transposed(colsb, hw),
                    dk,
                    1.0,
                );
            }
            if let Some(dx) = dinput.as_mut() {
                let dxb = &mut dx[bi * cin * hw..(bi + 1) * cin * hw];
                // dcols = Kᵀ · dOut
                if k == 1 {
                    gemm(
                        ckk,
                        cout,
                        hw,
                        MatRef::transposed(kd, ckk),
                        MatRef::row_major(gb, hw),
                        dxb,
                        0.0,
                    );
                } else {
                    gemm(
                        ckk,
                        cout,
                        hw,
                        MatRef::transposed(kd, ckk),
                        MatRef::row_major(gb, hw),
                        &mut dcols,
                        0.0,
                    );
                    geo.col2im_add(&dcols, dxb);
                }
            }
        }
        if let Some(dk) = dkernel {
            self.accumulate(grads, kernel, |d| add_into(d, &dk));
        }
        if let Some(dx) = dinput {
            self.accumulate(grads, input, |d| add_into(d, &dx));
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeometry {
    /// Valid output columns `x` for kernel column offset `kx`.
    fn x_range(&self, kx: usize) -> (usize, usize) {
        let pad = self.k / 2;
        let lo = pad.saturating_sub(kx);
        let hi = (self.w + pad).saturating_sub(kx).min(self.w);
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (h, w, k) = (self.h, self.w, self.k);
        let pad = k / 2;
        let hw = h * w;
        for c in 0..self.cin {
            let plane = &x[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                    let (lo, hi) = self.x_range(kx);
                    for y in 0..h {
                        let dst = &mut row[y * w..(y + 1) * w];
                        let sy = (y + ky) as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        let shift = lo + kx - pad;
                        dst[lo..hi].copy_from_slice(&src[shift..shift + (hi - lo)]);
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let (h, w, k) = (self.h, self.w, self.k);
        let pad = k / 2;
        let hw = h * w;
        for c in 0..self.cin {
            let plane = &mut dx[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                    let (lo, hi) = self.x_range(kx);
                    for y in 0..h {
                        let sy = (y + ky) as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &row[y * w + lo..y * w + hi];
                        let shift = lo + kx - pad;
                        let dst = &mut plane[sy as usize * w + shift..][..hi - lo];
                        add_into(dst, src);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
struct MatRef<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

impl<'a> MatRef<'a> {
    /// Row-major matrix with `cols` columns.
    fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix that has `cols` columns.
    fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c (m×n, row-major) = a (m×k) · b (k×n) + beta · c`.
fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, c: &mut [f64], beta: f64) {
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every index reachable through the given
    // dimensions and strides, checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    /// Worst relative error over the accepted probes.
    pub worst: f64,
    pub probed: usize,
    /// Probes dropped because `w ± eps` took a different piecewise branch.
    pub resampled: usize,
}

/// Worst relative error between an analytic gradient and central finite
/// differences `(f(w+εe) − f(w−εe)) / 2ε` on `probes` coordinates drawn from a
/// seeded generator. The denominator is `max(|analytic|, |numeric|, 1e-6)`;
/// below that the difference quotient is dominated by roundoff in the loss.
pub fn finite_diff_check(
    mut objective: impl FnMut(&[f64]) -> Result<f64>,
    analytic: &[f64],
    w: &[f64],
    probes: usize,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    let report = finite_diff_check_branches(|p| Ok((objective(p)?, 0)), analytic, w, probes, eps, seed)?;
    Ok(report.worst)
}

/// As [`finite_diff_check`], for piecewise-smooth objectives that also return
/// a branch signature (see [`Graph::branch_signature`]). A probe whose `+ε` or
/// `−ε` evaluation lands on a different branch than `w` straddles a kink; it is
/// skipped and the next coordinate from the same seeded order is tried.
pub fn finite_diff_check_branches(
    mut objective: impl FnMut(&[f64]) -> Result<(f64, u64)>,
    analytic: &[f64],
    w: &[f64],
    probes: usize,
    eps: f64,
    seed: u64,
) -> Result<FdReport> {
    if !(eps > 0.0) {
        return Err(Error::field("eps", "must be positive"));
    }
    if analytic.len() != w.len() {
        return Err(Error::LayoutMismatch(format!(
            "gradient has {} entries, point has {}",
            analytic.len(),
            w.len()
        )));
    }
    let mut report = FdReport {
        worst: 0.0,
        probed: 0,
        resampled: 0,
    };
    if w.is_empty() {
        return Ok(report);
    }
    let mut rng = rng::stream(seed, rng::domain::FUZZ, &[w.len() as u64]);
    let order = index::sample(&mut rng, w.len(), w.len()).into_vec();
    let (_, base) = objective(w)?;
    let mut point = w.to_vec();
    for i in order {
        if report.probed == probes {
            break;
        }
        point[i] = w[i] + eps;
        let (plus, sp) = objective(&point)?;
        point[i] = w[i] - eps;
        let (minus, sm) = objective(&point)?;
        point[i] = w[i];
        if sp != base || sm != base {
            report.resampled += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        report.worst = report.worst.max((analytic[i] - numeric).abs() / denom);
        report.probed += 1;
    }
    Ok(report)
}
