use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::argmax;
use super::{softmax_into, Tensor, LOG_FLOOR};
use crate::error::{contract, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Identifier of a trainable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    KlToTarget { pred: Var, target: Tensor },
    RowMax(Var),
    HingeBelow { x: Var, threshold: f64 },
    HingeAbove { x: Var, threshold: f64 },
    MaskedMean { x: Var, mask: Vec<bool> },
    Sum(Var),
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, padding: usize },
    GlobalAvgPool(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Per-row argmax for `RowMax`.
    argmax: Vec<usize>,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Values are computed eagerly. Each parameter is registered once and may be
/// used any number of times; its gradient sums every use.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to every registered parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            argmax: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable parameter; registering the same id again returns
    /// the existing handle.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    /// A value treated as data: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(contract(format!(
                "{what}: shape {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let src = self.value(a);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|x| x * factor).collect(),
        )
        .expect("same shape");
        self.push(value, Op::Scale(a, factor))
    }

    /// `[b, m] x [m, n] -> [b, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(contract(format!("matmul: {xs:?} x {ws:?}")));
        }
        let (b, m, n) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; b * n];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        for r in 0..b {
            let orow = &mut out[r * n..(r + 1) * n];
            for k in 0..m {
                let xv = xd[r * m + k];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wd[k * n..(k + 1) * n];
                for (o, wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let value = Tensor::new(vec![b, n], out)?;
        Ok(self.push(value, Op::MatMul(x, w)))
    }

    /// Adds a bias vector to every row: `[b, n] + [n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x).shape(), self.value(bias).shape());
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(contract(format!("add_bias: {xs:?} + {bs:?}")));
        }
        let n = bs[0];
        let bd = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % n])
            .collect();
        let value = Tensor::new(xs.to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|v| v.max(0.0)).collect(),
        )
        .expect("same shape");
        self.push(value, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|v| v.tanh()).collect(),
        )
        .expect("same shape");
        self.push(value, Op::Tanh(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let c = *src
            .shape()
            .last()
            .ok_or_else(|| contract("softmax of a scalar"))?;
        if c < 2 {
            return Err(contract("softmax needs at least 2 classes"));
        }
        src.check_finite("softmax input")?;
        let mut out = vec![0.0; src.len()];
        for (o, z) in out.chunks_mut(c).zip(src.data().chunks(c)) {
            softmax_into(z, o);
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(x)))
    }

    /// Per-row `KL(target || pred)` over the last axis; `target` is data.
    pub fn kl_to_target(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let ps = self.value(pred).shape();
        if ps != target.shape() || ps.is_empty() {
            return Err(contract(format!(
                "kl_to_target: prediction {ps:?} vs target {:?}",
                target.shape()
            )));
        }
        let c = *ps.last().unwrap();
        let out_shape = ps[..ps.len() - 1].to_vec();
        let out: Vec<f64> = target
            .data()
            .chunks(c)
            .zip(self.value(pred).data().chunks(c))
            .map(|(t, p)| super::kl_terms(t, p))
            .collect();
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::KlToTarget { pred, target }))
    }

    /// Maximum over the last axis; the gradient flows to the first maximal entry.
    pub fn row_max(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let c = *src
            .shape()
            .last()
            .ok_or_else(|| contract("row_max of a scalar"))?;
        let mut vals = Vec::with_capacity(src.len() / c);
        let mut idx = Vec::with_capacity(src.len() / c);
        for row in src.data().chunks(c) {
            let j = argmax(row);
            idx.push(j);
            vals.push(row[j]);
        }
        let value = Tensor::new(src.shape()[..src.shape().len() - 1].to_vec(), vals)?;
        let v = self.push(value, Op::RowMax(x));
        self.nodes[v.0].argmax = idx;
        Ok(v)
    }

    /// Elementwise `max(0, threshold - x)`; zero subgradient at the kink.
    pub fn hinge_below(&mut self, x: Var, threshold: f64) -> Var {
        let src = self.value(x);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|v| (threshold - v).max(0.0)).collect(),
        )
        .expect("same shape");
        self.push(value, Op::HingeBelow { x, threshold })
    }

    /// Elementwise `max(0, x - threshold)`; zero subgradient at the kink.
    pub fn hinge_above(&mut self, x: Var, threshold: f64) -> Var {
        let src = self.value(x);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|v| (v - threshold).max(0.0)).collect(),
        )
        .expect("same shape");
        self.push(value, Op::HingeAbove { x, threshold })
    }

    /// Mean of the selected entries of a vector; zero when nothing is selected.
    pub fn masked_mean(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let src = self.value(x);
        if mask.len() != src.len() {
            return Err(contract(format!(
                "masked_mean: mask of {} for {} values",
                mask.len(),
                src.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let total: f64 = src
            .data()
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum();
        let mean = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(Tensor::scalar(mean), Op::MaskedMean { x, mask }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums a list of scalars; an empty list yields the constant zero.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let Some(&first) = iter.next() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        let mut acc = first;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// 2-D convolution: input `[b, ci, h, w]`, weight `[co, ci, k, k]`, bias `[co]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (is, ws, bs) = (
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        );
        if is.len() != 4 || ws.len() != 4 || bs.len() != 1 || is[1] != ws[1] || ws[0] != bs[0] {
            return Err(contract(format!("conv2d: input {is:?}, weight {ws:?}, bias {bs:?}")));
        }
        if ws[2] != ws[3] || stride == 0 || is[2] + 2 * padding < ws[2] || is[3] + 2 * padding < ws[3] {
            return Err(contract(format!("conv2d: kernel {ws:?} does not fit input {is:?}")));
        }
        let geo = ConvGeometry::new(is, ws, stride, padding);
        let mut out = vec![0.0; geo.b * geo.co * geo.ho * geo.wo];
        let (xd, wd, bd) = (
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        geo.for_each_tap(|o, xi, wi| out[o] += xd[xi] * wd[wi]);
        for (o, v) in out.iter_mut().enumerate() {
            *v += bd[(o / (geo.ho * geo.wo)) % geo.co];
        }
        let value = Tensor::new(vec![geo.b, geo.co, geo.ho, geo.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// `[b, c, h, w] -> [b, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 4 {
            return Err(contract(format!("global_avg_pool expects rank 4, got {s:?}")));
        }
        let (b, c, area) = (s[0], s[1], s[2] * s[3]);
        let out = self
            .value(x)
            .data()
            .chunks(area)
            .map(|plane| plane.iter().sum::<f64>() / area as f64)
            .collect();
        let value = Tensor::new(vec![b, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Reverse-mode gradient of the scalar `loss` w.r.t. every registered parameter.
    ///
    /// Registered parameters that do not influence `loss` get a zero gradient.
    pub fn grad(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "gradient requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let by_param = self
            .params
            .iter()
            .map(|(&pid, &v)| {
                let shape = self.value(v).shape().to_vec();
                let data = grads
                    .get(v.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![0.0; self.value(v).len()]);
                (pid, Tensor::new(shape, data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { by_param })
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(bv) {
                        *s += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(av) {
                        *s += g * x;
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * k)),
            Op::MatMul(x, w) => {
                let (xs, ws) = (self.value(*x).shape(), self.value(*w).shape());
                let (b, m, n) = (xs[0], xs[1], ws[1]);
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                acc(*x, &mut |s| {
                    for r in 0..b {
                        let grow = &g[r * n..(r + 1) * n];
                        for k in 0..m {
                            let wrow = &wd[k * n..(k + 1) * n];
                            s[r * m + k] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                acc(*w, &mut |s| {
                    for r in 0..b {
                        let grow = &g[r * n..(r + 1) * n];
                        for k in 0..m {
                            let xv = xd[r * m + k];
                            if xv == 0.0 {
                                continue;
                            }
                            for (sv, gv) in s[k * n..(k + 1) * n].iter_mut().zip(grow) {
                                *sv += xv * gv;
                            }
                        }
                    }
                });
            }
            Op::AddBias(x, bias) => {
                let n = self.value(*bias).len();
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*bias, &mut |s| {
                    for row in g.chunks(n) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |s| {
                    for ((s, g), v) in s.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *s += g;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = node.value.data();
                acc(*x, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(yv) {
                        *s += g * (1.0 - y * y);
                    }
                });
            }
            Op::Softmax(x) => {
                let c = *node.value.shape().last().unwrap();
                let pv = node.value.data();
                acc(*x, &mut |s| {
                    for ((srow, grow), prow) in s.chunks_mut(c).zip(g.chunks(c)).zip(pv.chunks(c)) {
                        let dot: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for ((s, gv), p) in srow.iter_mut().zip(grow).zip(prow) {
                            *s += p * (gv - dot);
                        }
                    }
                });
            }
            Op::KlToTarget { pred, target } => {
                let pv = self.value(*pred).data();
                let c = *target.shape().last().unwrap();
                acc(*pred, &mut |s| {
                    for (r, &gr) in g.iter().enumerate() {
                        for j in r * c..(r + 1) * c {
                            let t = target.data()[j];
                            if t > 0.0 && pv[j] > LOG_FLOOR {
                                s[j] -= gr * t / pv[j];
                            }
                        }
                    }
                });
            }
            Op::RowMax(x) => {
                let c = *self.value(*x).shape().last().unwrap();
                acc(*x, &mut |s| {
                    for (r, (&j, &gr)) in node.argmax.iter().zip(g).enumerate() {
                        s[r * c + j] += gr;
                    }
                });
            }
            Op::HingeBelow { x, threshold } => {
                let xv = self.value(*x).data();
                acc(*x, &mut |s| {
                    for ((s, g), v) in s.iter_mut().zip(g).zip(xv) {
                        if threshold - v > 0.0 {
                            *s -= g;
                        }
                    }
                });
            }
            Op::HingeAbove { x, threshold } => {
                let xv = self.value(*x).data();
                acc(*x, &mut |s| {
                    for ((s, g), v) in s.iter_mut().zip(g).zip(xv) {
                        if v - threshold > 0.0 {
                            *s += g;
                        }
                    }
                });
            }
            Op::MaskedMean { x, mask } => {
                let count = mask.iter().filter(|&&m| m).count();
                if count > 0 {
                    let share = g[0] / count as f64;
                    acc(*x, &mut |s| {
                        for (s, &m) in s.iter_mut().zip(mask) {
                            if m {
                                *s += share;
                            }
                        }
                    });
                }
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let geo = ConvGeometry::new(
                    self.value(*input).shape(),
                    self.value(*weight).shape(),
                    *stride,
                    *padding,
                );
                let (xd, wd) = (self.value(*input).data(), self.value(*weight).data());
                acc(*input, &mut |s| geo.for_each_tap(|o, xi, wi| s[xi] += g[o] * wd[wi]));
                acc(*weight, &mut |s| geo.for_each_tap(|o, xi, wi| s[wi] += g[o] * xd[xi]));
                acc(*bias, &mut |s| {
                    for (o, gv) in g.iter().enumerate() {
                        s[(o / (geo.ho * geo.wo)) % geo.co] += gv;
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let sh = self.value(*x).shape();
                let area = sh[2] * sh[3];
                acc(*x, &mut |s| {
                    for (plane, gv) in s.chunks_mut(area).zip(g) {
                        plane.iter_mut().for_each(|v| *v += gv / area as f64);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Self {
        let (b, ci, h, w) = (input[0], input[1], input[2], input[3]);
        let (co, k) = (weight[0], weight[2]);
        Self {
            b,
            ci,
            h,
            w,
            co,
            k,
            stride,
            padding,
            ho: (h + 2 * padding - k) / stride + 1,
            wo: (w + 2 * padding - k) / stride + 1,
        }
    }

    /// Visits every (output, input, weight) index triple of the convolution.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for n in 0..self.b {
            for oc in 0..self.co {
                for oy in 0..self.ho {
                    for ox in 0..self.wo {
                        let o = ((n * self.co + oc) * self.ho + oy) * self.wo + ox;
                        for ic in 0..self.ci {
                            for ky in 0..self.k {
                                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                                if iy < 0 || iy as usize >= self.h {
                                    continue;
                                }
                                for kx in 0..self.k {
                                    let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                    if ix < 0 || ix as usize >= self.w {
                                        continue;
                                    }
                                    let xi = ((n * self.ci + ic) * self.h + iy as usize) * self.w
                                        + ix as usize;
                                    let wi = ((oc * self.ci + ic) * self.k + ky) * self.k + kx;
                                    f(o, xi, wi);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let p = tape.param(ParamId(0), &Tensor::scalar(2.0));
        let q = tape.param(ParamId(1), &Tensor::scalar(3.0));
        let loss = tape.mul(p, q).unwrap();
        let g = tape.grad(loss).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[3.0]);
        assert_eq!(g.get(ParamId(1)).unwrap().data(), &[2.0]);
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(ParamId(0), &Tensor::scalar(2.0));
        let _r = tape.param(ParamId(7), &Tensor::from_slice(&[1.0, 2.0]));
        let loss = tape.mul(p, p).unwrap();
        let g = tape.grad(loss).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[4.0]);
        assert_eq!(g.get(ParamId(7)).unwrap().data(), &[0.0, 0.0]);
        assert!(g.get(ParamId(9)).is_none());
    }

    #[test]
    fn repeated_registration_accumulates() {
        let mut tape = Tape::new();
        let a = tape.param(ParamId(0), &Tensor::scalar(5.0));
        let b = tape.param(ParamId(0), &Tensor::scalar(5.0));
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let g = tape.grad(s).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(ParamId(0), &Tensor::from_slice(&[1.0, 2.0]));
        assert!(tape.grad(p).is_err());
    }

    #[test]
    fn hinge_kink_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), &Tensor::from_slice(&[0.95, 0.90]));
        let h = tape.hinge_below(x, 0.95);
        let s = tape.sum(h);
        assert!((tape.value(s).item().unwrap() - 0.05).abs() < 1e-15);
        let g = tape.grad(s).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[0.0, -1.0]);
    }

    #[test]
    fn empty_mask_mean_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), &Tensor::from_slice(&[0.3, 0.4]));
        let m = tape.masked_mean(x, vec![false, false]).unwrap();
        assert_eq!(tape.value(m).item().unwrap(), 0.0);
        let g = tape.grad(m).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[0.0, 0.0]);
    }

    fn finite_difference_check(build: impl Fn(&mut Tape, &[Tensor]) -> Var, params: Vec<Tensor>) {
        let mut tape = Tape::new();
        let loss = build(&mut tape, &params);
        let g = tape.grad(loss).unwrap();
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            for j in 0..p.len() {
                let mut plus = params.clone();
                plus[pi].data_mut()[j] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[j] -= h;
                let mut t1 = Tape::new();
                let l1 = build(&mut t1, &plus);
                let mut t2 = Tape::new();
                let l2 = build(&mut t2, &minus);
                let fd = (t1.value(l1).item().unwrap() - t2.value(l2).item().unwrap()) / (2.0 * h);
                let an = g.get(ParamId(pi)).unwrap().data()[j];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-5, "param {pi}[{j}]: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn conv_and_pool_gradients() {
        let input: Vec<f64> = (0..2 * 2 * 5 * 5).map(|i| ((i * 37 % 17) as f64 - 8.0) / 9.0).collect();
        let weight: Vec<f64> = (0..3 * 2 * 3 * 3).map(|i| ((i * 13 % 11) as f64 - 5.0) / 7.0).collect();
        let params = vec![
            Tensor::new(vec![2, 2, 5, 5], input).unwrap(),
            Tensor::new(vec![3, 2, 3, 3], weight).unwrap(),
            Tensor::from_slice(&[0.1, -0.2, 0.3]),
        ];
        finite_difference_check(
            |t, p| {
                let x = t.param(ParamId(0), &p[0]);
                let w = t.param(ParamId(1), &p[1]);
                let b = t.param(ParamId(2), &p[2]);
                let y = t.conv2d(x, w, b, 2, 1).unwrap();
                let y = t.tanh(y);
                let z = t.global_avg_pool(y).unwrap();
                let z = t.mul(z, z).unwrap();
                t.sum(z)
            },
            params,
        );
    }

    #[test]
    fn dense_softmax_kl_gradients() {
        let params = vec![
            Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 - 5.0) / 4.0).collect()).unwrap(),
            Tensor::new(vec![4, 3], (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) / 3.0).collect()).unwrap(),
            Tensor::from_slice(&[0.05, -0.1, 0.2]),
        ];
        let target = Tensor::new(vec![3, 3], vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0, 0.1, 0.8, 0.1]).unwrap();
        finite_difference_check(
            move |t, p| {
                let x = t.param(ParamId(0), &p[0]);
                let w = t.param(ParamId(1), &p[1]);
                let b = t.param(ParamId(2), &p[2]);
                let h = t.matmul(x, w).unwrap();
                let h = t.add_bias(h, b).unwrap();
                let pr = t.softmax(h).unwrap();
                let kl = t.kl_to_target(pr, target.clone()).unwrap();
                let conf = t.row_max(pr).unwrap();
                let hb = t.hinge_below(conf, 0.9);
                let mm = t.masked_mean(hb, vec![true, false, true]).unwrap();
                let s = t.mean(kl);
                t.add(s, mm).unwrap()
            },
            params,
        );
    }
}
