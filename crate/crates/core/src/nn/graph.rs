//! Define-by-run computation graph with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and backward is a single reverse sweep.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use super::array::{Array4, Real};
use super::kernels;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, fixed-shape trainable tensors in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array4<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: vec![], values: vec![], index: HashMap::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array4<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::ShapeMismatch(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Array4<T> {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Replaces the values of `id`; the shape may not change.
    pub fn set(&mut self, id: ParamId, value: Array4<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [T] {
        self.values[id.0].data_mut()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array4<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(Array4::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Array4<T>> {
        self.values.iter().map(|v| Array4::zeros(v.shape())).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Array4::cast).collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    MaxPool2 { x: NodeId, argmax: Vec<u32> },
    Upsample2(NodeId),
    Concat { xs: Vec<NodeId>, axis: usize },
    BandGap { x: NodeId, bands: usize },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Conv1d { x: NodeId, w: NodeId, b: NodeId },
    Reshape(NodeId),
    Slice { x: NodeId, start: usize },
    Mse { pred: NodeId, target: NodeId, mask: Option<Array4<T>>, count: usize },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Array4<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward evaluation. Build it, read values, then call [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: true }
    }

    /// Disables the per-op NaN/Inf scan.
    pub fn without_finite_checks(mut self) -> Self {
        self.check_finite = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array4<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> [usize; 4] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Array4<T>, op: Op<T>, name: &'static str) -> Result<NodeId> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => self.inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<NodeId> {
        match op {
            Op::Input | Op::Param(_) => vec![],
            Op::Conv2d { x, w, b } | Op::Dense { x, w, b } | Op::Conv1d { x, w, b } => vec![*x, *w, *b],
            Op::Relu(x) | Op::Upsample2(x) | Op::Reshape(x) => vec![*x],
            Op::MaxPool2 { x, .. } | Op::BandGap { x, .. } | Op::Slice { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Mse { pred, target, .. } => vec![*pred, *target],
        }
    }

    /// Hash of every ReLU sign and max-pool winner in the graph. Two
    /// evaluations with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => self.value(*x).data().iter().for_each(|v| (*v > T::zero()).hash(&mut h)),
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// A constant leaf (no gradient).
    pub fn input(&mut self, value: Array4<T>) -> NodeId {
        let requires_grad = false;
        self.nodes.push(Node { value, op: Op::Input, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A trainable leaf holding the current value of `id`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        self.nodes.push(Node { value: store.get(id).clone(), op: Op::Param(id), requires_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    /// 3×3 cross-correlation, stride 1, zero padding 1. `w` is
    /// `(c_out, c_in, 3, 3)` and `b` holds `c_out` values.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b))?;
        self.push(out, Op::Conv2d { x, w, b }, "conv2d")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
        self.push(out, Op::Relu(x), "relu")
    }

    /// Max over disjoint 2×2 blocks.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (out, argmax) = kernels::maxpool2_forward(self.value(x))?;
        self.push(out, Op::MaxPool2 { x, argmax }, "maxpool2")
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::upsample2_forward(self.value(x));
        self.push(out, Op::Upsample2(x), "upsample2")
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.concat(xs, 1)
    }

    /// Concatenation along `axis` (0..4); all other dims must agree.
    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let values: Vec<&Array4<T>> = xs.iter().map(|&i| self.value(i)).collect();
        let out = kernels::concat_forward(&values, axis)?;
        self.push(out, Op::Concat { xs: xs.to_vec(), axis }, "concat")
    }

    /// Mean of each of `bands` contiguous row bands of a single-channel image.
    pub fn band_gap(&mut self, x: NodeId, bands: usize) -> Result<NodeId> {
        let out = kernels::band_gap_forward(self.value(x), bands)?;
        self.push(out, Op::BandGap { x, bands }, "band_gap")
    }

    /// `y = W x + b` per sample; `w` has shape `(1, 1, out, in)`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = kernels::dense_forward(self.value(x), self.value(w), self.value(b))?;
        self.push(out, Op::Dense { x, w, b }, "dense")
    }

    /// Length-preserving 1-D convolution (kernel 3, padding 1) over
    /// `(n, c_in, 1, len)` with `w` of shape `(c_out, c_in, 1, 3)`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = kernels::conv1d_forward(self.value(x), self.value(w), self.value(b))?;
        self.push(out, Op::Conv1d { x, w, b }, "conv1d")
    }

    pub fn reshape(&mut self, x: NodeId, shape: [usize; 4]) -> Result<NodeId> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// Elements `start..start+len` of each sample's flattened values, as `(n, 1, 1, len)`.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x);
        let n = v.shape()[0];
        let per = v.len() / n.max(1);
        if start + len > per {
            return Err(Error::ShapeMismatch(format!("slice {start}..{} of {per}", start + len)));
        }
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&v.data()[i * per + start..i * per + start + len]);
        }
        let out = Array4::from_vec([n, 1, 1, len], out)?;
        self.push(out, Op::Slice { x, start }, "slice")
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.mse_impl(pred, target, None)
    }

    /// Mean squared error over voxels where `mask` (shape `(n, 1, h, w)`) is
    /// non-zero, all channels included.
    pub fn masked_mse_loss(&mut self, pred: NodeId, target: NodeId, mask: Array4<T>) -> Result<NodeId> {
        self.mse_impl(pred, target, Some(mask))
    }

    fn mse_impl(&mut self, pred: NodeId, target: NodeId, mask: Option<Array4<T>>) -> Result<NodeId> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::ShapeMismatch(format!("mse {:?} vs {:?}", p.shape(), t.shape())));
        }
        let [n, c, h, w] = p.shape();
        let mut sum = 0.0f64;
        let count = match &mask {
            None => {
                for (a, b) in p.data().iter().zip(t.data()) {
                    sum += (a.as_f64() - b.as_f64()).powi(2);
                }
                p.len()
            }
            Some(m) => {
                if m.shape() != [n, 1, h, w] {
                    return Err(Error::ShapeMismatch(format!("mask {:?} for {:?}", m.shape(), p.shape())));
                }
                let hw = h * w;
                let mut count = 0;
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for k in 0..hw {
                            if m.data()[i * hw + k] != T::zero() {
                                sum += (p.data()[base + k].as_f64() - t.data()[base + k].as_f64()).powi(2);
                                count += 1;
                            }
                        }
                    }
                }
                count
            }
        };
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let out = Array4::scalar(T::from_f64(sum / count as f64));
        self.push(out, Op::Mse { pred, target, mask, count }, "mse_loss")
    }

    /// Reverse sweep from `loss` (seeded with ones).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Array4<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array4::filled(self.value(loss).shape(), T::one()));
        let mut params: Vec<(ParamId, Array4<T>)> = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let acc = |id: NodeId, d: Array4<T>, grads: &mut Vec<Option<Array4<T>>>| {
                if !self.nodes[id.0].requires_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(e) => e.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            let needs = |id: NodeId| self.nodes[id.0].requires_grad;
            match &node.op {
                Op::Input => {}
                Op::Param(p) => params.push((*p, g)),
                Op::Conv2d { x, w, b } => {
                    let (dx, dw, db) = kernels::conv2d_backward(self.value(*x), self.value(*w), &g, needs(*x));
                    if let Some(dx) = dx {
                        acc(*x, dx, &mut grads);
                    }
                    acc(*w, dw, &mut grads);
                    acc(*b, db.reshaped(self.shape(*b))?, &mut grads);
                }
                Op::Relu(x) => {
                    let mut d = g;
                    for (dv, xv) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if *xv <= T::zero() {
                            *dv = T::zero();
                        }
                    }
                    acc(*x, d, &mut grads);
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut d = Array4::zeros(self.shape(*x));
                    for (gv, &a) in g.data().iter().zip(argmax) {
                        let slot = &mut d.data_mut()[a as usize];
                        *slot = *slot + *gv;
                    }
                    acc(*x, d, &mut grads);
                }
                Op::Upsample2(x) => acc(*x, kernels::upsample2_backward(&g, self.shape(*x)), &mut grads),
                Op::Concat { xs, axis } => {
                    let shapes: Vec<[usize; 4]> = xs.iter().map(|i| self.shape(*i)).collect();
                    for (id, d) in xs.iter().zip(kernels::concat_backward(&g, &shapes, *axis)) {
                        acc(*id, d, &mut grads);
                    }
                }
                Op::BandGap { x, bands } => acc(*x, kernels::band_gap_backward(&g, self.shape(*x), *bands), &mut grads),
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) = kernels::dense_backward(self.value(*x), self.value(*w), &g);
                    acc(*x, dx, &mut grads);
                    acc(*w, dw, &mut grads);
                    acc(*b, db.reshaped(self.shape(*b))?, &mut grads);
                }
                Op::Conv1d { x, w, b } => {
                    let (dx, dw, db) = kernels::conv1d_backward(self.value(*x), self.value(*w), &g);
                    acc(*x, dx, &mut grads);
                    acc(*w, dw, &mut grads);
                    acc(*b, db.reshaped(self.shape(*b))?, &mut grads);
                }
                Op::Reshape(x) => acc(*x, g.reshaped(self.shape(*x))?, &mut grads),
                Op::Slice { x, start } => {
                    let shape = self.shape(*x);
                    let n = shape[0];
                    let per = self.value(*x).len() / n.max(1);
                    let len = g.shape()[3];
                    let mut d = Array4::zeros(shape);
                    for i in 0..n {
                        d.data_mut()[i * per + start..i * per + start + len]
                            .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                    }
                    acc(*x, d, &mut grads);
                }
                Op::Mse { pred, target, mask, count } => {
                    let (p, t) = (self.value(*pred), self.value(*target));
                    let scale = g.item() * T::from_f64(2.0 / *count as f64);
                    let mut d = Array4::zeros(p.shape());
                    let [n, c, h, w] = p.shape();
                    let hw = h * w;
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            for k in 0..hw {
                                let on = mask.as_ref().is_none_or(|m| m.data()[i * hw + k] != T::zero());
                                if on {
                                    d.data_mut()[base + k] = scale * (p.data()[base + k] - t.data()[base + k]);
                                }
                            }
                        }
                    }
                    if needs(*target) {
                        let mut neg = d.clone();
                        neg.scale(-T::one());
                        acc(*target, neg, &mut grads);
                    }
                    acc(*pred, d, &mut grads);
                }
            }
        }
        if params.is_empty() {
            return Err(Error::DisconnectedLoss);
        }
        Ok(Gradients { params })
    }
}

/// Parameter gradients from one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: Vec<(ParamId, Array4<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `id`, summed over every node that read it; `None` when the
    /// loss does not depend on it.
    pub fn get(&self, id: ParamId) -> Option<Array4<T>> {
        let mut out: Option<Array4<T>> = None;
        for (p, g) in &self.params {
            if *p == id {
                match &mut out {
                    Some(o) => o.add_assign(g),
                    None => out = Some(g.clone()),
                }
            }
        }
        out
    }

    /// Adds every parameter gradient into `store` (indexed like the `ParamStore`).
    pub fn accumulate_into(&self, store: &mut [Array4<T>]) {
        for (p, g) in &self.params {
            store[p.0].add_assign(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::gradcheck;

    fn rand(shape: [usize; 4], seed: u64, scale: f64) -> Array4<f64> {
        let n = shape.iter().product::<usize>();
        let d = (0..n).map(|i| scale * crate::rng::normal_pair(seed, 7, i as u64).0).collect();
        Array4::from_vec(shape, d).unwrap()
    }

    fn check<F>(ps: &ParamStore<f64>, build: F)
    where
        F: Fn(&ParamStore<f64>) -> Result<(Graph<f64>, NodeId)>,
    {
        let r = gradcheck(ps, 1e-6, 40, build).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn conv_relu_pool_upsample_concat() {
        let mut ps = ParamStore::new();
        let x = ps.add("x", rand([2, 2, 4, 4], 1, 1.0)).unwrap();
        let w = ps.add("w", rand([3, 2, 3, 3], 2, 0.5)).unwrap();
        let b = ps.add("b", rand([1, 1, 1, 3], 3, 0.1)).unwrap();
        let t = rand([2, 5, 4, 4], 4, 1.0);
        check(&ps, |ps| {
            let mut g = Graph::new();
            let (xn, wn, bn) = (g.param(ps, x), g.param(ps, w), g.param(ps, b));
            let c = g.conv2d(xn, wn, bn)?;
            let r = g.relu(c)?;
            let p = g.maxpool2(r)?;
            let u = g.upsample2(p)?;
            let cat = g.concat_channels(&[xn, u])?;
            let tn = g.input(t.clone());
            let l = g.mse_loss(cat, tn)?;
            Ok((g, l))
        });
    }

    #[test]
    fn band_gap_conv1d_dense_slice_reshape() {
        let mut ps = ParamStore::new();
        let x = ps.add("x", rand([2, 1, 12, 3], 5, 1.0)).unwrap();
        let w1 = ps.add("w1", rand([2, 1, 1, 3], 6, 0.5)).unwrap();
        let b1 = ps.add("b1", rand([1, 1, 1, 2], 7, 0.1)).unwrap();
        let w2 = ps.add("w2", rand([1, 1, 3, 8], 8, 0.5)).unwrap();
        let b2 = ps.add("b2", rand([1, 1, 1, 3], 9, 0.1)).unwrap();
        let mask = Array4::from_vec([2, 1, 1, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        check(&ps, |ps| {
            let mut g = Graph::new();
            let xn = g.param(ps, x);
            let bg = g.band_gap(xn, 4)?;
            let (w1n, b1n) = (g.param(ps, w1), g.param(ps, b1));
            let c = g.conv1d(bg, w1n, b1n)?;
            let f = g.reshape(c, [2, 1, 1, 8])?;
            let (w2n, b2n) = (g.param(ps, w2), g.param(ps, b2));
            let d = g.dense(f, w2n, b2n)?;
            let s = g.slice(d, 1, 2)?;
            let s = g.reshape(s, [2, 1, 1, 2])?;
            let t = g.input(Array4::filled([2, 1, 1, 2], 0.3));
            let l = g.masked_mse_loss(s, t, mask.clone())?;
            Ok((g, l))
        });
    }

    #[test]
    fn dynamic_kernel_from_node() {
        // kernel weights produced by a dense layer feed a conv
        let mut ps = ParamStore::new();
        let z = ps.add("z", rand([1, 1, 1, 4], 10, 1.0)).unwrap();
        let wd = ps.add("wd", rand([1, 1, 18, 4], 11, 0.5)).unwrap();
        let bd = ps.add("bd", rand([1, 1, 1, 18], 12, 0.1)).unwrap();
        let img = rand([1, 1, 5, 5], 13, 1.0);
        check(&ps, |ps| {
            let mut g = Graph::new();
            let zn = g.param(ps, z);
            let (a, b) = (g.param(ps, wd), g.param(ps, bd));
            let k = g.dense(zn, a, b)?;
            let kw = g.slice(k, 0, 9)?;
            let kw = g.reshape(kw, [1, 1, 3, 3])?;
            let kb = g.slice(k, 9, 1)?;
            let x = g.input(img.clone());
            let y = g.conv2d(x, kw, kb)?;
            let t = g.input(Array4::zeros([1, 1, 5, 5]));
            let l = g.mse_loss(y, t)?;
            Ok((g, l))
        });
    }

    #[test]
    fn unused_param_gets_no_gradient_and_disconnected_loss_errors() {
        let mut ps = ParamStore::<f64>::new();
        let a = ps.add("a", Array4::vector(vec![1.0, 2.0])).unwrap();
        let unused = ps.add("unused", Array4::vector(vec![3.0])).unwrap();
        let mut g = Graph::new();
        let an = g.param(&ps, a);
        let t = g.input(Array4::vector(vec![0.0, 0.0]));
        let l = g.mse_loss(an, t).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(unused).is_none());
        let mut acc = ps.zeros_like();
        grads.accumulate_into(&mut acc);
        assert_eq!(acc[unused.index()].data(), &[0.0]);
        assert_eq!(acc[a.index()].data(), &[1.0, 2.0]);

        let mut g = Graph::<f64>::new();
        let x = g.input(Array4::vector(vec![1.0]));
        let t = g.input(Array4::vector(vec![0.0]));
        let l = g.mse_loss(x, t).unwrap();
        assert!(matches!(g.backward(l), Err(Error::DisconnectedLoss)));
    }

    #[test]
    fn non_finite_is_reported_with_op() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Array4::vector(vec![1e308]));
        let w = g.input(Array4::from_vec([1, 1, 1, 1], vec![10.0]).unwrap());
        let b = g.input(Array4::vector(vec![0.0]));
        assert!(matches!(g.dense(x, w, b), Err(Error::NonFinite { op: "dense" })));
    }

    #[test]
    fn duplicate_param_names_rejected() {
        let mut ps = ParamStore::<f32>::new();
        ps.add("w", Array4::scalar(1.0)).unwrap();
        assert!(ps.add("w", Array4::scalar(1.0)).is_err());
    }
}
