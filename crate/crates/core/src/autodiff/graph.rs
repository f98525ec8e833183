//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] owns every value computed during one forward pass. Operations
//! append nodes in execution order, so the node list is already a topological
//! order and [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{conv, interp, matmul, ConvGeometry};
use crate::params::ParameterStore;
use crate::tensor::{split_at_axis, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees: parent values, this node's value and the
/// gradient flowing into it.
pub struct Ctx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
}

type BackwardFn<T> = Box<dyn Fn(&Ctx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    track_frozen: bool,
    kink_hash: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            track_frozen: false,
            kink_hash: 0xcbf2_9ce4_8422_2325,
        }
    }

    /// Also computes gradients for frozen parameters. They are still never
    /// updated; this only makes their gradients observable.
    pub fn with_frozen_grads(mut self) -> Self {
        self.track_frozen = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, op: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.into() });
        }
        self.nodes.push(Node {
            op,
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true, "variable")
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false, "constant")
    }

    /// Leaf bound to a named parameter. Repeated requests for the same name
    /// return the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let entry = store
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        let requires_grad = !entry.frozen || self.track_frozen;
        let v = self.leaf(entry.value.clone(), requires_grad, "param")?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Every node produced by operation `op`, in creation order.
    pub fn find_op(&self, op: &str) -> Vec<Var> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].op == op).map(Var).collect()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Fingerprint of every piecewise branch taken (relu signs, clamp sides).
    /// Two evaluations with equal fingerprints took the same smooth piece.
    pub fn kink_hash(&self) -> u64 {
        self.kink_hash
    }

    fn mix_kinks(&mut self, pattern: impl Iterator<Item = u8>) {
        let mut h = self.kink_hash;
        for b in pattern {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.kink_hash = h;
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var],
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.into() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shape, T::one()));
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(bw) = node.backward.as_ref() else {
                leaf_grads.push((i, g));
                continue;
            };
            let ctx = Ctx {
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                grad: &g,
            };
            let parent_grads = bw(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    // ----------------------------------------------------------------------
    // Linear algebra
    // ----------------------------------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// A rank-2 right operand is shared by every row of the left operand
    /// (`[.., k] x [k, n] -> [.., n]`); otherwise both operands carry the same
    /// leading batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sa[sa.len() - 1];
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
            }
            let n = sb[1];
            let rows = self.value(a).numel() / k.max(1);
            let out = matmul::gemm(self.value(a).data(), self.value(b).data(), rows, k, n);
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            let value = Tensor::new(shape, out)?;
            let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
            return self.push(
                "matmul",
                value,
                &[a, b],
                Box::new(move |c| {
                    let (av, bv, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                    let da = need_a.then(|| {
                        let bt = matmul::transpose(bv, k, n);
                        let da = matmul::gemm(g, &bt, rows, n, k);
                        Tensor::new(c.inputs[0].shape().to_vec(), da).unwrap()
                    });
                    let db = need_b.then(|| {
                        let mut db = vec![T::zero(); k * n];
                        matmul::gemm_tn_acc(av, g, &mut db, k, rows, n);
                        Tensor::new(vec![k, n], db).unwrap()
                    });
                    vec![da, db]
                }),
            );
        }
        let r = sa.len();
        if sb.len() != r || sa[..r - 2] != sb[..r - 2] || sb[r - 2] != k {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, n) = (sa[r - 2], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            matmul::gemm_acc(
                &av[i * m * k..][..m * k],
                &bv[i * k * n..][..k * n],
                &mut out[i * m * n..][..m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa.clone();
        shape[r - 1] = n;
        let value = Tensor::new(shape, out)?;
        self.push(
            "matmul",
            value,
            &[a, b],
            Box::new(move |c| {
                let (av, bv, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let mut da = vec![T::zero(); batch * m * k];
                let mut db = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    let bt = matmul::transpose(&bv[i * k * n..][..k * n], k, n);
                    matmul::gemm_acc(&g[i * m * n..][..m * n], &bt, &mut da[i * m * k..][..m * k], m, n, k);
                    matmul::gemm_tn_acc(&av[i * m * k..][..m * k], &g[i * m * n..][..m * n], &mut db[i * k * n..][..k * n], k, m, n);
                }
                vec![
                    Some(Tensor::new(c.inputs[0].shape().to_vec(), da).unwrap()),
                    Some(Tensor::new(c.inputs[1].shape().to_vec(), db).unwrap()),
                ]
            }),
        )
    }

    // ----------------------------------------------------------------------
    // Elementwise
    // ----------------------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_values(a, b, |p, q| p + q);
        self.push(
            "add",
            value,
            &[a, b],
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_values(a, b, |p, q| p - q);
        self.push(
            "sub",
            value,
            &[a, b],
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_values(a, b, |p, q| p * q);
        self.push(
            "mul",
            value,
            &[a, b],
            Box::new(|c| {
                let g = c.grad.data();
                let da = g.iter().zip(c.inputs[1].data()).map(|(&g, &y)| g * y).collect();
                let db = g.iter().zip(c.inputs[0].data()).map(|(&g, &x)| g * x).collect();
                let s = c.grad.shape().to_vec();
                vec![
                    Some(Tensor::new(s.clone(), da).unwrap()),
                    Some(Tensor::new(s, db).unwrap()),
                ]
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let value = self.zip_values(a, b, |p, q| p / q);
        self.push(
            "div",
            value,
            &[a, b],
            Box::new(|c| {
                let (g, y, q) = (c.grad.data(), c.output.data(), c.inputs[1].data());
                let da = g.iter().zip(q).map(|(&g, &q)| g / q).collect();
                let db = g
                    .iter()
                    .zip(q)
                    .zip(y)
                    .map(|((&g, &q), &y)| -g * y / q)
                    .collect();
                let s = c.grad.shape().to_vec();
                vec![
                    Some(Tensor::new(s.clone(), da).unwrap()),
                    Some(Tensor::new(s, db).unwrap()),
                ]
            }),
        )
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let c = *sx.last().unwrap_or(&0);
        if sb != [c] {
            return Err(Error::shape("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_exact_mut(c) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        self.push(
            "add_bias",
            value,
            &[x, bias],
            Box::new(move |ctx| {
                let db = conv::conv3d_backward_bias(ctx.grad.data(), c);
                vec![Some(ctx.grad.clone()), Some(Tensor::new(vec![c], db).unwrap())]
            }),
        )
    }

    /// Multiplies by a vector along the last axis.
    pub fn mul_channels(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (sx, sg) = (self.shape(x), self.shape(gain));
        let c = *sx.last().unwrap_or(&0);
        if sg != [c] {
            return Err(Error::shape("mul_channels", format!("{sx:?} * {sg:?}")));
        }
        let gv = self.value(gain).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_exact_mut(c) {
            for (v, &s) in row.iter_mut().zip(&gv) {
                *v *= s;
            }
        }
        self.push(
            "mul_channels",
            value,
            &[x, gain],
            Box::new(move |ctx| {
                let (g, xv, gain) = (ctx.grad.data(), ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut dx = g.to_vec();
                for row in dx.chunks_exact_mut(c) {
                    for (v, &s) in row.iter_mut().zip(gain) {
                        *v *= s;
                    }
                }
                let mut dgain = vec![T::zero(); c];
                for (grow, xrow) in g.chunks_exact(c).zip(xv.chunks_exact(c)) {
                    for ((acc, &gg), &xx) in dgain.iter_mut().zip(grow).zip(xrow) {
                        *acc += gg * xx;
                    }
                }
                vec![
                    Some(Tensor::new(ctx.grad.shape().to_vec(), dx).unwrap()),
                    Some(Tensor::new(vec![c], dgain).unwrap()),
                ]
            }),
        )
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.push(
            "scale",
            value,
            &[x],
            Box::new(move |c| vec![Some(c.grad.map(|g| g * s))]),
        )
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v + s);
        self.push(
            "add_scalar",
            value,
            &[x],
            Box::new(|c| vec![Some(c.grad.clone())]),
        )
    }

    fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(
            op,
            value,
            &[x],
            Box::new(move |c| {
                let d = c
                    .grad
                    .data()
                    .iter()
                    .zip(c.inputs[0].data())
                    .zip(c.output.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::new(c.grad.shape().to_vec(), d).unwrap())]
            }),
        )
    }

    /// `max(x, 0)`; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let pattern: Vec<u8> = self.value(x).data().iter().map(|&v| (v > T::zero()) as u8).collect();
        self.mix_kinks(pattern.into_iter());
        self.unary(
            "relu",
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let k = T::of((2.0 / std::f64::consts::PI).sqrt());
        let a = T::of(0.044715);
        let half = T::of(0.5);
        let three = T::of(3.0);
        self.unary(
            "gelu",
            x,
            move |v| half * v * (T::one() + (k * (v + a * v * v * v)).tanh()),
            move |v, _| {
                let t = (k * (v + a * v * v * v)).tanh();
                half * (T::one() + t) + half * v * (T::one() - t * t) * k * (T::one() + three * a * v * v)
            },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            x,
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary("ln", x, |v| v.ln(), |x, _| T::one() / x)
    }

    /// Clamps into `[lo, hi]`; zero gradient outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let pattern: Vec<u8> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| (v < lo) as u8 | (((v > hi) as u8) << 1))
            .collect();
        self.mix_kinks(pattern.into_iter());
        self.unary(
            "clamp",
            x,
            move |v| v.max(lo).min(hi),
            move |x, _| if x < lo || x > hi { T::zero() } else { T::one() },
        )
    }

    // ----------------------------------------------------------------------
    // Normalisation
    // ----------------------------------------------------------------------

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::InvalidAxis { op, axis, rank });
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(x), axis);
        let xv = self.value(x);
        let mut y = xv.data().to_vec();
        for o in 0..outer {
            let base = o * len * inner;
            for i in 0..inner {
                let mut m = T::neg_infinity();
                for l in 0..len {
                    m = m.max(y[base + l * inner + i]);
                }
                let mut s = T::zero();
                for l in 0..len {
                    let e = (y[base + l * inner + i] - m).exp();
                    y[base + l * inner + i] = e;
                    s += e;
                }
                for l in 0..len {
                    y[base + l * inner + i] = y[base + l * inner + i] / s;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), y)?;
        self.push(
            "softmax",
            value,
            &[x],
            Box::new(move |c| {
                let (g, y) = (c.grad.data(), c.output.data());
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    let base = o * len * inner;
                    for i in 0..inner {
                        let mut dot = T::zero();
                        for l in 0..len {
                            let k = base + l * inner + i;
                            dot += g[k] * y[k];
                        }
                        for l in 0..len {
                            let k = base + l * inner + i;
                            dx[k] = y[k] * (g[k] - dot);
                        }
                    }
                }
                vec![Some(Tensor::new(c.grad.shape().to_vec(), dx).unwrap())]
            }),
        )
    }

    fn normalize(
        &mut self,
        op: &'static str,
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        eps: T,
    ) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data();
        let n = T::of(len as f64);
        let groups = outer * inner;
        let mut mean = vec![T::zero(); groups];
        let mut var = vec![T::zero(); groups];
        for o in 0..outer {
            let (mrow, vrow) = (&mut mean[o * inner..][..inner], &mut var[o * inner..][..inner]);
            for l in 0..len {
                for (m, &v) in mrow.iter_mut().zip(&data[(o * len + l) * inner..][..inner]) {
                    *m += v;
                }
            }
            mrow.iter_mut().for_each(|m| *m = *m / n);
            for l in 0..len {
                for ((s, &m), &v) in vrow.iter_mut().zip(mrow.iter()).zip(&data[(o * len + l) * inner..][..inner]) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / n + eps).sqrt()).collect();
        let mut y = vec![T::zero(); data.len()];
        for o in 0..outer {
            for l in 0..len {
                let off = (o * len + l) * inner;
                for i in 0..inner {
                    let gi = o * inner + i;
                    y[off + i] = (data[off + i] - mean[gi]) * inv_std[gi];
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), y)?;
        self.push(
            op,
            value,
            &[x],
            Box::new(move |c| {
                let (g, y) = (c.grad.data(), c.output.data());
                let mut sum_g = vec![T::zero(); groups];
                let mut sum_gy = vec![T::zero(); groups];
                for o in 0..outer {
                    for l in 0..len {
                        let off = (o * len + l) * inner;
                        for i in 0..inner {
                            sum_g[o * inner + i] += g[off + i];
                            sum_gy[o * inner + i] += g[off + i] * y[off + i];
                        }
                    }
                }
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for l in 0..len {
                        let off = (o * len + l) * inner;
                        for i in 0..inner {
                            let gi = o * inner + i;
                            dx[off + i] = inv_std[gi]
                                * (g[off + i] - sum_g[gi] / n - y[off + i] * sum_gy[gi] / n);
                        }
                    }
                }
                vec![Some(Tensor::new(c.grad.shape().to_vec(), dx).unwrap())]
            }),
        )
    }

    /// Zero-mean, unit-variance normalisation along one axis (no affine).
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        self.check_axis("layer_norm", x, axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(x), axis);
        self.normalize("layer_norm", x, outer, len, inner, eps)
    }

    /// Per-channel normalisation over every spatial position of a
    /// channels-last tensor (no affine).
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(Error::shape("instance_norm", format!("{shape:?}")));
        }
        let c = shape[shape.len() - 1];
        let positions = self.value(x).numel() / c.max(1);
        self.normalize("instance_norm", x, 1, positions, c, eps)
    }

    // ----------------------------------------------------------------------
    // Structural
    // ----------------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push(
            "reshape",
            value,
            &[x],
            Box::new(|c| vec![Some(c.grad.clone().reshaped(c.inputs[0].shape()).unwrap())]),
        )
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permuted(perm)?;
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.push(
            "permute",
            value,
            &[x],
            Box::new(move |c| vec![Some(c.grad.permuted(&inverse).unwrap())]),
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &l) in xs.iter().zip(&lens) {
                out.extend_from_slice(&self.value(x).data()[o * l * inner..][..l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat",
            value,
            xs,
            Box::new(move |c| {
                let g = c.grad.data();
                let mut parts: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (p, &l) in parts.iter_mut().zip(&lens) {
                        p.extend_from_slice(&g[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                parts
                    .into_iter()
                    .zip(&c.inputs)
                    .map(|(p, inp)| Some(Tensor::new(inp.shape().to_vec(), p).unwrap()))
                    .collect()
            }),
        )
    }

    /// Contiguous range `[start, start + len)` of one axis.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        if start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) out of axis length {}", start + len, shape[axis]),
            ));
        }
        let (outer, full, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * full + start) * inner..][..len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        let value = Tensor::new(oshape, out)?;
        self.push(
            "slice",
            value,
            &[x],
            Box::new(move |c| {
                let g = c.grad.data();
                let mut dx = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    dx[(o * full + start) * inner..][..len * inner]
                        .copy_from_slice(&g[o * len * inner..][..len * inner]);
                }
                vec![Some(Tensor::new(shape.clone(), dx).unwrap())]
            }),
        )
    }

    // ----------------------------------------------------------------------
    // Reductions
    // ----------------------------------------------------------------------

    /// Sum over one axis (removing it) or over everything (to a scalar).
    pub fn reduce_sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce("reduce_sum", x, axis, false)
    }

    pub fn reduce_mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce("reduce_mean", x, axis, true)
    }

    fn reduce(&mut self, op: &'static str, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner, oshape) = match axis {
            None => (1, self.value(x).numel(), 1, Vec::new()),
            Some(a) => {
                self.check_axis(op, x, a)?;
                let (o, l, i) = split_at_axis(&shape, a);
                let mut s = shape.clone();
                s.remove(a);
                (o, l, i, s)
            }
        };
        let norm = if mean { T::one() / T::of(len as f64) } else { T::one() };
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for (acc, &v) in out[o * inner..][..inner]
                    .iter_mut()
                    .zip(&src[(o * len + l) * inner..][..inner])
                {
                    *acc += v;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v *= norm);
        }
        let value = Tensor::new(oshape, out)?;
        self.push(
            op,
            value,
            &[x],
            Box::new(move |c| {
                let g = c.grad.data();
                let mut dx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        dx.extend(g[o * inner..][..inner].iter().map(|&v| v * norm));
                    }
                }
                vec![Some(Tensor::new(shape.clone(), dx).unwrap())]
            }),
        )
    }

    // ----------------------------------------------------------------------
    // Volumetric
    // ----------------------------------------------------------------------

    /// 3D convolution on a channels-last volume `[H, W, D, Ci]` with weight
    /// `[KH, KW, KD, Ci, Co]` and optional bias `[Co]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 5 || sw[3] != sx[3] {
            return Err(Error::shape("conv3d", format!("input {sx:?}, weight {sw:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[4]] {
                return Err(Error::shape("conv3d", format!("bias {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeometry {
            input: [sx[0], sx[1], sx[2]],
            kernel: [sw[0], sw[1], sw[2]],
            stride,
            padding,
            in_channels: sx[3],
            out_channels: sw[4],
        };
        let out = geom.output().ok_or_else(|| {
            Error::shape("conv3d", format!("kernel {sw:?} does not fit input {sx:?} with padding {padding:?}"))
        })?;
        let y = conv::conv3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![out[0], out[1], out[2], geom.out_channels], y)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        let has_bias = bias.is_some();
        let need_dx = self.requires_grad(x);
        let need_dw = self.requires_grad(w);
        self.push(
            "conv3d",
            value,
            &parents,
            Box::new(move |c| {
                let g = c.grad.data();
                let dx = need_dx.then(|| {
                    let d = conv::conv3d_backward_input(g, c.inputs[1].data(), &geom);
                    Tensor::new(c.inputs[0].shape().to_vec(), d).unwrap()
                });
                let dw = need_dw.then(|| {
                    let d = conv::conv3d_backward_weight(c.inputs[0].data(), g, &geom);
                    Tensor::new(c.inputs[1].shape().to_vec(), d).unwrap()
                });
                let mut grads = vec![dx, dw];
                if has_bias {
                    let db = conv::conv3d_backward_bias(g, geom.out_channels);
                    grads.push(Some(Tensor::new(vec![geom.out_channels], db).unwrap()));
                }
                grads
            }),
        )
    }

    /// Trilinear resampling of `[H, W, D, C]` to `[out[0], out[1], out[2], C]`
    /// with half-pixel centres.
    pub fn trilinear_upsample(&mut self, x: Var, out: [usize; 3]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || out.contains(&0) {
            return Err(Error::shape("trilinear_upsample", format!("{shape:?} -> {out:?}")));
        }
        let mut cur = self.value(x).data().to_vec();
        let mut cur_shape = shape.clone();
        let mut stage_shapes = Vec::with_capacity(3);
        for axis in 0..3 {
            stage_shapes.push(cur_shape.clone());
            cur = interp::resample_axis(&cur, &cur_shape, axis, out[axis]);
            cur_shape[axis] = out[axis];
        }
        let value = Tensor::new(cur_shape, cur)?;
        self.push(
            "trilinear_upsample",
            value,
            &[x],
            Box::new(move |c| {
                let mut g = c.grad.data().to_vec();
                for axis in (0..3).rev() {
                    g = interp::resample_axis_adjoint(&g, &stage_shapes[axis], axis, out[axis]);
                }
                vec![Some(Tensor::new(shape.clone(), g).unwrap())]
            }),
        )
    }

    /// Integer-factor trilinear upsampling.
    pub fn upsample_by(&mut self, x: Var, factor: [usize; 3]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape("trilinear_upsample", format!("{s:?}")));
        }
        let out = [s[0] * factor[0], s[1] * factor[1], s[2] * factor[2]];
        self.trilinear_upsample(x, out)
    }

    /// Per-channel aggregation along the depth axis of `[H, W, D, C]` with a
    /// `[K, C]` kernel and stride `K`: `y[h,w,d,c] = sum_k x[h,w,dK+k,c] w[k,c]`.
    pub fn depth_conv(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 2 || sw[1] != sx[3] || sw[0] == 0 || sx[2] % sw[0] != 0 {
            return Err(Error::shape("depth_conv", format!("input {sx:?}, weight {sw:?}")));
        }
        let (k, ch) = (sw[0], sw[1]);
        if let Some(b) = bias {
            if self.shape(b) != [ch] {
                return Err(Error::shape("depth_conv", format!("bias {:?}", self.shape(b))));
            }
        }
        let dout = sx[2] / k;
        let cols = sx[0] * sx[1];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut y = vec![T::zero(); cols * dout * ch];
        for col in 0..cols {
            for d in 0..dout {
                let yrow = &mut y[(col * dout + d) * ch..][..ch];
                if let Some(b) = bias {
                    yrow.copy_from_slice(self.nodes[b.0].value.data());
                }
                for t in 0..k {
                    let xrow = &xv[(col * sx[2] + d * k + t) * ch..][..ch];
                    for ((acc, &a), &b) in yrow.iter_mut().zip(xrow).zip(&wv[t * ch..][..ch]) {
                        *acc += a * b;
                    }
                }
            }
        }
        let value = Tensor::new(vec![sx[0], sx[1], dout, ch], y)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.push(
            "depth_conv",
            value,
            &parents,
            Box::new(move |c| {
                let (g, xv, wv) = (c.grad.data(), c.inputs[0].data(), c.inputs[1].data());
                let depth = dout * k;
                let mut dx = vec![T::zero(); xv.len()];
                let mut dw = vec![T::zero(); wv.len()];
                for col in 0..cols {
                    for d in 0..dout {
                        let grow = &g[(col * dout + d) * ch..][..ch];
                        for t in 0..k {
                            let off = (col * depth + d * k + t) * ch;
                            for j in 0..ch {
                                dx[off + j] = grow[j] * wv[t * ch + j];
                                dw[t * ch + j] += grow[j] * xv[off + j];
                            }
                        }
                    }
                }
                let mut grads = vec![
                    Some(Tensor::new(c.inputs[0].shape().to_vec(), dx).unwrap()),
                    Some(Tensor::new(c.inputs[1].shape().to_vec(), dw).unwrap()),
                ];
                if has_bias {
                    grads.push(Some(Tensor::new(vec![ch], conv::conv3d_backward_bias(g, ch)).unwrap()));
                }
                grads
            }),
        )
    }
}
