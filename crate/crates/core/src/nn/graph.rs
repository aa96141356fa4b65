//! Reverse-mode differentiation over a recorded graph of tensor operations.
//!
//! A [`Graph`] borrows the [`ParamStore`] for the duration of one forward
//! pass. Operations append nodes and return [`Var`] handles; calling
//! [`Graph::backward`] on a scalar node walks the nodes in reverse and
//! returns [`Gradients`] for every parameter that took part.

use std::collections::HashMap;

use crate::cot::sinkhorn;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::conv::{self, ConvGeom};
use super::params::{BufferId, Group, ParamId, ParamStore, StatUpdate};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Batch-norm behaviour and, more generally, train/eval switch for layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Sum(Var),
    MeanAxis0(Var),
    Reshape(Var),
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMulNT(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
        train: bool,
    },
    AvgPool {
        x: Var,
        grid: (usize, usize),
    },
    Broadcast2d(Var),
    PairwiseSqDist(Var, Var),
    Sinkhorn {
        cost: Var,
        solution: Box<sinkhorn::SinkhornSolution>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Abs(_) => "abs",
            Op::Sum(_) => "sum",
            Op::MeanAxis0(_) => "mean_axis0",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Linear { .. } => "linear",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvT2d { .. } => "conv_transpose2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::AvgPool { .. } => "avg_pool",
            Op::Broadcast2d(_) => "broadcast2d",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
            Op::Sinkhorn { .. } => "sinkhorn",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded forward computation.
pub struct Graph<'s, T: Real> {
    store: &'s ParamStore,
    mode: Mode,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    frozen: Vec<Group>,
    perturb: Option<(ParamId, usize, T)>,
    stat_updates: Vec<StatUpdate>,
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Graph {
            store,
            mode,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            frozen: Vec::new(),
            perturb: None,
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Parameters of `group` enter this graph as constants.
    pub fn freeze(&mut self, group: Group) {
        assert!(self.param_vars.is_empty(), "freeze before using parameters");
        self.frozen.push(group);
    }

    /// Adds `delta` to element `index` of parameter `id` when it is loaded.
    /// Used for finite-difference checks at the graph's own precision.
    pub fn perturb(&mut self, id: ParamId, index: usize, delta: T) {
        assert!(self.param_vars.is_empty(), "perturb before using parameters");
        self.perturb = Some((id, index, delta));
    }

    /// Running-statistics updates recorded by train-mode batch norms.
    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Copies a node out as an `f32` tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.iter().map(|x| x.as_f32()).collect())
            .expect("node shapes are consistent")
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ----- leaves -------------------------------------------------------

    /// Constant input; gradients are not tracked.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&v| T::from_f32(v)).collect();
        self.push(value, t.shape().to_vec(), Op::Leaf, false)
    }

    /// Input whose gradient can be read back from [`Gradients::wrt`].
    pub fn input(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&v| T::from_f32(v)).collect();
        self.push(value, t.shape().to_vec(), Op::Leaf, true)
    }

    /// Input given directly at graph precision.
    pub fn input_raw(&mut self, shape: &[usize], value: Vec<T>, needs_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "input shape {shape:?} does not hold {} values",
                value.len()
            )));
        }
        Ok(self.push(value, shape.to_vec(), Op::Leaf, needs_grad))
    }

    /// Constant copy of an existing node (stops gradient flow).
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (value, shape) = (n.value.clone(), n.shape.clone());
        self.push(value, shape, Op::Leaf, false)
    }

    /// Loads a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.store.param(id);
        let mut value: Vec<T> = p.value.data().iter().map(|&v| T::from_f32(v)).collect();
        if let Some((pid, idx, delta)) = self.perturb {
            if pid == id {
                value[idx] = value[idx] + delta;
            }
        }
        let trainable = !self.frozen.contains(&p.group);
        let v = self.push(value, p.value.shape().to_vec(), Op::Param(id), trainable);
        self.param_vars.insert(id, v);
        v
    }

    fn buffer(&self, id: BufferId) -> Vec<f64> {
        self.store.buffer(id).data().iter().map(|&v| v as f64).collect()
    }

    // ----- elementwise --------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, shape, op, ng))
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(value, shape, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let kt = T::from_f64(k);
        self.unary(a, Op::Scale(a, k), |x| x * kt)
    }

    /// `max(x, slope * x)` for `slope` in (0, 1).
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > T::zero() { x } else { x * s })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    // ----- reductions and layout ---------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().map(|v| v.as_f64()).sum();
        let ng = self.ng(a);
        self.push(vec![T::from_f64(s)], vec![1], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Average over the leading axis.
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("mean_axis0 needs rank >= 2"));
        }
        let n = shape[0];
        let inner: usize = shape[1..].iter().product();
        let src = &self.nodes[a.0].value;
        let mut acc = vec![0f64; inner];
        for item in src.chunks(inner) {
            for (s, v) in acc.iter_mut().zip(item) {
                *s += v.as_f64();
            }
        }
        let value = acc.iter().map(|s| T::from_f64(s / n as f64)).collect();
        let ng = self.ng(a);
        Ok(self.push(value, shape[1..].to_vec(), Op::MeanAxis0(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].value.len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let value = self.nodes[a.0].value.clone();
        let ng = self.ng(a);
        Ok(self.push(value, shape.to_vec(), Op::Reshape(a), ng))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.nodes[a.0].value;
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.ng(a);
        Ok(self.push(value, out_shape, Op::Slice { src: a, axis, start }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} on rank {}", base.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape(format!("concat: {s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                value.extend_from_slice(&self.nodes[p.0].value[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            value,
            shape,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    // ----- dense layers -------------------------------------------------

    /// `x @ w + b` with `x`: N×I, `w`: I×O, `b`: O.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape(format!("linear: x {xs:?}, w {ws:?}")));
        }
        let (n, i_dim, o_dim) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [o_dim] {
                return Err(Error::shape(format!("linear bias {:?}", self.shape(b))));
            }
        }
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = b.map(|b| &self.nodes[b.0].value);
        let mut value = Vec::with_capacity(n * o_dim);
        let mut acc = vec![0f64; o_dim];
        for r in 0..n {
            acc.fill(0.0);
            for k in 0..i_dim {
                let a = xv[r * i_dim + k].as_f64();
                for (s, wk) in acc.iter_mut().zip(&wv[k * o_dim..(k + 1) * o_dim]) {
                    *s += a * wk.as_f64();
                }
            }
            match bv {
                Some(bv) => value.extend(acc.iter().zip(bv).map(|(s, b)| T::from_f64(s + b.as_f64()))),
                None => value.extend(acc.iter().map(|&s| T::from_f64(s))),
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(value, vec![n, o_dim], Op::Linear { x, w, b }, ng))
    }

    /// `a @ bᵀ` with `a`: M×K, `b`: N×K.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return Err(Error::shape(format!("matmul_nt: {as_:?} x {bs:?}ᵀ")));
        }
        let (m, k, n) = (as_[0], as_[1], bs[0]);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                let s: f64 = (0..k)
                    .map(|t| av[i * k + t].as_f64() * bv[j * k + t].as_f64())
                    .sum();
                value.push(T::from_f64(s));
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, vec![m, n], Op::MatMulNT(a, b), ng))
    }

    // ----- convolutions -------------------------------------------------

    /// Zero-padded strided cross-correlation. `x`: N×Cin×H×W,
    /// `w`: Cout×Cin×kh×kw, `b`: Cout.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!("conv2d: x {xs:?}, w {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(format!(
                "conv2d expects {} input channels, got {}",
                ws[1], xs[1]
            )));
        }
        if self.shape(b) != [ws[0]] {
            return Err(Error::shape("conv2d bias length"));
        }
        let ho = conv::conv_out_len(xs[2], ws[2], stride, pad);
        let wo = conv::conv_out_len(xs[3], ws[3], stride, pad);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::shape(format!("conv2d output of {xs:?} with kernel {ws:?} is empty")));
        };
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho,
            wo,
        };
        let value = conv::conv2d_forward(
            &geom,
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            value,
            vec![geom.n, geom.cout, ho, wo],
            Op::Conv2d { x, w, b, geom },
            ng,
        ))
    }

    /// Transposed convolution. `x`: N×Cin×H×W, `w`: Cin×Cout×kh×kw.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] {
            return Err(Error::shape(format!("conv_transpose2d: x {xs:?}, w {ws:?}")));
        }
        if self.shape(b) != [ws[1]] {
            return Err(Error::shape("conv_transpose2d bias length"));
        }
        let ho = conv::conv_t_out_len(xs[2], ws[2], stride, pad);
        let wo = conv::conv_t_out_len(xs[3], ws[3], stride, pad);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::shape("conv_transpose2d output is empty"));
        };
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[1],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho,
            wo,
        };
        let value = conv::conv_t_forward(
            &geom,
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            value,
            vec![geom.n, geom.cout, ho, wo],
            Op::ConvT2d { x, w, b, geom },
            ng,
        ))
    }

    // ----- normalization and pooling -----------------------------------

    /// Batch normalization over axis 1 of an N×F or N×F×H×W tensor.
    ///
    /// Train mode normalizes with the batch statistics (biased variance) and
    /// records a running-statistics update; eval mode uses the buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: BufferId,
        running_var: BufferId,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(Error::shape(format!("batchnorm input rank {}", shape.len())));
        }
        let (n, f) = (shape[0], shape[1]);
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(Error::shape(format!(
                "batchnorm over {f} features with gamma {:?}",
                self.shape(gamma)
            )));
        }
        let s: usize = shape[2..].iter().product();
        let count = n * s;
        let xv = &self.nodes[x.0].value;
        let train = self.mode == Mode::Train;
        let (mean, var) = if train {
            if count < 2 {
                return Err(Error::Degenerate(
                    "batch norm in train mode needs more than one value per feature".into(),
                ));
            }
            let mut mean = vec![0f64; f];
            for b in 0..n {
                for c in 0..f {
                    let o = (b * f + c) * s;
                    mean[c] += xv[o..o + s].iter().map(|v| v.as_f64()).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            let mut var = vec![0f64; f];
            for b in 0..n {
                for c in 0..f {
                    let o = (b * f + c) * s;
                    var[c] += xv[o..o + s]
                        .iter()
                        .map(|v| (v.as_f64() - mean[c]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            (mean, var)
        } else {
            (self.buffer(running_mean), self.buffer(running_var))
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut value = Vec::with_capacity(xv.len());
        for b in 0..n {
            for c in 0..f {
                let o = (b * f + c) * s;
                let (g, be) = (gv[c].as_f64(), bv[c].as_f64());
                for v in &xv[o..o + s] {
                    let h = (v.as_f64() - mean[c]) * inv_std[c];
                    xhat.push(T::from_f64(h));
                    value.push(T::from_f64(g * h + be));
                }
            }
        }
        if train {
            let unbiased = var
                .iter()
                .map(|v| v * count as f64 / (count as f64 - 1.0))
                .collect();
            self.stat_updates.push(StatUpdate {
                mean: running_mean,
                var: running_var,
                momentum,
                batch_mean: mean,
                batch_var_unbiased: unbiased,
            });
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            value,
            shape,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            ng,
        ))
    }

    /// Adaptive average pooling of N×C×H×W onto a `rows × cols` grid.
    /// Cell `(i, j)` averages rows `⌊iH/rows⌋ .. ⌈(i+1)H/rows⌉`.
    pub fn avg_pool(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || rows == 0 || cols == 0 {
            return Err(Error::shape(format!("avg_pool {rows}x{cols} of {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xv = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(n * c * rows * cols);
        for plane in xv.chunks(h * w) {
            for i in 0..rows {
                let (y0, y1) = pool_bounds(i, rows, h);
                for j in 0..cols {
                    let (x0, x1) = pool_bounds(j, cols, w);
                    let mut acc = 0f64;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += plane[y * w + xx].as_f64();
                        }
                    }
                    value.push(T::from_f64(acc / ((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            value,
            vec![n, c, rows, cols],
            Op::AvgPool {
                x,
                grid: (rows, cols),
            },
            ng,
        ))
    }

    /// N×C → N×C×H×W, repeating each value over the spatial plane.
    pub fn broadcast2d(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || h == 0 || w == 0 {
            return Err(Error::shape(format!("broadcast2d of {s:?}")));
        }
        let mut value = Vec::with_capacity(s[0] * s[1] * h * w);
        for &v in &self.nodes[x.0].value {
            value.extend(std::iter::repeat_n(v, h * w));
        }
        let ng = self.ng(x);
        Ok(self.push(value, vec![s[0], s[1], h, w], Op::Broadcast2d(x), ng))
    }

    // ----- transport ----------------------------------------------------

    /// Squared Euclidean distances between the rows of `a` (B1×D) and
    /// `b` (B2×D).
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return Err(Error::shape(format!("pairwise_sq_dist: {as_:?} vs {bs:?}")));
        }
        let d = as_[1];
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = Vec::with_capacity(as_[0] * bs[0]);
        for i in 0..as_[0] {
            let ra = &av[i * d..(i + 1) * d];
            for j in 0..bs[0] {
                let rb = &bv[j * d..(j + 1) * d];
                let s: f64 = ra
                    .iter()
                    .zip(rb)
                    .map(|(x, y)| {
                        let t = x.as_f64() - y.as_f64();
                        t * t
                    })
                    .sum();
                value.push(T::from_f64(s));
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, vec![as_[0], bs[0]], Op::PairwiseSqDist(a, b), ng))
    }

    /// Entropic transport value `<P, C>` between uniform marginals.
    pub fn sinkhorn(&mut self, cost: Var, epsilon: f64, iterations: usize) -> Result<Var> {
        let s = self.shape(cost).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("sinkhorn cost of shape {s:?}")));
        }
        let c: Vec<f64> = self.nodes[cost.0].value.iter().map(|v| v.as_f64()).collect();
        let solution = sinkhorn::solve(&c, s[0], s[1], epsilon, iterations)?;
        let value = T::from_f64(solution.value);
        let ng = self.ng(cost);
        Ok(self.push(
            vec![value],
            vec![1],
            Op::Sinkhorn {
                cost,
                solution: Box::new(solution),
            },
            ng,
        ))
    }

    // ----- diagnostics and backward ------------------------------------

    /// Which side of the kink every leaky ReLU / abs input lies on, in node
    /// order. Two evaluations with equal patterns are on the same linear
    /// piece of those activations.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::LeakyRelu(a, _) | Op::Abs(a) = n.op {
                out.extend(self.nodes[a.0].value.iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    /// First node, in evaluation order, holding a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: n.op.name().to_string(),
                    node: i,
                });
            }
        }
        Ok(())
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            if dy.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("{} (gradient)", node.op.name()),
                    node: i,
                });
            }
            let (lower, _) = grads.split_at_mut(i);
            self.backprop(node, &dy, lower);
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(dy);
            }
        }
        let mut params: Vec<(ParamId, Vec<T>)> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if n.needs_grad => Some((
                    id,
                    grads[i].clone().unwrap_or_else(|| vec![T::zero(); n.value.len()]),
                )),
                _ => None,
            })
            .collect();
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { params, all: grads })
    }

    fn backprop(&self, node: &Node<T>, dy: &[T], g: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                if ng(*a) {
                    acc(g, *a, dy.iter().copied(), dy.len());
                }
                if ng(*b) {
                    acc(g, *b, dy.iter().copied(), dy.len());
                }
            }
            Op::Sub(a, b) => {
                if ng(*a) {
                    acc(g, *a, dy.iter().copied(), dy.len());
                }
                if ng(*b) {
                    acc(g, *b, dy.iter().map(|&d| -d), dy.len());
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    acc(g, *a, dy.iter().zip(val(*b)).map(|(&d, &y)| d * y), dy.len());
                }
                if ng(*b) {
                    acc(g, *b, dy.iter().zip(val(*a)).map(|(&d, &x)| d * x), dy.len());
                }
            }
            Op::Scale(a, k) => {
                let k = T::from_f64(*k);
                acc(g, *a, dy.iter().map(|&d| d * k), dy.len());
            }
            Op::LeakyRelu(a, slope) => {
                let s = T::from_f64(*slope);
                acc(
                    g,
                    *a,
                    dy.iter()
                        .zip(val(*a))
                        .map(|(&d, &x)| if x > T::zero() { d } else { d * s }),
                    dy.len(),
                );
            }
            Op::Sigmoid(a) => acc(
                g,
                *a,
                dy.iter()
                    .zip(&node.value)
                    .map(|(&d, &y)| d * y * (T::one() - y)),
                dy.len(),
            ),
            Op::Tanh(a) => acc(
                g,
                *a,
                dy.iter()
                    .zip(&node.value)
                    .map(|(&d, &y)| d * (T::one() - y * y)),
                dy.len(),
            ),
            Op::Abs(a) => acc(
                g,
                *a,
                dy.iter().zip(val(*a)).map(|(&d, &x)| {
                    if x > T::zero() {
                        d
                    } else if x < T::zero() {
                        -d
                    } else {
                        T::zero()
                    }
                }),
                dy.len(),
            ),
            Op::Sum(a) => {
                let n = val(*a).len();
                acc(g, *a, std::iter::repeat_n(dy[0], n), n);
            }
            Op::MeanAxis0(a) => {
                let n = val(*a).len();
                let k = T::from_f64(1.0 / (n / dy.len()) as f64);
                acc(g, *a, dy.iter().cycle().take(n).map(|&d| d * k), n);
            }
            Op::Reshape(a) => acc(g, *a, dy.iter().copied(), dy.len()),
            Op::Slice { src, axis, start } => {
                let shape = &self.nodes[src.0].shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = node.shape[*axis];
                let buf = slot(g, *src, val(*src).len());
                for o in 0..outer {
                    let base = (o * shape[*axis] + start) * inner;
                    for (t, &d) in buf[base..base + len * inner]
                        .iter_mut()
                        .zip(&dy[o * len * inner..(o + 1) * len * inner])
                    {
                        *t = *t + d;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let mut offset = 0;
                let total = node.shape[*axis] * inner;
                for &p in parts {
                    let len = self.nodes[p.0].shape[*axis] * inner;
                    if ng(p) {
                        let buf = slot(g, p, val(p).len());
                        for o in 0..outer {
                            for (t, &d) in buf[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(&dy[o * total + offset..o * total + offset + len])
                            {
                                *t = *t + d;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Linear { x, w, b } => {
                let xs = &self.nodes[x.0].shape;
                let (n, i_dim) = (xs[0], xs[1]);
                let o_dim = node.shape[1];
                let xv = val(*x);
                let wv = val(*w);
                if ng(*x) {
                    let mut dx = vec![T::zero(); n * i_dim];
                    for r in 0..n {
                        let dyr = &dy[r * o_dim..(r + 1) * o_dim];
                        for k in 0..i_dim {
                            let s: f64 = dyr
                                .iter()
                                .zip(&wv[k * o_dim..(k + 1) * o_dim])
                                .map(|(d, w)| d.as_f64() * w.as_f64())
                                .sum();
                            dx[r * i_dim + k] = T::from_f64(s);
                        }
                    }
                    acc(g, *x, dx.into_iter(), n * i_dim);
                }
                if ng(*w) {
                    let mut dw = vec![0f64; i_dim * o_dim];
                    for r in 0..n {
                        let dyr = &dy[r * o_dim..(r + 1) * o_dim];
                        for k in 0..i_dim {
                            let xk = xv[r * i_dim + k].as_f64();
                            for (s, d) in dw[k * o_dim..(k + 1) * o_dim].iter_mut().zip(dyr) {
                                *s += xk * d.as_f64();
                            }
                        }
                    }
                    acc(g, *w, dw.into_iter().map(T::from_f64), i_dim * o_dim);
                }
                if let Some(b) = b {
                    if ng(*b) {
                        let mut db = vec![0f64; o_dim];
                        for r in dy.chunks(o_dim) {
                            for (s, d) in db.iter_mut().zip(r) {
                                *s += d.as_f64();
                            }
                        }
                        acc(g, *b, db.into_iter().map(T::from_f64), o_dim);
                    }
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                let av = val(*a);
                let bv = val(*b);
                if ng(*a) {
                    let mut da = vec![0f64; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let d = dy[i * n + j].as_f64();
                            for t in 0..k {
                                da[i * k + t] += d * bv[j * k + t].as_f64();
                            }
                        }
                    }
                    acc(g, *a, da.into_iter().map(T::from_f64), m * k);
                }
                if ng(*b) {
                    let mut db = vec![0f64; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let d = dy[i * n + j].as_f64();
                            for t in 0..k {
                                db[j * k + t] += d * av[i * k + t].as_f64();
                            }
                        }
                    }
                    acc(g, *b, db.into_iter().map(T::from_f64), n * k);
                }
            }
            Op::Conv2d { x, w, b, geom } | Op::ConvT2d { x, w, b, geom } => {
                let need_dw = ng(*w) || ng(*b);
                let grads = if matches!(node.op, Op::Conv2d { .. }) {
                    conv::conv2d_backward(geom, val(*x), val(*w), dy, ng(*x), need_dw)
                } else {
                    conv::conv_t_backward(geom, val(*x), val(*w), dy, ng(*x), need_dw)
                };
                if let Some(dx) = grads.dx {
                    let n = dx.len();
                    acc(g, *x, dx.into_iter(), n);
                }
                if ng(*w) {
                    if let Some(dw) = grads.dw {
                        let n = dw.len();
                        acc(g, *w, dw.into_iter(), n);
                    }
                }
                if ng(*b) {
                    if let Some(db) = grads.db {
                        let n = db.len();
                        acc(g, *b, db.into_iter(), n);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = &node.shape;
                let (n, f) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let count = (n * s) as f64;
                let gv = val(*gamma);
                let mut sum_dy = vec![0f64; f];
                let mut sum_dy_xhat = vec![0f64; f];
                for b in 0..n {
                    for c in 0..f {
                        let o = (b * f + c) * s;
                        for k in o..o + s {
                            let d = dy[k].as_f64();
                            sum_dy[c] += d;
                            sum_dy_xhat[c] += d * xhat[k].as_f64();
                        }
                    }
                }
                if ng(*x) {
                    let mut dx = Vec::with_capacity(dy.len());
                    for b in 0..n {
                        for c in 0..f {
                            let o = (b * f + c) * s;
                            let gi = gv[c].as_f64() * inv_std[c];
                            for k in o..o + s {
                                let d = dy[k].as_f64();
                                let v = if *train {
                                    gi * (d
                                        - sum_dy[c] / count
                                        - xhat[k].as_f64() * sum_dy_xhat[c] / count)
                                } else {
                                    gi * d
                                };
                                dx.push(T::from_f64(v));
                            }
                        }
                    }
                    acc(g, *x, dx.into_iter(), dy.len());
                }
                if ng(*gamma) {
                    acc(g, *gamma, sum_dy_xhat.iter().map(|&v| T::from_f64(v)), f);
                }
                if ng(*beta) {
                    acc(g, *beta, sum_dy.iter().map(|&v| T::from_f64(v)), f);
                }
            }
            Op::AvgPool { x, grid } => {
                let s = &self.nodes[x.0].shape;
                let (h, w) = (s[2], s[3]);
                let (rows, cols) = *grid;
                let total = val(*x).len();
                let buf = slot(g, *x, total);
                for (p, plane) in buf.chunks_mut(h * w).enumerate() {
                    for i in 0..rows {
                        let (y0, y1) = pool_bounds(i, rows, h);
                        for j in 0..cols {
                            let (x0, x1) = pool_bounds(j, cols, w);
                            let d = dy[(p * rows + i) * cols + j].as_f64()
                                / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    let t = &mut plane[y * w + xx];
                                    *t = T::from_f64(t.as_f64() + d);
                                }
                            }
                        }
                    }
                }
            }
            Op::Broadcast2d(x) => {
                let plane = node.shape[2] * node.shape[3];
                let n = val(*x).len();
                acc(
                    g,
                    *x,
                    dy.chunks(plane)
                        .map(|c| T::from_f64(c.iter().map(|v| v.as_f64()).sum())),
                    n,
                );
            }
            Op::PairwiseSqDist(a, b) => {
                let d = self.nodes[a.0].shape[1];
                let (n1, n2) = (node.shape[0], node.shape[1]);
                let av = val(*a);
                let bv = val(*b);
                let mut da = vec![0f64; n1 * d];
                let mut db = vec![0f64; n2 * d];
                for i in 0..n1 {
                    for j in 0..n2 {
                        let gij = 2.0 * dy[i * n2 + j].as_f64();
                        for k in 0..d {
                            let diff = av[i * d + k].as_f64() - bv[j * d + k].as_f64();
                            da[i * d + k] += gij * diff;
                            db[j * d + k] -= gij * diff;
                        }
                    }
                }
                if ng(*a) {
                    acc(g, *a, da.into_iter().map(T::from_f64), n1 * d);
                }
                if ng(*b) {
                    acc(g, *b, db.into_iter().map(T::from_f64), n2 * d);
                }
            }
            Op::Sinkhorn { cost, solution } => {
                let c: Vec<f64> = val(*cost).iter().map(|v| v.as_f64()).collect();
                let dc = sinkhorn::value_grad(solution, &c, dy[0].as_f64());
                let n = dc.len();
                acc(g, *cost, dc.into_iter().map(T::from_f64), n);
            }
        }
    }
}

fn pool_bounds(i: usize, cells: usize, len: usize) -> (usize, usize) {
    let lo = i * len / cells;
    let hi = ((i + 1) * len).div_ceil(cells);
    (lo, hi)
}

fn slot<T: Real>(g: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    g[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn acc<T: Real>(g: &mut [Option<Vec<T>>], v: Var, it: impl Iterator<Item = T>, len: usize) {
    match &mut g[v.0] {
        Some(buf) => {
            for (t, d) in buf.iter_mut().zip(it) {
                *t = *t + d;
            }
        }
        slot @ None => {
            let buf: Vec<T> = it.collect();
            debug_assert_eq!(buf.len(), len);
            *slot = Some(buf);
        }
    }
}

/// Output of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    params: Vec<(ParamId, Vec<T>)>,
    all: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradients of every trainable parameter used by the graph, by id.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    /// Gradient with respect to a leaf created by [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.all.get(v.0).and_then(|g| g.as_deref())
    }
}
