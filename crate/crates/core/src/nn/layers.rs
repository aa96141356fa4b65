//! Layer types with their parameter handles.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::conv::{conv_out_len, conv_t_out_len};
use super::graph::{Graph, Var};
use super::params::{uniform_tensor, BufferId, Group, ParamId, ParamStore};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn square(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        }
    }

    /// `⌊(in + 2·pad − kernel)/stride⌋ + 1` per axis; an error if either is < 1.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match (
            conv_out_len(h, self.kernel_h, self.stride, self.padding),
            conv_out_len(w, self.kernel_w, self.stride, self.padding),
        ) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::shape(format!(
                "convolution {self:?} has no output for a {h}x{w} input"
            ))),
        }
    }

    /// Output extent when the spec is used as a transposed convolution.
    pub fn transposed_output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match (
            conv_t_out_len(h, self.kernel_h, self.stride, self.padding),
            conv_t_out_len(w, self.kernel_w, self.stride, self.padding),
        ) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::shape(format!(
                "transposed convolution {self:?} has no output for a {h}x{w} input"
            ))),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel_h == 0
            || self.kernel_w == 0
            || self.stride == 0
        {
            return Err(Error::config(format!("invalid convolution {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmSpec {
    pub input_size: usize,
    pub hidden_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormSpec {
    pub features: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_bn_eps")]
    pub eps: f64,
}

fn default_momentum() -> f64 {
    0.1
}

fn default_bn_eps() -> f64 {
    1e-5
}

impl BatchNormSpec {
    pub fn new(features: usize) -> Self {
        BatchNormSpec {
            features,
            momentum: default_momentum(),
            eps: default_bn_eps(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub spec: Conv2dSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        spec: Conv2dSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w;
        let bound = (1.0 / fan_in as f64).sqrt();
        let weight = store.add_param(
            format!("{name}.weight"),
            group,
            uniform_tensor(
                rng,
                &[spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w],
                bound,
            ),
        );
        let bias = store.add_param(
            format!("{name}.bias"),
            group,
            uniform_tensor(rng, &[spec.out_channels], bound),
        );
        Ok(Conv2d { spec, weight, bias })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, b, self.spec.stride, self.spec.padding)
    }
}

/// Transposed convolution; `spec.in_channels` is the input depth.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub spec: Conv2dSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        spec: Conv2dSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w;
        let bound = (1.0 / fan_in as f64).sqrt();
        let weight = store.add_param(
            format!("{name}.weight"),
            group,
            uniform_tensor(
                rng,
                &[spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w],
                bound,
            ),
        );
        let bias = store.add_param(
            format!("{name}.bias"),
            group,
            uniform_tensor(rng, &[spec.out_channels], bound),
        );
        Ok(ConvTranspose2d { spec, weight, bias })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv_transpose2d(x, w, b, self.spec.stride, self.spec.padding)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input == 0 || output == 0 {
            return Err(Error::config(format!("linear layer {name} with a zero dimension")));
        }
        let bound = (1.0 / input as f64).sqrt();
        let weight = store.add_param(
            format!("{name}.weight"),
            group,
            uniform_tensor(rng, &[input, output], bound),
        );
        let bias = store.add_param(
            format!("{name}.bias"),
            group,
            uniform_tensor(rng, &[output], bound),
        );
        Ok(Linear {
            input,
            output,
            weight,
            bias,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub spec: BatchNormSpec,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, spec: BatchNormSpec) -> Result<Self> {
        if spec.features == 0 || !(spec.eps > 0.0) || !(0.0..=1.0).contains(&spec.momentum) {
            return Err(Error::config(format!("invalid batch norm {spec:?}")));
        }
        let f = [spec.features];
        Ok(BatchNorm {
            spec,
            gamma: store.add_param(format!("{name}.gamma"), group, Tensor::full(&f, 1.0)),
            beta: store.add_param(format!("{name}.beta"), group, Tensor::zeros(&f)),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&f)),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&f, 1.0)),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.batchnorm(
            x,
            gamma,
            beta,
            self.running_mean,
            self.running_var,
            self.spec.eps,
            self.spec.momentum,
        )
    }
}

/// Gate order inside [`Lstm::gates`].
pub const LSTM_GATES: [&str; 4] = ["input", "forget", "output", "candidate"];

#[derive(Debug, Clone)]
pub struct LstmGate {
    /// (input + hidden) × hidden.
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Standard LSTM cell: sigmoid input/forget/output gates, tanh candidate,
/// `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub spec: LstmSpec,
    pub gates: [LstmGate; 4],
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        spec: LstmSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.input_size == 0 || spec.hidden_size == 0 {
            return Err(Error::config(format!("invalid LSTM {spec:?}")));
        }
        let rows = spec.input_size + spec.hidden_size;
        let bound = (1.0 / rows as f64).sqrt();
        let mut make = |gate: &str| LstmGate {
            weight: store.add_param(
                format!("{name}.{gate}.weight"),
                group,
                uniform_tensor(rng, &[rows, spec.hidden_size], bound),
            ),
            bias: store.add_param(
                format!("{name}.{gate}.bias"),
                group,
                uniform_tensor(rng, &[spec.hidden_size], bound),
            ),
        };
        let gates = LSTM_GATES.map(&mut make);
        Ok(Lstm { spec, gates })
    }

    pub fn zero_state<T: Real>(&self, g: &mut Graph<'_, T>, batch: usize) -> (Var, Var) {
        let z = Tensor::zeros(&[batch, self.spec.hidden_size]);
        (g.constant(&z), g.constant(&z))
    }

    /// One time step; returns the new `(h, c)`.
    pub fn step<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, state: (Var, Var)) -> Result<(Var, Var)> {
        let (h, c) = state;
        let xs = g.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != self.spec.input_size {
            return Err(Error::shape(format!(
                "LSTM expects N×{} input, got {xs:?}",
                self.spec.input_size
            )));
        }
        let hs = [xs[0], self.spec.hidden_size];
        if g.shape(h) != hs || g.shape(c) != hs {
            return Err(Error::shape(format!(
                "LSTM state shapes {:?}/{:?}, expected {hs:?}",
                g.shape(h),
                g.shape(c)
            )));
        }
        let xh = g.concat(&[x, h], 1)?;
        let mut pre = Vec::with_capacity(4);
        for gate in &self.gates {
            let w = g.param(gate.weight);
            let b = g.param(gate.bias);
            pre.push(g.linear(xh, w, Some(b))?);
        }
        let i = g.sigmoid(pre[0]);
        let f = g.sigmoid(pre[1]);
        let o = g.sigmoid(pre[2]);
        let cand = g.tanh(pre[3]);
        let fc = g.mul(f, c)?;
        let ig = g.mul(i, cand)?;
        let c_next = g.add(fc, ig)?;
        let tc = g.tanh(c_next);
        let h_next = g.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    /// Runs the cell over `x` (N×T×I) from a zero state; returns N×T×H.
    pub fn forward_seq<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape(format!("LSTM sequence input of shape {xs:?}")));
        }
        let (n, t_len) = (xs[0], xs[1]);
        let mut state = self.zero_state(g, n);
        let mut outputs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = time_step(g, x, t)?;
            state = self.step(g, xt, state)?;
            outputs.push(g.reshape(state.0, &[n, 1, self.spec.hidden_size])?);
        }
        g.concat(&outputs, 1)
    }
}

/// Slice `t` of an N×T×F sequence as an N×F matrix.
pub fn time_step<T: Real>(g: &mut Graph<'_, T>, x: Var, t: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let sl = g.slice(x, 1, t, 1)?;
    let rest: usize = s[2..].iter().product();
    g.reshape(sl, &[s[0], rest])
}

/// N×T×… → (N·T)×…, for applying per-frame layers.
pub fn merge_time<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() < 3 {
        return Err(Error::shape(format!("expected a sequence tensor, got {s:?}")));
    }
    let mut shape = vec![s[0] * s[1]];
    shape.extend_from_slice(&s[2..]);
    g.reshape(x, &shape)
}

/// (N·T)×… → N×T×….
pub fn split_time<T: Real>(g: &mut Graph<'_, T>, x: Var, n: usize, t: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s[0] != n * t {
        return Err(Error::shape(format!("cannot split {} rows into {n}x{t}", s[0])));
    }
    let mut shape = vec![n, t];
    shape.extend_from_slice(&s[1..]);
    g.reshape(x, &shape)
}
