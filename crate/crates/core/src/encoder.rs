//! Mask encoder: per-frame convolutions, spatial pooling and two LSTMs
//! turning an event mask sequence into the context embedding `c`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{merge_time, split_time, time_step};
use crate::nn::{
    BatchNorm, BatchNormSpec, Conv2d, Conv2dSpec, Graph, Group, Lstm, LstmSpec, ParamStore, Var,
    DEFAULT_LEAKY_SLOPE,
};
use crate::tensor::Real;

/// How each conv feature map is reduced before the LSTMs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pooling {
    /// One average per channel.
    Global,
    /// Adaptive averages on a fixed grid, keeping coarse position.
    Grid { rows: usize, cols: usize },
}

impl Pooling {
    fn cells(&self) -> (usize, usize) {
        match *self {
            Pooling::Global => (1, 1),
            Pooling::Grid { rows, cols } => (rows, cols),
        }
    }
}

/// How the generator reads the N×T×d_c embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    Last,
    Mean,
    /// Step t of the generator sees c_t.
    PerTimestep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskEncoderSpec {
    /// Number of event classes K.
    pub classes: usize,
    pub conv_channels: [usize; 3],
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_padding")]
    pub padding: usize,
    pub pooling: Pooling,
    pub lstm_hidden: usize,
    /// Output width d_c.
    pub context_dim: usize,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

fn default_kernel() -> usize {
    3
}

fn default_stride() -> usize {
    2
}

fn default_padding() -> usize {
    1
}

pub(crate) fn default_slope() -> f64 {
    DEFAULT_LEAKY_SLOPE
}

impl MaskEncoderSpec {
    pub fn new(classes: usize) -> Self {
        MaskEncoderSpec {
            classes,
            conv_channels: [16, 32, 64],
            kernel: 3,
            stride: 2,
            padding: 1,
            pooling: Pooling::Global,
            lstm_hidden: 64,
            context_dim: 64,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn conv_stages(&self) -> [Conv2dSpec; 3] {
        let mut cin = self.classes;
        self.conv_channels.map(|cout| {
            let s = Conv2dSpec::square(cin, cout, self.kernel, self.stride, self.padding);
            cin = cout;
            s
        })
    }

    /// Width of the pooled per-frame vector fed to the first LSTM.
    pub fn pooled_size(&self) -> usize {
        let (r, c) = self.pooling.cells();
        self.conv_channels[2] * r * c
    }

    /// Checks the spec against an H×W input.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.classes == 0 || self.lstm_hidden == 0 || self.context_dim == 0 {
            return Err(Error::config("encoder widths must be positive"));
        }
        if self.conv_channels.contains(&0) || self.kernel == 0 || self.stride == 0 {
            return Err(Error::config("encoder convolutions must be non-empty"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("leaky slope must lie in (0, 1)"));
        }
        let mut hw = (height, width);
        for s in self.conv_stages() {
            hw = s.output_hw(hw.0, hw.1).map_err(|e| Error::config(e.to_string()))?;
        }
        let (r, c) = self.pooling.cells();
        if r == 0 || c == 0 {
            return Err(Error::config(format!("pooling grid {r}x{c} is empty")));
        }
        Ok(())
    }
}

pub struct MaskEncoder {
    pub spec: MaskEncoderSpec,
    convs: Vec<(Conv2d, BatchNorm)>,
    lstm1: Lstm,
    norm: BatchNorm,
    lstm2: Lstm,
}

impl MaskEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        spec: &MaskEncoderSpec,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate(height, width)?;
        let group = Group::Generator;
        let mut convs = Vec::with_capacity(3);
        for (i, s) in spec.conv_stages().into_iter().enumerate() {
            let conv = Conv2d::new(store, &format!("encoder.conv{i}"), group, s, rng)?;
            let bn = BatchNorm::new(store, &format!("encoder.conv{i}.bn"), group, BatchNormSpec::new(s.out_channels))?;
            convs.push((conv, bn));
        }
        let lstm1 = Lstm::new(
            store,
            "encoder.lstm1",
            group,
            LstmSpec {
                input_size: spec.pooled_size(),
                hidden_size: spec.lstm_hidden,
            },
            rng,
        )?;
        let norm = BatchNorm::new(store, "encoder.lstm_bn", group, BatchNormSpec::new(spec.lstm_hidden))?;
        let lstm2 = Lstm::new(
            store,
            "encoder.lstm2",
            group,
            LstmSpec {
                input_size: spec.lstm_hidden,
                hidden_size: spec.context_dim,
            },
            rng,
        )?;
        Ok(MaskEncoder {
            spec: spec.clone(),
            convs,
            lstm1,
            norm,
            lstm2,
        })
    }

    /// N×T×K×H×W mask → N×T×d_c context.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, mask: Var) -> Result<Var> {
        let s = g.shape(mask).to_vec();
        if s.len() != 5 || s[2] != self.spec.classes {
            return Err(Error::shape(format!(
                "mask batch must be N×T×{}×H×W, got {s:?}",
                self.spec.classes
            )));
        }
        let (n, t) = (s[0], s[1]);
        let mut x = merge_time(g, mask)?;
        for (conv, bn) in &self.convs {
            x = conv.forward(g, x)?;
            x = bn.forward(g, x)?;
            x = g.leaky_relu(x, self.spec.leaky_slope);
        }
        let (r, c) = self.spec.pooling.cells();
        let pooled = g.avg_pool(x, r, c)?;
        let flat = g.reshape(pooled, &[n * t, self.spec.pooled_size()])?;
        let seq = split_time(g, flat, n, t)?;
        let h1 = self.lstm1.forward_seq(g, seq)?;
        let h1 = merge_time(g, h1)?;
        let h1 = self.norm.forward(g, h1)?;
        let h1 = split_time(g, h1, n, t)?;
        self.lstm2.forward_seq(g, h1)
    }
}

/// Reduces an N×T×d_c embedding to N×d_c. `PerTimestep` is not a
/// reduction and is rejected.
pub fn pool_context<T: Real>(g: &mut Graph<'_, T>, c: Var, mode: ContextMode) -> Result<Var> {
    let s = g.shape(c).to_vec();
    if s.len() != 3 || s[1] == 0 {
        return Err(Error::shape(format!("context must be N×T×d_c, got {s:?}")));
    }
    match mode {
        ContextMode::Last => time_step(g, c, s[1] - 1),
        ContextMode::Mean => {
            let mut acc = time_step(g, c, 0)?;
            for t in 1..s[1] {
                let ct = time_step(g, c, t)?;
                acc = g.add(acc, ct)?;
            }
            Ok(g.scale(acc, 1.0 / s[1] as f64))
        }
        ContextMode::PerTimestep => Err(Error::config("per-timestep context has no pooled form")),
    }
}

/// The context each generator step sees, N×T×d_c.
pub fn generator_context<T: Real>(g: &mut Graph<'_, T>, c: Var, mode: ContextMode) -> Result<Var> {
    if mode == ContextMode::PerTimestep {
        return Ok(c);
    }
    let s = g.shape(c).to_vec();
    let pooled = pool_context(g, c, mode)?;
    let row = g.reshape(pooled, &[s[0], 1, s[2]])?;
    g.concat(&vec![row; s[1]], 1)
}
