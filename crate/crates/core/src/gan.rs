//! Conditioned generator and the critic pair `h`, `M`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{default_slope, generator_context, ContextMode};
use crate::error::{Error, Result};
use crate::nn::layers::{merge_time, split_time};
use crate::nn::{
    BatchNorm, BatchNormSpec, Conv2d, Conv2dSpec, ConvTranspose2d, Graph, Group, Linear, Lstm,
    LstmSpec, ParamStore, Var,
};
use crate::tensor::{Real, Tensor};

/// Per-timestep i.i.d. standard normal noise of width `dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub dim: usize,
}

impl NoiseSpec {
    /// N×T×d_z sample drawn from a generator seeded by `(seed, stream)`.
    pub fn sample(&self, n: usize, t: usize, seed: u64, stream: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let data = (0..n * t * self.dim)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        Tensor::new(vec![n, t, self.dim], data).expect("noise shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Tanh,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub noise: NoiseSpec,
    pub context_mode: ContextMode,
    pub lstm_hidden: usize,
    /// Channels of the seed map, which has H/2^s × W/2^s pixels for s
    /// upsampling stages.
    pub seed_channels: usize,
    /// Output channels of each stride-2 transposed convolution.
    pub upsample_channels: Vec<usize>,
    pub output: OutputActivation,
    /// Join the mask frame to the last feature map before the output head,
    /// so frame t can place intensity where mask t is set.
    #[serde(default = "default_true")]
    pub mask_skip: bool,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

impl GeneratorSpec {
    pub fn new(noise_dim: usize) -> Self {
        GeneratorSpec {
            noise: NoiseSpec { dim: noise_dim },
            context_mode: ContextMode::Last,
            lstm_hidden: 64,
            seed_channels: 32,
            upsample_channels: vec![32, 16],
            output: OutputActivation::Tanh,
            mask_skip: true,
            leaky_slope: default_slope(),
        }
    }

    /// Seed map extent for C×H×W frames.
    pub fn seed_hw(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let f = 1usize << self.upsample_channels.len();
        if !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(Error::config(format!(
                "{height}x{width} frames are not divisible by {f} for {} upsampling stages",
                self.upsample_channels.len()
            )));
        }
        Ok((height / f, width / f))
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.noise.dim == 0 || self.lstm_hidden == 0 || self.seed_channels == 0 {
            return Err(Error::config("generator widths must be positive"));
        }
        if self.upsample_channels.contains(&0) {
            return Err(Error::config("upsampling stages need at least one channel"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("leaky slope must lie in (0, 1)"));
        }
        self.seed_hw(height, width).map(|_| ())
    }
}

/// LSTM over [z_t, c_t] followed by a per-frame upsampling head.
pub struct Generator {
    pub spec: GeneratorSpec,
    channels: usize,
    height: usize,
    width: usize,
    seed_hw: (usize, usize),
    lstm: Lstm,
    project: Linear,
    ups: Vec<(ConvTranspose2d, BatchNorm)>,
    head: Conv2d,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        spec: &GeneratorSpec,
        context_dim: usize,
        classes: usize,
        frame: (usize, usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        let (channels, height, width) = frame;
        spec.validate(height, width)?;
        let group = Group::Generator;
        let seed_hw = spec.seed_hw(height, width)?;
        let lstm = Lstm::new(
            store,
            "generator.lstm",
            group,
            LstmSpec {
                input_size: spec.noise.dim + context_dim,
                hidden_size: spec.lstm_hidden,
            },
            rng,
        )?;
        let project = Linear::new(
            store,
            "generator.seed",
            group,
            spec.lstm_hidden,
            spec.seed_channels * seed_hw.0 * seed_hw.1,
            rng,
        )?;
        let mut ups = Vec::new();
        let mut cin = spec.seed_channels;
        for (i, &cout) in spec.upsample_channels.iter().enumerate() {
            let t = ConvTranspose2d::new(
                store,
                &format!("generator.up{i}"),
                group,
                Conv2dSpec::square(cin, cout, 4, 2, 1),
                rng,
            )?;
            let bn = BatchNorm::new(store, &format!("generator.up{i}.bn"), group, BatchNormSpec::new(cout))?;
            ups.push((t, bn));
            cin = cout;
        }
        let features = cin;
        if spec.mask_skip {
            cin += classes;
        }
        let head = Conv2d::new(store, "generator.head", group, Conv2dSpec::square(cin, channels, 1, 1, 0), rng)?;
        // the skip starts closed so an untrained generator ignores mask layout
        let w = store.param_mut(head.weight).value.data_mut();
        for row in w.chunks_mut(cin) {
            row[features..].fill(0.0);
        }
        Ok(Generator {
            spec: spec.clone(),
            channels,
            height,
            width,
            seed_hw,
            lstm,
            project,
            ups,
            head,
        })
    }

    /// z: N×T×d_z, c: N×T×d_c (the full encoder output), mask:
    /// N×T×K×H×W → N×T×C×H×W.
    pub fn generate<T: Real>(&self, g: &mut Graph<'_, T>, z: Var, c: Var, mask: Var) -> Result<Var> {
        let zs = g.shape(z).to_vec();
        let cs = g.shape(c).to_vec();
        if zs.len() != 3 || zs[2] != self.spec.noise.dim || cs.len() != 3 || cs[..2] != zs[..2] {
            return Err(Error::shape(format!("generator inputs z {zs:?}, c {cs:?}")));
        }
        let (n, t) = (zs[0], zs[1]);
        let ctx = generator_context(g, c, self.spec.context_mode)?;
        let input = g.concat(&[z, ctx], 2)?;
        let hidden = self.lstm.forward_seq(g, input)?;
        let flat = merge_time(g, hidden)?;
        let seed = self.project.forward(g, flat)?;
        let (sh, sw) = self.seed_hw;
        let mut x = g.reshape(seed, &[n * t, self.spec.seed_channels, sh, sw])?;
        for (up, bn) in &self.ups {
            x = up.forward(g, x)?;
            x = bn.forward(g, x)?;
            x = g.leaky_relu(x, self.spec.leaky_slope);
        }
        if self.spec.mask_skip {
            let ms = g.shape(mask).to_vec();
            if ms.len() != 5 || ms[..2] != zs[..2] || ms[3..] != [self.height, self.width] {
                return Err(Error::shape(format!("generator mask {ms:?}")));
            }
            let mf = merge_time(g, mask)?;
            x = g.concat(&[x, mf], 1)?;
        }
        let mut out = self.head.forward(g, x)?;
        if self.spec.output == OutputActivation::Tanh {
            out = g.tanh(out);
        }
        let out = split_time(g, out, n, t)?;
        debug_assert_eq!(g.shape(out), &[n, t, self.channels, self.height, self.width]);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticSpec {
    pub conv_channels: Vec<usize>,
    #[serde(default = "default_critic_kernel")]
    pub kernel: usize,
    #[serde(default = "default_critic_stride")]
    pub stride: usize,
    #[serde(default = "default_critic_padding")]
    pub padding: usize,
    pub lstm_hidden: usize,
    /// Feature width J, shared by `h` and `M`.
    pub features: usize,
    /// Whether `M` sees the context; `h` always does.
    #[serde(default = "default_true")]
    pub condition_m: bool,
    /// Feed the raw mask frames as extra input channels of every
    /// conditioned critic, next to the context offset.
    #[serde(default = "default_true")]
    pub mask_input: bool,
    /// Squashing of the J features. `tanh` keeps the causal cost term
    /// bounded so the critics cannot win by scaling their outputs.
    #[serde(default = "default_feature_activation")]
    pub feature_activation: OutputActivation,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

fn default_critic_kernel() -> usize {
    3
}

fn default_critic_stride() -> usize {
    2
}

fn default_critic_padding() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_feature_activation() -> OutputActivation {
    OutputActivation::Tanh
}

impl CriticSpec {
    pub fn new(features: usize) -> Self {
        CriticSpec {
            conv_channels: vec![16, 32, 32],
            kernel: 3,
            stride: 2,
            padding: 1,
            lstm_hidden: 64,
            features,
            condition_m: true,
            mask_input: true,
            feature_activation: OutputActivation::Tanh,
            leaky_slope: default_slope(),
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::config("critics need at least one non-empty convolution"));
        }
        if self.lstm_hidden == 0 || self.features == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::config("critic widths must be positive"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("leaky slope must lie in (0, 1)"));
        }
        let (mut h, mut w) = (height, width);
        for &c in &self.conv_channels {
            (h, w) = Conv2dSpec::square(1, c, self.kernel, self.stride, self.padding)
                .output_hw(h, w)
                .map_err(|e| Error::config(e.to_string()))?;
        }
        Ok(())
    }
}

/// Per-frame convolutions on x_t (joined by the mask frame when enabled),
/// with c_t projected to a per-channel offset of the first convolution's
/// output, then an LSTM and a linear read-out of J features per step.
pub struct Critic {
    cond: Option<Linear>,
    mask_input: bool,
    activation: OutputActivation,
    slope: f64,
    convs: Vec<Conv2d>,
    flat: usize,
    lstm: Lstm,
    out: Linear,
}

impl Critic {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: &CriticSpec,
        conditioned: bool,
        context_dim: usize,
        classes: usize,
        frame: (usize, usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        let (channels, mut h, mut w) = frame;
        let group = Group::Critic;
        let mask_input = conditioned && spec.mask_input;
        let mut cin = channels + if mask_input { classes } else { 0 };
        let mut convs = Vec::new();
        for (i, &cout) in spec.conv_channels.iter().enumerate() {
            let s = Conv2dSpec::square(cin, cout, spec.kernel, spec.stride, spec.padding);
            (h, w) = s.output_hw(h, w)?;
            convs.push(Conv2d::new(store, &format!("{name}.conv{i}"), group, s, rng)?);
            cin = cout;
        }
        let flat = cin * h * w;
        let cond = if conditioned {
            let width = spec.conv_channels[0];
            Some(Linear::new(store, &format!("{name}.cond"), group, context_dim, width, rng)?)
        } else {
            None
        };
        let lstm = Lstm::new(
            store,
            &format!("{name}.lstm"),
            group,
            LstmSpec {
                input_size: flat,
                hidden_size: spec.lstm_hidden,
            },
            rng,
        )?;
        let out = Linear::new(store, &format!("{name}.out"), group, spec.lstm_hidden, spec.features, rng)?;
        Ok(Critic {
            cond,
            mask_input,
            activation: spec.feature_activation,
            slope: spec.leaky_slope,
            convs,
            flat,
            lstm,
            out,
        })
    }

    /// x: N×T×C×H×W, c: N×T×d_c, mask: N×T×K×H×W → N×T×J.
    pub fn embed<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, c: Var, mask: Var) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(Error::shape(format!("critic input must be N×T×C×H×W, got {xs:?}")));
        }
        let (n, t) = (xs[0], xs[1]);
        let mut frames = merge_time(g, x)?;
        if self.mask_input {
            let ms = g.shape(mask).to_vec();
            if ms.len() != 5 || ms[..2] != xs[..2] || ms[3..] != xs[3..] {
                return Err(Error::shape(format!("critic mask {ms:?} for input {xs:?}")));
            }
            let mf = merge_time(g, mask)?;
            frames = g.concat(&[frames, mf], 1)?;
        }
        let offset = match &self.cond {
            Some(lin) => {
                let cs = g.shape(c).to_vec();
                if cs.len() != 3 || cs[..2] != xs[..2] {
                    return Err(Error::shape(format!("critic context {cs:?} for input {xs:?}")));
                }
                let cf = merge_time(g, c)?;
                Some(lin.forward(g, cf)?)
            }
            None => None,
        };
        for (i, conv) in self.convs.iter().enumerate() {
            frames = conv.forward(g, frames)?;
            if let (0, Some(o)) = (i, offset) {
                let s = g.shape(frames).to_vec();
                let planes = g.broadcast2d(o, s[2], s[3])?;
                frames = g.add(frames, planes)?;
            }
            frames = g.leaky_relu(frames, self.slope);
        }
        let flat = g.reshape(frames, &[n * t, self.flat])?;
        let seq = split_time(g, flat, n, t)?;
        let hidden = self.lstm.forward_seq(g, seq)?;
        let hidden = merge_time(g, hidden)?;
        let mut feats = self.out.forward(g, hidden)?;
        if self.activation == OutputActivation::Tanh {
            feats = g.tanh(feats);
        }
        split_time(g, feats, n, t)
    }
}

/// The two critics with disjoint parameters.
pub struct Critics {
    pub spec: CriticSpec,
    pub h: Critic,
    pub m: Critic,
}

impl Critics {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        spec: &CriticSpec,
        context_dim: usize,
        classes: usize,
        frame: (usize, usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate(frame.1, frame.2)?;
        let h = Critic::new(store, "critic_h", spec, true, context_dim, classes, frame, rng)?;
        let m = Critic::new(store, "critic_m", spec, spec.condition_m, context_dim, classes, frame, rng)?;
        Ok(Critics {
            spec: spec.clone(),
            h,
            m,
        })
    }

    pub fn embed_h<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, c: Var, mask: Var) -> Result<Var> {
        self.h.embed(g, x, c, mask)
    }

    pub fn embed_m<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, c: Var, mask: Var) -> Result<Var> {
        self.m.embed(g, x, c, mask)
    }
}
