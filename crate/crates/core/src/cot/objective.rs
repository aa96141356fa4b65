//! Causal transport cost, mixed divergence, martingale penalty and the
//! two adversarial losses, all expressed on graph variables.

use crate::error::{Error, Result};
use crate::nn::{Graph, Var};
use crate::tensor::Real;

use super::sinkhorn::SinkhornConfig;

/// One batch of sequences with its critic features.
///
/// `seq` is B×T×D (any trailing frame shape is flattened), `h` and `m`
/// are B×T×J. Without features only the base cost is used.
#[derive(Debug, Clone, Copy)]
pub struct Side {
    pub seq: Var,
    pub features: Option<(Var, Var)>,
}

impl Side {
    pub fn plain(seq: Var) -> Self {
        Side {
            seq,
            features: None,
        }
    }

    pub fn with_features(seq: Var, h: Var, m: Var) -> Self {
        Side {
            seq,
            features: Some((h, m)),
        }
    }
}

fn flatten_seq<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Result<(Var, usize, usize)> {
    let s = g.shape(x).to_vec();
    if s.len() < 3 {
        return Err(Error::shape(format!("sequence batch needs B×T×..., got {s:?}")));
    }
    let per_frame: usize = s[2..].iter().product();
    let flat = g.reshape(x, &[s[0], s[1] * per_frame])?;
    Ok((flat, s[1], per_frame))
}

/// Entry (i,j) = Σ_t ‖a_i,t − b_j,t‖².
pub fn base_cost<T: Real>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Result<Var> {
    let sa = g.shape(a).to_vec();
    let sb = g.shape(b).to_vec();
    if sa.len() < 3 || sa[1..] != sb[1..] {
        return Err(Error::shape(format!("base_cost: {sa:?} vs {sb:?}")));
    }
    let (fa, _, _) = flatten_seq(g, a)?;
    let (fb, _, _) = flatten_seq(g, b)?;
    g.pairwise_sq_dist(fa, fb)
}

/// Time increments M_{t+1} − M_t, N×(T−1)×J.
pub fn increments<T: Real>(g: &mut Graph<'_, T>, m: Var) -> Result<Var> {
    let s = g.shape(m).to_vec();
    if s.len() != 3 || s[1] < 2 {
        return Err(Error::shape(format!("increments need N×T×J with T ≥ 2, got {s:?}")));
    }
    let next = g.slice(m, 1, 1, s[1] - 1)?;
    let prev = g.slice(m, 1, 0, s[1] - 1)?;
    g.sub(next, prev)
}

/// Adds λ · Σ_j' Σ_{t<T} h_b[j,t,j'] · ΔM_a[i,t,j'] to `cbase`.
pub fn causal_cost<T: Real>(
    g: &mut Graph<'_, T>,
    cbase: Var,
    h_b: Var,
    dm_a: Var,
    lambda: f64,
) -> Result<Var> {
    let sh = g.shape(h_b).to_vec();
    let sm = g.shape(dm_a).to_vec();
    let sc = g.shape(cbase).to_vec();
    if sh.len() != 3 || sm.len() != 3 || sh[1] != sm[1] + 1 || sh[2] != sm[2] {
        return Err(Error::shape(format!("causal_cost: h {sh:?}, ΔM {sm:?}")));
    }
    if sc != [sm[0], sh[0]] {
        return Err(Error::shape(format!("causal_cost: base {sc:?} vs {}×{}", sm[0], sh[0])));
    }
    if lambda == 0.0 {
        return Ok(cbase);
    }
    let steps = sm[1];
    let h_head = g.slice(h_b, 1, 0, steps)?;
    let h_flat = g.reshape(h_head, &[sh[0], steps * sh[2]])?;
    let m_flat = g.reshape(dm_a, &[sm[0], steps * sm[2]])?;
    let cross = g.matmul_nt(m_flat, h_flat)?;
    let cross = g.scale(cross, lambda);
    g.add(cbase, cross)
}

/// Transport cost between two sides: per-dimension normalized base cost
/// plus the causal term when both sides carry features.
pub fn pair_cost<T: Real>(g: &mut Graph<'_, T>, a: &Side, b: &Side, lambda: f64) -> Result<Var> {
    let base = base_cost(g, a.seq, b.seq)?;
    let s = g.shape(a.seq);
    let scale = 1.0 / s[1..].iter().product::<usize>() as f64;
    let base = g.scale(base, scale);
    match (a.features, b.features) {
        (Some((_, m_a)), Some((h_b, _))) if lambda > 0.0 => {
            let dm = increments(g, m_a)?;
            causal_cost(g, base, h_b, dm, lambda)
        }
        _ => Ok(base),
    }
}

pub fn sinkhorn_value<T: Real>(g: &mut Graph<'_, T>, cost: Var, cfg: &SinkhornConfig) -> Result<Var> {
    g.sinkhorn(cost, cfg.epsilon, cfg.iterations)
}

/// W(x,y') + W(x',y) − W(x,x') − W(y',y) with `x`, `x2` real and `y`, `y2`
/// generated. Each term is cancelled exactly by its partner when y = x and
/// y' = x'.
pub fn mixed_divergence<T: Real>(
    g: &mut Graph<'_, T>,
    x: &Side,
    x2: &Side,
    y: &Side,
    y2: &Side,
    cfg: &SinkhornConfig,
) -> Result<Var> {
    let lambda = cfg.causal_weight;
    let term = |g: &mut Graph<'_, T>, a: &Side, b: &Side| -> Result<Var> {
        let c = pair_cost(g, a, b, lambda)?;
        sinkhorn_value(g, c, cfg)
    };
    let w_xy = term(g, x, y2)?;
    let w_xy2 = term(g, x2, y)?;
    let w_xx = term(g, x, x2)?;
    let w_yy = term(g, y2, y)?;
    let pos = g.add(w_xy, w_xy2)?;
    let neg = g.add(w_xx, w_yy)?;
    g.sub(pos, neg)
}

/// Σ_j' Σ_t | mean over the batch of ΔM[·,t,j'] |.
pub fn martingale_penalty<T: Real>(g: &mut Graph<'_, T>, m: Var) -> Result<Var> {
    if g.shape(m).first().copied().unwrap_or(0) < 2 {
        return Err(Error::shape("martingale penalty needs a batch of at least 2"));
    }
    let dm = increments(g, m)?;
    let mean = g.mean_axis0(dm)?;
    let a = g.abs(mean);
    Ok(g.sum(a))
}

/// Scalars of one adversarial evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Losses {
    pub divergence: Var,
    pub penalty: Var,
    /// Minimized by the generator (and encoder).
    pub generator: Var,
    /// Minimized by the critics: −divergence + weight · penalty.
    pub discriminator: Var,
}

/// Builds both losses. The penalty is taken on the real batches joined
/// along the batch axis; `m_real` must be that joined N×T×J tensor.
pub fn adversarial_losses<T: Real>(
    g: &mut Graph<'_, T>,
    real: (&Side, &Side),
    fake: (&Side, &Side),
    m_real: Var,
    cfg: &SinkhornConfig,
    penalty_weight: f64,
) -> Result<Losses> {
    let divergence = mixed_divergence(g, real.0, real.1, fake.0, fake.1, cfg)?;
    let penalty = martingale_penalty(g, m_real)?;
    let neg = g.scale(divergence, -1.0);
    let weighted = g.scale(penalty, penalty_weight);
    let discriminator = g.add(neg, weighted)?;
    Ok(Losses {
        divergence,
        penalty,
        generator: divergence,
        discriminator,
    })
}
