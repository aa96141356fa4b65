//! Central finite-difference checks of graph gradients.
//!
//! The loss is re-evaluated in `f64` with one coordinate shifted by
//! `±step`; only the forward pass is used, so the check is independent of
//! the backward rules it validates.
//!
//! A central difference whose interval straddles a leaky ReLU or abs kink
//! measures an average of two slopes, not the derivative. When the
//! activation sign pattern at `±step` differs from the unperturbed one, the
//! step is halved (down to `step / 2^MAX_HALVINGS`) until both sides stay
//! on the same piece. Such coordinates are counted in `kink_adjusted`.

use crate::error::Result;

use super::graph::{Graph, Mode, Var};
use super::params::{ParamId, ParamStore};

/// Coordinates where both gradients are below this magnitude count as equal.
pub const ABS_FLOOR: f64 = 1e-10;

pub const MAX_HALVINGS: u32 = 12;

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub within_tol: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
    /// Coordinates evaluated with a reduced step to avoid a kink.
    pub kink_adjusted: usize,
}

impl GradCheckReport {
    pub fn fraction_within(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.within_tol as f64 / self.checked as f64
        }
    }

    pub fn passes(&self, min_fraction: f64, max_rel: f64) -> bool {
        self.fraction_within() >= min_fraction && self.max_rel_err <= max_rel
    }

    fn record(&mut self, param: &str, index: usize, analytic: f64, numeric: f64, tol: f64) {
        let rel = relative_error(analytic, numeric);
        self.checked += 1;
        if rel <= tol {
            self.within_tol += 1;
        }
        if rel >= self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = Some(Mismatch {
                param: param.to_string(),
                index,
                analytic,
                numeric,
                rel_err: rel,
            });
        }
    }

    /// Folds another report into this one.
    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.within_tol += other.within_tol;
        self.kink_adjusted += other.kink_adjusted;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Central difference of `eval` (value and kink pattern at an offset),
/// shrinking the step while either side leaves the base piece.
fn central_difference<E>(step: f64, base: &[bool], mut eval: E) -> Result<(f64, bool)>
where
    E: FnMut(f64) -> Result<(f64, Vec<bool>)>,
{
    let mut h = step;
    let mut adjusted = false;
    loop {
        let (up, pu) = eval(h)?;
        let (down, pd) = eval(-h)?;
        let smooth = pu == base && pd == base;
        if smooth || adjusted && h <= step / f64::from(1u32 << MAX_HALVINGS) {
            return Ok(((up - down) / (2.0 * h), adjusted));
        }
        adjusted = true;
        h /= 2.0;
    }
}

/// Checks every coordinate of `params` (all parameters if empty).
///
/// `loss` must build the same scalar each time it is called on a fresh graph.
pub fn check_params<F>(
    store: &ParamStore,
    params: &[ParamId],
    mode: Mode,
    step: f64,
    tol: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<'_, f64>) -> Result<Var>,
{
    let ids: Vec<ParamId> = if params.is_empty() {
        store.ids().collect()
    } else {
        params.to_vec()
    };
    let mut g = Graph::<f64>::new(store, mode);
    let out = loss(&mut g)?;
    let grads = g.backward(out)?;
    let base = g.kink_pattern();

    let mut report = GradCheckReport::default();
    for id in ids {
        let p = store.param(id);
        let analytic = grads.param(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.value.len()]);
        for (index, &a) in analytic.iter().enumerate() {
            let (numeric, adjusted) = central_difference(step, &base, |delta| {
                let mut g = Graph::<f64>::new(store, mode);
                g.perturb(id, index, delta);
                let v = loss(&mut g)?;
                Ok((g.scalar(v), g.kink_pattern()))
            })?;
            report.kink_adjusted += usize::from(adjusted);
            report.record(&p.name, index, a, numeric, tol);
        }
    }
    Ok(report)
}

/// Same check for the gradient with respect to an input tensor, where the
/// input is rebuilt by `loss` from the supplied values.
pub fn check_input<F>(
    store: &ParamStore,
    input: &[f64],
    mode: Mode,
    step: f64,
    tol: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<'_, f64>, &[f64]) -> Result<(Var, Var)>,
{
    let mut g = Graph::<f64>::new(store, mode);
    let (x, out) = loss(&mut g, input)?;
    let grads = g.backward(out)?;
    let base = g.kink_pattern();
    let analytic = grads.wrt(x).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
    let mut report = GradCheckReport::default();
    let mut shifted = input.to_vec();
    for (index, &a) in analytic.iter().enumerate() {
        let (numeric, adjusted) = central_difference(step, &base, |delta| {
            shifted[index] = input[index] + delta;
            let mut g = Graph::<f64>::new(store, mode);
            let (_, v) = loss(&mut g, &shifted)?;
            shifted[index] = input[index];
            Ok((g.scalar(v), g.kink_pattern()))
        })?;
        report.kink_adjusted += usize::from(adjusted);
        report.record("input", index, a, numeric, tol);
    }
    Ok(report)
}
