//! Log-domain Sinkhorn iterations with uniform marginals, plus the
//! reverse-mode sweep through the unrolled iterations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entropic transport settings shared by every term of the divergence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Entropic regularization ε.
    pub epsilon: f64,
    /// Number of alternating potential updates L.
    pub iterations: usize,
    /// Weight λ of the causal (h, ΔM) term in the transport cost.
    pub causal_weight: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.1,
            iterations: 100,
            causal_weight: 1.0,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!(
                "sinkhorn epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(Error::config("sinkhorn needs at least one iteration"));
        }
        if !(self.causal_weight >= 0.0 && self.causal_weight.is_finite()) {
            return Err(Error::config("causal weight must be a finite value >= 0"));
        }
        Ok(())
    }
}

/// Result of a forward solve; keeps the potential history for the adjoint.
#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    pub rows: usize,
    pub cols: usize,
    pub epsilon: f64,
    /// `f` after each iteration, `iterations × rows`.
    f_hist: Vec<f64>,
    /// `g` after each iteration, `iterations × cols`.
    g_hist: Vec<f64>,
    /// Implied coupling, row-major `rows × cols`.
    pub plan: Vec<f64>,
    /// `<P, C>`.
    pub value: f64,
}

impl SinkhornSolution {
    pub fn f(&self) -> &[f64] {
        let l = self.f_hist.len() / self.rows;
        &self.f_hist[(l - 1) * self.rows..]
    }

    pub fn g(&self) -> &[f64] {
        let l = self.g_hist.len() / self.cols;
        &self.g_hist[(l - 1) * self.cols..]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in self.plan.chunks(self.cols) {
            for (a, v) in s.iter_mut().zip(r) {
                *a += v;
            }
        }
        s
    }
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Runs `iterations` alternating updates
/// `f_i = -ε log Σ_j b_j exp((g_j - C_ij)/ε)`, then
/// `g_j = -ε log Σ_i a_i exp((f_i - C_ij)/ε)`, starting from `g = 0`.
pub fn solve(cost: &[f64], rows: usize, cols: usize, epsilon: f64, iterations: usize) -> Result<SinkhornSolution> {
    if rows == 0 || cols == 0 || cost.len() != rows * cols {
        return Err(Error::shape(format!(
            "cost of length {} is not {rows}x{cols}",
            cost.len()
        )));
    }
    if let Some(bad) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::Numeric(format!("non-finite cost entry at {bad}")));
    }
    if !(epsilon > 0.0) || iterations == 0 {
        return Err(Error::config("sinkhorn needs epsilon > 0 and at least one iteration"));
    }
    let log_a = -(rows as f64).ln();
    let log_b = -(cols as f64).ln();
    let mut f = vec![0.0; rows];
    let mut g = vec![0.0; cols];
    let mut f_hist = Vec::with_capacity(iterations * rows);
    let mut g_hist = Vec::with_capacity(iterations * cols);
    for _ in 0..iterations {
        for i in 0..rows {
            let row = &cost[i * cols..(i + 1) * cols];
            f[i] = -epsilon
                * log_sum_exp((0..cols).map(|j| log_b + (g[j] - row[j]) / epsilon));
        }
        f_hist.extend_from_slice(&f);
        for j in 0..cols {
            g[j] = -epsilon
                * log_sum_exp((0..rows).map(|i| log_a + (f[i] - cost[i * cols + j]) / epsilon));
        }
        g_hist.extend_from_slice(&g);
    }
    let mut plan = vec![0.0; rows * cols];
    let mut value = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let c = cost[i * cols + j];
            let p = (log_a + log_b + (f[i] + g[j] - c) / epsilon).exp();
            plan[i * cols + j] = p;
            value += p * c;
        }
    }
    Ok(SinkhornSolution {
        rows,
        cols,
        epsilon,
        f_hist,
        g_hist,
        plan,
        value,
    })
}

/// Gradient of `<P, C>` with respect to `C`, differentiating through every
/// unrolled iteration. `cost` must be the matrix `sol` was computed from.
pub fn value_grad(sol: &SinkhornSolution, cost: &[f64], upstream: f64) -> Vec<f64> {
    let (n, m, eps) = (sol.rows, sol.cols, sol.epsilon);
    let iters = sol.f_hist.len() / n;
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut cbar = vec![0.0; n * m];
    let mut fbar = vec![0.0; n];
    let mut gbar = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let k = i * m + j;
            let p = sol.plan[k];
            let c = cost[k];
            cbar[k] += upstream * (p - p * c / eps);
            fbar[i] += upstream * p * c / eps;
            gbar[j] += upstream * p * c / eps;
        }
    }
    let mut weights = vec![0.0; n.max(m)];
    for l in (0..iters).rev() {
        let f = &sol.f_hist[l * n..(l + 1) * n];
        // g^(l) from f^(l): softmax over i per column.
        for j in 0..m {
            for i in 0..n {
                weights[i] = log_a + (f[i] - cost[i * m + j]) / eps;
            }
            let lse = log_sum_exp(weights[..n].iter().copied());
            for i in 0..n {
                let beta = (weights[i] - lse).exp();
                fbar[i] -= beta * gbar[j];
                cbar[i * m + j] += beta * gbar[j];
            }
        }
        // f^(l) from g^(l-1): softmax over j per row.
        let mut gprev = vec![0.0; m];
        let g_before: Vec<f64> = if l == 0 {
            vec![0.0; m]
        } else {
            sol.g_hist[(l - 1) * m..l * m].to_vec()
        };
        for i in 0..n {
            for j in 0..m {
                weights[j] = log_b + (g_before[j] - cost[i * m + j]) / eps;
            }
            let lse = log_sum_exp(weights[..m].iter().copied());
            for j in 0..m {
                let alpha = (weights[j] - lse).exp();
                gprev[j] -= alpha * fbar[i];
                cbar[i * m + j] += alpha * fbar[i];
            }
        }
        gbar = gprev;
        fbar.iter_mut().for_each(|v| *v = 0.0);
    }
    cbar
}
