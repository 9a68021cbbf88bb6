//! Exact optimal triggering over the `(k, Delta_{k+tau-1})` lattice by
//! backward induction, with expected (covariance-based) error costs.
//!
//! The cost-to-go covers the policy-dependent part of the joint cost,
//! `V_k = E[sum_{t=k}^{T-tau} theta_t delta_t + e_{t+tau}^T Gamma_{t+tau} e_{t+tau}]`.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lqg::CostWeights;
use crate::scheduler::{StageCostTable, VoiContext};

/// Decisions and values for every reachable `(k, Delta)` with
/// `k = 0..=T-tau` and `Delta = 0..=k+tau`.
#[derive(Debug, Clone)]
pub struct PolicyTable {
    tau: usize,
    horizon: usize,
    theta: Vec<f64>,
    stage: StageCostTable,
    // values[k][aoi]; row T-tau+1 is the zero terminal row
    values: Vec<Vec<f64>>,
    decisions: Vec<Vec<bool>>,
}

impl PolicyTable {
    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Number of decision steps, `T - tau + 1`.
    pub fn steps(&self) -> usize {
        self.decisions.len()
    }

    /// Largest AoI index held in any decision row.
    pub fn aoi_max(&self) -> usize {
        self.horizon
    }

    fn check(&self, k: usize, aoi: usize) -> Result<()> {
        if k >= self.steps() {
            return Err(Error::Index {
                index: k as i64,
                range: format!("k in 0..{}", self.steps()),
            });
        }
        if aoi >= self.decisions[k].len() {
            return Err(Error::Index {
                index: aoi as i64,
                range: format!("Delta in 0..{} at k={k}", self.decisions[k].len()),
            });
        }
        Ok(())
    }

    pub fn decision(&self, k: usize, aoi: usize) -> Result<bool> {
        self.check(k, aoi)?;
        Ok(self.decisions[k][aoi])
    }

    /// Cost-to-go `V_k(Delta)`; `k = T - tau + 1` gives the zero terminal row.
    pub fn value(&self, k: usize, aoi: usize) -> Result<f64> {
        self.values
            .get(k)
            .and_then(|row| row.get(aoi))
            .copied()
            .ok_or(Error::Index {
                index: aoi as i64,
                range: format!("value table at k={k}"),
            })
    }

    /// `V_0` from the initial state `Delta_{tau-1} = tau` (nothing delivered,
    /// controller holds only the prior).
    pub fn optimal_cost(&self) -> f64 {
        self.values[0][self.tau]
    }

    /// Exact VoI: expected stage-cost reduction minus the price plus the
    /// continuation difference `rho_k = V_{k+1}(Delta+1) - V_{k+1}(tau)`.
    /// Positive exactly where the table transmits.
    pub fn exact_voi(&self, k: usize, aoi: usize) -> Result<f64> {
        self.check(k, aoi)?;
        Ok(self.voi_at(k, aoi))
    }

    /// `rho_k` at `(k, Delta)`.
    pub fn continuation_gap(&self, k: usize, aoi: usize) -> Result<f64> {
        self.check(k, aoi)?;
        Ok(self.values[k + 1][aoi + 1] - self.values[k + 1][self.tau])
    }

    fn voi_at(&self, k: usize, aoi: usize) -> f64 {
        let j = k + self.tau;
        let stage_gain = self.stage.range(j, self.tau + 1, aoi + 1);
        let rho = self.values[k + 1][aoi + 1] - self.values[k + 1][self.tau];
        stage_gain - self.theta[k] + rho
    }

    /// Both branches of the Bellman recursion at `(k, Delta)`:
    /// `(stay silent, transmit)`.
    pub fn branches(&self, k: usize, aoi: usize) -> Result<(f64, f64)> {
        self.check(k, aoi)?;
        let j = k + self.tau;
        let silent = self.stage.error_cost(j, aoi + 1) + self.values[k + 1][aoi + 1];
        let send = self.theta[k] + self.stage.error_cost(j, self.tau) + self.values[k + 1][self.tau];
        Ok((silent, send))
    }

    /// Writes `k,aoi,decision,value` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("k,aoi,decision,value\n");
        for (k, row) in self.decisions.iter().enumerate() {
            for (aoi, d) in row.iter().enumerate() {
                out.push_str(&format!("{k},{aoi},{},{}\n", *d as u8, self.values[k][aoi]));
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BellmanCheck {
    pub max_relative_residual: f64,
    pub decision_mismatches: usize,
}

/// Backward induction from `k = T - tau` to 0.
pub fn solve_dp(ctx: &VoiContext, weights: &CostWeights) -> PolicyTable {
    let tau = ctx.tau;
    let horizon = ctx.horizon();
    assert!(tau <= horizon, "delay exceeds horizon");
    let steps = horizon - tau + 1;
    let theta: Vec<f64> = (0..steps).map(|k| weights.theta_at(k)).collect();

    let mut table = PolicyTable {
        tau,
        horizon,
        theta,
        stage: ctx.stage.clone(),
        values: vec![Vec::new(); steps + 1],
        decisions: vec![Vec::new(); steps],
    };
    table.values[steps] = vec![0.0; steps + tau + 1];

    for k in (0..steps).rev() {
        let width = k + tau + 1;
        let mut values = Vec::with_capacity(width);
        let mut decisions = Vec::with_capacity(width);
        for aoi in 0..width {
            let transmit = table.voi_at(k, aoi) > 0.0;
            let j = k + tau;
            let v = if transmit {
                table.theta[k] + table.stage.error_cost(j, tau) + table.values[k + 1][tau]
            } else {
                table.stage.error_cost(j, aoi + 1) + table.values[k + 1][aoi + 1]
            };
            values.push(v);
            decisions.push(transmit);
        }
        table.values[k] = values;
        table.decisions[k] = decisions;
    }
    table
}

/// Re-checks every entry against the recursion.
pub fn bellman_check(table: &PolicyTable) -> BellmanCheck {
    let mut worst = 0.0_f64;
    let mut mismatches = 0;
    for k in 0..table.steps() {
        for aoi in 0..table.decisions[k].len() {
            let (silent, send) = table.branches(k, aoi).expect("in table");
            let best = silent.min(send);
            let v = table.values[k][aoi];
            worst = worst.max((v - best).abs() / best.abs().max(f64::MIN_POSITIVE));
            let argmin = send < silent;
            if argmin != table.decisions[k][aoi] && send != silent {
                mismatches += 1;
            }
        }
    }
    BellmanCheck {
        max_relative_residual: worst,
        decision_mismatches: mismatches,
    }
}

/// Expected policy-dependent cost `V_0` of a lattice policy
/// `delta_k = policy(k, Delta_{k+tau-1})`, by forward propagation of the
/// (deterministic) AoI path.
pub fn lattice_policy_cost<F>(ctx: &VoiContext, weights: &CostWeights, mut policy: F) -> f64
where
    F: FnMut(usize, usize) -> bool,
{
    let tau = ctx.tau;
    let mut aoi = tau;
    let mut cost = 0.0;
    for k in 0..=ctx.horizon() - tau {
        let next = if policy(k, aoi) {
            cost += weights.theta_at(k);
            tau
        } else {
            aoi + 1
        };
        cost += ctx.stage.error_cost(k + tau, next);
        aoi = next;
    }
    cost
}
