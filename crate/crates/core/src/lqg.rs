//! Finite-horizon LQG synthesis: backward Riccati recursion, certainty
//! equivalence gains and the error weights `Gamma_k = L_k^T Lambda_k L_k`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::plant::{min_eigenvalue, psd_violation, symmetrize, PlantModel};

/// A per-stage quantity that is either constant or listed per step.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule<T> {
    Constant(T),
    PerStep(Vec<T>),
}

impl<T> Schedule<T> {
    /// Value at step `k`. Per-step schedules must cover `k`; callers validate
    /// lengths up front through [`CostWeights::validate`].
    pub fn at(&self, k: usize) -> &T {
        match self {
            Schedule::Constant(v) => v,
            Schedule::PerStep(vs) => &vs[k],
        }
    }

    fn covers(&self, steps: usize) -> bool {
        match self {
            Schedule::Constant(_) => true,
            Schedule::PerStep(vs) => vs.len() >= steps,
        }
    }

    fn values(&self) -> Box<dyn Iterator<Item = &T> + '_> {
        match self {
            Schedule::Constant(v) => Box::new(std::iter::once(v)),
            Schedule::PerStep(vs) => Box::new(vs.iter()),
        }
    }
}

impl<T> From<T> for Schedule<T> {
    fn from(v: T) -> Self {
        Schedule::Constant(v)
    }
}

/// Stage weights of the LQG cost plus the per-transmission price.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q: Schedule<DMatrix<f64>>,
    pub r: Schedule<DMatrix<f64>>,
    pub q_terminal: DMatrix<f64>,
    pub theta: Schedule<f64>,
}

impl CostWeights {
    pub fn scalar(q: f64, r: f64, q_terminal: f64, theta: f64) -> Self {
        Self {
            q: Schedule::Constant(DMatrix::from_element(1, 1, q)),
            r: Schedule::Constant(DMatrix::from_element(1, 1, r)),
            q_terminal: DMatrix::from_element(1, 1, q_terminal),
            theta: Schedule::Constant(theta),
        }
    }

    pub fn theta_at(&self, k: usize) -> f64 {
        *self.theta.at(k)
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = Schedule::Constant(theta);
        self
    }

    /// Checks shapes, definiteness and schedule coverage for steps `0..=horizon`.
    pub fn validate(&self, n: usize, m: usize, horizon: usize) -> Result<()> {
        let steps = horizon + 1;
        if !self.q.covers(steps) {
            return Err(Error::config("Q", format!("per-step schedule shorter than {steps}")));
        }
        if !self.r.covers(steps) {
            return Err(Error::config("R", format!("per-step schedule shorter than {steps}")));
        }
        if !self.theta.covers(steps) {
            return Err(Error::config("theta", format!("per-step schedule shorter than {steps}")));
        }
        for q in self.q.values() {
            if q.shape() != (n, n) {
                return Err(Error::config("Q", format!("expected {n}x{n}, got {:?}", q.shape())));
            }
            psd_violation(q).map_err(|e| Error::config("Q", e))?;
        }
        for r in self.r.values() {
            if r.shape() != (m, m) {
                return Err(Error::config("R", format!("expected {m}x{m}, got {:?}", r.shape())));
            }
            psd_violation(r).map_err(|e| Error::config("R", e))?;
            let min = min_eigenvalue(r);
            if min <= 0.0 {
                return Err(Error::config(
                    "R",
                    format!("must be positive definite (min eigenvalue {min:e})"),
                ));
            }
        }
        if self.q_terminal.shape() != (n, n) {
            return Err(Error::config(
                "Q_terminal",
                format!("expected {n}x{n}, got {:?}", self.q_terminal.shape()),
            ));
        }
        psd_violation(&self.q_terminal).map_err(|e| Error::config("Q_terminal", e))?;
        for &t in self.theta.values() {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::config("theta", format!("must be finite and >= 0, got {t}")));
            }
        }
        Ok(())
    }
}

/// Output of the backward recursion for steps `0..=T`.
///
/// `p` has `T + 2` entries (`P_0 ..= P_{T+1}`), the other lists `T + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    pub p: Vec<DMatrix<f64>>,
    pub l: Vec<DMatrix<f64>>,
    pub lambda: Vec<DMatrix<f64>>,
    pub gamma: Vec<DMatrix<f64>>,
}

impl GainSchedule {
    pub fn horizon(&self) -> usize {
        self.l.len() - 1
    }
}

/// Runs the Riccati recursion from `P_{T+1} = Q_terminal` down to `P_0`.
pub fn backward_riccati(
    model: &PlantModel,
    weights: &CostWeights,
    horizon: usize,
) -> Result<GainSchedule> {
    weights.validate(model.n(), model.m(), horizon)?;
    let a = model.a();
    let b = model.b();
    let at = a.transpose();
    let bt = b.transpose();

    let steps = horizon + 1;
    let mut p = vec![DMatrix::zeros(0, 0); steps + 1];
    let mut l = vec![DMatrix::zeros(0, 0); steps];
    let mut lambda = vec![DMatrix::zeros(0, 0); steps];
    let mut gamma = vec![DMatrix::zeros(0, 0); steps];
    p[steps] = symmetrize(&weights.q_terminal);

    for k in (0..steps).rev() {
        let next = &p[k + 1];
        let pb = next * b;
        let lam = symmetrize(&(weights.r.at(k) + &bt * &pb));
        let chol = lam.clone().cholesky().ok_or_else(|| Error::Synthesis {
            k,
            reason: "Lambda_k is not positive definite".into(),
        })?;
        // Lambda^{-1} B^T P_{k+1}
        let lam_inv_btp = chol.solve(&pb.transpose());
        let gain = -(&lam_inv_btp * a);
        let inner = next - &pb * &lam_inv_btp;
        let pk = symmetrize(&(weights.q.at(k) + &at * inner * a));
        let g = symmetrize(&(gain.transpose() * &lam * &gain));

        if pk.iter().chain(gain.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Synthesis {
                k,
                reason: "non-finite Riccati iterate".into(),
            });
        }
        p[k] = pk;
        l[k] = gain;
        lambda[k] = lam;
        gamma[k] = g;
    }

    Ok(GainSchedule { p, l, lambda, gamma })
}

/// Largest relative residual of the Riccati identity over all steps, using
/// the closed-loop form `P_k = Q_k + L_k^T R_k L_k + (A + B L_k)^T P_{k+1} (A + B L_k)`.
pub fn riccati_residual(model: &PlantModel, weights: &CostWeights, gains: &GainSchedule) -> f64 {
    let mut worst = 0.0_f64;
    for k in 0..=gains.horizon() {
        let lk = &gains.l[k];
        let closed = model.a() + model.b() * lk;
        let rebuilt = weights.q.at(k)
            + lk.transpose() * weights.r.at(k) * lk
            + closed.transpose() * &gains.p[k + 1] * &closed;
        let scale = gains.p[k].norm().max(f64::MIN_POSITIVE);
        worst = worst.max((rebuilt - &gains.p[k]).norm() / scale);
    }
    worst
}

pub fn certainty_equiv_control(
    gains: &GainSchedule,
    xhat: &DVector<f64>,
    k: usize,
) -> Result<DVector<f64>> {
    let lk = gains.l.get(k).ok_or_else(|| Error::Index {
        index: k as i64,
        range: format!("0..={}", gains.horizon()),
    })?;
    if lk.ncols() != xhat.len() {
        return Err(Error::Dimension(format!(
            "estimate has length {}, gain expects {}",
            xhat.len(),
            lk.ncols()
        )));
    }
    Ok(lk * xhat)
}

#[derive(Serialize)]
struct StepDump {
    k: usize,
    p: Vec<Vec<f64>>,
    l: Vec<Vec<f64>>,
    gamma: Vec<Vec<f64>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Writes `P_k`, `L_k` and `Gamma_k` per step as pretty JSON.
pub fn write_schedule(gains: &GainSchedule, path: &Path) -> Result<()> {
    let dump: Vec<StepDump> = (0..=gains.horizon())
        .map(|k| StepDump {
            k,
            p: rows(&gains.p[k]),
            l: rows(&gains.l[k]),
            gamma: rows(&gains.gamma[k]),
        })
        .collect();
    let text = serde_json::to_string_pretty(&dump).expect("schedule dump serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
