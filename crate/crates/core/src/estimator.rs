//! Controller-side estimate `E[x_k | I_k^c]` under delayed, stamped state
//! updates, and the event trigger's record of states, controls, decisions
//! and reconstructed process noise.

use std::collections::VecDeque;

use nalgebra::DVector;

use crate::channel::{Packet, INITIAL_STAMP};
use crate::error::{Error, Result};
use crate::plant::{PlantModel, StateVector};

/// The estimator maintained at the controller.
///
/// The estimate is propagated open loop between deliveries and rebased on
/// the payload of each delivered packet. Before the first delivery the base
/// is the virtual prior sample `x_{-1} = 0`.
#[derive(Debug, Clone)]
pub struct ControllerState {
    xhat: DVector<f64>,
    k: usize,
    base: StateVector,
    // u_t for t in first_logged..k
    controls: VecDeque<DVector<f64>>,
    first_logged: usize,
    capacity: usize,
}

impl ControllerState {
    /// Fresh estimator at step 0 holding only the prior mean of `x_0`.
    pub fn new(n: usize, capacity: usize) -> Self {
        Self {
            xhat: DVector::zeros(n),
            k: 0,
            base: StateVector::new(DVector::zeros(n), INITIAL_STAMP),
            controls: VecDeque::with_capacity(capacity),
            first_logged: 0,
            capacity: capacity.max(1),
        }
    }

    pub fn xhat(&self) -> &DVector<f64> {
        &self.xhat
    }

    /// Step the estimate refers to.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn base_state(&self) -> &StateVector {
        &self.base
    }

    /// `u_t`, if still held in the control log.
    pub fn control(&self, t: usize) -> Option<&DVector<f64>> {
        t.checked_sub(self.first_logged)
            .and_then(|i| self.controls.get(i))
    }

    /// `xhat <- A xhat + B u_prev`, moving the estimate to the next step.
    pub fn propagate_estimate(&mut self, model: &PlantModel, u_prev: &DVector<f64>) {
        self.xhat = model.a() * &self.xhat + model.b() * u_prev;
        if self.controls.len() == self.capacity {
            self.controls.pop_front();
            self.first_logged += 1;
        }
        self.controls.push_back(u_prev.clone());
        self.k += 1;
    }

    /// Replaces the estimate with the delivered sample pushed forward through
    /// the logged controls `u_{stamp} .. u_{k-1}`.
    pub fn rebase_estimate(&mut self, pkt: &Packet, model: &PlantModel, now: usize) -> Result<()> {
        if now != self.k {
            return Err(Error::Protocol(format!(
                "rebase at k={now} but estimate is at k={}",
                self.k
            )));
        }
        if pkt.stamp > now {
            return Err(Error::Protocol(format!(
                "packet stamped {} delivered at k={now}",
                pkt.stamp
            )));
        }
        if (pkt.stamp as i64) < self.base.k {
            return Err(Error::Protocol(format!(
                "stale packet stamped {} behind base stamp {}",
                pkt.stamp, self.base.k
            )));
        }
        if pkt.stamp < self.first_logged {
            return Err(Error::State(format!(
                "control log starts at {}, need u_{}",
                self.first_logged, pkt.stamp
            )));
        }
        let mut x = pkt.payload.x.clone();
        for t in pkt.stamp..now {
            let u = self.control(t).expect("log covers stamp..now");
            x = model.a() * x + model.b() * u;
        }
        self.xhat = x;
        self.base = pkt.payload.clone();
        Ok(())
    }

    /// `A^Delta x_s + sum_{r=1}^{Delta} A^{r-1} B u_{k-r}` evaluated directly
    /// from the base sample and control log.
    pub fn closed_form_estimate(&self, model: &PlantModel) -> Result<DVector<f64>> {
        let delta = (self.k as i64 - self.base.k) as usize;
        let powers = model.powers_of_a(delta);
        let mut x = &powers[delta] * &self.base.x;
        for r in 1..=delta {
            let t = self.k as i64 - r as i64;
            if t < 0 {
                // u_{-1} of the virtual prior step is zero
                continue;
            }
            let u = self.control(t as usize).ok_or_else(|| {
                Error::State(format!("control log no longer holds u_{t}"))
            })?;
            x += &powers[r - 1] * (model.b() * u);
        }
        Ok(x)
    }
}

/// `x_k - xhat_k`.
pub fn estimation_error(x_true: &StateVector, cs: &ControllerState) -> DVector<f64> {
    debug_assert_eq!(x_true.k, cs.k() as i64, "time index mismatch");
    &x_true.x - cs.xhat()
}

/// Everything the event trigger knows at step `k`: `x_0..x_k`, `u_0..u_{k-1}`,
/// `delta_0..delta_{k-1}` and the process noise reconstructed from them.
///
/// Noise is indexed from `t = -1`; `w_{-1}` is `x_0` itself (the deviation
/// from the controller's prior mean).
#[derive(Debug, Clone, Default)]
pub struct TriggerInfo {
    states: Vec<DVector<f64>>,
    controls: Vec<DVector<f64>>,
    decisions: Vec<bool>,
    noise: Vec<DVector<f64>>,
}

impl TriggerInfo {
    pub fn new(x0: DVector<f64>) -> Self {
        Self {
            noise: vec![x0.clone()],
            states: vec![x0],
            controls: Vec::new(),
            decisions: Vec::new(),
        }
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn controls(&self) -> &[DVector<f64>] {
        &self.controls
    }

    pub fn decisions(&self) -> &[bool] {
        &self.decisions
    }

    /// Latest time for which the state is known.
    pub fn k(&self) -> usize {
        self.states.len() - 1
    }

    pub fn record_decision(&mut self, decision: bool) {
        self.decisions.push(decision);
    }

    /// Records `u_k` and `x_{k+1}` and the noise `w_k` between them.
    pub fn record_step(&mut self, model: &PlantModel, u: DVector<f64>, next: DVector<f64>) {
        self.controls.push(u);
        self.states.push(next);
        let t = (self.states.len() - 2) as i64;
        let w = reconstruct_noise(self, model, t).expect("logs cover t");
        self.noise.push(w);
    }

    /// Stored `w_t`, `t >= -1`.
    pub fn noise(&self, t: i64) -> Option<&DVector<f64>> {
        usize::try_from(t + 1).ok().and_then(|i| self.noise.get(i))
    }

    pub fn noise_log(&self) -> &[DVector<f64>] {
        &self.noise
    }

    /// Stamp of the last transmission decided before step `k`, or
    /// [`INITIAL_STAMP`] if there is none.
    pub fn last_sent_before(&self, k: usize) -> i64 {
        self.decisions[..k.min(self.decisions.len())]
            .iter()
            .rposition(|d| *d)
            .map_or(INITIAL_STAMP, |t| t as i64)
    }
}

/// `x_{t+1} - A x_t - B u_t` from the trigger's logs; `t = -1` yields `x_0`.
pub fn reconstruct_noise(info: &TriggerInfo, model: &PlantModel, t: i64) -> Result<DVector<f64>> {
    let range = || format!("-1..{}", info.controls.len());
    if t == -1 {
        return Ok(info.states[0].clone());
    }
    let idx = usize::try_from(t).map_err(|_| Error::Index {
        index: t,
        range: range(),
    })?;
    match (info.states.get(idx + 1), info.states.get(idx), info.controls.get(idx)) {
        (Some(next), Some(x), Some(u)) => Ok(next - model.a() * x - model.b() * u),
        _ => Err(Error::Index {
            index: t,
            range: range(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::step_plant;
    use nalgebra::DMatrix;

    fn scalar(a: f64) -> PlantModel {
        PlantModel::scalar(a, 0.1, 0.001).unwrap()
    }

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn packet(stamp: usize, x: f64) -> Packet {
        Packet {
            stamp,
            payload: StateVector::new(v(x), stamp as i64),
        }
    }

    #[test]
    fn static_propagation() {
        let model = PlantModel::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            None,
        )
        .unwrap();
        let mut cs = ControllerState::new(2, 8);
        cs.rebase_estimate(
            &Packet {
                stamp: 0,
                payload: StateVector::new(DVector::from_vec(vec![1.0, 2.0]), 0),
            },
            &model,
            0,
        )
        .unwrap();
        cs.propagate_estimate(&model, &DVector::zeros(2));
        assert_eq!(cs.xhat().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn propagate_example() {
        let model = scalar(1.15);
        let mut cs = ControllerState::new(1, 8);
        cs.rebase_estimate(&packet(0, 1.0), &model, 0).unwrap();
        cs.propagate_estimate(&model, &v(-1.0));
        assert!((cs.xhat()[0] - 1.05).abs() < 1e-12);
    }

    #[test]
    fn two_propagations_match_closed_form() {
        let model = scalar(1.15);
        let mut cs = ControllerState::new(1, 8);
        cs.rebase_estimate(&packet(0, 0.7), &model, 0).unwrap();
        cs.propagate_estimate(&model, &v(0.3));
        cs.propagate_estimate(&model, &v(-0.4));
        let expect = 1.15f64.powi(2) * 0.7 + 1.15 * 0.1 * 0.3 + 0.1 * -0.4;
        assert!((cs.xhat()[0] - expect).abs() < 1e-12);
        assert!((cs.closed_form_estimate(&model).unwrap()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn rebase_examples() {
        let model = scalar(1.15);

        let mut cs = ControllerState::new(1, 8);
        for _ in 0..3 {
            cs.propagate_estimate(&model, &v(0.5));
        }
        cs.rebase_estimate(&packet(3, -0.25), &model, 3).unwrap();
        assert_eq!(cs.xhat()[0], -0.25);

        let mut cs = ControllerState::new(1, 8);
        cs.propagate_estimate(&model, &v(0.0));
        cs.propagate_estimate(&model, &v(0.0));
        cs.rebase_estimate(&packet(0, 1.0), &model, 2).unwrap();
        assert!((cs.xhat()[0] - 1.3225).abs() < 1e-12);

        let mut cs = ControllerState::new(1, 8);
        cs.propagate_estimate(&model, &v(1.0));
        cs.rebase_estimate(&packet(0, 2.0), &model, 1).unwrap();
        assert!((cs.xhat()[0] - 2.4).abs() < 1e-12);
    }

    #[test]
    fn rebase_errors() {
        let model = scalar(1.15);
        let mut cs = ControllerState::new(1, 2);
        for _ in 0..4 {
            cs.propagate_estimate(&model, &v(0.0));
        }
        // log holds u_2, u_3 only
        assert!(matches!(
            cs.rebase_estimate(&packet(1, 1.0), &model, 4),
            Err(Error::State(_))
        ));
        cs.rebase_estimate(&packet(3, 1.0), &model, 4).unwrap();
        assert!(matches!(
            cs.rebase_estimate(&packet(2, 1.0), &model, 4),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn error_after_single_step_is_last_noise() {
        let model = scalar(1.15);
        let mut cs = ControllerState::new(1, 8);
        let mut x = StateVector::new(v(0.4), 0);
        cs.rebase_estimate(&packet(0, 0.4), &model, 0).unwrap();
        let u = v(-0.2);
        let w = v(0.03);
        x = step_plant(&model, &x, &u, &w).unwrap();
        cs.propagate_estimate(&model, &u);
        assert!((estimation_error(&x, &cs)[0] - 0.03).abs() < 1e-15);
    }

    #[test]
    fn noise_round_trip() {
        let model = scalar(1.15);
        let x0 = v(0.2);
        let mut info = TriggerInfo::new(x0.clone());
        let mut x = StateVector::new(x0, 0);
        let u = v(0.7);
        let w = v(0.03);
        x = step_plant(&model, &x, &u, &w).unwrap();
        info.record_step(&model, u, x.x.clone());
        let got = reconstruct_noise(&info, &model, 0).unwrap();
        assert!((got[0] - 0.03).abs() < 1e-15);
        assert_eq!(reconstruct_noise(&info, &model, -1).unwrap()[0], 0.2);
        assert!(matches!(reconstruct_noise(&info, &model, 1), Err(Error::Index { .. })));
        assert!(matches!(reconstruct_noise(&info, &model, -2), Err(Error::Index { .. })));
    }

    #[test]
    fn noiseless_run_reconstructs_zero() {
        let model = scalar(1.1);
        let mut info = TriggerInfo::new(v(0.0));
        let mut x = StateVector::new(v(0.0), 0);
        for _ in 0..5 {
            let u = v(0.0);
            x = step_plant(&model, &x, &u, &v(0.0)).unwrap();
            info.record_step(&model, u, x.x.clone());
        }
        for t in 0..5 {
            assert_eq!(reconstruct_noise(&info, &model, t).unwrap()[0], 0.0);
        }
    }

    #[test]
    fn last_sent_before_scans_decisions() {
        let mut info = TriggerInfo::new(v(0.0));
        assert_eq!(info.last_sent_before(0), INITIAL_STAMP);
        for d in [false, true, false, false] {
            info.record_decision(d);
        }
        assert_eq!(info.last_sent_before(1), INITIAL_STAMP);
        assert_eq!(info.last_sent_before(2), 1);
        assert_eq!(info.last_sent_before(4), 1);
    }
}
