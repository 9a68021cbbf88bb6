//! Event-trigger policies: the delay-aware VoI proxy, the delay-free classic
//! VoI, AoI thresholds, periodic triggering and DP-table lookup.
//!
//! Timing: a decision `delta_k = 1` delivers `x_k` at `k + tau`, so it only
//! changes the error from `k + tau` on. Without it the controller's age at
//! `k + tau` would be `Delta_{k+tau-1} + 1`; with it, `tau`. The error terms
//! the transmission removes are the `r = tau+1 ..= Delta_{k+tau-1}+1` terms of
//! `e_{k+tau} = sum_r A^{r-1} w_{k+tau-r}`, all of which involve noise from
//! steps `<= k-1` and are therefore known to the trigger.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dp::PolicyTable;
use crate::error::{Error, Result};
use crate::estimator::TriggerInfo;
use crate::lqg::{CostWeights, GainSchedule};
use crate::plant::PlantModel;

/// How the noise entering the VoI proxy is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VoiMode {
    /// Reconstructed past noise samples.
    #[default]
    Realized,
    /// Noise replaced by its covariance.
    Expected,
}

impl fmt::Display for VoiMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VoiMode::Realized => "realized",
            VoiMode::Expected => "expected",
        })
    }
}

impl FromStr for VoiMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "realized" => Ok(VoiMode::Realized),
            "expected" => Ok(VoiMode::Expected),
            other => Err(Error::config("mode", format!("expected realized|expected, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum SchedulerPolicy {
    VoiProxy { mode: VoiMode },
    ClassicVoi,
    AoiThreshold { threshold: usize },
    Periodic { period: usize, phase: usize },
    DpOracle { table: Arc<PolicyTable> },
}

impl SchedulerPolicy {
    pub fn periodic(period: usize) -> Result<Self> {
        if period == 0 {
            return Err(Error::config("period", "must be >= 1"));
        }
        Ok(SchedulerPolicy::Periodic { period, phase: 0 })
    }

    pub fn id(&self) -> &'static str {
        match self {
            SchedulerPolicy::VoiProxy { .. } => "voi_proxy",
            SchedulerPolicy::ClassicVoi => "classic_voi",
            SchedulerPolicy::AoiThreshold { .. } => "aoi_threshold",
            SchedulerPolicy::Periodic { .. } => "periodic",
            SchedulerPolicy::DpOracle { .. } => "dp_oracle",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SchedulerPolicy::Periodic { period: 0, .. } => {
                Err(Error::config("period", "must be >= 1"))
            }
            _ => Ok(()),
        }
    }
}

/// Expected error-cost terms `tr((A^{r-1})^T Gamma_j A^{r-1} C_{j-r})`, where
/// `C_t` is the covariance of `w_t` (`R0` for the virtual `w_{-1} = x_0`,
/// `W` otherwise), stored as prefix sums over `r` for every `j = 0..=T`.
#[derive(Debug, Clone)]
pub struct StageCostTable {
    // prefix[j][d] = sum_{r=1}^{d} term(j, r), d = 0..=j+1
    prefix: Vec<Vec<f64>>,
}

impl StageCostTable {
    pub fn new(model: &PlantModel, gains: &GainSchedule, powers: &[DMatrix<f64>]) -> Self {
        let horizon = gains.horizon();
        let prefix = (0..=horizon)
            .map(|j| {
                let gamma = &gains.gamma[j];
                let mut row = Vec::with_capacity(j + 2);
                row.push(0.0);
                let mut acc = 0.0;
                for r in 1..=j + 1 {
                    let ar = &powers[r - 1];
                    let cov = if r == j + 1 { model.r0() } else { model.w() };
                    acc += (ar.transpose() * gamma * ar * cov).trace();
                    row.push(acc);
                }
                row
            })
            .collect();
        Self { prefix }
    }

    /// `E[e_j^T Gamma_j e_j]` when the controller's age at `j` is `aoi`.
    pub fn error_cost(&self, j: usize, aoi: usize) -> f64 {
        self.prefix[j][aoi]
    }

    /// Sum of the terms `r = lo ..= hi` at step `j`.
    pub fn range(&self, j: usize, lo: usize, hi: usize) -> f64 {
        if hi < lo {
            return 0.0;
        }
        self.prefix[j][hi] - self.prefix[j][lo - 1]
    }

    pub fn horizon(&self) -> usize {
        self.prefix.len() - 1
    }
}

/// Per-loop data shared read-only by every trial: powers of `A`, the gain
/// schedule and the expected error-cost table.
#[derive(Debug, Clone)]
pub struct VoiContext {
    pub model: PlantModel,
    pub gains: GainSchedule,
    pub tau: usize,
    pub powers: Vec<DMatrix<f64>>,
    pub stage: StageCostTable,
}

impl VoiContext {
    pub fn new(model: PlantModel, gains: GainSchedule, tau: usize) -> Self {
        let horizon = gains.horizon();
        let powers = model.powers_of_a(horizon + tau + 2);
        let stage = StageCostTable::new(&model, &gains, &powers);
        Self {
            model,
            gains,
            tau,
            powers,
            stage,
        }
    }

    pub fn horizon(&self) -> usize {
        self.gains.horizon()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VoiEvaluation {
    pub value: f64,
    /// `Delta_{k+tau-1}`, the controller's age one step before this
    /// decision's packet could land.
    pub aoi_term: usize,
    pub stage_sum: f64,
    pub price: f64,
}

/// `Delta_{k+tau-1}` implied by the decisions taken before `k`.
pub fn predicted_aoi(info: &TriggerInfo, k: usize, tau: usize) -> usize {
    (k as i64 + tau as i64 - 1 - info.last_sent_before(k)) as usize
}

/// The VoI proxy `-theta_k + sum_{r=tau+1}^{Delta+1} (A^{r-1} w_{k+tau-r})^T Gamma_{k+tau} (A^{r-1} w_{k+tau-r})`.
///
/// Cross terms between different noise samples are dropped in both modes.
pub fn voi_proxy(
    ctx: &VoiContext,
    k: usize,
    aoi_pred: usize,
    theta: f64,
    info: &TriggerInfo,
    mode: VoiMode,
) -> Result<VoiEvaluation> {
    let tau = ctx.tau;
    let j = k + tau;
    if j > ctx.horizon() {
        return Err(Error::Horizon {
            at: j,
            horizon: ctx.horizon(),
        });
    }
    let implied = predicted_aoi(info, k, tau);
    if implied != aoi_pred {
        return Err(Error::State(format!(
            "Delta_{{k+tau-1}} = {aoi_pred} at k={k} but decision log implies {implied}"
        )));
    }
    let hi = aoi_pred + 1;
    let stage_sum = match mode {
        VoiMode::Expected => ctx.stage.range(j, tau + 1, hi),
        VoiMode::Realized => {
            let gamma = &ctx.gains.gamma[j];
            let mut acc = 0.0;
            for r in tau + 1..=hi {
                let t = j as i64 - r as i64;
                let w = info.noise(t).ok_or_else(|| {
                    Error::State(format!("noise w_{t} not yet known at k={k}"))
                })?;
                let v = &ctx.powers[r - 1] * w;
                acc += v.dot(&(gamma * &v));
            }
            acc
        }
    };
    Ok(VoiEvaluation {
        value: stage_sum - theta,
        aoi_term: aoi_pred,
        stage_sum,
        price: theta,
    })
}

/// Delay-free VoI `e_k^T A^T Gamma_{k+1} A e_k - theta_k`.
pub fn classic_voi(
    error: &DVector<f64>,
    gains: &GainSchedule,
    model: &PlantModel,
    k: usize,
    theta: f64,
) -> Result<f64> {
    let gamma = gains.gamma.get(k + 1).ok_or(Error::Horizon {
        at: k + 1,
        horizon: gains.horizon(),
    })?;
    let ae = model.a() * error;
    Ok(ae.dot(&(gamma * &ae)) - theta)
}

/// What the trigger sees when deciding at step `k`.
pub struct TriggerView<'a> {
    pub k: usize,
    pub info: &'a TriggerInfo,
    /// `x_k - xhat_k` for the estimate the controller holds before this
    /// step's own transmission could arrive.
    pub error: &'a DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub transmit: bool,
    /// VoI value behind the decision, for VoI-based policies.
    pub voi: Option<f64>,
}

impl Decision {
    const SILENT: Decision = Decision {
        transmit: false,
        voi: None,
    };
}

pub fn decide(
    policy: &SchedulerPolicy,
    view: &TriggerView<'_>,
    ctx: &VoiContext,
    weights: &CostWeights,
) -> Result<Decision> {
    let k = view.k;
    let tau = ctx.tau;
    // a packet sent now would land after the horizon
    if k + tau > ctx.horizon() {
        return Ok(Decision::SILENT);
    }
    let theta = weights.theta_at(k);
    let decision = match policy {
        SchedulerPolicy::VoiProxy { mode } => {
            let aoi = predicted_aoi(view.info, k, tau);
            let eval = voi_proxy(ctx, k, aoi, theta, view.info, *mode)?;
            Decision {
                transmit: eval.value > 0.0,
                voi: Some(eval.value),
            }
        }
        SchedulerPolicy::ClassicVoi => {
            if k + 1 > ctx.horizon() {
                return Ok(Decision::SILENT);
            }
            let value = classic_voi(view.error, &ctx.gains, &ctx.model, k, theta)?;
            Decision {
                transmit: value > 0.0,
                voi: Some(value),
            }
        }
        SchedulerPolicy::AoiThreshold { threshold } => Decision {
            transmit: current_aoi(view.info, k, tau) >= *threshold,
            voi: None,
        },
        SchedulerPolicy::Periodic { period, phase } => Decision {
            transmit: k >= *phase && (k - phase).is_multiple_of(*period),
            voi: None,
        },
        SchedulerPolicy::DpOracle { table } => {
            let aoi = predicted_aoi(view.info, k, tau);
            Decision {
                transmit: table.decision(k, aoi)?,
                voi: Some(table.exact_voi(k, aoi)?),
            }
        }
    };
    Ok(decision)
}

/// `Delta_k` from packets already delivered by step `k`, excluding one sent
/// at `k` itself (relevant only when `tau = 0`).
pub fn current_aoi(info: &TriggerInfo, k: usize, tau: usize) -> usize {
    let horizon = if k >= tau { (k - tau + 1).min(k) } else { 0 };
    (k as i64 - info.last_sent_before(horizon)) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqg::{backward_riccati, CostWeights};

    fn paper_ctx(a: f64, tau: usize, horizon: usize) -> (VoiContext, CostWeights) {
        let model = PlantModel::scalar(a, 0.1, 0.001).unwrap();
        let weights = CostWeights::scalar(1.0, 1.0, 1.0, 0.15);
        let gains = backward_riccati(&model, &weights, horizon).unwrap();
        (VoiContext::new(model, gains, tau), weights)
    }

    fn info_with(decisions: &[bool], noise: &[f64], model: &PlantModel) -> TriggerInfo {
        // builds x_0..x_n from zero controls so reconstructed w_t = noise[t+1]
        let mut info = TriggerInfo::new(DVector::from_element(1, noise[0]));
        let mut x = noise[0];
        for &w in &noise[1..] {
            x = model.a()[(0, 0)] * x + w;
            info.record_step(model, DVector::zeros(1), DVector::from_element(1, x));
        }
        for &d in decisions {
            info.record_decision(d);
        }
        info
    }

    #[test]
    fn zero_gamma_never_triggers() {
        let model = PlantModel::new(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            None,
        )
        .unwrap();
        let weights = CostWeights::scalar(1.0, 1.0, 1.0, 0.2);
        let gains = backward_riccati(&model, &weights, 10).unwrap();
        let ctx = VoiContext::new(model.clone(), gains, 1);
        let info = info_with(&[false; 4], &[0.3, 0.5, -1.0, 2.0, 0.1], &model);
        for mode in [VoiMode::Expected, VoiMode::Realized] {
            let ev = voi_proxy(&ctx, 4, predicted_aoi(&info, 4, 1), 0.2, &info, mode).unwrap();
            assert_eq!(ev.value, -0.2);
        }
    }

    #[test]
    fn free_transmission_always_has_positive_expected_value() {
        let (ctx, _) = paper_ctx(1.15, 2, 40);
        let info = info_with(&[true; 30], &[0.0; 31], &ctx.model);
        for k in 0..=38 {
            let aoi = predicted_aoi(&info, k, 2);
            assert!(aoi >= 2);
            let ev = voi_proxy(&ctx, k, aoi, 0.0, &info, VoiMode::Expected).unwrap();
            assert!(ev.value > 0.0, "k={k}");
        }
    }

    #[test]
    fn single_term_scalar_value() {
        let (ctx, _) = paper_ctx(1.15, 2, 150);
        // one transmission at k-1 pins Delta_{k+tau-1} = tau
        let mut decisions = vec![false; 60];
        decisions[59] = true;
        let info = info_with(&decisions, &[0.01; 61], &ctx.model);
        let k = 60;
        let aoi = predicted_aoi(&info, k, 2);
        assert_eq!(aoi, 2);
        let ev = voi_proxy(&ctx, k, aoi, 0.15, &info, VoiMode::Expected).unwrap();
        let gamma = ctx.gains.gamma[k + 2][(0, 0)];
        let hand = gamma * 1.15f64.powi(4) * 0.001 - 0.15;
        assert!((ev.value - hand).abs() < 1e-14);
        // realized with w_{k-1} = 0.01
        let ev = voi_proxy(&ctx, k, aoi, 0.15, &info, VoiMode::Realized).unwrap();
        let hand = gamma * 1.15f64.powi(4) * 1e-4 - 0.15;
        assert!((ev.value - hand).abs() < 1e-14);
    }

    #[test]
    fn realized_mode_with_zero_noise_is_minus_theta() {
        let (ctx, _) = paper_ctx(1.10, 2, 50);
        let info = info_with(&[false; 20], &[0.0; 21], &ctx.model);
        for k in 0..=20 {
            let ev =
                voi_proxy(&ctx, k, predicted_aoi(&info, k, 2), 0.07, &info, VoiMode::Realized)
                    .unwrap();
            assert_eq!(ev.value, -0.07);
        }
    }

    #[test]
    fn voi_proxy_errors() {
        let (ctx, _) = paper_ctx(1.15, 2, 10);
        let info = info_with(&[false; 9], &[0.0; 10], &ctx.model);
        assert!(matches!(
            voi_proxy(&ctx, 9, predicted_aoi(&info, 9, 2), 0.1, &info, VoiMode::Expected),
            Err(Error::Horizon { .. })
        ));
        assert!(matches!(
            voi_proxy(&ctx, 5, 3, 0.1, &info, VoiMode::Expected),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn expected_value_is_monotone_and_threshold_type() {
        let (ctx, _) = paper_ctx(1.15, 2, 150);
        for k in [0usize, 10, 75, 140] {
            let j = k + 2;
            let mut prev = f64::NEG_INFINITY;
            let mut crossed = false;
            for aoi in 2..=(j) {
                let v = ctx.stage.range(j, 3, aoi + 1) - 0.15;
                assert!(v >= prev);
                prev = v;
                if crossed {
                    assert!(v > 0.0);
                }
                crossed |= v > 0.0;
            }
        }
    }

    #[test]
    fn expected_mode_ignores_noise_realization() {
        let (ctx, _) = paper_ctx(1.15, 2, 60);
        let decisions = [false, false, true, false, false, false, true, false];
        let a = info_with(&decisions, &[0.3, -0.1, 0.2, 0.05, 0.0, 0.4, 0.1, -0.3, 0.2], &ctx.model);
        let b = info_with(&decisions, &[0.0; 9], &ctx.model);
        for k in 0..8 {
            let va = voi_proxy(&ctx, k, predicted_aoi(&a, k, 2), 0.1, &a, VoiMode::Expected).unwrap();
            let vb = voi_proxy(&ctx, k, predicted_aoi(&b, k, 2), 0.1, &b, VoiMode::Expected).unwrap();
            assert_eq!(va, vb);
        }
    }

    #[test]
    fn classic_voi_examples() {
        let (ctx, _) = paper_ctx(1.15, 2, 20);
        let gamma = ctx.gains.gamma[4][(0, 0)];
        let zero = classic_voi(&DVector::zeros(1), &ctx.gains, &ctx.model, 3, 0.15).unwrap();
        assert_eq!(zero, -0.15);
        let one = classic_voi(&DVector::from_element(1, 1.0), &ctx.gains, &ctx.model, 3, 0.15).unwrap();
        assert!((one - (1.3225 * gamma - 0.15)).abs() < 1e-14);
        let three = classic_voi(&DVector::from_element(1, 3.0), &ctx.gains, &ctx.model, 3, 0.0).unwrap();
        assert!((three - 9.0 * 1.3225 * gamma).abs() < 1e-12);
        assert!(classic_voi(&DVector::zeros(1), &ctx.gains, &ctx.model, 20, 0.0).is_err());
    }

    fn run_decisions(policy: &SchedulerPolicy, tau: usize, horizon: usize) -> Vec<bool> {
        let (ctx, weights) = paper_ctx(1.15, tau, horizon);
        let mut info = info_with(&[], &vec![0.0; horizon + 2], &ctx.model);
        let err = DVector::zeros(1);
        let mut out = Vec::new();
        for k in 0..=horizon {
            let d = decide(policy, &TriggerView { k, info: &info, error: &err }, &ctx, &weights)
                .unwrap();
            info.record_decision(d.transmit);
            out.push(d.transmit);
        }
        out
    }

    #[test]
    fn periodic_examples() {
        let every = run_decisions(&SchedulerPolicy::periodic(1).unwrap(), 2, 20);
        assert!(every[..=18].iter().all(|d| *d));
        assert!(!every[19] && !every[20]);

        let third = run_decisions(&SchedulerPolicy::periodic(3).unwrap(), 2, 20);
        let sent: Vec<usize> = (0..=20).filter(|k| third[*k]).collect();
        assert_eq!(sent, vec![0, 3, 6, 9, 12, 15, 18]);
        assert!(SchedulerPolicy::periodic(0).is_err());
    }

    #[test]
    fn periodic_rate_counting_formula() {
        for horizon in [10usize, 31, 150] {
            for tau in [0usize, 1, 2, 5] {
                for p in 1..=7 {
                    let d = run_decisions(&SchedulerPolicy::periodic(p).unwrap(), tau, horizon);
                    let count = d.iter().filter(|x| **x).count();
                    assert_eq!(count, (horizon - tau + 1).div_ceil(p));
                }
            }
        }
    }

    #[test]
    fn aoi_threshold_zero_always_transmits() {
        let d = run_decisions(&SchedulerPolicy::AoiThreshold { threshold: 0 }, 2, 30);
        assert!(d[..=28].iter().all(|x| *x));
        let d = run_decisions(&SchedulerPolicy::AoiThreshold { threshold: 0 }, 0, 30);
        assert!(d.iter().all(|x| *x));
    }

    #[test]
    fn current_aoi_counts_delivered_packets_only() {
        let model = PlantModel::scalar(1.1, 0.1, 0.001).unwrap();
        let info = info_with(&[false, true, false, false, false], &[0.0; 6], &model);
        // tau = 2: stamp 1 lands at k = 3
        assert_eq!(current_aoi(&info, 2, 2), 3);
        assert_eq!(current_aoi(&info, 3, 2), 2);
        assert_eq!(current_aoi(&info, 4, 2), 3);
        // tau = 0: packet from k itself not counted
        assert_eq!(current_aoi(&info, 1, 0), 2);
        assert_eq!(current_aoi(&info, 2, 0), 1);
    }
}
