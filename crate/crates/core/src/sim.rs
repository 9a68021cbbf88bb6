//! Closed-loop trial simulation and Monte Carlo aggregation.
//!
//! Step order at time `k`:
//! 1. deliver the packet due at `k` and rebase the estimate (`tau >= 1`),
//! 2. the trigger decides `delta_k` (forced to 0 once `k + tau > T`),
//! 3. the decision is submitted to the channel,
//! 4. with `tau = 0` the packet just submitted is delivered here instead of 1,
//! 5. `u_k = L_k xhat_k` is applied and stage costs are accumulated,
//! 6. `w_k` is drawn, the plant steps and the estimate is propagated.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::channel::ChannelState;
use crate::error::{Error, Result};
use crate::estimator::{ControllerState, TriggerInfo};
use crate::lqg::{backward_riccati, certainty_equiv_control, CostWeights};
use crate::plant::{step_plant, GaussianSampler, PlantModel, StateVector};
use crate::scheduler::{decide, SchedulerPolicy, TriggerView, VoiContext};

/// Everything needed to simulate one loop: model, weights, delay, horizon
/// and the precomputed gains. Immutable and shared by all trials.
#[derive(Debug, Clone)]
pub struct LoopSetup {
    pub weights: CostWeights,
    pub ctx: Arc<VoiContext>,
    w_sampler: GaussianSampler,
    r0_sampler: GaussianSampler,
}

impl LoopSetup {
    pub fn new(model: PlantModel, weights: CostWeights, tau: usize, horizon: usize) -> Result<Self> {
        if tau > horizon {
            return Err(Error::config(
                "tau",
                format!("delay {tau} exceeds horizon {horizon}"),
            ));
        }
        let gains = backward_riccati(&model, &weights, horizon)?;
        let w_sampler = GaussianSampler::new(model.w())?;
        let r0_sampler = GaussianSampler::new(model.r0())?;
        Ok(Self {
            weights,
            ctx: Arc::new(VoiContext::new(model, gains, tau)),
            w_sampler,
            r0_sampler,
        })
    }

    pub fn model(&self) -> &PlantModel {
        &self.ctx.model
    }

    pub fn tau(&self) -> usize {
        self.ctx.tau
    }

    pub fn horizon(&self) -> usize {
        self.ctx.horizon()
    }

    /// Same loop with a different constant transmission price. Gains do not
    /// depend on the price and are reused.
    pub fn with_theta(&self, theta: f64) -> Result<Self> {
        let weights = self.weights.clone().with_theta(theta);
        weights.validate(self.model().n(), self.model().m(), self.horizon())?;
        Ok(Self {
            weights,
            ..self.clone()
        })
    }
}

/// Full description of a single trial.
#[derive(Debug, Clone)]
pub struct TrialConfig {
    pub model: PlantModel,
    pub weights: CostWeights,
    pub tau: usize,
    pub horizon: usize,
    pub policy: SchedulerPolicy,
    pub seed: u64,
}

/// Per-trial options that do not change the simulated trajectory.
#[derive(Debug, Clone, Copy)]
pub struct TrialOptions {
    /// Random stream within the seed; loop `i` of a multi-loop run uses `i`.
    pub stream: u64,
    pub record_trace: bool,
    /// Re-check estimator, AoI and error identities at every step.
    pub check_invariants: bool,
}

impl Default for TrialOptions {
    fn default() -> Self {
        Self {
            stream: 0,
            record_trace: false,
            check_invariants: cfg!(debug_assertions),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub k: usize,
    pub x: Vec<f64>,
    pub xhat: Vec<f64>,
    pub u: Vec<f64>,
    pub e: Vec<f64>,
    pub delta: bool,
    pub delivered: bool,
    pub aoi: usize,
    pub voip: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialMetrics {
    pub rate: f64,
    pub avg_mse: f64,
    pub lqg_cost: f64,
    pub comm_cost: f64,
    pub total: f64,
    /// Per-trial value of `(x_0^T P_0 x_0 + sum_k w_k^T P_{k+1} w_k + e_k^T Gamma_k e_k + theta_k delta_k) / (T+1)`,
    /// whose mean equals the mean of `total`.
    pub decomposition: f64,
    pub transmissions: usize,
    #[serde(skip)]
    pub trace: Option<Vec<TraceRow>>,
}

pub fn run_trial(cfg: &TrialConfig) -> Result<TrialMetrics> {
    cfg.policy.validate()?;
    let setup = LoopSetup::new(cfg.model.clone(), cfg.weights.clone(), cfg.tau, cfg.horizon)?;
    simulate(&setup, &cfg.policy, cfg.seed, TrialOptions::default())
}

/// Runs one trial on a prepared loop.
pub fn simulate(
    setup: &LoopSetup,
    policy: &SchedulerPolicy,
    seed: u64,
    opts: TrialOptions,
) -> Result<TrialMetrics> {
    let ctx = &*setup.ctx;
    let model = &ctx.model;
    let gains = &ctx.gains;
    let weights = &setup.weights;
    let tau = ctx.tau;
    let horizon = ctx.horizon();
    let steps = horizon + 1;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(opts.stream);

    let x0 = setup.r0_sampler.sample(&mut rng);
    let mut x = StateVector::new(x0.clone(), 0);
    let mut info = TriggerInfo::new(x0.clone());
    let mut cs = ControllerState::new(model.n(), steps + 1);
    let mut ch = ChannelState::new(tau);

    let mut stage_cost = 0.0;
    let mut comm = 0.0;
    let mut mse = 0.0;
    let mut decomposition = x0.dot(&(&gains.p[0] * &x0));
    let mut transmissions = 0;
    let mut trace = opts.record_trace.then(|| Vec::with_capacity(steps));

    let fail = |k: usize, reason: String| Error::TrialFailure {
        trial: seed,
        k,
        reason,
    };

    for k in 0..steps {
        let mut delivered = false;
        if tau > 0 {
            if let Some(pkt) = ch.deliver(k)? {
                cs.rebase_estimate(&pkt, model, k)?;
                delivered = true;
            }
        }

        let err = &x.x - cs.xhat();
        let decision = decide(
            policy,
            &TriggerView {
                k,
                info: &info,
                error: &err,
            },
            ctx,
            weights,
        )?;
        let delta = decision.transmit && k + tau <= horizon;
        info.record_decision(delta);
        ch.submit(k, delta, &x)?;

        if tau == 0 {
            if let Some(pkt) = ch.deliver(k)? {
                cs.rebase_estimate(&pkt, model, k)?;
                delivered = true;
            }
        }

        let e = &x.x - cs.xhat();
        if opts.check_invariants {
            check_step(ctx, &cs, &ch, &info, &e, k)?;
        }

        let u = certainty_equiv_control(gains, cs.xhat(), k)?;
        let theta = weights.theta_at(k);
        stage_cost += x.x.dot(&(weights.q.at(k) * &x.x)) + u.dot(&(weights.r.at(k) * &u));
        if delta {
            comm += theta;
            transmissions += 1;
        }
        let e2 = e.norm_squared();
        mse += e2;
        decomposition += e.dot(&(&gains.gamma[k] * &e)) + if delta { theta } else { 0.0 };

        let w = setup.w_sampler.sample(&mut rng);
        decomposition += w.dot(&(&gains.p[k + 1] * &w));

        if let Some(rows) = trace.as_mut() {
            rows.push(TraceRow {
                k,
                x: x.x.as_slice().to_vec(),
                xhat: cs.xhat().as_slice().to_vec(),
                u: u.as_slice().to_vec(),
                e: e.as_slice().to_vec(),
                delta,
                delivered,
                aoi: ch.aoi(),
                voip: decision.voi,
            });
        }

        let next = step_plant(model, &x, &u, &w)?;
        if next.x.iter().any(|v| !v.is_finite()) || !stage_cost.is_finite() {
            return Err(fail(k, "state diverged to a non-finite value".into()));
        }
        info.record_step(model, u.clone(), next.x.clone());
        cs.propagate_estimate(model, &u);
        x = next;
    }

    stage_cost += x.x.dot(&(&weights.q_terminal * &x.x));
    let norm = steps as f64;
    let lqg_cost = stage_cost / norm;
    let comm_cost = comm / norm;
    let metrics = TrialMetrics {
        rate: transmissions as f64 / norm,
        avg_mse: mse / norm,
        lqg_cost,
        comm_cost,
        total: lqg_cost + comm_cost,
        decomposition: decomposition / norm,
        transmissions,
        trace,
    };
    if !metrics.total.is_finite() {
        return Err(fail(horizon, "non-finite cost".into()));
    }
    Ok(metrics)
}

fn check_step(
    ctx: &VoiContext,
    cs: &ControllerState,
    ch: &ChannelState,
    info: &TriggerInfo,
    e: &DVector<f64>,
    k: usize,
) -> Result<()> {
    let aoi = ch.aoi();
    if aoi as i64 != k as i64 - ch.last_stamp() || cs.base_state().k != ch.last_stamp() {
        return Err(Error::State(format!("AoI bookkeeping diverged at k={k}")));
    }
    let closed = cs.closed_form_estimate(&ctx.model)?;
    let scale = cs.xhat().amax().max(1e-300);
    if (closed - cs.xhat()).amax() > 1e-9 * scale.max(1.0) {
        return Err(Error::State(format!("estimate differs from closed form at k={k}")));
    }
    let mut sum = DVector::zeros(e.len());
    for r in 1..=aoi {
        let w = info
            .noise(k as i64 - r as i64)
            .ok_or_else(|| Error::State(format!("missing noise for error identity at k={k}")))?;
        sum += &ctx.powers[r - 1] * w;
    }
    let tol = 1e-9 * sum.amax().max(e.amax()).max(1e-12);
    if (&sum - e).amax() > tol {
        return Err(Error::State(format!("error identity violated at k={k}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
}

impl Stat {
    /// Mean, sample standard deviation and standard error, summed in order.
    pub fn from_values(values: impl ExactSizeIterator<Item = f64> + Clone) -> Self {
        let n = values.len();
        if n == 0 {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
                stderr: f64::NAN,
            };
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let std = if n > 1 {
            let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat {
            mean,
            std,
            stderr: std / (n as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateMetrics {
    pub rate: Stat,
    pub avg_mse: Stat,
    pub lqg_cost: Stat,
    pub comm_cost: Stat,
    pub total: Stat,
    pub decomposition: Stat,
    pub trials: usize,
    pub seed: u64,
}

impl AggregateMetrics {
    pub fn from_trials(trials: &[TrialMetrics], seed: u64) -> Self {
        let stat = |f: fn(&TrialMetrics) -> f64| Stat::from_values(trials.iter().map(f));
        Self {
            rate: stat(|t| t.rate),
            avg_mse: stat(|t| t.avg_mse),
            lqg_cost: stat(|t| t.lqg_cost),
            comm_cost: stat(|t| t.comm_cost),
            total: stat(|t| t.total),
            decomposition: stat(|t| t.decomposition),
            trials: trials.len(),
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MonteCarloResult {
    pub aggregate: AggregateMetrics,
    pub trials: Vec<TrialMetrics>,
}

/// Seed of trial `index` under `base_seed`.
pub fn trial_seed(base_seed: u64, index: usize) -> u64 {
    base_seed.wrapping_add(index as u64)
}

/// Runs `trials` independent trials (in parallel) with seeds
/// `base_seed + i`. Results are ordered by trial index, so the aggregate does
/// not depend on scheduling.
pub fn run_monte_carlo(
    setup: &LoopSetup,
    policy: &SchedulerPolicy,
    trials: usize,
    base_seed: u64,
    opts: TrialOptions,
) -> Result<MonteCarloResult> {
    if trials == 0 {
        return Err(Error::config("trials", "must be >= 1"));
    }
    policy.validate()?;
    let results: Vec<TrialMetrics> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let trial_opts = TrialOptions {
                record_trace: opts.record_trace && i == 0,
                ..opts
            };
            simulate(setup, policy, trial_seed(base_seed, i), trial_opts).map_err(|e| match e {
                Error::TrialFailure { k, reason, .. } => Error::TrialFailure {
                    trial: i as u64,
                    k,
                    reason,
                },
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MonteCarloResult {
        aggregate: AggregateMetrics::from_trials(&results, base_seed),
        trials: results,
    })
}

/// Mean and spread of a per-trial metric difference `a - b` between two runs
/// sharing seeds (common random numbers).
pub fn paired_difference(
    a: &[TrialMetrics],
    b: &[TrialMetrics],
    metric: fn(&TrialMetrics) -> f64,
) -> Stat {
    assert_eq!(a.len(), b.len(), "paired runs need equal trial counts");
    Stat::from_values(a.iter().zip(b).map(|(x, y)| metric(x) - metric(y)).collect::<Vec<_>>().into_iter())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecompositionReport {
    pub psi_mean: f64,
    pub decomposition_mean: f64,
    pub relative_gap: f64,
}

/// Compares the ensemble mean of `Psi` with the ensemble mean of its
/// noise/error/price decomposition.
pub fn cost_decomposition_check(trials: &[TrialMetrics]) -> DecompositionReport {
    let n = trials.len() as f64;
    let psi_mean = trials.iter().map(|t| t.total).sum::<f64>() / n;
    let decomposition_mean = trials.iter().map(|t| t.decomposition).sum::<f64>() / n;
    let gap = (psi_mean - decomposition_mean).abs();
    let relative_gap = if gap == 0.0 {
        0.0
    } else {
        gap / psi_mean.abs().max(decomposition_mean.abs())
    };
    DecompositionReport {
        psi_mean,
        decomposition_mean,
        relative_gap,
    }
}

/// Writes a per-step trace with columns
/// `k,x0..,xhat0..,u0..,e0..,delta,delivered,aoi,voip`.
pub fn write_trace_csv(rows: &[TraceRow], path: &Path) -> Result<()> {
    let mut out = String::new();
    let n = rows.first().map_or(0, |r| r.x.len());
    let m = rows.first().map_or(0, |r| r.u.len());
    let mut header = vec!["k".to_string()];
    for (name, len) in [("x", n), ("xhat", n), ("u", m), ("e", n)] {
        header.extend((0..len).map(|i| format!("{name}{i}")));
    }
    header.extend(["delta", "delivered", "aoi", "voip"].map(String::from));
    out.push_str(&header.join(","));
    out.push('\n');
    for r in rows {
        let mut fields = vec![r.k.to_string()];
        for vals in [&r.x, &r.xhat, &r.u, &r.e] {
            fields.extend(vals.iter().map(|v| v.to_string()));
        }
        fields.push((r.delta as u8).to_string());
        fields.push((r.delivered as u8).to_string());
        fields.push(r.aoi.to_string());
        fields.push(r.voip.map(|v| v.to_string()).unwrap_or_default());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
