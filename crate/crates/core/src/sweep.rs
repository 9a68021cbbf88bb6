//! Parameter sweeps over policy families and the trade-off outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::config::{PolicySpec, RunConfig, SweepGrid};
use crate::dp::solve_dp;
use crate::error::{Error, Result};
use crate::scheduler::{SchedulerPolicy, VoiMode};
use crate::sim::{
    run_monte_carlo, write_trace_csv, AggregateMetrics, LoopSetup, Stat, TraceRow, TrialMetrics,
    TrialOptions,
};

/// One point of a sweep: a policy plus, for price-driven policies, the price
/// that replaces each loop's configured `theta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub policy: PolicySpec,
    pub theta: Option<f64>,
}

impl SweepPoint {
    /// Value written to the `param` column.
    pub fn param(&self) -> String {
        match (self.policy, self.theta) {
            (_, Some(theta)) => theta.to_string(),
            (PolicySpec::Periodic { period, .. }, None) => period.to_string(),
            (PolicySpec::AoiThreshold { threshold }, None) => threshold.to_string(),
            (_, None) => String::new(),
        }
    }
}

/// Expands the configured grids into points, in grid order. Without a sweep
/// section this is the single configured policy.
pub fn sweep_points(cfg: &RunConfig) -> Vec<SweepPoint> {
    if cfg.sweep.is_empty() {
        return vec![SweepPoint {
            policy: cfg.policy,
            theta: None,
        }];
    }
    let mut points = Vec::new();
    for grid in &cfg.sweep {
        match grid {
            SweepGrid::Theta { policy, values } => points.extend(values.iter().map(|&t| SweepPoint {
                policy: *policy,
                theta: Some(t),
            })),
            SweepGrid::Periods(ps) => points.extend(ps.iter().map(|&period| SweepPoint {
                policy: PolicySpec::Periodic { period, phase: 0 },
                theta: None,
            })),
            SweepGrid::Thresholds(hs) => points.extend(hs.iter().map(|&threshold| SweepPoint {
                policy: PolicySpec::AoiThreshold { threshold },
                theta: None,
            })),
        }
    }
    points
}

/// Turns a policy choice into a runnable policy for one loop.
pub fn bind_policy(spec: PolicySpec, setup: &LoopSetup, mode: VoiMode) -> Result<SchedulerPolicy> {
    spec.validate()?;
    Ok(match spec {
        PolicySpec::VoiProxy => SchedulerPolicy::VoiProxy { mode },
        PolicySpec::ClassicVoi => SchedulerPolicy::ClassicVoi,
        PolicySpec::AoiThreshold { threshold } => SchedulerPolicy::AoiThreshold { threshold },
        PolicySpec::Periodic { period, phase } => SchedulerPolicy::Periodic { period, phase },
        PolicySpec::DpOracle => SchedulerPolicy::DpOracle {
            table: Arc::new(solve_dp(&setup.ctx, &setup.weights)),
        },
    })
}

/// One line of the trade-off table.
#[derive(Debug, Clone, Serialize)]
pub struct TradeoffRow {
    pub subsystem: String,
    pub policy: String,
    pub param: String,
    pub aggregate: Option<AggregateMetrics>,
    pub error: Option<String>,
    #[serde(skip)]
    pub trace: Option<Vec<TraceRow>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub horizon: usize,
    pub trials: usize,
    pub seed: u64,
    pub mode: VoiMode,
    pub rows: Vec<TradeoffRow>,
}

fn point_setup(base: &LoopSetup, point: &SweepPoint) -> Result<LoopSetup> {
    match point.theta {
        Some(theta) => base.with_theta(theta),
        None => Ok(base.clone()),
    }
}

/// Runs every sweep point on every loop. Loop `i` draws from random stream
/// `i` under the shared base seed. A failing point is reported in its row and
/// the sweep continues. With several loops a `total` row combines them per
/// trial: mean rate, summed MSE and costs.
pub fn run_sweep(cfg: &RunConfig) -> Result<SweepResult> {
    let setups = cfg
        .subsystems
        .iter()
        .map(|s| s.setup(cfg.horizon))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for point in sweep_points(cfg) {
        let mut per_loop: Vec<Result<Vec<TrialMetrics>>> = Vec::new();
        for (i, (sub, base)) in cfg.subsystems.iter().zip(&setups).enumerate() {
            let opts = TrialOptions {
                stream: i as u64,
                record_trace: cfg.trace,
                ..TrialOptions::default()
            };
            let outcome = point_setup(base, &point).and_then(|setup| {
                let policy = bind_policy(point.policy, &setup, cfg.mode)?;
                run_monte_carlo(&setup, &policy, cfg.trials, cfg.seed, opts)
            });
            match outcome {
                Ok(mut mc) => {
                    log::info!(
                        "{} {} {}: rate {:.4} psi {:.5}",
                        sub.name,
                        point.policy.id(),
                        point.param(),
                        mc.aggregate.rate.mean,
                        mc.aggregate.total.mean
                    );
                    let trace = mc.trials.first_mut().and_then(|t| t.trace.take());
                    rows.push(TradeoffRow {
                        subsystem: sub.name.clone(),
                        policy: point.policy.id().to_string(),
                        param: point.param(),
                        aggregate: Some(mc.aggregate),
                        error: None,
                        trace,
                    });
                    per_loop.push(Ok(mc.trials));
                }
                Err(e) => {
                    log::warn!("{} {} {} failed: {e}", sub.name, point.policy.id(), point.param());
                    rows.push(TradeoffRow {
                        subsystem: sub.name.clone(),
                        policy: point.policy.id().to_string(),
                        param: point.param(),
                        aggregate: None,
                        error: Some(e.to_string()),
                        trace: None,
                    });
                    per_loop.push(Err(e));
                }
            }
        }
        if cfg.subsystems.len() > 1 {
            let (aggregate, error) = match per_loop.into_iter().collect::<Result<Vec<_>>>() {
                Ok(loops) => (Some(combine_loops(&loops, cfg.seed)), None),
                Err(e) => (None, Some(format!("a subsystem failed: {e}"))),
            };
            rows.push(TradeoffRow {
                subsystem: "total".to_string(),
                policy: point.policy.id().to_string(),
                param: point.param(),
                aggregate,
                error,
                trace: None,
            });
        }
    }
    Ok(SweepResult {
        horizon: cfg.horizon,
        trials: cfg.trials,
        seed: cfg.seed,
        mode: cfg.mode,
        rows,
    })
}

fn combine_loops(loops: &[Vec<TrialMetrics>], seed: u64) -> AggregateMetrics {
    let trials = loops[0].len();
    let count = loops.len() as f64;
    let combined: Vec<TrialMetrics> = (0..trials)
        .map(|i| {
            let sum = |f: fn(&TrialMetrics) -> f64| loops.iter().map(|l| f(&l[i])).sum::<f64>();
            TrialMetrics {
                rate: sum(|t| t.rate) / count,
                avg_mse: sum(|t| t.avg_mse),
                lqg_cost: sum(|t| t.lqg_cost),
                comm_cost: sum(|t| t.comm_cost),
                total: sum(|t| t.total),
                decomposition: sum(|t| t.decomposition),
                transmissions: loops.iter().map(|l| l[i].transmissions).sum(),
                trace: None,
            }
        })
        .collect();
    AggregateMetrics::from_trials(&combined, seed)
}

pub const TRADEOFF_HEADER: &str = "subsystem,policy,param,rate_mean,rate_stderr,mse_mean,mse_stderr,\
J_mean,J_stderr,psi_mean,psi_stderr,trials,seed,error";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Renders the trade-off table. `J` is the LQG cost, `psi` the joint cost.
pub fn tradeoff_csv(result: &SweepResult) -> String {
    let mut out = String::from(TRADEOFF_HEADER);
    out.push('\n');
    for row in &result.rows {
        let _ = write!(out, "{},{},{}", csv_field(&row.subsystem), row.policy, row.param);
        match &row.aggregate {
            Some(a) => {
                for s in [&a.rate, &a.avg_mse, &a.lqg_cost, &a.total] {
                    let Stat { mean, stderr, .. } = s;
                    let _ = write!(out, ",{mean},{stderr}");
                }
                let _ = write!(out, ",{},{}", a.trials, a.seed);
            }
            None => {
                out.push_str(",,,,,,,,");
                let _ = write!(out, ",{},{}", result.trials, result.seed);
            }
        }
        let _ = writeln!(out, ",{}", csv_field(row.error.as_deref().unwrap_or("")));
    }
    out
}

/// Paths written by [`emit_outputs`].
#[derive(Debug, Clone)]
pub struct OutputFiles {
    pub tradeoff: PathBuf,
    pub aggregate: PathBuf,
    pub traces: Vec<PathBuf>,
}

/// Writes `tradeoff.csv`, `aggregate.json` and, when traces were recorded,
/// one `trace_<subsystem>_<policy>[_<param>].csv` per row (trial 0).
pub fn emit_outputs(result: &SweepResult, dir: &Path) -> Result<OutputFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tradeoff = dir.join("tradeoff.csv");
    std::fs::write(&tradeoff, tradeoff_csv(result)).map_err(|e| Error::io(&tradeoff, e))?;

    let aggregate = dir.join("aggregate.json");
    let json = serde_json::to_string_pretty(result).map_err(|e| Error::Parse {
        path: aggregate.clone(),
        reason: e.to_string(),
    })?;
    std::fs::write(&aggregate, json + "\n").map_err(|e| Error::io(&aggregate, e))?;

    let mut traces = Vec::new();
    for row in &result.rows {
        if let Some(trace) = &row.trace {
            let mut name = format!("trace_{}_{}", sanitize(&row.subsystem), row.policy);
            if !row.param.is_empty() {
                name.push('_');
                name.push_str(&sanitize(&row.param));
            }
            let path = dir.join(name + ".csv");
            write_trace_csv(trace, &path)?;
            traces.push(path);
        }
    }
    Ok(OutputFiles {
        tradeoff,
        aggregate,
        traces,
    })
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}
