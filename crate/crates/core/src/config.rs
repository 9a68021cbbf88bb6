//! TOML run/sweep configuration.
//!
//! ```toml
//! horizon = 150
//! trials = 1000
//! seed = 1
//! mode = "realized"          # VoI proxy noise evaluation: realized | expected
//!
//! [policy]
//! kind = "voi_proxy"         # voi_proxy | classic_voi | aoi_threshold | periodic | dp_oracle
//! threshold = 4              # aoi_threshold only
//! period = 3                 # periodic only
//! phase = 0                  # periodic only
//!
//! [sweep]                    # optional; grids per policy family
//! voi_proxy = [0.005, 0.022] # transmission prices
//! periodic = [2, 3, 4]       # periods
//! aoi_threshold = [2, 3]     # thresholds
//!
//! [output]
//! dir = "out"
//! trace = false
//!
//! [[subsystem]]
//! name = "loop1"
//! a = 1.15                   # scalars or row-major nested arrays
//! b = 0.1
//! w = 0.001
//! r0 = 0.001                 # optional, defaults to w
//! q = 1.0
//! r = 1.0
//! q_terminal = 1.0           # optional, defaults to q
//! tau = 2
//! theta = 0.15
//! ```
//!
//! Unknown keys are reported as warnings; every invariant of the model,
//! weights and timing is checked at load.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::lqg::{CostWeights, Schedule};
use crate::plant::PlantModel;
use crate::scheduler::VoiMode;
use crate::sim::LoopSetup;

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixSpec {
    fn to_matrix(&self, field: &str) -> Result<DMatrix<f64>> {
        match self {
            MatrixSpec::Scalar(v) => Ok(DMatrix::from_element(1, 1, *v)),
            MatrixSpec::Rows(rows) => {
                let nrows = rows.len();
                let ncols = rows.first().map_or(0, Vec::len);
                if nrows == 0 || ncols == 0 {
                    return Err(Error::config(field, "matrix is empty"));
                }
                if rows.iter().any(|r| r.len() != ncols) {
                    return Err(Error::config(field, "rows have different lengths"));
                }
                Ok(DMatrix::from_row_iterator(
                    nrows,
                    ncols,
                    rows.iter().flatten().copied(),
                ))
            }
        }
    }
}

type Extra = BTreeMap<String, toml::Value>;

#[derive(Debug, Deserialize)]
struct RawConfig {
    horizon: Option<i64>,
    trials: Option<i64>,
    seed: Option<u64>,
    mode: Option<String>,
    policy: Option<RawPolicy>,
    sweep: Option<RawSweep>,
    output: Option<RawOutput>,
    #[serde(default)]
    subsystem: Vec<RawSubsystem>,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Debug, Deserialize)]
struct RawPolicy {
    kind: String,
    threshold: Option<i64>,
    period: Option<i64>,
    phase: Option<i64>,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Debug, Deserialize)]
struct RawSweep {
    voi_proxy: Option<Vec<f64>>,
    classic_voi: Option<Vec<f64>>,
    dp_oracle: Option<Vec<f64>>,
    periodic: Option<Vec<i64>>,
    aoi_threshold: Option<Vec<i64>>,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Debug, Deserialize)]
struct RawOutput {
    dir: Option<PathBuf>,
    trace: Option<bool>,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Debug, Deserialize)]
struct RawSubsystem {
    name: Option<String>,
    a: MatrixSpec,
    b: MatrixSpec,
    w: MatrixSpec,
    r0: Option<MatrixSpec>,
    q: MatrixSpec,
    r: MatrixSpec,
    q_terminal: Option<MatrixSpec>,
    tau: i64,
    theta: f64,
    #[serde(flatten)]
    extra: Extra,
}

/// Policy choice before it is bound to a particular loop (the DP oracle
/// needs the loop's gains to build its table).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicySpec {
    VoiProxy,
    ClassicVoi,
    AoiThreshold { threshold: usize },
    Periodic { period: usize, phase: usize },
    DpOracle,
}

impl PolicySpec {
    pub fn id(&self) -> &'static str {
        match self {
            PolicySpec::VoiProxy => "voi_proxy",
            PolicySpec::ClassicVoi => "classic_voi",
            PolicySpec::AoiThreshold { .. } => "aoi_threshold",
            PolicySpec::Periodic { .. } => "periodic",
            PolicySpec::DpOracle => "dp_oracle",
        }
    }

    /// Parses `kind[:param]`, e.g. `voi_proxy`, `periodic:3`, `aoi_threshold:4`.
    pub fn parse(id: &str) -> Result<Self> {
        let (kind, param) = match id.split_once(':') {
            Some((k, p)) => (k, Some(p)),
            None => (id, None),
        };
        let int = |field: &str| -> Result<usize> {
            let p = param.ok_or_else(|| Error::config("policy", format!("`{kind}` needs `{kind}:<{field}>`")))?;
            p.parse()
                .map_err(|_| Error::config("policy", format!("`{p}` is not a non-negative integer")))
        };
        let spec = match kind {
            "voi_proxy" => PolicySpec::VoiProxy,
            "classic_voi" => PolicySpec::ClassicVoi,
            "dp_oracle" => PolicySpec::DpOracle,
            "aoi_threshold" => PolicySpec::AoiThreshold {
                threshold: int("threshold")?,
            },
            "periodic" => PolicySpec::Periodic {
                period: int("period")?,
                phase: 0,
            },
            other => {
                return Err(Error::config(
                    "policy",
                    format!("unknown policy `{other}` (voi_proxy, classic_voi, aoi_threshold, periodic, dp_oracle)"),
                ))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PolicySpec::Periodic { period: 0, .. } => Err(Error::config("period", "must be >= 1")),
            _ => Ok(()),
        }
    }
}

/// Policy families that can be swept, with their grids.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepGrid {
    /// Transmission prices for a price-driven policy.
    Theta { policy: PolicySpec, values: Vec<f64> },
    Periods(Vec<usize>),
    Thresholds(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct SubsystemConfig {
    pub name: String,
    pub model: PlantModel,
    pub weights: CostWeights,
    pub tau: usize,
}

impl SubsystemConfig {
    pub fn setup(&self, horizon: usize) -> Result<LoopSetup> {
        LoopSetup::new(self.model.clone(), self.weights.clone(), self.tau, horizon)
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub horizon: usize,
    pub trials: usize,
    pub seed: u64,
    pub mode: VoiMode,
    pub policy: PolicySpec,
    pub sweep: Vec<SweepGrid>,
    pub out_dir: PathBuf,
    pub trace: bool,
    pub subsystems: Vec<SubsystemConfig>,
    /// Unknown keys found while parsing.
    pub warnings: Vec<String>,
}

pub const DEFAULT_TRIALS: usize = 1000;
pub const DEFAULT_SEED: u64 = 1;

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Parse { reason, .. } => Error::Parse {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Parse {
        path: PathBuf::from("<config>"),
        reason: e.to_string(),
    })?;
    let mut warnings = Vec::new();
    let mut warn_extra = |section: &str, extra: &Extra| {
        for key in extra.keys() {
            warnings.push(format!("unknown key `{section}{key}` ignored"));
        }
    };
    warn_extra("", &raw.extra);

    let horizon = non_negative("horizon", raw.horizon.ok_or_else(|| Error::config("horizon", "missing"))?)?;
    let trials = match raw.trials {
        Some(t) => non_negative("trials", t)?,
        None => DEFAULT_TRIALS,
    };
    if trials == 0 {
        return Err(Error::config("trials", "must be >= 1"));
    }
    let mode = raw.mode.as_deref().map(str::parse).transpose()?.unwrap_or_default();

    let policy = match raw.policy {
        None => PolicySpec::VoiProxy,
        Some(p) => {
            warn_extra("policy.", &p.extra);
            let spec = match p.kind.as_str() {
                "periodic" => PolicySpec::Periodic {
                    period: non_negative(
                        "policy.period",
                        p.period.ok_or_else(|| Error::config("policy.period", "missing for periodic"))?,
                    )?,
                    phase: non_negative("policy.phase", p.phase.unwrap_or(0))?,
                },
                "aoi_threshold" => PolicySpec::AoiThreshold {
                    threshold: non_negative(
                        "policy.threshold",
                        p.threshold
                            .ok_or_else(|| Error::config("policy.threshold", "missing for aoi_threshold"))?,
                    )?,
                },
                other => PolicySpec::parse(other)
                    .map_err(|_| Error::config("policy.kind", format!("unknown policy `{other}`")))?,
            };
            spec.validate()?;
            spec
        }
    };

    let mut sweep = Vec::new();
    if let Some(s) = raw.sweep {
        warn_extra("sweep.", &s.extra);
        for (policy, field, values) in [
            (PolicySpec::VoiProxy, "sweep.voi_proxy", s.voi_proxy),
            (PolicySpec::ClassicVoi, "sweep.classic_voi", s.classic_voi),
            (PolicySpec::DpOracle, "sweep.dp_oracle", s.dp_oracle),
        ] {
            if let Some(values) = values {
                if values.is_empty() {
                    return Err(Error::config(field, "grid is empty"));
                }
                if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
                    return Err(Error::config(field, format!("price {bad} must be finite and >= 0")));
                }
                sweep.push(SweepGrid::Theta { policy, values });
            }
        }
        if let Some(periods) = s.periodic {
            let periods = int_grid("sweep.periodic", &periods)?;
            if periods.contains(&0) {
                return Err(Error::config("sweep.periodic", "periods must be >= 1"));
            }
            sweep.push(SweepGrid::Periods(periods));
        }
        if let Some(th) = s.aoi_threshold {
            sweep.push(SweepGrid::Thresholds(int_grid("sweep.aoi_threshold", &th)?));
        }
    }

    let (out_dir, trace) = match raw.output {
        None => (PathBuf::from("out"), false),
        Some(o) => {
            warn_extra("output.", &o.extra);
            (o.dir.unwrap_or_else(|| PathBuf::from("out")), o.trace.unwrap_or(false))
        }
    };

    if raw.subsystem.is_empty() {
        return Err(Error::config("subsystem", "at least one [[subsystem]] is required"));
    }
    let mut subsystems = Vec::new();
    for (i, s) in raw.subsystem.iter().enumerate() {
        let prefix = format!("subsystem[{i}]");
        warn_extra(&format!("{prefix}."), &s.extra);
        subsystems.push(build_subsystem(s, &prefix, horizon)?);
    }

    Ok(RunConfig {
        horizon,
        trials,
        seed: raw.seed.unwrap_or(DEFAULT_SEED),
        mode,
        policy,
        sweep,
        out_dir,
        trace,
        subsystems,
        warnings,
    })
}

fn build_subsystem(s: &RawSubsystem, prefix: &str, horizon: usize) -> Result<SubsystemConfig> {
    let field = |name: &str| format!("{prefix}.{name}");
    let name = s.name.clone().unwrap_or_else(|| prefix.replace(['[', ']'], ""));
    let a = s.a.to_matrix(&field("a"))?;
    let b = s.b.to_matrix(&field("b"))?;
    let w = s.w.to_matrix(&field("w"))?;
    let r0 = s.r0.as_ref().map(|m| m.to_matrix(&field("r0"))).transpose()?;
    let model = PlantModel::new(a, b, w, r0).map_err(|e| prefixed(e, prefix))?;

    let q = s.q.to_matrix(&field("q"))?;
    let q_terminal = match &s.q_terminal {
        Some(m) => m.to_matrix(&field("q_terminal"))?,
        None => q.clone(),
    };
    let weights = CostWeights {
        q: Schedule::Constant(q),
        r: Schedule::Constant(s.r.to_matrix(&field("r"))?),
        q_terminal,
        theta: Schedule::Constant(s.theta),
    };
    weights
        .validate(model.n(), model.m(), horizon)
        .map_err(|e| prefixed(e, prefix))?;

    let tau = non_negative(&field("tau"), s.tau)?;
    if tau > horizon {
        return Err(Error::config(
            field("tau"),
            format!("delay {tau} exceeds horizon {horizon} (need T >= tau)"),
        ));
    }
    Ok(SubsystemConfig {
        name,
        model,
        weights,
        tau,
    })
}

fn prefixed(e: Error, prefix: &str) -> Error {
    match e {
        Error::Config { field, reason } => Error::Config {
            field: format!("{prefix}.{field}"),
            reason,
        },
        other => other,
    }
}

fn non_negative(field: &str, v: i64) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::config(field, format!("must be >= 0, got {v}")))
}

fn int_grid(field: &str, values: &[i64]) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(Error::config(field, "grid is empty"));
    }
    values.iter().map(|v| non_negative(field, *v)).collect()
}
