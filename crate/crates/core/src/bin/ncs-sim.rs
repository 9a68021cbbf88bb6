use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use ncs_core::config::{parse_config, PolicySpec, SweepGrid};
use ncs_core::scheduler::VoiMode;
use ncs_core::sweep::{emit_outputs, run_sweep};
use ncs_core::{Error, Result};

/// Monte Carlo simulation of delayed networked control loops under
/// transmission scheduling policies.
#[derive(Debug, Parser)]
#[command(name = "ncs-sim", version)]
struct Args {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,

    /// Policy to run, e.g. `voi_proxy`, `periodic:3`, `aoi_threshold:4`,
    /// `classic_voi`, `dp_oracle`. Ignored when a sweep is given.
    #[arg(long)]
    policy: Option<String>,

    /// Sweep grid `family=v1,v2,...`; repeatable. Families: voi_proxy,
    /// classic_voi, dp_oracle (prices), periodic (periods), aoi_threshold.
    /// Replaces the grids of the configuration file.
    #[arg(long)]
    sweep: Vec<String>,

    #[arg(long)]
    trials: Option<usize>,

    #[arg(long)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Write a per-step trace of trial 0 for every row.
    #[arg(long)]
    trace: bool,

    /// VoI proxy noise evaluation: realized | expected.
    #[arg(long)]
    mode: Option<VoiMode>,
}

fn parse_grid(arg: &str) -> Result<SweepGrid> {
    let (family, values) = arg
        .split_once('=')
        .ok_or_else(|| Error::config("sweep", format!("`{arg}` is not family=v1,v2,...")))?;
    let list: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if list.is_empty() {
        return Err(Error::config("sweep", format!("`{family}` grid is empty")));
    }
    let floats = || -> Result<Vec<f64>> {
        list.iter()
            .map(|v| match v.parse::<f64>() {
                Ok(x) if x.is_finite() && x >= 0.0 => Ok(x),
                _ => Err(Error::config("sweep", format!("bad price `{v}`"))),
            })
            .collect()
    };
    let ints = || -> Result<Vec<usize>> {
        list.iter()
            .map(|v| v.parse().map_err(|_| Error::config("sweep", format!("bad integer `{v}`"))))
            .collect()
    };
    Ok(match family {
        "voi_proxy" => SweepGrid::Theta { policy: PolicySpec::VoiProxy, values: floats()? },
        "classic_voi" => SweepGrid::Theta { policy: PolicySpec::ClassicVoi, values: floats()? },
        "dp_oracle" => SweepGrid::Theta { policy: PolicySpec::DpOracle, values: floats()? },
        "periodic" => {
            let ps = ints()?;
            if ps.contains(&0) {
                return Err(Error::config("sweep", "periods must be >= 1"));
            }
            SweepGrid::Periods(ps)
        }
        "aoi_threshold" => SweepGrid::Thresholds(ints()?),
        other => return Err(Error::config("sweep", format!("unknown family `{other}`"))),
    })
}

fn run(args: Args) -> Result<()> {
    let mut cfg = parse_config(&args.config)?;
    for w in &cfg.warnings {
        log::warn!("{}: {w}", args.config.display());
    }
    if let Some(p) = &args.policy {
        cfg.policy = PolicySpec::parse(p)?;
    }
    if !args.sweep.is_empty() {
        cfg.sweep = args.sweep.iter().map(|s| parse_grid(s)).collect::<Result<_>>()?;
    }
    if let Some(t) = args.trials {
        if t == 0 {
            return Err(Error::config("trials", "must be >= 1"));
        }
        cfg.trials = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = args.out {
        cfg.out_dir = o;
    }
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    cfg.trace |= args.trace;

    let result = run_sweep(&cfg)?;
    let files = emit_outputs(&result, &cfg.out_dir)?;
    let failed = result.rows.iter().filter(|r| r.error.is_some()).count();
    println!("wrote {}", files.tradeoff.display());
    println!("wrote {}", files.aggregate.display());
    for t in &files.traces {
        println!("wrote {}", t.display());
    }
    if failed > 0 {
        eprintln!("{failed} sweep point(s) failed; see the error column");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
