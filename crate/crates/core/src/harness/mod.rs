//! Experiment orchestration: configuration, end-to-end runs, sweeps and
//! reporting.

mod attack;
mod config;
mod report;
mod run;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use attack::{
    attack_cluster, attack_extract, attack_invert, cluster_release, invert_release, AttackResult,
    ClusterMethod, InitMode,
};
pub use config::{RunConfig, CONFIG_SCHEMA_VERSION};
pub use report::{
    read_metrics_csv, render_table, report, write_metrics_csv, MetricsRow, METRICS_COLUMNS,
    METRICS_SCHEMA_VERSION,
};
pub use run::{
    demasked_accuracy, embed_chain, persist, prepare_release, pseudo_test_set, run_experiment, run_id,
    run_to_dir, AttackMetrics, LinkBytes, Release, RunArtifacts, RunRecord, Timings,
    RECORD_SCHEMA_VERSION,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Epsilon,
    Gamma,
    Bits,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(SweepAxis::Epsilon),
            "gamma" => Ok(SweepAxis::Gamma),
            "b" | "B" | "bits" => Ok(SweepAxis::Bits),
            other => Err(Error::InvalidArgument(format!("unknown sweep axis {other}"))),
        }
    }
}

/// The config for one sweep point. `f64::INFINITY` on the epsilon axis
/// releases activations without noise.
pub fn apply_axis(base: &RunConfig, axis: SweepAxis, value: f64) -> Result<RunConfig> {
    let mut cfg = base.clone();
    let integral = |v: f64| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 && v.is_finite() {
            Ok(v as usize)
        } else {
            Err(Error::InvalidArgument(format!("{v} is not a positive integer")))
        }
    };
    match axis {
        SweepAxis::Epsilon => {
            cfg.plan.dp.epsilon = if value.is_infinite() && value > 0.0 {
                None
            } else {
                Some(value)
            };
        }
        SweepAxis::Gamma => cfg.set_gamma(integral(value)?),
        SweepAxis::Bits => {
            cfg.plan.watermark.bits = integral(value)?;
            cfg.plan.watermark.positions = None;
        }
    }
    crate::pipeline::negotiate(&cfg.plan)?;
    Ok(cfg)
}

/// One run per value. With `out_dir`, each run is persisted under
/// `<axis>_<value>/` and the combined `sweep.csv` is written next to them.
pub fn sweep(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[f64],
    out_dir: Option<&Path>,
) -> Result<Vec<RunRecord>> {
    let cfgs: Vec<RunConfig> = values
        .iter()
        .map(|&v| apply_axis(base, axis, v))
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(cfgs.len());
    for (cfg, v) in cfgs.iter().zip(values) {
        let rec = match out_dir {
            Some(dir) => run_to_dir(cfg, &dir.join(format!("{axis:?}_{v}").to_lowercase()))?,
            None => run_experiment(cfg)?.record,
        };
        records.push(rec);
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let rows: Vec<MetricsRow> = records.iter().map(MetricsRow::from_record).collect();
        write_metrics_csv(std::fs::File::create(dir.join("sweep.csv"))?, &rows)?;
    }
    Ok(records)
}
