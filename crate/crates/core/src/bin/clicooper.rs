use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use clicooper::attacks::{InvertConfig, SurrogateTraining};
use clicooper::dp::DpActivationBatch;
use clicooper::harness::{
    self, attack_cluster, attack_extract, attack_invert, report, AttackResult, ClusterMethod, InitMode,
    RunConfig, RunRecord, SweepAxis,
};
use clicooper::nn::load_checkpoint;
use clicooper::pipeline::TransportKind;
use clicooper::verifier::{
    verify, AccuracyRequirement, ChainManifest, PseudoTestSet, VerificationReport, DEFAULT_ETA_GOAL,
};
use clicooper::{Error, Result};

#[derive(Parser)]
#[command(name = "clicooper", version, about = "Multi-trainer split learning with chained watermarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config; the built-in default is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-derive every role seed from this base seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inproc,
    Tcp,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment end to end.
    Run(Common),
    /// Run one experiment per value along an axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// epsilon, gamma or b.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values; `inf` disables noise on the epsilon axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Check a released chain from its artifacts.
    Verify {
        #[arg(long)]
        cache: PathBuf,
        /// Trainer checkpoints in execution order.
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Client checkpoint, needed for the accuracy gate.
        #[arg(long, requires = "test")]
        client: Option<PathBuf>,
        /// Pseudo-labelled test set from the data client.
        #[arg(long, requires = "client")]
        test: Option<PathBuf>,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        #[arg(long, default_value_t = DEFAULT_ETA_GOAL)]
        eta_goal: f64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run one of the attacks against a configured run.
    Attack {
        #[command(subcommand)]
        kind: AttackKind,
    },
    /// Tabulate report.json files (or directories holding them).
    Report {
        paths: Vec<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum AttackKind {
    Cluster {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "kmeans")]
        method: MethodArg,
        #[arg(long, default_value_t = 8)]
        min_pts: usize,
    },
    Invert {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 128)]
        samples: usize,
        #[arg(long, value_enum, default_value = "random")]
        init: InitArg,
        #[arg(long, default_value_t = 200)]
        iters: usize,
    },
    Extract {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Kmeans,
    Dbscan,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Random,
    Known,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.reseed(s);
    }
    if let Some(t) = c.transport {
        cfg.transport = match t {
            TransportArg::Inproc => TransportKind::Inproc,
            TransportArg::Tcp => TransportKind::Tcp,
        };
    }
    Ok(cfg)
}

fn parse_value(s: &str) -> Result<f64> {
    match s.trim() {
        "inf" | "infinity" => Ok(f64::INFINITY),
        v => v
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("cannot parse sweep value {v:?}"))),
    }
}

fn emit_attack(res: &AttackResult, out_dir: Option<&Path>) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(res)?);
    res.write_csv_row(std::io::stdout(), true)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("attack_{}.json", res.attack)), serde_json::to_vec_pretty(res)?)?;
        res.write_csv_row(std::fs::File::create(dir.join(format!("attack_{}.csv", res.attack)))?, true)?;
    }
    Ok(())
}

fn collect_records(paths: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let direct = p.join("report.json");
            if direct.is_file() {
                out.push(RunRecord::load(&direct)?);
                continue;
            }
            let mut subdirs: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|d| d.join("report.json").is_file())
                .collect();
            subdirs.sort();
            for d in subdirs {
                out.push(RunRecord::load(&d.join("report.json"))?);
            }
        } else {
            out.push(RunRecord::load(p)?);
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let rec = match &c.out_dir {
                Some(dir) => harness::run_to_dir(&cfg, dir)?,
                None => harness::run_experiment(&cfg)?.record,
            };
            print!("{}", report(std::slice::from_ref(&rec))?.1);
            if let Some(v) = &rec.verification {
                print!("{}", v.to_table());
                return Ok(v.is_success());
            }
            Ok(true)
        }
        Command::Sweep { common, axis, values } => {
            let cfg = load_config(&common)?;
            let values: Vec<f64> = values.iter().map(|v| parse_value(v)).collect::<Result<_>>()?;
            let recs = harness::sweep(&cfg, axis, &values, common.out_dir.as_deref())?;
            print!("{}", report(&recs)?.1);
            Ok(true)
        }
        Command::Verify {
            cache,
            checkpoints,
            manifest,
            client,
            test,
            threshold,
            eta_goal,
            out_dir,
        } => {
            let manifest = ChainManifest::load(&manifest)?;
            let trainers = checkpoints.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
            let report = match DpActivationBatch::load(&cache) {
                Ok(cache) => {
                    let gate = match (&client, &test) {
                        (Some(c), Some(t)) => Some((load_checkpoint(c)?, PseudoTestSet::load(t)?)),
                        _ => None,
                    };
                    verify(
                        &trainers,
                        &cache,
                        &manifest,
                        eta_goal,
                        gate.as_ref().map(|(c, t)| AccuracyRequirement {
                            client: c,
                            test: t,
                            threshold,
                        }),
                    )?
                }
                Err(Error::DigestMismatch(_)) => VerificationReport::cache_mismatch(),
                Err(e) => return Err(e),
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
            print!("{}", report.to_table());
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("verification.json"), serde_json::to_vec_pretty(&report)?)?;
            }
            Ok(report.is_success())
        }
        Command::Attack { kind } => {
            let (res, out_dir) = match kind {
                AttackKind::Cluster { common, method, min_pts } => {
                    let cfg = load_config(&common)?;
                    let m = match method {
                        MethodArg::Kmeans => ClusterMethod::Kmeans,
                        MethodArg::Dbscan => ClusterMethod::Dbscan,
                    };
                    (attack_cluster(&cfg, m, min_pts)?, common.out_dir)
                }
                AttackKind::Invert {
                    common,
                    samples,
                    init,
                    iters,
                } => {
                    let cfg = load_config(&common)?;
                    let init = match init {
                        InitArg::Random => InitMode::Random,
                        InitArg::Known => InitMode::Known,
                    };
                    let icfg = InvertConfig {
                        outer_iters: iters,
                        ..InvertConfig::default()
                    };
                    (attack_invert(&cfg, samples, init, &icfg)?, common.out_dir)
                }
                AttackKind::Extract { common } => {
                    let cfg = load_config(&common)?;
                    let st = SurrogateTraining {
                        dims: vec![cfg.plan.client_dims[0], 32],
                        ..SurrogateTraining::default()
                    };
                    (attack_extract(&cfg, &st)?, common.out_dir)
                }
            };
            emit_attack(&res, out_dir.as_deref())?;
            Ok(true)
        }
        Command::Report { paths, out_dir } => {
            let recs = collect_records(&paths)?;
            let (csv, table) = report(&recs)?;
            print!("{table}");
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("report.csv"), csv)?;
                std::fs::write(dir.join("report.txt"), table)?;
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
