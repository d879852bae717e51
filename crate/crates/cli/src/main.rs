use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand, ValueEnum};
use serde_json::json;

use modgap_core::clustering::ClusterEvalConfig;
use modgap_core::experiments::{
    run_gap_shift_sweep, run_lambda_ablation, run_sphere_sim, SphereLoss, SweepConfig, SweepStatus,
};
use modgap_core::io::{
    fmt_f64, metrics_json, prepare_run_dir, read_embeddings, write_embeddings, write_grid_csv,
    write_json, write_landscape_csv, write_sweep_csv, write_timeline_csv, Checkpoint, ResolvedConfig,
    RunConfigFile,
};
use modgap_core::losses::{infonce_pairs, LossConfig};
use modgap_core::metrics::GapReport;
use modgap_core::synthdata::{generate_dataset, SphereSimConfig};
use modgap_core::trainer::{eval_split, evaluate, mean_recall_at_1, train};
use modgap_core::Error;

const SEED_ENV: &str = "MODGAP_SEED";

#[derive(Parser)]
#[command(name = "modgap", version, about = "Modality gap experiments on synthetic embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SphereVariant {
    Clip,
    Ours,
}

#[derive(Subcommand)]
enum Command {
    /// Loss landscape of the six-pair sphere toy over the rotation angle.
    SimulateSphere {
        /// Starting angle of the trajectory, in degrees.
        #[arg(long, default_value_t = 120.0)]
        delta: f64,
        #[arg(long, value_enum, default_value = "clip")]
        variant: SphereVariant,
        #[arg(long, default_value_t = 1.0)]
        grid_step: f64,
        #[arg(long, default_value_t = SphereSimConfig::default().tau)]
        tau: f64,
        #[arg(long, default_value_t = 6)]
        num_pairs: usize,
        #[arg(long, default_value_t = 2)]
        num_mismatched: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train encoders on synthetic data from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Translate modalities to a series of gap targets and re-evaluate.
    ShiftSweep {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        targets: Vec<f64>,
        #[arg(long, action = ArgAction::Set, default_value_t = true)]
        renormalize: bool,
        #[arg(long, default_value_t = 0)]
        source: usize,
        #[arg(long, default_value_t = 10)]
        knn_k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Gap, paired cosine, angular value, recall and clustering of an embedding file.
    Metrics {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value_t = 10)]
        knn_k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        anchor: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train the gap-closing loss over a lambda1 x lambda2 grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        lambda1: Vec<f64>,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        lambda2: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig(_) | Error::InvalidAngle(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        msg: msg.into(),
    }
}

fn seed_override() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn load_config(path: &Path) -> Result<(RunConfigFile, Option<u64>), Failure> {
    let cfg = RunConfigFile::load(path).map_err(|e| usage(e.to_string()))?;
    let seed = seed_override()?;
    let cfg = match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    Ok((cfg, seed))
}

#[allow(clippy::too_many_arguments)]
fn simulate_sphere(
    delta: f64,
    variant: SphereVariant,
    grid_step: f64,
    tau: f64,
    num_pairs: usize,
    num_mismatched: usize,
    out: &Path,
    force: bool,
) -> Result<(), Failure> {
    let cfg = SphereSimConfig {
        num_pairs,
        num_mismatched,
        delta_deg: delta,
        grid_step_deg: grid_step,
        tau,
        ..SphereSimConfig::default()
    };
    cfg.validate()?;
    let loss = match variant {
        SphereVariant::Clip => SphereLoss::Clip,
        SphereVariant::Ours => SphereLoss::Clgap,
    };
    let result = run_sphere_sim(&cfg, loss)?;
    prepare_run_dir(out, force)?;
    write_landscape_csv(&out.join("landscape.csv"), &result.points)?;
    let summary = json!({
        "variant": loss,
        "argmin_theta": result.argmin_theta,
        "descent_theta": result.descent_theta,
        "max_slope_per_rad": result.max_slope,
        "slope_ok": result.slope_ok(),
        "config": cfg,
    });
    write_json(&out.join("summary.json"), &summary)?;
    if !result.slope_ok() {
        eprintln!(
            "warning: loss slope {} per radian exceeds the expected bound",
            fmt_f64(result.max_slope)
        );
    }
    eprintln!("argmin theta: {}", fmt_f64(result.argmin_theta));
    Ok(())
}

fn train_cmd(config: &Path, out: &Path, force: bool) -> Result<(), Failure> {
    let (cfg, seed) = load_config(config)?;
    let data = generate_dataset(&cfg.dataset)?;
    prepare_run_dir(out, force)?;
    write_json(
        &out.join("resolved_config.json"),
        &ResolvedConfig {
            config: &cfg,
            seed_override: seed,
        },
    )?;
    let train_cfg = cfg.train_config();
    let outcome = match train(&data, &train_cfg) {
        Ok(o) => o,
        Err(Error::DivergedLoss {
            epoch,
            step,
            last_good,
        }) => {
            if !last_good.timeline.is_empty() {
                write_timeline_csv(&out.join("timeline.csv"), &last_good.timeline)?;
            }
            write_json(&out.join("checkpoint.json"), &Checkpoint::from_outcome(&last_good))?;
            return Err(Failure {
                code: 1,
                msg: format!("loss became non-finite at epoch {epoch}, step {step}"),
            });
        }
        Err(e) => return Err(e.into()),
    };
    write_timeline_csv(&out.join("timeline.csv"), &outcome.timeline)?;
    write_json(&out.join("checkpoint.json"), &Checkpoint::from_outcome(&outcome))?;
    let batch = outcome.embed(eval_split(&data))?;
    write_embeddings(&out.join("embeddings.csv"), &batch)?;
    let metrics = evaluate(&batch, &train_cfg.loss, &cfg.eval)?;
    write_json(&out.join("final_metrics.json"), &metrics_json(&metrics.entries()))?;
    eprintln!(
        "{}: gap {} r1 {} v {}",
        train_cfg.variant.name(),
        fmt_f64(metrics.report.mean_gap()),
        fmt_f64(metrics.r1),
        fmt_f64(metrics.v_measure)
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn shift_sweep(
    embeddings: &Path,
    targets: Vec<f64>,
    renormalize: bool,
    source: usize,
    knn_k: usize,
    seed: u64,
    out: &Path,
    force: bool,
) -> Result<(), Failure> {
    if targets.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(usage("targets must be finite and non-negative"));
    }
    if knn_k == 0 {
        return Err(usage("--knn-k must be positive"));
    }
    let batch = read_embeddings(embeddings)?;
    let cfg = SweepConfig {
        source,
        targets,
        renormalize,
        eval: ClusterEvalConfig {
            knn_k,
            seed,
            ..ClusterEvalConfig::default()
        },
    };
    let rows = run_gap_shift_sweep(&batch, &cfg)?;
    prepare_run_dir(out, force)?;
    write_sweep_csv(&out.join("sweep.csv"), &rows)?;
    let unreachable: Vec<String> = rows
        .iter()
        .filter(|r| matches!(r.status, SweepStatus::Unreachable { .. }))
        .map(|r| fmt_f64(r.target_gap))
        .collect();
    if !unreachable.is_empty() {
        return Err(Failure {
            code: 1,
            msg: format!("unreachable target gaps: {}", unreachable.join(", ")),
        });
    }
    Ok(())
}

fn metrics_cmd(
    embeddings: &Path,
    knn_k: usize,
    seed: u64,
    anchor: usize,
    out: &Path,
    force: bool,
) -> Result<(), Failure> {
    if knn_k == 0 {
        return Err(usage("--knn-k must be positive"));
    }
    let batch = read_embeddings(embeddings)?;
    let mut entries = GapReport::compute(&batch)?.entries();
    if batch.num_modalities() >= 2 {
        let loss = LossConfig {
            anchor,
            ..LossConfig::default()
        };
        let pairs = infonce_pairs(batch.num_modalities(), &loss)?;
        entries.push(("r1".into(), mean_recall_at_1(&batch, &pairs)?));
    }
    if batch.labels().is_some() {
        let eval = ClusterEvalConfig {
            knn_k,
            seed,
            ..ClusterEvalConfig::default()
        };
        let c = modgap_core::clustering::cluster_eval(&batch, &eval)?;
        entries.push(("v_measure".into(), c.v_measure));
        entries.push(("knn_accuracy".into(), c.knn_accuracy));
    }
    prepare_run_dir(out, force)?;
    write_json(&out.join("report.json"), &metrics_json(&entries))?;
    Ok(())
}

fn ablate(config: &Path, lambda1: Vec<f64>, lambda2: Vec<f64>, out: &Path, force: bool) -> Result<(), Failure> {
    if lambda1.is_empty() || lambda2.is_empty() {
        return Err(usage("lambda lists must be non-empty"));
    }
    let (cfg, seed) = load_config(config)?;
    let data = generate_dataset(&cfg.dataset)?;
    let cells = run_lambda_ablation(&data, &cfg.train_config(), &lambda1, &lambda2, &cfg.eval)?;
    prepare_run_dir(out, force)?;
    write_json(
        &out.join("resolved_config.json"),
        &ResolvedConfig {
            config: &cfg,
            seed_override: seed,
        },
    )?;
    write_grid_csv(&out.join("grid.csv"), &cells)?;
    for cell in &cells {
        if let Ok(run) = &cell.result {
            let dir = out.join(format!("l1_{}_l2_{}", fmt_f64(cell.lambda1), fmt_f64(cell.lambda2)));
            std::fs::create_dir_all(&dir).map_err(|e| Failure {
                code: 1,
                msg: format!("{}: {e}", dir.display()),
            })?;
            write_timeline_csv(&dir.join("timeline.csv"), &run.outcome.timeline)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::SimulateSphere {
            delta,
            variant,
            grid_step,
            tau,
            num_pairs,
            num_mismatched,
            out,
            force,
        } => simulate_sphere(delta, variant, grid_step, tau, num_pairs, num_mismatched, &out, force),
        Command::Train { config, out, force } => train_cmd(&config, &out, force),
        Command::ShiftSweep {
            embeddings,
            targets,
            renormalize,
            source,
            knn_k,
            seed,
            out,
            force,
        } => shift_sweep(&embeddings, targets, renormalize, source, knn_k, seed, &out, force),
        Command::Metrics {
            embeddings,
            knn_k,
            seed,
            anchor,
            out,
            force,
        } => metrics_cmd(&embeddings, knn_k, seed, anchor, &out, force),
        Command::Ablate {
            config,
            lambda1,
            lambda2,
            out,
            force,
        } => ablate(&config, lambda1, lambda2, &out, force),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
