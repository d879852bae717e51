//! Experiment drivers: the sphere loss landscape, post-hoc gap shifting,
//! the lambda grid and paired training comparisons.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_eval, ClusterEvalConfig};
use crate::error::{Error, Result};
use crate::losses::{infonce_symmetric, loss_clgap, LossConfig, LossValueAndGrad};
use crate::metrics::{apply_gap_shift, recall_at_k, translate_modality, ShiftSpec};
use crate::numerics::{dot, norm, MultimodalBatch};
use crate::synthdata::{build_sphere_config, SphereSimConfig, SyntheticDataset};
use crate::trainer::{evaluate, train, FinalMetrics, LossVariant, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SphereLoss {
    /// Symmetric InfoNCE.
    Clip,
    /// Symmetric InfoNCE plus both gap terms.
    #[serde(alias = "ours")]
    Clgap,
}

impl SphereLoss {
    fn eval(self, batch: &MultimodalBatch, tau: f64) -> Result<LossValueAndGrad> {
        let cfg = LossConfig { tau, ..LossConfig::default() };
        match self {
            SphereLoss::Clip => infonce_symmetric(batch, &cfg),
            SphereLoss::Clgap => loss_clgap(batch, &cfg),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandscapePoint {
    pub theta: f64,
    pub loss: f64,
    /// Mean tangent-plane gradient norm over embeddings of matched pairs.
    pub grad_matched: f64,
    /// Same for mismatched pairs; `None` when there are none.
    pub grad_mismatched: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SphereSimResult {
    pub loss: SphereLoss,
    pub points: Vec<LandscapePoint>,
    pub argmin_theta: f64,
    /// Where steepest descent on the grid ends when started at `delta_deg`.
    pub descent_theta: f64,
    /// Largest `|Δloss| / Δθ` between neighbouring grid points, per radian.
    pub max_slope: f64,
}

/// Slopes above this (per radian) point to a construction bug.
pub const SLOPE_LIMIT: f64 = 10.0;

impl SphereSimResult {
    pub fn slope_ok(&self) -> bool {
        self.max_slope < SLOPE_LIMIT
    }
}

fn tangent_norm(g: &[f64], z: &[f64]) -> f64 {
    let gz = dot(g, z);
    let t: Vec<f64> = g.iter().zip(z).map(|(a, b)| a - gz * b).collect();
    norm(&t)
}

fn landscape_point(cfg: &SphereSimConfig, loss: SphereLoss, theta: f64) -> Result<LandscapePoint> {
    let batch = build_sphere_config(cfg, theta)?;
    let l = loss.eval(&batch, cfg.tau)?;
    let mis = cfg.mismatched();
    let (mut matched, mut mismatched) = (Vec::new(), Vec::new());
    for m in 0..2 {
        for k in 0..cfg.num_pairs {
            let n = tangent_norm(l.grads[m].row(k), batch.modality(m).row(k));
            if mis.contains(&k) {
                mismatched.push(n);
            } else {
                matched.push(n);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(LandscapePoint {
        theta,
        loss: l.value,
        grad_matched: mean(&matched),
        grad_mismatched: (!mismatched.is_empty()).then(|| mean(&mismatched)),
    })
}

pub fn run_sphere_sim(cfg: &SphereSimConfig, loss: SphereLoss) -> Result<SphereSimResult> {
    cfg.validate()?;
    let points = cfg
        .theta_grid()
        .into_iter()
        .map(|t| landscape_point(cfg, loss, t))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if p.loss < points[best].loss {
            best = i;
        }
    }
    let start = points
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1.theta - cfg.delta_deg).abs().total_cmp(&(b.1.theta - cfg.delta_deg).abs()))
        .map_or(0, |(i, _)| i);
    let mut at = start;
    loop {
        let mut next = at;
        for j in [at.wrapping_sub(1), at + 1] {
            if j < points.len() && points[j].loss < points[next].loss {
                next = j;
            }
        }
        if next == at {
            break;
        }
        at = next;
    }
    let max_slope = points
        .windows(2)
        .map(|w| (w[1].loss - w[0].loss).abs() / (w[1].theta - w[0].theta).to_radians())
        .fold(0.0, f64::max);
    Ok(SphereSimResult {
        loss,
        argmin_theta: points[best].theta,
        descent_theta: points[at].theta,
        max_slope,
        points,
    })
}

/// Gradient norms of the gap-closing objective along the theta grid.
pub fn run_gap_gradient_profile(cfg: &SphereSimConfig) -> Result<Vec<LandscapePoint>> {
    Ok(run_sphere_sim(cfg, SphereLoss::Clgap)?.points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub source: usize,
    pub targets: Vec<f64>,
    pub renormalize: bool,
    pub eval: ClusterEvalConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            source: 0,
            targets: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            renormalize: true,
            eval: ClusterEvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepStatus {
    Ok,
    Unreachable { closest: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub target_gap: f64,
    pub status: SweepStatus,
    /// Mean over shifted pairs of the measured centroid gap.
    pub measured_gap: Option<f64>,
    pub r1_m2n: Option<f64>,
    pub r1_n2m: Option<f64>,
    pub v_measure: Option<f64>,
    pub knn: Option<f64>,
}

/// Shifts every non-source modality to each target gap from the source and
/// re-measures retrieval and clustering.
///
/// Retrieval is always scored with the gallery side carrying the shift: for
/// the reverse direction the source is translated by the opposite vector,
/// which is the same relative configuration up to a global translation.
/// With `renormalize = false` this keeps both recall columns exactly equal
/// to the unshifted ones.
pub fn run_gap_shift_sweep(batch: &MultimodalBatch, cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    batch.check_modality(cfg.source)?;
    if batch.num_modalities() < 2 {
        return Err(Error::SingleModality);
    }
    if cfg.targets.is_empty() {
        return Err(Error::InvalidConfig("no target gaps given".into()));
    }
    let others: Vec<usize> = (0..batch.num_modalities()).filter(|&n| n != cfg.source).collect();
    let mut rows = Vec::with_capacity(cfg.targets.len());
    for &target in &cfg.targets {
        let mut shifted = batch.clone();
        let mut offsets = Vec::with_capacity(others.len());
        let mut gaps = Vec::with_capacity(others.len());
        let mut failed = None;
        for &n in &others {
            let spec = ShiftSpec {
                source: cfg.source,
                target: n,
                target_gap: target,
                renormalize: cfg.renormalize,
            };
            match apply_gap_shift(&shifted, &spec) {
                Ok(out) => {
                    shifted = out.batch;
                    offsets.push(out.offset);
                    gaps.push(out.measured_gap);
                }
                Err(Error::TargetUnreachable { closest, .. }) => {
                    failed = Some(closest);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(closest) = failed {
            rows.push(SweepRow {
                target_gap: target,
                status: SweepStatus::Unreachable { closest },
                measured_gap: None,
                r1_m2n: None,
                r1_n2m: None,
                v_measure: None,
                knn: None,
            });
            continue;
        }
        let k = others.len() as f64;
        let src = shifted.modality(cfg.source);
        let mut r1_m2n = 0.0;
        let mut r1_n2m = 0.0;
        for (i, &n) in others.iter().enumerate() {
            r1_m2n += recall_at_k(src, shifted.modality(n), 1)?;
            r1_n2m += if cfg.renormalize {
                recall_at_k(shifted.modality(n), src, 1)?
            } else {
                let back: Vec<f64> = offsets[i].iter().map(|v| -v).collect();
                let mirrored = translate_modality(batch, cfg.source, &back, false)?;
                recall_at_k(batch.modality(n), mirrored.modality(cfg.source), 1)?
            };
        }
        let clusters = match batch.labels() {
            Some(_) => Some(cluster_eval(&shifted, &cfg.eval)?),
            None => None,
        };
        rows.push(SweepRow {
            target_gap: target,
            status: SweepStatus::Ok,
            measured_gap: Some(gaps.iter().sum::<f64>() / k),
            r1_m2n: Some(r1_m2n / k),
            r1_n2m: Some(r1_n2m / k),
            v_measure: clusters.map(|c| c.v_measure),
            knn: clusters.map(|c| c.knn_accuracy),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRun {
    pub config: TrainConfig,
    pub outcome: TrainOutcome,
    /// Metrics on the probe split.
    pub metrics: FinalMetrics,
}

fn train_and_evaluate(data: &SyntheticDataset, cfg: &TrainConfig, eval: &ClusterEvalConfig) -> Result<TrainedRun> {
    let outcome = train(data, cfg)?;
    let batch = outcome.embed(crate::trainer::eval_split(data))?;
    let metrics = evaluate(&batch, &cfg.loss, eval)?;
    Ok(TrainedRun {
        config: cfg.clone(),
        outcome,
        metrics,
    })
}

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub lambda1: f64,
    pub lambda2: f64,
    pub result: std::result::Result<TrainedRun, String>,
}

impl AblationCell {
    pub fn r1(&self) -> Option<f64> {
        self.result.as_ref().ok().map(|r| r.metrics.r1)
    }

    pub fn v_measure(&self) -> Option<f64> {
        self.result.as_ref().ok().map(|r| r.metrics.v_measure)
    }

    pub fn avg(&self) -> Option<f64> {
        Some(0.5 * (self.r1()? + self.v_measure()?))
    }
}

/// Trains the gap-closing variant on every `(lambda1, lambda2)` pair with the
/// base seed, so cells are paired with each other and with a plain run.
/// A diverged cell is recorded instead of aborting the grid.
pub fn run_lambda_ablation(
    data: &SyntheticDataset,
    base: &TrainConfig,
    lambda1: &[f64],
    lambda2: &[f64],
    eval: &ClusterEvalConfig,
) -> Result<Vec<AblationCell>> {
    if lambda1.is_empty() || lambda2.is_empty() {
        return Err(Error::InvalidConfig("lambda grids must be non-empty".into()));
    }
    let cells: Vec<(f64, f64)> = lambda1
        .iter()
        .flat_map(|&a| lambda2.iter().map(move |&b| (a, b)))
        .collect();
    let mut configs = Vec::with_capacity(cells.len());
    for &(l1, l2) in &cells {
        let mut cfg = base.clone();
        cfg.variant = LossVariant::Ours;
        cfg.loss.lambda1 = l1;
        cfg.loss.lambda2 = l2;
        cfg.validate()?;
        configs.push(cfg);
    }
    configs
        .par_iter()
        .zip(cells.par_iter())
        .map(|(cfg, &(l1, l2))| match train_and_evaluate(data, cfg, eval) {
            Ok(run) => Ok(AblationCell {
                lambda1: l1,
                lambda2: l2,
                result: Ok(run),
            }),
            Err(e @ Error::DivergedLoss { .. }) => Ok(AblationCell {
                lambda1: l1,
                lambda2: l2,
                result: Err(e.to_string()),
            }),
            Err(e) => Err(e),
        })
        .collect()
}

/// Trains every variant on the same data, in parallel.
pub fn run_training_comparison(
    data: &SyntheticDataset,
    variants: &[TrainConfig],
    eval: &ClusterEvalConfig,
) -> Result<Vec<TrainedRun>> {
    variants
        .par_iter()
        .map(|cfg| train_and_evaluate(data, cfg, eval))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{normalize_rows, Matrix, Rng};
    use crate::synthdata::{generate_dataset, SyntheticDatasetSpec};

    fn labelled_batch(seed: u64) -> MultimodalBatch {
        let mut rng = Rng::new(seed);
        let n = 60;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let protos = rng.normal_matrix(3, 6, 1.0);
        let mods = (0..2)
            .map(|_| {
                let off = rng.unit_vector(6);
                let mut z = Matrix::from_fn(n, 6, |i, j| protos.get(labels[i], j) + 0.3 * rng.normal());
                z.add_row_vector(&off);
                normalize_rows(&z).unwrap()
            })
            .collect();
        MultimodalBatch::new(mods, Some(labels)).unwrap()
    }

    #[test]
    fn sphere_minima_sit_where_expected() {
        let cfg = SphereSimConfig::default();
        let clip = run_sphere_sim(&cfg, SphereLoss::Clip).unwrap();
        let ours = run_sphere_sim(&cfg, SphereLoss::Clgap).unwrap();
        assert!((57.0..=63.0).contains(&clip.argmin_theta), "{}", clip.argmin_theta);
        assert!(ours.argmin_theta <= 3.0, "{}", ours.argmin_theta);
        assert_eq!(clip.descent_theta, clip.argmin_theta);
        assert!(clip.slope_ok(), "{}", clip.max_slope);
    }

    #[test]
    fn mismatch_free_sphere_is_minimised_at_zero() {
        let cfg = SphereSimConfig { num_mismatched: 0, ..SphereSimConfig::default() };
        for loss in [SphereLoss::Clip, SphereLoss::Clgap] {
            let r = run_sphere_sim(&cfg, loss).unwrap();
            assert_eq!(r.argmin_theta, 0.0);
            assert!(r.points.iter().all(|p| p.grad_mismatched.is_none()));
        }
    }

    #[test]
    fn sweep_without_renormalisation_keeps_recall() {
        let b = labelled_batch(1);
        let rows = run_gap_shift_sweep(
            &b,
            &SweepConfig {
                renormalize: false,
                targets: vec![0.0, 0.2, 0.5, 1.0],
                ..SweepConfig::default()
            },
        )
        .unwrap();
        let first = &rows[0];
        for r in &rows {
            assert_eq!(r.status, SweepStatus::Ok);
            assert_eq!(r.r1_m2n.unwrap().to_bits(), first.r1_m2n.unwrap().to_bits());
            assert_eq!(r.r1_n2m.unwrap().to_bits(), first.r1_n2m.unwrap().to_bits());
            assert!((r.measured_gap.unwrap() - r.target_gap).abs() <= 1e-6);
        }
    }

    #[test]
    fn sweep_at_current_gap_matches_direct_metrics() {
        let b = labelled_batch(2);
        let g = crate::metrics::modality_gap(&b, 0, 1).unwrap();
        let cfg = SweepConfig { targets: vec![g], ..SweepConfig::default() };
        let row = &run_gap_shift_sweep(&b, &cfg).unwrap()[0];
        assert_eq!(row.r1_m2n, Some(recall_at_k(b.modality(0), b.modality(1), 1).unwrap()));
        assert_eq!(row.v_measure, Some(cluster_eval(&b, &cfg.eval).unwrap().v_measure));
    }

    #[test]
    fn unreachable_targets_become_rows() {
        let b = labelled_batch(3);
        let cfg = SweepConfig { targets: vec![5.0], ..SweepConfig::default() };
        let rows = run_gap_shift_sweep(&b, &cfg).unwrap();
        assert!(matches!(rows[0].status, SweepStatus::Unreachable { .. }));
    }

    #[test]
    fn ablation_and_comparison_are_deterministic() {
        let data = generate_dataset(&SyntheticDatasetSpec {
            num_classes: 3,
            samples_per_class: 12,
            probe_per_class: 4,
            latent_dim: 3,
            modality_dims: vec![4, 4],
            ..SyntheticDatasetSpec::default()
        })
        .unwrap();
        let base = TrainConfig {
            epochs: 2,
            batch_size: 12,
            hidden: vec![6],
            embed_dim: 3,
            ..TrainConfig::default()
        };
        let eval = ClusterEvalConfig { knn_k: 3, ..ClusterEvalConfig::default() };
        let grid = run_lambda_ablation(&data, &base, &[0.0, 1.0], &[0.0, 0.5], &eval).unwrap();
        assert_eq!(grid.len(), 4);
        let runs = run_training_comparison(&data, &[base.clone(), base.clone()], &eval).unwrap();
        assert_eq!(runs[0], runs[1]);
        let zero = grid[0].result.as_ref().unwrap();
        assert_eq!(zero.outcome.timeline, runs[0].outcome.timeline);
        assert!(run_lambda_ablation(&data, &base, &[], &[1.0], &eval).is_err());
    }
}
