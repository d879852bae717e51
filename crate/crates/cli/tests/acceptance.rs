//! End-to-end acceptance checks. Each test prints one line of the form
//! `criterion N: PASS|FAIL <detail>` and fails when the criterion does not hold.
//! Run with `cargo test -p modgap-cli --test acceptance -- --nocapture` to see
//! the lines.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use modgap_core::clustering::{knn_accuracy, v_measure, ClusterEvalConfig};
use modgap_core::experiments::{
    run_gap_gradient_profile, run_gap_shift_sweep, run_training_comparison, SweepConfig, SweepStatus,
    TrainedRun,
};
use modgap_core::io::write_embeddings;
use modgap_core::losses::{
    check_gradient, infonce_directional, infonce_symmetric, loss_atp, loss_clgap, loss_cu, loss_gap,
    loss_uniform_baseline,
};
use modgap_core::metrics::{angular_value, cos_tp, modality_gap, recall_at_k, scatter_decomposition_check};
use modgap_core::numerics::normalize_rows;
use modgap_core::synthdata::{generate_dataset, SphereSimConfig, SyntheticDataset, SyntheticDatasetSpec};
use modgap_core::trainer::{check_encoder_gradient, train, Activation, EncoderParams};
use modgap_core::{InfoNceStructure, LossConfig, LossVariant, Matrix, MultimodalBatch, Rng, TempMode, TrainConfig};

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

fn verdict(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn modgap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modgap"))
        .args(args)
        .env_remove("MODGAP_SEED")
        .output()
        .expect("binary runs")
}

fn modgap_ok(args: &[&str]) {
    let out = modgap(args);
    assert!(
        out.status.success(),
        "modgap {args:?} exited with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Column name -> raw cell strings.
fn read_csv_columns(p: &Path) -> BTreeMap<String, Vec<String>> {
    let text = std::fs::read_to_string(p).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    let mut cols: BTreeMap<String, Vec<String>> = header.iter().map(|h| (h.clone(), Vec::new())).collect();
    for line in lines {
        for (h, cell) in header.iter().zip(line.split(',')) {
            cols.get_mut(h).unwrap().push(cell.to_string());
        }
    }
    cols
}

fn random_unit_batch(rng: &mut Rng, m: usize, n: usize, d: usize) -> MultimodalBatch {
    let mods = (0..m)
        .map(|_| {
            let mut z = rng.normal_matrix(n, d, 1.0);
            let len = rng.uniform_range(0.0, 2.0);
            let shift: Vec<f64> = rng.unit_vector(d).iter().map(|v| v * len).collect();
            z.add_row_vector(&shift);
            normalize_rows(&z).unwrap()
        })
        .collect();
    MultimodalBatch::new(mods, None).unwrap()
}

fn random_loss_config(rng: &mut Rng, m: usize) -> LossConfig {
    LossConfig {
        tau: rng.uniform_range(0.1, 1.0),
        tau_mode: TempMode::Learnable,
        lambda1: rng.uniform_range(0.0, 2.0),
        lambda2: rng.uniform_range(0.0, 2.0),
        anchor: rng.below(m),
        structure: if rng.below(2) == 0 {
            InfoNceStructure::AnchorCentric
        } else {
            InfoNceStructure::AllPairs
        },
    }
}

/// Default dataset and training schedule, seed 0, shared by criteria 5 to 8.
struct Comparison {
    data: SyntheticDataset,
    runs: BTreeMap<&'static str, TrainedRun>,
}

fn comparison() -> &'static Comparison {
    static CELL: OnceLock<Comparison> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = generate_dataset(&SyntheticDatasetSpec::default()).unwrap();
        let variants = [
            LossVariant::ClipFt,
            LossVariant::Ours,
            LossVariant::AtpOnly,
            LossVariant::SparsifyThenClip,
        ];
        let configs: Vec<TrainConfig> = variants
            .iter()
            .map(|&variant| TrainConfig {
                variant,
                ..TrainConfig::default()
            })
            .collect();
        let runs = run_training_comparison(&data, &configs, &ClusterEvalConfig::default()).unwrap();
        let runs = variants.iter().map(|v| v.name()).zip(runs).collect();
        Comparison { data, runs }
    })
}

fn small_config(dir: &Path, variant: &str) -> PathBuf {
    let path = dir.join(format!("{variant}.json"));
    let cfg = serde_json::json!({
        "dataset": { "samples_per_class": 40, "probe_per_class": 10, "seed": 3 },
        "loss": { "variant": variant },
        "train": { "epochs": 4, "batch_size": 64, "seed": 3 }
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let configs = 100;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut bump = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for _ in 0..configs {
        let m = 2 + rng.below(2);
        let n = 2 + rng.below(5);
        let d = 2 + rng.below(4);
        let batch = random_unit_batch(&mut rng, m, n, d);
        let cfg = random_loss_config(&mut rng, m);
        let (a, b) = (rng.below(m), rng.below(m - 1));
        let b = if b >= a { b + 1 } else { b };
        let max_err = |r: modgap_core::losses::GradCheckReport| r.max_rel_error.max(r.tau_rel_error.unwrap_or(0.0));
        let dir = check_gradient(|z, c| infonce_directional(z, a, b, c.tau), &batch, &cfg, H).unwrap();
        bump("infonce_directional", max_err(dir));
        bump("infonce_symmetric", max_err(check_gradient(infonce_symmetric, &batch, &cfg, H).unwrap()));
        bump(
            "loss_atp",
            max_err(check_gradient(|z, c| loss_atp(z, c.anchor), &batch, &cfg, H).unwrap()),
        );
        bump("loss_cu", max_err(check_gradient(|z, _| loss_cu(z), &batch, &cfg, H).unwrap()));
        bump("loss_gap", max_err(check_gradient(loss_gap, &batch, &cfg, H).unwrap()));
        bump("loss_clgap", max_err(check_gradient(loss_clgap, &batch, &cfg, H).unwrap()));
        bump(
            "loss_uniform_baseline",
            max_err(check_gradient(|z, _| loss_uniform_baseline(z), &batch, &cfg, H).unwrap()),
        );

        let din = 2 + rng.below(6);
        let act = if rng.below(2) == 0 { Activation::Relu } else { Activation::Tanh };
        let params = EncoderParams::init(&[din, 8, 8, 4], act, &mut rng).unwrap();
        let x = rng.normal_matrix(n, din, 1.0);
        let up = rng.normal_matrix(n, 4, 1.0);
        bump("mlp_backward", check_encoder_gradient(&params, &x, &up, H).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.values().all(|&e| e <= GRAD_TOL) && secs < 120.0;
    let detail: Vec<String> = worst.iter().map(|(k, v)| format!("{k}={v:.2e}")).collect();
    verdict(1, pass, format!("{configs} configs each, {} ({secs:.1}s)", detail.join(" ")));
}

#[test]
fn criterion_02_sphere_minima() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let mut argmins = Vec::new();
    for variant in ["clip", "ours"] {
        let out = dir.path().join(variant);
        modgap_ok(&[
            "simulate-sphere",
            "--delta",
            "120",
            "--grid-step",
            "1",
            "--variant",
            variant,
            "--out",
            s(&out),
        ]);
        argmins.push(read_json(&out.join("summary.json"))["argmin_theta"].as_f64().unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = (57.0..=63.0).contains(&argmins[0]) && (0.0..=3.0).contains(&argmins[1]) && secs < 10.0;
    verdict(
        2,
        pass,
        format!("clip argmin {}°, clgap argmin {}° ({secs:.2}s)", argmins[0], argmins[1]),
    );
}

#[test]
fn criterion_03_sphere_gradient_profile() {
    let start = Instant::now();
    let cfg = SphereSimConfig::default();
    let points = run_gap_gradient_profile(&cfg).unwrap();
    let near: Vec<_> = points.iter().filter(|p| p.theta <= 5.0).collect();
    let worst_near = near
        .iter()
        .map(|p| p.grad_matched / p.grad_mismatched.unwrap())
        .fold(0.0, f64::max);
    let at_delta = points.iter().find(|p| (p.theta - cfg.delta_deg).abs() < 1e-9).unwrap();
    let (a, b) = (at_delta.grad_matched, at_delta.grad_mismatched.unwrap());
    let factor = a.max(b) / a.min(b);
    let secs = start.elapsed().as_secs_f64();
    let pass = !near.is_empty() && worst_near <= 0.1 && factor <= 2.0 && secs < 10.0;
    verdict(
        3,
        pass,
        format!(
            "max matched/mismatched at θ≤5° {worst_near:.4}, ratio at θ=Δ {factor:.3} ({secs:.2}s)"
        ),
    );
}

#[test]
fn criterion_04_ranking_invariance() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    let cfg = small_config(dir.path(), "clip_ft");
    let run = dir.path().join("trained");
    modgap_ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    files.push(run.join("embeddings.csv"));
    let mut rng = Rng::new(44);
    for i in 0..4 {
        let m = 2 + i % 2;
        let mut batch = random_unit_batch(&mut rng, m, 30, 6);
        batch = batch.with_labels(Some((0..30).map(|j| j % 3).collect())).unwrap();
        let p = dir.path().join(format!("random_{i}.csv"));
        write_embeddings(&p, &batch).unwrap();
        files.push(p);
    }
    let mut constant = true;
    let mut ok_rows = usize::MAX;
    for (i, f) in files.iter().enumerate() {
        let batch = modgap_core::io::read_embeddings(f).unwrap();
        let g = modality_gap(&batch, 0, 1).unwrap();
        let targets: Vec<String> = [0.0, 0.25, 0.5, 1.0, 1.5, 2.0].iter().map(|t| format!("{}", t * g)).collect();
        let out = dir.path().join(format!("sweep_{i}"));
        let res = modgap(&[
            "shift-sweep",
            "--embeddings",
            s(f),
            "--targets",
            &targets.join(","),
            "--renormalize",
            "false",
            "--out",
            s(&out),
        ]);
        assert!(res.status.code().is_some_and(|c| c <= 1), "{}", String::from_utf8_lossy(&res.stderr));
        let cols = read_csv_columns(&out.join("sweep.csv"));
        let ok: Vec<usize> = (0..cols["status"].len()).filter(|&r| cols["status"][r] == "ok").collect();
        ok_rows = ok_rows.min(ok.len());
        for col in ["r1_m2n", "r1_n2m"] {
            let first = &cols[col][ok[0]];
            constant &= ok.iter().all(|&r| &cols[col][r] == first);
        }
    }
    let pass = constant && ok_rows >= 4;
    verdict(
        4,
        pass,
        format!("{} files, at least {ok_rows} reached targets each, R@1 columns bitwise constant: {constant}", files.len()),
    );
}

#[test]
fn criterion_05_gap_shift_clustering_trend() {
    let start = Instant::now();
    let cmp = comparison();
    let clip = &cmp.runs["clip_ft"];
    let batch = clip.outcome.embed(&cmp.data.train).unwrap();
    let cfg = SweepConfig {
        targets: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        renormalize: false,
        ..SweepConfig::default()
    };
    let rows = run_gap_shift_sweep(&batch, &cfg).unwrap();
    let v: Vec<Option<f64>> = rows.iter().map(|r| r.v_measure).collect();
    let all_ok = rows.iter().all(|r| r.status == SweepStatus::Ok);
    let v0 = v[0].unwrap_or(f64::NAN);
    let later_ok = rows
        .iter()
        .filter(|r| r.target_gap >= 0.5)
        .all(|r| r.v_measure.is_some_and(|x| v0 >= x));
    let v1 = v[4].unwrap_or(f64::NAN);
    let secs = start.elapsed().as_secs_f64();
    let pass = all_ok && later_ok && v1 <= v0 - 0.02 && secs < 300.0;
    let shown: Vec<String> = rows
        .iter()
        .map(|r| format!("{}:{}", r.target_gap, r.v_measure.map_or("-".into(), |x| format!("{x:.3}"))))
        .collect();
    verdict(5, pass, format!("V by target {} ({secs:.1}s incl. shared training)", shown.join(" ")));
}

#[test]
fn criterion_06_training_comparison() {
    let start = Instant::now();
    let cmp = comparison();
    let (clip, ours) = (&cmp.runs["clip_ft"].metrics, &cmp.runs["ours"].metrics);
    let (gc, go) = (clip.report.mean_gap(), ours.report.mean_gap());
    let (cc, co) = (clip.report.mean_costp(), ours.report.mean_costp());
    let dr1 = ours.r1 - clip.r1;
    let pass = go <= 0.5 * gc && co > cc && ours.v_measure >= clip.v_measure && dr1.abs() <= 0.05;
    verdict(
        6,
        pass,
        format!(
            "gap {go:.4}/{gc:.4}, costp {co:.4} vs {cc:.4}, V {:.4} vs {:.4}, dR@1 {dr1:+.4} ({:.1}s)",
            ours.v_measure,
            clip.v_measure,
            start.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_07_collapse_without_cu() {
    let cmp = comparison();
    let (atp, ours) = (&cmp.runs["atp_only"].metrics, &cmp.runs["ours"].metrics);
    let (aa, ao) = (atp.report.mean_av(), ours.report.mean_av());
    let pass = aa > ao && atp.r1 < ours.r1;
    verdict(
        7,
        pass,
        format!("AV atp_only {aa:.4} vs ours {ao:.4}, R@1 atp_only {:.4} vs ours {:.4}", atp.r1, ours.r1),
    );
}

#[test]
fn criterion_08_sparsification_recreates_gap() {
    let cmp = comparison();
    let run = &cmp.runs["sparsify_then_clip"];
    let switch = run.config.switch_epoch;
    let at_switch = run.outcome.timeline.iter().find(|r| r.epoch == switch).unwrap().report.mean_gap();
    let last = run.outcome.final_record().report.mean_gap();
    verdict(
        8,
        last - at_switch > 0.01,
        format!("gap at epoch {switch} {at_switch:.4}, final {last:.4}"),
    );
}

#[test]
fn criterion_09_reduction_identities() {
    let mut rng = Rng::new(909);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = 2 + rng.below(2);
        let (n, d) = (2 + rng.below(12), 2 + rng.below(7));
        let batch = random_unit_batch(&mut rng, m, n, d);
        let cfg = LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..random_loss_config(&mut rng, m)
        };
        let a = loss_clgap(&batch, &cfg).unwrap();
        let b = infonce_symmetric(&batch, &cfg).unwrap();
        worst = worst.max((a.value - b.value).abs());
        for (ga, gb) in a.grads.iter().zip(&b.grads) {
            worst = worst.max(ga.max_abs_diff(gb));
        }
    }

    // every training step, via the per-epoch mean losses and final parameters
    let spec = SyntheticDatasetSpec {
        samples_per_class: 40,
        probe_per_class: 10,
        ..SyntheticDatasetSpec::default()
    };
    let data = generate_dataset(&spec).unwrap();
    let base = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let clip = train(&data, &base).unwrap();
    let mut zero = base.clone();
    zero.variant = LossVariant::Ours;
    zero.loss.lambda1 = 0.0;
    zero.loss.lambda2 = 0.0;
    let ours = train(&data, &zero).unwrap();
    for (x, y) in clip.timeline.iter().zip(&ours.timeline) {
        worst = worst.max((x.loss - y.loss).abs());
    }
    let same_params = clip.encoders == ours.encoders;

    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "clip_ft");
    let (t, a) = (dir.path().join("train"), dir.path().join("ablate"));
    modgap_ok(&["train", "--config", s(&cfg), "--out", s(&t)]);
    modgap_ok(&["ablate", "--config", s(&cfg), "--lambda1", "0", "--lambda2", "0", "--out", s(&a)]);
    let bytes_equal =
        std::fs::read(t.join("timeline.csv")).unwrap() == std::fs::read(a.join("l1_0_l2_0").join("timeline.csv")).unwrap();

    let pass = worst <= 1e-12 && same_params && bytes_equal;
    verdict(
        9,
        pass,
        format!("max |clgap - infonce| {worst:.1e}, identical params {same_params}, ablation cell timeline byte-equal {bytes_equal}"),
    );
}

fn mean_cross(z: &Matrix, mu0: &[f64], delta: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..z.rows() {
        for k in 0..z.cols() {
            acc += (z.get(i, k) - mu0[k]) * delta[k];
        }
    }
    acc / z.rows() as f64
}

#[test]
fn criterion_10_scatter_decomposition() {
    let mut rng = Rng::new(1010);
    let (mut orth, mut random) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = 2 + rng.below(30);
        let d = 2 + rng.below(10);
        let mu0: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let delta: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let dd: f64 = delta.iter().map(|v| v * v).sum();

        // rows of z - mu0 orthogonal to delta
        let raw = rng.normal_matrix(n, d, 1.0);
        let z = Matrix::from_fn(n, d, |i, k| {
            let proj: f64 = (0..d).map(|c| raw.get(i, c) * delta[c]).sum::<f64>() / dd;
            mu0[k] + raw.get(i, k) - proj * delta[k]
        });
        let c = scatter_decomposition_check(&z, &mu0, &delta).unwrap();
        orth = orth.max((c.lhs - c.rhs).abs());

        let z = rng.normal_matrix(n, d, 1.0);
        let c = scatter_decomposition_check(&z, &mu0, &delta).unwrap();
        let cross = mean_cross(&z, &mu0, &delta);
        random = random
            .max(((c.lhs - c.rhs) + 2.0 * cross).abs())
            .max((c.residual - 2.0 * cross.abs()).abs());
    }
    verdict(
        10,
        orth <= 1e-10 && random <= 1e-10,
        format!("orthogonal |lhs - rhs| {orth:.1e}, random cross-term error {random:.1e}"),
    );
}

mod oracle {
    use super::*;

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += a[i] * b[i];
        }
        s
    }

    pub fn sqd(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a[i] - b[i]) * (a[i] - b[i]);
        }
        s
    }

    /// Value and both gradients of the one-direction contrastive loss.
    pub fn directional(zm: &Matrix, zn: &Matrix, tau: f64) -> (f64, Matrix, Matrix) {
        let n = zm.rows();
        let d = zm.cols();
        let mut value = 0.0;
        let mut gm = Matrix::zeros(n, d);
        let mut gn = Matrix::zeros(n, d);
        for i in 0..n {
            let mut denom = 0.0;
            for j in 0..n {
                denom += (dot(zm.row(i), zn.row(j)) / tau).exp();
            }
            value -= (dot(zm.row(i), zn.row(i)) / tau).exp().ln() - denom.ln();
            for j in 0..n {
                let p = (dot(zm.row(i), zn.row(j)) / tau).exp() / denom;
                let coef = (p - if i == j { 1.0 } else { 0.0 }) / (n as f64 * tau);
                for k in 0..d {
                    gm.set(i, k, gm.get(i, k) + coef * zn.get(j, k));
                    gn.set(j, k, gn.get(j, k) + coef * zm.get(i, k));
                }
            }
        }
        (value / n as f64, gm, gn)
    }

    pub fn pairs(m: usize, cfg: &LossConfig) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..m {
            for b in 0..m {
                let keep = match cfg.structure {
                    InfoNceStructure::AnchorCentric => a == cfg.anchor && b != a,
                    InfoNceStructure::AllPairs => a < b,
                };
                if keep {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn symmetric(batch: &MultimodalBatch, cfg: &LossConfig) -> f64 {
        let ps = pairs(batch.num_modalities(), cfg);
        let mut total = 0.0;
        for &(a, b) in &ps {
            total += directional(batch.modality(a), batch.modality(b), cfg.tau).0;
            total += directional(batch.modality(b), batch.modality(a), cfg.tau).0;
        }
        total / (2.0 * ps.len() as f64)
    }

    pub fn atp(batch: &MultimodalBatch, anchor: usize) -> f64 {
        let (m, n) = (batch.num_modalities(), batch.num_samples());
        let mut total = 0.0;
        for k in 0..m {
            if k == anchor {
                continue;
            }
            for i in 0..n {
                total += sqd(batch.modality(k).row(i), batch.modality(anchor).row(i));
            }
        }
        total / ((m - 1) * n) as f64
    }

    pub fn rbf_log_mean(x: &Matrix) -> f64 {
        let n = x.rows();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += (-2.0 * sqd(x.row(i), x.row(j))).exp();
                }
            }
        }
        (s / n as f64).ln()
    }

    pub fn centroids(batch: &MultimodalBatch) -> Matrix {
        let (m, n, d) = (batch.num_modalities(), batch.num_samples(), batch.dim());
        Matrix::from_fn(n, d, |i, k| {
            let mut s = 0.0;
            for q in 0..m {
                s += batch.modality(q).get(i, k);
            }
            s / m as f64
        })
    }

    pub fn uniform_baseline(batch: &MultimodalBatch) -> f64 {
        let mut s = 0.0;
        for z in batch.modalities() {
            s += rbf_log_mean(z);
        }
        s / batch.num_modalities() as f64
    }

    pub fn gap(batch: &MultimodalBatch, a: usize, b: usize) -> f64 {
        let (n, d) = (batch.num_samples(), batch.dim());
        let mut s = 0.0;
        for k in 0..d {
            let mut ma = 0.0;
            let mut mb = 0.0;
            for i in 0..n {
                ma += batch.modality(a).get(i, k);
                mb += batch.modality(b).get(i, k);
            }
            s += ((ma - mb) / n as f64).powi(2);
        }
        s.sqrt()
    }

    pub fn costp(batch: &MultimodalBatch, a: usize, b: usize) -> f64 {
        let n = batch.num_samples();
        let mut s = 0.0;
        for i in 0..n {
            s += dot(batch.modality(a).row(i), batch.modality(b).row(i));
        }
        s / n as f64
    }

    pub fn av(z: &Matrix) -> f64 {
        let n = z.rows();
        let mut s = 0.0;
        let mut c = 0;
        for i in 0..n {
            for j in i + 1..n {
                s += dot(z.row(i), z.row(j));
                c += 1;
            }
        }
        s / c as f64
    }

    pub fn recall(q: &Matrix, g: &Matrix, k: usize) -> f64 {
        let n = q.rows();
        let mut hits = 0;
        for i in 0..n {
            let mut order: Vec<usize> = (0..n).collect();
            let scores: Vec<f64> = (0..n).map(|j| dot(q.row(i), g.row(j))).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            if order.iter().position(|&j| j == i).unwrap() < k {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    }

    fn entropy_of(counts: &[usize], n: f64) -> f64 {
        let mut h = 0.0;
        for &c in counts {
            if c > 0 {
                let p = c as f64 / n;
                h -= p * p.ln();
            }
        }
        h
    }

    pub fn v_measure(truth: &[usize], pred: &[usize]) -> f64 {
        let n = truth.len() as f64;
        let classes: Vec<usize> = (0..=*truth.iter().max().unwrap()).collect();
        let clusters: Vec<usize> = (0..=*pred.iter().max().unwrap()).collect();
        let mut table = vec![vec![0usize; clusters.len()]; classes.len()];
        for i in 0..truth.len() {
            table[truth[i]][pred[i]] += 1;
        }
        let class_tot: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
        let clus_tot: Vec<usize> = (0..clusters.len()).map(|k| table.iter().map(|r| r[k]).sum()).collect();
        let h_c = entropy_of(&class_tot, n);
        let h_k = entropy_of(&clus_tot, n);
        let mut h_c_given_k = 0.0;
        let mut h_k_given_c = 0.0;
        for c in 0..classes.len() {
            for k in 0..clusters.len() {
                let nck = table[c][k] as f64;
                if nck > 0.0 {
                    h_c_given_k -= nck / n * (nck / clus_tot[k] as f64).ln();
                    h_k_given_c -= nck / n * (nck / class_tot[c] as f64).ln();
                }
            }
        }
        let hom = if h_c == 0.0 { 1.0 } else { 1.0 - h_c_given_k / h_c };
        let com = if h_k == 0.0 { 1.0 } else { 1.0 - h_k_given_c / h_k };
        if hom + com == 0.0 {
            0.0
        } else {
            2.0 * hom * com / (hom + com)
        }
    }

    pub fn knn(points: &Matrix, labels: &[usize], k: usize) -> f64 {
        let n = points.rows();
        let mut correct = 0;
        for i in 0..n {
            let mut cand: Vec<(f64, usize)> = Vec::new();
            for j in 0..n {
                if j != i {
                    let c = dot(points.row(i), points.row(j))
                        / (dot(points.row(i), points.row(i)).sqrt() * dot(points.row(j), points.row(j)).sqrt());
                    cand.push((1.0 - c, j));
                }
            }
            cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut best_label = labels[cand[0].1];
            let mut best_count = 0;
            for &(_, j) in cand.iter().take(k) {
                let l = labels[j];
                let count = cand.iter().take(k).filter(|&&(_, q)| labels[q] == l).count();
                if count > best_count {
                    best_count = count;
                    best_label = l;
                }
            }
            if best_label == labels[i] {
                correct += 1;
            }
        }
        correct as f64 / n as f64
    }
}

#[test]
fn criterion_11_oracle_equivalence() {
    let mut rng = Rng::new(1111);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut bump = |name: &'static str, a: f64, b: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max((a - b).abs());
    };
    for _ in 0..50 {
        let m = 2 + rng.below(2);
        let n = 2 + rng.below(15);
        let d = 1 + rng.below(8);
        let batch = random_unit_batch(&mut rng, m, n, d);
        let cfg = random_loss_config(&mut rng, m);

        let (a, b) = (cfg.anchor, (cfg.anchor + 1) % m);
        let fast = infonce_directional(&batch, a, b, cfg.tau).unwrap();
        let (v, gm, gn) = oracle::directional(batch.modality(a), batch.modality(b), cfg.tau);
        bump("infonce_directional", fast.value, v);
        bump("infonce_directional_grad", 0.0, fast.grads[a].max_abs_diff(&gm).max(fast.grads[b].max_abs_diff(&gn)));
        let sym = oracle::symmetric(&batch, &cfg);
        bump("infonce_symmetric", infonce_symmetric(&batch, &cfg).unwrap().value, sym);
        let atp = oracle::atp(&batch, cfg.anchor);
        bump("loss_atp", loss_atp(&batch, cfg.anchor).unwrap().value, atp);
        let cu = oracle::rbf_log_mean(&oracle::centroids(&batch));
        bump("loss_cu", loss_cu(&batch).unwrap().value, cu);
        let ub = oracle::uniform_baseline(&batch);
        bump("loss_uniform_baseline", loss_uniform_baseline(&batch).unwrap().value, ub);
        let gap_loss = cfg.lambda1 * atp + cfg.lambda2 * cu;
        bump("loss_gap", loss_gap(&batch, &cfg).unwrap().value, gap_loss);
        bump("loss_clgap", loss_clgap(&batch, &cfg).unwrap().value, sym + gap_loss);

        for x in 0..m {
            for y in x + 1..m {
                bump("modality_gap", modality_gap(&batch, x, y).unwrap(), oracle::gap(&batch, x, y));
                bump("cos_tp", cos_tp(&batch, x, y).unwrap(), oracle::costp(&batch, x, y));
            }
            bump("angular_value", angular_value(batch.modality(x)).unwrap(), oracle::av(batch.modality(x)));
        }
        let k = 1 + rng.below(n);
        bump(
            "recall_at_k",
            recall_at_k(batch.modality(0), batch.modality(1), k).unwrap(),
            oracle::recall(batch.modality(0), batch.modality(1), k),
        );

        let classes = 1 + rng.below(4);
        let truth: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let clusters = 1 + rng.below(4);
        let pred: Vec<usize> = (0..n).map(|_| rng.below(clusters)).collect();
        bump("v_measure", v_measure(&truth, &pred).unwrap().v_measure, oracle::v_measure(&truth, &pred));
        let pts = batch.modality(0);
        let kk = 1 + rng.below(n - 1);
        bump("knn_accuracy", knn_accuracy(pts, &truth, kk).unwrap(), oracle::knn(pts, &truth, kk));
    }
    let pass = worst.values().all(|&e| e <= 1e-10);
    let detail: Vec<String> = worst.iter().map(|(k, v)| format!("{k}={v:.1e}")).collect();
    verdict(11, pass, format!("50 instances, max abs diff {}", detail.join(" ")));
}

fn csv_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_12_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "ours");
    let mut compared = 0;
    let mut identical = true;
    let run_all = |root: &Path| {
        let sub = |name: &str| root.join(name);
        modgap_ok(&["simulate-sphere", "--variant", "ours", "--out", s(&sub("sphere"))]);
        modgap_ok(&["train", "--config", s(&cfg), "--out", s(&sub("train"))]);
        let emb = sub("train").join("embeddings.csv");
        modgap_ok(&["metrics", "--embeddings", s(&emb), "--out", s(&sub("metrics"))]);
        let res = modgap(&[
            "shift-sweep",
            "--embeddings",
            s(&emb),
            "--targets",
            "0,0.05,0.1,10",
            "--out",
            s(&sub("sweep")),
        ]);
        assert!(res.status.code().is_some_and(|c| c <= 1));
        modgap_ok(&[
            "ablate",
            "--config",
            s(&cfg),
            "--lambda1",
            "0,1",
            "--lambda2",
            "0.5",
            "--out",
            s(&sub("ablate")),
        ]);
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_all(&a);
    run_all(&b);
    let files = csv_files(&a);
    identical &= files == csv_files(&b);
    for f in &files {
        compared += 1;
        identical &= std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    }
    for f in ["train/final_metrics.json", "metrics/report.json", "train/checkpoint.json"] {
        compared += 1;
        identical &= std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    }
    verdict(12, identical && compared >= 8, format!("{compared} output files compared across reruns, identical: {identical}"));
}
