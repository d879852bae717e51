//! Contrastive and gap-closing objectives with analytic gradients.
//!
//! Every loss takes a [`MultimodalBatch`] and returns its value together with
//! one gradient matrix per modality (zero for modalities the loss does not
//! touch). InfoNCE terms also report the derivative with respect to the
//! temperature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, sq_dist, Matrix, MultimodalBatch};

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;
pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TempMode {
    #[default]
    Fixed,
    Learnable,
}

/// How InfoNCE is combined when there are more than two modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InfoNceStructure {
    /// Bidirectional terms between the anchor and every other modality.
    #[default]
    AnchorCentric,
    /// Bidirectional terms over every unordered modality pair.
    AllPairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub tau_mode: TempMode,
    pub lambda1: f64,
    pub lambda2: f64,
    pub anchor: usize,
    pub structure: InfoNceStructure,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: DEFAULT_TAU,
            tau_mode: TempMode::Fixed,
            lambda1: 1.0,
            lambda2: 1.0,
            anchor: 0,
            structure: InfoNceStructure::AnchorCentric,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && (TAU_MIN..=TAU_MAX).contains(&self.tau)) {
            return Err(Error::InvalidConfig(format!(
                "tau {} outside [{TAU_MIN}, {TAU_MAX}]",
                self.tau
            )));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValueAndGrad {
    pub value: f64,
    pub grads: Vec<Matrix>,
    /// d(value)/d(tau), present for losses with an InfoNCE term.
    pub tau_grad: Option<f64>,
}

impl LossValueAndGrad {
    fn zeros_like(batch: &MultimodalBatch) -> Self {
        LossValueAndGrad {
            value: 0.0,
            grads: zero_grads(batch),
            tau_grad: None,
        }
    }

    /// `self += s * other`.
    pub fn accumulate(&mut self, s: f64, other: &LossValueAndGrad) {
        self.value += s * other.value;
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            g.axpy(s, o);
        }
        if let Some(t) = other.tau_grad {
            *self.tau_grad.get_or_insert(0.0) += s * t;
        }
    }
}

fn zero_grads(batch: &MultimodalBatch) -> Vec<Matrix> {
    (0..batch.num_modalities())
        .map(|_| Matrix::zeros(batch.num_samples(), batch.dim()))
        .collect()
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

struct Directional {
    value: f64,
    grad_m: Matrix,
    grad_n: Matrix,
    dtau: f64,
}

fn directional(zm: &Matrix, zn: &Matrix, tau: f64) -> Directional {
    let n = zm.rows();
    let inv_n = 1.0 / n as f64;
    let mut s = zm.matmul_t(zn);
    s.scale(1.0 / tau);
    let mut g = Matrix::zeros(n, n);
    let mut value = 0.0;
    let mut dtau = 0.0;
    for i in 0..n {
        let row = s.row(i);
        let lse = log_sum_exp(row);
        value += lse - row[i];
        let gi = g.row_mut(i);
        for (j, (gij, &sij)) in gi.iter_mut().zip(row).enumerate() {
            let p = (sij - lse).exp();
            let v = (p - if i == j { 1.0 } else { 0.0 }) * inv_n;
            *gij = v;
            dtau -= v * sij;
        }
    }
    let mut grad_m = g.matmul(zn);
    grad_m.scale(1.0 / tau);
    let mut grad_n = g.t_matmul(zm);
    grad_n.scale(1.0 / tau);
    Directional {
        value: value * inv_n,
        grad_m,
        grad_n,
        dtau: dtau / tau,
    }
}

/// Cross-entropy of retrieving row `i` of modality `n` for query row `i` of
/// modality `m`, averaged over rows.
pub fn infonce_directional(
    batch: &MultimodalBatch,
    m: usize,
    n: usize,
    tau: f64,
) -> Result<LossValueAndGrad> {
    batch.check_modality(m)?;
    batch.check_modality(n)?;
    check_tau(tau)?;
    if batch.num_samples() == 0 {
        return Err(Error::BatchTooSmall { need: 1, got: 0 });
    }
    let d = directional(batch.modality(m), batch.modality(n), tau);
    let mut out = LossValueAndGrad::zeros_like(batch);
    out.value = d.value;
    out.grads[m].add_assign(&d.grad_m);
    out.grads[n].add_assign(&d.grad_n);
    out.tau_grad = Some(d.dtau);
    Ok(out)
}

/// Modality pairs contributing to the symmetric InfoNCE objective.
pub fn infonce_pairs(num_modalities: usize, cfg: &LossConfig) -> Result<Vec<(usize, usize)>> {
    if num_modalities < 2 {
        return Err(Error::SingleModality);
    }
    if cfg.anchor >= num_modalities {
        return Err(Error::InvalidConfig(format!(
            "anchor {} out of range for {num_modalities} modalities",
            cfg.anchor
        )));
    }
    Ok(match cfg.structure {
        InfoNceStructure::AnchorCentric => (0..num_modalities)
            .filter(|&m| m != cfg.anchor)
            .map(|m| (cfg.anchor, m))
            .collect(),
        InfoNceStructure::AllPairs => (0..num_modalities)
            .flat_map(|m| (m + 1..num_modalities).map(move |n| (m, n)))
            .collect(),
    })
}

/// Mean of the two directions, averaged over the contributing pairs.
pub fn infonce_symmetric(batch: &MultimodalBatch, cfg: &LossConfig) -> Result<LossValueAndGrad> {
    let pairs = infonce_pairs(batch.num_modalities(), cfg)?;
    check_tau(cfg.tau)?;
    if batch.num_samples() == 0 {
        return Err(Error::BatchTooSmall { need: 1, got: 0 });
    }
    let w = 0.5 / pairs.len() as f64;
    let mut out = LossValueAndGrad::zeros_like(batch);
    out.tau_grad = Some(0.0);
    for &(m, n) in &pairs {
        let zm = batch.modality(m);
        let zn = batch.modality(n);
        for (a, b, d) in [(m, n, directional(zm, zn, cfg.tau)), (n, m, directional(zn, zm, cfg.tau))] {
            out.value += w * d.value;
            out.grads[a].axpy(w, &d.grad_m);
            out.grads[b].axpy(w, &d.grad_n);
            *out.tau_grad.as_mut().unwrap() += w * d.dtau;
        }
    }
    Ok(out)
}

/// Mean squared distance between each modality's rows and the anchor's,
/// averaged over non-anchor modalities.
pub fn loss_atp(batch: &MultimodalBatch, anchor: usize) -> Result<LossValueAndGrad> {
    let mm = batch.num_modalities();
    if mm < 2 {
        return Err(Error::SingleModality);
    }
    batch.check_modality(anchor)?;
    let n = batch.num_samples();
    if n == 0 {
        return Err(Error::BatchTooSmall { need: 1, got: 0 });
    }
    let w = 1.0 / ((mm - 1) as f64 * n as f64);
    let za = batch.modality(anchor);
    let mut out = LossValueAndGrad::zeros_like(batch);
    let mut ga = Matrix::zeros(n, batch.dim());
    for m in (0..mm).filter(|&m| m != anchor) {
        let zm = batch.modality(m);
        let gm = &mut out.grads[m];
        for i in 0..n {
            let (a, b) = (za.row(i), zm.row(i));
            out.value += w * sq_dist(b, a);
            let gmi = gm.row_mut(i);
            let gai = ga.row_mut(i);
            for k in 0..a.len() {
                let diff = 2.0 * w * (b[k] - a[k]);
                gmi[k] += diff;
                gai[k] -= diff;
            }
        }
    }
    out.grads[anchor] = ga;
    Ok(out)
}

/// Per-sample mean across modalities (not renormalised).
pub fn compute_centroids(batch: &MultimodalBatch) -> Matrix {
    let mut c = batch.modality(0).clone();
    for z in &batch.modalities()[1..] {
        c.add_assign(z);
    }
    c.scale(1.0 / batch.num_modalities() as f64);
    c
}

/// `log((1/N) Σ_{i≠j} exp(-2‖x_i - x_j‖²))` and its gradient.
fn rbf_log_mean(x: &Matrix) -> Result<(f64, Matrix)> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: n });
    }
    let mut e = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                e.push(-2.0 * sq_dist(x.row(i), x.row(j)));
            }
        }
    }
    let lse = log_sum_exp(&e);
    let value = lse - (n as f64).ln();
    let mut g = Matrix::zeros(n, x.cols());
    let mut k = 0;
    for i in 0..n {
        let xi = x.row(i);
        let mut acc = vec![0.0; x.cols()];
        for j in 0..n {
            if i == j {
                continue;
            }
            // the (i, j) and (j, i) terms carry the same weight
            let w = (e[k] - lse).exp();
            k += 1;
            for (a, (p, q)) in acc.iter_mut().zip(xi.iter().zip(x.row(j))) {
                *a += w * (p - q);
            }
        }
        for (gv, a) in g.row_mut(i).iter_mut().zip(acc) {
            *gv = -8.0 * a;
        }
    }
    Ok((value, g))
}

/// Log mean Gaussian potential between per-sample centroids.
pub fn loss_cu(batch: &MultimodalBatch) -> Result<LossValueAndGrad> {
    let mu = compute_centroids(batch);
    let (value, g) = rbf_log_mean(&mu)?;
    let g = g.scaled(1.0 / batch.num_modalities() as f64);
    Ok(LossValueAndGrad {
        value,
        grads: vec![g; batch.num_modalities()],
        tau_grad: None,
    })
}

/// Sample-level uniformity of a single embedding matrix.
pub fn uniformity(z: &Matrix) -> Result<(f64, Matrix)> {
    rbf_log_mean(z)
}

/// Sample-level uniformity averaged over modalities.
pub fn loss_uniform_baseline(batch: &MultimodalBatch) -> Result<LossValueAndGrad> {
    let w = 1.0 / batch.num_modalities() as f64;
    let mut out = LossValueAndGrad::zeros_like(batch);
    for (m, z) in batch.modalities().iter().enumerate() {
        let (v, g) = rbf_log_mean(z)?;
        out.value += w * v;
        out.grads[m] = g.scaled(w);
    }
    Ok(out)
}

/// `lambda1 · ATP + lambda2 · CU`; zero-weighted terms are skipped entirely.
pub fn loss_gap(batch: &MultimodalBatch, cfg: &LossConfig) -> Result<LossValueAndGrad> {
    cfg.validate()?;
    let mut out = LossValueAndGrad::zeros_like(batch);
    if cfg.lambda1 > 0.0 {
        out.accumulate(cfg.lambda1, &loss_atp(batch, cfg.anchor)?);
    }
    if cfg.lambda2 > 0.0 {
        out.accumulate(cfg.lambda2, &loss_cu(batch)?);
    }
    Ok(out)
}

/// Symmetric InfoNCE plus the gap terms.
pub fn loss_clgap(batch: &MultimodalBatch, cfg: &LossConfig) -> Result<LossValueAndGrad> {
    let mut out = infonce_symmetric(batch, cfg)?;
    if cfg.lambda1 > 0.0 || cfg.lambda2 > 0.0 {
        let gap = loss_gap(batch, cfg)?;
        out.accumulate(1.0, &gap);
    }
    Ok(out)
}

/// Error measure used by the gradient checks: `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(modality, row, col)` of the worst coordinate.
    pub worst: Option<(usize, usize, usize)>,
    pub tau_rel_error: Option<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol && self.tau_rel_error.is_none_or(|e| e <= tol)
    }
}

/// Central-difference check of every embedding coordinate (and tau, when the
/// loss reports a temperature derivative).
pub fn check_gradient<F>(
    loss_fn: F,
    batch: &MultimodalBatch,
    cfg: &LossConfig,
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&MultimodalBatch, &LossConfig) -> Result<LossValueAndGrad>,
{
    let analytic = loss_fn(batch, cfg)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        tau_rel_error: None,
    };
    let mut probe = batch.clone();
    for m in 0..batch.num_modalities() {
        for i in 0..batch.num_samples() {
            for k in 0..batch.dim() {
                let x = batch.modality(m).get(i, k);
                probe.modality_mut(m).set(i, k, x + h);
                let up = loss_fn(&probe, cfg)?.value;
                probe.modality_mut(m).set(i, k, x - h);
                let down = loss_fn(&probe, cfg)?.value;
                probe.modality_mut(m).set(i, k, x);
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.grads[m].get(i, k);
                let rel = relative_error(a, numeric);
                report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
                if rel > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = rel.max(report.max_rel_error);
                    report.worst = Some((m, i, k));
                }
            }
        }
    }
    if let Some(a) = analytic.tau_grad {
        let mut c = cfg.clone();
        c.tau = cfg.tau + h;
        let up = loss_fn(batch, &c)?.value;
        c.tau = cfg.tau - h;
        let down = loss_fn(batch, &c)?.value;
        report.tau_rel_error = Some(relative_error(a, (up - down) / (2.0 * h)));
    }
    Ok(report)
}
