//! Geometry of a joint embedding space: centroid gap, paired cosine, angular
//! value, cross-modal retrieval, and post-hoc translation of one modality.

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, normalize_rows_in_place, sq_dist, Matrix, MultimodalBatch};

/// Distance between the mean embeddings of modalities `m` and `n`.
pub fn modality_gap(batch: &MultimodalBatch, m: usize, n: usize) -> Result<f64> {
    batch.check_modality(m)?;
    batch.check_modality(n)?;
    if batch.num_samples() == 0 {
        return Err(Error::BatchTooSmall { need: 1, got: 0 });
    }
    Ok(centroid_distance(batch.modality(m), batch.modality(n)))
}

fn centroid_distance(a: &Matrix, b: &Matrix) -> f64 {
    sq_dist(&a.column_mean(), &b.column_mean()).sqrt()
}

/// Mean inner product of matched rows.
pub fn cos_tp(batch: &MultimodalBatch, m: usize, n: usize) -> Result<f64> {
    batch.check_modality(m)?;
    batch.check_modality(n)?;
    let rows = batch.num_samples();
    if rows == 0 {
        return Err(Error::BatchTooSmall { need: 1, got: 0 });
    }
    let (a, b) = (batch.modality(m), batch.modality(n));
    let s: f64 = (0..rows).map(|i| dot(a.row(i), b.row(i))).sum();
    Ok(s / rows as f64)
}

/// Mean inner product over unordered pairs of distinct rows.
pub fn angular_value(z: &Matrix) -> Result<f64> {
    let n = z.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: n });
    }
    let mut total = vec![0.0; z.cols()];
    let mut self_sq = 0.0;
    for r in z.iter_rows() {
        for (t, v) in total.iter_mut().zip(r) {
            *t += v;
        }
        self_sq += dot(r, r);
    }
    let pair_sum = 0.5 * (dot(&total, &total) - self_sq);
    Ok(pair_sum / (n * (n - 1) / 2) as f64)
}

/// Fraction of queries whose paired gallery row is among the `k` highest
/// dot-product scores. Ties rank the lower gallery index first.
pub fn recall_at_k(query: &Matrix, gallery: &Matrix, k: usize) -> Result<f64> {
    if query.shape() != gallery.shape() {
        return Err(Error::ShapeMismatch(format!(
            "query {:?} vs gallery {:?}",
            query.shape(),
            gallery.shape()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let n = query.rows();
    if n == 0 {
        return Err(Error::BatchTooSmall { need: 1, got: 0 });
    }
    let mut hits = 0usize;
    for i in 0..n {
        let q = query.row(i);
        let own = dot(q, gallery.row(i));
        let mut rank = 0usize;
        for j in 0..n {
            if j == i {
                continue;
            }
            let s = dot(q, gallery.row(j));
            if s > own || (s == own && j < i) {
                rank += 1;
                if rank >= k {
                    break;
                }
            }
        }
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Pairwise gap and paired-cosine values plus per-modality angular value.
#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub num_modalities: usize,
    /// `(m, n, value)` for every `m < n`.
    pub gaps: Vec<(usize, usize, f64)>,
    pub costp: Vec<(usize, usize, f64)>,
    pub av: Vec<f64>,
}

impl GapReport {
    pub fn compute(batch: &MultimodalBatch) -> Result<Self> {
        let mm = batch.num_modalities();
        let mut gaps = Vec::new();
        let mut costp = Vec::new();
        for m in 0..mm {
            for n in m + 1..mm {
                gaps.push((m, n, modality_gap(batch, m, n)?));
                costp.push((m, n, cos_tp(batch, m, n)?));
            }
        }
        let av = batch
            .modalities()
            .iter()
            .map(angular_value)
            .collect::<Result<Vec<_>>>()?;
        Ok(GapReport {
            num_modalities: mm,
            gaps,
            costp,
            av,
        })
    }

    /// Gap between `m` and `n` in either order; zero on the diagonal.
    pub fn gap(&self, m: usize, n: usize) -> f64 {
        lookup(&self.gaps, m, n).unwrap_or(0.0)
    }

    pub fn cos_tp(&self, m: usize, n: usize) -> f64 {
        lookup(&self.costp, m, n).unwrap_or(1.0)
    }

    pub fn mean_gap(&self) -> f64 {
        mean(self.gaps.iter().map(|g| g.2))
    }

    pub fn mean_costp(&self) -> f64 {
        mean(self.costp.iter().map(|g| g.2))
    }

    pub fn mean_av(&self) -> f64 {
        mean(self.av.iter().copied())
    }

    /// Flat `(key, value)` list in output order.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for &(m, n, v) in &self.gaps {
            out.push((format!("gap_{m}_{n}"), v));
        }
        for &(m, n, v) in &self.costp {
            out.push((format!("costp_{m}_{n}"), v));
        }
        for (m, v) in self.av.iter().enumerate() {
            out.push((format!("av_{m}"), *v));
        }
        out
    }
}

fn lookup(xs: &[(usize, usize, f64)], m: usize, n: usize) -> Option<f64> {
    let (a, b) = if m < n { (m, n) } else { (n, m) };
    xs.iter().find(|x| x.0 == a && x.1 == b).map(|x| x.2)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = xs.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if c == 0 {
        0.0
    } else {
        s / c as f64
    }
}

impl Serialize for GapReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let entries = self.entries();
        let mut map = s.serialize_map(Some(entries.len()))?;
        for (k, v) in &entries {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

/// Move modality `target` toward (or away from) modality `source` until their
/// centroid gap equals `target_gap`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub source: usize,
    pub target: usize,
    pub target_gap: f64,
    pub renormalize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftOutcome {
    pub batch: MultimodalBatch,
    pub alpha: f64,
    /// Vector added to every row of the target modality (before any
    /// renormalisation).
    pub offset: Vec<f64>,
    pub measured_gap: f64,
}

const ALPHA_LIMIT: f64 = 4.0;
const ALPHA_STEP: f64 = 0.02;
const GAP_TOL: f64 = 1e-8;
const ACCEPT_TOL: f64 = 1e-6;
const MAX_ITER: usize = 200;

/// Adds `offset` to every row of modality `m`, optionally renormalising.
pub fn translate_modality(
    batch: &MultimodalBatch,
    m: usize,
    offset: &[f64],
    renormalize: bool,
) -> Result<MultimodalBatch> {
    batch.check_modality(m)?;
    let mut out = batch.clone();
    let z = out.modality_mut(m);
    z.add_row_vector(offset);
    if renormalize {
        normalize_rows_in_place(z)?;
    }
    Ok(out)
}

struct GapFn<'a> {
    base: &'a Matrix,
    dir: Vec<f64>,
    c_src: Vec<f64>,
    renormalize: bool,
}

impl GapFn<'_> {
    fn shifted(&self, alpha: f64) -> Option<Matrix> {
        let mut z = self.base.clone();
        let off: Vec<f64> = self.dir.iter().map(|d| alpha * d).collect();
        z.add_row_vector(&off);
        if self.renormalize && normalize_rows_in_place(&mut z).is_err() {
            return None;
        }
        Some(z)
    }

    fn gap(&self, alpha: f64) -> f64 {
        match self.shifted(alpha) {
            Some(z) => sq_dist(&self.c_src, &z.column_mean()).sqrt(),
            None => f64::NAN,
        }
    }
}

pub fn apply_gap_shift(batch: &MultimodalBatch, spec: &ShiftSpec) -> Result<ShiftOutcome> {
    batch.check_modality(spec.source)?;
    batch.check_modality(spec.target)?;
    if spec.source == spec.target {
        return Err(Error::InvalidConfig("source and target modality coincide".into()));
    }
    if !(spec.target_gap.is_finite() && spec.target_gap >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "target gap must be >= 0, got {}",
            spec.target_gap
        )));
    }
    if batch.num_samples() == 0 {
        return Err(Error::BatchTooSmall { need: 1, got: 0 });
    }
    let c_src = batch.modality(spec.source).column_mean();
    let c_tgt = batch.modality(spec.target).column_mean();
    let f = GapFn {
        base: batch.modality(spec.target),
        dir: c_src.iter().zip(&c_tgt).map(|(a, b)| a - b).collect(),
        c_src,
        renormalize: spec.renormalize,
    };
    let target = spec.target_gap;
    let resid = |a: f64| f.gap(a) - target;

    let finish = |alpha: f64| -> Result<ShiftOutcome> {
        let offset: Vec<f64> = f.dir.iter().map(|d| alpha * d).collect();
        let out = translate_modality(batch, spec.target, &offset, spec.renormalize)?;
        let measured_gap = modality_gap(&out, spec.source, spec.target)?;
        Ok(ShiftOutcome {
            batch: out,
            alpha,
            offset,
            measured_gap,
        })
    };

    let r0 = resid(0.0);
    if r0.abs() <= GAP_TOL {
        return Ok(ShiftOutcome {
            batch: batch.clone(),
            alpha: 0.0,
            offset: vec![0.0; batch.dim()],
            measured_gap: modality_gap(batch, spec.source, spec.target)?,
        });
    }
    if norm(&f.dir) == 0.0 {
        return Err(Error::TargetUnreachable {
            target,
            closest: f.gap(0.0),
        });
    }
    // a gap above target shrinks when moving toward the source
    let sign = if r0 > 0.0 { 1.0 } else { -1.0 };
    let steps = (ALPHA_LIMIT / ALPHA_STEP).round() as usize;
    let mut prev = (0.0, r0);
    let mut best = (0.0, r0.abs());
    for k in 1..=steps {
        let a = sign * k as f64 * ALPHA_STEP;
        let r = resid(a);
        if r.is_nan() {
            continue;
        }
        if r.abs() < best.1 {
            best = (a, r.abs());
        }
        if r == 0.0 {
            return finish(a);
        }
        if (r > 0.0) != (prev.1 > 0.0) {
            let alpha = bisect(&resid, prev.0, prev.1, a);
            if resid(alpha).abs() <= ACCEPT_TOL {
                return finish(alpha);
            }
            break;
        }
        prev = (a, r);
    }
    // no crossing: the target may still be touched at a minimum of |gap - target|
    let lo = (best.0 - ALPHA_STEP).max(-ALPHA_LIMIT);
    let hi = (best.0 + ALPHA_STEP).min(ALPHA_LIMIT);
    let alpha = golden_min(|a| resid(a).abs(), lo, hi);
    if resid(alpha).abs() <= ACCEPT_TOL {
        return finish(alpha);
    }
    Err(Error::TargetUnreachable {
        target,
        closest: f.gap(best.0),
    })
}

fn bisect(f: &impl Fn(f64) -> f64, mut lo: f64, mut f_lo: f64, mut hi: f64) -> f64 {
    for _ in 0..MAX_ITER {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm.abs() <= GAP_TOL * 1e-2 || mid == lo || mid == hi {
            return mid;
        }
        if (fm > 0.0) == (f_lo > 0.0) {
            lo = mid;
            f_lo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..MAX_ITER {
        if (b - a).abs() < 1e-15 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        c
    } else {
        d
    }
}

/// Terms of `mean‖z - (μ0 + δ)‖² = mean‖z - μ0‖² + ‖δ‖² - 2·mean⟨z - μ0, δ⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// `2·|mean⟨z - μ0, δ⟩|`, zero when `μ0` is the mean of `z`.
    pub residual: f64,
}

impl ScatterCheck {
    pub fn holds(&self, tol: f64) -> bool {
        (self.lhs - self.rhs).abs() <= self.residual + tol
    }
}

pub fn scatter_decomposition_check(z: &Matrix, mu0: &[f64], delta: &[f64]) -> Result<ScatterCheck> {
    if mu0.len() != z.cols() || delta.len() != z.cols() {
        return Err(Error::ShapeMismatch("centre and shift must match the embedding dim".into()));
    }
    let n = z.rows();
    if n == 0 {
        return Err(Error::BatchTooSmall { need: 1, got: 0 });
    }
    let shifted: Vec<f64> = mu0.iter().zip(delta).map(|(a, b)| a + b).collect();
    let (mut lhs, mut spread, mut cross) = (0.0, 0.0, 0.0);
    let mut centred = vec![0.0; z.cols()];
    for r in z.iter_rows() {
        lhs += sq_dist(r, &shifted);
        spread += sq_dist(r, mu0);
        for ((c, v), m) in centred.iter_mut().zip(r).zip(mu0) {
            *c = v - m;
        }
        cross += dot(&centred, delta);
    }
    let inv = 1.0 / n as f64;
    Ok(ScatterCheck {
        lhs: lhs * inv,
        rhs: spread * inv + dot(delta, delta),
        residual: 2.0 * (cross * inv).abs(),
    })
}
