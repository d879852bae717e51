//! Synthetic labelled multimodal inputs and the toy sphere configuration.
//!
//! Classes are unit-norm prototypes in a latent space. Every modality sees a
//! noisy latent through its own random linear map plus a constant offset
//! (the cone), so untrained encoders start with separated modality clouds.
//! A fraction of training pairs can be deranged across samples to imitate
//! noisy pairing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{normalize_rows_in_place, Matrix, MultimodalBatch, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub latent_dim: usize,
    pub modality_dims: Vec<usize>,
    /// Shared latent noise around each class prototype.
    pub noise_sigma: f64,
    /// Extra latent noise drawn independently per modality.
    pub modality_noise: f64,
    /// Fraction of training samples whose non-anchor modalities describe a
    /// different sample.
    pub mismatch_fraction: f64,
    pub cone_offset: f64,
    /// Clean held-out samples per class, never mismatched.
    pub probe_per_class: usize,
    /// Use identity maps instead of random ones (needs `modality_dims == latent_dim`).
    pub identity_maps: bool,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            num_classes: 10,
            samples_per_class: 200,
            latent_dim: 8,
            modality_dims: vec![32, 32, 32],
            noise_sigma: 0.1,
            modality_noise: 0.05,
            mismatch_fraction: 0.5,
            cone_offset: 2.0,
            probe_per_class: 40,
            identity_maps: false,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_classes == 0 || self.samples_per_class == 0 || self.latent_dim == 0 {
            return bad("num_classes, samples_per_class and latent_dim must be positive".into());
        }
        if self.modality_dims.is_empty() || self.modality_dims.contains(&0) {
            return bad("modality_dims must be non-empty and positive".into());
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("modality_noise", self.modality_noise),
            ("cone_offset", self.cone_offset),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.mismatch_fraction) {
            return bad(format!(
                "mismatch_fraction must lie in [0, 1], got {}",
                self.mismatch_fraction
            ));
        }
        if self.identity_maps && self.modality_dims.iter().any(|&d| d != self.latent_dim) {
            return bad("identity_maps needs every modality dim equal to latent_dim".into());
        }
        Ok(())
    }

    pub fn num_modalities(&self) -> usize {
        self.modality_dims.len()
    }
}

/// Raw per-modality inputs for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: Vec<Matrix>,
    pub labels: Vec<usize>,
    /// Clean latent of each sample (what the anchor modality sees).
    pub latents: Matrix,
    pub mismatched: Vec<bool>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: Split,
    pub probe: Split,
    pub prototypes: Matrix,
}

struct ModalityMap {
    weight: Matrix,
    offset: Vec<f64>,
}

fn latents(protos: &Matrix, per_class: usize, sigma: f64, rng: &mut Rng) -> (Matrix, Vec<usize>) {
    let c = protos.rows();
    let labels: Vec<usize> = (0..c * per_class).map(|i| i % c).collect();
    let mut z = protos.select_rows(&labels);
    for v in z.data_mut() {
        *v += sigma * rng.normal();
    }
    (z, labels)
}

fn observe(z: &Matrix, map: &ModalityMap, noise: f64, rng: &mut Rng) -> Matrix {
    let mut noisy = z.clone();
    if noise > 0.0 {
        for v in noisy.data_mut() {
            *v += noise * rng.normal();
        }
    }
    let mut x = noisy.matmul_t(&map.weight);
    x.add_row_vector(&map.offset);
    x
}

pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let l = spec.latent_dim;

    let mut prototypes = root.derive(0).normal_matrix(spec.num_classes, l, 1.0);
    normalize_rows_in_place(&mut prototypes)?;

    let maps: Vec<ModalityMap> = spec
        .modality_dims
        .iter()
        .enumerate()
        .map(|(m, &d)| {
            let mut rng = root.derive(10 + m as u64);
            let weight = if spec.identity_maps {
                Matrix::identity(l)
            } else {
                rng.normal_matrix(d, l, 1.0 / (l as f64).sqrt())
            };
            let offset = rng.unit_vector(d).into_iter().map(|v| v * spec.cone_offset).collect();
            ModalityMap { weight, offset }
        })
        .collect();

    let (z_train, y_train) = latents(&prototypes, spec.samples_per_class, spec.noise_sigma, &mut root.derive(1));
    let (z_probe, y_probe) = latents(&prototypes, spec.probe_per_class, spec.noise_sigma, &mut root.derive(2));

    let n = y_train.len();
    let count = (spec.mismatch_fraction * n as f64).floor() as usize;
    let mut chosen = root.derive(3).permutation(n);
    chosen.truncate(count);
    let mut mismatched = vec![false; n];
    if count >= 2 {
        for &i in &chosen {
            mismatched[i] = true;
        }
    }

    let mut train_inputs = Vec::with_capacity(maps.len());
    let mut probe_inputs = Vec::with_capacity(maps.len());
    for (m, map) in maps.iter().enumerate() {
        let mut seen = z_train.clone();
        if m > 0 && count >= 2 {
            // cyclic shift of a shuffled subset: a derangement, so every
            // chosen sample really is paired with someone else
            let mut order = chosen.clone();
            root.derive(20 + m as u64).shuffle(&mut order);
            for k in 0..order.len() {
                let src = order[(k + 1) % order.len()];
                seen.row_mut(order[k]).copy_from_slice(z_train.row(src));
            }
        }
        train_inputs.push(observe(&seen, map, spec.modality_noise, &mut root.derive(30 + m as u64)));
        probe_inputs.push(observe(&z_probe, map, spec.modality_noise, &mut root.derive(40 + m as u64)));
    }

    let probe_len = y_probe.len();
    Ok(SyntheticDataset {
        train: Split {
            inputs: train_inputs,
            labels: y_train,
            latents: z_train,
            mismatched,
        },
        probe: Split {
            inputs: probe_inputs,
            labels: y_probe,
            latents: z_probe,
            mismatched: vec![false; probe_len],
        },
        prototypes,
    })
}

/// Ring of paired points on the 2-sphere whose paired partner rotates away
/// along the meridian by `theta`. The last `num_mismatched` partners are
/// cyclically shifted so those pairs never coincide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SphereSimConfig {
    pub num_pairs: usize,
    pub num_mismatched: usize,
    /// Starting angle of the trajectory, in degrees.
    pub delta_deg: f64,
    pub grid_step_deg: f64,
    pub tau: f64,
    pub ring_latitude_deg: f64,
}

impl Default for SphereSimConfig {
    fn default() -> Self {
        SphereSimConfig {
            num_pairs: 6,
            num_mismatched: 2,
            delta_deg: 120.0,
            grid_step_deg: 1.0,
            tau: 0.16,
            ring_latitude_deg: 0.0,
        }
    }
}

impl SphereSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_pairs < 2 {
            return Err(Error::InvalidConfig("num_pairs must be at least 2".into()));
        }
        if self.num_mismatched == 1 || self.num_mismatched > self.num_pairs {
            return Err(Error::InvalidConfig(format!(
                "num_mismatched must be 0 or in 2..={}, got {}",
                self.num_pairs, self.num_mismatched
            )));
        }
        if !(0.0..=180.0).contains(&self.delta_deg) {
            return Err(Error::InvalidAngle(self.delta_deg));
        }
        if !(self.grid_step_deg.is_finite() && self.grid_step_deg > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "grid step must be positive, got {}",
                self.grid_step_deg
            )));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if self.ring_latitude_deg.is_nan() || self.ring_latitude_deg.abs() >= 90.0 {
            return Err(Error::InvalidConfig("ring latitude must lie in (-90, 90)".into()));
        }
        Ok(())
    }

    /// `0, step, 2·step, ...` up to 180 degrees inclusive.
    pub fn theta_grid(&self) -> Vec<f64> {
        let count = (180.0 / self.grid_step_deg + 1e-9).floor() as usize;
        (0..=count).map(|k| k as f64 * self.grid_step_deg).collect()
    }

    /// Indices of the pairs that are mismatched.
    pub fn mismatched(&self) -> std::ops::Range<usize> {
        self.num_pairs - self.num_mismatched..self.num_pairs
    }
}

/// Two-modality batch for angle `theta_deg` (0 = every matched pair coincides).
pub fn build_sphere_config(cfg: &SphereSimConfig, theta_deg: f64) -> Result<MultimodalBatch> {
    cfg.validate()?;
    if !(0.0..=180.0).contains(&theta_deg) {
        return Err(Error::InvalidAngle(theta_deg));
    }
    let n = cfg.num_pairs;
    let lat = cfg.ring_latitude_deg.to_radians();
    let th = theta_deg.to_radians();
    let mut anchor = Matrix::zeros(n, 3);
    let mut partner = Matrix::zeros(n, 3);
    for k in 0..n {
        let lon = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
        let p = [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()];
        let south = [lat.sin() * lon.cos(), lat.sin() * lon.sin(), -lat.cos()];
        anchor.row_mut(k).copy_from_slice(&p);
        for j in 0..3 {
            partner.set(k, j, th.cos() * p[j] + th.sin() * south[j]);
        }
    }
    let mis = cfg.mismatched();
    if mis.len() >= 2 {
        let moved = partner.clone();
        let idx: Vec<usize> = mis.collect();
        for (pos, &k) in idx.iter().enumerate() {
            let src = idx[(pos + 1) % idx.len()];
            partner.row_mut(k).copy_from_slice(moved.row(src));
        }
    }
    MultimodalBatch::new(vec![anchor, partner], None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::modality_gap;
    use crate::numerics::{angle_deg, norm, normalize_rows};

    fn small() -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            num_classes: 4,
            samples_per_class: 25,
            probe_per_class: 5,
            modality_dims: vec![6, 5],
            latent_dim: 3,
            ..SyntheticDatasetSpec::default()
        }
    }

    #[test]
    fn labels_are_balanced_and_shapes_match() {
        let spec = small();
        let d = generate_dataset(&spec).unwrap();
        assert_eq!(d.train.len(), 100);
        assert_eq!(d.probe.len(), 20);
        for c in 0..4 {
            assert_eq!(d.train.labels.iter().filter(|&&l| l == c).count(), 25);
        }
        assert_eq!(d.train.inputs[0].shape(), (100, 6));
        assert_eq!(d.train.inputs[1].shape(), (100, 5));
        let expected = (spec.mismatch_fraction * 100.0).floor() as usize;
        assert_eq!(d.train.mismatched.iter().filter(|&&m| m).count(), expected);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_dataset(&small()).unwrap(), generate_dataset(&small()).unwrap());
        let other = SyntheticDatasetSpec { seed: 1, ..small() };
        assert_ne!(generate_dataset(&small()).unwrap(), generate_dataset(&other).unwrap());
    }

    #[test]
    fn noiseless_identity_inputs_coincide() {
        let spec = SyntheticDatasetSpec {
            noise_sigma: 0.0,
            modality_noise: 0.0,
            cone_offset: 0.0,
            mismatch_fraction: 0.0,
            identity_maps: true,
            latent_dim: 4,
            modality_dims: vec![4, 4, 4],
            ..small()
        };
        let d = generate_dataset(&spec).unwrap();
        assert_eq!(d.train.inputs[0], d.train.inputs[1]);
        assert_eq!(d.train.inputs[0], d.train.inputs[2]);
    }

    #[test]
    fn cone_offset_opens_a_gap() {
        let spec = SyntheticDatasetSpec {
            identity_maps: true,
            latent_dim: 4,
            modality_dims: vec![4, 4],
            ..small()
        };
        let d = generate_dataset(&spec).unwrap();
        let mods = d.train.inputs.iter().map(|x| normalize_rows(x).unwrap()).collect();
        let b = MultimodalBatch::new(mods, None).unwrap();
        assert!(modality_gap(&b, 0, 1).unwrap() > 0.0);
    }

    #[test]
    fn class_means_are_separated() {
        let spec = SyntheticDatasetSpec { samples_per_class: 200, ..small() };
        let d = generate_dataset(&spec).unwrap();
        let c = spec.num_classes;
        let means: Vec<Vec<f64>> = (0..c)
            .map(|k| {
                let idx: Vec<usize> = (0..d.train.len()).filter(|&i| d.train.labels[i] == k).collect();
                d.train.latents.select_rows(&idx).column_mean()
            })
            .collect();
        for a in 0..c {
            for b in a + 1..c {
                let diff: Vec<f64> = means[a].iter().zip(&means[b]).map(|(x, y)| x - y).collect();
                assert!(norm(&diff) >= 3.0 * spec.noise_sigma);
            }
        }
    }

    #[test]
    fn invalid_fraction_is_rejected() {
        let spec = SyntheticDatasetSpec { mismatch_fraction: 1.5, ..small() };
        assert!(generate_dataset(&spec).is_err());
    }

    #[test]
    fn sphere_partners_sit_at_theta() {
        let cfg = SphereSimConfig { num_mismatched: 0, ..SphereSimConfig::default() };
        for th in [0.0, 30.0, 90.0, 180.0] {
            let b = build_sphere_config(&cfg, th).unwrap();
            for k in 0..cfg.num_pairs {
                assert!((norm(b.modality(1).row(k)) - 1.0).abs() < 1e-12);
                assert!((angle_deg(b.modality(0).row(k), b.modality(1).row(k)) - th).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sphere_swaps_mismatched_partners() {
        let b = build_sphere_config(&SphereSimConfig::default(), 0.0).unwrap();
        assert_eq!(b.modality(0).row(0), b.modality(1).row(0));
        assert_eq!(b.modality(0).row(4), b.modality(1).row(5));
        assert_eq!(b.modality(0).row(5), b.modality(1).row(4));
    }

    #[test]
    fn sphere_rejects_bad_inputs() {
        let cfg = SphereSimConfig::default();
        assert!(matches!(build_sphere_config(&cfg, 181.0), Err(Error::InvalidAngle(_))));
        let one = SphereSimConfig { num_mismatched: 1, ..cfg.clone() };
        assert!(build_sphere_config(&one, 10.0).is_err());
        let step = SphereSimConfig { grid_step_deg: 0.0, ..cfg };
        assert!(step.validate().is_err());
    }

    #[test]
    fn grid_spans_zero_to_180() {
        let g = SphereSimConfig { grid_step_deg: 7.0, ..SphereSimConfig::default() }.theta_grid();
        assert_eq!(g.first(), Some(&0.0));
        assert_eq!(g.last(), Some(&175.0));
        assert_eq!(SphereSimConfig::default().theta_grid().len(), 181);
    }
}
