//! Run configuration, embedding files and the CSV/JSON artifacts written by
//! the command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterEvalConfig;
use crate::error::{Error, Result};
use crate::experiments::{AblationCell, LandscapePoint, SweepRow, SweepStatus};
use crate::losses::{InfoNceStructure, LossConfig, TempMode, DEFAULT_TAU};
use crate::numerics::{Matrix, MultimodalBatch, RngState};
use crate::synthdata::SyntheticDatasetSpec;
use crate::trainer::{Activation, EncoderParams, EpochRecord, LossVariant, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub variant: LossVariant,
    pub tau: f64,
    pub tau_mode: TempMode,
    pub lambda1: f64,
    pub lambda2: f64,
    pub anchor: usize,
    pub structure: InfoNceStructure,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        LossSection {
            variant: LossVariant::Ours,
            tau: DEFAULT_TAU,
            tau_mode: l.tau_mode,
            lambda1: l.lambda1,
            lambda2: l.lambda2,
            anchor: l.anchor,
            structure: l.structure,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub switch_epoch: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            hidden: t.hidden,
            embed_dim: t.embed_dim,
            activation: t.activation,
            switch_epoch: t.switch_epoch,
            seed: t.seed,
        }
    }
}

/// Everything a `train` or `ablate` run needs. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub dataset: SyntheticDatasetSpec,
    pub loss: LossSection,
    pub train: TrainSection,
    pub eval: ClusterEvalConfig,
}

impl RunConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfigFile =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train_config().validate()?;
        if self.eval.knn_k == 0 || self.eval.kmeans_restarts == 0 || self.eval.kmeans_max_iter == 0 {
            return Err(Error::InvalidConfig("eval settings must be positive".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let l = &self.loss;
        let t = &self.train;
        TrainConfig {
            variant: l.variant,
            loss: LossConfig {
                tau: l.tau,
                tau_mode: l.tau_mode,
                lambda1: l.lambda1,
                lambda2: l.lambda2,
                anchor: l.anchor,
                structure: l.structure,
            },
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            hidden: t.hidden.clone(),
            embed_dim: t.embed_dim,
            activation: t.activation,
            switch_epoch: t.switch_epoch,
            seed: t.seed,
        }
    }

    /// Replaces the dataset and training seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self
    }
}

/// The configuration actually used, as written next to the outputs.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig<'a> {
    #[serde(flatten)]
    pub config: &'a RunConfigFile,
    pub seed_override: Option<u64>,
}

/// Creates the run directory. An existing directory is an error unless
/// `force` is set.
pub fn prepare_run_dir(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::OutputExists(path.to_path_buf()));
    }
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_to_io(path, e))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_to_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("{other:?}"),
        },
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Flat `key -> number` JSON object (keys sorted).
pub fn metrics_json(entries: &[(String, f64)]) -> BTreeMap<String, f64> {
    entries.iter().cloned().collect()
}

pub fn write_landscape_csv(path: &Path, points: &[LandscapePoint]) -> Result<()> {
    let header = ["theta", "loss", "grad_matched", "grad_mismatched"].map(String::from);
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                fmt_f64(p.theta),
                fmt_f64(p.loss),
                fmt_f64(p.grad_matched),
                fmt_opt(p.grad_mismatched),
            ]
        })
        .collect();
    write_csv(path, &header, &rows)
}

pub fn timeline_header(record: &EpochRecord) -> Vec<String> {
    let mut h = vec!["epoch".to_string(), "loss".to_string()];
    h.extend(record.report.entries().into_iter().map(|(k, _)| k));
    h.push("tau".into());
    h
}

pub fn write_timeline_csv(path: &Path, timeline: &[EpochRecord]) -> Result<()> {
    let Some(first) = timeline.first() else {
        return Err(Error::InvalidConfig("empty timeline".into()));
    };
    let rows: Vec<Vec<String>> = timeline
        .iter()
        .map(|r| {
            let mut row = vec![r.epoch.to_string(), fmt_f64(r.loss)];
            row.extend(r.report.entries().into_iter().map(|(_, v)| fmt_f64(v)));
            row.push(fmt_f64(r.tau));
            row
        })
        .collect();
    write_csv(path, &timeline_header(first), &rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let header = [
        "target_gap",
        "measured_gap",
        "r1_m2n",
        "r1_n2m",
        "v_measure",
        "knn",
        "status",
    ]
    .map(String::from);
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let status = match r.status {
                SweepStatus::Ok => "ok".to_string(),
                SweepStatus::Unreachable { closest } => {
                    format!("unreachable (closest {})", fmt_f64(closest))
                }
            };
            vec![
                fmt_f64(r.target_gap),
                fmt_opt(r.measured_gap),
                fmt_opt(r.r1_m2n),
                fmt_opt(r.r1_n2m),
                fmt_opt(r.v_measure),
                fmt_opt(r.knn),
                status,
            ]
        })
        .collect();
    write_csv(path, &header, &rows)
}

pub fn write_grid_csv(path: &Path, cells: &[AblationCell]) -> Result<()> {
    let header = ["lambda1", "lambda2", "r1", "v_measure", "avg", "status"].map(String::from);
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            let status = match &c.result {
                Ok(_) => "ok".to_string(),
                Err(msg) => msg.clone(),
            };
            vec![
                fmt_f64(c.lambda1),
                fmt_f64(c.lambda2),
                fmt_opt(c.r1()),
                fmt_opt(c.v_measure()),
                fmt_opt(c.avg()),
                status,
            ]
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// Writes one row per (modality, sample): `sample_id, modality, label, e0..`.
/// Missing labels are written as -1.
pub fn write_embeddings(path: &Path, batch: &MultimodalBatch) -> Result<()> {
    let mut header = vec!["sample_id".to_string(), "modality".into(), "label".into()];
    header.extend((0..batch.dim()).map(|k| format!("e{k}")));
    let mut rows = Vec::with_capacity(batch.num_modalities() * batch.num_samples());
    for (m, z) in batch.modalities().iter().enumerate() {
        for i in 0..batch.num_samples() {
            let label = batch.labels().map_or("-1".to_string(), |l| l[i].to_string());
            let mut row = vec![i.to_string(), m.to_string(), label];
            row.extend(z.row(i).iter().map(|v| fmt_f64(*v)));
            rows.push(row);
        }
    }
    write_csv(path, &header, &rows)
}

type Row = (Option<usize>, Vec<f64>);

pub fn read_embeddings(path: &Path) -> Result<MultimodalBatch> {
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_to_io(path, e))?;
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let fixed = ["sample_id", "modality", "label"];
    if header.len() < 4 || header.iter().take(3).ne(fixed) {
        return Err(parse_err(
            1,
            "header must be sample_id,modality,label followed by at least one value column".into(),
        ));
    }
    let dim = header.len() - 3;
    // modality -> sample id -> (label, values)
    let mut by_mod: BTreeMap<usize, BTreeMap<usize, Row>> = BTreeMap::new();
    let mut labelled: Option<bool> = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |k: usize| rec.get(k).unwrap_or("").trim();
        let sample: usize = field(0)
            .parse()
            .map_err(|_| parse_err(line, format!("bad sample_id {:?}", field(0))))?;
        let modality: usize = field(1)
            .parse()
            .map_err(|_| parse_err(line, format!("bad modality {:?}", field(1))))?;
        let label: i64 = field(2)
            .parse()
            .map_err(|_| parse_err(line, format!("bad label {:?}", field(2))))?;
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(parse_err(line, format!("label {l} must be >= 0 or -1"))),
        };
        if *labelled.get_or_insert(label.is_some()) != label.is_some() {
            return Err(parse_err(line, "either every row or no row may carry a label".into()));
        }
        let mut values = Vec::with_capacity(dim);
        for k in 0..dim {
            let v: f64 = field(3 + k)
                .parse()
                .map_err(|_| parse_err(line, format!("bad value {:?} in column e{k}", field(3 + k))))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value in column e{k}")));
            }
            values.push(v);
        }
        if by_mod
            .entry(modality)
            .or_default()
            .insert(sample, (label, values))
            .is_some()
        {
            return Err(parse_err(line, format!("duplicate row for sample {sample}, modality {modality}")));
        }
    }
    if by_mod.is_empty() {
        return Err(parse_err(1, "no embedding rows".into()));
    }
    let mm = by_mod.len();
    if by_mod.keys().copied().ne(0..mm) {
        return Err(parse_err(0, "modalities must be numbered 0..M-1".into()));
    }
    let ids: Vec<usize> = by_mod[&0].keys().copied().collect();
    let mut labels = Vec::with_capacity(ids.len());
    let mut mods = Vec::with_capacity(mm);
    for (m, rows) in &by_mod {
        if rows.keys().ne(ids.iter()) {
            return Err(parse_err(0, format!("modality {m} covers different samples than modality 0")));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for (i, (_, (label, values))) in rows.iter().enumerate() {
            if *m == 0 {
                labels.push(*label);
            } else if labels[i] != *label {
                return Err(parse_err(0, format!("sample {} has inconsistent labels", ids[i])));
            }
            data.extend_from_slice(values);
        }
        mods.push(Matrix::new(ids.len(), dim, data)?);
    }
    let labels = if labelled == Some(true) {
        Some(labels.into_iter().map(|l| l.expect("checked")).collect())
    } else {
        None
    };
    MultimodalBatch::new(mods, labels)
}

/// Trained encoders plus what is needed to resume or audit the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub tau: f64,
    pub rng_seed: u64,
    /// ChaCha word position, as a decimal string (exceeds JSON's safe range).
    pub rng_word_pos: String,
    pub encoders: Vec<EncoderParams>,
}

impl Checkpoint {
    pub fn from_outcome(outcome: &TrainOutcome) -> Self {
        Checkpoint {
            config: outcome.config.clone(),
            tau: outcome.tau,
            rng_seed: outcome.rng_state.seed,
            rng_word_pos: outcome.rng_state.word_pos.to_string(),
            encoders: outcome.encoders.clone(),
        }
    }

    pub fn rng_state(&self) -> Result<RngState> {
        Ok(RngState {
            seed: self.rng_seed,
            word_pos: self
                .rng_word_pos
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad rng_word_pos {:?}", self.rng_word_pos)))?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfigFile::from_json(r#"{"loss": {"lambda3": 1.0}}"#).unwrap_err();
        assert!(err.to_string().contains("lambda3"), "{err}");
        let err = RunConfigFile::from_json(r#"{"dataset": {}, "extra": 1}"#).unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = RunConfigFile::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfigFile::default());
        assert_eq!(cfg.train_config().variant, LossVariant::Ours);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfigFile::from_json(r#"{"loss": {"tau": 0.0}}"#).is_err());
        assert!(RunConfigFile::from_json(r#"{"train": {"epochs": 0}}"#).is_err());
        assert!(RunConfigFile::from_json(r#"{"loss": {"variant": "nope"}}"#).is_err());
    }

    #[test]
    fn malformed_rows_report_their_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        fs::write(&p, "sample_id,modality,label,e0,e1\n0,0,1,0.5,0.5\n1,0,1,0.5,oops\n").unwrap();
        match read_embeddings(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unlabelled_files_load_without_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        fs::write(&p, "sample_id,modality,label,e0\n0,0,-1,1\n0,1,-1,2\n").unwrap();
        let b = read_embeddings(&p).unwrap();
        assert_eq!(b.labels(), None);
        assert_eq!(b.num_modalities(), 2);
    }

    #[test]
    fn existing_run_dir_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(prepare_run_dir(dir.path(), false), Err(Error::OutputExists(_))));
        prepare_run_dir(dir.path(), true).unwrap();
    }

    proptest! {
        #[test]
        fn embeddings_round_trip_exactly(seed in 0u64..200, m in 1usize..4, n in 1usize..8, d in 1usize..5, labelled: bool) {
            let mut rng = Rng::new(seed);
            let mods = (0..m).map(|_| rng.normal_matrix(n, d, 10.0)).collect();
            let labels = labelled.then(|| (0..n).map(|i| i % 3).collect());
            let b = MultimodalBatch::new(mods, labels).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("e.csv");
            write_embeddings(&p, &b).unwrap();
            prop_assert_eq!(read_embeddings(&p).unwrap(), b);
        }
    }
}
