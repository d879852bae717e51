//! Per-modality MLP encoders trained with Adam on one of several contrastive
//! or gap-closing objectives. Encoder outputs are L2-normalised rows, and the
//! backward pass goes through that normalisation.

use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_eval, ClusterEvalConfig};
use crate::error::{Error, Result};
use crate::losses::{
    infonce_pairs, infonce_symmetric, loss_atp, loss_clgap, loss_cu, loss_uniform_baseline,
    relative_error, LossConfig, LossValueAndGrad, TempMode, TAU_MAX, TAU_MIN,
};
use crate::metrics::{recall_at_k, GapReport};
use crate::numerics::{dot, norm, Matrix, MultimodalBatch, Rng, RngState, NORM_EPS};
use crate::synthdata::{Split, SyntheticDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            // written out so NaN propagates instead of being clipped to 0
            Activation::Relu => {
                if x < 0.0 {
                    0.0
                } else {
                    x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl EncoderParams {
    /// `sizes = [input, hidden..., output]`; weights and biases drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(sizes: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weight = Matrix::from_fn(w[1], w[0], |_, _| rng.uniform_range(-bound, bound));
                let bias = (0..w[1]).map(|_| rng.uniform_range(-bound, bound)).collect();
                Layer { weight, bias }
            })
            .collect();
        Ok(EncoderParams { layers, activation })
    }

    /// Single identity layer: the encoder only normalises its input.
    pub fn identity(dim: usize) -> Self {
        EncoderParams {
            layers: vec![Layer {
                weight: Matrix::identity(dim),
                bias: vec![0.0; dim],
            }],
            activation: Activation::Relu,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.rows())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    fn zeros_like(&self) -> Self {
        EncoderParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            activation: self.activation,
        }
    }

    /// Flat views of every parameter block, weights before biases per layer.
    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }
}

pub type EncoderGrads = EncoderParams;

pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
    /// Normalised output and the row norms it was divided by.
    out: Matrix,
    norms: Vec<f64>,
}

pub fn forward(params: &EncoderParams, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if x.cols() != params.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "encoder expects {} inputs, got {}",
            params.input_dim(),
            x.cols()
        )));
    }
    let last = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut a = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = a.matmul_t(&layer.weight);
        z.add_row_vector(&layer.bias);
        inputs.push(a);
        a = if l < last {
            let mut h = z.clone();
            for v in h.data_mut() {
                *v = params.activation.apply(*v);
            }
            h
        } else {
            z.clone()
        };
        pre.push(z);
    }
    let mut norms = Vec::with_capacity(a.rows());
    for i in 0..a.rows() {
        let r = a.row_mut(i);
        let n = norm(r);
        if n < NORM_EPS {
            return Err(Error::ZeroNormRow { row: i });
        }
        for v in r.iter_mut() {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((
        a.clone(),
        ForwardCache {
            inputs,
            pre,
            out: a,
            norms,
        },
    ))
}

/// Parameter gradients given `upstream = dL/d(normalised output)`.
pub fn backward(params: &EncoderParams, cache: &ForwardCache, upstream: &Matrix) -> EncoderGrads {
    let mut grads = params.zeros_like();
    // through y = h / ‖h‖
    let mut g = upstream.clone();
    for i in 0..g.rows() {
        let y = cache.out.row(i);
        let gy = dot(g.row(i), y);
        let n = cache.norms[i];
        for (gv, yv) in g.row_mut(i).iter_mut().zip(y) {
            *gv = (*gv - gy * yv) / n;
        }
    }
    for l in (0..params.layers.len()).rev() {
        let gl = &mut grads.layers[l];
        gl.weight = g.t_matmul(&cache.inputs[l]);
        for r in g.iter_rows() {
            for (b, v) in gl.bias.iter_mut().zip(r) {
                *b += v;
            }
        }
        if l > 0 {
            let mut ga = g.matmul(&params.layers[l].weight);
            for (gv, &z) in ga.data_mut().iter_mut().zip(cache.pre[l - 1].data()) {
                *gv *= params.activation.derivative(z);
            }
            g = ga;
        }
    }
    grads
}

/// Largest relative error between `backward` and central differences of
/// `Σ upstream ⊙ forward(x)` over every parameter.
pub fn check_encoder_gradient(
    params: &EncoderParams,
    x: &Matrix,
    upstream: &Matrix,
    h: f64,
) -> Result<f64> {
    let objective = |p: &EncoderParams| -> Result<f64> {
        let (y, _) = forward(p, x)?;
        Ok(dot(y.data(), upstream.data()))
    };
    let (_, cache) = forward(params, x)?;
    let grads = backward(params, &cache, upstream);
    let analytic: Vec<f64> = grads.blocks().concat();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let mut idx = 0;
    for b in 0..params.blocks().len() {
        for k in 0..params.blocks()[b].len() {
            let orig = params.blocks()[b][k];
            probe.blocks_mut()[b][k] = orig + h;
            let up = objective(&probe)?;
            probe.blocks_mut()[b][k] = orig - h;
            let down = objective(&probe)?;
            probe.blocks_mut()[b][k] = orig;
            worst = worst.max(relative_error(analytic[idx], (up - down) / (2.0 * h)));
            idx += 1;
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// One update of every block; `params[i]` and `grads[i]` must keep the
    /// same order across calls.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len());
        if self.moments.is_empty() {
            self.moments = grads.iter().map(|g| (vec![0.0; g.len()], vec![0.0; g.len()])).collect();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Symmetric InfoNCE with a learnable temperature.
    ClipLt,
    /// Symmetric InfoNCE with a fixed temperature.
    ClipFt,
    /// InfoNCE plus both gap terms.
    Ours,
    AtpOnly,
    CuOnly,
    /// InfoNCE plus ATP plus sample-level uniformity in place of CU.
    UniformBaseline,
    /// Uniformity alone up to `switch_epoch`, then fixed-temperature InfoNCE.
    SparsifyThenClip,
}

impl LossVariant {
    pub const ALL: [LossVariant; 7] = [
        LossVariant::ClipLt,
        LossVariant::ClipFt,
        LossVariant::Ours,
        LossVariant::AtpOnly,
        LossVariant::CuOnly,
        LossVariant::UniformBaseline,
        LossVariant::SparsifyThenClip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::ClipLt => "clip_lt",
            LossVariant::ClipFt => "clip_ft",
            LossVariant::Ours => "ours",
            LossVariant::AtpOnly => "atp_only",
            LossVariant::CuOnly => "cu_only",
            LossVariant::UniformBaseline => "uniform_baseline",
            LossVariant::SparsifyThenClip => "sparsify_then_clip",
        }
    }

    fn tau_mode(self, configured: TempMode) -> TempMode {
        match self {
            LossVariant::ClipLt => TempMode::Learnable,
            LossVariant::ClipFt | LossVariant::SparsifyThenClip => TempMode::Fixed,
            _ => configured,
        }
    }

    /// Objective for a 1-based `epoch`.
    pub fn loss(
        self,
        batch: &MultimodalBatch,
        cfg: &LossConfig,
        epoch: usize,
        switch_epoch: usize,
    ) -> Result<LossValueAndGrad> {
        let with = |mut base: LossValueAndGrad, w: f64, extra: Result<LossValueAndGrad>| {
            if w > 0.0 {
                base.accumulate(w, &extra?);
            }
            Ok(base)
        };
        match self {
            LossVariant::ClipLt | LossVariant::ClipFt => infonce_symmetric(batch, cfg),
            LossVariant::Ours => loss_clgap(batch, cfg),
            LossVariant::AtpOnly => with(
                infonce_symmetric(batch, cfg)?,
                cfg.lambda1,
                loss_atp(batch, cfg.anchor),
            ),
            LossVariant::CuOnly => with(infonce_symmetric(batch, cfg)?, cfg.lambda2, loss_cu(batch)),
            LossVariant::UniformBaseline => {
                let base = with(
                    infonce_symmetric(batch, cfg)?,
                    cfg.lambda1,
                    loss_atp(batch, cfg.anchor),
                )?;
                with(base, cfg.lambda2, loss_uniform_baseline(batch))
            }
            LossVariant::SparsifyThenClip => {
                if epoch <= switch_epoch {
                    loss_uniform_baseline(batch)
                } else {
                    infonce_symmetric(batch, cfg)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: LossVariant,
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub switch_epoch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: LossVariant::ClipFt,
            loss: LossConfig::default(),
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            hidden: vec![64, 64],
            embed_dim: 16,
            activation: Activation::Relu,
            switch_epoch: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if self.variant == LossVariant::SparsifyThenClip && self.switch_epoch >= self.epochs {
            return Err(Error::InvalidConfig(format!(
                "switch_epoch {} must be below epochs {}",
                self.switch_epoch, self.epochs
            )));
        }
        Ok(())
    }

    pub fn tau_mode(&self) -> TempMode {
        self.variant.tau_mode(self.loss.tau_mode)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean mini-batch loss over the epoch.
    pub loss: f64,
    pub tau: f64,
    pub report: GapReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    pub encoders: Vec<EncoderParams>,
    pub tau: f64,
    pub initial: GapReport,
    pub timeline: Vec<EpochRecord>,
    pub rng_state: RngState,
}

impl TrainOutcome {
    pub fn embed(&self, split: &Split) -> Result<MultimodalBatch> {
        embed(&self.encoders, split)
    }

    pub fn final_record(&self) -> &EpochRecord {
        self.timeline.last().expect("at least one epoch")
    }
}

pub fn embed(encoders: &[EncoderParams], split: &Split) -> Result<MultimodalBatch> {
    if encoders.len() != split.inputs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} encoders for {} modalities",
            encoders.len(),
            split.inputs.len()
        )));
    }
    let mods = encoders
        .iter()
        .zip(&split.inputs)
        .map(|(e, x)| forward(e, x).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    MultimodalBatch::new(mods, Some(split.labels.clone()))
}

/// Split used for per-epoch metrics: the probe if it has at least two
/// samples, the training set otherwise.
pub fn eval_split(data: &SyntheticDataset) -> &Split {
    if data.probe.len() >= 2 {
        &data.probe
    } else {
        &data.train
    }
}

pub fn train(data: &SyntheticDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_split = &data.train;
    let mm = train_split.inputs.len();
    if mm < 2 {
        return Err(Error::SingleModality);
    }
    infonce_pairs(mm, &cfg.loss)?;
    let n = train_split.len();
    if n < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: n });
    }
    let root = Rng::new(cfg.seed);
    let mut encoders = train_split
        .inputs
        .iter()
        .enumerate()
        .map(|(m, x)| {
            let mut sizes = vec![x.cols()];
            sizes.extend(&cfg.hidden);
            sizes.push(cfg.embed_dim);
            EncoderParams::init(&sizes, cfg.activation, &mut root.derive(100 + m as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let learnable = cfg.tau_mode() == TempMode::Learnable;
    let mut log_tau = [cfg.loss.tau.ln()];
    let mut adam = Adam::new(cfg.learning_rate);
    let mut tau_adam = Adam::new(cfg.learning_rate);
    let mut shuffle = root.derive(1);
    let eval = eval_split(data);
    let initial = GapReport::compute(&embed(&encoders, eval)?)?;
    let mut timeline = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let perm = shuffle.permutation(n);
        let mut total = 0.0;
        let mut steps = 0usize;
        for (step, idx) in perm.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let tau = log_tau[0].exp();
            let mut outs = Vec::with_capacity(mm);
            let mut caches = Vec::with_capacity(mm);
            for (e, x) in encoders.iter().zip(&train_split.inputs) {
                let (y, c) = forward(e, &x.select_rows(idx))?;
                outs.push(y);
                caches.push(c);
            }
            let batch = MultimodalBatch::new(outs, None)?;
            let loss_cfg = LossConfig { tau, ..cfg.loss.clone() };
            let loss = cfg.variant.loss(&batch, &loss_cfg, epoch, cfg.switch_epoch)?;
            if !loss.value.is_finite() {
                let last_good = TrainOutcome {
                    config: cfg.clone(),
                    encoders: encoders.clone(),
                    tau,
                    initial: initial.clone(),
                    timeline: timeline.clone(),
                    rng_state: shuffle.state(),
                };
                return Err(Error::DivergedLoss {
                    epoch,
                    step,
                    last_good: Box::new(last_good),
                });
            }
            let grads: Vec<EncoderGrads> = encoders
                .iter()
                .zip(&caches)
                .zip(&loss.grads)
                .map(|((e, c), g)| backward(e, c, g))
                .collect();
            let mut params: Vec<&mut [f64]> = encoders.iter_mut().flat_map(|e| e.blocks_mut()).collect();
            let gviews: Vec<&[f64]> = grads.iter().flat_map(|g| g.blocks()).collect();
            adam.step(&mut params, &gviews);
            if learnable {
                if let Some(dtau) = loss.tau_grad {
                    tau_adam.step(&mut [&mut log_tau[..]], &[&[dtau * tau]]);
                    log_tau[0] = log_tau[0].clamp(TAU_MIN.ln(), TAU_MAX.ln());
                }
            }
            total += loss.value;
            steps += 1;
        }
        let report = GapReport::compute(&embed(&encoders, eval)?)?;
        timeline.push(EpochRecord {
            epoch,
            loss: if steps > 0 { total / steps as f64 } else { f64::NAN },
            tau: log_tau[0].exp(),
            report,
        });
    }

    Ok(TrainOutcome {
        config: cfg.clone(),
        encoders,
        tau: log_tau[0].exp(),
        initial,
        timeline,
        rng_state: shuffle.state(),
    })
}

/// Summary of a trained space on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalMetrics {
    pub report: GapReport,
    /// Mean R@1 over both directions of every InfoNCE pair.
    pub r1: f64,
    pub v_measure: f64,
    pub knn_accuracy: f64,
}

impl FinalMetrics {
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = self.report.entries();
        out.push(("r1".into(), self.r1));
        out.push(("v_measure".into(), self.v_measure));
        out.push(("knn_accuracy".into(), self.knn_accuracy));
        out
    }
}

/// Mean recall@1 over both directions of the given modality pairs.
pub fn mean_recall_at_1(batch: &MultimodalBatch, pairs: &[(usize, usize)]) -> Result<f64> {
    let mut total = 0.0;
    for &(m, n) in pairs {
        total += recall_at_k(batch.modality(m), batch.modality(n), 1)?;
        total += recall_at_k(batch.modality(n), batch.modality(m), 1)?;
    }
    Ok(total / (2 * pairs.len()) as f64)
}

pub fn evaluate(batch: &MultimodalBatch, loss: &LossConfig, eval: &ClusterEvalConfig) -> Result<FinalMetrics> {
    let pairs = infonce_pairs(batch.num_modalities(), loss)?;
    let clusters = cluster_eval(batch, eval)?;
    Ok(FinalMetrics {
        report: GapReport::compute(batch)?,
        r1: mean_recall_at_1(batch, &pairs)?,
        v_measure: clusters.v_measure,
        knn_accuracy: clusters.knn_accuracy,
    })
}
