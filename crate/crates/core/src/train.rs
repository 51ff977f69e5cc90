//! The training loop: momentum SGD composed with the configured
//! orthogonality mechanism and norm variant, the two-epoch geometric
//! learning-rate schedule, and evaluation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DatasetHandle;
use crate::net::{
    backward, forward, Batch, FeatureShape, Gradients, LayerGrads, LayerParams, NetError,
    NetworkSpec, ParamSet, TraceDetail,
};
use crate::norm::{apply_running_update, bbn_clamp, Mode, NormError, NormVariant};
use crate::opt::{
    soft_ortho_penalty, srip_penalty, stiefel_retract, stiefel_tangent_project, svb_project,
    tangency_residual, OptError, OrthoMode,
};
use crate::rng::Stream;
use crate::Mat;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: {source}")]
    Diverged {
        step: usize,
        #[source]
        source: NetError,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    /// Geometric decay applied once per two-epoch block.
    Geometric,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub schedule: ScheduleKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ortho: OrthoMode,
    pub seed: u64,
    /// Evaluate every this many epochs (and always at the end).
    pub eval_every: usize,
    /// Random +-2px shifts of image inputs during training.
    pub shift_augment: bool,
    /// Cap on the train-split subsample used for the train-error metric.
    pub eval_train_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 128,
            lr_start: 0.1,
            lr_end: 0.001,
            schedule: ScheduleKind::Geometric,
            momentum: 0.9,
            weight_decay: 1e-4,
            ortho: OrthoMode::None,
            seed: 0,
            eval_every: 1,
            shift_augment: false,
            eval_train_cap: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, norm_variant: Option<NormVariant>) -> Result<(), TrainError> {
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(TrainError::Config(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.batch_size < 2 && norm_variant.is_some() {
            return Err(TrainError::Config(
                "batch size must be >= 2 when a norm layer is present".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        self.ortho.validate()?;
        Ok(())
    }
}

/// Learning rate for `epoch` (0-based): geometric decay once per two-epoch
/// block, hitting exactly `lr_end` in the final block.
pub fn lr_schedule(config: &TrainConfig, epoch: usize) -> f64 {
    assert!(epoch < config.epochs.max(1), "epoch out of range");
    match config.schedule {
        ScheduleKind::Constant => config.lr_start,
        ScheduleKind::Geometric => {
            let blocks = (config.epochs.saturating_sub(1) / 2) as f64;
            if blocks == 0.0 || config.lr_start == config.lr_end {
                return config.lr_start;
            }
            let t = (epoch / 2) as f64 / blocks;
            config.lr_start * (config.lr_end / config.lr_start).powf(t)
        }
    }
}

/// Per-parameter velocity buffers plus the momentum/decay coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerVelocity {
    Weight {
        vw: Mat,
        vb: Vec<f64>,
    },
    Norm {
        v_gamma: Vec<f64>,
        v_beta: Vec<f64>,
        v_upsilon_bar: f64,
    },
    Stateless,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumState {
    pub layers: Vec<LayerVelocity>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl MomentumState {
    pub fn new(params: &ParamSet, momentum: f64, weight_decay: f64) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|p| match p {
                LayerParams::Weight { w, b } => LayerVelocity::Weight {
                    vw: Mat::zeros(w.rows(), w.cols()),
                    vb: vec![0.0; b.len()],
                },
                LayerParams::Norm(state) => LayerVelocity::Norm {
                    v_gamma: vec![0.0; state.neurons()],
                    v_beta: vec![0.0; state.neurons()],
                    v_upsilon_bar: 0.0,
                },
                LayerParams::Stateless => LayerVelocity::Stateless,
            })
            .collect();
        Self {
            layers,
            momentum,
            weight_decay,
        }
    }
}

/// Diagnostics of one optimizer step.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    /// Total penalty value added by Soft/SRIP modes.
    pub penalty: f64,
    /// Largest `||W^T Z + Z^T W||_F` over this step's tangent projections
    /// (Stiefel mode only).
    pub max_tangency_residual: f64,
    /// Whether an SVB projection fired on this step.
    pub svb_applied: bool,
    /// False if any SRIP power iteration hit its budget.
    pub srip_converged: bool,
}

/// One SGD-with-momentum update of every parameter, with the configured
/// orthogonality mechanism applied to the weight matrices.
///
/// `step_index` is the 1-based count of completed optimizer steps including
/// this one; SVB fires when it is a multiple of the configured period.
/// Weight decay applies to weight matrices only (never to biases or norm
/// parameters, and never in Stiefel mode, where it would pull the iterate
/// off the manifold).
pub fn sgd_momentum_step(
    params: &mut ParamSet,
    grads: &Gradients,
    state: &mut MomentumState,
    lr: f64,
    ortho: &OrthoMode,
    step_index: usize,
) -> Result<StepStats, TrainError> {
    let mut stats = StepStats {
        srip_converged: true,
        ..StepStats::default()
    };
    let m = state.momentum;
    let wd = state.weight_decay;

    for (idx, (p, v)) in params
        .layers
        .iter_mut()
        .zip(state.layers.iter_mut())
        .enumerate()
    {
        match (p, v, &grads.layers[idx]) {
            (
                LayerParams::Weight { w, b },
                LayerVelocity::Weight { vw, vb },
                LayerGrads::Weight { dw, db },
            ) => {
                // Bias: plain momentum SGD in every mode.
                for i in 0..b.len() {
                    vb[i] = m * vb[i] + db[i];
                    b[i] -= lr * vb[i];
                }
                match ortho {
                    OrthoMode::Stiefel => {
                        stiefel_update(w, vw, dw, m, lr, &mut stats)?;
                    }
                    mode => {
                        let mut g = dw.clone();
                        if wd != 0.0 {
                            g.axpy(wd, w);
                        }
                        match mode {
                            OrthoMode::Soft { lambda } => {
                                let (value, grad) = soft_ortho_penalty(w, *lambda);
                                stats.penalty += value;
                                g.axpy(1.0, &grad);
                            }
                            OrthoMode::Srip { kappa, pi_iters } => {
                                let pen = srip_penalty(w, *kappa, *pi_iters);
                                stats.penalty += pen.value;
                                stats.srip_converged &= pen.converged;
                                g.axpy(1.0, &pen.grad);
                            }
                            _ => {}
                        }
                        vw.scale_assign(m);
                        vw.axpy(1.0, &g);
                        w.axpy(-lr, vw);
                        if let OrthoMode::Svb { epsilon, period } = mode {
                            if step_index % period == 0 {
                                *w = svb_project(w, *epsilon)?;
                                stats.svb_applied = true;
                            }
                        }
                    }
                }
            }
            (
                LayerParams::Norm(norm),
                LayerVelocity::Norm {
                    v_gamma,
                    v_beta,
                    v_upsilon_bar,
                },
                LayerGrads::Norm {
                    d_gamma,
                    d_beta,
                    d_upsilon_bar,
                },
            ) => {
                for i in 0..norm.neurons() {
                    v_gamma[i] = m * v_gamma[i] + d_gamma[i];
                    norm.gamma[i] -= lr * v_gamma[i];
                    v_beta[i] = m * v_beta[i] + d_beta[i];
                    norm.beta[i] -= lr * v_beta[i];
                }
                *v_upsilon_bar = m * *v_upsilon_bar + d_upsilon_bar;
                norm.upsilon_bar -= lr * *v_upsilon_bar;
            }
            (LayerParams::Stateless, LayerVelocity::Stateless, LayerGrads::Stateless) => {}
            _ => {
                return Err(TrainError::Config(format!(
                    "layer {idx}: parameter/velocity/gradient kinds disagree"
                )))
            }
        }
    }
    Ok(stats)
}

/// Stiefel-mode update of one weight matrix: accumulate Euclidean momentum,
/// project onto the tangent space at the current point, retract. Wide
/// matrices are optimized through their transpose.
fn stiefel_update(
    w: &mut Mat,
    vw: &mut Mat,
    dw: &Mat,
    m: f64,
    lr: f64,
    stats: &mut StepStats,
) -> Result<(), TrainError> {
    vw.scale_assign(m);
    vw.axpy(1.0, dw);
    let wide = w.rows() < w.cols();
    let (wt, vt) = if wide {
        (w.transpose(), vw.transpose())
    } else {
        (w.clone(), vw.clone())
    };
    let omega = stiefel_tangent_project(&wt, &vt)?;
    stats.max_tangency_residual = stats
        .max_tangency_residual
        .max(tangency_residual(&wt, &omega));
    let next = stiefel_retract(&wt, &omega.scale(-lr))?;
    *w = if wide { next.transpose() } else { next };
    Ok(())
}

impl Mat {
    fn scale_assign(&mut self, factor: f64) {
        for v in self.data_mut() {
            *v *= factor;
        }
    }
}

/// One evaluation record. `wall_time_s` is the only nondeterministic field;
/// everything else is bit-reproducible for a fixed seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_error: f64,
    pub test_error: Option<f64>,
    pub wall_time_s: f64,
    pub penalty: Option<f64>,
    pub prod_sigma_max: Option<f64>,
    pub prod_sigma_min: Option<f64>,
}

impl MetricsRecord {
    /// The deterministic projection used by reproducibility checks.
    pub fn deterministic_key(&self) -> (usize, usize, u64, u64, Option<u64>) {
        (
            self.step,
            self.epoch,
            self.train_loss.to_bits(),
            self.train_error.to_bits(),
            self.test_error.map(f64::to_bits),
        )
    }
}

/// Owns everything a training run mutates; checkpointable between epochs.
pub struct Trainer {
    pub net: NetworkSpec,
    pub params: ParamSet,
    pub momentum: MomentumState,
    pub config: TrainConfig,
    /// Completed optimizer steps.
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    /// Shuffle/augmentation stream; its exact position is checkpointed.
    pub rng: Stream,
    /// SVB period resolved to steps (from the mode, or epochs converted by
    /// the caller).
    pub svb_period_steps: usize,
    /// Largest tangency residual seen over the whole run (Stiefel mode).
    pub max_tangency_residual: f64,
    /// Largest post-clamp BBN band violation seen over the whole run.
    pub max_bbn_residual: f64,
}

impl Trainer {
    pub fn new(
        net: NetworkSpec,
        params: ParamSet,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        let has_norm = net
            .layers
            .iter()
            .any(|l| matches!(l.kind, crate::net::LayerKind::Norm));
        config.validate(has_norm.then_some(net.norm_variant))?;
        let momentum = MomentumState::new(&params, config.momentum, config.weight_decay);
        let svb_period_steps = match config.ortho {
            OrthoMode::Svb { period, .. } => period,
            _ => 1,
        };
        let rng = Stream::substream(config.seed, 1);
        Ok(Self {
            net,
            params,
            momentum,
            config,
            step: 0,
            epoch: 0,
            rng,
            svb_period_steps,
            max_tangency_residual: 0.0,
            max_bbn_residual: 0.0,
        })
    }

    /// Forward/backward/update on one batch; fires the per-step norm-state
    /// bookkeeping (running averages, then the BBN clamp).
    pub fn step_batch(&mut self, batch: &Batch) -> Result<(f64, StepStats), TrainError> {
        let lr = lr_schedule(&self.config, self.epoch.min(self.config.epochs.saturating_sub(1)));
        let (loss, _, trace) =
            forward(&self.net, &self.params, batch, Mode::Train).map_err(|source| {
                TrainError::Diverged {
                    step: self.step,
                    source,
                }
            })?;
        let grads = backward(&self.net, &self.params, batch, &trace)?;
        let ortho = match self.config.ortho {
            OrthoMode::Svb { epsilon, .. } => OrthoMode::Svb {
                epsilon,
                period: self.svb_period_steps,
            },
            other => other,
        };
        let stats = sgd_momentum_step(
            &mut self.params,
            &grads,
            &mut self.momentum,
            lr,
            &ortho,
            self.step + 1,
        )?;
        self.step += 1;
        self.max_tangency_residual = self.max_tangency_residual.max(stats.max_tangency_residual);

        // Algorithm-2 ordering: SGD update, then running averages, then the
        // bounded-BN clamp.
        for (idx, p) in self.params.layers.iter_mut().enumerate() {
            if let LayerParams::Norm(state) = p {
                if let TraceDetail::Norm { cache } = &trace.layers[idx].detail {
                    apply_running_update(state, cache);
                }
                if matches!(state.variant, NormVariant::Bbn { .. }) {
                    let report = bbn_clamp(state)?;
                    self.max_bbn_residual = self.max_bbn_residual.max(report.residual);
                }
            }
        }
        Ok((loss, stats))
    }

    /// Runs one epoch of shuffled mini-batch SGD; returns the mean batch
    /// loss. Batches that cannot fill `batch_size` are dropped so norm
    /// statistics always pool the same count.
    pub fn run_epoch(&mut self, data: &DatasetHandle) -> Result<f64, TrainError> {
        let n = data.len();
        let b = self.config.batch_size;
        if n < b {
            return Err(TrainError::Config(format!(
                "dataset of {n} examples cannot fill a batch of {b}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        self.rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks_exact(b) {
            let (inputs, labels) = data.gather(chunk);
            let inputs = if self.config.shift_augment {
                self.shift_batch(inputs, data.shape)
            } else {
                inputs
            };
            let (loss, _) = self.step_batch(&Batch { inputs, labels })?;
            total += loss;
            batches += 1;
        }
        self.epoch += 1;
        Ok(total / batches.max(1) as f64)
    }

    /// Random per-sample +-2px shifts (zero fill) for image-shaped inputs.
    fn shift_batch(&mut self, inputs: Mat, shape: FeatureShape) -> Mat {
        let FeatureShape::Image {
            channels,
            height,
            width,
        } = shape
        else {
            return inputs;
        };
        let mut out = Mat::zeros(inputs.rows(), inputs.cols());
        for s in 0..inputs.rows() {
            let dy = self.rng.bounded(5) as isize - 2;
            let dx = self.rng.bounded(5) as isize - 2;
            let src = inputs.row(s);
            let dst = out.row_mut(s);
            for c in 0..channels {
                for y in 0..height as isize {
                    let sy = y - dy;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    for x in 0..width as isize {
                        let sx = x - dx;
                        if sx < 0 || sx >= width as isize {
                            continue;
                        }
                        dst[(c * height + y as usize) * width + x as usize] =
                            src[(c * height + sy as usize) * width + sx as usize];
                    }
                }
            }
        }
        out
    }
}

/// Mean classification error in percent; argmax over logits with ties
/// broken toward the lowest class index.
pub fn evaluate(
    net: &NetworkSpec,
    params: &ParamSet,
    data: &DatasetHandle,
) -> Result<f64, TrainError> {
    let n = data.len();
    if n == 0 {
        return Err(TrainError::Config("cannot evaluate an empty dataset".into()));
    }
    let chunk = 256;
    let mut wrong = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let (inputs, labels) = data.gather(&indices);
        let batch = Batch { inputs, labels };
        let (_, logits, _) = forward(net, params, &batch, Mode::Infer)?;
        for (b, &label) in batch.labels.iter().enumerate() {
            let mut best = 0usize;
            let mut best_v = logits[(0, b)];
            for c in 1..logits.rows() {
                if logits[(c, b)] > best_v {
                    best_v = logits[(c, b)];
                    best = c;
                }
            }
            if best != label {
                wrong += 1;
            }
        }
        start = end;
    }
    Ok(100.0 * wrong as f64 / n as f64)
}

/// Spectral summary used in metrics: products over weighted layers of the
/// largest/smallest nonzero singular values of the *effective* inference
/// transforms (norm scales folded in).
pub fn spectral_products(net: &NetworkSpec, params: &ParamSet) -> (f64, f64) {
    let report = crate::probe::layer_spectra(net, params);
    (report.prod_sigma_max, report.prod_sigma_min)
}

/// Builds one metrics record at the trainer's current position.
pub fn make_record(
    trainer: &Trainer,
    train: &DatasetHandle,
    test: Option<&DatasetHandle>,
    loss: f64,
    wall_time_s: f64,
) -> Result<MetricsRecord, TrainError> {
    let train_sub = train.take(trainer.config.eval_train_cap);
    let train_error = evaluate(&trainer.net, &trainer.params, &train_sub)?;
    let test_error = match test {
        Some(t) => Some(evaluate(&trainer.net, &trainer.params, t)?),
        None => None,
    };
    Ok(MetricsRecord {
        step: trainer.step,
        epoch: trainer.epoch,
        train_loss: loss,
        train_error,
        test_error,
        wall_time_s,
        penalty: None,
        prod_sigma_max: None,
        prod_sigma_min: None,
    })
}

/// Mean inference loss over the capped train subsample; used for the
/// initial (step-0) metrics record.
pub fn initial_loss(trainer: &Trainer, train: &DatasetHandle) -> Result<f64, TrainError> {
    let init_sub = train.take(trainer.config.eval_train_cap);
    let all: Vec<usize> = (0..init_sub.len()).collect();
    let (inputs, labels) = init_sub.gather(&all);
    let (loss, _, _) = forward(
        &trainer.net,
        &trainer.params,
        &Batch { inputs, labels },
        Mode::Infer,
    )?;
    Ok(loss)
}

/// Runs the trainer from its current epoch to `config.epochs`, evaluating
/// on the configured cadence (and always at the final epoch). `on_record`
/// sees each record as it is produced; `on_epoch_end` runs after every
/// epoch (the checkpointing hook).
pub fn run_epochs(
    trainer: &mut Trainer,
    train: &DatasetHandle,
    test: Option<&DatasetHandle>,
    until_epoch: Option<usize>,
    mut on_record: impl FnMut(&MetricsRecord),
    mut on_epoch_end: impl FnMut(&Trainer) -> Result<(), TrainError>,
) -> Result<Vec<MetricsRecord>, TrainError> {
    let mut records = Vec::new();
    let t0 = std::time::Instant::now();
    let epochs = trainer.config.epochs;
    // An early stop truncates the run but never the schedule, which is
    // always driven by the configured epoch count.
    let stop = until_epoch.unwrap_or(epochs).min(epochs);
    let cadence = trainer.config.eval_every.max(1);
    while trainer.epoch < stop {
        let loss = trainer.run_epoch(train)?;
        let at = trainer.epoch;
        if at % cadence == 0 || at == epochs {
            let mut rec = make_record(trainer, train, test, loss, t0.elapsed().as_secs_f64())?;
            if at == epochs {
                let (pmax, pmin) = spectral_products(&trainer.net, &trainer.params);
                rec.prod_sigma_max = Some(pmax);
                rec.prod_sigma_min = Some(pmin);
            }
            on_record(&rec);
            records.push(rec);
        }
        on_epoch_end(trainer)?;
    }
    Ok(records)
}

/// Shuffled mini-batch SGD for `config.epochs` epochs, evaluating on the
/// configured cadence. Returns final parameters and the metrics stream,
/// starting with a step-0 record of the initial state.
pub fn train_loop(
    net: NetworkSpec,
    params: ParamSet,
    train: &DatasetHandle,
    test: Option<&DatasetHandle>,
    config: TrainConfig,
) -> Result<(ParamSet, Vec<MetricsRecord>), TrainError> {
    let mut trainer = Trainer::new(net, params, config)?;
    let init = initial_loss(&trainer, train)?;
    let mut records = vec![make_record(&trainer, train, test, init, 0.0)?];
    let tail = run_epochs(&mut trainer, train, test, None, |_| {}, |_| Ok(()))?;
    records.extend(tail);
    Ok((trainer.params, records))
}
