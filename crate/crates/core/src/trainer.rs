//! Two-stage optimization: a warm-up stage training only the extractor and
//! head on plain MAE, then the fairness-aware stage training every module
//! on the combined objective.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::Extractor;
use crate::data::{batches_by_start, NormalizationState, SampleBatch, WindowIndex, WindowedSeries};
use crate::enhancement::{enhance_with, CompensatorySet, DEFAULT_K_C};
use crate::error::{Error, Result};
use crate::metrics::{mean, population_variance};
use crate::model::{batch_layout, FairStg, InferenceOptions};
use crate::objectives::{
    combine, cost_sensitive_weights, fairness_loss_var, per_sample_mae, per_sample_mae_var, reweighted_loss_var,
    LossBreakdown, LossWeights, BCE_EPS,
};
use crate::optim::{clip_global_norm, global_norm, Adam};
use crate::params::ParamStore;
use crate::recognizer::{labels_as_f64, partition_easy_challenging, EASY_FRACTION};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Ablation {
    /// Recognizer, enhancement and the full objective.
    #[default]
    Full,
    /// No feature enhancement; reweighted, variance and BCE terms remain.
    NoFe,
    /// Enhancement kept; objective reduced to plain MAE plus BCE.
    NoFo,
    /// No fairness stage at all: plain MAE training of extractor and head.
    Baseline,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoFe => "no_fe",
            Self::NoFo => "no_fo",
            Self::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "full" => Self::Full,
            "no_fe" => Self::NoFe,
            "no_fo" => Self::NoFo,
            "baseline" => Self::Baseline,
            _ => return None,
        })
    }

    pub fn enhances(self) -> bool {
        matches!(self, Self::Full | Self::NoFo)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Warmup,
    Fairness,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Warmup => "warmup",
            Self::Fairness => "fairness",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub grad_clip: f64,
    /// Target samples per batch; batches hold `max(1, batch_size / N)` whole
    /// window starts.
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub seed: u64,
    pub mu: LossWeights,
    pub k_c: usize,
    pub easy_fraction: f64,
    pub omega: f64,
    pub threshold: f64,
    pub patience: usize,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            grad_clip: 5.0,
            batch_size: 64,
            warmup_epochs: 30,
            total_epochs: 100,
            seed: 0,
            mu: LossWeights::new(1.0, 0.5, 0.1),
            k_c: DEFAULT_K_C,
            easy_fraction: EASY_FRACTION,
            omega: 4.0,
            threshold: 0.5,
            patience: 15,
            ablation: Ablation::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.total_epochs == 0 {
            return bad("total_epochs must be positive");
        }
        if self.ablation != Ablation::Baseline && self.warmup_epochs >= self.total_epochs {
            return bad("warmup_epochs must be smaller than total_epochs");
        }
        if !(self.easy_fraction > 0.0 && self.easy_fraction <= 1.0) {
            return bad("easy_fraction must lie in (0, 1]");
        }
        if !(self.omega > 0.0) {
            return bad("omega must be positive");
        }
        self.mu.validate()
    }

    pub fn stage_at(&self, epoch: usize) -> Stage {
        if self.ablation == Ablation::Baseline || epoch < self.warmup_epochs {
            Stage::Warmup
        } else {
            Stage::Fairness
        }
    }

    /// What a single step computes in `stage`.
    pub fn step_settings(&self, stage: Stage) -> StepSettings {
        match stage {
            Stage::Warmup => StepSettings::warmup(),
            Stage::Fairness => {
                let (weights, reweight, enhance) = match self.ablation {
                    Ablation::Full => (self.mu, true, true),
                    Ablation::NoFe => (self.mu, true, false),
                    Ablation::NoFo => (LossWeights::new(self.mu.reweighted, 0.0, self.mu.self_supervised), false, true),
                    Ablation::Baseline => return StepSettings::warmup(),
                };
                StepSettings {
                    weights,
                    reweight,
                    recognize: true,
                    enhance,
                    easy_fraction: self.easy_fraction,
                    omega: self.omega,
                    k_c: self.k_c,
                }
            }
        }
    }

    /// Inference options matching a model trained up to `stage`.
    pub fn inference(&self, stage: Stage) -> InferenceOptions {
        InferenceOptions {
            enhance: stage == Stage::Fairness && self.ablation.enhances(),
            with_recognizer: true,
            threshold: self.threshold,
            k_c: self.k_c,
        }
    }
}

/// Per-step switches of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSettings {
    pub weights: LossWeights,
    /// Cost-sensitive `λ`; `λ ≡ 1` otherwise.
    pub reweight: bool,
    /// Run the recognizer (needed for the BCE term and for enhancement).
    pub recognize: bool,
    pub enhance: bool,
    pub easy_fraction: f64,
    pub omega: f64,
    pub k_c: usize,
}

impl StepSettings {
    pub fn warmup() -> Self {
        Self {
            weights: LossWeights::WARMUP,
            reweight: false,
            recognize: false,
            enhance: false,
            easy_fraction: EASY_FRACTION,
            omega: 4.0,
            k_c: DEFAULT_K_C,
        }
    }
}

/// Discrete and detached quantities of an objective, held fixed.
///
/// Labels, retrieval and `λ` are piecewise-constant or detached functions
/// of the parameters; fixing them makes the recorded objective a smooth
/// function suitable for finite-difference checks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Frozen {
    pub labels: Option<Vec<bool>>,
    pub compensatory: Option<CompensatorySet>,
    pub lambda: Option<Vec<f64>>,
}

/// Recorded objective of one batch.
pub struct Objective {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Unweighted mean of the final per-sample errors.
    pub mae: f64,
    /// Labels derived from the un-enhanced errors (`true` = easy).
    pub labels: Vec<bool>,
    pub lambda: Vec<f64>,
    pub z_hat: Option<Vec<f64>>,
    pub compensatory: CompensatorySet,
    pub gate: Option<Vec<f64>>,
}

impl Objective {
    /// The quantities to hold fixed when replaying this objective.
    pub fn frozen(&self) -> Frozen {
        Frozen {
            labels: Some(self.labels.clone()),
            compensatory: Some(self.compensatory.clone()),
            lambda: Some(self.lambda.clone()),
        }
    }
}

/// Records the training objective of `batch` on `g`.
///
/// Difficulty labels come from the errors of the un-enhanced forward pass;
/// enhancement (when enabled) then mixes representations of the
/// challenging rows before the head produces the final forecast.
pub fn objective<E: Extractor>(
    g: &mut Graph,
    model: &FairStg<E>,
    store: &ParamStore,
    batch: &SampleBatch,
    norm: &NormalizationState,
    settings: &StepSettings,
) -> Result<Objective> {
    objective_with(g, model, store, batch, norm, settings, &Frozen::default())
}

/// [`objective`] with some quantities held at given values.
pub fn objective_with<E: Extractor>(
    g: &mut Graph,
    model: &FairStg<E>,
    store: &ParamStore,
    batch: &SampleBatch,
    norm: &NormalizationState,
    settings: &StepSettings,
    frozen: &Frozen,
) -> Result<Objective> {
    let layout = batch_layout(batch);
    let x_st = model.features(g, store, batch, &layout)?;
    let plain = model.head.forward(g, store, x_st, norm)?;
    let truth = g.constant(batch.targets.clone());
    let labels = match &frozen.labels {
        Some(l) => l.clone(),
        None => {
            let plain_errors = per_sample_mae(g.value(plain), &batch.targets)?;
            partition_easy_challenging(&plain_errors, settings.easy_fraction)
        }
    };

    let z_hat = if settings.recognize {
        Some(model.difficulty(g, store, x_st, batch, norm, &layout)?)
    } else {
        None
    };

    let (pred, compensatory, gate) = if settings.enhance {
        let set = match &frozen.compensatory {
            Some(c) => c.clone(),
            None => CompensatorySet::build(g.value(x_st), &labels, settings.k_c),
        };
        let enh = enhance_with(g, store, &model.gate, x_st, &labels, set)?;
        let pred = if enh.compensatory.is_empty() {
            plain
        } else {
            model.head.forward(g, store, enh.x_com, norm)?
        };
        let gate = enh.gate.map(|a| g.value(a).as_slice().to_vec());
        (pred, enh.compensatory, gate)
    } else {
        (plain, CompensatorySet::default(), None)
    };

    let errors = per_sample_mae_var(g, pred, truth)?;
    let lambda = match &frozen.lambda {
        Some(l) => l.clone(),
        None if settings.reweight => cost_sensitive_weights(g.value(errors).as_slice()),
        None => alloc::vec![1.0; batch.len()],
    };
    let l_r = reweighted_loss_var(g, errors, &lambda)?;
    let l_f = fairness_loss_var(g, errors)?;
    let w = settings.weights;
    let mut total = g.scale(l_r, w.reweighted);
    if w.fairness != 0.0 {
        let t = g.scale(l_f, w.fairness);
        total = g.add(total, t)?;
    }
    let mut l_s_value = 0.0;
    if let Some(zh) = z_hat {
        let l_s = g.weighted_bce(zh, &labels_as_f64(&labels), settings.omega, BCE_EPS)?;
        l_s_value = g.scalar(l_s);
        if w.self_supervised != 0.0 {
            let t = g.scale(l_s, w.self_supervised);
            total = g.add(total, t)?;
        }
    }
    let breakdown = combine(g.scalar(l_r), g.scalar(l_f), l_s_value, w);
    let mae = mean(g.value(errors).as_slice());
    Ok(Objective {
        total,
        breakdown,
        mae,
        labels,
        lambda,
        z_hat: z_hat.map(|v| g.value(v).as_slice().to_vec()),
        compensatory,
        gate,
    })
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub mae: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub compensatory: CompensatorySet,
    pub gate: Option<Vec<f64>>,
}

/// Mutable training state. Cloning it forks a run: a clone continued
/// under another config shares the history up to the fork.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub stage: Stage,
    /// Next epoch to run.
    pub epoch: usize,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub best_val_mae: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_params: Option<ParamStore>,
    pub transition_epoch: Option<usize>,
    pub epochs_since_best: usize,
    pub stopped: bool,
}

impl TrainState {
    pub fn new(params: ParamStore, config: &TrainConfig) -> Self {
        Self {
            stage: Stage::Warmup,
            epoch: 0,
            params,
            optimizer: Adam::new(config.lr),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            best_val_mae: None,
            best_epoch: None,
            best_params: None,
            transition_epoch: None,
            epochs_since_best: 0,
            stopped: false,
        }
    }
}

/// Forward, backward, clip and Adam update on one batch.
pub fn train_step<E: Extractor>(
    state: &mut TrainState,
    model: &FairStg<E>,
    config: &TrainConfig,
    batch: &SampleBatch,
    norm: &NormalizationState,
    batch_index: usize,
) -> Result<StepReport> {
    let settings = config.step_settings(state.stage);
    let mut g = Graph::new();
    let obj = objective(&mut g, model, &state.params, batch, norm, &settings)?;
    if !obj.breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: state.epoch,
            batch: batch_index,
            detail: format!(
                "l_r={} l_f={} l_s={} rows={} first_start={:?}",
                obj.breakdown.reweighted,
                obj.breakdown.fairness,
                obj.breakdown.self_supervised,
                batch.len(),
                batch.window_start.first()
            ),
        });
    }
    let mut grads = g.backward(obj.total).into_params();
    if state.stage == Stage::Warmup {
        grads.retain(|(id, _)| matches!(state.params.namespace(*id), "backbone" | "head"));
    }
    let grad_norm = clip_global_norm(&mut grads, config.grad_clip);
    let clipped_norm = global_norm(&grads);
    state.optimizer.update(&mut state.params, &grads);
    Ok(StepReport {
        loss: obj.breakdown,
        mae: obj.mae,
        grad_norm,
        clipped_norm,
        compensatory: obj.compensatory,
        gate: obj.gate,
    })
}

/// Summary of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    /// Batch-averaged loss terms.
    pub loss: LossBreakdown,
    pub train_mae: f64,
    pub val_mae: f64,
    pub val_mae_var: f64,
    pub improved: bool,
}

/// Errors of a whole split under given inference options.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitPredictions {
    pub pred: Matrix,
    pub plain: Matrix,
    pub truth: Matrix,
    pub windows: Vec<WindowIndex>,
    pub z_hat: Option<Vec<f64>>,
    /// Per-batch easy labels from the un-enhanced errors.
    pub labels: Vec<bool>,
    /// Enhancement diagnostics of every batch that mixed representations.
    pub enhanced_batches: Vec<BatchEnhancement>,
}

/// Retrieval and gate values of one inference batch; row indices are local
/// to the batch, which starts at split row `offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEnhancement {
    pub batch: usize,
    pub offset: usize,
    pub compensatory: CompensatorySet,
    pub gate: Vec<f64>,
}

/// Runs inference over `windows` in chronological batches of whole starts.
pub fn predict_split<E: Extractor>(
    model: &FairStg<E>,
    store: &ParamStore,
    series: &WindowedSeries,
    windows: &[WindowIndex],
    starts_per_batch: usize,
    options: InferenceOptions,
    easy_fraction: f64,
) -> Result<SplitPredictions> {
    let h = series.horizon;
    let batches = batches_by_start::<ChaCha8Rng>(windows, starts_per_batch, None);
    let m: usize = batches.iter().map(Vec::len).sum();
    let mut out = SplitPredictions {
        pred: Matrix::zeros(m, h),
        plain: Matrix::zeros(m, h),
        truth: Matrix::zeros(m, h),
        windows: Vec::with_capacity(m),
        z_hat: options.with_recognizer.then(Vec::new),
        labels: Vec::with_capacity(m),
        enhanced_batches: Vec::new(),
    };
    let mut row = 0;
    for (b, wins) in batches.iter().enumerate() {
        let batch = series.batch(wins);
        let p = model.predict(store, &batch, &series.norm, options)?;
        for i in 0..batch.len() {
            out.pred.row_mut(row + i).copy_from_slice(p.pred.row(i));
            out.plain.row_mut(row + i).copy_from_slice(p.plain.row(i));
            out.truth.row_mut(row + i).copy_from_slice(batch.targets.row(i));
        }
        if let (Some(all), Some(z)) = (out.z_hat.as_mut(), p.z_hat) {
            all.extend(z);
        }
        let errs = per_sample_mae(&p.plain, &batch.targets)?;
        out.labels.extend(partition_easy_challenging(&errs, easy_fraction));
        out.windows.extend_from_slice(wins);
        if let Some(gate) = p.gate {
            out.enhanced_batches.push(BatchEnhancement {
                batch: b,
                offset: row,
                compensatory: p.compensatory,
                gate,
            });
        }
        row += batch.len();
    }
    Ok(out)
}

/// Result of [`Trainer::fit`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best validation snapshot, rounded to `f32` storage precision.
    pub params: ParamStore,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    /// Stage of the selected snapshot.
    pub stage: Stage,
    pub transition_epoch: Option<usize>,
    pub epochs_run: usize,
}

pub enum TrainEvent<'r> {
    Step {
        epoch: usize,
        batch: usize,
        report: &'r StepReport,
    },
    Epoch(&'r EpochRecord),
}

pub struct Trainer<'a, E: Extractor> {
    pub model: &'a FairStg<E>,
    pub config: TrainConfig,
    pub state: TrainState,
}

impl<'a, E: Extractor> Trainer<'a, E> {
    pub fn new(model: &'a FairStg<E>, params: ParamStore, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = TrainState::new(params, &config);
        Ok(Self { model, config, state })
    }

    /// Continues from an existing state, e.g. one forked after warm-up.
    pub fn resume(model: &'a FairStg<E>, state: TrainState, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { model, config, state })
    }

    pub fn starts_per_batch(&self, num_nodes: usize) -> usize {
        (self.config.batch_size / num_nodes.max(1)).max(1)
    }

    /// Full two-stage loop followed by [`Trainer::finish`].
    pub fn fit(
        &mut self,
        series: &WindowedSeries,
        train: &[WindowIndex],
        val: &[WindowIndex],
        observer: &mut dyn FnMut(TrainEvent<'_>),
    ) -> Result<TrainOutcome> {
        self.run_until(self.config.total_epochs, series, train, val, observer)?;
        Ok(self.finish())
    }

    /// Runs epochs until `until` (exclusive), the epoch budget, or early
    /// stopping, whichever comes first.
    ///
    /// The best validation snapshot is tracked per stage: entering the
    /// fairness stage resets it, so the selected model always comes from
    /// the last stage reached. Patience only applies in the fairness stage.
    pub fn run_until(
        &mut self,
        until: usize,
        series: &WindowedSeries,
        train: &[WindowIndex],
        val: &[WindowIndex],
        observer: &mut dyn FnMut(TrainEvent<'_>),
    ) -> Result<()> {
        let spb = self.starts_per_batch(series.num_nodes());
        while !self.state.stopped && self.state.epoch < until.min(self.config.total_epochs) {
            let epoch = self.state.epoch;
            let stage = self.config.stage_at(epoch);
            if stage != self.state.stage {
                self.state.stage = stage;
                self.state.transition_epoch = Some(epoch);
                self.state.best_val_mae = None;
                self.state.best_params = None;
                self.state.best_epoch = None;
                self.state.epochs_since_best = 0;
            }
            let settings = self.config.step_settings(stage);

            let batches = batches_by_start(train, spb, Some(&mut self.state.rng));
            let mut sums = [0.0; 5];
            for (bi, wins) in batches.iter().enumerate() {
                let batch = series.batch(wins);
                let report = train_step(&mut self.state, self.model, &self.config, &batch, &series.norm, bi)?;
                let l = report.loss;
                for (s, v) in sums.iter_mut().zip([l.reweighted, l.fairness, l.self_supervised, l.total, report.mae]) {
                    *s += v;
                }
                observer(TrainEvent::Step {
                    epoch,
                    batch: bi,
                    report: &report,
                });
            }
            let nb = batches.len().max(1) as f64;
            let loss = LossBreakdown {
                total: sums[3] / nb,
                ..combine(sums[0] / nb, sums[1] / nb, sums[2] / nb, settings.weights)
            };

            let preds = predict_split(
                self.model,
                &self.state.params,
                series,
                val,
                spb,
                self.config.inference(stage),
                self.config.easy_fraction,
            )?;
            let errs = per_sample_mae(&preds.pred, &preds.truth)?;
            let val_mae = mean(&errs);
            let val_mae_var = population_variance(&errs);
            let improved = self.state.best_val_mae.is_none_or(|b| val_mae < b);
            if improved {
                self.state.best_val_mae = Some(val_mae);
                self.state.best_epoch = Some(epoch);
                self.state.best_params = Some(self.state.params.clone());
                self.state.epochs_since_best = 0;
            } else {
                self.state.epochs_since_best += 1;
            }
            self.state.epoch += 1;
            let record = EpochRecord {
                epoch,
                stage,
                loss,
                train_mae: sums[4] / nb,
                val_mae,
                val_mae_var,
                improved,
            };
            observer(TrainEvent::Epoch(&record));
            if stage == Stage::Fairness && self.state.epochs_since_best >= self.config.patience {
                self.state.stopped = true;
            }
        }
        Ok(())
    }

    /// The selected snapshot, rounded to storage precision.
    pub fn finish(&self) -> TrainOutcome {
        let mut params = self
            .state
            .best_params
            .clone()
            .unwrap_or_else(|| self.state.params.clone());
        params.round_to_f32();
        TrainOutcome {
            params,
            best_epoch: self.state.best_epoch.unwrap_or(0),
            best_val_mae: self.state.best_val_mae.unwrap_or(f64::NAN),
            stage: self.state.stage,
            transition_epoch: self.state.transition_epoch,
            epochs_run: self.state.epoch,
        }
    }
}
