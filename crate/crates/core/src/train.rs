//! The multi-task loss, Adam, the cosine schedule and the training loop.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{observed_view, window_iter, NtsDataset, ObservedView, Split, Window};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{self, Dims, ForwardVars, ModelConfig, Sampling, WindowInput};
use crate::nn::blocks;
use crate::nn::{Gradients, ParameterStore, Tape, Var};
use crate::rng;
use crate::rwr::{self, PositionTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to the dataset's window.
    pub window: Option<usize>,
    pub stride: usize,
    pub beta: f64,
    pub gamma_link: f64,
    pub patience: usize,
    /// Drawn from entropy by the CLI when absent.
    pub seed: Option<u64>,
    pub clip_norm: f64,
    /// Restrict the link terms to observed edge slots.
    pub mask_link_loss: bool,
    /// Subsample this many shuffled windows per epoch.
    pub max_windows_per_epoch: Option<usize>,
    /// Fraction of observed feature entries hidden from the model input in
    /// each training window. Loss targets stay all observed entries.
    pub remask_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            lr_min: 0.0,
            epochs: 200,
            batch_size: 32,
            window: None,
            stride: 1,
            beta: 0.2,
            gamma_link: 0.01,
            patience: 10,
            seed: None,
            clip_norm: 5.0,
            mask_link_loss: false,
            max_windows_per_epoch: None,
            remask_prob: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr0 > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr0 {
            return bad("need 0 <= lr_min <= lr0 and lr0 > 0");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.stride == 0 {
            return bad("epochs, batch_size and stride must be positive");
        }
        if !(self.beta >= 0.0) || !(self.gamma_link >= 0.0) {
            return bad("beta and gamma_link must be >= 0");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.window.is_some_and(|w| w < 2) {
            return bad("window must be >= 2");
        }
        if !(0.0..1.0).contains(&self.remask_prob) {
            return bad("remask_prob must lie in [0,1)");
        }
        if self.max_windows_per_epoch == Some(0) {
            return bad("max_windows_per_epoch must be positive");
        }
        Ok(())
    }
}

/// `sum(mask * |label - pred|) / max(1, sum(mask))`.
pub fn masked_mae(pred: &Array2<f64>, label: &Array2<f64>, mask: &Array2<f64>) -> f64 {
    let num: f64 = ndarray::Zip::from(pred)
        .and(label)
        .and(mask)
        .fold(0.0, |acc, &p, &y, &m| acc + m * (y - p).abs());
    num / mask.sum().max(1.0)
}

/// Window-level masked MAE on the tape; `preds[t]` against step `t` of
/// `labels` and `mask`.
fn masked_mae_var(tape: &mut Tape, preds: &[Var], labels: &ndarray::Array3<f64>, mask: &ndarray::Array3<f64>) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (t, &p) in preds.iter().enumerate() {
        let m = mask.index_axis(Axis(0), t).to_owned();
        let y = tape.constant(labels.index_axis(Axis(0), t).to_owned());
        let diff = tape.sub(p, y)?;
        let a = tape.abs(diff);
        let mv = tape.constant(m);
        let masked = tape.mul(a, mv)?;
        let s = tape.sum(masked);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, s)?,
            None => s,
        });
    }
    let acc = acc.ok_or_else(|| Error::Shape("empty window".into()))?;
    Ok(tape.scale(acc, 1.0 / mask.sum().max(1.0)))
}

/// `sqrt(sum_t ||A~_t - A_t||^2)`, optionally restricted to observed slots.
fn frobenius_var(
    tape: &mut Tape,
    preds: &[Var],
    labels: &ndarray::Array3<f64>,
    mask: Option<&ndarray::Array3<f64>>,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (t, &p) in preds.iter().enumerate() {
        let y = tape.constant(labels.index_axis(Axis(0), t).to_owned());
        let diff = tape.sub(y, p)?;
        let mut sq = tape.mul(diff, diff)?;
        if let Some(m) = mask {
            let mv = tape.constant(m.index_axis(Axis(0), t).to_owned());
            sq = tape.mul(sq, mv)?;
        }
        let s = tape.sum(sq);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, s)?,
            None => s,
        });
    }
    let acc = acc.ok_or_else(|| Error::Shape("empty window".into()))?;
    Ok(tape.sqrt(acc))
}

pub const LOSS_TERMS: [&str; 9] = [
    "recon", "kl_f", "kl_b", "stage1_f", "stage1_b", "link_f", "link_b", "stage3_f", "stage3_b",
];

/// Weighted loss terms in [`LOSS_TERMS`] order and their sum.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub terms: [Var; 9],
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            total: tape.scalar(self.total),
            terms: self.terms.map(|v| tape.scalar(v)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: [f64; 9],
}

impl LossBreakdown {
    pub fn named(&self) -> BTreeMap<String, f64> {
        LOSS_TERMS.iter().map(|n| n.to_string()).zip(self.terms).collect()
    }
}

/// The nine-term objective for one window. Reconstruction terms compare
/// pre-filler predictions with the observed entries of `input` (the loss
/// targets, which may see more than the model did); the backward terms are
/// taken against the time-reversed window.
pub fn total_loss(tape: &mut Tape, fv: &ForwardVars, input: &WindowInput, cfg: &TrainConfig) -> Result<LossVars> {
    let rev = input.reversed();
    let recon = masked_mae_var(tape, &fv.y_hat, &input.obs, &input.mask)?;
    let kl_f = blocks::kl_gaussian(tape, fv.latent_f.mu, fv.latent_f.logvar)?;
    let kl_b = blocks::kl_gaussian(tape, fv.latent_b.mu, fv.latent_b.logvar)?;
    let y1f: Vec<Var> = fv.forward.iter().map(|s| s.y1).collect();
    let y1b: Vec<Var> = fv.backward.iter().map(|s| s.y1).collect();
    let y2f: Vec<Var> = fv.forward.iter().map(|s| s.y2).collect();
    let y2b: Vec<Var> = fv.backward.iter().map(|s| s.y2).collect();
    let af: Vec<Var> = fv.forward.iter().map(|s| s.a_out).collect();
    let ab: Vec<Var> = fv.backward.iter().map(|s| s.a_out).collect();
    let stage1_f = masked_mae_var(tape, &y1f, &input.obs, &input.mask)?;
    let stage1_b = masked_mae_var(tape, &y1b, &rev.obs, &rev.mask)?;
    let (mf, mb) = if cfg.mask_link_loss {
        (Some(&input.edge_mask), Some(&rev.edge_mask))
    } else {
        (None, None)
    };
    let link_f = frobenius_var(tape, &af, &input.adj, mf)?;
    let link_b = frobenius_var(tape, &ab, &rev.adj, mb)?;
    let stage3_f = masked_mae_var(tape, &y2f, &input.obs, &input.mask)?;
    let stage3_b = masked_mae_var(tape, &y2b, &rev.obs, &rev.mask)?;
    let terms = [
        recon,
        tape.scale(kl_f, cfg.beta),
        tape.scale(kl_b, cfg.beta),
        stage1_f,
        stage1_b,
        tape.scale(link_f, cfg.gamma_link),
        tape.scale(link_b, cfg.gamma_link),
        stage3_f,
        stage3_b,
    ];
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(LossVars { total, terms })
}

/// Adam moments in parameter-name order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ParameterStore) -> Self {
        let zeros: BTreeMap<String, Array2<f64>> = params
            .iter()
            .map(|(n, p)| (n.clone(), Array2::zeros(p.values.dim())))
            .collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Scales gradients down to `max_norm` when their global norm exceeds it.
/// Returns the norm before clipping.
pub fn clip_gradients(params: &mut ParameterStore, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm {
        let k = max_norm / norm;
        for (_, p) in params.iter_mut() {
            p.grads.mapv_inplace(|g| g * k);
        }
    }
    norm
}

/// One bias-corrected Adam update from the stored gradients, then zeroes
/// them. Nothing is updated if any gradient is non-finite.
pub fn optimizer_step(params: &mut ParameterStore, opt: &mut OptimizerState, lr: f64) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| p.grads.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    opt.step += 1;
    let bc1 = 1.0 - opt.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - opt.beta2.powi(opt.step as i32);
    let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.eps);
    for (name, p) in params.iter_mut() {
        let m = opt
            .m
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(p.values.dim()));
        let v = opt
            .v
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(p.values.dim()));
        ndarray::Zip::from(&mut p.values)
            .and(&mut p.grads)
            .and(m)
            .and(v)
            .for_each(|w, g, m, v| {
                *m = b1 * *m + (1.0 - b1) * *g;
                *v = b2 * *v + (1.0 - b2) * *g * *g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *g = 0.0;
            });
    }
    Ok(())
}

/// Cosine annealing from `lr0` at epoch 0 to `lr_min` at epoch `E - 1`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.epochs <= 1 {
        return cfg.lr0;
    }
    let x = std::f64::consts::PI * epoch as f64 / (cfg.epochs - 1) as f64;
    cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + x.cos())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_terms: BTreeMap<String, f64>,
    pub val_mae: f64,
    pub val_frob: f64,
    pub seconds: f64,
}

/// Everything needed to continue training where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParameterStore,
    pub opt: OptimizerState,
    pub next_epoch: usize,
    pub best_params: ParameterStore,
    pub best_epoch: Option<usize>,
    pub best_val_mae: f64,
    pub bad_epochs: usize,
    pub stopped: bool,
    pub log: Vec<EpochRecord>,
}

/// Fixed per-run quantities derived from the dataset and configs.
#[derive(Debug, Clone)]
pub struct Setup {
    pub dims: Dims,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub window: usize,
    pub positions: PositionTensor,
}

impl Setup {
    /// Resolves configs against the dataset, picks anchors from the run
    /// seed and computes position embeddings on the observed adjacency.
    pub fn new(dataset: &NtsDataset, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<Self> {
        let seed = train_cfg
            .seed
            .ok_or_else(|| Error::Config("training needs a resolved seed".into()))?;
        let n = dataset.num_nodes();
        let window = train_cfg.window.unwrap_or(dataset.window);
        let dims = model_cfg.clone().resolve(n, dataset.num_features(), window)?;
        let anchors = rwr::select_anchors(n, dims.num_anchors, &mut rng::stream(seed, rng::ANCHORS))?;
        Self::with_anchors(dataset, model_cfg, train_cfg, anchors)
    }

    pub fn with_anchors(
        dataset: &NtsDataset,
        model_cfg: &ModelConfig,
        train_cfg: &TrainConfig,
        anchors: Vec<usize>,
    ) -> Result<Self> {
        train_cfg.validate()?;
        let seed = train_cfg
            .seed
            .ok_or_else(|| Error::Config("training needs a resolved seed".into()))?;
        let window = train_cfg.window.unwrap_or(dataset.window);
        let mut model = model_cfg.clone();
        let dims = model.resolve(dataset.num_nodes(), dataset.num_features(), window)?;
        if anchors.len() != dims.num_anchors {
            return Err(Error::Config(format!(
                "{} anchors for a model that expects {}",
                anchors.len(),
                dims.num_anchors
            )));
        }
        let view = observed_view(dataset);
        let positions = rwr::position_tensor(&view.obs_adjacency, &model.rwr(dataset.num_nodes()), &anchors)?;
        let mut train = train_cfg.clone();
        train.window = Some(window);
        Ok(Setup {
            dims,
            model,
            train,
            seed,
            window,
            positions,
        })
    }
}

/// Copy of `input` with each observed feature entry hidden with
/// probability `p`.
pub fn remask(input: &WindowInput, p: f64, rng: &mut rng::Rng) -> WindowInput {
    let mut out = input.clone();
    if p > 0.0 {
        for (m, o) in out.mask.iter_mut().zip(out.obs.iter_mut()) {
            if *m == 1.0 && rng.random_bool(p) {
                *m = 0.0;
                *o = 0.0;
            }
        }
    }
    out
}

/// Loss value and gradients for one window.
pub fn window_gradients(
    params: &ParameterStore,
    setup: &Setup,
    input: &WindowInput,
    rng: &mut rng::Rng,
) -> Result<(LossBreakdown, Gradients)> {
    let mut tape = Tape::new(params);
    let seen = remask(input, setup.train.remask_prob, rng);
    let fv = model::forward(&mut tape, &seen, &setup.dims, Sampling::Stochastic, rng)?;
    let loss = total_loss(&mut tape, &fv, input, &setup.train)?;
    let b = loss.breakdown(&tape);
    if !b.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok((b, tape.backward(loss.total)?))
}

/// Held-out MAE and Frobenius error of mean-mode imputation on `split`.
pub fn split_scores(
    params: &ParameterStore,
    setup: &Setup,
    dataset: &NtsDataset,
    view: &ObservedView,
    split: Split,
) -> Result<(f64, f64)> {
    let range = dataset.range(split);
    let preds = model::impute_range(params, &setup.dims, view, &setup.positions, range.clone(), setup.window)?;
    let report = eval::evaluate_range(dataset, &preds, range, setup.window)?;
    Ok((report.feature.mae, report.link.frobenius_heldout))
}

pub struct Trainer<'a> {
    pub dataset: &'a NtsDataset,
    pub view: ObservedView,
    pub setup: Setup,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a NtsDataset, setup: Setup) -> Result<Self> {
        let params = model::build_params(&setup.dims, setup.seed)?;
        let opt = OptimizerState::new(&params);
        let state = TrainState {
            best_params: params.clone(),
            params,
            opt,
            next_epoch: 0,
            best_epoch: None,
            best_val_mae: f64::INFINITY,
            bad_epochs: 0,
            stopped: false,
            log: Vec::new(),
        };
        Self::resume(dataset, setup, state)
    }

    pub fn resume(dataset: &'a NtsDataset, setup: Setup, state: TrainState) -> Result<Self> {
        Ok(Trainer {
            view: observed_view(dataset),
            dataset,
            setup,
            state,
        })
    }

    pub fn done(&self) -> bool {
        self.state.stopped || self.state.next_epoch >= self.setup.train.epochs
    }

    /// Train windows of this epoch in visiting order.
    fn epoch_windows(&self, epoch: usize) -> Result<Vec<Window<'_>>> {
        let cfg = &self.setup.train;
        let mut windows = window_iter(&self.view, self.setup.window, cfg.stride, self.dataset.range(Split::Train))?;
        let mut r = rng::stream(self.setup.seed, rng::EPOCH_BASE + epoch as u64);
        windows.shuffle(&mut r);
        if let Some(k) = cfg.max_windows_per_epoch {
            windows.truncate(k);
        }
        Ok(windows)
    }

    /// Runs one epoch, validates, updates the best snapshot and returns the
    /// log record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let clock = Instant::now();
        let epoch = self.state.next_epoch;
        let lr = lr_schedule(epoch, &self.setup.train);
        let windows = self.epoch_windows(epoch)?;
        let inputs: Vec<WindowInput> = windows
            .iter()
            .map(|w| WindowInput::new(w, &self.setup.positions))
            .collect::<Result<_>>()?;
        let starts: Vec<usize> = windows.iter().map(|w| w.start).collect();
        let mut sum_total = 0.0;
        let mut sum_terms = [0.0; 9];
        for (batch, batch_starts) in inputs
            .chunks(self.setup.train.batch_size)
            .zip(starts.chunks(self.setup.train.batch_size))
        {
            let params = &self.state.params;
            let setup = &self.setup;
            let results: Vec<Result<(LossBreakdown, Gradients)>> = batch
                .par_iter()
                .zip(batch_starts.par_iter())
                .map(|(input, &start)| {
                    let mut r = rng::window_stream(setup.seed, epoch as u64, start as u64);
                    window_gradients(params, setup, input, &mut r)
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            self.state.params.zero_grads();
            for res in results {
                let (b, g) = res?;
                sum_total += b.total;
                for (s, v) in sum_terms.iter_mut().zip(b.terms) {
                    *s += v;
                }
                self.state.params.accumulate(&g, scale);
            }
            clip_gradients(&mut self.state.params, self.setup.train.clip_norm);
            optimizer_step(&mut self.state.params, &mut self.state.opt, lr)?;
        }
        let count = inputs.len().max(1) as f64;
        let (val_mae, val_frob) = split_scores(&self.state.params, &self.setup, self.dataset, &self.view, Split::Val)?;
        if !val_mae.is_finite() {
            return Err(Error::NonFinite("validation MAE".into()));
        }
        if val_mae < self.state.best_val_mae {
            self.state.best_val_mae = val_mae;
            self.state.best_epoch = Some(epoch);
            self.state.best_params = self.state.params.clone();
            self.state.bad_epochs = 0;
        } else {
            self.state.bad_epochs += 1;
            if self.state.bad_epochs > self.setup.train.patience {
                self.state.stopped = true;
            }
        }
        self.state.next_epoch = epoch + 1;
        let record = EpochRecord {
            epoch,
            lr,
            loss_total: sum_total / count,
            loss_terms: LOSS_TERMS
                .iter()
                .zip(sum_terms)
                .map(|(n, s)| (n.to_string(), s / count))
                .collect(),
            val_mae,
            val_frob,
            seconds: clock.elapsed().as_secs_f64(),
        };
        self.state.log.push(record.clone());
        Ok(record)
    }

    /// Trains until early stopping or the epoch limit, calling `on_epoch`
    /// after every epoch.
    pub fn fit(&mut self, mut on_epoch: impl FnMut(&Self, &EpochRecord) -> Result<()>) -> Result<()> {
        while !self.done() {
            let record = self.run_epoch()?;
            on_epoch(self, &record)?;
        }
        Ok(())
    }
}

/// Trains from scratch without callbacks.
pub fn fit<'a>(dataset: &'a NtsDataset, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<Trainer<'a>> {
    let setup = Setup::new(dataset, model_cfg, train_cfg)?;
    let mut trainer = Trainer::new(dataset, setup)?;
    trainer.fit(|_, _| Ok(()))?;
    Ok(trainer)
}
