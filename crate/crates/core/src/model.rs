//! The bidirectional graph-enhanced VAE.
//!
//! Each direction has its own encoder (a two-layer GRU over observed
//! features, masks and position embeddings, producing a per-node Gaussian
//! latent) and its own three-stage decoder:
//!
//! 1. a linear pre-fill of missing features from the previous state;
//! 2. link prediction from node embeddings and a Fourier time encoding,
//!    followed by two rounds of message passing over the predicted graph;
//! 3. attention-refined feature prediction and a GRU state update.
//!
//! A fusion MLP combines both directions into the final feature estimate.
//! Parameter names are prefixed `f.` / `b.` per direction and `fuse.` for
//! the fusion head.

use std::ops::Range;

use ndarray::{s, Array2, Array3, Axis};
use rayon::prelude::*;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{reverse_time, tile_starts, ObservedView, Window};
use crate::error::{Error, Result};
use crate::eval::Predictions;
use crate::nn::blocks::{self, standard_normal};
use crate::nn::{ParameterStore, Tape, Var};
use crate::rng::Rng;
use crate::rwr::{self, PositionTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Latent size; defaults to `hidden`.
    pub latent: Option<usize>,
    pub time_pairs: usize,
    /// Edge-embedding size; defaults to `hidden`.
    pub edge_dim: Option<usize>,
    /// Query/key/value size of the attention layer; defaults to `hidden`.
    pub attn_dim: Option<usize>,
    /// Defaults to `ceil(log2 N)`.
    pub num_anchors: Option<usize>,
    pub restart_prob: f64,
    /// Filled in from the dataset when absent.
    pub num_features: Option<usize>,
    /// Largest period the time encoding starts with; defaults to the window.
    pub max_period: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            latent: None,
            time_pairs: 8,
            edge_dim: None,
            attn_dim: None,
            num_anchors: None,
            restart_prob: 0.15,
            num_features: None,
            max_period: None,
        }
    }
}

/// A [`ModelConfig`] with every optional size filled in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub hidden: usize,
    pub latent: usize,
    pub time_pairs: usize,
    pub edge_dim: usize,
    pub attn_dim: usize,
    pub num_anchors: usize,
    pub num_features: usize,
    pub max_period: f64,
}

impl ModelConfig {
    /// Fills defaults for a dataset with `n` nodes, `d` features and the
    /// given window length, and writes them back into the config.
    pub fn resolve(&mut self, n: usize, d: usize, window: usize) -> Result<Dims> {
        let h = self.hidden;
        let dims = Dims {
            hidden: h,
            latent: *self.latent.get_or_insert(h),
            time_pairs: self.time_pairs,
            edge_dim: *self.edge_dim.get_or_insert(h),
            attn_dim: *self.attn_dim.get_or_insert(h),
            num_anchors: *self.num_anchors.get_or_insert(rwr::default_anchor_count(n)),
            num_features: *self.num_features.get_or_insert(d),
            max_period: *self.max_period.get_or_insert(window as f64),
        };
        if dims.num_features != d {
            return Err(Error::Config(format!(
                "model expects {} features, dataset has {d}",
                dims.num_features
            )));
        }
        if [dims.hidden, dims.latent, dims.time_pairs, dims.edge_dim, dims.attn_dim, dims.num_anchors]
            .contains(&0)
        {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if dims.num_anchors > n {
            return Err(Error::Config(format!(
                "{} anchors requested for {n} nodes",
                dims.num_anchors
            )));
        }
        if !(self.restart_prob > 0.0 && self.restart_prob <= 1.0) {
            return Err(Error::Config("restart_prob must lie in (0,1]".into()));
        }
        Ok(dims)
    }

    pub fn rwr(&self, n: usize) -> rwr::RwrConfig {
        rwr::RwrConfig {
            restart_prob: self.restart_prob,
            num_anchors: self.num_anchors.unwrap_or_else(|| rwr::default_anchor_count(n)),
            ..rwr::RwrConfig::for_nodes(n)
        }
    }
}

pub const DIRECTIONS: [&str; 2] = ["f", "b"];

/// Registers every parameter of the model.
pub fn build_params(dims: &Dims, seed: u64) -> Result<ParameterStore> {
    let mut store = ParameterStore::new(seed);
    let Dims {
        hidden: h,
        latent: z,
        time_pairs: k,
        edge_dim: e,
        attn_dim: a,
        num_anchors: l,
        num_features: d,
        max_period,
    } = *dims;
    for dir in DIRECTIONS {
        let p = |s: &str| format!("{dir}.{s}");
        blocks::init_gru_encoder(&mut store, &p("enc"), 2 * d + l, h);
        blocks::init_linear(&mut store, &p("enc_mu"), h, z);
        blocks::init_linear(&mut store, &p("enc_logvar"), h, z);
        blocks::init_linear(&mut store, &p("stage1"), h, d);
        blocks::init_linear(&mut store, &p("embed"), 2 * d + l + h, h);
        blocks::init_time_encoding(&mut store, &p("time"), k, max_period)?;
        blocks::init_mlp2(&mut store, &p("edge"), 2 * h + 2 * k, h, e);
        // keeps initial E E^T entries O(1/sqrt(d_e)) so that message passing
        // over the predicted graph starts at unit scale
        let w = store.values_mut(&p("edge.l2.weight")).expect("just inserted");
        w.mapv_inplace(|v| v / (e as f64).sqrt());
        blocks::init_mpnn_two_layer(&mut store, &p("mpnn"), h);
        blocks::init_self_attention(&mut store, &p("attn"), z + 2 * h + 2 * d, a, a);
        blocks::init_mlp2(&mut store, &p("out"), a, h, h);
        blocks::init_mlp2(&mut store, &p("stage3"), 3 * h, h, d);
        blocks::init_gru_cell(&mut store, &p("memory"), z + 2 * d + h, h);
    }
    blocks::init_mlp2(&mut store, "fuse", 6 * h, h, d);
    Ok(store)
}

/// Everything one direction reads for one window, time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowInput {
    pub obs: Array3<f64>,
    pub mask: Array3<f64>,
    pub adj: Array3<f64>,
    pub edge_mask: Array3<f64>,
    /// `dt x N x L` position scores.
    pub positions: Array3<f64>,
}

impl WindowInput {
    pub fn new(window: &Window, positions: &PositionTensor) -> Result<Self> {
        let range = window.start..window.start + window.length;
        if range.end > positions.scores.shape()[0] {
            return Err(Error::Shape("position tensor shorter than window".into()));
        }
        Ok(WindowInput {
            obs: window.obs_features.to_owned(),
            mask: window.model_mask.to_owned(),
            adj: window.obs_adjacency.to_owned(),
            edge_mask: window.model_edge_mask.to_owned(),
            positions: positions.scores.slice(s![range, .., ..]).to_owned(),
        })
    }

    pub fn len(&self) -> usize {
        self.obs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_nodes(&self) -> usize {
        self.obs.shape()[1]
    }

    pub fn num_features(&self) -> usize {
        self.obs.shape()[2]
    }

    pub fn reversed(&self) -> Self {
        WindowInput {
            obs: reverse_time(&self.obs.view()),
            mask: reverse_time(&self.mask.view()),
            adj: reverse_time(&self.adj.view()),
            edge_mask: reverse_time(&self.edge_mask.view()),
            positions: reverse_time(&self.positions.view()),
        }
    }

    fn check(&self, dims: &Dims) -> Result<()> {
        let (t, n, d) = self.obs.dim();
        let ok = t >= 1
            && d == dims.num_features
            && self.mask.dim() == (t, n, d)
            && self.adj.dim() == (t, n, n)
            && self.edge_mask.dim() == (t, n, n)
            && self.positions.dim() == (t, n, dims.num_anchors);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "window input obs {:?}, adj {:?}, positions {:?} do not fit the model",
                self.obs.dim(),
                self.adj.dim(),
                self.positions.dim()
            )))
        }
    }
}

fn step(a: &Array3<f64>, t: usize) -> Array2<f64> {
    a.index_axis(Axis(0), t).to_owned()
}

/// How the stochastic parts of a forward pass are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// `z ~ q(z|x)` and `H0 ~ N(0, 1/d_h)` from the supplied stream.
    Stochastic,
    /// `z = mu` and `H0 = 0`.
    Mean,
}

/// Tape handles of one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

/// Tape handles of one decoder step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub h: Var,
    pub y1: Var,
    pub o: Var,
    pub u: Var,
    pub a_out: Var,
    pub h_graph: Var,
    pub h_out: Var,
    pub y2: Var,
    pub x_out: Var,
}

pub const LOGVAR_CLAMP: f64 = 10.0;

pub fn encode(
    tape: &mut Tape,
    dir: &str,
    input: &WindowInput,
    dims: &Dims,
    sampling: Sampling,
    rng: &mut Rng,
) -> Result<LatentVars> {
    input.check(dims)?;
    let mut xs = Vec::with_capacity(input.len());
    for t in 0..input.len() {
        let parts = [step(&input.obs, t), step(&input.mask, t), step(&input.positions, t)];
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let x = ndarray::concatenate(Axis(1), &views).expect("rows agree");
        xs.push(tape.constant(x));
    }
    let hs = blocks::gru_encoder(tape, &format!("{dir}.enc"), &xs, dims.hidden)?;
    let last = *hs.last().expect("nonempty window");
    let mu = blocks::linear(tape, &format!("{dir}.enc_mu"), last)?;
    let lv = blocks::linear(tape, &format!("{dir}.enc_logvar"), last)?;
    let logvar = tape.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    let z = match sampling {
        Sampling::Stochastic => {
            let (n, dz) = tape.shape(mu);
            let eps = standard_normal(rng, n, dz);
            blocks::reparameterize(tape, mu, logvar, eps)?
        }
        Sampling::Mean => mu,
    };
    Ok(LatentVars { mu, logvar, z })
}

/// `mask * obs + (1 - mask) * pred` with constant `mask` and `obs`.
fn filler(tape: &mut Tape, obs: &Array2<f64>, mask: &Array2<f64>, pred: Var) -> Result<Var> {
    let kept = tape.constant(obs * mask);
    let inv = tape.constant(mask.mapv(|m| 1.0 - m));
    let filled = tape.mul(inv, pred)?;
    tape.add(kept, filled)
}

/// Stage 1: `Y1 = Linear(H_prev)`, `O = filler(obs, mask, Y1)`.
pub fn decode_stage1(
    tape: &mut Tape,
    dir: &str,
    h_prev: Var,
    obs: &Array2<f64>,
    mask: &Array2<f64>,
) -> Result<(Var, Var)> {
    let y1 = blocks::linear(tape, &format!("{dir}.stage1"), h_prev)?;
    let o = filler(tape, obs, mask, y1)?;
    Ok((y1, o))
}

/// Stage 2: node embeddings, predicted adjacency and graph representation.
#[allow(clippy::too_many_arguments)]
pub fn decode_stage2(
    tape: &mut Tape,
    dir: &str,
    o: Var,
    mask: &Array2<f64>,
    positions: &Array2<f64>,
    h_prev: Var,
    time: f64,
) -> Result<(Var, Var, Var)> {
    let (n, hd) = tape.shape(h_prev);
    let m = tape.constant(mask.clone());
    let r = tape.constant(positions.clone());
    let joined = tape.concat_cols(&[o, m, r, h_prev])?;
    let u_raw = blocks::linear(tape, &format!("{dir}.embed"), joined)?;

    // nodes with no observed feature keep their previous state
    let missing: Vec<bool> = mask.rows().into_iter().map(|row| row.iter().all(|&v| v == 0.0)).collect();
    let u = if missing.iter().any(|&b| b) {
        let keep = Array2::from_shape_fn((n, hd), |(i, _)| if missing[i] { 1.0 } else { 0.0 });
        let take = keep.mapv(|k| 1.0 - k);
        let keep = tape.constant(keep);
        let take = tape.constant(take);
        let a = tape.mul(keep, h_prev)?;
        let b = tape.mul(take, u_raw)?;
        tape.add(a, b)?
    } else {
        u_raw
    };

    let te = blocks::time_encoding(tape, &format!("{dir}.time"), time)?;
    let te = tape.broadcast_rows(te, n)?;
    let edge_in = tape.concat_cols(&[u, h_prev, te])?;
    let emb = blocks::mlp2(tape, &format!("{dir}.edge"), edge_in)?;
    let a_out = edge_decoder(tape, emb)?;
    let h_graph = blocks::mpnn_two_layer(tape, &format!("{dir}.mpnn"), u, a_out)?;
    Ok((u, a_out, h_graph))
}

/// `relu(E E^T)` with the diagonal zeroed.
pub fn edge_decoder(tape: &mut Tape, emb: Var) -> Result<Var> {
    let n = tape.shape(emb).0;
    let et = tape.transpose(emb);
    let gram = tape.matmul(emb, et)?;
    let pos = tape.relu(gram);
    let off_diag = tape.constant(Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 1.0 }));
    tape.mul(pos, off_diag)
}

/// Stage 3: attention-refined prediction, filler and memory update.
/// Returns `(H_out, Y2, X_out, H_t)`.
#[allow(clippy::too_many_arguments)]
pub fn decode_stage3(
    tape: &mut Tape,
    dir: &str,
    z: Var,
    h_prev: Var,
    h_graph: Var,
    o: Var,
    mask: &Array2<f64>,
    obs: &Array2<f64>,
) -> Result<(Var, Var, Var, Var)> {
    let m = tape.constant(mask.clone());
    let att_in = tape.concat_cols(&[z, h_prev, h_graph, o, m])?;
    let att = blocks::self_attention(tape, &format!("{dir}.attn"), att_in)?;
    let h_out = blocks::mlp2(tape, &format!("{dir}.out"), att)?;
    let y2_in = tape.concat_cols(&[h_out, h_prev, h_graph])?;
    let y2 = blocks::mlp2(tape, &format!("{dir}.stage3"), y2_in)?;
    let x_out = filler(tape, obs, mask, y2)?;
    let mem_in = tape.concat_cols(&[z, x_out, m, h_graph])?;
    let h = blocks::gru_cell(tape, &format!("{dir}.memory"), mem_in, h_prev)?;
    Ok((h_out, y2, x_out, h))
}

/// Initial decoder state: `N(0, sigma^2)` with `sigma = 1/sqrt(d_h)`.
pub fn initial_state(n: usize, hidden: usize, sampling: Sampling, rng: &mut Rng) -> Array2<f64> {
    match sampling {
        Sampling::Mean => Array2::zeros((n, hidden)),
        Sampling::Stochastic => {
            let dist = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).expect("positive std");
            Array2::from_shape_fn((n, hidden), |_| dist.sample(rng))
        }
    }
}

/// Runs the three decoder stages over every step of `input`, in its own
/// time order. The time encoding sees the 1-based step index.
pub fn decode_direction(
    tape: &mut Tape,
    dir: &str,
    input: &WindowInput,
    latent: &LatentVars,
    dims: &Dims,
    sampling: Sampling,
    rng: &mut Rng,
) -> Result<Vec<StepVars>> {
    input.check(dims)?;
    let h0 = initial_state(input.num_nodes(), dims.hidden, sampling, rng);
    let mut h_prev = tape.constant(h0);
    let mut steps = Vec::with_capacity(input.len());
    for t in 0..input.len() {
        let obs = step(&input.obs, t);
        let mask = step(&input.mask, t);
        let pos = step(&input.positions, t);
        let (y1, o) = decode_stage1(tape, dir, h_prev, &obs, &mask)?;
        let (u, a_out, h_graph) = decode_stage2(tape, dir, o, &mask, &pos, h_prev, (t + 1) as f64)?;
        let (h_out, y2, x_out, h) = decode_stage3(tape, dir, latent.z, h_prev, h_graph, o, &mask, &obs)?;
        steps.push(StepVars {
            h,
            y1,
            o,
            u,
            a_out,
            h_graph,
            h_out,
            y2,
            x_out,
        });
        h_prev = h;
    }
    Ok(steps)
}

/// Tape handles of a full bidirectional pass. `backward` steps are in the
/// backward direction's own (reversed) order.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub latent_f: LatentVars,
    pub latent_b: LatentVars,
    pub forward: Vec<StepVars>,
    pub backward: Vec<StepVars>,
    /// Fused prediction per forward-ordered step.
    pub y_hat: Vec<Var>,
}

pub fn forward(
    tape: &mut Tape,
    input: &WindowInput,
    dims: &Dims,
    sampling: Sampling,
    rng: &mut Rng,
) -> Result<ForwardVars> {
    let rev = input.reversed();
    let latent_f = encode(tape, "f", input, dims, sampling, rng)?;
    let forward = decode_direction(tape, "f", input, &latent_f, dims, sampling, rng)?;
    let latent_b = encode(tape, "b", &rev, dims, sampling, rng)?;
    let backward = decode_direction(tape, "b", &rev, &latent_b, dims, sampling, rng)?;
    let len = input.len();
    let mut y_hat = Vec::with_capacity(len);
    for t in 0..len {
        let f = &forward[t];
        let b = &backward[len - 1 - t];
        let joined = tape.concat_cols(&[f.h_out, b.h_out, f.h_graph, b.h_graph, f.h, b.h])?;
        y_hat.push(blocks::mlp2(tape, "fuse", joined)?);
    }
    Ok(ForwardVars {
        latent_f,
        latent_b,
        forward,
        backward,
        y_hat,
    })
}

/// Values of one decoder step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub h: Array2<f64>,
    pub y1: Array2<f64>,
    pub o: Array2<f64>,
    pub u: Array2<f64>,
    pub a_out: Array2<f64>,
    pub h_graph: Array2<f64>,
    pub h_out: Array2<f64>,
    pub y2: Array2<f64>,
    pub x_out: Array2<f64>,
}

pub type DecoderTrace = Vec<StepTrace>;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub mu: Array2<f64>,
    pub logvar: Array2<f64>,
    pub z: Array2<f64>,
}

fn trace_of(tape: &Tape, steps: &[StepVars]) -> DecoderTrace {
    steps
        .iter()
        .map(|s| StepTrace {
            h: tape.value(s.h).clone(),
            y1: tape.value(s.y1).clone(),
            o: tape.value(s.o).clone(),
            u: tape.value(s.u).clone(),
            a_out: tape.value(s.a_out).clone(),
            h_graph: tape.value(s.h_graph).clone(),
            h_out: tape.value(s.h_out).clone(),
            y2: tape.value(s.y2).clone(),
            x_out: tape.value(s.x_out).clone(),
        })
        .collect()
}

fn latent_of(tape: &Tape, l: &LatentVars) -> LatentState {
    LatentState {
        mu: tape.value(l.mu).clone(),
        logvar: tape.value(l.logvar).clone(),
        z: tape.value(l.z).clone(),
    }
}

/// Output of [`bidirectional_impute`], all in forward time order.
#[derive(Debug, Clone, PartialEq)]
pub struct Imputation {
    /// Fused prediction before the filler, `dt x N x D`.
    pub y_hat: Array3<f64>,
    /// Observed features with missing slots replaced by `y_hat`.
    pub features: Array3<f64>,
    /// Observed adjacency with missing slots replaced by the mean of both
    /// directions' predicted adjacency, `dt x N x N`.
    pub adjacency: Array3<f64>,
    pub trace_f: DecoderTrace,
    pub trace_b: DecoderTrace,
    pub latent_f: LatentState,
    pub latent_b: LatentState,
}

fn stack(rows: Vec<Array2<f64>>) -> Array3<f64> {
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal shapes")
}

/// Runs both directions and assembles the final feature and edge estimates.
pub fn bidirectional_impute(
    params: &ParameterStore,
    input: &WindowInput,
    dims: &Dims,
    sampling: Sampling,
    rng: &mut Rng,
) -> Result<Imputation> {
    let mut tape = Tape::new(params);
    let fv = forward(&mut tape, input, dims, sampling, rng)?;
    Ok(assemble(&tape, &fv, input))
}

pub fn assemble(tape: &Tape, fv: &ForwardVars, input: &WindowInput) -> Imputation {
    let len = input.len();
    let trace_f = trace_of(tape, &fv.forward);
    let mut trace_b = trace_of(tape, &fv.backward);
    trace_b.reverse();
    let y_hat = stack(fv.y_hat.iter().map(|&v| tape.value(v).clone()).collect());
    let features = &input.obs * &input.mask + &(input.mask.mapv(|m| 1.0 - m) * &y_hat);
    let mut adjacency = Array3::zeros(input.adj.dim());
    for t in 0..len {
        let a_mean = (&trace_f[t].a_out + &trace_b[t].a_out) * 0.5;
        let em = input.edge_mask.index_axis(Axis(0), t);
        let obs = input.adj.index_axis(Axis(0), t);
        let blended = &obs * &em + &(em.mapv(|m| 1.0 - m) * &a_mean);
        adjacency.index_axis_mut(Axis(0), t).assign(&blended);
    }
    Imputation {
        y_hat,
        features,
        adjacency,
        trace_f,
        trace_b,
        latent_f: latent_of(tape, &fv.latent_f),
        latent_b: latent_of(tape, &fv.latent_b),
    }
}

/// Mean-mode imputation of `range` from windows of length `window` tiled by
/// [`tile_starts`]. Overlapping window outputs are averaged. Windows run in
/// parallel; the reduction is sequential in start order.
pub fn impute_range(
    params: &ParameterStore,
    dims: &Dims,
    view: &ObservedView,
    positions: &PositionTensor,
    range: Range<usize>,
    window: usize,
) -> Result<Predictions> {
    let total = view.num_steps();
    let w = window.min(total);
    let starts = tile_starts(range.clone(), w, total)?;
    let outputs: Vec<Result<(usize, Imputation)>> = starts
        .par_iter()
        .map(|&start| {
            let input = WindowInput::new(&Window::at(view, start, w)?, positions)?;
            // mean mode draws nothing: the stream is only a placeholder
            let mut r = crate::rng::stream(0, 0);
            Ok((start, bidirectional_impute(params, &input, dims, Sampling::Mean, &mut r)?))
        })
        .collect();
    let (n, d) = (view.num_nodes(), view.num_features());
    let len = range.len();
    let mut feats = Array3::<f64>::zeros((len, n, d));
    let mut adj = Array3::<f64>::zeros((len, n, n));
    let mut counts = vec![0.0; len];
    for out in outputs {
        let (start, imp) = out?;
        for k in 0..w {
            let t = start + k;
            if t < range.start || t >= range.end {
                continue;
            }
            let i = t - range.start;
            let mut f = feats.index_axis_mut(Axis(0), i);
            f += &imp.features.index_axis(Axis(0), k);
            let mut a = adj.index_axis_mut(Axis(0), i);
            a += &imp.adjacency.index_axis(Axis(0), k);
            counts[i] += 1.0;
        }
    }
    for (i, &c) in counts.iter().enumerate() {
        if c > 1.0 {
            feats.index_axis_mut(Axis(0), i).mapv_inplace(|v| v / c);
            adj.index_axis_mut(Axis(0), i).mapv_inplace(|v| v / c);
        }
    }
    Ok(Predictions {
        start: range.start,
        features: feats,
        adjacency: adj,
    })
}
