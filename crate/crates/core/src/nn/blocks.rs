//! Differentiable building blocks. Each block has an `init_*` function that
//! registers its parameters under a name prefix and a forward function that
//! records onto a [`Tape`].
//!
//! All activations are row-major: an `N x a` input holds one row per node.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use super::params::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

fn key(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

pub fn init_linear(store: &mut ParameterStore, name: &str, input: usize, output: usize) {
    store.insert_glorot(&key(name, "weight"), input, output);
    store.insert_zeros(&key(name, "bias"), 1, output);
}

/// `x W + b` along the last axis.
pub fn linear(tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(&key(name, "weight"))?;
    let b = tape.param(&key(name, "bias"))?;
    if tape.shape(x).1 != tape.shape(w).0 {
        return Err(Error::Shape(format!(
            "{name}: input width {} but weight is {:?}",
            tape.shape(x).1,
            tape.shape(w)
        )));
    }
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

pub fn init_mlp2(store: &mut ParameterStore, name: &str, input: usize, hidden: usize, output: usize) {
    init_linear(store, &key(name, "l1"), input, hidden);
    init_linear(store, &key(name, "l2"), hidden, output);
}

/// `Linear2(relu(Linear1(x)))`.
pub fn mlp2(tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
    let h = linear(tape, &key(name, "l1"), x)?;
    let h = tape.relu(h);
    linear(tape, &key(name, "l2"), h)
}

const GATES: [&str; 3] = ["z", "r", "h"];

pub fn init_gru_cell(store: &mut ParameterStore, name: &str, input: usize, hidden: usize) {
    for g in GATES {
        store.insert_glorot(&key(name, &format!("w_{g}")), input, hidden);
        store.insert_glorot(&key(name, &format!("u_{g}")), hidden, hidden);
        store.insert_zeros(&key(name, &format!("b_{g}")), 1, hidden);
    }
}

fn gate_pre(tape: &mut Tape, name: &str, gate: &str, x: Var, h: Var) -> Result<Var> {
    let w = tape.param(&key(name, &format!("w_{gate}")))?;
    let u = tape.param(&key(name, &format!("u_{gate}")))?;
    let b = tape.param(&key(name, &format!("b_{gate}")))?;
    let xw = tape.matmul(x, w)?;
    let hu = tape.matmul(h, u)?;
    let s = tape.add(xw, hu)?;
    tape.add_bias(s, b)
}

/// One GRU step:
/// `z = sigmoid(x W_z + h U_z + b_z)`, `r = sigmoid(x W_r + h U_r + b_r)`,
/// `c = tanh(x W_h + (r * h) U_h + b_h)`, `h' = (1 - z) * h + z * c`.
pub fn gru_cell(tape: &mut Tape, name: &str, x: Var, h: Var) -> Result<Var> {
    if tape.shape(x).0 != tape.shape(h).0 {
        return Err(Error::Shape(format!(
            "{name}: input rows {} vs hidden rows {}",
            tape.shape(x).0,
            tape.shape(h).0
        )));
    }
    let zp = gate_pre(tape, name, "z", x, h)?;
    let z = tape.sigmoid(zp);
    let rp = gate_pre(tape, name, "r", x, h)?;
    let r = tape.sigmoid(rp);
    let rh = tape.mul(r, h)?;
    let cp = gate_pre(tape, name, "h", x, rh)?;
    let c = tape.tanh(cp);
    let delta = tape.sub(c, h)?;
    let step = tape.mul(z, delta)?;
    tape.add(h, step)
}

pub fn init_gru_encoder(store: &mut ParameterStore, name: &str, input: usize, hidden: usize) {
    init_gru_cell(store, &key(name, "layer0"), input, hidden);
    init_gru_cell(store, &key(name, "layer1"), hidden, hidden);
}

/// Two stacked GRU layers over a sequence of `N x a` inputs with zero initial
/// state. Returns the top-layer state after every step.
pub fn gru_encoder(tape: &mut Tape, name: &str, xs: &[Var], hidden: usize) -> Result<Vec<Var>> {
    let Some(&first) = xs.first() else {
        return Err(Error::Shape(format!("{name}: empty input sequence")));
    };
    let n = tape.shape(first).0;
    let mut h0 = tape.constant(Array2::zeros((n, hidden)));
    let mut h1 = h0;
    let l0 = key(name, "layer0");
    let l1 = key(name, "layer1");
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        h0 = gru_cell(tape, &l0, x, h0)?;
        h1 = gru_cell(tape, &l1, h0, h1)?;
        out.push(h1);
    }
    Ok(out)
}

pub fn init_self_attention(store: &mut ParameterStore, name: &str, input: usize, d_k: usize, d_v: usize) {
    store.insert_glorot(&key(name, "w_q"), input, d_k);
    store.insert_glorot(&key(name, "w_k"), input, d_k);
    store.insert_glorot(&key(name, "w_v"), input, d_v);
}

/// Single-head scaled dot-product attention across rows (nodes). Returns
/// the output and the row-stochastic attention matrix.
pub fn self_attention_with_weights(tape: &mut Tape, name: &str, x: Var) -> Result<(Var, Var)> {
    let wq = tape.param(&key(name, "w_q"))?;
    let wk = tape.param(&key(name, "w_k"))?;
    let wv = tape.param(&key(name, "w_v"))?;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let d_k = tape.shape(k).1 as f64;
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / d_k.sqrt());
    let attn = tape.softmax_rows(scores);
    let out = tape.matmul(attn, v)?;
    Ok((out, attn))
}

pub fn self_attention(tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
    self_attention_with_weights(tape, name, x).map(|(out, _)| out)
}

pub fn init_mpnn_two_layer(store: &mut ParameterStore, name: &str, dim: usize) {
    for layer in ["layer0", "layer1"] {
        let prefix = key(name, layer);
        store.insert_glorot(&key(&prefix, "msg"), dim, dim);
        init_linear(store, &key(&prefix, "upd"), 2 * dim, dim);
    }
}

/// One round: `m_i = sum_j A[i,j] W_m d_j`, `d_i' = relu(W_u (d_i || m_i) + b)`.
fn mpnn_layer(tape: &mut Tape, prefix: &str, d: Var, adj: Var) -> Result<Var> {
    let wm = tape.param(&key(prefix, "msg"))?;
    let projected = tape.matmul(d, wm)?;
    let messages = tape.matmul(adj, projected)?;
    let joined = tape.concat_cols(&[d, messages])?;
    let upd = linear(tape, &key(prefix, "upd"), joined)?;
    Ok(tape.relu(upd))
}

/// Two message-passing rounds with an additive skip: `H1 + H2`.
pub fn mpnn_two_layer(tape: &mut Tape, name: &str, u: Var, adj: Var) -> Result<Var> {
    let (n, _) = tape.shape(u);
    if tape.shape(adj) != (n, n) {
        return Err(Error::Shape(format!(
            "{name}: adjacency {:?} for {n} nodes",
            tape.shape(adj)
        )));
    }
    let h1 = mpnn_layer(tape, &key(name, "layer0"), u, adj)?;
    let h2 = mpnn_layer(tape, &key(name, "layer1"), h1, adj)?;
    tape.add(h1, h2)
}

/// Frequencies log-spaced over `[1 / max_period, 1]`.
pub fn init_time_encoding(store: &mut ParameterStore, name: &str, k: usize, max_period: f64) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("time encoding needs k >= 1".into()));
    }
    let lo = (1.0 / max_period.max(1.0)).ln();
    let freqs = Array2::from_shape_fn((1, k), |(_, j)| {
        if k == 1 {
            1.0
        } else {
            (lo * (1.0 - j as f64 / (k - 1) as f64)).exp()
        }
    });
    store.insert(&key(name, "freq"), freqs);
    Ok(())
}

/// `sqrt(1/k) [cos(w_1 t), sin(w_1 t), ...]` as a `1 x 2k` row.
pub fn time_encoding(tape: &mut Tape, name: &str, t: f64) -> Result<Var> {
    let freq = tape.param(&key(name, "freq"))?;
    tape.time_encode(freq, t)
}

/// Standard-normal noise of the given shape.
pub fn standard_normal(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// `mu + exp(logvar / 2) * eps`; `eps` is a constant on the tape.
pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, eps: Array2<f64>) -> Result<Var> {
    if eps.dim() != tape.shape(mu) {
        return Err(Error::Shape(format!(
            "noise {:?} for mean {:?}",
            eps.dim(),
            tape.shape(mu)
        )));
    }
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let eps = tape.constant(eps);
    let noise = tape.mul(std, eps)?;
    tape.add(mu, noise)
}

/// `KL[N(mu, exp(logvar)) || N(0, I)]`, summed over latent dims and
/// averaged over rows.
pub fn kl_gaussian(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let rows = tape.shape(mu).0.max(1) as f64;
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(logvar);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, logvar)?;
    let s = tape.sum(b);
    let count = tape.shape(mu).0 * tape.shape(mu).1;
    // -1 per entry
    let minus = tape.constant(Array2::from_elem((1, 1), -(count as f64)));
    let total = tape.add(s, minus)?;
    Ok(tape.scale(total, 0.5 / rows))
}
