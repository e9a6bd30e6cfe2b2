//! Random walk with restart position embeddings.
//!
//! For anchor `i` and timestep `t` the score vector is the fixed point of
//! `r = (1 - c) * A_hat * r + c * e_i` with `A_hat = (D^-1 A)^T`, found by
//! power iteration. Each node's embedding is its score under each of `L`
//! anchors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RwrConfig {
    pub restart_prob: f64,
    pub tolerance: f64,
    pub max_iters: usize,
    pub num_anchors: usize,
}

impl RwrConfig {
    /// Defaults for an `n`-node graph: `c = 0.15`, `L = ceil(log2 n)`.
    pub fn for_nodes(n: usize) -> Self {
        RwrConfig {
            restart_prob: 0.15,
            tolerance: 1e-8,
            max_iters: 1000,
            num_anchors: default_anchor_count(n),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.restart_prob > 0.0 && self.restart_prob <= 1.0) {
            return Err(Error::Config(format!(
                "restart_prob must lie in (0,1], got {}",
                self.restart_prob
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("rwr tolerance must be > 0".into()));
        }
        if self.num_anchors < 1 || self.num_anchors > n {
            return Err(Error::Config(format!(
                "num_anchors must lie in 1..={n}, got {}",
                self.num_anchors
            )));
        }
        Ok(())
    }
}

pub fn default_anchor_count(n: usize) -> usize {
    ((n as f64).log2().ceil() as usize).clamp(1, n.max(1))
}

/// `(D^-1 A)^T`, with zero-degree rows replaced by a self loop.
pub fn normalize_adjacency(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("adjacency must be square, got {:?}", a.shape())));
    }
    if let Some(v) = a.iter().find(|&&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Invalid(format!("adjacency entry {v} is negative or non-finite")));
    }
    let mut out = Array2::zeros((n, n));
    for (i, row) in a.axis_iter(Axis(0)).enumerate() {
        let deg: f64 = row.sum();
        if deg > 0.0 {
            for (j, &w) in row.iter().enumerate() {
                out[[j, i]] = w / deg;
            }
        } else {
            out[[i, i]] = 1.0;
        }
    }
    Ok(out)
}

/// Result of one power iteration run.
#[derive(Debug, Clone)]
pub struct RwrRun {
    pub scores: Array1<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Power iteration from `e_anchor` until the L1 step is at most `tolerance`.
pub fn rwr_run(a_hat: &ArrayView2<f64>, anchor: usize, cfg: &RwrConfig) -> Result<RwrRun> {
    let n = a_hat.nrows();
    if anchor >= n {
        return Err(Error::Invalid(format!("anchor {anchor} out of range 0..{n}")));
    }
    let c = cfg.restart_prob;
    let mut r = Array1::zeros(n);
    r[anchor] = 1.0;
    let mut residual = f64::INFINITY;
    for m in 0..cfg.max_iters {
        let mut next = a_hat.dot(&r) * (1.0 - c);
        next[anchor] += c;
        residual = next.iter().zip(r.iter()).map(|(a, b)| (a - b).abs()).sum();
        r = next;
        if residual <= cfg.tolerance {
            return Ok(RwrRun {
                scores: r,
                iterations: m + 1,
                residual,
            });
        }
    }
    Err(Error::NoConvergence {
        iters: cfg.max_iters,
        residual,
    })
}

pub fn rwr_scores(a_hat: &ArrayView2<f64>, anchor: usize, cfg: &RwrConfig) -> Result<Array1<f64>> {
    rwr_run(a_hat, anchor, cfg).map(|r| r.scores)
}

/// `L` distinct node ids drawn uniformly without replacement, sorted.
pub fn select_anchors(n: usize, l: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if l > n {
        return Err(Error::Invalid(format!("cannot pick {l} anchors from {n} nodes")));
    }
    let mut anchors = index::sample(rng, n, l).into_vec();
    anchors.sort_unstable();
    Ok(anchors)
}

/// RWR scores of every node under every anchor at every timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTensor {
    pub anchors: Vec<usize>,
    /// `T x N x L`; `scores[t, :, l]` is the score vector of anchor `l`.
    pub scores: Array3<f64>,
}

pub fn position_tensor(
    adjacency: &Array3<f64>,
    cfg: &RwrConfig,
    anchors: &[usize],
) -> Result<PositionTensor> {
    let (t, n, _) = adjacency.dim();
    cfg.validate(n)?;
    let mut scores = Array3::zeros((t, n, anchors.len()));
    for ti in 0..t {
        let a_hat = normalize_adjacency(&adjacency.index_axis(Axis(0), ti))?;
        for (l, &anchor) in anchors.iter().enumerate() {
            let r = rwr_scores(&a_hat.view(), anchor, cfg)?;
            scores.index_axis_mut(Axis(0), ti).column_mut(l).assign(&r);
        }
    }
    Ok(PositionTensor {
        anchors: anchors.to_vec(),
        scores,
    })
}

const SIDECAR_MAGIC: &[u8; 8] = b"NTSRWR01";

impl PositionTensor {
    /// Binary sidecar: magic, `T`, `N`, `L` as little-endian u64, the `L`
    /// anchor ids as u64, then the scores as little-endian f64 in `T, N, L`
    /// row-major order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (t, n, l) = self.scores.dim();
        let mut buf = Vec::with_capacity(32 + 8 * (l + t * n * l));
        buf.extend_from_slice(SIDECAR_MAGIC);
        for v in [t, n, l] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for &a in &self.anchors {
            buf.extend_from_slice(&(a as u64).to_le_bytes());
        }
        for &v in self.scores.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::schema(path, m);
        if bytes.len() < 32 || &bytes[..8] != SIDECAR_MAGIC {
            return Err(bad("not a position sidecar"));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap());
        let (t, n, l) = (word(0) as usize, word(1) as usize, word(2) as usize);
        let expect = 32 + 8 * (l + t * n * l);
        if bytes.len() != expect {
            return Err(bad("sidecar length does not match its header"));
        }
        let anchors = (0..l).map(|i| word(3 + i) as usize).collect();
        let body = &bytes[32 + 8 * l..];
        let vals = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let scores = Array3::from_shape_vec((t, n, l), vals).map_err(|e| bad(&e.to_string()))?;
        Ok(PositionTensor { anchors, scores })
    }
}
