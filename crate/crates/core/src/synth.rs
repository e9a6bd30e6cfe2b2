//! Synthetic networked time series with known ground truth.
//!
//! Nodes sit in the unit square and are wired by a thresholded Gaussian
//! kernel. Features follow a graph-diffusion AR(1) process driven by
//! per-node seasonal phases, so adjacent nodes carry correlated series.
//! Per-timestep edges keep a static edge only while its endpoints' features
//! are close under an RBF kernel.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{NtsDataset, SplitBounds, HELD_OUT, OBSERVED};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train_frac: f64,
    pub val_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_nodes: usize,
    pub num_features: usize,
    pub num_steps: usize,
    pub seed: u64,
    pub geo_sigma: f64,
    pub geo_threshold: f64,
    pub dyn_sigma: f64,
    pub dyn_threshold: f64,
    pub ar_coupling: f64,
    pub season_period: usize,
    pub noise_std: f64,
    pub feature_missing_rate: f64,
    pub edge_mask_prob: f64,
    pub splits: Splits,
    /// Window length written to `meta.json`.
    pub window: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_nodes: 16,
            num_features: 1,
            num_steps: 480,
            seed: 0,
            geo_sigma: 0.3,
            geo_threshold: 0.5,
            dyn_sigma: 1.0,
            dyn_threshold: 0.8,
            ar_coupling: 0.6,
            season_period: 48,
            noise_std: 0.05,
            feature_missing_rate: 0.25,
            edge_mask_prob: 0.7,
            splits: Splits {
                train_frac: 0.7,
                val_frac: 0.1,
            },
            window: 24,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_nodes < 2 {
            return bad("num_nodes must be >= 2");
        }
        if self.num_features == 0 || self.num_steps == 0 || self.season_period == 0 {
            return bad("num_features, num_steps and season_period must be positive");
        }
        if !(self.geo_sigma > 0.0 && self.geo_threshold >= 0.0 && self.dyn_sigma > 0.0) {
            return bad("geo_sigma and dyn_sigma must be > 0, geo_threshold >= 0");
        }
        if !(self.dyn_threshold > 0.0 && self.dyn_threshold < 1.0) {
            return bad("dyn_threshold must lie in (0,1)");
        }
        if !(0.0..1.0).contains(&self.ar_coupling) {
            return bad("ar_coupling must lie in [0,1)");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.feature_missing_rate) {
            return bad("feature_missing_rate must lie in [0,1]");
        }
        if !(0.0..=1.0).contains(&self.edge_mask_prob) {
            return bad("edge_mask_prob must lie in [0,1]");
        }
        let Splits { train_frac, val_frac } = self.splits;
        if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0) {
            return bad("splits need train_frac, val_frac > 0 and train_frac + val_frac < 1");
        }
        let b = self.split_bounds();
        if !(0 < b.train_end && b.train_end < b.val_end && b.val_end < self.num_steps) {
            return bad("num_steps too small for the requested splits");
        }
        if self.window < 2 {
            return bad("window must be >= 2");
        }
        Ok(())
    }

    pub fn split_bounds(&self) -> SplitBounds {
        let t = self.num_steps as f64;
        SplitBounds {
            train_end: (t * self.splits.train_frac).round() as usize,
            val_end: (t * (self.splits.train_frac + self.splits.val_frac)).round() as usize,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Node coordinates and the thresholded Gaussian-kernel weight matrix.
pub fn gen_static_graph(cfg: &GenConfig, rng: &mut Rng) -> (Array2<f64>, Array2<f64>) {
    let n = cfg.num_nodes;
    let positions = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>());
    let weights = static_weights(&positions, cfg.geo_sigma, cfg.geo_threshold);
    (positions, weights)
}

/// Kernel weights for given coordinates; isolated nodes are linked to their
/// nearest neighbour.
pub fn static_weights(positions: &Array2<f64>, sigma: f64, threshold: f64) -> Array2<f64> {
    let n = positions.nrows();
    let kernel = |d2: f64| (-d2 / (2.0 * sigma * sigma)).exp();
    let row = |i: usize| positions.row(i).to_vec();
    let mut w = Array2::zeros((n, n));
    for u in 0..n {
        for v in (u + 1)..n {
            let d2 = sq_dist(&row(u), &row(v));
            if d2.sqrt() <= threshold {
                w[[u, v]] = kernel(d2);
                w[[v, u]] = w[[u, v]];
            }
        }
    }
    for u in 0..n {
        if w.row(u).iter().all(|&x| x == 0.0) {
            let (nearest, d2) = (0..n)
                .filter(|&v| v != u)
                .map(|v| (v, sq_dist(&row(u), &row(v))))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("at least two nodes");
            // exp underflow would leave the node isolated
            let k = kernel(d2).max(f64::MIN_POSITIVE);
            w[[u, nearest]] = k;
            w[[nearest, u]] = k;
        }
    }
    w
}

/// Per-node, per-channel phases in `[0, 2pi)`.
pub fn gen_phases(cfg: &GenConfig, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((cfg.num_nodes, cfg.num_features), |_| {
        rng.random::<f64>() * 2.0 * PI
    })
}

/// Diffusion AR(1) features, `T x N x D`.
pub fn gen_features(cfg: &GenConfig, weights: &Array2<f64>, phase_rng: &mut Rng, noise_rng: &mut Rng) -> Array3<f64> {
    let phases = gen_phases(cfg, phase_rng);
    gen_features_with_phases(cfg, weights, &phases, noise_rng)
}

pub fn gen_features_with_phases(
    cfg: &GenConfig,
    weights: &Array2<f64>,
    phases: &Array2<f64>,
    noise_rng: &mut Rng,
) -> Array3<f64> {
    let (n, d, t) = (cfg.num_nodes, cfg.num_features, cfg.num_steps);
    let mut w_hat = weights.clone();
    for mut row in w_hat.axis_iter_mut(Axis(0)) {
        let s: f64 = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    let omega = 2.0 * PI / cfg.season_period as f64;
    let season = |ti: usize| {
        Array2::from_shape_fn((n, d), |(i, k)| (omega * ti as f64 + phases[[i, k]]).sin())
    };
    let noise = Normal::new(0.0, cfg.noise_std).expect("noise_std validated");
    let rho = cfg.ar_coupling;

    let mut x = Array3::zeros((t, n, d));
    x.index_axis_mut(Axis(0), 0).assign(&season(0));
    for ti in 1..t {
        let prev = x.index_axis(Axis(0), ti - 1).to_owned();
        let mut next = w_hat.dot(&prev) * rho + season(ti) * (1.0 - rho);
        if cfg.noise_std > 0.0 {
            next.mapv_inplace(|v| v + noise.sample(noise_rng));
        }
        x.index_axis_mut(Axis(0), ti).assign(&next);
    }
    x
}

/// Per-timestep adjacency: a static edge survives while the RBF similarity of
/// its endpoints' feature vectors exceeds `dyn_threshold`.
pub fn dynamic_edges(features: &Array3<f64>, weights: &Array2<f64>, cfg: &GenConfig) -> Array3<f64> {
    let (t, n, _) = features.dim();
    let two_s2 = 2.0 * cfg.dyn_sigma * cfg.dyn_sigma;
    let mut a = Array3::zeros((t, n, n));
    for ti in 0..t {
        let x = features.index_axis(Axis(0), ti);
        for u in 0..n {
            for v in (u + 1)..n {
                let w = weights[[u, v]];
                if w == 0.0 {
                    continue;
                }
                let xu = x.row(u).to_vec();
                let xv = x.row(v).to_vec();
                let f = (-sq_dist(&xu, &xv) / two_s2).exp();
                if f > cfg.dyn_threshold {
                    a[[ti, u, v]] = w;
                    a[[ti, v, u]] = w;
                }
            }
        }
    }
    a
}

/// Draws held-out feature and edge masks and assembles the dataset.
///
/// Features are held out independently with probability
/// `feature_missing_rate`. An edge slot of the static graph whose endpoint
/// has a held-out feature at `t` is held out with probability
/// `edge_mask_prob`; every other slot (including pairs outside the static
/// graph) is observed.
pub fn apply_masks(
    features: Array3<f64>,
    adjacency: Array3<f64>,
    weights: &Array2<f64>,
    cfg: &GenConfig,
    feature_rng: &mut Rng,
    edge_rng: &mut Rng,
) -> NtsDataset {
    let (t, n, d) = features.dim();
    let p = cfg.feature_missing_rate;
    let feature_mask = Array3::from_shape_fn((t, n, d), |_| {
        if feature_rng.random::<f64>() < p {
            HELD_OUT
        } else {
            OBSERVED
        }
    });
    let mut edge_mask = Array3::from_elem((t, n, n), OBSERVED);
    for ti in 0..t {
        let touched: Vec<bool> = (0..n)
            .map(|i| (0..d).any(|k| feature_mask[[ti, i, k]] == HELD_OUT))
            .collect();
        for u in 0..n {
            for v in (u + 1)..n {
                let draw = edge_rng.random::<f64>();
                if weights[[u, v]] != 0.0 && (touched[u] || touched[v]) && draw < cfg.edge_mask_prob {
                    edge_mask[[ti, u, v]] = HELD_OUT;
                    edge_mask[[ti, v, u]] = HELD_OUT;
                }
            }
        }
    }
    NtsDataset {
        features,
        feature_mask,
        adjacency,
        edge_mask,
        split: cfg.split_bounds(),
        window: cfg.window,
    }
}

/// Output of a full generator run.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: NtsDataset,
    pub positions: Array2<f64>,
    pub weights: Array2<f64>,
}

pub fn generate(cfg: &GenConfig) -> Result<Generated> {
    cfg.validate()?;
    let seed = cfg.seed;
    let (positions, weights) = gen_static_graph(cfg, &mut rng::stream(seed, rng::POSITIONS));
    let features = gen_features(
        cfg,
        &weights,
        &mut rng::stream(seed, rng::PHASES),
        &mut rng::stream(seed, rng::FEATURE_NOISE),
    );
    let adjacency = dynamic_edges(&features, &weights, cfg);
    let dataset = apply_masks(
        features,
        adjacency,
        &weights,
        cfg,
        &mut rng::stream(seed, rng::FEATURE_MASK),
        &mut rng::stream(seed, rng::EDGE_MASK),
    );
    dataset.validate()?;
    Ok(Generated {
        dataset,
        positions,
        weights,
    })
}
