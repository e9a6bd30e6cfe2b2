//! Reference imputers: per-series mean and low-rank matrix factorization.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2, Array3};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::ObservedView;
use crate::error::{Error, Result};
use crate::rng;

/// Fills every missing entry with the mean of that (node, feature) series'
/// observed entries in `fit_range`, or with the global observed mean when
/// the series has none there. Observed entries pass through.
pub fn mean_impute(view: &ObservedView, fit_range: Range<usize>) -> Result<Array3<f64>> {
    let (t, n, d) = view.obs_features.dim();
    if fit_range.end > t || fit_range.start > fit_range.end {
        return Err(Error::Invalid(format!("fit range {fit_range:?} outside 0..{t}")));
    }
    let obs = view.obs_features.slice(s![fit_range.clone(), .., ..]);
    let mask = view.model_mask.slice(s![fit_range, .., ..]);
    let total: f64 = mask.sum();
    if total == 0.0 {
        return Err(Error::InvalidDataset("no observed feature entries to average".into()));
    }
    let global = obs.sum() / total;
    let mut means = Array2::from_elem((n, d), global);
    for i in 0..n {
        for k in 0..d {
            let m = mask.slice(s![.., i, k]);
            let c = m.sum();
            if c > 0.0 {
                means[[i, k]] = obs.slice(s![.., i, k]).sum() / c;
            }
        }
    }
    Ok(ndarray::Zip::indexed(&view.obs_features)
        .and(&view.model_mask)
        .map_collect(|(_, i, k), &o, &m| if m == 1.0 { o } else { means[[i, k]] }))
}

/// Edge counterpart of [`mean_impute`]: every unobserved slot of pair
/// `(u, v)` gets the mean of that pair's observed weights over all steps,
/// or 0 when the pair is never observed. Observed slots pass through.
pub fn edge_mean_impute(view: &ObservedView) -> Array3<f64> {
    let (_, n, _) = view.obs_adjacency.dim();
    let mut means = Array2::<f64>::zeros((n, n));
    for u in 0..n {
        for v in 0..n {
            let c = view.model_edge_mask.slice(s![.., u, v]).sum();
            if c > 0.0 {
                means[[u, v]] = view.obs_adjacency.slice(s![.., u, v]).sum() / c;
            }
        }
    }
    ndarray::Zip::indexed(&view.obs_adjacency)
        .and(&view.model_edge_mask)
        .map_collect(|(_, u, v), &o, &m| if m == 1.0 { o } else { means[[u, v]] })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfConfig {
    pub rank: usize,
    pub als_iters: usize,
    pub ridge: f64,
    /// Stop once observed-entry RMSE improves by less than this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for MfConfig {
    fn default() -> Self {
        MfConfig {
            rank: 10,
            als_iters: 100,
            ridge: 1e-3,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl MfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("mf rank must be >= 1".into()));
        }
        if !(self.ridge >= 0.0) || !(self.tol >= 0.0) {
            return Err(Error::Config("mf ridge and tol must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MfFit {
    pub features: Array3<f64>,
    pub p: Array2<f64>,
    pub q: Array2<f64>,
    /// Regularized observed-entry objective after init and after each sweep.
    pub objective: Vec<f64>,
    /// Observed-entry RMSE after init and after each sweep.
    pub rmse: Vec<f64>,
}

/// Ridge least-squares rows of `target` given the fixed `other` factor:
/// row `a` solves `(sum_b w_ab o_b o_b^T + ridge I) x = sum_b w_ab y_ab o_b`.
fn solve_rows(y: &Array2<f64>, w: &Array2<f64>, other: &Array2<f64>, ridge: f64, target: &mut Array2<f64>) -> Result<()> {
    let r = other.ncols();
    for a in 0..y.nrows() {
        let mut gram = DMatrix::<f64>::identity(r, r) * ridge;
        let mut rhs = DVector::<f64>::zeros(r);
        for b in 0..y.ncols() {
            if w[[a, b]] == 0.0 {
                continue;
            }
            let o = other.row(b);
            for i in 0..r {
                rhs[i] += y[[a, b]] * o[i];
                for j in 0..r {
                    gram[(i, j)] += o[i] * o[j];
                }
            }
        }
        let x = match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            // unobserved row without ridge: keep the current factor
            None if rhs.iter().all(|&v| v == 0.0) => continue,
            None => gram
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::NonFinite("singular ALS normal equations".into()))?,
        };
        for i in 0..r {
            target[[a, i]] = x[i];
        }
    }
    Ok(())
}

fn residuals(y: &Array2<f64>, w: &Array2<f64>, p: &Array2<f64>, q: &Array2<f64>, ridge: f64) -> (f64, f64) {
    let fit = p.dot(&q.t());
    let mut sq = 0.0;
    let mut count = 0.0;
    for ((&yv, &wv), &f) in y.iter().zip(w.iter()).zip(fit.iter()) {
        if wv != 0.0 {
            sq += (yv - f).powi(2);
            count += 1.0;
        }
    }
    let reg = ridge * (p.iter().map(|v| v * v).sum::<f64>() + q.iter().map(|v| v * v).sum::<f64>());
    (sq + reg, if count > 0.0 { (sq / count).sqrt() } else { 0.0 })
}

/// Alternating ridge least squares on the `T x (N*D)` unfolding.
pub fn mf_impute(view: &ObservedView, cfg: &MfConfig) -> Result<MfFit> {
    cfg.validate()?;
    let (t, n, d) = view.obs_features.dim();
    let c = n * d;
    let y = view
        .obs_features
        .to_shape((t, c))
        .map_err(|e| Error::Shape(e.to_string()))?
        .to_owned();
    let w = view
        .model_mask
        .to_shape((t, c))
        .map_err(|e| Error::Shape(e.to_string()))?
        .to_owned();
    let r = cfg.rank;
    let scale = 1.0 / (r as f64).sqrt();
    let mut gen = rng::stream(cfg.seed, rng::MF_INIT);
    let mut draw = |rows: usize| {
        Array2::from_shape_fn((rows, r), |_| {
            let z: f64 = StandardNormal.sample(&mut gen);
            z * scale
        })
    };
    let mut p = draw(t);
    let mut q = draw(c);
    let (obj, rmse) = residuals(&y, &w, &p, &q, cfg.ridge);
    let mut objective = vec![obj];
    let mut rmses = vec![rmse];
    let yt = y.t().to_owned();
    let wt = w.t().to_owned();
    for _ in 0..cfg.als_iters {
        solve_rows(&y, &w, &q, cfg.ridge, &mut p)?;
        solve_rows(&yt, &wt, &p, cfg.ridge, &mut q)?;
        let (obj, rmse) = residuals(&y, &w, &p, &q, cfg.ridge);
        if !obj.is_finite() {
            return Err(Error::NonFinite("ALS objective".into()));
        }
        let prev = *rmses.last().expect("initial rmse");
        objective.push(obj);
        rmses.push(rmse);
        if prev - rmse < cfg.tol {
            break;
        }
    }
    let fit = p.dot(&q.t());
    let features = Array3::from_shape_fn((t, n, d), |(ti, i, k)| {
        let col = i * d + k;
        if w[[ti, col]] == 1.0 {
            y[[ti, col]]
        } else {
            fit[[ti, col]]
        }
    });
    Ok(MfFit {
        features,
        p,
        q,
        objective,
        rmse: rmses,
    })
}
