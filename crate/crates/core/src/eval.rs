//! Held-out metrics, the predictions directory format and report emission.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::data::{self, tile_starts, NtsDataset, Split, HELD_OUT};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureMetrics {
    pub mae: f64,
    pub mse: f64,
    pub mre: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    pub frobenius_heldout: f64,
    pub per_window_mean: f64,
    pub count: usize,
}

fn check_range(range: &Range<usize>, total: usize) -> Result<()> {
    if range.start > range.end || range.end > total {
        return Err(Error::Invalid(format!("range {range:?} outside 0..{total}")));
    }
    Ok(())
}

/// MAE, MSE and MRE over held-out entries with `t` in `range`. An empty
/// selection reports zeros with `count == 0`.
pub fn feature_metrics(
    pred: &ArrayView3<f64>,
    truth: &ArrayView3<f64>,
    mask: &ArrayView3<u8>,
    range: Range<usize>,
) -> Result<FeatureMetrics> {
    if pred.shape() != truth.shape() || pred.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?}, truth {:?}, mask {:?}",
            pred.shape(),
            truth.shape(),
            mask.shape()
        )));
    }
    check_range(&range, pred.shape()[0])?;
    let (mut abs, mut sq, mut denom, mut count) = (0.0, 0.0, 0.0, 0usize);
    let r = s![range, .., ..];
    for ((&p, &y), &m) in pred.slice(r).iter().zip(truth.slice(r)).zip(mask.slice(r)) {
        if m == HELD_OUT {
            let e = p - y;
            abs += e.abs();
            sq += e * e;
            denom += y.abs();
            count += 1;
        }
    }
    if count == 0 {
        return Ok(FeatureMetrics {
            mae: 0.0,
            mse: 0.0,
            mre: 0.0,
            count: 0,
        });
    }
    Ok(FeatureMetrics {
        mae: abs / count as f64,
        mse: sq / count as f64,
        mre: if denom > 0.0 { abs / denom } else { 0.0 },
        count,
    })
}

/// Squared error and count over held-out upper-triangle slots in `range`.
fn heldout_sq(
    pred: &ArrayView3<f64>,
    truth: &ArrayView3<f64>,
    mask: &ArrayView3<u8>,
    range: Range<usize>,
) -> (f64, usize) {
    let n = pred.shape()[1];
    let (mut sq, mut count) = (0.0, 0usize);
    for t in range {
        for i in 0..n {
            for j in i + 1..n {
                if mask[[t, i, j]] == HELD_OUT {
                    let e = pred[[t, i, j]] - truth[[t, i, j]];
                    sq += e * e;
                    count += 1;
                }
            }
        }
    }
    (sq, count)
}

/// Frobenius error over held-out edges in `range`, each undirected pair
/// counted once, plus the mean of per-window norms over the windows of
/// `tile_starts(range, window)` that contain a held-out edge.
pub fn link_metrics(
    pred: &ArrayView3<f64>,
    truth: &ArrayView3<f64>,
    mask: &ArrayView3<u8>,
    range: Range<usize>,
    window: usize,
) -> Result<LinkMetrics> {
    if pred.shape() != truth.shape() || pred.shape() != mask.shape() || pred.shape()[1] != pred.shape()[2] {
        return Err(Error::Shape(format!(
            "adjacency prediction {:?}, truth {:?}, mask {:?}",
            pred.shape(),
            truth.shape(),
            mask.shape()
        )));
    }
    let total = pred.shape()[0];
    check_range(&range, total)?;
    let (sq, count) = heldout_sq(pred, truth, mask, range.clone());
    let mut norms = Vec::new();
    if !range.is_empty() {
        let w = window.clamp(1, total);
        for start in tile_starts(range.clone(), w, total)? {
            let sub = start.max(range.start)..(start + w).min(range.end);
            let (wsq, wcount) = heldout_sq(pred, truth, mask, sub);
            if wcount > 0 {
                norms.push(wsq.sqrt());
            }
        }
    }
    let per_window_mean = if norms.is_empty() {
        0.0
    } else {
        norms.iter().sum::<f64>() / norms.len() as f64
    };
    Ok(LinkMetrics {
        frobenius_heldout: sq.sqrt(),
        per_window_mean,
        count,
    })
}

/// Imputed features and adjacency for the steps `[start, start + len)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub start: usize,
    /// `len x N x D`.
    pub features: Array3<f64>,
    /// `len x N x N`, symmetric.
    pub adjacency: Array3<f64>,
}

pub const PRED_FEATURES: &str = "pred_features.csv";
pub const PRED_EDGES: &str = "pred_edges.csv";

impl Predictions {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.features.shape()[0]
    }

    /// Copies a range of full-length tensors.
    pub fn from_full(features: &Array3<f64>, adjacency: &Array3<f64>, range: Range<usize>) -> Self {
        Predictions {
            start: range.start,
            features: features.slice(s![range.clone(), .., ..]).to_owned(),
            adjacency: adjacency.slice(s![range, .., ..]).to_owned(),
        }
    }

    /// Writes every `(t, node, feature)` and every `src < dst` pair of the
    /// range exactly once.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut feats = String::from("t,node,feature,value\n");
        for ((t, i, k), v) in self.features.indexed_iter() {
            writeln!(feats, "{},{i},{k},{}", self.start + t, data::fmt_f64(*v)).expect("string write");
        }
        data::write_file(&dir.join(PRED_FEATURES), &feats)?;
        let (len, n, _) = self.adjacency.dim();
        let mut edges = String::from("t,src,dst,weight\n");
        for t in 0..len {
            for u in 0..n {
                for v in u + 1..n {
                    let w = data::fmt_f64(self.adjacency[[t, u, v]]);
                    writeln!(edges, "{},{u},{v},{w}", self.start + t).expect("string write");
                }
            }
        }
        data::write_file(&dir.join(PRED_EDGES), &edges)
    }

    /// Reads a predictions directory for a series of `total` steps with `n`
    /// nodes and `d` features. Every slot of the covered range must appear
    /// exactly once.
    pub fn read(dir: &Path, total: usize, n: usize, d: usize) -> Result<Self> {
        let fpath = dir.join(PRED_FEATURES);
        let frows = data::read_indexed(&fpath, &["t", "node", "feature", "value"], [total, n, d], |f| {
            data::parse_value(&fpath, f)?.ok_or_else(|| Error::schema(&fpath, "empty value"))
        })?;
        let (start, end) = frows
            .iter()
            .fold((usize::MAX, 0), |(lo, hi), (idx, _)| (lo.min(idx[0]), hi.max(idx[0] + 1)));
        if frows.is_empty() {
            return Err(Error::schema(&fpath, "no predictions"));
        }
        let len = end - start;
        let mut features = Array3::zeros((len, n, d));
        let mut seen = Array3::from_elem((len, n, d), false);
        for ([t, i, k], v) in frows {
            let slot = &mut seen[[t - start, i, k]];
            if *slot {
                return Err(Error::schema(&fpath, format!("duplicate row ({t},{i},{k})")));
            }
            *slot = true;
            features[[t - start, i, k]] = v;
        }
        if let Some((idx, _)) = seen.indexed_iter().find(|(_, s)| !**s) {
            return Err(Error::schema(
                &fpath,
                format!("missing row ({},{},{})", idx.0 + start, idx.1, idx.2),
            ));
        }

        let epath = dir.join(PRED_EDGES);
        let erows = data::read_indexed(&epath, &["t", "src", "dst", "weight"], [total, n, n], |f| {
            data::parse_value(&epath, f)?.ok_or_else(|| Error::schema(&epath, "empty weight"))
        })?;
        let mut adjacency = Array3::zeros((len, n, n));
        let mut seen: HashMap<[usize; 3], ()> = HashMap::new();
        for ([t, u, v], w) in erows {
            if u >= v || t < start || t >= end {
                return Err(Error::schema(
                    &epath,
                    format!("row ({t},{u},{v}) outside the predicted upper triangle"),
                ));
            }
            if seen.insert([t, u, v], ()).is_some() {
                return Err(Error::schema(&epath, format!("duplicate row ({t},{u},{v})")));
            }
            adjacency[[t - start, u, v]] = w;
            adjacency[[t - start, v, u]] = w;
        }
        let expected = len * n * n.saturating_sub(1) / 2;
        if seen.len() != expected {
            return Err(Error::schema(
                &epath,
                format!("{} edge rows, expected {expected}", seen.len()),
            ));
        }
        Ok(Predictions {
            start,
            features,
            adjacency,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub feature: FeatureMetrics,
    pub link: LinkMetrics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seed: Option<u64>,
    pub config_digest: Option<String>,
    /// Left empty by default so that reports are reproducible byte for byte.
    pub runtime_seconds: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub val: SplitMetrics,
    pub test: SplitMetrics,
    pub metadata: ReportMetadata,
}

impl MetricsReport {
    pub fn splits(&self) -> [(Split, &SplitMetrics); 2] {
        [(Split::Val, &self.val), (Split::Test, &self.test)]
    }
}

/// Scores predictions against the dataset's held-out truth on the
/// validation and test ranges.
pub fn evaluate(dataset: &NtsDataset, preds: &Predictions, run_id: &str, metadata: ReportMetadata) -> Result<MetricsReport> {
    let (_, n, d) = dataset.features.dim();
    if preds.features.shape()[1..] != [n, d] || preds.adjacency.shape()[1..] != [n, n] {
        return Err(Error::Shape(format!(
            "predictions {:?} / {:?} for a dataset with {n} nodes and {d} features",
            preds.features.shape(),
            preds.adjacency.shape()
        )));
    }
    let mut metadata = metadata;
    let mut score = |split: Split| -> Result<SplitMetrics> {
        let range = dataset.range(split);
        let m = evaluate_range(dataset, preds, range, dataset.window)?;
        if m.feature.count == 0 {
            metadata.warnings.push(format!("{}: no held-out features", split.as_str()));
        }
        if m.link.count == 0 {
            metadata.warnings.push(format!("{}: no held-out edges", split.as_str()));
        }
        Ok(m)
    };
    let val = score(Split::Val)?;
    let test = score(Split::Test)?;
    Ok(MetricsReport {
        run_id: run_id.to_string(),
        val,
        test,
        metadata,
    })
}

/// Feature and link metrics of `preds` over `range`, which the predictions
/// must cover.
pub fn evaluate_range(dataset: &NtsDataset, preds: &Predictions, range: Range<usize>, window: usize) -> Result<SplitMetrics> {
    let covered = preds.range();
    if range.start < covered.start || range.end > covered.end {
        return Err(Error::Invalid(format!(
            "predictions cover {covered:?} but evaluation needs {range:?}"
        )));
    }
    let sub = range.start - covered.start..range.end - covered.start;
    let r = s![range.clone(), .., ..];
    let feature = feature_metrics(
        &preds.features.slice(s![sub.clone(), .., ..]),
        &dataset.features.slice(r),
        &dataset.feature_mask.slice(r),
        0..range.len(),
    )?;
    let link = link_metrics(
        &preds.adjacency.slice(s![sub, .., ..]),
        &dataset.adjacency.slice(r),
        &dataset.edge_mask.slice(r),
        0..range.len(),
        window,
    )?;
    Ok(SplitMetrics { feature, link })
}

/// `[mae, mse, mre, frob_heldout, count_feat, count_edge]`.
fn row_values(m: &SplitMetrics) -> [f64; 6] {
    [
        m.feature.mae,
        m.feature.mse,
        m.feature.mre,
        m.link.frobenius_heldout,
        m.feature.count as f64,
        m.link.count as f64,
    ]
}

pub const CSV_COLUMNS: [&str; 8] = ["run_id", "split", "mae", "mse", "mre", "frob_heldout", "count_feat", "count_edge"];
const STAT_NAMES: [&str; 6] = ["mae", "mse", "mre", "frob_heldout", "count_feat", "count_edge"];

/// Mean and sample standard deviation of each metric column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub split: Split,
    pub runs: usize,
    pub mean: std::collections::BTreeMap<String, f64>,
    pub std: std::collections::BTreeMap<String, f64>,
}

pub fn aggregate(reports: &[MetricsReport]) -> Vec<Aggregate> {
    [Split::Val, Split::Test]
        .into_iter()
        .map(|split| {
            let rows: Vec<[f64; 6]> = reports
                .iter()
                .map(|r| row_values(if split == Split::Val { &r.val } else { &r.test }))
                .collect();
            let k = rows.len() as f64;
            let mut mean = std::collections::BTreeMap::new();
            let mut std = std::collections::BTreeMap::new();
            for (c, name) in STAT_NAMES.iter().enumerate() {
                let m = rows.iter().map(|r| r[c]).sum::<f64>() / k;
                let var = if rows.len() > 1 {
                    rows.iter().map(|r| (r[c] - m).powi(2)).sum::<f64>() / (k - 1.0)
                } else {
                    0.0
                };
                mean.insert(name.to_string(), m);
                std.insert(name.to_string(), var.sqrt());
            }
            Aggregate {
                split,
                runs: rows.len(),
                mean,
                std,
            }
        })
        .collect()
}

/// Series to draw: held-out predictions against truth for `(node, feature)`
/// pairs over the predicted range.
#[derive(Debug, Clone, Copy)]
pub struct PlotInput<'a> {
    pub dataset: &'a NtsDataset,
    pub preds: &'a Predictions,
    pub pairs: &'a [(usize, usize)],
}

pub const MAX_PLOTS: usize = 4;

/// Writes `metrics.csv`, `metrics.json` and up to [`MAX_PLOTS`] SVG plots.
/// With two or more reports, `mean` and `std` rows follow the run rows.
pub fn emit_report(reports: &[MetricsReport], out: &Path, plots: Option<PlotInput>) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Invalid("report needs at least one metrics file".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut csv = CSV_COLUMNS.join(",");
    csv.push('\n');
    for r in reports {
        for (split, m) in r.splits() {
            let v = row_values(m);
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                r.run_id,
                split.as_str(),
                v[0],
                v[1],
                v[2],
                v[3],
                m.feature.count,
                m.link.count
            )
            .expect("string write");
        }
    }
    let aggregates = if reports.len() > 1 { aggregate(reports) } else { Vec::new() };
    for stat in ["mean", "std"] {
        for a in &aggregates {
            let vals = if stat == "mean" { &a.mean } else { &a.std };
            let cells: Vec<String> = STAT_NAMES.iter().map(|n| vals[*n].to_string()).collect();
            writeln!(csv, "{stat},{},{}", a.split.as_str(), cells.join(",")).expect("string write");
        }
    }
    data::write_file(&out.join("metrics.csv"), &csv)?;

    #[derive(Serialize)]
    struct Full<'a> {
        runs: &'a [MetricsReport],
        aggregate: &'a [Aggregate],
    }
    let json = serde_json::to_string_pretty(&Full {
        runs: reports,
        aggregate: &aggregates,
    })
    .expect("report serializes");
    data::write_file(&out.join("metrics.json"), &json)?;

    if let Some(p) = plots {
        for &(node, feat) in p.pairs.iter().take(MAX_PLOTS) {
            let svg = series_svg(p, node, feat)?;
            data::write_file(&out.join(format!("pred_node{node}_feat{feat}.svg")), &svg)?;
        }
    }
    Ok(())
}

const W: f64 = 640.0;
const H: f64 = 240.0;
const PAD: f64 = 32.0;

fn series_svg(p: PlotInput, node: usize, feat: usize) -> Result<String> {
    let (_, n, d) = p.dataset.features.dim();
    if node >= n || feat >= d {
        return Err(Error::Invalid(format!("plot pair ({node},{feat}) outside {n} nodes x {d} features")));
    }
    let range = p.preds.range();
    let truth: Vec<(usize, f64, u8)> = range
        .clone()
        .map(|t| (t, p.dataset.features[[t, node, feat]], p.dataset.feature_mask[[t, node, feat]]))
        .collect();
    let pred: Vec<f64> = (0..range.len()).map(|i| p.preds.features[[i, node, feat]]).collect();
    let known = truth.iter().filter(|s| s.2 != data::MISSING).map(|s| s.1);
    let (lo, hi) = known
        .chain(pred.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0) };
    let span = (range.len().max(2) - 1) as f64;
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / span;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .expect("string write");
    writeln!(
        svg,
        r#"<text x="{PAD}" y="18" font-family="sans-serif" font-size="12">node {node}, feature {feat}, t {}..{}</text>"#,
        range.start, range.end
    )
    .expect("string write");
    let truth_pts: Vec<String> = truth
        .iter()
        .enumerate()
        .filter(|(_, s)| s.2 != data::MISSING)
        .map(|(i, s)| format!("{:.2},{:.2}", x(i), y(s.1)))
        .collect();
    let pred_pts: Vec<String> = pred.iter().enumerate().map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v))).collect();
    writeln!(
        svg,
        r#"<polyline fill="none" stroke="black" stroke-width="1" points="{}"/>"#,
        truth_pts.join(" ")
    )
    .expect("string write");
    writeln!(
        svg,
        r##"<polyline fill="none" stroke="#d62728" stroke-width="1" points="{}"/>"##,
        pred_pts.join(" ")
    )
    .expect("string write");
    for (i, s) in truth.iter().enumerate().filter(|(_, s)| s.2 == HELD_OUT) {
        writeln!(
            svg,
            r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#1f77b4"/>"##,
            x(i),
            y(s.1)
        )
        .expect("string write");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))
}

pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    data::write_file(path, &json)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::OBSERVED;
    use crate::synth::{generate, GenConfig};
    use ndarray::Array3;

    fn one(v: f64) -> Array3<f64> {
        Array3::from_elem((1, 1, 1), v)
    }

    #[test]
    fn feature_metric_cases() {
        let m = Array3::from_elem((1, 1, 1), HELD_OUT);
        let r = feature_metrics(&one(5.0).view(), &one(4.0).view(), &m.view(), 0..1).unwrap();
        assert_eq!(r, FeatureMetrics { mae: 1.0, mse: 1.0, mre: 0.25, count: 1 });
        let r = feature_metrics(&one(4.0).view(), &one(4.0).view(), &m.view(), 0..1).unwrap();
        assert_eq!((r.mae, r.mse, r.mre, r.count), (0.0, 0.0, 0.0, 1));
        let none = Array3::from_elem((1, 1, 1), OBSERVED);
        let r = feature_metrics(&one(5.0).view(), &one(4.0).view(), &none.view(), 0..1).unwrap();
        assert_eq!(r.count, 0);
        assert_eq!(r.mae, 0.0);
        assert!(feature_metrics(&one(5.0).view(), &Array3::zeros((2, 1, 1)).view(), &m.view(), 0..1).is_err());
    }

    #[test]
    fn link_metric_cases() {
        let mut mask = Array3::from_elem((2, 3, 3), OBSERVED);
        mask[[1, 0, 2]] = HELD_OUT;
        mask[[1, 2, 0]] = HELD_OUT;
        let truth = Array3::zeros((2, 3, 3));
        let mut pred = truth.clone();
        pred[[1, 0, 2]] = 3.0;
        pred[[1, 2, 0]] = 3.0;
        let r = link_metrics(&pred.view(), &truth.view(), &mask.view(), 0..2, 2).unwrap();
        assert_eq!(r, LinkMetrics { frobenius_heldout: 3.0, per_window_mean: 3.0, count: 1 });
        let r = link_metrics(&truth.view(), &truth.view(), &mask.view(), 0..2, 2).unwrap();
        assert_eq!((r.frobenius_heldout, r.count), (0.0, 1));
        let all = Array3::from_elem((2, 3, 3), OBSERVED);
        assert_eq!(link_metrics(&pred.view(), &truth.view(), &all.view(), 0..2, 2).unwrap().count, 0);
    }

    #[test]
    fn per_window_mean_averages_window_norms() {
        let mut mask = Array3::from_elem((4, 2, 2), OBSERVED);
        let truth = Array3::zeros((4, 2, 2));
        let mut pred = truth.clone();
        for (t, e) in [(0, 1.0), (3, 3.0)] {
            mask[[t, 0, 1]] = HELD_OUT;
            pred[[t, 0, 1]] = e;
        }
        let r = link_metrics(&pred.view(), &truth.view(), &mask.view(), 0..4, 2).unwrap();
        assert_eq!(r.per_window_mean, 2.0);
        assert_eq!(r.frobenius_heldout, 10f64.sqrt());
    }

    fn dataset() -> NtsDataset {
        generate(&GenConfig {
            num_nodes: 5,
            num_steps: 40,
            window: 6,
            ..GenConfig::default()
        })
        .unwrap()
        .dataset
    }

    fn truth_preds(d: &NtsDataset) -> Predictions {
        let t = d.num_steps();
        Predictions::from_full(&d.features, &d.adjacency, d.split.train_end..t)
    }

    #[test]
    fn predictions_round_trip_and_coverage_is_checked() {
        let d = dataset();
        let p = truth_preds(&d);
        let dir = tempfile::tempdir().unwrap();
        p.write(dir.path()).unwrap();
        let back = Predictions::read(dir.path(), 40, 5, 1).unwrap();
        assert_eq!(back, p);

        let path = dir.path().join(PRED_FEATURES);
        let text = fs::read_to_string(&path).unwrap();
        let fewer: String = text.lines().filter(|l| !l.starts_with(&format!("{},2,", d.split.train_end + 1))).map(|l| format!("{l}\n")).collect();
        fs::write(&path, fewer).unwrap();
        assert!(matches!(Predictions::read(dir.path(), 40, 5, 1), Err(Error::Schema { .. })));
    }

    #[test]
    fn evaluate_truth_scores_zero() {
        let d = dataset();
        let r = evaluate(&d, &truth_preds(&d), "truth", ReportMetadata::default()).unwrap();
        assert_eq!(r.val.feature.mae, 0.0);
        assert_eq!(r.test.link.frobenius_heldout, 0.0);
        assert!(r.val.feature.count > 0);
        let short = Predictions::from_full(&d.features, &d.adjacency, d.split.val_end..40);
        assert!(evaluate(&d, &short, "x", ReportMetadata::default()).is_err());
    }

    #[test]
    fn metrics_ignore_observed_truth() {
        let d = dataset();
        let mut preds = truth_preds(&d);
        preds.features.mapv_inplace(|v| v + 0.5);
        let a = evaluate(&d, &preds, "a", ReportMetadata::default()).unwrap();
        let mut e = d.clone();
        for ((idx, m), v) in e.feature_mask.indexed_iter().zip(e.features.iter_mut()) {
            if *m == OBSERVED && idx.0 % 2 == 0 {
                *v += 10.0;
            }
        }
        assert_eq!(evaluate(&e, &preds, "a", ReportMetadata::default()).unwrap(), a);
        assert!(a.val.feature.mae * a.val.feature.mae <= a.val.feature.mse + 1e-15);
    }

    fn fake(run: &str, mae: f64) -> MetricsReport {
        let s = SplitMetrics {
            feature: FeatureMetrics { mae, mse: mae * mae + 0.1, mre: mae / 4.0, count: 10 },
            link: LinkMetrics { frobenius_heldout: 2.0 * mae, per_window_mean: mae, count: 3 },
        };
        MetricsReport {
            run_id: run.into(),
            val: s.clone(),
            test: s,
            metadata: ReportMetadata::default(),
        }
    }

    #[test]
    fn single_report_has_two_rows() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&[fake("a", 1.0)], dir.path(), None).unwrap();
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_COLUMNS.join(","));
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("a,val,1,"));
        assert!(lines[2].starts_with("a,test,"));
        assert!(emit_report(&[], dir.path(), None).is_err());
    }

    #[test]
    fn aggregation_matches_direct_computation() {
        let maes = [1.0, 1.5, 4.0];
        let reports: Vec<_> = maes.iter().enumerate().map(|(i, &m)| fake(&format!("s{i}"), m)).collect();
        let dir = tempfile::tempdir().unwrap();
        emit_report(&reports, dir.path(), None).unwrap();
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let mean_row = csv.lines().find(|l| l.starts_with("mean,val,")).unwrap();
        let std_row = csv.lines().find(|l| l.starts_with("std,val,")).unwrap();
        let mean: f64 = mean_row.split(',').nth(2).unwrap().parse().unwrap();
        let std: f64 = std_row.split(',').nth(2).unwrap().parse().unwrap();
        let m = (1.0 + 1.5 + 4.0) / 3.0;
        let s = (((1.0f64 - m).powi(2) + (1.5f64 - m).powi(2) + (4.0f64 - m).powi(2)) / 2.0).sqrt();
        assert!((mean - m).abs() <= 1e-12);
        assert!((std - s).abs() <= 1e-12);
        assert_eq!(csv.lines().count(), 1 + 6 + 4);
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
        assert_eq!(json["runs"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn svg_plots_parse() {
        let d = dataset();
        let mut preds = truth_preds(&d);
        preds.features.mapv_inplace(|v| v * 0.9);
        let dir = tempfile::tempdir().unwrap();
        let pairs = [(0, 0), (3, 0), (4, 0), (1, 0), (2, 0)];
        emit_report(
            &[fake("a", 1.0)],
            dir.path(),
            Some(PlotInput { dataset: &d, preds: &preds, pairs: &pairs }),
        )
        .unwrap();
        let svgs: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "svg"))
            .collect();
        assert_eq!(svgs.len(), MAX_PLOTS);
        for e in svgs {
            let text = fs::read_to_string(e.path()).unwrap();
            let doc = roxmltree::Document::parse(&text).unwrap();
            assert_eq!(doc.root_element().tag_name().name(), "svg");
            assert_eq!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count(), 2);
        }
    }
}
