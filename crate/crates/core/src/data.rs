//! Networked time series: ground truth, tri-state masks, the observed view
//! that models are allowed to read, and the on-disk dataset directory.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array, Array3, ArrayView, ArrayView3, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entry state in a feature or edge mask.
pub const MISSING: u8 = 0;
pub const OBSERVED: u8 = 1;
pub const HELD_OUT: u8 = 2;

/// Contiguous time splits: train `[0, train_end)`, validation
/// `[train_end, val_end)`, test `[val_end, T)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// A networked time series with ground truth and masks.
///
/// `features` is `T x N x D`, `adjacency` is `T x N x N`. Mask entries are
/// [`MISSING`] (truth unknown, stored as 0.0), [`OBSERVED`] (visible to
/// models) or [`HELD_OUT`] (truth known, hidden from models).
#[derive(Debug, Clone, PartialEq)]
pub struct NtsDataset {
    pub features: Array3<f64>,
    pub feature_mask: Array3<u8>,
    pub adjacency: Array3<f64>,
    pub edge_mask: Array3<u8>,
    pub split: SplitBounds,
    /// Default window length recorded in `meta.json`.
    pub window: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    num_nodes: usize,
    num_features: usize,
    num_steps: usize,
    train_end: usize,
    val_end: usize,
    window: usize,
}

impl NtsDataset {
    pub fn num_steps(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn num_nodes(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn num_features(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.split.train_end,
            Split::Val => self.split.train_end..self.split.val_end,
            Split::Test => self.split.val_end..self.num_steps(),
        }
    }

    /// Checks every structural invariant of the dataset.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDataset(m));
        let (t, n, d) = self.features.dim();
        if n == 0 || d == 0 || t == 0 {
            return bad(format!("empty dataset ({t}x{n}x{d})"));
        }
        if self.feature_mask.dim() != (t, n, d) {
            return bad("feature_mask shape differs from features".into());
        }
        if self.adjacency.dim() != (t, n, n) || self.edge_mask.dim() != (t, n, n) {
            return bad("adjacency/edge_mask must be T x N x N".into());
        }
        let SplitBounds { train_end, val_end } = self.split;
        if !(0 < train_end && train_end < val_end && val_end <= t) {
            return bad(format!(
                "split must satisfy 0 < train_end < val_end <= T (got {train_end}, {val_end}, T={t})"
            ));
        }
        for ((idx, &v), &m) in self.features.indexed_iter().zip(self.feature_mask.iter()) {
            check_entry("feature", idx, v, m)?;
        }
        for ((idx, &v), &m) in self.adjacency.indexed_iter().zip(self.edge_mask.iter()) {
            check_entry("edge", idx, v, m)?;
            if v < 0.0 {
                return bad(format!("negative edge weight at {idx:?}"));
            }
        }
        for ti in 0..t {
            for u in 0..n {
                if self.adjacency[[ti, u, u]] != 0.0 {
                    return bad(format!("nonzero diagonal at t={ti}, node={u}"));
                }
                for v in (u + 1)..n {
                    if self.adjacency[[ti, u, v]] != self.adjacency[[ti, v, u]]
                        || self.edge_mask[[ti, u, v]] != self.edge_mask[[ti, v, u]]
                    {
                        return bad(format!("asymmetric edge at t={ti}, ({u},{v})"));
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_entry(kind: &str, idx: (usize, usize, usize), v: f64, m: u8) -> Result<()> {
    match m {
        MISSING if v != 0.0 => Err(Error::InvalidDataset(format!(
            "{kind} {idx:?} has mask 0 but a stored value {v}"
        ))),
        OBSERVED | HELD_OUT if !v.is_finite() => Err(Error::NonFinite(format!(
            "{kind} {idx:?} has mask {m} but value {v}"
        ))),
        MISSING | OBSERVED | HELD_OUT => Ok(()),
        _ => Err(Error::InvalidDataset(format!(
            "{kind} {idx:?} has mask value {m} outside {{0,1,2}}"
        ))),
    }
}

/// What a model is allowed to see: truth at mask-1 slots, zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedView {
    pub obs_features: Array3<f64>,
    pub model_mask: Array3<f64>,
    pub obs_adjacency: Array3<f64>,
    pub model_edge_mask: Array3<f64>,
}

impl ObservedView {
    pub fn num_steps(&self) -> usize {
        self.obs_features.shape()[0]
    }

    pub fn num_nodes(&self) -> usize {
        self.obs_features.shape()[1]
    }

    pub fn num_features(&self) -> usize {
        self.obs_features.shape()[2]
    }
}

pub fn observed_view(d: &NtsDataset) -> ObservedView {
    let visible = |m: &u8| if *m == OBSERVED { 1.0 } else { 0.0 };
    let model_mask = d.feature_mask.map(visible);
    let model_edge_mask = d.edge_mask.map(visible);
    ObservedView {
        obs_features: &d.features * &model_mask,
        obs_adjacency: &d.adjacency * &model_edge_mask,
        model_mask,
        model_edge_mask,
    }
}

/// A contiguous slice `[start, start + length)` of an observed view.
#[derive(Debug, Clone)]
pub struct Window<'a> {
    pub start: usize,
    pub length: usize,
    pub obs_features: ArrayView3<'a, f64>,
    pub model_mask: ArrayView3<'a, f64>,
    pub obs_adjacency: ArrayView3<'a, f64>,
    pub model_edge_mask: ArrayView3<'a, f64>,
}

impl<'a> Window<'a> {
    pub fn at(v: &'a ObservedView, start: usize, length: usize) -> Result<Self> {
        if start + length > v.num_steps() {
            return Err(Error::Invalid(format!(
                "window [{start}, {}) exceeds {} steps",
                start + length,
                v.num_steps()
            )));
        }
        let r = s![start..start + length, .., ..];
        Ok(Window {
            start,
            length,
            obs_features: v.obs_features.slice(r),
            model_mask: v.model_mask.slice(r),
            obs_adjacency: v.obs_adjacency.slice(r),
            model_edge_mask: v.model_edge_mask.slice(r),
        })
    }
}

/// Sliding windows over `range`, in increasing start order. A trailing
/// partial window is dropped.
pub fn window_iter(
    v: &ObservedView,
    length: usize,
    stride: usize,
    range: Range<usize>,
) -> Result<Vec<Window<'_>>> {
    if length < 2 {
        return Err(Error::Invalid(format!("window length must be >= 2 (got {length})")));
    }
    if stride < 1 {
        return Err(Error::Invalid("window stride must be >= 1".into()));
    }
    if range.end > v.num_steps() || range.start > range.end {
        return Err(Error::Invalid(format!(
            "range {range:?} outside 0..{}",
            v.num_steps()
        )));
    }
    if length > range.len() {
        return Err(Error::Invalid(format!(
            "window length {length} exceeds range size {}",
            range.len()
        )));
    }
    (range.start..=range.end - length)
        .step_by(stride)
        .map(|start| Window::at(v, start, length))
        .collect()
}

/// Starts of length-`window` windows covering `range` of a `total`-step
/// series: stride `window` from `range.start`, plus one end-aligned window
/// when the stride leaves a remainder. A range shorter than `window` gets a
/// single window reaching back before `range.start`.
pub fn tile_starts(range: Range<usize>, window: usize, total: usize) -> Result<Vec<usize>> {
    if window == 0 || window > total || range.end > total || range.is_empty() {
        return Err(Error::Invalid(format!(
            "cannot tile {range:?} of {total} steps with window {window}"
        )));
    }
    if range.len() < window {
        return Ok(vec![range.end.saturating_sub(window)]);
    }
    let mut starts: Vec<usize> = (range.start..=range.end - window).step_by(window).collect();
    let last = *starts.last().expect("range fits one window");
    if last + window < range.end {
        starts.push(range.end - window);
    }
    Ok(starts)
}

/// `mask * observed + (1 - mask) * predicted`, elementwise.
pub fn apply_filler<D: Dimension>(
    observed: &ArrayView<f64, D>,
    mask: &ArrayView<f64, D>,
    predicted: &ArrayView<f64, D>,
) -> Result<Array<f64, D>> {
    if observed.shape() != mask.shape() || observed.shape() != predicted.shape() {
        return Err(Error::Shape(format!(
            "filler inputs {:?}, {:?}, {:?}",
            observed.shape(),
            mask.shape(),
            predicted.shape()
        )));
    }
    Ok(Zip::from(observed)
        .and(mask)
        .and(predicted)
        .map_collect(|&o, &m, &p| m * o + (1.0 - m) * p))
}

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn read_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::schema(path, format!("{other:?}")),
    }
}

fn expect_header(path: &Path, rdr: &mut csv::Reader<fs::File>, cols: &[&str]) -> Result<()> {
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?;
    let got: Vec<&str> = headers.iter().collect();
    if got != cols {
        return Err(Error::schema(
            path,
            format!("expected columns {cols:?}, found {got:?}"),
        ));
    }
    Ok(())
}

fn parse_index(path: &Path, field: &str, bound: usize, what: &str) -> Result<usize> {
    let v: usize = field
        .parse()
        .map_err(|_| Error::schema(path, format!("bad {what} index {field:?}")))?;
    if v >= bound {
        return Err(Error::schema(path, format!("{what} index {v} out of range 0..{bound}")));
    }
    Ok(v)
}

fn parse_mask(path: &Path, field: &str) -> Result<u8> {
    match field {
        "0" => Ok(MISSING),
        "1" => Ok(OBSERVED),
        "2" => Ok(HELD_OUT),
        other => Err(Error::schema(
            path,
            format!("mask value {other:?} outside {{0,1,2}}"),
        )),
    }
}

pub(crate) fn parse_value(path: &Path, field: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| Error::schema(path, format!("bad value {field:?}")))
}

/// Reads `(t, a, b, x)` rows into a map keyed by the three indices.
pub(crate) fn read_indexed<V>(
    path: &Path,
    cols: &[&str],
    bounds: [usize; 3],
    mut parse: impl FnMut(&str) -> Result<V>,
) -> Result<Vec<([usize; 3], V)>> {
    let mut rdr = read_csv(path)?;
    expect_header(path, &mut rdr, cols)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != 4 {
            return Err(Error::schema(path, format!("expected 4 fields, got {}", rec.len())));
        }
        let t = parse_index(path, &rec[0], bounds[0], cols[0])?;
        let a = parse_index(path, &rec[1], bounds[1], cols[1])?;
        let b = parse_index(path, &rec[2], bounds[2], cols[2])?;
        out.push(([t, a, b], parse(&rec[3])?));
    }
    Ok(out)
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<NtsDataset> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::schema(&meta_path, e.to_string()))?;
    let (t, n, d) = (meta.num_steps, meta.num_nodes, meta.num_features);

    let mask_path = dir.join("feature_mask.csv");
    let mut feature_mask = Array3::<u8>::zeros((t, n, d));
    for ([ti, i, k], m) in read_indexed(&mask_path, &["t", "node", "feature", "mask"], [t, n, d], |f| {
        parse_mask(&mask_path, f)
    })? {
        feature_mask[[ti, i, k]] = m;
    }

    let feat_path = dir.join("features.csv");
    let mut features = Array3::<f64>::zeros((t, n, d));
    let mut seen = Array3::<bool>::from_elem((t, n, d), false);
    for ([ti, i, k], v) in read_indexed(&feat_path, &["t", "node", "feature", "value"], [t, n, d], |f| {
        parse_value(&feat_path, f)
    })? {
        let m = feature_mask[[ti, i, k]];
        match (m, v) {
            (MISSING, _) => {}
            (_, Some(v)) => {
                features[[ti, i, k]] = v;
                seen[[ti, i, k]] = true;
            }
            (_, None) => {
                return Err(Error::schema(
                    &feat_path,
                    format!("empty value at ({ti},{i},{k}) with mask {m}"),
                ))
            }
        }
    }
    for ((idx, &m), &s) in feature_mask.indexed_iter().zip(seen.iter()) {
        if m != MISSING && !s {
            return Err(Error::schema(
                &feat_path,
                format!("no value for entry {idx:?} with mask {m}"),
            ));
        }
    }

    let emask_path = dir.join("edge_mask.csv");
    let mut edge_mask = Array3::<u8>::zeros((t, n, n));
    let mut mask_rows: HashMap<[usize; 3], u8> = HashMap::new();
    for ([ti, u, v], m) in read_indexed(&emask_path, &["t", "src", "dst", "mask"], [t, n, n], |f| {
        parse_mask(&emask_path, f)
    })? {
        mirror(&emask_path, &mut mask_rows, [ti, u, v], m)?;
        edge_mask[[ti, u, v]] = m;
        edge_mask[[ti, v, u]] = m;
    }
    for ti in 0..t {
        for u in 0..n {
            edge_mask[[ti, u, u]] = OBSERVED;
        }
    }

    let edge_path = dir.join("edges.csv");
    let mut adjacency = Array3::<f64>::zeros((t, n, n));
    let mut weight_rows: HashMap<[usize; 3], u64> = HashMap::new();
    for ([ti, u, v], w) in read_indexed(&edge_path, &["t", "src", "dst", "weight"], [t, n, n], |f| {
        parse_value(&edge_path, f)
    })? {
        let w = w.ok_or_else(|| Error::schema(&edge_path, format!("empty weight at ({ti},{u},{v})")))?;
        mirror(&edge_path, &mut weight_rows, [ti, u, v], w.to_bits())?;
        if edge_mask[[ti, u, v]] == MISSING {
            continue;
        }
        adjacency[[ti, u, v]] = w;
        adjacency[[ti, v, u]] = w;
    }

    let ds = NtsDataset {
        features,
        feature_mask,
        adjacency,
        edge_mask,
        split: SplitBounds {
            train_end: meta.train_end,
            val_end: meta.val_end,
        },
        window: meta.window,
    };
    ds.validate()?;
    Ok(ds)
}

/// Records an undirected row, rejecting self loops and conflicting duplicates.
fn mirror<V: PartialEq + Copy>(
    path: &Path,
    seen: &mut HashMap<[usize; 3], V>,
    [t, u, v]: [usize; 3],
    value: V,
) -> Result<()> {
    if u == v {
        return Err(Error::schema(path, format!("self loop ({u},{u}) at t={t}")));
    }
    let key = [t, u.min(v), u.max(v)];
    match seen.insert(key, value) {
        Some(prev) if prev != value => Err(Error::schema(
            path,
            format!("conflicting entries for ({},{}) at t={t}", key[1], key[2]),
        )),
        _ => Ok(()),
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling and renames it into place, so readers
/// never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes the dataset directory. Floats carry 17 significant digits.
pub fn save_dataset(d: &NtsDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (t, n, dd) = d.features.dim();
    let meta = Meta {
        num_nodes: n,
        num_features: dd,
        num_steps: t,
        train_end: d.split.train_end,
        val_end: d.split.val_end,
        window: d.window,
    };
    write_file(
        &dir.join("meta.json"),
        &serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )?;

    let mut feats = String::from("t,node,feature,value\n");
    let mut fmask = String::from("t,node,feature,mask\n");
    for ((ti, i, k), &m) in d.feature_mask.indexed_iter() {
        fmask.push_str(&format!("{ti},{i},{k},{m}\n"));
        if m != MISSING {
            feats.push_str(&format!("{ti},{i},{k},{}\n", fmt_f64(d.features[[ti, i, k]])));
        }
    }
    write_file(&dir.join("features.csv"), &feats)?;
    write_file(&dir.join("feature_mask.csv"), &fmask)?;

    let mut edges = String::from("t,src,dst,weight\n");
    let mut emask = String::from("t,src,dst,mask\n");
    for ti in 0..t {
        for u in 0..n {
            for v in (u + 1)..n {
                let m = d.edge_mask[[ti, u, v]];
                emask.push_str(&format!("{ti},{u},{v},{m}\n"));
                let w = d.adjacency[[ti, u, v]];
                if m != MISSING && w != 0.0 {
                    edges.push_str(&format!("{ti},{u},{v},{}\n", fmt_f64(w)));
                }
            }
        }
    }
    write_file(&dir.join("edges.csv"), &edges)?;
    write_file(&dir.join("edge_mask.csv"), &emask)?;
    Ok(())
}

/// Time-reverses a `T x ...` tensor along its first axis.
pub fn reverse_time<A: Clone, D: Dimension>(a: &ArrayView<A, D>) -> Array<A, D> {
    let mut v = a.view();
    v.invert_axis(ndarray::Axis(0));
    v.to_owned()
}
