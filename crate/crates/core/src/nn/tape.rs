//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D array; row vectors stand in for vectors
//! and `1 x 1` arrays for scalars. Operations append a node and return a
//! [`Var`] handle. [`Tape::backward`] walks the nodes in reverse and returns
//! the gradient of a scalar node with respect to every parameter leaf.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, Axis, Zip};

use super::params::ParameterStore;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sqrt(Var),
    Sum(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    BroadcastRows(Var),
    TimeEncode(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

/// Parameter gradients keyed by entry name.
pub type Gradients = BTreeMap<String, Array2<f64>>;

pub struct Tape<'p> {
    params: &'p ParameterStore,
    nodes: Vec<Node>,
    param_vars: BTreeMap<String, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(4096),
            param_vars: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParameterStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let tracked = match &op {
            Op::Leaf => false,
            Op::ConcatCols(vs) => vs.iter().any(|v| self.nodes[v.0].tracked),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => {
                self.nodes[a.0].tracked || self.nodes[b.0].tracked
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Abs(a)
            | Op::Clamp(a, _, _)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::BroadcastRows(a)
            | Op::TimeEncode(a, _) => self.nodes[a.0].tracked,
        };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// The leaf for parameter `name`, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let value = self
            .params
            .values(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name:?}")))?
            .clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::Shape(format!("matmul {ar}x{ac} by {br}x{bc}")));
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, ac) = self.shape(a);
        if self.shape(bias) != (1, ac) {
            return Err(Error::Shape(format!(
                "bias {:?} for input with {ac} columns",
                self.shape(bias)
            )));
        }
        let v = self.value(a) + self.value(bias);
        Ok(self.push(v, Op::AddBias(a, bias)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.axis_iter_mut(Axis(0)) {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let s = row.sum();
            row /= s;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.shape(p)).collect();
            return Err(Error::Shape(format!("concat of {shapes:?}")));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("row counts checked");
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Repeats a `1 x c` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r != 1 {
            return Err(Error::Shape(format!("broadcast_rows expects one row, got {r}")));
        }
        let v = self
            .value(a)
            .broadcast((rows, c))
            .expect("1 x c broadcasts")
            .to_owned();
        Ok(self.push(v, Op::BroadcastRows(a)))
    }

    /// `sqrt(1/k) [cos(w_1 t), sin(w_1 t), ..., cos(w_k t), sin(w_k t)]` for a
    /// `1 x k` frequency row.
    pub fn time_encode(&mut self, freq: Var, t: f64) -> Result<Var> {
        let (r, k) = self.shape(freq);
        if r != 1 || k == 0 {
            return Err(Error::Shape(format!("time encoding frequencies {r}x{k}")));
        }
        let scale = (1.0 / k as f64).sqrt();
        let w = self.value(freq);
        let mut v = Array2::zeros((1, 2 * k));
        for j in 0..k {
            v[[0, 2 * j]] = scale * (w[[0, j]] * t).cos();
            v[[0, 2 * j + 1]] = scale * (w[[0, j]] * t).sin();
        }
        Ok(self.push(v, Op::TimeEncode(freq, t)))
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = &node.value;
            let mut send = |v: Var, d: Array2<f64>| {
                if !self.nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves are skipped"),
                Op::MatMul(a, b) => {
                    send(*a, g.dot(&self.value(*b).t()));
                    send(*b, self.value(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, -&g);
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    send(*a, &g * self.value(*b));
                    send(*b, &g * self.value(*a));
                }
                Op::AddBias(a, b) => {
                    send(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(*a, g);
                }
                Op::Scale(a, k) => send(*a, g * *k),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    send(*a, Zip::from(&g).and(x).map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 }));
                }
                Op::Sigmoid(a) => send(*a, Zip::from(&g).and(y).map_collect(|&g, &y| g * y * (1.0 - y))),
                Op::Tanh(a) => send(*a, Zip::from(&g).and(y).map_collect(|&g, &y| g * (1.0 - y * y))),
                Op::Exp(a) => send(*a, g * y),
                Op::Abs(a) => {
                    let x = self.value(*a);
                    send(*a, Zip::from(&g).and(x).map_collect(|&g, &x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }));
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    send(*a, Zip::from(&g).and(x).map_collect(|&g, &x| if x > *lo && x < *hi { g } else { 0.0 }));
                }
                Op::Sqrt(a) => send(*a, Zip::from(&g).and(y).map_collect(|&g, &y| if y > 0.0 { g / (2.0 * y) } else { 0.0 })),
                Op::Sum(a) => {
                    let shape = self.shape(*a);
                    send(*a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::Transpose(a) => send(*a, g.t().to_owned()),
                Op::SoftmaxRows(a) => {
                    let mut d = Array2::zeros(g.dim());
                    for ((mut dr, gr), yr) in d.axis_iter_mut(Axis(0)).zip(g.axis_iter(Axis(0))).zip(y.axis_iter(Axis(0))) {
                        let dot = gr.dot(&yr);
                        Zip::from(&mut dr).and(&gr).and(&yr).for_each(|d, &g, &y| *d = y * (g - dot));
                    }
                    send(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        send(p, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::BroadcastRows(a) => send(*a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                Op::TimeEncode(a, t) => {
                    let w = self.value(*a);
                    let k = w.ncols();
                    let scale = (1.0 / k as f64).sqrt();
                    let d = Array2::from_shape_fn((1, k), |(_, j)| {
                        let (sn, cs) = (w[[0, j]] * t).sin_cos();
                        scale * t * (-g[[0, 2 * j]] * sn + g[[0, 2 * j + 1]] * cs)
                    });
                    send(*a, d);
                }
            }
        }

        let mut out = Gradients::new();
        for (name, v) in &self.param_vars {
            if v.0 <= loss.0 {
                if let Some(g) = grads[v.0].take() {
                    out.insert(name.clone(), g);
                    continue;
                }
            }
            out.insert(name.clone(), Array2::zeros(self.shape(*v)));
        }
        Ok(out)
    }
}
