//! Tensor-level reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node that
//! owns its output value. Nodes only reference earlier nodes, so the node list
//! is already in topological order and [`Graph::backward`] walks it in reverse.
//!
//! Operations panic on shape mismatches; callers validate user-facing shapes
//! before building a graph.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Softmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Ln { x: Var, floor: f64 },
    PowRows { x: Var, exps: Vec<f64> },
    SumAll(Var),
    MeanAll(Var),
    RowSum(Var),
    PearsonRows(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every named parameter of a graph.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub(crate) fn insert(&mut self, name: String, grad: Tensor) {
        self.by_name.insert(name, grad);
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a trainable leaf under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: &Tensor) -> Var {
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape().len(), 2, "matmul lhs must be a matrix");
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be a matrix");
        let (n, k) = (av.shape()[0], av.shape()[1]);
        let (k2, m) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(
            k,
            k2,
            "matmul inner extents differ: {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a_ip = ad[i * k + p];
                if a_ip == 0.0 {
                    continue;
                }
                let brow = &bd[p * m..(p + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a_ip * b;
                }
            }
        }
        let rg = self.needs(&[a, b]);
        self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), rg)
    }

    /// Adds a length-`M` bias to every row of an `[N, M]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let m = xv.cols();
        assert_eq!(bv.numel(), m, "bias width {} != {m}", bv.numel());
        let bd = bv.data();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &b) in row.iter_mut().zip(bd) {
                *o += b;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.needs(&[x, bias]);
        self.push(Tensor::from_parts(shape, out), Op::AddBias(x, bias), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = xv.shape().to_vec();
        let rg = self.needs(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Relu(x), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let m = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(m) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.needs(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape().to_vec();
        let rg = self.needs(&[a, b]);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = xv.data().iter().map(|&v| f(v)).collect();
        let shape = xv.shape().to_vec();
        let rg = self.needs(&[x]);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln(&mut self, x: Var, floor: f64) -> Var {
        self.map(x, |v| v.max(floor).ln(), Op::Ln { x, floor })
    }

    /// Raises row `i` of `x` to the power `exps[i]`, with the base clamped at 0.
    pub fn pow_rows(&mut self, x: Var, exps: Vec<f64>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(exps.len(), xv.rows(), "one exponent per row required");
        let m = xv.cols();
        let mut out = xv.data().to_vec();
        for (row, &e) in out.chunks_mut(m).zip(&exps) {
            for v in row.iter_mut() {
                *v = v.max(0.0).powf(e);
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.needs(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::PowRows { x, exps }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// `[N, M] -> [N, 1]` row sums.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let m = xv.cols();
        let out: Vec<f64> = xv.data().chunks(m).map(|r| r.iter().sum()).collect();
        let n = out.len();
        let rg = self.needs(&[x]);
        self.push(Tensor::from_parts(vec![n, 1], out), Op::RowSum(x), rg)
    }

    /// Row-wise Pearson distance `1 - r` between two `[N, F]` matrices.
    /// Rows with zero variance in either operand yield 1 and no gradient.
    pub fn pearson_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "pearson operands differ in shape");
        let f = av.cols();
        let out: Vec<f64> = av
            .data()
            .chunks(f)
            .zip(bv.data().chunks(f))
            .map(|(x, y)| match PearsonParts::new(x, y) {
                Some(p) => 1.0 - p.r,
                None => {
                    log::debug!("zero-variance feature row; Pearson distance set to 1");
                    1.0
                }
            })
            .collect();
        let n = out.len();
        let rg = self.needs(&[a, b]);
        self.push(Tensor::from_parts(vec![n, 1], out), Op::PearsonRows(a, b), rg)
    }

    /// Back-propagates from the scalar `loss` and returns the gradient of
    /// every registered parameter. Parameters that do not influence the loss
    /// receive zeros. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            // leaves keep their gradient for collection below
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let mut out = Gradients::default();
        for (name, v) in &self.params {
            let shape = self.nodes[v.0].value.shape().to_vec();
            let g = match grads.get_mut(v.0).and_then(Option::take) {
                Some(g) => Tensor::from_parts(shape, g),
                None => Tensor::zeros(&shape),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let (ad, bd) = (av.data(), bv.data());
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bd[p * m..(p + 1) * m];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let a_ip = ad[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *d += a_ip * gv;
                            }
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::AddBias(x, bias) => {
                if self.nodes[x.0].requires_grad {
                    accumulate(grads, *x, g.to_vec());
                }
                if self.nodes[bias.0].requires_grad {
                    let m = self.nodes[bias.0].value.numel();
                    let mut db = vec![0.0; m];
                    for row in g.chunks(m) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Relu(x) => {
                let xd = self.nodes[x.0].value.data();
                let dx = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let m = node.value.cols();
                let mut dx = vec![0.0; g.len()];
                for ((drow, grow), yrow) in dx.chunks_mut(m).zip(g.chunks(m)).zip(out.chunks(m)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = y * (gv - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                if self.nodes[a.0].requires_grad {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.nodes[b.0].requires_grad {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[a.0].requires_grad {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.nodes[b.0].requires_grad {
                    accumulate(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if self.nodes[a.0].requires_grad {
                    accumulate(grads, *a, g.iter().zip(bd).map(|(x, y)| x * y).collect());
                }
                if self.nodes[b.0].requires_grad {
                    accumulate(grads, *b, g.iter().zip(ad).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.iter().map(|v| c * v).collect()),
            Op::AddScalar(x) => accumulate(grads, *x, g.to_vec()),
            Op::Ln { x, floor } => {
                let xd = self.nodes[x.0].value.data();
                let dx = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &v)| if v > *floor { gv / v } else { 0.0 })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::PowRows { x, exps } => {
                let xv = &self.nodes[x.0].value;
                let m = xv.cols();
                let mut dx = vec![0.0; g.len()];
                for (((drow, grow), xrow), &e) in dx.chunks_mut(m).zip(g.chunks(m)).zip(xv.data().chunks(m)).zip(exps) {
                    for ((d, &gv), &b) in drow.iter_mut().zip(grow).zip(xrow) {
                        *d = gv * pow_derivative(b, e);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let n = self.nodes[x.0].value.numel();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.numel();
                accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::RowSum(x) => {
                let xv = &self.nodes[x.0].value;
                let m = xv.cols();
                let mut dx = Vec::with_capacity(xv.numel());
                for &gv in g {
                    dx.extend(std::iter::repeat_n(gv, m));
                }
                accumulate(grads, *x, dx);
            }
            Op::PearsonRows(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let f = av.cols();
                let (ga, gb) = (self.nodes[a.0].requires_grad, self.nodes[b.0].requires_grad);
                let mut da = vec![0.0; av.numel()];
                let mut db = vec![0.0; bv.numel()];
                for (i, &gv) in g.iter().enumerate() {
                    let (x, y) = (&av.data()[i * f..(i + 1) * f], &bv.data()[i * f..(i + 1) * f]);
                    let Some(p) = PearsonParts::new(x, y) else { continue };
                    let denom = (p.sxx * p.syy).sqrt();
                    for j in 0..f {
                        // d(1 - r) = -dr
                        if ga {
                            da[i * f + j] = -gv * (p.yc[j] / denom - p.r * p.xc[j] / p.sxx);
                        }
                        if gb {
                            db[i * f + j] = -gv * (p.xc[j] / denom - p.r * p.yc[j] / p.syy);
                        }
                    }
                }
                if ga {
                    accumulate(grads, *a, da);
                }
                if gb {
                    accumulate(grads, *b, db);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn pow_derivative(base: f64, e: f64) -> f64 {
    if e == 0.0 {
        0.0
    } else if base > 0.0 {
        e * base.powf(e - 1.0)
    } else if e == 1.0 {
        1.0
    } else {
        0.0
    }
}

/// Centred statistics of one row pair.
pub(crate) struct PearsonParts {
    pub xc: Vec<f64>,
    pub yc: Vec<f64>,
    pub sxx: f64,
    pub syy: f64,
    pub r: f64,
}

impl PearsonParts {
    /// `None` when either row has (numerically) zero variance.
    pub fn new(x: &[f64], y: &[f64]) -> Option<Self> {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let xc: Vec<f64> = x.iter().map(|v| v - mx).collect();
        let yc: Vec<f64> = y.iter().map(|v| v - my).collect();
        let sxx: f64 = xc.iter().map(|v| v * v).sum();
        let syy: f64 = yc.iter().map(|v| v * v).sum();
        let scale_x: f64 = x.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
        let scale_y: f64 = y.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
        if sxx <= 1e-24 * scale_x || syy <= 1e-24 * scale_y {
            return None;
        }
        let sxy: f64 = xc.iter().zip(&yc).map(|(a, b)| a * b).sum();
        let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
        Some(Self { xc, yc, sxx, syy, r })
    }
}
