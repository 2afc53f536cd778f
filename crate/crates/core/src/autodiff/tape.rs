//! Reverse-mode tape over [`Tensor`]s.
//!
//! Every op appends a node holding its output value and whatever the backward pass needs.
//! Node indices increase along the forward pass, so walking them in reverse is a valid
//! reverse topological order; each node is visited exactly once.
//!
//! Row-wise ops treat a `[rows, features]` tensor as a stack of independent samples. Graph
//! ops additionally read the row axis as `blocks x nodes`, one block per example, so a whole
//! mini-batch goes through a single node.

use std::sync::Arc;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};
use crate::grid::{GridDims, RegionGraph};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BnMode<'a, S> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the given running mean and variance.
    Eval { mean: &'a [S], var: &'a [S] },
}

/// Batch statistics produced by a train-mode batch norm, for running-average updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Dense { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Add(Var, Var),
    Concat(Var, Var),
    NeighborMean { x: Var, graph: Arc<RegionGraph> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S>, train: bool },
    Dropout { x: Var, mask: Vec<S> },
    AvgPool { x: Var, fine: GridDims },
    Unpool { x: Var, fine: GridDims },
    RepeatRows { x: Var, times: usize },
    Patches3x3 { x: Var, dims: GridDims },
    Mse { pred: Var, target: Var },
    Mae { pred: Var, target: Var },
    Sum(Var),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients of one scalar output with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<S>) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn check_2d<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, format!("expected a 2-D tensor, got {:?}", t.shape())));
    }
    Ok(())
}

fn blocks_of(op: &'static str, rows: usize, nodes: usize) -> Result<usize> {
    if nodes == 0 || rows % nodes != 0 {
        return Err(Error::shape(op, format!("{rows} rows is not a multiple of {nodes} nodes")));
    }
    Ok(rows / nodes)
}

/// Fine-grid nodes covered by each coarse cell under 2x2 pooling with edge replication.
fn pool_sources(fine: GridDims) -> Vec<[usize; 4]> {
    let coarse = fine.pooled();
    let mut out = Vec::with_capacity(coarse.n_nodes());
    for r in 0..coarse.rows {
        for c in 0..coarse.cols {
            let mut cell = [0; 4];
            for (k, (dr, dc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let rr = (2 * r + dr).min(fine.rows - 1);
                let cc = (2 * c + dc).min(fine.cols - 1);
                cell[k] = rr * fine.cols + cc;
            }
            out.push(cell);
        }
    }
    out
}

/// Source node for each of the nine 3x3 offsets around every node, `None` past the border.
fn patch_sources(dims: GridDims) -> Vec<[Option<usize>; 9]> {
    let mut out = Vec::with_capacity(dims.n_nodes());
    for r in 0..dims.rows as isize {
        for c in 0..dims.cols as isize {
            let mut cell = [None; 9];
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < dims.rows && (cc as usize) < dims.cols {
                        cell[((dr + 1) * 3 + dc + 1) as usize] = Some(rr as usize * dims.cols + cc as usize);
                    }
                }
            }
            out.push(cell);
        }
    }
    out
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite output from {:?}", std::mem::discriminant(&op))));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds an input or parameter. Leaves receive gradients but have no parents.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// `y = x W^T + b` for `x: [rows, in]`, `W: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        check_2d("dense", xv)?;
        check_2d("dense", wv)?;
        let (rows, fin) = (xv.rows(), xv.cols());
        let fout = wv.rows();
        if wv.cols() != fin {
            return Err(Error::shape("dense", format!("x {:?} vs W {:?}", xv.shape(), wv.shape())));
        }
        if let Some(b) = b {
            if self.value(b).len() != fout {
                return Err(Error::shape("dense", format!("bias {:?} for {fout} outputs", self.value(b).shape())));
            }
        }
        let mut out = Tensor::zeros(&[rows, fout]);
        {
            let (xd, wd) = (xv.data(), wv.data());
            let od = out.data_mut();
            for r in 0..rows {
                let xr = &xd[r * fin..(r + 1) * fin];
                for o in 0..fout {
                    let wr = &wd[o * fin..(o + 1) * fin];
                    let mut acc = S::zero();
                    for i in 0..fin {
                        acc += xr[i] * wr[i];
                    }
                    od[r * fout + o] = acc;
                }
            }
            if let Some(b) = b {
                let bd = self.value(b).data();
                for r in 0..rows {
                    for o in 0..fout {
                        od[r * fout + o] += bd[o];
                    }
                }
            }
        }
        self.push(out, Op::Dense { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push(out, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        self.push(out, Op::Add(a, b))
    }

    /// Feature-wise concatenation of `[rows, f1]` and `[rows, f2]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_2d("concat", av)?;
        check_2d("concat", bv)?;
        if av.rows() != bv.rows() {
            return Err(Error::shape("concat", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let (rows, f1, f2) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(rows * (f1 + f2));
        for r in 0..rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Tensor::from_vec(&[rows, f1 + f2], data)?;
        self.push(out, Op::Concat(a, b))
    }

    /// Mean of each node's neighbor rows, block by block. Isolated nodes get a zero row.
    ///
    /// Each mean sums the neighbor values in ascending value order, so the result is
    /// bit-identical under any reordering of neighbor lists or relabeling of nodes.
    pub fn neighbor_mean(&mut self, x: Var, graph: &Arc<RegionGraph>) -> Result<Var> {
        let xv = self.value(x);
        check_2d("neighbor_mean", xv)?;
        let n = graph.n_nodes();
        let blocks = blocks_of("neighbor_mean", xv.rows(), n)?;
        let f = xv.cols();
        let mut out = Tensor::zeros(&[xv.rows(), f]);
        let xd = xv.data();
        let od = out.data_mut();
        let mut buf: Vec<S> = Vec::with_capacity(8);
        for blk in 0..blocks {
            let base = blk * n;
            for i in 0..n {
                let nbrs = graph.neighbors(i);
                if nbrs.is_empty() {
                    continue;
                }
                let inv = S::one() / S::of(nbrs.len() as f64);
                for k in 0..f {
                    buf.clear();
                    buf.extend(nbrs.iter().map(|&u| xd[(base + u) * f + k]));
                    buf.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                    let mut acc = S::zero();
                    for &v in &buf {
                        acc += v;
                    }
                    od[(base + i) * f + k] = acc * inv;
                }
            }
        }
        self.push(
            out,
            Op::NeighborMean {
                x,
                graph: Arc::clone(graph),
            },
        )
    }

    /// Per-feature batch normalization over all rows. Train mode also returns the batch
    /// statistics so the caller can update running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, S>,
        eps: S,
    ) -> Result<(Var, Option<BatchStats<S>>)> {
        let xv = self.value(x);
        check_2d("batch_norm", xv)?;
        let (rows, f) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != f || bv.len() != f {
            return Err(Error::shape("batch_norm", format!("{f} features, gamma {:?}", gv.shape())));
        }
        let xd = xv.data();
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if rows < 2 {
                    return Err(Error::BatchTooSmall { rows });
                }
                let m = S::of(rows as f64);
                let mut mean = vec![S::zero(); f];
                for r in 0..rows {
                    for k in 0..f {
                        mean[k] += xd[r * f + k];
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                let mut var = vec![S::zero(); f];
                for r in 0..rows {
                    for k in 0..f {
                        let d = xd[r * f + k] - mean[k];
                        var[k] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != f || var.len() != f {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![S::zero(); rows * f];
        let mut out = Tensor::zeros(&[rows, f]);
        {
            let (gd, bd) = (gv.data(), bv.data());
            let od = out.data_mut();
            for r in 0..rows {
                for k in 0..f {
                    let h = (xd[r * f + k] - mean[k]) * inv_std[k];
                    xhat[r * f + k] = h;
                    od[r * f + k] = h * gd[k] + bd[k];
                }
            }
        }
        let train = stats.is_some();
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )?;
        Ok((v, stats))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        let keep = S::of(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<S> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let mut out = xv.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout { x, mask })
    }

    /// 2x2 average pooling over the node axis read as a `fine` grid, block by block. Odd
    /// extents are padded by replicating the last row/column.
    pub fn avg_pool(&mut self, x: Var, fine: GridDims) -> Result<Var> {
        let xv = self.value(x);
        check_2d("avg_pool", xv)?;
        let blocks = blocks_of("avg_pool", xv.rows(), fine.n_nodes())?;
        let f = xv.cols();
        let sources = pool_sources(fine);
        let cn = sources.len();
        let quarter = S::of(0.25);
        let mut out = Tensor::zeros(&[blocks * cn, f]);
        let (xd, od) = (xv.data(), out.data_mut());
        for blk in 0..blocks {
            for (ci, src) in sources.iter().enumerate() {
                for k in 0..f {
                    let mut acc = S::zero();
                    for &s in src {
                        acc += xd[(blk * fine.n_nodes() + s) * f + k];
                    }
                    od[(blk * cn + ci) * f + k] = acc * quarter;
                }
            }
        }
        self.push(out, Op::AvgPool { x, fine })
    }

    /// Nearest-neighbor upsampling back onto the `fine` grid, cropping any padding.
    pub fn unpool(&mut self, x: Var, fine: GridDims) -> Result<Var> {
        let xv = self.value(x);
        check_2d("unpool", xv)?;
        let coarse = fine.pooled();
        let blocks = blocks_of("unpool", xv.rows(), coarse.n_nodes())?;
        let f = xv.cols();
        let mut out = Tensor::zeros(&[blocks * fine.n_nodes(), f]);
        let (xd, od) = (xv.data(), out.data_mut());
        for blk in 0..blocks {
            for r in 0..fine.rows {
                for c in 0..fine.cols {
                    let src = (blk * coarse.n_nodes() + (r / 2) * coarse.cols + c / 2) * f;
                    let dst = (blk * fine.n_nodes() + r * fine.cols + c) * f;
                    od[dst..dst + f].copy_from_slice(&xd[src..src + f]);
                }
            }
        }
        self.push(out, Op::Unpool { x, fine })
    }

    /// Repeats each row `times` times consecutively: `[b, f] -> [b * times, f]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let xv = self.value(x);
        check_2d("repeat_rows", xv)?;
        let (rows, f) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(rows * times * f);
        for r in 0..rows {
            for _ in 0..times {
                data.extend_from_slice(xv.row(r));
            }
        }
        let out = Tensor::from_vec(&[rows * times, f], data)?;
        self.push(out, Op::RepeatRows { x, times })
    }

    /// Gathers each node's zero-padded 3x3 neighborhood into one row of `9 * f` features,
    /// offsets ordered row-major from the upper-left (`-1, -1`) to (`+1, +1`). A dense map on
    /// the result is a same-padding 3x3 convolution.
    pub fn patches3x3(&mut self, x: Var, dims: GridDims) -> Result<Var> {
        let xv = self.value(x);
        check_2d("patches3x3", xv)?;
        let n = dims.n_nodes();
        let blocks = blocks_of("patches3x3", xv.rows(), n)?;
        let f = xv.cols();
        let sources = patch_sources(dims);
        let mut out = Tensor::zeros(&[xv.rows(), 9 * f]);
        let (xd, od) = (xv.data(), out.data_mut());
        for blk in 0..blocks {
            for (i, src) in sources.iter().enumerate() {
                let dst = (blk * n + i) * 9 * f;
                for (k, s) in src.iter().enumerate() {
                    if let Some(s) = s {
                        let from = (blk * n + s) * f;
                        od[dst + k * f..dst + (k + 1) * f].copy_from_slice(&xd[from..from + f]);
                    }
                }
            }
        }
        self.push(out, Op::Patches3x3 { x, dims })
    }

    fn loss_operands(&self, op: &'static str, pred: Var, target: Var) -> Result<()> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.len() != t.len() || p.is_empty() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        Ok(())
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.loss_operands("mse", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let sum: S = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let out = Tensor::scalar(sum / S::of(p.len() as f64));
        self.push(out, Op::Mse { pred, target })
    }

    pub fn mae(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.loss_operands("mae", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let sum: S = p.iter().zip(t).map(|(&a, &b)| (a - b).abs()).sum();
        let out = Tensor::scalar(sum / S::of(p.len() as f64));
        self.push(out, Op::Mae { pred, target })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: S = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Back-propagates from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>> {
        if self.value(output).len() != 1 {
            return Err(Error::shape("backward", format!("output must be scalar, got {:?}", self.value(output).shape())));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), S::one()));

        fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let gd = g.data();
            match &node.op {
                Op::Leaf => {}
                Op::Dense { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (rows, fin, fout) = (xv.rows(), xv.cols(), wv.rows());
                    let (xd, wd) = (xv.data(), wv.data());
                    let mut dx = Tensor::zeros(xv.shape());
                    let mut dw = Tensor::zeros(wv.shape());
                    {
                        let (dxd, dwd) = (dx.data_mut(), dw.data_mut());
                        for r in 0..rows {
                            let xr = &xd[r * fin..(r + 1) * fin];
                            for o in 0..fout {
                                let go = gd[r * fout + o];
                                if go == S::zero() {
                                    continue;
                                }
                                let wr = &wd[o * fin..(o + 1) * fin];
                                let dxr = &mut dxd[r * fin..(r + 1) * fin];
                                for i in 0..fin {
                                    dxr[i] += go * wr[i];
                                }
                                let dwr = &mut dwd[o * fin..(o + 1) * fin];
                                for i in 0..fin {
                                    dwr[i] += go * xr[i];
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        let mut db = Tensor::zeros(self.value(*b).shape());
                        let dbd = db.data_mut();
                        for r in 0..rows {
                            for o in 0..fout {
                                dbd[o] += gd[r * fout + o];
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g.clone();
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= S::zero() {
                            *d = S::zero();
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Concat(a, b) => {
                    let (f1, f2) = (self.value(*a).cols(), self.value(*b).cols());
                    let rows = self.value(*a).rows();
                    let mut da = Vec::with_capacity(rows * f1);
                    let mut db = Vec::with_capacity(rows * f2);
                    for r in 0..rows {
                        let row = &gd[r * (f1 + f2)..(r + 1) * (f1 + f2)];
                        da.extend_from_slice(&row[..f1]);
                        db.extend_from_slice(&row[f1..]);
                    }
                    accumulate(&mut grads, *a, Tensor::from_vec(self.value(*a).shape(), da)?);
                    accumulate(&mut grads, *b, Tensor::from_vec(self.value(*b).shape(), db)?);
                }
                Op::NeighborMean { x, graph } => {
                    let xv = self.value(*x);
                    let n = graph.n_nodes();
                    let f = xv.cols();
                    let blocks = xv.rows() / n;
                    let mut dx = Tensor::zeros(xv.shape());
                    let dxd = dx.data_mut();
                    for blk in 0..blocks {
                        let base = blk * n;
                        for i in 0..n {
                            let nbrs = graph.neighbors(i);
                            if nbrs.is_empty() {
                                continue;
                            }
                            let inv = S::one() / S::of(nbrs.len() as f64);
                            for &u in nbrs {
                                for k in 0..f {
                                    dxd[(base + u) * f + k] += gd[(base + i) * f + k] * inv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let xv = self.value(*x);
                    let (rows, f) = (xv.rows(), xv.cols());
                    let gam = self.value(*gamma).data();
                    let mut dgamma = vec![S::zero(); f];
                    let mut dbeta = vec![S::zero(); f];
                    for r in 0..rows {
                        for k in 0..f {
                            dgamma[k] += gd[r * f + k] * xhat[r * f + k];
                            dbeta[k] += gd[r * f + k];
                        }
                    }
                    let mut dx = Tensor::zeros(xv.shape());
                    let dxd = dx.data_mut();
                    if *train {
                        // dx = inv_std / m * (m * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
                        let m = S::of(rows as f64);
                        for k in 0..f {
                            let (mut s1, mut s2) = (S::zero(), S::zero());
                            for r in 0..rows {
                                let dh = gd[r * f + k] * gam[k];
                                s1 += dh;
                                s2 += dh * xhat[r * f + k];
                            }
                            for r in 0..rows {
                                let dh = gd[r * f + k] * gam[k];
                                dxd[r * f + k] = inv_std[k] / m * (m * dh - s1 - xhat[r * f + k] * s2);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for k in 0..f {
                                dxd[r * f + k] = gd[r * f + k] * gam[k] * inv_std[k];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, Tensor::from_vec(self.value(*gamma).shape(), dgamma)?);
                    accumulate(&mut grads, *beta, Tensor::from_vec(self.value(*beta).shape(), dbeta)?);
                }
                Op::Dropout { x, mask } => {
                    let mut dx = g.clone();
                    for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                        *d *= m;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::AvgPool { x, fine } => {
                    let xv = self.value(*x);
                    let f = xv.cols();
                    let sources = pool_sources(*fine);
                    let cn = sources.len();
                    let blocks = xv.rows() / fine.n_nodes();
                    let quarter = S::of(0.25);
                    let mut dx = Tensor::zeros(xv.shape());
                    let dxd = dx.data_mut();
                    for blk in 0..blocks {
                        for (ci, src) in sources.iter().enumerate() {
                            for &s in src {
                                for k in 0..f {
                                    dxd[(blk * fine.n_nodes() + s) * f + k] += gd[(blk * cn + ci) * f + k] * quarter;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Unpool { x, fine } => {
                    let xv = self.value(*x);
                    let f = xv.cols();
                    let coarse = fine.pooled();
                    let blocks = xv.rows() / coarse.n_nodes();
                    let mut dx = Tensor::zeros(xv.shape());
                    let dxd = dx.data_mut();
                    for blk in 0..blocks {
                        for r in 0..fine.rows {
                            for c in 0..fine.cols {
                                let dst = (blk * coarse.n_nodes() + (r / 2) * coarse.cols + c / 2) * f;
                                let src = (blk * fine.n_nodes() + r * fine.cols + c) * f;
                                for k in 0..f {
                                    dxd[dst + k] += gd[src + k];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::RepeatRows { x, times } => {
                    let xv = self.value(*x);
                    let f = xv.cols();
                    let mut dx = Tensor::zeros(xv.shape());
                    let dxd = dx.data_mut();
                    for r in 0..xv.rows() {
                        for j in 0..*times {
                            let src = (r * times + j) * f;
                            for k in 0..f {
                                dxd[r * f + k] += gd[src + k];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Patches3x3 { x, dims } => {
                    let xv = self.value(*x);
                    let f = xv.cols();
                    let n = dims.n_nodes();
                    let blocks = xv.rows() / n;
                    let sources = patch_sources(*dims);
                    let mut dx = Tensor::zeros(xv.shape());
                    let dxd = dx.data_mut();
                    for blk in 0..blocks {
                        for (i, src) in sources.iter().enumerate() {
                            let from = (blk * n + i) * 9 * f;
                            for (k, s) in src.iter().enumerate() {
                                if let Some(s) = s {
                                    let to = (blk * n + s) * f;
                                    for j in 0..f {
                                        dxd[to + j] += gd[from + k * f + j];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Mse { pred, target } | Op::Mae { pred, target } => {
                    let is_mse = matches!(node.op, Op::Mse { .. });
                    let (p, t) = (self.value(*pred), self.value(*target));
                    let scale = gd[0] / S::of(p.len() as f64);
                    let two = S::of(2.0);
                    let dp: Vec<S> = p
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(&a, &b)| {
                            let d = a - b;
                            if is_mse {
                                two * d * scale
                            } else if d > S::zero() {
                                scale
                            } else if d < S::zero() {
                                -scale
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    let dt: Vec<S> = dp.iter().map(|&v| -v).collect();
                    accumulate(&mut grads, *pred, Tensor::from_vec(p.shape(), dp)?);
                    accumulate(&mut grads, *target, Tensor::from_vec(t.shape(), dt)?);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, Tensor::full(xv.shape(), gd[0]));
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}
