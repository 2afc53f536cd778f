use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, BnMode, BufferId, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{GridDims, RegionGraph};
use crate::scalar::Scalar;

/// Neighborhood aggregation used inside a GN layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    /// Mean over graph neighbors of a shared linear map.
    #[default]
    Mean,
    /// Same-padding 3x3 convolution over the grid.
    Conv3x3,
}

/// Whether a forward pass trains (batch statistics, dropout) or predicts.
pub enum Mode<'r> {
    Train { rng: &'r mut dyn RngCore },
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Graph plus lattice shape a layer runs on.
#[derive(Debug, Clone)]
pub struct Topology {
    pub graph: Arc<RegionGraph>,
    pub dims: GridDims,
}

impl Topology {
    pub fn grid(dims: GridDims) -> Self {
        Self {
            graph: Arc::new(crate::grid::build_graph(dims)),
            dims,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

/// Batch-norm statistics gathered during a training pass, pending a running-average update.
#[derive(Debug, Clone)]
pub struct PendingStats<S> {
    pub layer: BnLayer,
    pub stats: BatchStats<S>,
}

/// Mutable state threaded through one forward pass.
pub struct Pass<'r, S> {
    pub mode: Mode<'r>,
    pub dropout: f64,
    pub bn_eps: S,
    pub stats: Vec<PendingStats<S>>,
}

/// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<S: Scalar>(rng: &mut dyn RngCore, rows: usize, cols: usize) -> Tensor<S> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| S::of(rng.random_range(-limit..=limit))).collect();
    Tensor::from_vec(&[rows, cols], data).expect("shape matches data")
}

/// Linear map with optional bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut dyn RngCore,
    ) -> Self {
        let w = store.add_param(format!("{name}.w"), glorot(rng, out_dim, in_dim));
        let b = bias.then(|| store.add_param(format!("{name}.b"), Tensor::zeros(&[out_dim])));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bound: &[Var], x: Var) -> Result<Var> {
        tape.dense(x, bound[self.w.index()], self.b.map(|b| bound[b.index()]))
    }
}

/// One graph-network block: neighbor aggregation plus self transform, a skip concatenation
/// with the input, a biased linear map, then batch norm, ReLU and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GnLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub aggregator: Aggregator,
    /// `[out x in]` for the mean aggregator, `[out x 9 * in]` for the convolution.
    pub w_n: ParamId,
    pub w_v: ParamId,
    pub combine: Dense,
    pub bn: Option<BnLayer>,
}

impl GnLayer {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        aggregator: Aggregator,
        batch_norm: bool,
        rng: &mut dyn RngCore,
    ) -> Self {
        let agg_in = match aggregator {
            Aggregator::Mean => in_dim,
            Aggregator::Conv3x3 => 9 * in_dim,
        };
        let w_n = store.add_param(format!("{name}.w_n"), glorot(rng, out_dim, agg_in));
        let w_v = store.add_param(format!("{name}.w_v"), glorot(rng, out_dim, in_dim));
        let combine = Dense::build(store, name, in_dim + out_dim, out_dim, true, rng);
        let bn = batch_norm.then(|| BnLayer {
            gamma: store.add_param(format!("{name}.bn.gamma"), Tensor::full(&[out_dim], S::one())),
            beta: store.add_param(format!("{name}.bn.beta"), Tensor::zeros(&[out_dim])),
            running_mean: store.add_buffer(format!("{name}.bn.running_mean"), Tensor::zeros(&[out_dim])),
            running_var: store.add_buffer(format!("{name}.bn.running_var"), Tensor::full(&[out_dim], S::one())),
        });
        Self {
            in_dim,
            out_dim,
            aggregator,
            w_n,
            w_v,
            combine,
            bn,
        }
    }

    /// Trainable scalars in a layer of this shape.
    pub fn param_count(in_dim: usize, out_dim: usize, aggregator: Aggregator, batch_norm: bool) -> usize {
        let agg = match aggregator {
            Aggregator::Mean => in_dim,
            Aggregator::Conv3x3 => 9 * in_dim,
        };
        out_dim * agg + out_dim * in_dim + out_dim * (in_dim + out_dim) + out_dim + if batch_norm { 2 * out_dim } else { 0 }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bound: &[Var],
        store: &ParamStore<S>,
        x: Var,
        topo: &Topology,
        pass: &mut Pass<'_, S>,
    ) -> Result<Var> {
        let rows = tape.value(x).rows();
        if tape.value(x).cols() != self.in_dim || rows % topo.graph.n_nodes().max(1) != 0 {
            return Err(Error::shape(
                "gn_layer",
                format!("input {:?} for {} nodes and {} features", tape.value(x).shape(), topo.graph.n_nodes(), self.in_dim),
            ));
        }
        let w_n = bound[self.w_n.index()];
        let h_n = match self.aggregator {
            Aggregator::Mean => {
                let projected = tape.dense(x, w_n, None)?;
                tape.neighbor_mean(projected, &topo.graph)?
            }
            Aggregator::Conv3x3 => {
                let patches = tape.patches3x3(x, topo.dims)?;
                tape.dense(patches, w_n, None)?
            }
        };
        let h_v = tape.dense(x, bound[self.w_v.index()], None)?;
        let h = tape.add(h_n, h_v)?;
        let joined = tape.concat(x, h)?;
        let mut y = self.combine.forward(tape, bound, joined)?;
        if let Some(bn) = self.bn {
            let (gamma, beta) = (bound[bn.gamma.index()], bound[bn.beta.index()]);
            let (out, stats) = match pass.mode {
                Mode::Train { .. } => tape.batch_norm(y, gamma, beta, BnMode::Train, pass.bn_eps)?,
                Mode::Eval => tape.batch_norm(
                    y,
                    gamma,
                    beta,
                    BnMode::Eval {
                        mean: store.buffer(bn.running_mean).data(),
                        var: store.buffer(bn.running_var).data(),
                    },
                    pass.bn_eps,
                )?,
            };
            if let Some(stats) = stats {
                pass.stats.push(PendingStats { layer: bn, stats });
            }
            y = out;
        }
        let y = tape.relu(y)?;
        match &mut pass.mode {
            Mode::Train { rng } if pass.dropout > 0.0 => tape.dropout(y, pass.dropout, *rng),
            _ => Ok(y),
        }
    }
}

/// `running = momentum * running + (1 - momentum) * batch` for every pending layer.
pub fn apply_running_stats<S: Scalar>(store: &mut ParamStore<S>, pending: &[PendingStats<S>], momentum: f64) {
    let (m, one_m) = (S::of(momentum), S::of(1.0 - momentum));
    for p in pending {
        for (r, &b) in store.buffer_mut(p.layer.running_mean).data_mut().iter_mut().zip(&p.stats.mean) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in store.buffer_mut(p.layer.running_var).data_mut().iter_mut().zip(&p.stats.var) {
            *r = m * *r + one_m * b;
        }
    }
}

