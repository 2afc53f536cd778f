//! TGNet: stacked graph-network layers over the region grid, conditioned on a learned
//! embedding of the target interval's calendar key, with a late-fused drop-off branch.

mod layers;
mod tge;

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{apply_running_stats, glorot, Aggregator, BnLayer, Dense, GnLayer, Mode, Pass, PendingStats, Topology};
pub use tge::{default_tge_keys, write_tge_csv, TgeRow};

use crate::autodiff::{decode_checkpoint, encode_checkpoint, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{GridDims, RegionGraph, ScalePolicy, TemporalKey};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TgNetConfig {
    /// Demand history length per node.
    pub t_demand: usize,
    /// Drop-off history length per node.
    pub t_dropoff: usize,
    /// Number of GN layers in the demand branch.
    pub n_gn_layers: usize,
    /// Base width; layer `k` has `nf * width_ratios[k]` features.
    pub nf: usize,
    /// One entry per demand-branch layer. Empty means every layer has width `nf`.
    pub width_ratios: Vec<usize>,
    pub tge_dim: usize,
    pub dropoff_layers: usize,
    pub dropoff_width: usize,
    /// Hidden width of the output head.
    pub head_width: usize,
    pub dropout: f64,
    pub use_tge: bool,
    pub use_dropoff: bool,
    pub use_pooling: bool,
    pub aggregator: Aggregator,
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Time-of-day slots in the calendar key.
    pub slots_per_day: usize,
}

impl Default for TgNetConfig {
    fn default() -> Self {
        Self {
            t_demand: 8,
            t_dropoff: 16,
            n_gn_layers: 6,
            nf: 32,
            width_ratios: vec![1, 2, 4, 8, 4, 2],
            tge_dim: 16,
            dropoff_layers: 2,
            dropoff_width: 64,
            head_width: 64,
            dropout: 0.1,
            use_tge: true,
            use_dropoff: true,
            use_pooling: true,
            aggregator: Aggregator::Mean,
            batch_norm: true,
            bn_momentum: 0.99,
            bn_eps: 1e-5,
            slots_per_day: 48,
        }
    }
}

impl TgNetConfig {
    /// Demand-branch only, no calendar embedding.
    pub fn gn() -> Self {
        Self {
            use_tge: false,
            use_dropoff: false,
            ..Self::default()
        }
    }

    pub fn gn_tge() -> Self {
        Self {
            use_dropoff: false,
            ..Self::default()
        }
    }

    pub fn key_dim(&self) -> usize {
        TemporalKey::dim(self.slots_per_day)
    }

    pub fn widths(&self) -> Vec<usize> {
        if self.width_ratios.is_empty() {
            vec![self.nf; self.n_gn_layers]
        } else {
            self.width_ratios.iter().map(|r| r * self.nf).collect()
        }
    }

    /// Whether the demand branch pools after its first layer.
    pub fn pools(&self) -> bool {
        self.use_pooling && self.n_gn_layers >= 2
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.t_demand == 0 || (self.use_dropoff && self.t_dropoff == 0) {
            return fail("history windows must be at least 1".into());
        }
        if self.n_gn_layers == 0 {
            return fail("at least one GN layer is required".into());
        }
        if !self.width_ratios.is_empty() && self.width_ratios.len() != self.n_gn_layers {
            return fail(format!(
                "{} width ratios for {} GN layers",
                self.width_ratios.len(),
                self.n_gn_layers
            ));
        }
        if self.widths().contains(&0) || self.head_width == 0 {
            return fail("layer widths must be at least 1".into());
        }
        if self.use_tge && self.tge_dim == 0 {
            return fail("tge_dim must be at least 1 when the embedding is enabled".into());
        }
        if self.use_dropoff && (self.dropoff_layers == 0 || self.dropoff_width == 0) {
            return fail("drop-off branch needs at least one layer of width >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return fail("batch-norm momentum must lie in [0, 1] and eps be positive".into());
        }
        if self.slots_per_day == 0 {
            return fail("slots_per_day must be positive".into());
        }
        Ok(())
    }

    /// Exact trainable-parameter count implied by the configuration, without building a model.
    pub fn param_count(&self) -> usize {
        let gn = |i, o| GnLayer::param_count(i, o, self.aggregator, self.batch_norm);
        let widths = self.widths();
        let input = self.t_demand + if self.use_tge { self.tge_dim } else { 0 };
        let mut total = 0;
        let mut prev = input;
        for (k, &w) in widths.iter().enumerate() {
            let in_dim = if self.pools() && k + 1 == widths.len() { prev + widths[0] } else { prev };
            total += gn(in_dim, w);
            prev = w;
        }
        if self.use_tge {
            total += self.key_dim() * self.tge_dim + self.tge_dim;
        }
        let mut fused = prev;
        if self.use_dropoff {
            let mut d = self.t_dropoff;
            for _ in 0..self.dropoff_layers {
                total += gn(d, self.dropoff_width);
                d = self.dropoff_width;
            }
            fused += self.dropoff_width;
        }
        total + fused * self.head_width + self.head_width + self.head_width + 1
    }
}

/// Model inputs for a batch of `B` forecasts over `N` nodes, stacked block-wise by example.
#[derive(Debug, Clone, PartialEq)]
pub struct Inputs<S> {
    /// `[B * N, t_demand]`, most recent interval first.
    pub demand: Tensor<S>,
    /// `[B * N, t_dropoff]`; required when the drop-off branch is enabled.
    pub dropoff: Option<Tensor<S>>,
    /// `[B, key_dim]` calendar keys of the target intervals.
    pub keys: Tensor<S>,
}

impl<S: Scalar> Inputs<S> {
    pub fn batch(&self) -> usize {
        self.keys.rows()
    }

    pub fn key_tensor(keys: &[TemporalKey]) -> Result<Tensor<S>> {
        let dim = keys.first().map_or(0, TemporalKey::len);
        let data = keys
            .iter()
            .flat_map(|k| k.bits().into_iter().map(|b| S::of(b as f64)))
            .collect();
        Tensor::from_vec(&[keys.len(), dim], data)
    }
}

/// Appends each example's embedding row (`[B, d]`) to all `n_nodes` feature rows of that
/// example (`[B * n_nodes, T]`), giving `[B * n_nodes, T + d]`.
pub fn assemble_input<S: Scalar>(tape: &mut Tape<S>, features: Var, embedding: Var, n_nodes: usize) -> Result<Var> {
    let (rows, b) = (tape.value(features).rows(), tape.value(embedding).rows());
    if rows != b * n_nodes {
        return Err(Error::shape(
            "assemble_input",
            format!("{rows} feature rows for {b} embeddings over {n_nodes} nodes"),
        ));
    }
    let e = tape.repeat_rows(embedding, n_nodes)?;
    tape.concat(features, e)
}

/// The forecasting network, its parameters and the scaling it was trained with.
#[derive(Debug, Clone)]
pub struct TgNet<S> {
    config: TgNetConfig,
    dims: GridDims,
    fine: Topology,
    coarse: Option<Topology>,
    store: ParamStore<S>,
    demand_layers: Vec<GnLayer>,
    dropoff_layers: Vec<GnLayer>,
    tge: Option<Dense>,
    head_hidden: Dense,
    head_out: Dense,
    pub scale: ScalePolicy,
    pub dropoff_scale: ScalePolicy,
}

/// Result of a forward pass on a tape.
#[derive(Debug)]
pub struct Forward<S> {
    /// `[B * N, 1]` non-negative predictions in scaled units.
    pub output: Var,
    /// Train-mode batch statistics, to be folded into running averages.
    pub stats: Vec<PendingStats<S>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    config: TgNetConfig,
    rows: usize,
    cols: usize,
    scale: ScalePolicy,
    dropoff_scale: ScalePolicy,
}

impl<S: Scalar> TgNet<S> {
    /// Fresh model on the Moore graph of `dims`, initialised from `seed`.
    pub fn new(config: TgNetConfig, dims: GridDims, seed: u64) -> Result<Self> {
        Self::with_graph(config, dims, crate::grid::build_graph(dims), seed)
    }

    /// Fresh model on an explicit full-resolution graph. Pooling and the convolutional
    /// aggregator still read the lattice shape from `dims`.
    pub fn with_graph(config: TgNetConfig, dims: GridDims, graph: RegionGraph, seed: u64) -> Result<Self> {
        config.validate()?;
        if graph.n_nodes() != dims.n_nodes() || dims.n_nodes() == 0 {
            return Err(Error::Config(format!(
                "graph has {} nodes, grid {}x{}",
                graph.n_nodes(),
                dims.rows,
                dims.cols
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<S>::new();
        let widths = config.widths();
        let mut prev = config.t_demand + if config.use_tge { config.tge_dim } else { 0 };
        let mut demand_layers = Vec::with_capacity(widths.len());
        for (k, &w) in widths.iter().enumerate() {
            let in_dim = if config.pools() && k + 1 == widths.len() { prev + widths[0] } else { prev };
            demand_layers.push(GnLayer::build(
                &mut store,
                &format!("gn{}", k + 1),
                in_dim,
                w,
                config.aggregator,
                config.batch_norm,
                &mut rng,
            ));
            prev = w;
        }
        let tge = config
            .use_tge
            .then(|| Dense::build(&mut store, "tge", config.key_dim(), config.tge_dim, true, &mut rng));
        let mut dropoff_layers = Vec::new();
        let mut fused = prev;
        if config.use_dropoff {
            let mut d = config.t_dropoff;
            for k in 0..config.dropoff_layers {
                dropoff_layers.push(GnLayer::build(
                    &mut store,
                    &format!("dropoff{}", k + 1),
                    d,
                    config.dropoff_width,
                    config.aggregator,
                    config.batch_norm,
                    &mut rng,
                ));
                d = config.dropoff_width;
            }
            fused += config.dropoff_width;
        }
        let head_hidden = Dense::build(&mut store, "head.hidden", fused, config.head_width, true, &mut rng);
        let head_out = Dense::build(&mut store, "head.out", config.head_width, 1, true, &mut rng);
        // The hidden activations are non-negative; a non-negative output row keeps the final
        // ReLU from starting dead on every node.
        let w = store.value_mut(head_out.w);
        *w = w.map(|v: S| v.abs());
        let coarse = config.pools().then(|| Topology::grid(dims.pooled()));
        Ok(Self {
            fine: Topology {
                graph: Arc::new(graph),
                dims,
            },
            coarse,
            dims,
            store,
            demand_layers,
            dropoff_layers,
            tge,
            head_hidden,
            head_out,
            config,
            scale: ScalePolicy::default(),
            dropoff_scale: ScalePolicy::default(),
        })
    }

    pub fn config(&self) -> &TgNetConfig {
        &self.config
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn n_nodes(&self) -> usize {
        self.dims.n_nodes()
    }

    pub fn graph(&self) -> &Arc<RegionGraph> {
        &self.fine.graph
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn demand_layers(&self) -> &[GnLayer] {
        &self.demand_layers
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Builds the forward graph on `tape` using parameters already bound by
    /// [`ParamStore::bind`].
    pub fn forward(&self, tape: &mut Tape<S>, bound: &[Var], inputs: &Inputs<S>, mode: Mode<'_>) -> Result<Forward<S>> {
        let n = self.n_nodes();
        let b = inputs.batch();
        let cfg = &self.config;
        if b == 0 || inputs.demand.shape() != [b * n, cfg.t_demand] {
            return Err(Error::shape(
                "forward",
                format!("demand {:?}, expected [{}, {}]", inputs.demand.shape(), b * n, cfg.t_demand),
            ));
        }
        if cfg.use_tge && inputs.keys.cols() != cfg.key_dim() {
            return Err(Error::shape(
                "forward",
                format!("keys have {} bits, expected {}", inputs.keys.cols(), cfg.key_dim()),
            ));
        }
        let mut pass = Pass {
            mode,
            dropout: cfg.dropout,
            bn_eps: S::of(cfg.bn_eps),
            stats: Vec::new(),
        };

        let mut x = tape.leaf(inputs.demand.clone());
        if let Some(tge) = &self.tge {
            let keys = tape.leaf(inputs.keys.clone());
            let e = tge.forward(tape, bound, keys)?;
            x = assemble_input(tape, x, e, n)?;
        }
        let layers = &self.demand_layers;
        let mut v = layers[0].forward(tape, bound, &self.store, x, &self.fine, &mut pass)?;
        if let Some(coarse) = &self.coarse {
            let skip = v;
            let mut c = tape.avg_pool(v, self.dims)?;
            for layer in &layers[1..layers.len() - 1] {
                c = layer.forward(tape, bound, &self.store, c, coarse, &mut pass)?;
            }
            let up = tape.unpool(c, self.dims)?;
            let joined = tape.concat(up, skip)?;
            v = layers[layers.len() - 1].forward(tape, bound, &self.store, joined, &self.fine, &mut pass)?;
        } else {
            for layer in &layers[1..] {
                v = layer.forward(tape, bound, &self.store, v, &self.fine, &mut pass)?;
            }
        }

        if cfg.use_dropoff {
            let d = inputs
                .dropoff
                .as_ref()
                .ok_or_else(|| Error::Config("drop-off branch enabled but no drop-off window given".into()))?;
            if d.shape() != [b * n, cfg.t_dropoff] {
                return Err(Error::shape(
                    "forward",
                    format!("drop-off {:?}, expected [{}, {}]", d.shape(), b * n, cfg.t_dropoff),
                ));
            }
            let mut q = tape.leaf(d.clone());
            for layer in &self.dropoff_layers {
                q = layer.forward(tape, bound, &self.store, q, &self.fine, &mut pass)?;
            }
            v = tape.concat(v, q)?;
        }

        let h = self.head_hidden.forward(tape, bound, v)?;
        let h = tape.relu(h)?;
        let out = self.head_out.forward(tape, bound, h)?;
        let output = tape.relu(out)?;
        Ok(Forward {
            output,
            stats: pass.stats,
        })
    }

    /// Eval-mode predictions in scaled units, `[B * N]`.
    pub fn predict_scaled(&self, inputs: &Inputs<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let fwd = self.forward(&mut tape, &bound, inputs, Mode::Eval)?;
        let out = tape.value(fwd.output);
        Tensor::from_vec(&[out.len()], out.data().to_vec())
    }

    /// Eval-mode predictions in raw demand units, `[B * N]`, all non-negative.
    pub fn predict(&self, inputs: &Inputs<S>) -> Result<Tensor<S>> {
        let scale = self.scale;
        Ok(self.predict_scaled(inputs)?.map(|y| scale.invert(y)))
    }

    pub fn apply_bn_stats(&mut self, pending: &[PendingStats<S>]) {
        apply_running_stats(&mut self.store, pending, self.config.bn_momentum);
    }

    /// Embedding of each key, `[keys.len(), tge_dim]`.
    pub fn tge_vectors(&self, keys: &[TemporalKey]) -> Result<Tensor<S>> {
        let tge = self
            .tge
            .ok_or_else(|| Error::Config("model was built without a temporal embedding".into()))?;
        if let Some(k) = keys.iter().find(|k| k.len() != self.config.key_dim()) {
            return Err(Error::Config(format!("key of {} bits, model expects {}", k.len(), self.config.key_dim())));
        }
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let x = tape.leaf(Inputs::<S>::key_tensor(keys)?);
        let y = tge.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }

    /// Embedding table for every time-of-day slot on each weekday, with and without the
    /// holiday flag.
    pub fn export_tge(&self, interval_len: i64) -> Result<Vec<TgeRow>> {
        let keys = default_tge_keys(self.config.slots_per_day);
        let vectors = self.tge_vectors(&keys)?;
        Ok(keys
            .iter()
            .enumerate()
            .map(|(i, key)| TgeRow {
                label: key.label(interval_len),
                key: *key,
                vector: vectors.row(i).iter().map(|v| v.as_f64()).collect(),
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = ModelMeta {
            config: self.config.clone(),
            rows: self.dims.rows,
            cols: self.dims.cols,
            scale: self.scale,
            dropoff_scale: self.dropoff_scale,
        };
        encode_checkpoint(&self.store, serde_json::to_value(meta)?)
    }

    /// Rebuilds a model from checkpoint bytes. The region graph is the grid's Moore graph.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (store, manifest) = decode_checkpoint::<S>(bytes)?;
        let meta: ModelMeta = serde_json::from_value(manifest.meta)
            .map_err(|e| Error::Format(format!("checkpoint lacks a model block: {e}")))?;
        let mut model = Self::new(meta.config, GridDims::new(meta.rows, meta.cols), 0)?;
        let layout_matches = model.store.params().len() == store.params().len()
            && model.store.buffers().len() == store.buffers().len()
            && model
                .store
                .params()
                .iter()
                .zip(store.params())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
            && model
                .store
                .buffers()
                .iter()
                .zip(store.buffers())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !layout_matches {
            return Err(Error::Format("checkpoint tensors do not match the stored configuration".into()));
        }
        model.store = store;
        model.scale = meta.scale;
        model.dropoff_scale = meta.dropoff_scale;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
