use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tgnet_core::autodiff::{grad_check, GradCheckOptions, ParamStore, Tape, Tensor};
use tgnet_core::grid::{build_graph, GridDims, RegionGraph, TemporalKey};
use tgnet_core::model::{
    assemble_input, Aggregator, GnLayer, Inputs, Mode, Pass, TgNet, TgNetConfig, Topology,
};
use tgnet_core::Error;

fn small(use_tge: bool, use_dropoff: bool) -> TgNetConfig {
    TgNetConfig {
        t_demand: 3,
        t_dropoff: 4,
        n_gn_layers: 3,
        nf: 4,
        width_ratios: vec![1, 2, 1],
        tge_dim: 3,
        dropoff_layers: 2,
        dropoff_width: 4,
        head_width: 6,
        dropout: 0.0,
        use_tge,
        use_dropoff,
        slots_per_day: 6,
        ..TgNetConfig::default()
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn random_key(rng: &mut ChaCha8Rng, slots: usize) -> TemporalKey {
    TemporalKey::new(
        rng.random_range(0..slots),
        slots,
        rng.random_range(0..7),
        rng.random_bool(0.2),
        rng.random_bool(0.2),
    )
    .unwrap()
}

fn random_inputs(rng: &mut ChaCha8Rng, cfg: &TgNetConfig, n: usize, b: usize) -> Inputs<f64> {
    let keys: Vec<TemporalKey> = (0..b).map(|_| random_key(rng, cfg.slots_per_day)).collect();
    Inputs {
        demand: random_tensor(rng, &[b * n, cfg.t_demand], 0.0, 1.0),
        dropoff: Some(random_tensor(rng, &[b * n, cfg.t_dropoff], 0.0, 1.0)),
        keys: Inputs::key_tensor(&keys).unwrap(),
    }
}

fn pass<'r>() -> Pass<'r, f64> {
    Pass {
        mode: Mode::Eval,
        dropout: 0.0,
        bn_eps: 1e-5,
        stats: Vec::new(),
    }
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn gn_layer_zero_weights_give_zero() {
    let topo = Topology::grid(GridDims::new(3, 3));
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = GnLayer::build(&mut store, "gn", 2, 3, Aggregator::Mean, false, &mut rng);
    for p in store.params_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let x = tape.leaf(random_tensor(&mut rng, &[9, 2], -1.0, 1.0));
    let y = layer.forward(&mut tape, &bound, &store, x, &topo, &mut pass()).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

/// Plain-loop evaluation of one mean-aggregator layer in eval mode.
fn gn_oracle(store: &ParamStore<f64>, layer: &GnLayer, x: &Tensor<f64>, graph: &RegionGraph) -> Vec<f64> {
    let (n, fi, fo) = (graph.n_nodes(), layer.in_dim, layer.out_dim);
    let p = |id: tgnet_core::autodiff::ParamId| store.value(id).data().to_vec();
    let (wn, wv, w) = (p(layer.w_n), p(layer.w_v), p(layer.combine.w));
    let b = p(layer.combine.b.unwrap());
    let bn = layer.bn.unwrap();
    let (gamma, beta) = (p(bn.gamma), p(bn.beta));
    let (rm, rv) = (store.buffer(bn.running_mean).data(), store.buffer(bn.running_var).data());
    let xd = x.data();
    let lin = |m: &[f64], row: &[f64], o: usize| -> f64 { row.iter().enumerate().map(|(k, v)| m[o * row.len() + k] * v).sum() };
    let mut out = vec![0.0; n * fo];
    for i in 0..n {
        let xi = &xd[i * fi..(i + 1) * fi];
        let mut h = vec![0.0; fo];
        for o in 0..fo {
            let nb = graph.neighbors(i);
            let agg: f64 = nb.iter().map(|&u| lin(&wn, &xd[u * fi..(u + 1) * fi], o)).sum::<f64>() / nb.len() as f64;
            h[o] = agg + lin(&wv, xi, o);
        }
        let joined: Vec<f64> = xi.iter().chain(&h).copied().collect();
        for o in 0..fo {
            let z = lin(&w, &joined, o) + b[o];
            let z = (z - rm[o]) / (rv[o] + 1e-5).sqrt() * gamma[o] + beta[o];
            out[i * fo + o] = z.max(0.0);
        }
    }
    out
}

#[test]
fn gn_layer_matches_loop_oracle() {
    let topo = Topology::grid(GridDims::new(3, 3));
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let layer = GnLayer::build(&mut store, "gn", 3, 4, Aggregator::Mean, true, &mut rng);
        // non-trivial running statistics and affine terms
        let bn = layer.bn.unwrap();
        *store.buffer_mut(bn.running_mean) = random_tensor(&mut rng, &[4], -0.5, 0.5);
        *store.buffer_mut(bn.running_var) = random_tensor(&mut rng, &[4], 0.5, 2.0);
        *store.value_mut(bn.gamma) = random_tensor(&mut rng, &[4], 0.5, 1.5);
        *store.value_mut(layer.combine.b.unwrap()) = random_tensor(&mut rng, &[4], -0.5, 0.5);
        let x = random_tensor(&mut rng, &[9, 3], -1.0, 1.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = layer.forward(&mut tape, &bound, &store, xv, &topo, &mut pass()).unwrap();
        let expected = gn_oracle(&store, &layer, &x, &topo.graph);
        for (a, e) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }
}

#[test]
fn gn_layer_rejects_wrong_node_count() {
    let topo = Topology::grid(GridDims::new(3, 3));
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = GnLayer::build(&mut store, "gn", 2, 2, Aggregator::Mean, true, &mut rng);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let x = tape.leaf(Tensor::zeros(&[8, 2]));
    assert!(matches!(
        layer.forward(&mut tape, &bound, &store, x, &topo, &mut pass()),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn conv_identity_kernel_passes_features_through() {
    let dims = GridDims::new(3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = 2;
    let x = random_tensor(&mut rng, &[12, f], -1.0, 1.0);
    // kernel rows are output features, columns are (offset, input feature); offset 4 is the center
    let mut k = vec![0.0; f * 9 * f];
    for o in 0..f {
        k[o * 9 * f + 4 * f + o] = 1.0;
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let kv = tape.leaf(Tensor::from_vec(&[f, 9 * f], k).unwrap());
    let p = tape.patches3x3(xv, dims).unwrap();
    let y = tape.dense(p, kv, None).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv_uniform_ring_kernel_equals_neighbor_mean_on_interior() {
    let dims = GridDims::new(4, 5);
    let graph = Arc::new(build_graph(dims));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&mut rng, &[20, 1], -1.0, 1.0);
    let k: Vec<f64> = (0..9).map(|o| if o == 4 { 0.0 } else { 0.125 }).collect();
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let kv = tape.leaf(Tensor::from_vec(&[1, 9], k).unwrap());
    let p = tape.patches3x3(xv, dims).unwrap();
    let conv = tape.dense(p, kv, None).unwrap();
    let mean = tape.neighbor_mean(xv, &graph).unwrap();
    for r in 1..3 {
        for c in 1..4 {
            let i = r * 5 + c;
            let (a, b) = (tape.value(conv).data()[i], tape.value(mean).data()[i]);
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn conv_layer_has_more_parameters() {
    for (i, o) in [(3, 4), (24, 32), (1, 1)] {
        let mean = GnLayer::param_count(i, o, Aggregator::Mean, true);
        let conv = GnLayer::param_count(i, o, Aggregator::Conv3x3, true);
        assert_eq!(conv - mean, 8 * i * o);
    }
}

#[test]
fn tge_zero_weights_and_holiday_linearity() {
    let cfg = small(true, false);
    let mut model = TgNet::<f64>::new(cfg.clone(), GridDims::new(2, 2), 3).unwrap();
    let plain = TemporalKey::new(2, 6, 1, false, false).unwrap();
    let hol = TemporalKey { holiday: true, ..plain };
    let v = model.tge_vectors(&[plain, hol]).unwrap();
    let w_id = model.store().find("tge.w").unwrap();
    let w = model.store().value(w_id).clone();
    let hol_col = 6 + 7;
    for j in 0..cfg.tge_dim {
        let diff = v.row(1)[j] - v.row(0)[j];
        assert!((diff - w.data()[j * cfg.key_dim() + hol_col]).abs() < 1e-15);
    }
    for p in model.store_mut().params_mut().iter_mut().filter(|p| p.name.starts_with("tge.")) {
        p.value = Tensor::zeros(p.value.shape());
    }
    let v = model.tge_vectors(&[plain]).unwrap();
    assert!(v.data().iter().all(|&x| x == 0.0));
}

#[test]
fn tge_weights_receive_gradient_for_active_bits() {
    let cfg = small(true, false);
    let model = TgNet::<f64>::new(cfg.clone(), GridDims::new(2, 2), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = random_inputs(&mut rng, &cfg, 4, 2);
    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape);
    let fwd = model.forward(&mut tape, &bound, &inputs, Mode::Eval).unwrap();
    // a target far above any prediction keeps every output unit in its linear regime
    let t = tape.leaf(Tensor::full(&[8, 1], 10.0));
    let loss = tape.mse(fwd.output, t).unwrap();
    let g = tape.backward(loss).unwrap();
    let w_id = model.store().find("tge.w").unwrap();
    let gw = g.get_or_zeros(bound[w_id.index()], model.store().value(w_id));
    let active: Vec<usize> = (0..cfg.key_dim())
        .filter(|&c| (0..2).any(|b| inputs.keys.row(b)[c] == 1.0))
        .collect();
    for c in active {
        let col_norm: f64 = (0..cfg.tge_dim).map(|j| gw.data()[j * cfg.key_dim() + c].abs()).sum();
        assert!(col_norm > 0.0, "bit {c} got no gradient");
    }
}

#[test]
fn assemble_input_broadcasts_embedding() {
    let mut tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, n, t, d) = (2, 5, 8, 16);
    let feats = tape.leaf(random_tensor(&mut rng, &[b * n, t], 0.0, 1.0));
    let emb = tape.leaf(random_tensor(&mut rng, &[b, d], -1.0, 1.0));
    let x = assemble_input(&mut tape, feats, emb, n).unwrap();
    let xv = tape.value(x);
    assert_eq!(xv.shape(), &[b * n, t + d]);
    for blk in 0..b {
        for i in 0..n {
            assert_eq!(&xv.row(blk * n + i)[t..], tape.value(emb).row(blk));
            assert_eq!(&xv.row(blk * n + i)[..t], tape.value(feats).row(blk * n + i));
        }
    }
    let empty = tape.leaf(Tensor::zeros(&[b, 0]));
    let same = assemble_input(&mut tape, feats, empty, n).unwrap();
    assert_eq!(tape.value(same), tape.value(feats));
}

#[test]
fn forward_requires_dropoff_window_when_enabled() {
    let cfg = small(true, true);
    let model = TgNet::<f64>::new(cfg.clone(), GridDims::new(2, 2), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut inputs = random_inputs(&mut rng, &cfg, 4, 2);
    inputs.dropoff = None;
    assert!(matches!(model.predict(&inputs), Err(Error::Config(_))));
}

#[test]
fn gn_variant_ignores_keys_and_dropoff() {
    let cfg = small(false, false);
    let model = TgNet::<f64>::new(cfg.clone(), GridDims::new(2, 3), 7).unwrap();
    assert!(model.store().find("tge.w").is_none());
    assert!(model.store().params().iter().all(|p| !p.name.starts_with("dropoff")));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_inputs(&mut rng, &cfg, 6, 1);
    let mut b = a.clone();
    b.keys = Inputs::key_tensor(&[random_key(&mut rng, 6)]).unwrap();
    b.dropoff = None;
    assert_eq!(model.predict(&a).unwrap(), model.predict(&b).unwrap());
}

#[test]
fn keys_condition_predictions() {
    let cfg = small(true, false);
    let model = TgNet::<f64>::new(cfg.clone(), GridDims::new(3, 3), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_inputs(&mut rng, &cfg, 9, 1);
    let mut b = a.clone();
    b.keys = Inputs::key_tensor(&[TemporalKey::new(5, 6, 6, true, false).unwrap()]).unwrap();
    let mut c = a.clone();
    c.keys = Inputs::key_tensor(&[TemporalKey::new(0, 6, 0, false, true).unwrap()]).unwrap();
    assert_ne!(model.predict_scaled(&b).unwrap(), model.predict_scaled(&c).unwrap());
}

#[test]
fn neighbor_shuffle_is_bit_identical_in_full_model() {
    let cfg = TgNetConfig {
        use_pooling: false,
        ..small(true, true)
    };
    let dims = GridDims::new(4, 4);
    let graph = build_graph(dims);
    let shuffled: Vec<Vec<usize>> = (0..16)
        .map(|i| {
            let mut l = graph.neighbors(i).to_vec();
            l.reverse();
            l
        })
        .collect();
    let shuffled = RegionGraph::with_unsorted_lists(shuffled).unwrap();
    let a = TgNet::<f64>::with_graph(cfg.clone(), dims, graph, 9).unwrap();
    let b = TgNet::<f64>::with_graph(cfg.clone(), dims, shuffled, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = random_inputs(&mut rng, &cfg, 16, 3);
    // train mode, identical dropout streams
    let run = |m: &TgNet<f64>| {
        let mut tape = Tape::new();
        let bound = m.store().bind(&mut tape);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let f = m.forward(&mut tape, &bound, &inputs, Mode::Train { rng: &mut r }).unwrap();
        tape.value(f.output).clone()
    };
    assert_eq!(bits(&run(&a)), bits(&run(&b)));
}

#[test]
fn node_relabeling_permutes_predictions() {
    let cfg = TgNetConfig {
        use_pooling: false,
        ..small(true, true)
    };
    let dims = GridDims::new(4, 4);
    let n = 16;
    let graph = build_graph(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    // perm[old] = new
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let relabeled = graph.relabel(&perm).unwrap();
    let a = TgNet::<f64>::with_graph(cfg.clone(), dims, graph, 10).unwrap();
    let mut b = TgNet::<f64>::with_graph(cfg.clone(), dims, relabeled, 99).unwrap();
    b.store_mut().copy_values_from(a.store()).unwrap();
    let inputs = random_inputs(&mut rng, &cfg, n, 2);
    let permute = |t: &Tensor<f64>| {
        let f = t.cols();
        let mut out = Tensor::zeros(t.shape());
        for blk in 0..2 {
            for old in 0..n {
                let dst = (blk * n + perm[old]) * f;
                out.data_mut()[dst..dst + f].copy_from_slice(t.row(blk * n + old));
            }
        }
        out
    };
    let moved = Inputs {
        demand: permute(&inputs.demand),
        dropoff: inputs.dropoff.as_ref().map(permute),
        keys: inputs.keys.clone(),
    };
    let pa = a.predict(&inputs).unwrap().reshape(&[2 * n, 1]).unwrap();
    let pb = b.predict(&moved).unwrap().reshape(&[2 * n, 1]).unwrap();
    assert_eq!(bits(&permute(&pa)), bits(&pb));
}

fn grad_check_model(cfg: TgNetConfig, train: bool) {
    let mut model = TgNet::<f64>::new(cfg.clone(), GridDims::new(2, 2), 11).unwrap();
    // move zero-initialised biases off the ReLU kinks
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for p in model.store_mut().params_mut() {
        let jitter = random_tensor(&mut rng, p.value.shape(), 0.05, 0.2);
        p.value.add_assign(&jitter);
    }
    for point in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + point);
        let inputs = random_inputs(&mut rng, &cfg, 4, 2);
        let target = random_tensor(&mut rng, &[8, 1], 0.0, 1.0);
        let report = grad_check(
            model.store(),
            |tape, vars| {
                let mode = if train {
                    Mode::Train {
                        rng: &mut ChaCha8Rng::seed_from_u64(0),
                    }
                } else {
                    Mode::Eval
                };
                let f = model.forward(tape, vars, &inputs, mode)?;
                let t = tape.leaf(target.clone());
                tape.mse(f.output, t)
            },
            GradCheckOptions {
                seed: point,
                max_coords: Some(12),
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}

#[test]
fn end_to_end_gradient_eval_mode() {
    grad_check_model(
        TgNetConfig {
            t_demand: 2,
            t_dropoff: 2,
            n_gn_layers: 2,
            width_ratios: vec![1, 1],
            ..small(true, true)
        },
        false,
    );
}

#[test]
fn end_to_end_gradient_train_mode_conv() {
    grad_check_model(
        TgNetConfig {
            t_demand: 2,
            t_dropoff: 2,
            n_gn_layers: 2,
            width_ratios: vec![1, 1],
            aggregator: Aggregator::Conv3x3,
            ..small(true, true)
        },
        true,
    );
}

#[test]
fn checkpoint_roundtrip_predicts_bit_exactly() {
    let cfg = small(true, true);
    let dims = GridDims::new(3, 3);
    let mut model = TgNet::<f64>::new(cfg.clone(), dims, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for p in model.store_mut().params_mut() {
        let jitter = random_tensor(&mut rng, p.value.shape(), -0.1, 0.1);
        p.value.add_assign(&jitter);
    }
    model.scale.max_train = 37.0;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.tgck");
    model.save(&path).unwrap();
    let back = TgNet::<f64>::load(&path).unwrap();
    let inputs = random_inputs(&mut rng, &cfg, 9, 4);
    assert_eq!(bits(&model.predict(&inputs).unwrap()), bits(&back.predict(&inputs).unwrap()));

    let missing = dir.path().join("absent.tgck");
    let err = TgNet::<f64>::load(&missing).unwrap_err();
    assert!(err.to_string().contains("absent.tgck"));
}

#[test]
fn single_precision_model_tracks_double() {
    let cfg = small(true, true);
    let m64 = TgNet::<f64>::new(cfg.clone(), GridDims::new(2, 2), 13).unwrap();
    let mut m32 = TgNet::<f32>::new(cfg.clone(), GridDims::new(2, 2), 13).unwrap();
    for (a, b) in m32.store_mut().params_mut().iter_mut().zip(m64.store().params()) {
        a.value = b.value.convert();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_inputs(&mut rng, &cfg, 4, 2);
    let x32 = Inputs {
        demand: x.demand.convert(),
        dropoff: x.dropoff.as_ref().map(|d| d.convert()),
        keys: x.keys.convert(),
    };
    let (a, b) = (m64.predict(&x).unwrap(), m32.predict(&x32).unwrap());
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - *v as f64).abs() < 1e-4);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn predictions_are_non_negative(seed in 0u64..10_000, pooling in any::<bool>(), conv in any::<bool>()) {
        let cfg = TgNetConfig {
            use_pooling: pooling,
            aggregator: if conv { Aggregator::Conv3x3 } else { Aggregator::Mean },
            ..small(true, true)
        };
        let model = TgNet::<f64>::new(cfg.clone(), GridDims::new(3, 3), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = random_inputs(&mut rng, &cfg, 9, 2);
        inputs.demand = inputs.demand.map(|v| 50.0 * (v - 0.5));
        prop_assert!(model.predict(&inputs).unwrap().data().iter().all(|&v| v >= 0.0));
    }
}
