use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, GradCheckOptions, ParamStore, Tape, Tensor};
use crate::graph::{build_adjacency, OccupancyGrid};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn eye(n: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < tol, "{x} vs {y}");
    }
}

fn max_err(rows: &[crate::autodiff::GradCheckRow]) -> f64 {
    rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
}

#[test]
fn mlp_identity_layer() {
    let mut store = ParamStore::new();
    let mlp = MlpBlock::new(&mut store, "m", &[3, 3], &mut rng(0)).unwrap();
    *store.value_mut(mlp.layers[0].weight) = eye(3);
    let mut g = Tape::with_params(&store, false);
    let x = g.constant(Tensor::from_f64([2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap());
    let y = mlp.forward(&mut g, x).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn mlp_shapes_and_errors() {
    let mut store = ParamStore::<f64>::new();
    let mlp = MlpBlock::new(&mut store, "m", &[4, 8, 8], &mut rng(0)).unwrap();
    let mut g = Tape::with_params(&store, false);
    let x = g.constant(Tensor::zeros(vec![2, 4]));
    let y = mlp.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[2, 8]);
    let bad = g.constant(Tensor::zeros(vec![2, 5]));
    assert!(mlp.forward(&mut g, bad).is_err());
}

#[test]
fn mlp_grad_check() {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let mlp = MlpBlock::new(&mut store, "m", &[4, 6, 3], &mut r).unwrap();
    let x = random(&mut r, &[5, 4]);
    let rows = grad_check(&mut store, GradCheckOptions::default(), |g| {
        let x = g.constant(x.clone());
        let y = mlp.forward(g, x)?;
        let y = g.tanh(y)?;
        g.sum(y, None)
    })
    .unwrap();
    assert!(max_err(&rows) < 1e-4, "{rows:?}");
}

#[test]
fn lstm_grad_check() {
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let lstm = LstmEncoder::new(&mut store, "lstm", 3, 4, &mut r).unwrap();
    let seq = random(&mut r, &[5, 2, 3]);
    let rows = grad_check(&mut store, GradCheckOptions::default(), |g| {
        let s = g.constant(seq.clone());
        let h = lstm.encode(g, s)?;
        let h = g.mul(h, h)?;
        g.sum(h, None)
    })
    .unwrap();
    assert!(max_err(&rows) < 1e-4, "{rows:?}");
}

fn identity_conv_mlp(store: &mut ParamStore<f64>) -> ConvMlpEncoder {
    let enc = ConvMlpEncoder::new(store, "c", 1, 1, 3, &mut rng(3)).unwrap();
    for conv in &enc.convs {
        *store.value_mut(conv.weight) = Tensor::from_f64([1, 1, 3], &[0.0, 1.0, 0.0]).unwrap();
    }
    for layer in &enc.head.layers {
        *store.value_mut(layer.weight) = eye(1);
    }
    enc
}

#[test]
fn conv_mlp_identity_is_temporal_mean() {
    let mut store = ParamStore::new();
    let enc = identity_conv_mlp(&mut store);
    let mut g = Tape::with_params(&store, false);
    let x =
        g.constant(Tensor::from_f64([2, 1, 4], &[1.0, 2.0, 3.0, 6.0, 0.5, 0.5, 1.5, 1.5]).unwrap());
    let y = enc.encode(&mut g, x).unwrap();
    assert_close(&g.value(y).to_f64(), &[3.0, 1.0], 1e-12);
}

#[test]
fn conv_mlp_width_is_independent_of_length() {
    let mut r = rng(4);
    let mut store = ParamStore::new();
    let enc = ConvMlpEncoder::new(&mut store, "c", 3, 8, 3, &mut r).unwrap();
    let mut g = Tape::with_params(&store, false);
    for t in [3, 7, 15] {
        let x = g.constant(random(&mut r, &[2, 3, t]));
        let y = enc.encode(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[2, 8]);
    }
    let short = g.constant(random(&mut r, &[2, 3, 2]));
    assert!(enc.encode(&mut g, short).is_err());
}

#[test]
fn conv_mlp_repeated_sequence_keeps_output() {
    let mut r = rng(5);
    // Pointwise kernels have no boundary effect, so repetition only
    // duplicates terms of the mean.
    let mut store = ParamStore::new();
    let enc = ConvMlpEncoder::new(&mut store, "c", 2, 6, 1, &mut r).unwrap();
    let x = random(&mut r, &[1, 2, 5]);
    let mut doubled = Vec::new();
    for c in 0..2 {
        let row = &x.data()[c * 5..(c + 1) * 5];
        doubled.extend_from_slice(row);
        doubled.extend_from_slice(row);
    }
    let doubled = Tensor::new(vec![1, 2, 10], doubled).unwrap();
    let mut g = Tape::with_params(&store, false);
    let a = g.constant(x);
    let b = g.constant(doubled.clone());
    let ya = enc.encode(&mut g, a).unwrap();
    let yb = enc.encode(&mut g, b).unwrap();
    assert_close(&g.value(ya).to_f64(), &g.value(yb).to_f64(), 1e-6);

    let mut store = ParamStore::new();
    let enc = identity_conv_mlp(&mut store);
    let x = Tensor::from_f64([1, 1, 4], &[0.3, 1.0, 2.0, 0.7]).unwrap();
    let xx = Tensor::from_f64([1, 1, 8], &[0.3, 1.0, 2.0, 0.7, 0.3, 1.0, 2.0, 0.7]).unwrap();
    let mut g = Tape::with_params(&store, false);
    let (a, b) = (g.constant(x), g.constant(xx));
    let ya = enc.encode(&mut g, a).unwrap();
    let yb = enc.encode(&mut g, b).unwrap();
    assert_close(&g.value(ya).to_f64(), &g.value(yb).to_f64(), 1e-6);
}

#[test]
fn conv_mlp_grad_check() {
    let mut r = rng(6);
    let mut store = ParamStore::new();
    let enc = ConvMlpEncoder::new(&mut store, "c", 2, 4, 3, &mut r).unwrap();
    let x = random(&mut r, &[2, 2, 6]);
    let rows = grad_check(&mut store, GradCheckOptions::default(), |g| {
        let x = g.constant(x.clone());
        let y = enc.encode(g, x)?;
        let y = g.tanh(y)?;
        g.sum(y, None)
    })
    .unwrap();
    assert!(max_err(&rows) < 1e-4, "{rows:?}");
}

/// Node 0 at the origin, the rest in grid unless `spread` pushes some out.
fn scene_adjacency_with(n: usize, spread: f64, r: &mut impl Rng) -> crate::graph::AdjacencyMatrix {
    let ids: Vec<u64> = (0..n as u64).collect();
    let mut pos = vec![(0.0, 0.0)];
    for _ in 1..n {
        pos.push((r.random_range(-spread..spread), r.random_range(-30.0..30.0)));
    }
    build_adjacency(&ids, &pos, &OccupancyGrid::default()).unwrap()
}

fn scene_adjacency(n: usize, r: &mut impl Rng) -> crate::graph::AdjacencyMatrix {
    scene_adjacency_with(n, 5.0, r)
}

#[test]
fn gat_single_node() {
    let mut r = rng(7);
    let mut store = ParamStore::new();
    let gat = GatLayer::new(&mut store, "gat", 3, 4, 2, &mut r).unwrap();
    let adj = build_adjacency(&[9], &[(0.0, 0.0)], &OccupancyGrid::default()).unwrap();
    let s = random(&mut r, &[1, 3]);
    let mut g = Tape::with_params(&store, false);
    let x = g.constant(s.clone());
    let (out, att) = gat.forward(&mut g, x, &adj).unwrap();
    assert!(att.iter().all(|m| m == &vec![1.0]));
    let w = store.value(gat.weight).to_f64();
    let mut expect = [0.0; 4];
    for (k, e) in expect.iter_mut().enumerate() {
        for h in 0..2 {
            let ws: f64 = (0..3).map(|i| s.data()[i] * w[i * 8 + h * 4 + k]).sum();
            *e += ws / 2.0;
        }
        *e = e.max(0.0);
    }
    assert_close(&g.value(out).to_f64(), &expect, 1e-12);
}

#[test]
fn gat_attention_respects_mask_and_normalises() {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let gat = GatLayer::new(&mut store, "gat", 3, 4, 3, &mut r).unwrap();
    let n = 9;
    let adj = scene_adjacency_with(n, 10.0, &mut r);
    let mut g = Tape::with_params(&store, false);
    let x = g.constant(random(&mut r, &[n, 3]));
    let (_, att) = gat.forward(&mut g, x, &adj).unwrap();
    let mut masked = 0;
    for head in &att {
        for i in 0..n {
            let row = &head[i * n..(i + 1) * n];
            // Out-of-grid nodes have an empty neighbourhood.
            let expect = if adj.get(i, i) > 0.0 { 1.0 } else { 0.0 };
            assert!((row.iter().sum::<f64>() - expect).abs() < 1e-6);
            for (j, &w) in row.iter().enumerate() {
                if adj.get(i, j) == 0.0 {
                    assert_eq!(w, 0.0);
                    masked += 1;
                }
            }
        }
    }
    assert!(masked > 0);
    let bad = build_adjacency(
        &[1, 2],
        &[(0.0, 0.0), (0.0, 1.0)],
        &OccupancyGrid::default(),
    )
    .unwrap();
    assert!(gat.forward(&mut g, x, &bad).is_err());
}

#[test]
fn gat_is_permutation_equivariant() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let mut store = ParamStore::new();
        let gat = GatLayer::new(&mut store, "gat", 4, 5, 2, &mut r).unwrap();
        let n = 6;
        let ids: Vec<u64> = (0..n as u64).collect();
        let pos: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                if i == 0 {
                    (0.0, 0.0)
                } else {
                    (r.random_range(-5.0..5.0), r.random_range(-30.0..30.0))
                }
            })
            .collect();
        let x = random(&mut r, &[n, 4]);
        // Node 0 anchors the grid, so it stays first.
        let mut perm: Vec<usize> = (1..n).collect();
        perm.shuffle(&mut r);
        perm.insert(0, 0);
        let grid = OccupancyGrid::default();
        let adj = build_adjacency(&ids, &pos, &grid).unwrap();
        let pids: Vec<u64> = perm.iter().map(|&p| ids[p]).collect();
        let ppos: Vec<(f64, f64)> = perm.iter().map(|&p| pos[p]).collect();
        let padj = build_adjacency(&pids, &ppos, &grid).unwrap();
        let px: Vec<f64> = perm.iter().flat_map(|&p| x.row(p).to_vec()).collect();

        let mut g = Tape::with_params(&store, false);
        let a = g.constant(x.clone());
        let b = g.constant(Tensor::new(vec![n, 4], px).unwrap());
        let (ya, _) = gat.forward(&mut g, a, &adj).unwrap();
        let (yb, _) = gat.forward(&mut g, b, &padj).unwrap();
        let ya = g.value(ya).clone();
        let yb = g.value(yb).clone();
        for (i, &p) in perm.iter().enumerate() {
            assert_close(yb.row(i), ya.row(p), 1e-6);
        }
    }
}

#[test]
fn gat_grad_check() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let gat = GatLayer::new(&mut store, "gat", 3, 4, 2, &mut r).unwrap();
    let adj = scene_adjacency(5, &mut r);
    let x = random(&mut r, &[5, 3]);
    let rows = grad_check(&mut store, GradCheckOptions::default(), |g| {
        let x = g.constant(x.clone());
        let (y, _) = gat.forward(g, x, &adj)?;
        let y = g.mul(y, y)?;
        g.sum(y, None)
    })
    .unwrap();
    assert!(max_err(&rows) < 1e-4, "{rows:?}");
}

#[test]
fn cross_attend_single_key() {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let att = CrossAttention::new(&mut store, "att", 4, 2, &mut r).unwrap();
    let mut g = Tape::with_params(&store, false);
    let q = g.constant(random(&mut r, &[3, 4]));
    let k = g.constant(random(&mut r, &[1, 4]));
    let v = g.constant(random(&mut r, &[1, 4]));
    let out = att.attend(&mut g, q, k, v).unwrap();
    for w in &out.weights {
        assert!(g.value(*w).data().iter().all(|&x| x == 1.0));
    }
    // Every query receives the projected single value.
    let wv = g.param(att.value);
    let pv = g.matmul(v, wv).unwrap();
    let expect = att.output.forward(&mut g, pv).unwrap();
    let expect = g.value(expect).to_f64();
    let got = g.value(out.values).clone();
    for i in 0..3 {
        assert_close(got.row(i), &expect, 1e-12);
    }
}

#[test]
fn cross_attend_is_permutation_invariant() {
    for seed in 0..10 {
        let mut r = rng(200 + seed);
        let mut store = ParamStore::new();
        let att = CrossAttention::new(&mut store, "att", 8, 4, &mut r).unwrap();
        let (k, m) = (3, 6);
        let keys = random(&mut r, &[m, 8]);
        let vals = random(&mut r, &[m, 8]);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut r);
        let permute = |t: &Tensor<f64>| {
            Tensor::new(
                vec![m, 8],
                perm.iter().flat_map(|&p| t.row(p).to_vec()).collect(),
            )
            .unwrap()
        };
        let mut g = Tape::with_params(&store, false);
        let q = g.constant(random(&mut r, &[k, 8]));
        let (ka, va) = (g.constant(keys.clone()), g.constant(vals.clone()));
        let (kb, vb) = (g.constant(permute(&keys)), g.constant(permute(&vals)));
        let a = att.attend(&mut g, q, ka, va).unwrap();
        let b = att.attend(&mut g, q, kb, vb).unwrap();
        assert_close(
            &g.value(a.values).to_f64(),
            &g.value(b.values).to_f64(),
            1e-6,
        );
        for w in &a.weights {
            let w = g.value(*w);
            for i in 0..k {
                assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn cross_attend_rejects_bad_heads_and_shapes() {
    let mut store = ParamStore::<f64>::new();
    assert!(CrossAttention::new(&mut store, "a", 6, 4, &mut rng(0)).is_err());
    let att = CrossAttention::new(&mut store, "b", 4, 2, &mut rng(0)).unwrap();
    let mut g = Tape::with_params(&store, false);
    let q = g.constant(Tensor::zeros(vec![2, 4]));
    let k = g.constant(Tensor::zeros(vec![3, 4]));
    let v = g.constant(Tensor::zeros(vec![2, 4]));
    assert!(att.attend(&mut g, q, k, v).is_err());
}

#[test]
fn cross_attend_grad_check() {
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let att = CrossAttention::new(&mut store, "att", 4, 2, &mut r).unwrap();
    let (q, k, v) = (
        random(&mut r, &[3, 4]),
        random(&mut r, &[5, 4]),
        random(&mut r, &[5, 4]),
    );
    let rows = grad_check(&mut store, GradCheckOptions::default(), |g| {
        let (q, k, v) = (
            g.constant(q.clone()),
            g.constant(k.clone()),
            g.constant(v.clone()),
        );
        let out = att.attend(g, q, k, v)?;
        let y = g.mul(out.values, out.values)?;
        g.sum(y, None)
    })
    .unwrap();
    assert!(max_err(&rows) < 1e-4, "{rows:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gat_rows_sum_to_one(seed in 0u64..1000, n in 1usize..9, heads in 1usize..4) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let gat = GatLayer::new(&mut store, "gat", 3, 3, heads, &mut r).unwrap();
        let adj = scene_adjacency(n, &mut r);
        let mut g = Tape::with_params(&store, false);
        let x = g.constant(random(&mut r, &[n, 3]).cast::<f64>());
        let (_, att) = gat.forward(&mut g, x, &adj).unwrap();
        for head in &att {
            for i in 0..n {
                let s: f64 = head[i * n..(i + 1) * n].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
