use std::str::FromStr;

use proptest::prelude::*;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

#[test]
fn matmul_by_identity() {
    let mut g = Tape::<f64>::new();
    let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let eye = g.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let c = g.matmul(a, eye).unwrap();
    assert_eq!(g.value(c), g.value(a));
}

#[test]
fn softmax_of_constant_row_is_uniform() {
    for c in [-50.0, 0.0, 3.7, 1e3] {
        let mut g = Tape::<f64>::new();
        let x = g.constant(t(&[1, 3], &[c, c, c]));
        let y = g.softmax_rows(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}

#[test]
fn conv1d_identity_kernel() {
    let mut g = Tape::<f64>::new();
    let x = g.constant(t(&[1, 1, 5], &[1.0, -2.0, 3.0, 0.5, 4.0]));
    let w = g.constant(t(&[1, 1, 3], &[0.0, 1.0, 0.0]));
    let y = g.conv1d(x, w, None).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn square_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("x", t(&[1], &[3.0])).unwrap();
    let mut g = Tape::with_params(&store, true);
    let x = g.param(id);
    let sq = g.mul(x, x).unwrap();
    let root = g.sum(sq, None).unwrap();
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.by_name("x").unwrap().data(), &[6.0]);
}

#[test]
fn constant_root_has_no_gradients() {
    let mut g = Tape::<f64>::new();
    let c = g.constant(t(&[2], &[1.0, 2.0]));
    let root = g.sum(c, None).unwrap();
    let grads = g.backward(root).unwrap();
    assert!(grads.is_empty());
}

#[test]
fn unreachable_parameter_gets_zero_gradient() {
    let mut store = ParamStore::new();
    let used = store.add("used", t(&[2], &[1.0, 2.0])).unwrap();
    store.add("unused", t(&[3], &[1.0, 2.0, 3.0])).unwrap();
    let mut g = Tape::with_params(&store, true);
    let x = g.param(used);
    let root = g.sum(x, None).unwrap();
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.by_name("unused").unwrap().data(), &[0.0; 3]);
    assert_eq!(grads.by_name("used").unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn leaky_relu_mean_gradient() {
    // d/dx mean(leaky(x)) = slope'(x) / 2 => [0.2/2, 1/2]
    let mut store = ParamStore::new();
    let id = store.add("x", t(&[2], &[-1.0, 2.0])).unwrap();
    let mut g = Tape::with_params(&store, true);
    let x = g.param(id);
    let y = g.leaky_relu(x, LEAKY_SLOPE).unwrap();
    let root = g.mean(y, None).unwrap();
    let grads = g.backward(root).unwrap();
    let gx = grads.by_name("x").unwrap().data();
    assert!((gx[0] - 0.1).abs() < 1e-15);
    assert!((gx[1] - 0.5).abs() < 1e-15);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut store = ParamStore::new();
    let id = store.add("x", t(&[2], &[1.0, 2.0])).unwrap();
    let mut g = Tape::with_params(&store, true);
    let x = g.param(id);
    assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(s)) if s == vec![2]));
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut g = Tape::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { kind, shapes }) => {
            assert_eq!(kind, "matmul");
            assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let c = g.constant(Tensor::zeros(vec![4]));
    assert!(matches!(g.add(a, c), Err(Error::Shape { kind: "add", .. })));
}

#[test]
fn unknown_primitive_is_rejected() {
    assert!(matches!(
        PrimitiveKind::from_str("cosh"),
        Err(Error::UnknownOp(_))
    ));
    for k in PrimitiveKind::ALL {
        assert_eq!(PrimitiveKind::from_str(k.name()).unwrap(), k);
    }
}

#[test]
fn forward_op_dispatch_matches_direct_call() {
    let mut g = Tape::<f64>::new();
    let x = g.constant(t(&[2, 2], &[1.0, -1.0, 0.5, 2.0]));
    let a = g
        .forward_op(PrimitiveKind::Slice, &[x], &Attrs::range(1, 1, 2))
        .unwrap();
    assert_eq!(g.value(a).data(), &[-1.0, 2.0]);
    let b = g
        .forward_op(PrimitiveKind::Transpose, &[x], &Attrs::default())
        .unwrap();
    assert_eq!(g.value(b).data(), &[1.0, 0.5, -1.0, 2.0]);
    let missing = g.forward_op(PrimitiveKind::Slice, &[x], &Attrs::default());
    assert!(matches!(
        missing,
        Err(Error::MissingAttr { kind: "slice", .. })
    ));
}

#[test]
fn linear_map_grad_check_is_exact() {
    let mut store = ParamStore::new();
    let w = store
        .add("W", t(&[2, 3], &[0.3, -0.2, 0.5, 1.1, 0.7, -0.4]))
        .unwrap();
    let x = t(&[3, 1], &[0.5, -1.5, 2.0]);
    let rows = grad_check(&mut store, GradCheckOptions::default(), |g| {
        let xv = g.constant(x.clone());
        let wv = g.param(w);
        let y = g.matmul(wv, xv)?;
        g.sum(y, None)
    })
    .unwrap();
    assert!(rows[0].max_rel_err < 1e-8, "{rows:?}");
}

#[test]
fn constant_in_parameter_gives_zero_error() {
    let mut store = ParamStore::new();
    let a = store.add("a", t(&[2], &[1.0, 2.0])).unwrap();
    store.add("idle", t(&[2], &[3.0, 4.0])).unwrap();
    let rows = grad_check(&mut store, GradCheckOptions::default(), |g| {
        let av = g.param(a);
        let sq = g.mul(av, av)?;
        g.sum(sq, None)
    })
    .unwrap();
    assert_eq!(rows[1].name, "idle");
    assert_eq!(rows[1].max_rel_err, 0.0);
}

#[test]
fn non_finite_function_is_an_error() {
    let mut store = ParamStore::new();
    let a = store.add("a", t(&[1], &[1000.0])).unwrap();
    let res = grad_check(&mut store, GradCheckOptions::default(), |g| {
        let av = g.param(a);
        let e = g.exp(av)?;
        g.sum(e, None)
    });
    assert!(matches!(res, Err(Error::NonFinite(_))));
}

#[test]
fn backward_is_bit_deterministic() {
    let mut store = ParamStore::new();
    let w = store
        .add(
            "W",
            t(&[3, 3], &[0.1, 0.2, -0.3, 0.4, -0.5, 0.6, 0.7, 0.8, -0.9]),
        )
        .unwrap();
    let run = || {
        let mut g = Tape::with_params(&store, true);
        let wv = g.param(w);
        let h = g.tanh(wv).unwrap();
        let m = g.matmul(h, wv).unwrap();
        let s = g.softmax_rows(m).unwrap();
        let l = g.log(s).unwrap();
        let root = g.sum(l, None).unwrap();
        g.backward(root).unwrap().by_name("W").unwrap().clone()
    };
    let (a, b) = (run(), run());
    let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn gather_scatter_are_adjoint() {
    let mut g = Tape::<f64>::new();
    let x = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let idx: std::sync::Arc<[usize]> = vec![2, 0, 2].into();
    let y = g.gather_rows(x, idx.clone()).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    let z = g.scatter_add_rows(y, idx, 3).unwrap();
    assert_eq!(g.value(z).data(), &[1.0, 2.0, 0.0, 0.0, 10.0, 12.0]);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-10.0f64..10.0, 12)) {
        let mut g = Tape::<f64>::new();
        let x = g.constant(t(&[3, 4], &vals));
        let y = g.softmax_rows(x).unwrap();
        for row in g.value(y).data().chunks(4) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn conv1d_preserves_length(len in 3usize..20, k in prop::sample::select(vec![1usize, 3, 5])) {
        prop_assume!(len >= k);
        let mut g = Tape::<f64>::new();
        let x = g.constant(Tensor::full(vec![2, 3, len], 0.5));
        let w = g.constant(Tensor::full(vec![4, 3, k], 0.1));
        let y = g.conv1d(x, w, None).unwrap();
        prop_assert_eq!(g.shape(y), &[2, 4, len][..]);
    }
}
