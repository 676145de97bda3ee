use alf_core::gradcheck::{self, relative_error};
use alf_core::{Error, Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..3 {
        for (name, err) in gradcheck::primitive_suite(seed).unwrap() {
            assert!(err < 1e-3, "{name} (seed {seed}): relative error {err:e}");
        }
    }
}

#[test]
fn sum_of_squares_gradient_is_twice_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::<f32>::randn([3, 4], &mut rng);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let sq = g.square(xv);
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    let expect = x.map(|v| 2.0 * v);
    assert_eq!(grads.wrt(&g, xv), expect);
}

#[test]
fn untouched_parameter_gets_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let used = g.leaf(Tensor::full([2], 3.0));
    let unused = g.leaf(Tensor::full([5], 1.0));
    let loss = g.sum(used);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(unused).is_none());
    assert_eq!(grads.wrt(&g, unused), Tensor::zeros([5]));
}

#[test]
fn non_scalar_loss_is_a_contract_violation() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros([2, 2]));
    let y = g.square(x);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn non_finite_loss_aborts() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::full([1], f32::NAN));
    let loss = g.sum(x);
    assert!(matches!(g.backward(loss), Err(Error::NonFinite { .. })));
}

#[test]
fn straight_through_rounding_passes_gradient_unchanged() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::new([3], vec![0.4, -1.6, 2.5]).unwrap());
    let r = g.round_ste(x);
    assert_eq!(g.value(r).data(), &[0.0, -2.0, 3.0]);
    let loss = g.sum(r);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(&g, x).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for &(stride, pad, k) in &[(1, 0, 1), (1, 1, 3), (2, 1, 4), (2, 0, 2)] {
        let a = Tensor::<f64>::randn([1, 1, 4, 4], &mut rng);
        let w = Tensor::<f64>::randn([2, 1, k, k], &mut rng);
        let mut g = Graph::new();
        let (av, wv) = (g.constant(a.clone()), g.constant(w));
        let ca = g.conv2d(av, wv, stride, pad).unwrap();
        let b = Tensor::<f64>::randn(g.shape(ca), &mut rng);
        let bv = g.constant(b.clone());
        let tb = g.conv_transpose2d(bv, wv, stride, pad).unwrap();
        assert_eq!(g.shape(tb), a.shape());
        let lhs = g.value(ca).dot(&b);
        let rhs = a.dot(g.value(tb));
        assert!((lhs - rhs).abs() < 1e-5, "stride {stride} pad {pad}: {lhs} vs {rhs}");
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        let unit = alf_core::nn::Unit::new(&mut store, &mut rng, "u", 8, false);
        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let x = g.constant(Tensor::randn([2, 8, 4, 4], &mut rng));
        let y = unit.forward(&mut g, &p, x, None).unwrap();
        let sq = g.square(y);
        let loss = g.mean(sq);
        let grads = g.backward(loss).unwrap();
        (g.value(y).clone(), p.grads(&g, &grads))
    };
    let (y1, g1) = run();
    let (y2, g2) = run();
    assert_eq!(y1, y2);
    assert_eq!(g1, g2);
}

#[test]
fn relative_error_is_scale_free() {
    assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    assert!((relative_error(&[1.0], &[1.001]) - 0.001 / 1.001).abs() < 1e-12);
}
