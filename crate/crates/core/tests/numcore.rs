use sotsep::numcore::{gradcheck, Graph, Tensor};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn random_gradient_checks_pass() {
    let results = gradcheck::run_random_checks(100, 7).unwrap();
    for (name, err) in &results {
        assert!(*err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn matmul_sum_gradient_is_row_sum_of_rhs() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::uniform(vec![4, 5], -2.0, 2.0, &mut rng);
    let b = Tensor::uniform(vec![5, 3], -2.0, 2.0, &mut rng);
    let mut g = Graph::new();
    let (av, bv) = (g.leaf(a.clone()), g.constant(b.clone()));
    let c = g.matmul(av, bv).unwrap();
    let s = g.sum(c);
    let grads = g.backward(s).unwrap();
    let ga = grads.get(av).unwrap();
    for i in 0..4 {
        for k in 0..5 {
            let row_sum: f64 = b.row(k).iter().sum();
            assert!(close(ga[i * 5 + k], row_sum, 1e-12));
        }
    }
    let fd = gradcheck::max_gradient_error(
        &[a],
        |g, v| {
            let bv = g.constant(b.clone());
            let c = g.matmul(v[0], bv)?;
            Ok(g.sum(c))
        },
        1e-5,
        1e-2,
    )
    .unwrap();
    assert!(fd < 1e-6);
}

#[test]
fn softmax_examples() {
    let u = t(&[3], &[0.0, 0.0, 0.0]).softmax(0).unwrap();
    for v in u.data() {
        assert!(close(*v, 1.0 / 3.0, 1e-15));
    }
    let sat = t(&[3], &[1000.0, 0.0, 0.0]).softmax(0).unwrap();
    assert!(close(sat.data()[0], 1.0, 1e-12));

    // direct e^x / Σe^x
    let xs = [1.0f64, 2.0, 3.0];
    let z: f64 = xs.iter().map(|x| x.exp()).sum();
    let y = t(&[3], &xs).softmax(0).unwrap();
    for (i, x) in xs.iter().enumerate() {
        assert!(close(y.data()[i], x.exp() / z, 1e-15));
    }
    assert!(close(y.data()[0], 0.09003057, 1e-8));
    assert!(close(y.data()[1], 0.24472847, 1e-8));
    assert!(close(y.data()[2], 0.66524096, 1e-8));
}

#[test]
fn softmax_rejects_nan() {
    assert!(t(&[2], &[f64::NAN, 0.0]).softmax(0).is_err());
}

#[test]
fn softmax_sums_to_one_for_large_inputs() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let x = Tensor::uniform(vec![17], -1e3, 1e3, &mut rng);
        let s: f64 = x.softmax(0).unwrap().sum();
        assert!(close(s, 1.0, 1e-12), "{s}");
    }
}

#[test]
fn layer_norm_examples() {
    let (gain, bias) = (Tensor::ones(vec![4]), Tensor::zeros(vec![4]));
    let y = t(&[4], &[3.0; 4]).layer_norm(&gain, &bias, 1e-5).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));

    let y = t(&[2], &[1.0, 3.0])
        .layer_norm(&Tensor::ones(vec![2]), &Tensor::zeros(vec![2]), 1e-14)
        .unwrap();
    assert!(close(y.data()[0], -1.0, 1e-12) && close(y.data()[1], 1.0, 1e-12));
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let uniform = g.constant(Tensor::zeros(vec![1, 5]));
    let l = g.cross_entropy(uniform, &[3], None).unwrap();
    assert!(close(g.value(l).item(), 5f64.ln(), 1e-12));

    let mut logits = vec![0.0; 5];
    logits[2] = 30.0;
    let sharp = g.constant(t(&[1, 5], &logits));
    let l = g.cross_entropy(sharp, &[2], None).unwrap();
    assert!(g.value(l).item() < 1e-9);

    let x = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
    let l = g.cross_entropy(x, &[2], None).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    let expected = -(3f64.exp() / z).ln();
    assert!(close(g.value(l).item(), expected, 1e-12));
    assert!(close(g.value(l).item(), 0.40761, 1e-5));
}

#[test]
fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let l = g.cross_entropy(x, &[9, 9], Some(9)).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(vec![1, 3]));
    assert!(g.cross_entropy(x, &[3], None).is_err());
}

#[test]
fn shared_use_accumulates() {
    // f(x) = x·x + x  ⇒  f'(x) = 2x + 1
    for x0 in [-1.5, 0.0, 0.25, 3.0] {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(x0));
        let sq = g.mul(x, x).unwrap();
        let f = g.add(sq, x).unwrap();
        let grads = g.backward(f).unwrap();
        assert!(close(grads.get(x).unwrap()[0], 2.0 * x0 + 1.0, 1e-15));
    }
}

#[test]
fn inference_graph_records_nothing_for_backward() {
    let store = sotsep::numcore::ParamStore::new();
    let mut g = Graph::inference(&store);
    let x = g.leaf(Tensor::scalar(2.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert!(grads.get(x).is_none());
}
