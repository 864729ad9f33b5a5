use super::*;
use approx::assert_abs_diff_eq;

fn vec1(g: &mut Graph, v: &[f64]) -> Var {
    g.constant(&Tensor::vector(v.to_vec()))
}

#[test]
fn relu_and_softmax_examples() {
    let mut g = Graph::new();
    let x = vec1(&mut g, &[-1.0, 0.0, 2.0]);
    let r = g.relu(x);
    assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);
    let z = vec1(&mut g, &[0.0, 0.0]);
    let s = g.softmax(z, 0).unwrap();
    assert_eq!(g.value(s), &[0.5, 0.5]);
}

#[test]
fn conv2d_sliding_window_sum() {
    let mut g = Graph::new();
    let x = g
        .constant_from(&[1, 1, 3, 3], (1..=9).map(f64::from).collect())
        .unwrap();
    let k = g.constant_from(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y), &[12.0, 16.0, 24.0, 28.0]);
}

#[test]
fn conv2d_padding_and_stride_shapes() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::zeros(&[1, 2, 5, 7]));
    let k = g.constant(&Tensor::zeros(&[4, 2, 3, 3]));
    let same = g.conv2d(x, k, None, 1, 1).unwrap();
    assert_eq!(g.shape(same), &[1, 4, 5, 7]);
    let strided = g.conv2d(x, k, None, 2, 0).unwrap();
    assert_eq!(g.shape(strided), &[1, 4, 2, 3]);
    let pooled = g.maxpool2d(same, 2, 2).unwrap();
    assert_eq!(g.shape(pooled), &[1, 4, 2, 3]);
    let bad_k = g.constant(&Tensor::zeros(&[4, 3, 3, 3]));
    let err = g.conv2d(x, bad_k, None, 1, 1).unwrap_err().to_string();
    assert!(err.contains("conv2d"), "{err}");
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.constant(&Tensor::zeros(&[2, 3]));
    let b = g.constant(&Tensor::zeros(&[2, 3]));
    assert!(g.matmul(a, b).unwrap_err().to_string().contains("matmul"));
    let c = g.constant(&Tensor::zeros(&[4]));
    assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
    assert!(g.slice(a, 1, 2, 2).is_err());
}

#[test]
fn broadcasting_add_over_leading_axes() {
    let mut g = Graph::new();
    let a = g.constant_from(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let b = vec1(&mut g, &[10.0, 20.0, 30.0]);
    let c = g.add(a, b).unwrap();
    assert_eq!(g.value(c), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
}

#[test]
fn backward_mean_of_product() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![1.0, 2.0]));
    let unused = store.add("p", Tensor::vector(vec![5.0]));
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let x = vec1(&mut g, &[3.0, 4.0]);
    let prod = g.mul(wv, x).unwrap();
    let loss = g.mean(prod);
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(w).grad().unwrap(), &[1.5, 2.0]);
    assert_eq!(store.get(unused).grad().unwrap(), &[0.0]);
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(w).grad().unwrap(), &[3.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![1.0, 2.0]));
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    assert!(g.backward(wv, &mut store).is_err());
}

#[test]
fn kl_examples() {
    let cases = [
        ([0.3, 0.7], [0.3, 0.7], 0.0),
        ([0.8, 0.2], [1.0, 0.0], -(0.8f64).ln()),
        ([0.25, 0.75], [0.5, 0.5], 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln()),
    ];
    for (pred, gold, want) in cases {
        let mut g = Graph::new();
        let p = vec1(&mut g, &pred);
        let l = kl_loss(&mut g, p, &gold).unwrap();
        assert_abs_diff_eq!(g.value(l)[0], want, epsilon = 1e-12);
        assert_abs_diff_eq!(kl_divergence(&pred, &gold), want, epsilon = 1e-12);
    }
    assert_abs_diff_eq!(-(0.8f64).ln(), 0.22314, epsilon = 1e-5);
    assert_abs_diff_eq!(0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln(), 0.14384, epsilon = 1e-5);

    let mut g = Graph::new();
    let p = vec1(&mut g, &[0.5, 0.5]);
    assert!(kl_loss(&mut g, p, &[1.0, 0.0, 0.0]).is_err());
    assert!(kl_loss(&mut g, p, &[0.9, 0.9]).is_err());
}

#[test]
fn optimizer_examples() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::scalar(1.0));
    store.get_mut(p).accumulate_grad(&[2.0]);
    let mut sgd = Optimizer::sgd(0.1);
    sgd.step(&mut store).unwrap();
    assert_abs_diff_eq!(store.get(p).item(), 0.8, epsilon = 1e-15);
    assert!(store.get(p).grad().is_none());
    assert!(sgd.step(&mut store).is_err(), "missing gradients");

    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::scalar(0.0));
    store.get_mut(p).accumulate_grad(&[1.0]);
    let mut adam = Optimizer::adam(0.001);
    adam.step(&mut store).unwrap();
    // m̂ = v̂ = 1 at t = 1, so the step is lr / (1 + ε).
    assert_abs_diff_eq!(store.get(p).item(), -0.001 / (1.0 + 1e-8), epsilon = 1e-15);
    assert_eq!(adam.steps(), 1);

    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::scalar(3.0));
    store.get_mut(p).accumulate_grad(&[0.0]);
    Optimizer::adam(0.1).step(&mut store).unwrap();
    assert_eq!(store.get(p).item(), 3.0);
}

#[test]
fn grad_check_linear_is_exact() {
    let r = grad_check(
        |g, x| {
            let a = g.scale(x[0], 3.0);
            g.add(a, x[1])
        },
        &[vec![4], vec![4]],
        1e-4,
        1,
    )
    .unwrap();
    assert!(r.max_relative_error < 1e-10, "{}", r.max_relative_error);
}

#[test]
fn grad_check_tanh_and_softmax_kl() {
    for seed in 0..5 {
        let r = grad_check(
            |g, x| {
                let m = g.matmul(x[0], x[1])?;
                let t = g.tanh(m);
                Ok(g.mean(t))
            },
            &[vec![2, 3], vec![3, 2]],
            1e-4,
            seed,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-4, "tanh {}", r.max_relative_error);
        let r = grad_check(
            |g, x| {
                let s = g.softmax(x[0], 0)?;
                kl_loss(g, s, &[0.2, 0.5, 0.3])
            },
            &[vec![3]],
            1e-4,
            seed,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-4, "kl {}", r.max_relative_error);
    }
}

#[test]
fn grad_check_resamples_near_kinks() {
    let r = grad_check(|g, x| Ok(g.relu(x[0])), &[vec![50]], 1e-2, 3).unwrap();
    assert!(r.max_relative_error < 1e-6);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut store = ParamStore::new();
    store.add("a", Tensor::new(vec![2, 2], vec![0.1, -1.0 / 3.0, 1e-300, 7.0]).unwrap());
    store.add("s", Tensor::scalar(std::f64::consts::PI));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.txt");
    let header = vec![("model".to_owned(), "test".to_owned())];
    write_checkpoint(&path, &header, &store).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back.header, header);
    assert_eq!(back.params, store);
}

#[test]
fn reverse_and_pad() {
    let mut g = Graph::new();
    let x = g.constant_from(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let r0 = g.reverse(x, 0).unwrap();
    assert_eq!(g.value(r0), &[3.0, 4.0, 1.0, 2.0]);
    let r1 = g.reverse(x, 1).unwrap();
    assert_eq!(g.value(r1), &[2.0, 1.0, 4.0, 3.0]);
    let x3 = g.reshape(x, &[1, 2, 2]).unwrap();
    let p = g.pad2d(x3, 3, 3).unwrap();
    assert_eq!(g.value(p), &[1.0, 2.0, 0.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn pairwise_definitions() {
    let mut g = Graph::new();
    let a = g.constant_from(&[2, 2], vec![1.0, 0.0, 3.0, 4.0]).unwrap();
    let b = g.constant_from(&[1, 2], vec![3.0, 4.0]).unwrap();
    let cos = g.pairwise(a, b, Pairwise::Cosine).unwrap();
    assert_abs_diff_eq!(g.value(cos)[0], 0.6, epsilon = 1e-15);
    assert_abs_diff_eq!(g.value(cos)[1], 1.0, epsilon = 1e-15);
    let l2 = g.pairwise(a, b, Pairwise::NegL2).unwrap();
    assert_abs_diff_eq!(g.value(l2)[0], -(4.0f64 + 16.0).sqrt(), epsilon = 1e-15);
    assert_eq!(g.value(l2)[1], 0.0);
    let dot = g.pairwise(a, b, Pairwise::Dot).unwrap();
    assert_eq!(g.value(dot), &[3.0, 25.0]);
}
