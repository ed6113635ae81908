use kediff::autodiff::{finite_difference_check, GradCheckConfig, Graph, ParamStore};
use kediff::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, rng)
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[1, 3]));
    let s = g.softmax(z);
    let v = g.eval(s, &ParamStore::new()).unwrap();
    for &x in v.data() {
        assert!((x - 1.0 / 3.0).abs() < 1e-16);
    }
}

#[test]
fn identity_matmul_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(&[2, 5], &mut rng);
    let mut g = Graph::<f64>::new();
    let i = g.constant(Tensor::identity(2));
    let x = g.constant(a.clone());
    let m = g.matmul(i, x);
    assert!(g.eval(m, &ParamStore::new()).unwrap().bits_eq(&a));
}

#[test]
fn bilinear_gradient_is_other_factor() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = ParamStore::new();
    p.insert("x", randn(&[3, 4], &mut rng));
    p.insert("y", randn(&[3, 4], &mut rng));
    let mut g = Graph::new();
    let x = g.param("x");
    let y = g.param("y");
    let xy = g.mul(x, y);
    let root = g.sum(xy);
    g.forward(&p).unwrap();
    let grads = g.backward(root).unwrap();
    assert!(grads["x"].bits_eq(p.get("y").unwrap()));
    assert!(grads["y"].bits_eq(p.get("x").unwrap()));
}

#[test]
fn softmax_sum_gradient_vanishes() {
    // sum(softmax(z)) is constant per row, so its gradient is zero
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = ParamStore::new();
    p.insert("z", randn(&[4, 6], &mut rng));
    let mut g = Graph::new();
    let z = g.param("z");
    let s = g.softmax(z);
    let root = g.sum(s);
    g.forward(&p).unwrap();
    let grad = &g.backward(root).unwrap()["z"];
    for row in grad.data().chunks(6) {
        let total: f64 = row.iter().sum();
        assert!(total.abs() < 1e-15);
        assert!(row.iter().all(|v| v.abs() < 1e-15));
    }
}

#[test]
fn backward_errors() {
    let mut p = ParamStore::new();
    p.insert("x", Tensor::<f64>::ones(&[2, 2]));
    let mut g = Graph::new();
    let x = g.param("x");
    let sq = g.square(x);
    assert!(matches!(g.backward(sq), Err(Error::ForwardNotRun)));
    g.forward(&p).unwrap();
    assert!(matches!(g.backward(sq), Err(Error::NotScalarRoot(_))));
}

#[test]
fn forward_errors_name_the_node() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let m = g.matmul(a, b);
    match g.forward(&ParamStore::new()) {
        Err(Error::ShapeMismatch(msg)) => assert!(msg.contains(&format!("node {}", m.index()))),
        other => panic!("{other:?}"),
    }

    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::full(&[2], 1e300));
    let sq = g.square(a);
    let _ = g.sum(sq);
    match g.forward(&ParamStore::new()) {
        Err(Error::NonFinite { node, op }) => {
            assert_eq!(node, sq.index());
            assert_eq!(op, "square");
        }
        other => panic!("{other:?}"),
    }

    let mut g = Graph::<f64>::new();
    g.param("missing");
    assert!(matches!(g.forward(&ParamStore::new()), Err(Error::UnboundLeaf(_))));
}

#[test]
fn linear_root_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = ParamStore::new();
    p.insert("w", randn(&[1, 5], &mut rng));
    let mut g = Graph::new();
    let w = g.param("w");
    let x = g.constant(randn(&[5, 1], &mut rng));
    let wx = g.matmul(w, x);
    let root = g.sum(wx);
    let cfg = GradCheckConfig::default();
    let report = finite_difference_check(&mut g, root, &p, &cfg).unwrap();
    assert!(report.max_rel_error < 1e-9, "{report:?}");
}

#[test]
fn zero_step_is_rejected() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::<f64>::ones(&[2]));
    let mut g = Graph::new();
    let w = g.param("w");
    let root = g.sum(w);
    let cfg = GradCheckConfig { step: 0.0, ..Default::default() };
    assert!(matches!(finite_difference_check(&mut g, root, &p, &cfg), Err(Error::InvalidStep(_))));
}

#[test]
fn forward_is_deterministic() {
    let build = || {
        let mut g = Graph::<f64>::with_seed(11);
        let x = g.param("x");
        let m = g.mask(&[3, 4], 0.7);
        let y = g.mul(x, m);
        let s = g.softmax(y);
        let root = g.mean(s);
        (g, root)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = ParamStore::new();
    p.insert("x", randn(&[3, 4], &mut rng));
    let (mut g1, r1) = build();
    let (mut g2, r2) = build();
    let a = g1.eval(r1, &p).unwrap();
    let b = g2.eval(r2, &p).unwrap();
    assert!(a.bits_eq(&b));
}

#[test]
fn normalization_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let rows = rng.gen_range(1..6);
        let cols = rng.gen_range(2..12);
        let x = randn(&[rows, cols], &mut rng).scale(rng.gen_range(0.1..30.0));
        let mut g = Graph::<f64>::new();
        let c = g.constant(x);
        let s = g.softmax(c);
        let l = g.layer_norm(c);
        g.forward(&ParamStore::new()).unwrap();
        for row in g.value(s).unwrap().data().chunks(cols) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for row in g.value(l).unwrap().data().chunks(cols) {
            assert!((row.iter().sum::<f64>() / cols as f64).abs() < 1e-10);
        }
    }
}

/// Random three-layer perceptron evaluated through the graph and through a
/// hand-written loop over plain vectors.
#[test]
fn mlp_matches_straight_line_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dims = [5usize, 7, 6, 3];
    let mut p = ParamStore::new();
    for l in 0..3 {
        p.insert(format!("w{l}"), randn(&[dims[l], dims[l + 1]], &mut rng));
        p.insert(format!("b{l}"), randn(&[dims[l + 1]], &mut rng));
    }
    let input = randn(&[4, 5], &mut rng);

    let mut g = Graph::new();
    let mut h = g.constant(input.clone());
    for l in 0..3 {
        let w = g.param(&format!("w{l}"));
        let b = g.param(&format!("b{l}"));
        h = g.affine(h, w, b);
        if l < 2 {
            h = g.silu(h);
        }
    }
    let got = g.eval(h, &p).unwrap();

    let mut rows: Vec<Vec<f64>> = input.data().chunks(5).map(|r| r.to_vec()).collect();
    for l in 0..3 {
        let w = p.get(&format!("w{l}")).unwrap().data();
        let b = p.get(&format!("b{l}")).unwrap().data();
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        rows = rows
            .iter()
            .map(|r| {
                (0..fan_out)
                    .map(|j| {
                        let mut acc = 0.0;
                        for k in 0..fan_in {
                            acc += r[k] * w[k * fan_out + j];
                        }
                        let v = acc + b[j];
                        if l < 2 {
                            v / (1.0 + (-v).exp())
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect();
    }
    let want: Vec<f64> = rows.concat();
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-13 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

/// Builds one randomized single-primitive graph reduced to a scalar through a
/// fixed random readout, so that every output entry carries a distinct weight.
fn primitive_case(kind: usize, rng: &mut ChaCha8Rng) -> (Graph<f64>, kediff::autodiff::NodeId, ParamStore<f64>) {
    let r = rng.gen_range(1..5);
    let c = rng.gen_range(1..6);
    let mut p = ParamStore::new();
    let mut g = Graph::new();
    p.insert("a", randn(&[r, c], rng));
    let a = g.param("a");
    let out = match kind {
        0 | 1 | 2 => {
            let broadcast = rng.gen_bool(0.5);
            let bshape = if broadcast { vec![c] } else { vec![r, c] };
            p.insert("b", randn(&bshape, rng));
            let b = g.param("b");
            match kind {
                0 => g.add(a, b),
                1 => g.sub(a, b),
                _ => g.mul(a, b),
            }
        }
        3 => {
            let k = rng.gen_range(1..5);
            p.insert("b", randn(&[c, k], rng));
            let b = g.param("b");
            g.matmul(a, b)
        }
        4 => {
            let r2 = rng.gen_range(1..4);
            p.insert("b", randn(&[r2, c], rng));
            let b = g.param("b");
            g.concat(&[a, b])
        }
        5 => g.reshape(a, &[r * c]),
        6 => g.transpose(a),
        7 => g.softmax(a),
        8 => {
            // layer norm saturates to ±1 with fewer than three columns
            let c = c.max(3);
            p.insert("a", randn(&[r, c], rng));
            g.layer_norm(a)
        }
        9 => g.silu(a),
        10 => {
            let rows: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..r)).collect();
            g.gather(a, &rows)
        }
        11 => g.scale(a, rng.gen_range(-3.0..3.0)),
        12 => g.mean(a),
        13 => g.sum(a),
        _ => g.square(a),
    };
    // probe with a random readout of the output's shape
    let probe_shape = {
        let mut tmp = ParamStore::new();
        for (k, v) in p.iter() {
            tmp.insert(k.clone(), v.clone());
        }
        g.eval(out, &tmp).unwrap().shape().to_vec()
    };
    let w = g.constant(randn(&probe_shape, rng));
    let prod = g.mul(out, w);
    let root = g.sum(prod);
    (g, root, p)
}

#[test]
fn every_primitive_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = GradCheckConfig::default();
    let mut worst = 0.0f64;
    for kind in 0..15 {
        for _ in 0..100 {
            let (mut g, root, p) = primitive_case(kind, &mut rng);
            let report = finite_difference_check(&mut g, root, &p, &cfg).unwrap();
            assert!(report.passed(), "primitive {kind}: {:?}", report.worst());
            worst = worst.max(report.max_rel_error);
        }
    }
    println!("max relative error over all primitives: {worst:.3e}");
}
