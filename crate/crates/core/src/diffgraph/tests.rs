use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::{central_difference, relative_error};
use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn feed_of(map: &HashMap<String, Tensor<f64>>) -> Feed<'_, f64> {
    map.iter().map(|(k, v)| (k.as_str(), v)).collect()
}

/// Max relative error between analytic and central-difference gradients.
fn max_gradient_error(graph: &Graph, inputs: &HashMap<String, Tensor<f64>>, out: NodeId, wrt: &[&str]) -> f64 {
    let (_, analytic) = graph.gradient(&feed_of(inputs), out, wrt).unwrap();
    let numeric = central_difference(graph, inputs, out, wrt, 1e-5).unwrap();
    wrt.iter()
        .map(|w| relative_error(analytic[*w].data(), numeric[*w].data()))
        .fold(0.0, f64::max)
}

/// Builds `Σ op(...) ⊙ r` so every output element carries a random weight.
fn weighted_sum(g: &mut Graph, node: NodeId) -> NodeId {
    let r = g.input("r");
    let m = g.mul(node, r);
    g.sum(m)
}

type Case = (Graph, HashMap<String, Tensor<f64>>, NodeId, Vec<&'static str>);

fn primitive_case(kind: &str, rng: &mut ChaCha8Rng) -> Case {
    let mut g = Graph::new();
    let mut inputs = HashMap::new();
    let mut put = |name: &str, shape: &[usize], rng: &mut ChaCha8Rng| {
        inputs.insert(name.to_string(), rand_tensor(rng, shape));
    };
    let (node, out_shape, wrt): (NodeId, Vec<usize>, Vec<&str>) = match kind {
        "affine" => {
            put("x", &[3, 4], rng);
            put("w", &[4, 5], rng);
            put("b", &[5], rng);
            let (x, w, b) = (g.input("x"), g.input("w"), g.input("b"));
            (g.affine(x, w, b), vec![3, 5], vec!["x", "w", "b"])
        }
        "causal_conv" => {
            put("x", &[2, 5, 3], rng);
            put("p", &[2, 2, 3], rng);
            put("w", &[6, 4], rng);
            put("b", &[4], rng);
            let (x, p, w, b) = (g.input("x"), g.input("p"), g.input("w"), g.input("b"));
            (g.causal_conv(x, p, w, b), vec![2, 5, 4], vec!["x", "p", "w", "b"])
        }
        "gru" => {
            put("x", &[2, 4, 3], rng);
            put("h0", &[2, 3], rng);
            put("wi", &[3, 9], rng);
            put("wh", &[3, 9], rng);
            put("bi", &[9], rng);
            put("bh", &[9], rng);
            let ids: Vec<NodeId> = ["x", "h0", "wi", "wh", "bi", "bh"].iter().map(|n| g.input(n)).collect();
            (g.gru(ids[0], ids[1], ids[2], ids[3], ids[4], ids[5]), vec![2, 4, 3], vec!["x", "h0", "wi", "wh", "bi", "bh"])
        }
        "relu" | "tanh" | "sigmoid" | "softplus" | "sin" | "cos" | "scale" | "offset" | "slice" => {
            put("x", &[4, 6], rng);
            let x = g.input("x");
            let node = match kind {
                "relu" => g.relu(x),
                "tanh" => g.tanh(x),
                "sigmoid" => g.sigmoid(x),
                "softplus" => g.softplus(x),
                "sin" => g.sin(x),
                "cos" => g.cos(x),
                "scale" => g.scale(x, -1.7),
                "offset" => g.offset(x, 0.3),
                _ => g.slice(x, 2, 3),
            };
            let shape = if kind == "slice" { vec![4, 3] } else { vec![4, 6] };
            (node, shape, vec!["x"])
        }
        "add" | "mul" => {
            put("a", &[3, 4], rng);
            put("b", &[3, 4], rng);
            let (a, b) = (g.input("a"), g.input("b"));
            let node = if kind == "add" { g.add_nodes(a, b) } else { g.mul(a, b) };
            (node, vec![3, 4], vec!["a", "b"])
        }
        "add_frames" => {
            put("a", &[2, 3, 4], rng);
            put("c", &[2, 4], rng);
            let (a, c) = (g.input("a"), g.input("c"));
            (g.add_frames(a, c), vec![2, 3, 4], vec!["a", "c"])
        }
        "concat" => {
            put("a", &[3, 2], rng);
            put("b", &[3, 4], rng);
            let (a, b) = (g.input("a"), g.input("b"));
            (g.concat(&[a, b]), vec![3, 6], vec!["a", "b"])
        }
        "logistic" => {
            put("x", &[3, 5], rng);
            put("mu", &[3, 5], rng);
            put("raw_s", &[3, 5], rng);
            let (x, mu, raw) = (g.input("x"), g.input("mu"), g.input("raw_s"));
            let sp = g.softplus(raw);
            let s = g.offset(sp, 0.1);
            (g.logistic_log_density(x, mu, s), vec![3, 5], vec!["x", "mu", "raw_s"])
        }
        "sum" => {
            put("x", &[5, 2], rng);
            let x = g.input("x");
            let s = g.sum(x);
            return (g, inputs, s, vec!["x"]);
        }
        other => panic!("unknown primitive {other}"),
    };
    inputs.insert("r".to_string(), rand_tensor(rng, &out_shape));
    let out = weighted_sum(&mut g, node);
    (g, inputs, out, wrt)
}

const PRIMITIVES: [&str; 18] = [
    "affine", "causal_conv", "gru", "relu", "tanh", "sigmoid", "softplus", "sin", "cos", "scale", "offset", "slice",
    "add", "mul", "add_frames", "concat", "logistic", "sum",
];

#[test]
fn every_primitive_matches_finite_differences() {
    for kind in PRIMITIVES {
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (g, inputs, out, wrt) = primitive_case(kind, &mut rng);
            worst = worst.max(max_gradient_error(&g, &inputs, out, &wrt));
        }
        assert!(worst <= 1e-4, "{kind}: max relative error {worst:e}");
    }
}

#[test]
fn square_value_and_derivative() {
    let mut g = Graph::new();
    let x = g.input("x");
    let sq = g.mul(x, x);
    let out = g.sum(sq);
    let t = Tensor::scalar(3.0f64);
    let feed: Feed<'_, f64> = [("x", &t)].into_iter().collect();
    let (value, grads) = g.gradient(&feed, out, &["x"]).unwrap();
    assert_eq!(value, 9.0);
    assert_eq!(grads["x"].item(), 6.0);
}

#[test]
fn tanh_derivative_at_zero() {
    let mut g = Graph::new();
    let x = g.input("x");
    let t = g.tanh(x);
    let out = g.sum(t);
    let v = Tensor::scalar(0.0f64);
    let feed: Feed<'_, f64> = [("x", &v)].into_iter().collect();
    let (_, grads) = g.gradient(&feed, out, &["x"]).unwrap();
    assert_eq!(grads["x"].item(), 1.0);
}

#[test]
fn empty_sum_is_zero() {
    let mut g = Graph::new();
    let x = g.input("x");
    let s = g.sum(x);
    let v = Tensor::<f64>::zeros(&[0]);
    let feed: Feed<'_, f64> = [("x", &v)].into_iter().collect();
    assert_eq!(g.forward(&feed).unwrap().value(s).item(), 0.0);
}

#[test]
fn mlp_forward_matches_scalar_reevaluation() {
    let dims = [5usize, 7, 6, 3];
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut g = Graph::new();
        let mut inputs = HashMap::new();
        inputs.insert("x".to_string(), rand_tensor(&mut rng, &[4, dims[0]]));
        let mut h = g.input("x");
        for l in 0..3 {
            inputs.insert(format!("w{l}"), rand_tensor(&mut rng, &[dims[l], dims[l + 1]]));
            inputs.insert(format!("b{l}"), rand_tensor(&mut rng, &[dims[l + 1]]));
            let (w, b) = (g.input(&format!("w{l}")), g.input(&format!("b{l}")));
            h = g.affine(h, w, b);
            if l < 2 {
                h = g.relu(h);
            }
        }
        let eval = g.forward(&feed_of(&inputs)).unwrap();
        let got = eval.value(h).data().to_vec();

        // Independent scalar evaluation.
        let x = inputs["x"].data();
        for row in 0..4 {
            let mut act: Vec<f64> = x[row * dims[0]..(row + 1) * dims[0]].to_vec();
            for l in 0..3 {
                let w = inputs[&format!("w{l}")].data();
                let b = inputs[&format!("b{l}")].data();
                let mut next = vec![0.0; dims[l + 1]];
                for (o, nv) in next.iter_mut().enumerate() {
                    let mut acc = b[o];
                    for (i, a) in act.iter().enumerate() {
                        acc += a * w[i * dims[l + 1] + o];
                    }
                    *nv = if l < 2 { acc.max(0.0) } else { acc };
                }
                act = next;
            }
            for (o, v) in act.iter().enumerate() {
                assert!((got[row * 3 + o] - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gradient_is_linear_over_graph_copies() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (g1, mut inputs, out1, _) = primitive_case("gru", &mut rng);
    let mut rng2 = ChaCha8Rng::seed_from_u64(10);
    let r2 = rand_tensor(&mut rng2, inputs["r"].shape());
    let (_, g_a) = g1.gradient(&feed_of(&inputs), out1, &["x"]).unwrap();
    let r1 = inputs.insert("r".to_string(), r2.clone()).unwrap();
    let (_, g_b) = g1.gradient(&feed_of(&inputs), out1, &["x"]).unwrap();

    // One graph holding both weighted sums added together.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = ["x", "h0", "wi", "wh", "bi", "bh"].iter().map(|n| g.input(n)).collect();
    let h = g.gru(ids[0], ids[1], ids[2], ids[3], ids[4], ids[5]);
    let (ra, rb) = (g.input("ra"), g.input("rb"));
    let (ma, mb) = (g.mul(h, ra), g.mul(h, rb));
    let (sa, sb) = (g.sum(ma), g.sum(mb));
    let total = g.add_nodes(sa, sb);
    inputs.insert("ra".to_string(), r1);
    inputs.insert("rb".to_string(), r2);
    let (_, g_sum) = g.gradient(&feed_of(&inputs), total, &["x"]).unwrap();
    for k in 0..g_sum["x"].len() {
        let expect = g_a["x"].data()[k] + g_b["x"].data()[k];
        assert!((g_sum["x"].data()[k] - expect).abs() < 1e-12);
    }
}

#[test]
fn errors_are_reported() {
    let mut g = Graph::new();
    let x = g.input("x");
    let y = g.input("y");
    let t = g.tanh(x);
    let s = g.sum(t);
    let v = Tensor::<f64>::zeros(&[3]);
    let feed: Feed<'_, f64> = [("x", &v), ("y", &v)].into_iter().collect();
    assert!(matches!(g.gradient(&feed, t, &["x"]), Err(GraphError::NonScalarOutput(..))));
    assert!(matches!(g.gradient(&feed, s, &["y"]), Err(GraphError::Unreachable(_))));
    let _ = y;
    let empty: Feed<'_, f64> = HashMap::new();
    assert!(matches!(g.forward(&empty), Err(GraphError::MissingInput(_))));
    assert!(matches!(g.push(Op::Relu, &[99]), Err(GraphError::UnknownNode(99))));

    let mut g = Graph::new();
    let (a, b) = (g.input("a"), g.input("b"));
    let _ = g.add_nodes(a, b);
    let ta = Tensor::<f64>::zeros(&[2]);
    let tb = Tensor::<f64>::zeros(&[3]);
    let feed: Feed<'_, f64> = [("a", &ta), ("b", &tb)].into_iter().collect();
    assert!(matches!(g.forward(&feed), Err(GraphError::Shape(_))));
}

#[test]
fn forward_is_deterministic_and_f32_agrees() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (g, inputs, out, wrt) = primitive_case("gru", &mut rng);
    let (v1, g1) = g.gradient(&feed_of(&inputs), out, &wrt).unwrap();
    let (v2, g2) = g.gradient(&feed_of(&inputs), out, &wrt).unwrap();
    assert_eq!(v1.to_bits(), v2.to_bits());
    assert_eq!(g1, g2);

    let single: HashMap<String, Tensor<f32>> = inputs
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::from_f64(v.shape(), v.data()).unwrap()))
        .collect();
    let feed: Feed<'_, f32> = single.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let (v32, _) = g.gradient(&feed, out, &wrt).unwrap();
    assert!((f64::from(v32) - v1).abs() < 1e-4 * v1.abs().max(1.0));
}
