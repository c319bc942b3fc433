use dualfuse::config::{FusionKind, ModelConfig};
use dualfuse::fusion::{modality_weights, tokenize_and_weight, weight_column, weights_graph, FusionLayer, FusionStack};
use dualfuse::numerics::{finite_difference, rel_err, Graph, ParamId, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model(fusion: FusionKind, k_tok: usize) -> ModelConfig {
    ModelConfig { d_model: 8, layers: 2, heads: 1, tokens_per_modality: k_tok, ffn_mult: 2, fusion, ..ModelConfig::default() }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `[B]` weight columns from per-sample rows.
fn weight_cols(g: &mut Graph, rows: &[Vec<f64>]) -> Vec<Var> {
    let m = rows[0].len();
    (0..m).map(|j| g.constant(Tensor::from_vec(rows.iter().map(|r| r[j]).collect()))).collect()
}

fn uncertainty() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-8.0f64..8.0, -8.0f64..8.0), 1..7).prop_map(|v| v.into_iter().map(|(a, b)| (a.exp(), b.exp())).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn weights_lie_on_simplex(us in uncertainty()) {
        let (r, s): (Vec<f64>, Vec<f64>) = us.into_iter().unzip();
        let w = modality_weights(&r, &s, 1e-6).unwrap();
        prop_assert!(w.iter().all(|&x| x > 0.0 && x.is_finite()));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weight_ratio_is_inverse_uncertainty_ratio(us in uncertainty(), i in 0usize..6, j in 0usize..6) {
        let (r, s): (Vec<f64>, Vec<f64>) = us.into_iter().unzip();
        let (i, j) = (i % r.len(), j % r.len());
        let w = modality_weights(&r, &s, 1e-6).unwrap();
        let expected = (r[j] * s[j]) / (r[i] * s[i]);
        prop_assert!(rel_err(w[i] / w[j], expected) < 1e-9);
    }

    #[test]
    fn equal_uncertainty_is_uniform(m in 1usize..7, r in 1e-3f64..1e3, s in 1e-3f64..1e3) {
        let w = modality_weights(&vec![r; m], &vec![s; m], 1e-6).unwrap();
        prop_assert!(w.iter().all(|&x| (x - 1.0 / m as f64).abs() < 1e-15));
    }

    #[test]
    fn scaling_commutes_with_tokenizing(seed in any::<u64>(), k_tok in prop::sample::select(vec![1usize, 2, 4])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, m, d) = (3, 3, 8);
        let mut g = Graph::inference();
        let zs: Vec<Tensor> = (0..m).map(|_| random(&mut rng, &[b, d])).collect();
        let rows: Vec<Vec<f64>> = (0..b).map(|_| (0..m).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let z: Vec<Var> = zs.iter().map(|t| g.constant(t.clone())).collect();
        let w = weight_cols(&mut g, &rows);
        let weighted = tokenize_and_weight(&mut g, &z, Some(&w), k_tok).unwrap();
        let plain = tokenize_and_weight(&mut g, &z, None, k_tok).unwrap();
        let dt = d / k_tok;
        let (a, p) = (g.value(weighted).data(), g.value(plain).data());
        for bi in 0..b {
            for t in 0..m * k_tok {
                let scale = rows[bi][t / k_tok];
                for e in 0..dt {
                    let idx = (bi * m * k_tok + t) * dt + e;
                    prop_assert_eq!(a[idx], scale * p[idx]);
                }
            }
        }
    }
}

#[test]
fn extreme_uncertainties_stay_finite() {
    let w = modality_weights(&[1e-6, 1e6, 1.0], &[1e-6, 1e6, 1.0], 1e-6).unwrap();
    assert!(w.iter().all(|x| x.is_finite()));
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(w[0] > 0.999_999);
}

#[test]
fn graph_weights_without_fluctuation_use_r_only() {
    let mut g = Graph::inference();
    let r = [g.constant(Tensor::from_vec(vec![1.0])), g.constant(Tensor::from_vec(vec![3.0]))];
    let w = weights_graph(&mut g, &[Some(r[0]), Some(r[1])], &[None, None]).unwrap();
    let got = g.value(w).data();
    assert!((got[0] - 0.75).abs() < 1e-15 && (got[1] - 0.25).abs() < 1e-15);
    let c = weight_column(&mut g, w, 1).unwrap();
    assert_eq!(g.shape(c), &[1]);
}

fn layer_setup(fusion: FusionKind, k_tok: usize, seed: u64) -> (ParamStore, FusionLayer, Tensor, Vec<Vec<f64>>) {
    let cfg = small_model(fusion, k_tok);
    let mut store = ParamStore::new(seed);
    let layer = FusionLayer::new(&mut store, "fusion.0", &cfg, 3, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model / k_tok;
    let x = random(&mut rng, &[2, 3 * k_tok, d]);
    let rows: Vec<Vec<f64>> = (0..2)
        .map(|_| {
            let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.0)).collect();
            let t: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / t).collect()
        })
        .collect();
    (store, layer, x, rows)
}

#[test]
fn doubling_a_weight_doubles_its_key_and_value_rows() {
    for k_tok in [1, 2] {
        let (store, layer, x, rows) = layer_setup(FusionKind::Decoupled, k_tok, 3);
        let mut doubled = rows.clone();
        doubled.iter_mut().for_each(|r| r[1] *= 2.0);
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let w = weight_cols(&mut g, &rows);
        let w2 = weight_cols(&mut g, &doubled);
        let (k, v) = layer.keys_values(&mut g, &store, xv, &w, k_tok).unwrap();
        let (k2, v2) = layer.keys_values(&mut g, &store, xv, &w2, k_tok).unwrap();
        let d = g.shape(k)[2];
        let n = 3 * k_tok;
        for (a, b) in [(k, k2), (v, v2)] {
            let (a, b) = (g.value(a).data(), g.value(b).data());
            for bi in 0..2 {
                for t in 0..n {
                    for e in 0..d {
                        let i = (bi * n + t) * d + e;
                        let factor = if t / k_tok == 1 { 2.0 } else { 1.0 };
                        assert!((b[i] - factor * a[i]).abs() < 1e-14, "token {t}");
                    }
                }
            }
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let (store, layer, x, rows) = layer_setup(FusionKind::Decoupled, 2, 5);
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let w = weight_cols(&mut g, &rows);
    let trace = layer.attention(&mut g, &store, xv, &w, 2).unwrap();
    let n = g.shape(trace.probs)[2];
    for row in g.value(trace.probs).data().chunks(n) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn near_one_hot_weights_keep_layer_finite() {
    let (store, layer, x, _) = layer_setup(FusionKind::Decoupled, 1, 9);
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let w = weight_cols(&mut g, &[vec![1.0 - 2e-12, 1e-12, 1e-12], vec![1e-12, 1e-12, 1.0 - 2e-12]]);
    let (h, _) = layer.forward(&mut g, &store, xv, &w, 1).unwrap();
    assert!(g.value(h).all_finite());
}

/// Central differences on every entry of one projection matrix against the
/// tape gradient of a fixed random readout of the attention output.
fn check_projection(fusion: FusionKind, pick: impl Fn(&FusionLayer) -> ParamId) {
    let (mut store, layer, x, rows) = layer_setup(fusion, 2, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let readout = random(&mut rng, &[2, 6, 4]);
    let id = pick(&layer);
    let objective = |store: &ParamStore, g: &mut Graph| -> Var {
        let xv = g.constant(x.clone());
        let w = weight_cols(g, &rows);
        let trace = layer.attention(g, store, xv, &w, 2).unwrap();
        let c = g.constant(readout.clone());
        let prod = g.mul(trace.output, c).unwrap();
        g.sum(prod)
    };
    let mut g = Graph::new();
    let loss = objective(&store, &mut g);
    g.backward(loss).unwrap();
    store.zero_grad();
    g.accumulate_param_grads(&mut store);
    let analytic = store.grad(id).unwrap().to_vec();
    let base = store.value(id).data().to_vec();
    let numeric = finite_difference(&base, 1e-6, |p| {
        store.value_mut(id).data_mut().copy_from_slice(p);
        let mut g = Graph::inference();
        let l = objective(&store, &mut g);
        g.value(l).item()
    });
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        assert!(rel_err(*a, *n) < 1e-6, "{} entry {i}: {a} vs {n}", store.name(id));
    }
}

#[test]
fn query_projection_gradient_matches_finite_difference() {
    check_projection(FusionKind::Decoupled, |l| l.wq);
}

#[test]
fn key_and_value_projection_gradients_match_finite_difference() {
    use dualfuse::fusion::KeyValue;
    for m in 0..3 {
        check_projection(FusionKind::Decoupled, |l| match &l.kv {
            KeyValue::Decoupled { wk, .. } => wk[m],
            _ => unreachable!(),
        });
        check_projection(FusionKind::Decoupled, |l| match &l.kv {
            KeyValue::Decoupled { wv, .. } => wv[m],
            _ => unreachable!(),
        });
    }
    check_projection(FusionKind::Vanilla, |l| match &l.kv {
        KeyValue::Vanilla { wk, .. } => *wk,
        _ => unreachable!(),
    });
}

/// Plain attention with one shared key/value projection and no weights,
/// written out directly against the parameter values.
fn reference_vanilla(store: &ParamStore, layer: &FusionLayer, x: &Tensor, m: usize) -> Vec<f64> {
    use dualfuse::fusion::KeyValue;
    let KeyValue::Vanilla { wk, wv } = &layer.kv else { unreachable!() };
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let proj = |w: ParamId, scale: f64| -> Vec<f64> {
        let wm = store.value(w).data();
        let mut out = vec![0.0; b * n * d];
        for row in 0..b * n {
            for j in 0..d {
                out[row * d + j] = scale * (0..d).map(|i| x.data()[row * d + i] * wm[i * d + j]).sum::<f64>();
            }
        }
        out
    };
    let c = 1.0 / m as f64;
    let (q, k, v) = (proj(layer.wq, 1.0), proj(*wk, c), proj(*wv, c));
    let mut out = vec![0.0; b * n * d];
    for bi in 0..b {
        for i in 0..n {
            let qi = &q[(bi * n + i) * d..][..d];
            let scores: Vec<f64> = (0..n).map(|j| qi.iter().zip(&k[(bi * n + j) * d..][..d]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = e.iter().sum();
            for j in 0..n {
                for t in 0..d {
                    out[(bi * n + i) * d + t] += e[j] / total * v[(bi * n + j) * d + t];
                }
            }
        }
    }
    out
}

#[test]
fn vanilla_attention_matches_reference_and_ignores_weights() {
    let (store, layer, x, rows) = layer_setup(FusionKind::Vanilla, 1, 21);
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let w = weight_cols(&mut g, &rows);
    let uniform = weight_cols(&mut g, &[vec![1.0 / 3.0; 3], vec![1.0 / 3.0; 3]]);
    let a = layer.attention(&mut g, &store, xv, &w, 1).unwrap().output;
    let b = layer.attention(&mut g, &store, xv, &uniform, 1).unwrap().output;
    assert_eq!(g.value(a).data(), g.value(b).data());
    let reference = reference_vanilla(&store, &layer, &x, 3);
    for (got, want) in g.value(a).data().iter().zip(&reference) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn tied_decoupled_layer_shares_parameters() {
    let cfg = small_model(FusionKind::Decoupled, 1);
    let mut store = ParamStore::new(0);
    let tied = FusionStack::new(&mut store, &cfg, 3, true);
    let tied_count = store.num_scalars();
    let mut store2 = ParamStore::new(0);
    FusionStack::new(&mut store2, &cfg, 3, false);
    let d = cfg.d_model;
    assert_eq!(store2.num_scalars() - tied_count, cfg.layers * 2 * 2 * d * d);
    assert_eq!(tied.layers.len(), cfg.layers);
}
