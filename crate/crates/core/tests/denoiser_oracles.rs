use rand::Rng;
use ttg_core::denoiser::{attend, gcn_forward, CrossAttention, Denoiser, GcnMode, Model, ModelConfig};
use ttg_core::diffusion::make_linear_schedule;
use ttg_core::road::{build_normalized_adjacency, AdjacencyMatrix, NormalizedAdjacency};
use ttg_core::text::{tokenize, Vocabulary};
use ttg_tensor::rng::stream;
use ttg_tensor::{ParamStore, Tape, Tensor};

fn random_adjacency<R: Rng>(n: usize, p: f64, rng: &mut R) -> AdjacencyMatrix {
    let mut e = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen_bool(p) {
                e[i * n + j] = 1.0;
                e[j * n + i] = 1.0;
            }
        }
    }
    AdjacencyMatrix::from_dense(n, e).unwrap()
}

fn dense_a_hat(adj: &AdjacencyMatrix, n_pad: usize) -> Vec<f64> {
    let n = adj.n();
    let mut a = vec![0.0; n_pad * n_pad];
    for i in 0..n_pad {
        for j in 0..n_pad {
            let edge = if i < n && j < n { adj.get(i, j) } else { 0.0 };
            a[i * n_pad + j] = edge + if i == j { 1.0 } else { 0.0 };
        }
    }
    let d: Vec<f64> = (0..n_pad).map(|i| (0..n_pad).map(|j| a[i * n_pad + j]).sum()).collect();
    for i in 0..n_pad {
        for j in 0..n_pad {
            a[i * n_pad + j] /= (d[i] * d[j]).sqrt();
        }
    }
    a
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

fn dense_gcn(a: &[f64], x: &[f64], w0: &[f64], w1: &[f64], n: usize, h: usize) -> Vec<f64> {
    let xw = naive_matmul(x, w0, n, 3, h);
    let hidden: Vec<f64> = naive_matmul(a, &xw, n, n, h).into_iter().map(|v| v.max(0.0)).collect();
    let hw = naive_matmul(&hidden, w1, n, h, 3);
    naive_matmul(a, &hw, n, n, 3)
        .into_iter()
        .map(|v| 1.0 / (1.0 + (-v).exp()))
        .collect()
}

#[test]
fn two_layer_gcn_matches_dense_evaluation() {
    let mut rng = stream(11, 0);
    for case in 0..200 {
        let n = rng.gen_range(1..=32);
        let adj = random_adjacency(n, rng.gen_range(0.05..0.5), &mut rng);
        let n_pad = n + rng.gen_range(0..4);
        let a_hat = build_normalized_adjacency(&adj, n_pad).unwrap();
        let oracle_a = dense_a_hat(&adj, n_pad);
        let x = Tensor::randn([n_pad, 3], 1.0, &mut rng);
        let w0 = Tensor::randn([3, 16], 0.5, &mut rng);
        let w1 = Tensor::randn([16, 3], 0.5, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let av = tape.constant(Tensor::new([n_pad, n_pad], a_hat.entries().to_vec()).unwrap());
        let ws = [tape.constant(w0.clone()), tape.constant(w1.clone())];
        let out = gcn_forward(&mut tape, xv, av, &ws).unwrap();
        let want = dense_gcn(&oracle_a, x.data(), w0.data(), w1.data(), n_pad, 16);
        for (g, w) in tape.value(out).data().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12, "case {case}: {g} vs {w}");
        }
    }
}

#[test]
fn gcn_depths_and_codomain() {
    let mut rng = stream(12, 0);
    let adj = random_adjacency(20, 0.2, &mut rng);
    let a_hat = build_normalized_adjacency(&adj, 25).unwrap();
    let x = Tensor::randn([25, 3], 3.0, &mut rng);
    for layers in 0..=3 {
        let mut store = ParamStore::new();
        let gcn = ttg_core::denoiser::Gcn::new(&mut store, layers, 16, &mut rng).unwrap();
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(x.clone());
        let av = tape.constant(Tensor::new([25, 25], a_hat.entries().to_vec()).unwrap());
        let out = gcn.forward(&mut tape, xv, av).unwrap();
        let y = tape.value(out);
        assert_eq!(y.shape(), &[25, 3]);
        if layers == 0 {
            assert_eq!(y, &x);
        } else {
            assert!(y.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }
}

#[test]
fn two_node_gcn_by_hand() {
    let adj = AdjacencyMatrix::from_dense(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let a_hat = build_normalized_adjacency(&adj, 2).unwrap();
    let x = [0.3, -0.2, 0.5, 0.1, 0.4, -0.6];
    let w0: Vec<f64> = (0..48).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.01).collect();
    let w1: Vec<f64> = (0..48).map(|i| ((i * 5 % 13) as f64 - 6.0) * 0.01).collect();
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::new([2, 3], x.to_vec()).unwrap());
    let av = tape.constant(Tensor::new([2, 2], a_hat.entries().to_vec()).unwrap());
    let ws = [
        tape.constant(Tensor::new([3, 16], w0.clone()).unwrap()),
        tape.constant(Tensor::new([16, 3], w1.clone()).unwrap()),
    ];
    let out = gcn_forward(&mut tape, xv, av, &ws).unwrap();
    // both rows of A-hat are [0.5, 0.5], so every node sees the mean row
    let mean = [0.2, 0.1, -0.05];
    let mut hidden = [0.0; 16];
    for (j, h) in hidden.iter_mut().enumerate() {
        *h = (0..3).map(|i| mean[i] * w0[i * 16 + j]).sum::<f64>().max(0.0);
    }
    for c in 0..3 {
        let z: f64 = (0..16).map(|j| hidden[j] * w1[j * 3 + c]).sum();
        let want = 1.0 / (1.0 + (-z).exp());
        for node in 0..2 {
            assert!((tape.value(out).data()[node * 3 + c] - want).abs() < 1e-12);
        }
    }
}

fn softmax_rows(s: &[f64], rows: usize, cols: usize, mask: &[bool]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &s[r * cols..(r + 1) * cols];
        let m = (0..cols).filter(|c| mask[*c]).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..cols).filter(|c| mask[*c]).map(|c| (row[c] - m).exp()).sum();
        for c in 0..cols {
            out[r * cols + c] = if mask[c] { (row[c] - m).exp() / z } else { 0.0 };
        }
    }
    out
}

#[test]
fn attention_matches_direct_formula() {
    let mut rng = stream(13, 0);
    for _ in 0..50 {
        let (lq, lk, d) = (4, 8, rng.gen_range(2..6));
        let q = Tensor::randn([lq, d], 1.0, &mut rng);
        let k = Tensor::randn([lk, d], 1.0, &mut rng);
        let v = Tensor::randn([lk, d], 1.0, &mut rng);
        let mut mask: Vec<bool> = (0..lk).map(|_| rng.gen_bool(0.7)).collect();
        mask[0] = true;
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let out = attend(&mut tape, qv, kv, vv, &mask).unwrap();
        let kt: Vec<f64> = (0..d * lk).map(|i| k.data()[(i % lk) * d + i / lk]).collect();
        let scores: Vec<f64> = naive_matmul(q.data(), &kt, lq, d, lk)
            .into_iter()
            .map(|s| s / (d as f64).sqrt())
            .collect();
        let a = softmax_rows(&scores, lq, lk, &mask);
        for r in 0..lq {
            let sum: f64 = a[r * lk..(r + 1) * lk].iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
        let want = naive_matmul(&a, v.data(), lq, lk, d);
        for (g, w) in tape.value(out).data().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12);
        }
    }
}

fn attention_weights(q: &Tensor, k: &Tensor, mask: &[bool]) -> Tensor {
    // V = identity exposes the weight matrix itself
    let lk = k.shape()[0];
    let mut eye = vec![0.0; lk * lk];
    for i in 0..lk {
        eye[i * lk + i] = 1.0;
    }
    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let vv = tape.constant(Tensor::new([lk, lk], eye).unwrap());
    let out = attend(&mut tape, qv, kv, vv, mask).unwrap();
    tape.value(out).clone()
}

#[test]
fn attention_edge_cases() {
    let mut rng = stream(14, 0);
    let q = Tensor::randn([3, 4], 1.0, &mut rng);
    let row = Tensor::randn([1, 4], 1.0, &mut rng);
    let k = Tensor::new([5, 4], row.data().repeat(5)).unwrap();
    let a = attention_weights(&q, &k, &[true; 5]);
    assert!(a.data().iter().all(|w| (w - 0.2).abs() < 1e-12));

    let k = Tensor::randn([5, 4], 1.0, &mut rng);
    let a = attention_weights(&q, &k, &[false, false, true, false, false]);
    for r in 0..3 {
        for c in 0..5 {
            assert_eq!(a.get2(r, c), if c == 2 { 1.0 } else { 0.0 });
        }
    }

    let a = attention_weights(&q, &k, &[false; 5]);
    for r in 0..3 {
        assert_eq!(a.get2(r, 0), 1.0);
        assert!((1..5).all(|c| a.get2(r, c) == 0.0));
    }
}

#[test]
fn cross_attention_is_residual_and_finite() {
    let mut rng = stream(15, 0);
    let mut store = ParamStore::new();
    let attn = CrossAttention::new(&mut store, "a", 4, 2, 6, &mut rng).unwrap();
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(Tensor::randn([4, 2, 2], 1.0, &mut rng));
    let ctx = tape.constant(Tensor::randn([5, 6], 1.0, &mut rng));
    let y = attn.forward(&mut tape, x, ctx, &[true, true, false, false, false]).unwrap();
    assert_eq!(tape.shape(y), &[4, 2, 2]);
    assert!(tape.value(y).is_finite());
}

fn toy_adjacency(cfg: &ModelConfig) -> NormalizedAdjacency {
    let n_real = cfg.n_padded() - 3;
    let mut rng = stream(16, 0);
    let mut adj = random_adjacency(n_real, 0.3, &mut rng);
    while (0..n_real).any(|i| adj.degree(i) == 0.0) {
        adj = random_adjacency(n_real, 0.3, &mut rng);
    }
    build_normalized_adjacency(&adj, cfg.n_padded()).unwrap()
}

fn randomize(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = stream(seed, 1);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(shape, std, &mut rng);
    }
}

fn toy_model(cfg: ModelConfig, seed: u64) -> Model {
    let s = make_linear_schedule(20, 0.00085, 0.012).unwrap();
    let mut m = Model::new(cfg, &toy_adjacency(&cfg), s, Vocabulary::closed(), &mut stream(seed, 0)).unwrap();
    randomize(&mut m.store, 0.4, seed);
    m
}

#[test]
fn padded_cells_do_not_leak_into_real_roads() {
    let cfg = ModelConfig::toy();
    let m = toy_model(cfg, 1);
    let n = cfg.n_padded();
    let side = cfg.grid_side;
    let features = |x: &[f64]| -> Vec<f64> {
        let mut tape = Tape::with_params(&m.store);
        let xv = tape.constant(Tensor::new([3, side, side], x.to_vec()).unwrap());
        let av = tape.constant(m.a_hat.clone());
        let f = m.net.graph_features(&mut tape, xv, av).unwrap();
        tape.value(f).data().to_vec()
    };
    let x: Vec<f64> = (0..3 * n).map(|i| ((i * 37 % 17) as f64 / 17.0) - 0.5).collect();
    let mut bumped = x.clone();
    let pad_cell = n - 1;
    bumped[pad_cell] += 10.0;
    let (a, b) = (features(&x), features(&bumped));
    for c in 0..3 {
        for cell in 0..n - 3 {
            assert_eq!(a[c * n + cell], b[c * n + cell]);
        }
    }
    assert_ne!(a[pad_cell], b[pad_cell]);
}

#[test]
fn identity_gcn_feeds_the_unet_directly() {
    let cfg = ModelConfig {
        gcn_layers: 0,
        ..ModelConfig::toy()
    };
    let m = toy_model(cfg, 2);
    let tokens = tokenize("Monday, 08:00.", &m.vocab, cfg.encoder.l_max).unwrap();
    let side = cfg.grid_side;
    let x = Tensor::randn([3, side, side], 1.0, &mut stream(3, 0));
    let mut tape = Tape::with_params(&m.store);
    let xv = tape.constant(x.clone());
    let av = tape.constant(m.a_hat.clone());
    let full = m.net.forward(&mut tape, xv, 7, &tokens, av).unwrap();
    let ctx = m.net.encoder.forward(&mut tape, &tokens).unwrap();
    let direct = m.net.unet.forward(&mut tape, xv, 7, ctx, &tokens.mask).unwrap();
    assert_eq!(tape.value(full), tape.value(direct));
}

#[test]
fn replace_and_concat_differ() {
    let replace = toy_model(ModelConfig::toy(), 4);
    let concat = toy_model(
        ModelConfig {
            gcn_mode: GcnMode::Concat,
            ..ModelConfig::toy()
        },
        4,
    );
    let ctx_r = replace.encode(&replace.tokenize("Friday, 18:20.").unwrap()).unwrap();
    let ctx_c = concat.encode(&concat.tokenize("Friday, 18:20.").unwrap()).unwrap();
    let x: Vec<f64> = (0..48).map(|i| (i as f64 * 0.21).cos()).collect();
    assert_ne!(replace.predict(&x, 5, &ctx_r).unwrap(), concat.predict(&x, 5, &ctx_c).unwrap());
}

#[test]
fn prediction_is_finite_and_deterministic_for_every_step() {
    let m = toy_model(ModelConfig::toy(), 5);
    let ctx = m.encode(&m.tokenize("Sunday, 03:00.").unwrap()).unwrap();
    let x: Vec<f64> = Tensor::randn([48], 1.0, &mut stream(6, 0)).into_data();
    for t in 1..=m.schedule.steps() {
        let a = m.predict(&x, t, &ctx).unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, m.predict(&x, t, &ctx).unwrap());
    }
    let mut bad = x.clone();
    bad[3] = f64::NAN;
    assert!(m.predict(&bad, 1, &ctx).is_err());
}

#[test]
fn prompt_changes_prediction() {
    let m = toy_model(ModelConfig::toy(), 7);
    let x: Vec<f64> = Tensor::randn([48], 1.0, &mut stream(8, 0)).into_data();
    let a = m.encode(&m.tokenize("Monday, 08:00.").unwrap()).unwrap();
    let b = m.encode(&m.tokenize("Monday, 08:00. A serious road closure on Ring 2.").unwrap()).unwrap();
    assert_ne!(m.predict(&x, 4, &a).unwrap(), m.predict(&x, 4, &b).unwrap());
}

/// Central differences on a few coordinates of every parameter tensor.
fn gradcheck_denoiser(cfg: ModelConfig) {
    let m = toy_model(cfg, 9);
    let side = cfg.grid_side;
    let tokens = tokenize("Friday, 18:20. A general traffic accident on Ring 2 East.", &m.vocab, cfg.encoder.l_max).unwrap();
    let mut rng = stream(10, 0);
    let x = Tensor::randn([3, side, side], 1.0, &mut rng);
    let eps = Tensor::randn([3, side, side], 1.0, &mut rng);
    let t = 6;
    let loss_of = |store: &ParamStore| -> (f64, ttg_tensor::Gradients) {
        let mut tape = Tape::with_params(store);
        let xv = tape.constant(x.clone());
        let av = tape.constant(m.a_hat.clone());
        let out = m.net.forward(&mut tape, xv, t, &tokens, av).unwrap();
        let target = tape.constant(eps.clone());
        let loss = tape.mse(out, target).unwrap();
        let g = tape.backward(loss).unwrap();
        (tape.value(loss).data()[0], g)
    };
    let (_, grads) = loss_of(&m.store);
    let grads = grads.param_grads(&m.store);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut store = m.store.clone();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let numel = store.get(id).numel();
        let picks: Vec<usize> = (0..numel.min(3)).map(|_| rng.gen_range(0..numel)).collect();
        for i in picks {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let (up, _) = loss_of(&store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let (down, _) = loss_of(&store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id)[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(
                rel <= 1e-4,
                "{}[{i}]: analytic {analytic} numeric {numeric}",
                store.name(id)
            );
            worst = worst.max(rel);
        }
    }
    assert!(worst.is_finite());
}

#[test]
fn full_denoiser_gradients_replace() {
    gradcheck_denoiser(ModelConfig::toy());
}

#[test]
fn full_denoiser_gradients_concat_three_layers() {
    gradcheck_denoiser(ModelConfig {
        gcn_mode: GcnMode::Concat,
        gcn_layers: 3,
        ..ModelConfig::toy()
    });
}

#[test]
fn zero_output_head_predicts_zero_for_any_input() {
    let cfg = ModelConfig::toy();
    let mut store = ParamStore::new();
    let net = Denoiser::new(&mut store, cfg, &mut stream(17, 0)).unwrap();
    let s = make_linear_schedule(20, 0.00085, 0.012).unwrap();
    let m = Model::from_parts(net, store, &toy_adjacency(&cfg), s, Vocabulary::closed()).unwrap();
    let ctx = m.encode(&m.tokenize("Tuesday, 01:00.").unwrap()).unwrap();
    let x: Vec<f64> = Tensor::randn([48], 2.0, &mut stream(18, 0)).into_data();
    assert!(m.predict(&x, 20, &ctx).unwrap().iter().all(|v| *v == 0.0));
    let g = m.sample_grid(&ctx, 1).unwrap();
    assert!(g.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
}
