use modrwkv::backbone::{
    self, decay_step, forward_lm_values, init_weights, linear_rnn_step, BackboneConfig, Session, WkvState,
};
use modrwkv::kernels;
use modrwkv::{ParamStore, RngStream, Tensor};

fn rand_vec(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal(0.0, 1.0)).collect()
}

fn unit(rng: &mut RngStream, n: usize) -> Vec<f64> {
    let v = rand_vec(rng, n);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

fn small() -> (BackboneConfig, ParamStore) {
    let cfg = BackboneConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        vocab_size: 20,
        ffn_ratio: 4,
    };
    let mut store = ParamStore::new();
    init_weights(&cfg, &RngStream::new(21), &mut store).unwrap();
    (cfg, store)
}

#[test]
fn four_by_four_step_matches_dense_transition() {
    let mut rng = RngStream::new(1);
    for _ in 0..50 {
        let s = rand_vec(&mut rng, 16);
        let r = rand_vec(&mut rng, 4);
        let k = unit(&mut rng, 4);
        let v = rand_vec(&mut rng, 4);
        let w = rand_vec(&mut rng, 4);
        let a = rng.uniform();
        let g = Tensor::new(
            &[4, 4],
            (0..16)
                .map(|ij| {
                    let (i, j) = (ij / 4, ij % 4);
                    (f64::from(u8::from(i == j)) - a * k[i] * k[j]) * (-(w[j].exp())).exp()
                })
                .collect(),
        )
        .unwrap();
        let st = Tensor::matrix(4, 4, s).unwrap();
        let want = g
            .matmul(&st)
            .unwrap()
            .add(&Tensor::outer(&Tensor::vector(k.clone()), &Tensor::vector(v.clone())).unwrap().scale(a))
            .unwrap();
        let (got, o) = backbone::wkv7_step(
            &st,
            &Tensor::vector(r.clone()),
            &Tensor::vector(k),
            &Tensor::vector(v),
            a,
            &Tensor::vector(w),
        )
        .unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
        let want_o = want.transpose().unwrap().matmul(&Tensor::matrix(4, 1, r).unwrap()).unwrap();
        assert!(o.max_abs_diff(&want_o.reshape(&[4]).unwrap()) < 1e-12);
    }
}

#[test]
fn zero_rate_matches_decay_step() {
    let mut rng = RngStream::new(2);
    let s = Tensor::matrix(3, 2, rand_vec(&mut rng, 6)).unwrap();
    let w = rand_vec(&mut rng, 3);
    let k = Tensor::vector(unit(&mut rng, 3));
    let (got, _) = backbone::wkv7_step(&s, &k, &k, &Tensor::zeros(&[2]), 0.0, &Tensor::vector(w.clone())).unwrap();
    // decay_step takes exp(−x) with x ≥ 0, so pass x = exp(w).
    let x = Tensor::vector(w.iter().map(|v| v.exp()).collect());
    let want = decay_step(&s, &Tensor::zeros(&[3]), &Tensor::zeros(&[2]), &x).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-15);
}

#[test]
fn decay_step_matches_loop_oracle() {
    let mut rng = RngStream::new(3);
    let s = rand_vec(&mut rng, 12);
    let k = rand_vec(&mut rng, 3);
    let v = rand_vec(&mut rng, 4);
    let w: Vec<f64> = rand_vec(&mut rng, 3).iter().map(|x| x.abs()).collect();
    let got = decay_step(
        &Tensor::matrix(3, 4, s.clone()).unwrap(),
        &Tensor::vector(k.clone()),
        &Tensor::vector(v.clone()),
        &Tensor::vector(w.clone()),
    )
    .unwrap();
    for i in 0..3 {
        for j in 0..4 {
            let want = (-w[i]).exp() * s[i * 4 + j] + k[i] * v[j];
            assert_eq!(got.at2(i, j), want);
        }
    }
}

#[test]
fn linear_rnn_matches_matvec() {
    let mut rng = RngStream::new(4);
    let h = rand_vec(&mut rng, 3);
    let x = rand_vec(&mut rng, 2);
    let w = rand_vec(&mut rng, 9);
    let u = rand_vec(&mut rng, 6);
    let got = linear_rnn_step(
        &Tensor::vector(h.clone()),
        &Tensor::vector(x.clone()),
        &Tensor::matrix(3, 3, w.clone()).unwrap(),
        &Tensor::matrix(3, 2, u.clone()).unwrap(),
    )
    .unwrap();
    for i in 0..3 {
        let want: f64 = (0..3).map(|j| w[i * 3 + j] * h[j]).sum::<f64>() + (0..2).map(|j| u[i * 2 + j] * x[j]).sum::<f64>();
        assert!((got.data()[i] - want).abs() < 1e-14);
    }
}

#[test]
fn state_norm_stays_under_contraction_bound() {
    // With ‖v‖∞ ≤ 1 and decay ≤ d_max the state obeys
    // ‖S‖_F ≤ v_max·√d_v / (1 − d_max).
    let mut rng = RngStream::new(5);
    let (dk, dv) = (4, 4);
    let w_max: f64 = 0.5;
    let d_max = kernels::neg_exp_exp(w_max);
    let bound = dv as f64 / (dv as f64).sqrt() / (1.0 - d_max);
    let mut s = Tensor::zeros(&[dk, dv]);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let k = Tensor::vector(unit(&mut rng, dk));
        let v = Tensor::vector((0..dv).map(|_| rng.uniform_range(-1.0, 1.0)).collect());
        let w = Tensor::vector((0..dk).map(|_| rng.uniform_range(w_max, 3.0)).collect());
        let (next, _) = backbone::wkv7_step(&s, &k, &k, &v, rng.uniform(), &w).unwrap();
        s = next;
        worst = worst.max(s.frobenius_norm());
    }
    assert!(worst <= bound, "{worst} > {bound}");
}

#[test]
fn split_scan_equals_whole_scan() {
    let (cfg, store) = small();
    let mut rng = RngStream::new(6);
    let x = Tensor::new(&[16, 8], rand_vec(&mut rng, 128)).unwrap();
    let zero = vec![0.0; cfg.n_heads * cfg.d_head() * cfg.d_head()];
    let (whole, s16) = backbone::wkv7_scan(&store, &cfg, 0, &zero, &x).unwrap();
    let (a, s8) = backbone::wkv7_scan(&store, &cfg, 0, &zero, &x.slice_rows(0, 8).unwrap()).unwrap();
    let (b, s16b) = backbone::wkv7_scan(&store, &cfg, 0, &s8, &x.slice_rows(8, 16).unwrap()).unwrap();
    assert!(Tensor::concat_rows(&[&a, &b]).unwrap().max_abs_diff(&whole) <= 1e-12);
    for (p, q) in s16.iter().zip(&s16b) {
        assert!((p - q).abs() <= 1e-12);
    }
}

#[test]
fn single_step_scan_is_one_kernel_step_then_projection() {
    let (cfg, store) = small();
    let mut rng = RngStream::new(7);
    let x = Tensor::new(&[1, 8], rand_vec(&mut rng, 8)).unwrap();
    let zero = vec![0.0; cfg.n_heads * 16];
    let (out, _) = backbone::wkv7_scan(&store, &cfg, 0, &zero, &x).unwrap();
    let m = backbone::project_mixing_inputs(&store, &cfg, 0, &x).unwrap();
    let dh = cfg.d_head();
    let mut heads = Vec::new();
    for h in 0..cfg.n_heads {
        let part = |t: &Tensor| Tensor::vector(t.data()[h * dh..(h + 1) * dh].to_vec());
        let (_, o) = backbone::wkv7_step(&Tensor::zeros(&[dh, dh]), &part(&m.r), &part(&m.k), &part(&m.v), m.a.data()[h], &part(&m.w))
            .unwrap();
        heads.extend_from_slice(o.data());
    }
    let wo = store.value("backbone.layer0.w_o").unwrap();
    let want = Tensor::matrix(1, 8, heads).unwrap().matmul(wo).unwrap();
    assert!(out.max_abs_diff(&want) < 1e-12);
}

#[test]
fn session_matches_whole_forward() {
    let (cfg, store) = small();
    let ids = [1usize, 5, 9, 2, 2, 13, 7];
    let emb = store.value("backbone.emb").unwrap();
    let rows: Vec<Vec<f64>> = ids.iter().map(|&i| emb.row(i).to_vec()).collect();
    let x = Tensor::from_rows(&rows).unwrap();
    let (logits, state) = forward_lm_values(&store, &cfg, &x, None).unwrap();
    let mut s = Session::<f64>::new(&store, &cfg).unwrap();
    for (t, &id) in ids.iter().enumerate() {
        let got = s.step_token(id).unwrap();
        for (a, b) in got.iter().zip(logits.row(t)) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
    for (a, b) in s.state().data.iter().zip(&state.data) {
        assert!((a - b).abs() <= 1e-10);
    }
}

#[test]
fn state_size_is_a_function_of_config() {
    let (cfg, store) = small();
    let mut sizes = Vec::new();
    for len in [1usize, 7, 40] {
        let x = Tensor::full(&[len, 8], 0.3);
        let (_, st) = forward_lm_values(&store, &cfg, &x, None).unwrap();
        sizes.push(st.bytes());
    }
    assert!(sizes.iter().all(|&b| b == WkvState::<f64>::new(&cfg).bytes()));
}

#[test]
fn empty_trunk_is_head_of_norm() {
    let cfg = BackboneConfig {
        n_layers: 0,
        d_model: 4,
        n_heads: 1,
        vocab_size: 6,
        ffn_ratio: 1,
    };
    let mut store = ParamStore::new();
    init_weights(&cfg, &RngStream::new(8), &mut store).unwrap();
    let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5, 3.0]]).unwrap();
    let (logits, _) = forward_lm_values(&store, &cfg, &x, None).unwrap();
    let mean = x.data().iter().sum::<f64>() / 4.0;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    let norm: Vec<f64> = x.data().iter().map(|v| (v - mean) / (var + backbone::LN_EPS).sqrt()).collect();
    let want = Tensor::matrix(1, 4, norm).unwrap().matmul(store.value("backbone.head").unwrap()).unwrap();
    assert!(logits.max_abs_diff(&want) < 1e-12);
}
