use modrwkv::modality::{
    adapt_values, conv1d_compress, conv1d_forward, fuse, init_adapter, init_compressor, output_length, parse_features,
    encode_features, AdapterConfig, CompressorConfig, FeatureSequence, Layout, Modality,
};
use modrwkv::{ParamStore, RngStream, Tensor};

fn random(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
}

#[test]
fn output_length_counts_valid_windows() {
    for l in 1..30 {
        for k in 1..6 {
            for s in 1..5 {
                for p in 0..3 {
                    let windows = (0..)
                        .map(|t| s * t)
                        .take_while(|&start| start + k <= l + 2 * p)
                        .count();
                    match output_length(l, k, s, p) {
                        Ok(n) => assert_eq!(n, windows, "l={l} k={k} s={s} p={p}"),
                        Err(_) => assert_eq!(windows, 0),
                    }
                }
            }
        }
    }
}

#[test]
fn conv_matches_quadruple_loop() {
    let mut rng = RngStream::new(10);
    for _ in 0..40 {
        let l = 1 + rng.below(20);
        let (cin, cout) = (1 + rng.below(4), 1 + rng.below(4));
        let (k, s, p) = (1 + rng.below(5), 1 + rng.below(4), rng.below(3));
        if l + 2 * p < k {
            continue;
        }
        let x = random(&mut rng, &[l, cin]);
        let w = random(&mut rng, &[cout, cin, k]);
        let b = random(&mut rng, &[cout]);
        let y = conv1d_forward(&x, &w, &b, s, p).unwrap();
        let lo = output_length(l, k, s, p).unwrap();
        assert_eq!(y.shape(), [lo, cout]);
        for t in 0..lo {
            for c in 0..cout {
                let mut acc = b.data()[c];
                for i in 0..cin {
                    for j in 0..k {
                        let pos = (s * t + j) as isize - p as isize;
                        if pos >= 0 && (pos as usize) < l {
                            acc += w.data()[(c * cin + i) * k + j] * x.at2(pos as usize, i);
                        }
                    }
                }
                assert!((y.at2(t, c) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn fresh_same_width_compressor_is_near_moving_average() {
    let mut store = ParamStore::new();
    let cfg = CompressorConfig::new(3, 3, 0);
    init_compressor(&cfg, 2, &RngStream::new(11), &mut store).unwrap();
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 3.0], vec![3.0, 6.0]]).unwrap();
    let seq = FeatureSequence::new(x, Modality::Image, "").unwrap();
    let y = conv1d_compress(&seq, &cfg, &store).unwrap();
    assert_eq!(y.len(), 1);
    assert!((y.features.at2(0, 0) - 2.0).abs() < 0.2);
    assert!((y.features.at2(0, 1) - 3.0).abs() < 0.3);
}

#[test]
fn passthrough_is_identity() {
    let mut rng = RngStream::new(12);
    let seq = FeatureSequence::new(random(&mut rng, &[7, 3]), Modality::Audio, "a").unwrap();
    let y = conv1d_compress(&seq, &CompressorConfig::passthrough(), &ParamStore::new()).unwrap();
    assert_eq!(y, seq);
}

#[test]
fn adapter_acts_on_each_row_alone() {
    let cfg = AdapterConfig::new(5, 2, 6);
    let mut store = ParamStore::new();
    init_adapter(&cfg, &RngStream::new(13), &mut store).unwrap();
    assert_eq!(store.count("adapter"), cfg.param_count());
    let mut rng = RngStream::new(14);
    let x = random(&mut rng, &[4, 5]);
    let y = adapt_values(&FeatureSequence::new(x.clone(), Modality::Image, "").unwrap(), &store).unwrap();
    let order = [2usize, 0, 3, 1];
    let rows: Vec<Vec<f64>> = order.iter().map(|&i| x.row(i).to_vec()).collect();
    let xp = Tensor::from_rows(&rows).unwrap();
    let yp = adapt_values(&FeatureSequence::new(xp, Modality::Image, "").unwrap(), &store).unwrap();
    for (dst, &src) in order.iter().enumerate() {
        for (a, b) in yp.row(dst).iter().zip(y.row(src)) {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn fuse_only_flags_answer_text() {
    let m = Tensor::zeros(&[3, 2]);
    let t = Tensor::ones(&[2, 2]);
    let (x, mask) = fuse(&m, &t, &[false, true], Layout::ModalityFirst).unwrap();
    assert_eq!(x.shape(), [5, 2]);
    assert_eq!(mask, [false, false, false, false, true]);
    let (x, mask) = fuse(&m, &t, &[true, false], Layout::TextFirst).unwrap();
    assert_eq!(x.row(0), [1.0, 1.0]);
    assert_eq!(mask, [true, false, false, false, false]);
    assert!(fuse(&m, &Tensor::ones(&[2, 3]), &[true, true], Layout::ModalityFirst).is_err());
}

#[test]
fn feature_files_roundtrip_at_f32() {
    let mut rng = RngStream::new(15);
    let seq = FeatureSequence::new(random(&mut rng, &[9, 4]), Modality::Timeseries, "meta").unwrap();
    let bytes = encode_features(&seq);
    let back = parse_features(&bytes, "meta").unwrap();
    for (a, b) in back.features.data().iter().zip(seq.features.data()) {
        assert_eq!(*a, f64::from(*b as f32));
    }
    assert_eq!(encode_features(&back), bytes);
    assert!(parse_features(&bytes[..bytes.len() - 3], "meta").is_err());
}
