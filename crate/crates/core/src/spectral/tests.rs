use super::*;
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn field1d(n: usize, f: impl Fn(f64) -> f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[1, 1, n]), |ix| f(ix[2] as f64 / n as f64))
}

fn max_abs_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_field(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn rfft_of_constant_and_cosine() {
    let v = field1d(8, |_| 2.5);
    let s = rfft_nd(&v).unwrap();
    assert_eq!(s.shape(), &[1, 1, 5]);
    assert!((s[[0, 0, 0]] - Complex64::new(2.5, 0.0)).norm() < 1e-15);
    assert!(s.iter().skip(1).all(|c| c.norm() < 1e-15));

    let s = rfft_nd(&field1d(8, |x| (2.0 * PI * x).cos())).unwrap();
    for (k, c) in s.iter().enumerate() {
        let want = if k == 1 { 0.5 } else { 0.0 };
        assert!((c - Complex64::new(want, 0.0)).norm() < 1e-15, "mode {k}: {c}");
    }
}

#[test]
fn roundtrip_various_shapes() {
    for shape in [vec![2, 3, 8], vec![1, 2, 7], vec![2, 2, 6, 5], vec![1, 1, 4, 3, 6]] {
        let v = random_field(&shape, 1);
        let back = irfft_nd(&rfft_nd(&v).unwrap(), &shape[2..]).unwrap();
        assert!(max_abs_diff(&v, &back) < 1e-12, "{shape:?}");
    }
    let s = rfft_nd(&random_field(&[1, 1, 8], 2)).unwrap();
    assert!(irfft_nd(&s, &[10]).is_err());
}

#[test]
fn irfft_dc_and_single_mode() {
    for n in [4, 9, 32] {
        let mut s = Spectrum::zeros(IxDyn(&[1, 1, n / 2 + 1]));
        s[[0, 0, 0]] = Complex64::new(-1.5, 0.0);
        let v = irfft_nd(&s, &[n]).unwrap();
        assert!(v.iter().all(|x| (x + 1.5).abs() < 1e-14));
    }
    let mut s = Spectrum::zeros(IxDyn(&[1, 1, 9]));
    s[[0, 0, 1]] = Complex64::new(0.5, 0.0);
    let v = irfft_nd(&s, &[16]).unwrap();
    let want = field1d(16, |x| (2.0 * PI * x).cos());
    assert!(max_abs_diff(&v, &want) < 1e-14);
}

#[test]
fn truncation_selects_and_is_linear() {
    let spec = TruncationSpec::new(vec![2], 1).unwrap();
    let s = rfft_nd(&field1d(8, |x| (2.0 * PI * x).cos())).unwrap();
    let t = truncate(&spec, &s).unwrap();
    assert_eq!(t.shape(), &[1, 1, 2]);
    assert_eq!(t[[0, 0, 1]], s[[0, 0, 1]]);

    let full = TruncationSpec::new(vec![4, 5], 1).unwrap();
    let v = rfft_nd(&random_field(&[2, 3, 8, 8], 4)).unwrap();
    let back = embed_back(&full, &truncate(&full, &v).unwrap(), &[8, 5]).unwrap();
    assert_eq!(back, v);

    let spec = TruncationSpec::new(vec![2, 3], 1).unwrap();
    let u = rfft_nd(&random_field(&[1, 2, 8, 8], 5)).unwrap();
    let combo = u.mapv(|c| c * 2.0) + v.slice(ndarray::s![..1, ..2, .., ..]).mapv(|c| c * -0.5).into_dyn();
    let lhs = truncate(&spec, &combo).unwrap();
    let rhs = truncate(&spec, &u).unwrap().mapv(|c| c * 2.0)
        + truncate(&spec, &v.slice(ndarray::s![..1, ..2, .., ..]).to_owned().into_dyn()).unwrap().mapv(|c| c * -0.5);
    assert!(lhs.iter().zip(&rhs).all(|(a, b)| (a - b).norm() < 1e-14));
    assert!(truncate(&TruncationSpec::new(vec![5, 3], 1).unwrap(), &u).is_err());
}

#[test]
fn embed_back_projection_and_upsampling() {
    let spec = TruncationSpec::new(vec![3], 1).unwrap();
    let v = rfft_nd(&random_field(&[1, 1, 16], 6)).unwrap();
    let once = embed_back(&spec, &truncate(&spec, &v).unwrap(), &[9]).unwrap();
    let twice = embed_back(&spec, &truncate(&spec, &once).unwrap(), &[9]).unwrap();
    assert_eq!(once, twice);

    let zero = Spectrum::zeros(IxDyn(&[1, 1, 3]));
    assert!(embed_back(&spec, &zero, &[9]).unwrap().iter().all(|c| c.norm() == 0.0));
    assert!(embed_back(&spec, &zero, &[2]).is_err());

    // Band-limited field sampled at 16, upsampled to 32 through the spectrum.
    let f = |x: f64| 0.3 + (2.0 * PI * x).sin() - 0.4 * (4.0 * PI * x + 0.2).cos();
    let t = truncate(&spec, &rfft_nd(&field1d(16, f)).unwrap()).unwrap();
    let up = irfft_nd(&embed_back(&spec, &t, &[17]).unwrap(), &[32]).unwrap();
    assert!(max_abs_diff(&up, &field1d(32, f)) < 1e-12);
}

#[test]
fn koopman_identity_and_swap() {
    let spec = TruncationSpec::new(vec![3], 3).unwrap();
    let id = KoopmanLayerParams::identity(2, 3, Activation::Identity);
    let t = rfft_nd(&random_field(&[2, 2, 8], 7)).unwrap();
    let t = truncate(&spec, &t).unwrap();
    assert_eq!(apply_koopman(&id, &spec, &t).unwrap(), t);

    let spec = TruncationSpec::new(vec![1], 2).unwrap();
    let mut swap = KoopmanLayerParams::zeros(2, 1, Activation::Identity);
    swap.k_re[[0, 1, 0]] = 1.0;
    swap.k_re[[1, 0, 0]] = 1.0;
    let mut t = Spectrum::zeros(IxDyn(&[1, 2, 1]));
    t[[0, 0, 0]] = Complex64::new(1.0, 2.0);
    t[[0, 1, 0]] = Complex64::new(-3.0, 0.5);
    assert_eq!(apply_koopman(&swap, &spec, &t).unwrap(), t);
}

#[test]
fn koopman_matches_dense_block_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (o, modes, p) in [(2, vec![4], 1), (3, vec![2, 3], 2), (4, vec![5], 3)] {
        let spec = TruncationSpec::new(modes, p).unwrap();
        let m = spec.mode_count();
        let params = KoopmanLayerParams::init(o, m, Activation::Identity, &mut rng);
        let mut shape = vec![2, o];
        shape.extend(spec.truncated_shape());
        let t = Spectrum::from_shape_fn(IxDyn(&shape), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let got = apply_koopman(&params, &spec, &t).unwrap();
        let n = o * m;
        let mut dense = vec![Complex64::default(); n * n];
        for w in 0..m {
            for r in 0..o {
                for c in 0..o {
                    dense[(r * m + w) * n + c * m + w] =
                        Complex64::new(params.k_re[[r, c, w]], params.k_im[[r, c, w]]);
                }
            }
        }
        let flat: Vec<Complex64> = t.iter().cloned().collect();
        for b in 0..2 {
            let mut x = flat[b * n..(b + 1) * n].to_vec();
            for _ in 0..p {
                x = (0..n).map(|r| (0..n).map(|c| dense[r * n + c] * x[c]).sum()).collect();
            }
            for (a, e) in got.iter().skip(b * n).take(n).zip(&x) {
                assert!((a - e).norm() <= 1e-12 * e.norm().max(1.0));
            }
        }
    }
}

#[test]
fn high_frequency_path_hand_example() {
    let mut p = KoopmanLayerParams::zeros(2, 1, Activation::Identity);
    p.w_hf = ndarray::arr2(&[[1.0, 1.0], [0.0, 1.0]]);
    p.b_hf = ndarray::arr1(&[1.0, 0.0]);
    let mut v = ArrayD::zeros(IxDyn(&[1, 2, 2]));
    v[[0, 0, 1]] = 2.0;
    v[[0, 1, 1]] = 3.0;
    let out = high_freq_path(&p, &v).unwrap();
    assert_eq!((out[[0, 0, 1]], out[[0, 1, 1]]), (6.0, 3.0));
    assert_eq!((out[[0, 0, 0]], out[[0, 1, 0]]), (1.0, 0.0));

    let id = KoopmanLayerParams { w_hf: Array2::eye(3), ..KoopmanLayerParams::zeros(3, 1, Activation::Identity) };
    let v = random_field(&[2, 3, 5], 9);
    assert_eq!(high_freq_path(&id, &v).unwrap(), v);
    assert!(high_freq_path(&p, &v).is_err());
}

#[test]
fn layer_reductions() {
    let spec = TruncationSpec::new(vec![3, 3], 2).unwrap();
    let id = KoopmanLayerParams::identity(2, spec.mode_count(), Activation::Identity);
    let v = ArrayD::from_shape_fn(IxDyn(&[1, 2, 8, 8]), |ix| {
        let (x, y) = (ix[2] as f64 / 8.0, ix[3] as f64 / 8.0);
        (ix[1] as f64 + 1.0) * (2.0 * PI * (x - 2.0 * y)).cos() + 0.5 * (2.0 * PI * y).sin()
    });
    let out = spectral_layer(&id, &spec, &v, &[8, 8]).unwrap();
    assert!(max_abs_diff(&out, &v) < 1e-10);

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut p = KoopmanLayerParams::init(2, spec.mode_count(), Activation::Gelu, &mut rng);
    p.b_hf = ndarray::arr1(&[0.3, -0.7]);
    let out = spectral_layer(&p, &spec, &ArrayD::zeros(IxDyn(&[1, 2, 8, 8])), &[8, 8]).unwrap();
    for (ix, &x) in out.indexed_iter() {
        assert!((x - Activation::Gelu.eval(p.b_hf[ix[1]])).abs() < 1e-15);
    }

    p.activation = Activation::Identity;
    let u = random_field(&[2, 2, 8, 8], 11);
    let w = random_field(&[2, 2, 8, 8], 12);
    let lin = |x: &ArrayD<f64>| {
        let mut q = p.clone();
        q.b_hf.fill(0.0);
        spectral_layer(&q, &spec, x, &[8, 8]).unwrap()
    };
    let lhs = lin(&(&u * 1.5 - &w * 0.25));
    let rhs = lin(&u) * 1.5 - lin(&w) * 0.25;
    assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
    assert!(spectral_layer(&p, &spec, &u, &[16, 16]).is_err());
}

#[test]
fn layer_equals_reference_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (spatial, modes) in [(vec![12], vec![4]), (vec![8, 10], vec![3, 4]), (vec![6, 4, 8], vec![2, 2, 3])] {
        let spec = TruncationSpec::new(modes, 2).unwrap();
        let p = KoopmanLayerParams::init(3, spec.mode_count(), Activation::Tanh, &mut rng);
        let mut shape = vec![2, 3];
        shape.extend(&spatial);
        let v = random_field(&shape, 14);
        let t = truncate(&spec, &rfft_nd(&v).unwrap()).unwrap();
        let k = apply_koopman(&p, &spec, &t).unwrap();
        let s = irfft_nd(&embed_back(&spec, &k, &half_shape(&spatial)).unwrap(), &spatial).unwrap();
        let want = (s + high_freq_path(&p, &v).unwrap()).mapv(f64::tanh);
        let got = spectral_layer(&p, &spec, &v, &spatial).unwrap();
        assert!(max_abs_diff(&got, &want) < 1e-13);
    }
}

#[test]
fn layer_shift_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let spec = TruncationSpec::new(vec![3, 2], 2).unwrap();
    let p = KoopmanLayerParams::init(2, spec.mode_count(), Activation::Gelu, &mut rng);
    let v = random_field(&[1, 2, 8, 6], 16);
    let shift = |a: &ArrayD<f64>| {
        ArrayD::from_shape_fn(a.raw_dim(), |ix| a[[ix[0], ix[1], (ix[2] + 3) % 8, (ix[3] + 1) % 6]])
    };
    let a = spectral_layer(&p, &spec, &shift(&v), &[8, 6]).unwrap();
    let b = shift(&spectral_layer(&p, &spec, &v, &[8, 6]).unwrap());
    assert!(max_abs_diff(&a, &b) < 1e-13);
}

#[test]
fn resolution_consistency_of_retained_band() {
    let spec = TruncationSpec::new(vec![4, 3], 1).unwrap();
    let f = |x: f64, y: f64| (2.0 * PI * (x + y)).sin() + 0.3 * (4.0 * PI * x).cos() * (2.0 * PI * y).sin();
    let at = |r: usize| ArrayD::from_shape_fn(IxDyn(&[1, 1, r, r]), |ix| f(ix[2] as f64 / r as f64, ix[3] as f64 / r as f64));
    let a = truncate(&spec, &rfft_nd(&at(16)).unwrap()).unwrap();
    let b = truncate(&spec, &rfft_nd(&at(32)).unwrap()).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).norm() < 1e-12));
}

#[test]
fn backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (spatial, modes, act) in [
        (vec![8], vec![3], Activation::Gelu),
        (vec![6, 7], vec![2, 3], Activation::Tanh),
        (vec![8, 6], vec![4, 4], Activation::Identity),
    ] {
        let spec = TruncationSpec::new(modes, 2).unwrap();
        let mut p = KoopmanLayerParams::init(2, spec.mode_count(), act, &mut rng);
        p.b_hf = ndarray::arr1(&[0.1, -0.2]);
        let pts: usize = spatial.iter().product();
        let tt = TruncatedTransform::new(&spec, &spatial).unwrap();
        let v = Array3::from_shape_fn((2, 2, pts), |_| rng.random_range(-1.0..1.0));
        let wts = Array3::from_shape_fn((2, 2, pts), |_| rng.random_range(-1.0..1.0));
        let loss = |q: &KoopmanLayerParams, x: &Array3<f64>| (q.forward3(&spec, &tt, x.clone(), false).0 * &wts).sum();
        let (_, tape) = p.forward3(&spec, &tt, v.clone(), true);
        let mut g = p.zeros_like();
        let gv = p.backward3(&tt, &tape.unwrap(), &wts, &mut g);
        let h = 1e-6;
        let m = spec.mode_count();
        for (o, i, w) in [(0, 1, 0), (1, 1, m - 1), (1, 0, m / 2)] {
            let mut a = p.clone();
            a.k_re[[o, i, w]] += h;
            let mut b = p.clone();
            b.k_re[[o, i, w]] -= h;
            let fd = (loss(&a, &v) - loss(&b, &v)) / (2.0 * h);
            assert!((fd - g.k_re[[o, i, w]]).abs() < 1e-7, "re {fd} vs {}", g.k_re[[o, i, w]]);
            let mut a = p.clone();
            a.k_im[[o, i, w]] += h;
            let mut b = p.clone();
            b.k_im[[o, i, w]] -= h;
            let fd = (loss(&a, &v) - loss(&b, &v)) / (2.0 * h);
            assert!((fd - g.k_im[[o, i, w]]).abs() < 1e-7, "im {fd} vs {}", g.k_im[[o, i, w]]);
        }
        let mut a = p.clone();
        a.w_hf[[1, 0]] += h;
        let mut b = p.clone();
        b.w_hf[[1, 0]] -= h;
        assert!(((loss(&a, &v) - loss(&b, &v)) / (2.0 * h) - g.w_hf[[1, 0]]).abs() < 1e-7);
        let mut a = p.clone();
        a.b_hf[1] += h;
        let mut b = p.clone();
        b.b_hf[1] -= h;
        assert!(((loss(&a, &v) - loss(&b, &v)) / (2.0 * h) - g.b_hf[1]).abs() < 1e-7);
        for idx in [(0, 0, 0), (1, 1, pts - 1), (1, 0, pts / 3)] {
            let mut a = v.clone();
            a[idx] += h;
            let mut b = v.clone();
            b[idx] -= h;
            let fd = (loss(&p, &a) - loss(&p, &b)) / (2.0 * h);
            assert!((fd - gv[idx]).abs() < 1e-7, "input {fd} vs {}", gv[idx]);
        }
    }
}
