use ctxf_autodiff::rng;
use ctxf_autodiff::AutodiffError;

type Tape = ctxf_autodiff::Tape<f32>;
type Tensor = ctxf_autodiff::Tensor<f32>;

#[test]
fn relu_sign_cases() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(&[-1.0, 0.0, 2.0]));
    let y = t.relu(x);
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn l2_normalize_three_four_five() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(&[3.0, 4.0]));
    let y = t.l2_normalize(x);
    let d = t.value(y).data();
    assert!((d[0] - 0.6).abs() < 1e-7 && (d[1] - 0.8).abs() < 1e-7);
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    for seed in 0..20 {
        let mut r = rng::seeded(seed);
        let a = Tensor::randn(&[2, 3], 1.0, &mut r);
        let b = Tensor::randn(&[3, 2], 1.0, &mut r);
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let c = t.matmul(va, vb).unwrap();
        for (x, y) in t.value(c).data().iter().zip(triple_loop(&a, &b)) {
            assert!((*x as f64 - y).abs() < 1e-6);
        }
    }
}

/// Direct seven-loop convolution used as a reference.
fn conv_reference(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let y = (oy * stride + ki) as isize - pad as isize;
                                let xx = (ox * stride + kj) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xi = ((s * c + ic) * h + y as usize) * wd + xx as usize;
                                let wi = ((oc * c + ic) * kh + ki) * kw + kj;
                                acc += x.data()[xi] as f64 * w.data()[wi] as f64;
                            }
                        }
                    }
                    out[((s * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (vec![n, o, oh, ow], out)
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut r = rng::seeded(3);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
        let x = Tensor::randn(&[2, 3, 7, 6], 1.0, &mut r);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r);
        let mut t = Tape::new();
        let (vx, vw) = (t.constant(x.clone()), t.constant(w.clone()));
        let y = t.conv2d(vx, vw, None, stride, pad).unwrap();
        let (shape, reference) = conv_reference(&x, &w, stride, pad);
        assert_eq!(t.value(y).shape(), shape.as_slice());
        for (a, b) in t.value(y).data().iter().zip(reference) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }
}

#[test]
fn max_pool_picks_window_maxima() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0]).unwrap());
    let y = t.max_pool2d(x, 2).unwrap();
    assert_eq!(t.value(y).data(), &[5.0, 7.0]);
}

#[test]
fn masked_softmax_zeroes_masked_entries() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(&[&[1.0, 2.0, 3.0], &[0.5, 0.5, 9.0]]));
    let p = t.masked_softmax(x, &[true, true, false, true, true, false]).unwrap();
    let d = t.value(p).data();
    assert_eq!(d[2], 0.0);
    assert!((d[0] + d[1] - 1.0).abs() < 1e-6);
    assert!((d[3] - 0.5).abs() < 1e-6 && (d[4] - 0.5).abs() < 1e-6);
    assert!(t.masked_softmax(x, &[false; 6]).is_err());
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    let c = t.constant(Tensor::zeros(&[3, 2]));
    assert!(t.add(a, c).is_err());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(&[1.0, 2.0]));
    let y = t.relu(x);
    assert!(matches!(t.backward(y), Err(AutodiffError::NonScalarLoss(_))));
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng::seeded(9);
    let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut r);
    let w = Tensor::randn(&[5, 3, 3, 3], 1.0, &mut r);
    let run = || {
        let mut t = Tape::new();
        let (vx, vw) = (t.constant(x.clone()), t.param(w.clone()));
        let y = t.conv2d(vx, vw, None, 1, 1).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        (t.value(y).clone(), g.get(vw).unwrap().clone())
    };
    assert_eq!(run(), run());
}
