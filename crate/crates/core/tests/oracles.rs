//! Forward kernels against independent nested-loop references.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rls_core::layers::{init_params, layer_forward, LayerSpec};
use rls_core::{Tape, Tensor};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                c[i * n + j] += a.data()[i * k + t] * b.data()[t * n + j];
            }
        }
    }
    c
}

/// Direct sliding window; summation over (c, u, v) in that order.
fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (i * stride + u) as isize - pad as isize;
                                let s = (j * stride + v) as isize - pad as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= w as isize {
                                    continue;
                                }
                                let xi = ((b * c + ch) * h + r as usize) * w + s as usize;
                                let ki = ((oc * c + ch) * kh + u) * kw + v;
                                acc += x.data()[xi] * k.data()[ki];
                            }
                        }
                    }
                    out[((b * o + oc) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (vec![n, o, ho, wo], out)
}

fn naive_pool(x: &Tensor, k: usize, stride: usize) -> Vec<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Vec::new();
    for plane in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                let mut best = f64::NEG_INFINITY;
                for u in 0..k {
                    for v in 0..k {
                        best = best.max(x.data()[plane * h * w + (i * stride + u) * w + j * stride + v]);
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (a, b) = (random_tensor(&mut rng, &[3, 4]), random_tensor(&mut rng, &[4, 2]));
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(av, bv).unwrap();
        let expect = naive_matmul(&a, &b);
        for (x, y) in tape.value(c).data().iter().zip(&expect) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn conv_matches_sliding_window_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = [
        ([1, 2, 5, 5], [3, 2, 3, 3], 1, 0),
        ([2, 1, 6, 7], [2, 1, 3, 2], 2, 1),
        ([1, 3, 4, 4], [4, 3, 1, 1], 1, 0),
        ([2, 2, 5, 4], [3, 2, 3, 3], 1, 2),
    ];
    for (xs, ks, stride, pad) in cases {
        let x = random_tensor(&mut rng, &xs);
        let k = random_tensor(&mut rng, &ks);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
        let y = tape.conv2d(xv, kv, stride, pad).unwrap();
        let (shape, expect) = naive_conv(&x, &k, stride, pad);
        assert_eq!(tape.value(y).shape(), shape.as_slice());
        assert_eq!(tape.value(y).data(), expect.as_slice());
    }
}

#[test]
fn conv_kernel_larger_than_input_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(
        tape.conv2d(x, k, 1, 0),
        Err(rls_core::Error::Dimension(_))
    ));
    assert!(tape.conv2d(x, k, 1, 1).is_ok());
}

#[test]
fn conv_layer_equals_oracle_plus_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = LayerSpec::conv(2, 3, 3, 1, 1);
    let mut params = init_params(&spec, &mut rng).unwrap();
    params.bias = Some(random_tensor(&mut rng, &[3]));
    let x = random_tensor(&mut rng, &[2, 2, 4, 4]);
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = layer_forward(&mut tape, &spec, Some(&pv), xv).unwrap();
    let (_, mut expect) = naive_conv(&x, &params.weight, 1, 1);
    let bias = params.bias.as_ref().unwrap().data();
    for (i, e) in expect.iter_mut().enumerate() {
        *e += bias[(i / 16) % 3];
    }
    assert_eq!(tape.value(y).data(), expect.as_slice());
}

#[test]
fn max_pool_matches_windowed_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (k, stride) in [(2, 2), (3, 1), (2, 1), (3, 3)] {
        let x = random_tensor(&mut rng, &[2, 3, 6, 6]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.max_pool2d(xv, k, stride).unwrap();
        assert_eq!(tape.value(y).data(), naive_pool(&x, k, stride).as_slice());
    }
}

#[test]
fn pool_window_too_large_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 2, 3]));
    assert!(tape.max_pool2d(x, 3, 1).is_err());
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let x = random_tensor(&mut rng, &[4, 7]).map(|v| v * 50.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let p = tape.softmax(xv).unwrap();
        for row in tape.value(p).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, &[3, 2, 6, 6]);
    let k = random_tensor(&mut rng, &[4, 2, 3, 3]);
    let run = || {
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
        let y = tape.conv2d(xv, kv, 1, 1).unwrap();
        let y = tape.relu(y);
        let y = tape.max_pool2d(y, 2, 2).unwrap();
        let y = tape.flatten(y).unwrap();
        let p = tape.softmax(y).unwrap();
        tape.value(p).clone()
    };
    let (a, b) = (run(), run());
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}
