use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vita_core::autodiff::{grad_check, GradCheckOptions, NormStats, Tape};
use vita_core::ops::{self, Activation, AttentionWeights, NormMode, RunningStats};
use vita_core::{Error, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

// ---------- oracles ----------

fn matmul_loops(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

fn conv2d_loops(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [f, _, k, _] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for bi in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[fi];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((fi * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[((bi * f + fi) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    (vec![n, f, oh, ow], out)
}

/// Standard normal CDF by composite Simpson integration of the density.
fn normal_cdf_quadrature(x: f64) -> f64 {
    let lo = -12.0;
    let steps = 20_000;
    let h = (x - lo) / steps as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(lo) + pdf(x);
    for i in 1..steps {
        let t = lo + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(t);
    }
    s * h / 3.0
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn random_attention_weights(d: usize, seed: u64) -> AttentionWeights<f64> {
    let mut r = rng(seed);
    let mut w = || Tensor::randn([d, d], 0.5, &mut r);
    let (wq, wk, wv, wo) = (w(), w(), w(), w());
    let mut r = rng(seed + 1);
    let mut b = || Tensor::randn([d], 0.1, &mut r);
    AttentionWeights { wq, bq: b(), wk, bk: b(), wv, bv: b(), wo, bo: b() }
}

fn linear_rows(x: &[f64], rows: usize, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for j in 0..dout {
            out[r * dout + j] = b.data()[j] + (0..din).map(|i| x[r * din + i] * w.data()[i * dout + j]).sum::<f64>();
        }
    }
    out
}

// ---------- matmul ----------

#[test]
fn matmul_identity_and_hand_example() {
    let eye = Tensor::<f64>::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let b = Tensor::<f64>::randn([3, 5], 1.0, &mut rng(1));
    assert_eq!(ops::matmul(&eye, &b).unwrap(), b);

    let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let ones = t64(&[2, 1], &[1.0, 1.0]);
    assert_eq!(ops::matmul(&a, &ones).unwrap().data(), &[3.0, 7.0]);
}

#[test]
fn matmul_matches_loop_oracle() {
    let a = Tensor::<f32>::randn([5, 4], 1.0, &mut rng(2));
    let b = Tensor::<f32>::randn([4, 3], 1.0, &mut rng(3));
    let got = ops::matmul(&a, &b).unwrap();
    let want = matmul_loops(&a.cast(), &b.cast());
    assert_eq!(got.shape(), &[5, 3]);
    for (g, w) in got.data().iter().zip(&want) {
        assert!((*g as f64 - w).abs() < 1e-6, "{g} vs {w}");
    }
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let a = Tensor::<f32>::zeros([2, 3]);
    let b = Tensor::<f32>::zeros([2, 3]);
    assert!(matches!(ops::matmul(&a, &b), Err(Error::Dimension(_))));
}

// ---------- conv2d ----------

#[test]
fn conv2d_identity_kernel() {
    let x = Tensor::<f32>::randn([1, 1, 4, 5], 1.0, &mut rng(4));
    let w = Tensor::<f32>::ones([1, 1, 1, 1]);
    let b = Tensor::<f32>::zeros([1]);
    assert_eq!(ops::conv2d(&x, &w, Some(&b), 1, 0).unwrap(), x);
}

#[test]
fn conv2d_all_ones_sums_to_nine() {
    let x = Tensor::<f32>::ones([1, 1, 3, 3]);
    let w = Tensor::<f32>::ones([1, 1, 3, 3]);
    let y = ops::conv2d(&x, &w, None, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[9.0]);
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let x = Tensor::<f32>::randn([2, 3, 7, 6], 1.0, &mut rng(5));
        let w = Tensor::<f32>::randn([4, 3, 3, 3], 1.0, &mut rng(6));
        let b = Tensor::<f32>::randn([4], 1.0, &mut rng(7));
        let got = ops::conv2d(&x, &w, Some(&b), stride, pad).unwrap();
        let bias64: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
        let (shape, want) = conv2d_loops(&x.cast(), &w.cast(), &bias64, stride, pad);
        assert_eq!(got.shape(), shape.as_slice());
        for (g, w) in got.data().iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-5, "{g} vs {w}");
        }
    }
}

#[test]
fn conv2d_kernel_larger_than_padded_input() {
    let x = Tensor::<f32>::zeros([1, 1, 2, 2]);
    let w = Tensor::<f32>::zeros([1, 1, 5, 5]);
    assert!(matches!(ops::conv2d(&x, &w, None, 1, 1), Err(Error::Dimension(_))));
}

// ---------- conv_transpose2d ----------

#[test]
fn conv_transpose_impulse_stamps_kernel() {
    let mut x = Tensor::<f32>::zeros([1, 1, 3, 3]);
    x.data_mut()[4] = 1.0; // centre pixel (1,1)
    let w = t64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).cast::<f32>();
    let y = ops::conv_transpose2d(&x, &w, None, 2, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 6, 6]);
    for r in 0..6 {
        for c in 0..6 {
            let v = y.data()[r * 6 + c];
            let expected = if (2..4).contains(&r) && (2..4).contains(&c) {
                w.data()[(r - 2) * 2 + (c - 2)]
            } else {
                0.0
            };
            assert_eq!(v, expected, "at ({r},{c})");
        }
    }
}

#[test]
fn conv_transpose_upsamples_like_dual_branch() {
    let x = Tensor::<f32>::randn([1, 128, 56, 56], 1.0, &mut rng(8));
    let w = Tensor::<f32>::randn([128, 64, 2, 2], 0.05, &mut rng(9));
    let b = Tensor::<f32>::zeros([64]);
    let y = ops::conv_transpose2d(&x, &w, Some(&b), 2, 0).unwrap();
    assert_eq!(y.shape(), &[1, 64, 112, 112]);
}

#[test]
fn conv_transpose_negative_size_rejected() {
    let x = Tensor::<f32>::zeros([1, 1, 1, 1]);
    let w = Tensor::<f32>::zeros([1, 1, 1, 1]);
    assert!(matches!(
        ops::conv_transpose2d(&x, &w, None, 1, 1),
        Err(Error::Dimension(_))
    ));
}

/// `<conv2d(x,w), y> == <x, conv_transpose2d(y,w)>` for a given geometry.
fn adjoint_gap(c: usize, f: usize, h: usize, k: usize, stride: usize, pad: usize, seed: u64) -> f64 {
    let x = Tensor::<f64>::randn([2, c, h, h], 1.0, &mut rng(seed));
    let w = Tensor::<f64>::randn([f, c, k, k], 1.0, &mut rng(seed + 1));
    let cx = ops::conv2d(&x, &w, None, stride, pad).unwrap();
    let y = Tensor::<f64>::randn(cx.shape().to_vec(), 1.0, &mut rng(seed + 2));
    let ty = ops::conv_transpose2d(&y, &w, None, stride, pad).unwrap();
    assert_eq!(ty.shape(), x.shape());
    let lhs = cx.dot(&y).unwrap();
    let rhs = x.dot(&ty).unwrap();
    (lhs - rhs).abs() / lhs.abs().max(1.0)
}

#[test]
fn conv_transpose_is_adjoint_of_conv2d() {
    // stride-2 upsampling, 3x3 same-padding refinement, 1x1 reduction, and
    // the full-kernel 1x1 -> side x side expansion used by the decoders.
    for (i, &(c, f, h, k, s, p)) in [
        (3, 4, 6, 2, 2, 0),
        (3, 4, 5, 3, 1, 1),
        (4, 2, 5, 1, 1, 0),
        (3, 5, 8, 8, 1, 0),
    ]
    .iter()
    .enumerate()
    {
        let gap = adjoint_gap(c, f, h, k, s, p, 100 + i as u64 * 10);
        assert!(gap < 1e-5, "geometry {i}: {gap}");
    }
}

// ---------- batch norm ----------

#[test]
fn batch_norm_constant_input_is_zero() {
    let x = Tensor::<f32>::full([2, 3, 2, 2], 4.2);
    let mut rs = RunningStats::new(3);
    let y = ops::batch_norm2d(&x, &Tensor::ones([3]), &Tensor::zeros([3]), NormMode::Train, &mut rs, 1e-5).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_two_elements_symmetric() {
    let x = t64(&[2, 1, 1, 1], &[0.0, 2.0]);
    let mut rs = RunningStats::new(1);
    let y = ops::batch_norm2d(&x, &Tensor::ones([1]), &Tensor::zeros([1]), NormMode::Train, &mut rs, 1e-14).unwrap();
    assert!((y.data()[0] + 1.0).abs() < 1e-9);
    assert!((y.data()[1] - 1.0).abs() < 1e-9);
}

#[test]
fn batch_norm_matches_statistics_oracle() {
    let x = Tensor::<f64>::randn([3, 2, 4, 5], 2.0, &mut rng(11));
    let gamma = Tensor::<f64>::randn([2], 1.0, &mut rng(12));
    let beta = Tensor::<f64>::randn([2], 1.0, &mut rng(13));
    let mut rs = RunningStats::new(2);
    let y = ops::batch_norm2d(&x, &gamma, &beta, NormMode::Train, &mut rs, 1e-5).unwrap();
    for c in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|n| x.data()[(n * 2 + c) * 20..(n * 2 + c + 1) * 20].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for n in 0..3 {
            for i in 0..20 {
                let idx = (n * 2 + c) * 20 + i;
                let want = gamma.data()[c] * (x.data()[idx] - mean) / (var + 1e-5).sqrt() + beta.data()[c];
                assert!((y.data()[idx] - want).abs() < 1e-6);
            }
        }
        let unbiased = var * 60.0 / 59.0;
        assert!((rs.mean[c] - 0.1 * mean).abs() < 1e-12);
        assert!((rs.var[c] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_eval_uses_running_stats() {
    let x = t64(&[1, 1, 1, 2], &[3.0, 5.0]);
    let mut rs = RunningStats { mean: vec![1.0], var: vec![4.0], momentum: 0.1 };
    let y = ops::batch_norm2d(&x, &Tensor::ones([1]), &Tensor::zeros([1]), NormMode::Eval, &mut rs, 0.0).unwrap();
    assert_eq!(y.data(), &[1.0, 2.0]);
    assert_eq!(rs.mean, vec![1.0]);
}

#[test]
fn batch_norm_single_element_is_degenerate() {
    let x = Tensor::<f32>::zeros([1, 2, 1, 1]);
    let mut rs = RunningStats::new(2);
    let r = ops::batch_norm2d(&x, &Tensor::ones([2]), &Tensor::zeros([2]), NormMode::Train, &mut rs, 1e-5);
    assert!(matches!(r, Err(Error::DegenerateVariance(_))));
}

// ---------- attention ----------

#[test]
fn attention_single_token() {
    let w = random_attention_weights(4, 20);
    let x = Tensor::<f64>::randn([1, 1, 4], 1.0, &mut rng(21));
    let (y, probs) = ops::multi_head_attention(&x, 2, &w).unwrap();
    assert_eq!(probs.data(), &[1.0, 1.0]);
    let v = linear_rows(x.data(), 1, &w.wv, &w.bv);
    let want = linear_rows(&v, 1, &w.wo, &w.bo);
    for (g, w) in y.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn attention_identical_tokens_is_uniform() {
    let w = random_attention_weights(8, 22);
    let row = Tensor::<f64>::randn([8], 1.0, &mut rng(23));
    let x = Tensor::<f64>::from_fn([2, 5, 8], |i| row.data()[i % 8]);
    let (_, probs) = ops::multi_head_attention(&x, 4, &w).unwrap();
    for &p in probs.data() {
        assert!((p - 0.2).abs() < 1e-12);
    }
}

#[test]
fn attention_matches_explicit_formula() {
    let (t, d, heads) = (3, 4, 2);
    let dh = d / heads;
    let w = random_attention_weights(d, 24);
    let x = Tensor::<f64>::randn([1, t, d], 1.0, &mut rng(25));
    let (y, _) = ops::multi_head_attention(&x, heads, &w).unwrap();

    let q = linear_rows(x.data(), t, &w.wq, &w.bq);
    let k = linear_rows(x.data(), t, &w.wk, &w.bk);
    let v = linear_rows(x.data(), t, &w.wv, &w.bv);
    let mut concat = vec![0.0; t * d];
    for h in 0..heads {
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| (0..dh).map(|e| q[i * d + h * dh + e] * k[j * d + h * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let p = softmax(&scores);
            for e in 0..dh {
                concat[i * d + h * dh + e] = (0..t).map(|j| p[j] * v[j * d + h * dh + e]).sum();
            }
        }
    }
    let want = linear_rows(&concat, t, &w.wo, &w.bo);
    for (g, w) in y.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-5);
    }
}

#[test]
fn attention_heads_must_divide_dim() {
    let w = random_attention_weights(6, 26);
    let x = Tensor::<f64>::zeros([1, 2, 6]);
    assert!(matches!(ops::multi_head_attention(&x, 4, &w), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..1000, tokens in 1usize..7, heads in 1usize..4) {
        let d = heads * 2;
        let w = random_attention_weights(d, seed);
        let x = Tensor::<f32>::randn([2, tokens, d], 2.0, &mut rng(seed ^ 77));
        let w32 = AttentionWeights {
            wq: w.wq.cast(), bq: w.bq.cast(), wk: w.wk.cast(), bk: w.bk.cast(),
            wv: w.wv.cast(), bv: w.bv.cast(), wo: w.wo.cast(), bo: w.bo.cast(),
        };
        let (_, probs) = ops::multi_head_attention(&x, heads, &w32).unwrap();
        for row in probs.data().chunks(tokens) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

// ---------- elementwise ----------

#[test]
fn elementwise_fixed_points() {
    let x = t64(&[3], &[0.0, -1.0, 2.0]);
    assert_eq!(ops::elementwise(&x, Activation::Sigmoid).unwrap().data()[0], 0.5);
    assert_eq!(ops::elementwise(&x, Activation::Relu).unwrap().data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn gelu_matches_gaussian_cdf_quadrature() {
    let x = t64(&[5], &[-2.0, -1.0, 0.0, 1.0, 2.0]);
    let y = ops::elementwise(&x, Activation::Gelu).unwrap();
    for (&xi, &yi) in x.data().iter().zip(y.data()) {
        let want = xi * normal_cdf_quadrature(xi);
        assert!((yi - want).abs() < 1e-6, "gelu({xi}) = {yi}, oracle {want}");
    }
}

#[test]
fn sigmoid_stays_inside_open_interval() {
    let x = Tensor::<f32>::new([4], vec![-200.0, -30.0, 30.0, 200.0]).unwrap();
    let y = ops::elementwise(&x, Activation::Sigmoid).unwrap();
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

// ---------- concat ----------

#[test]
fn concat_channels_widths_and_identity() {
    let a = Tensor::<f32>::zeros([1, 32, 4, 4]);
    let b = Tensor::<f32>::ones([1, 32, 4, 4]);
    let c = ops::concat_channels(&a, &b).unwrap();
    assert_eq!(c.shape(), &[1, 64, 4, 4]);
    assert!(c.data()[..512].iter().all(|&v| v == 0.0));
    assert!(c.data()[512..].iter().all(|&v| v == 1.0));

    let x = Tensor::<f32>::randn([2, 3, 2, 2], 1.0, &mut rng(30));
    let empty = Tensor::<f32>::new([2, 0, 2, 2], vec![]).unwrap();
    assert_eq!(ops::concat_channels(&x, &empty).unwrap(), x);
}

#[test]
fn concat_channels_rejects_spatial_mismatch() {
    let a = Tensor::<f32>::zeros([1, 2, 4, 4]);
    let b = Tensor::<f32>::zeros([1, 2, 4, 5]);
    assert!(matches!(ops::concat_channels(&a, &b), Err(Error::Dimension(_))));
}

#[test]
fn concat_backward_splits_ones() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::<f64>::randn([2, 2, 3, 3], 1.0, &mut rng(31)).with_requires_grad());
    let b = tape.leaf(Tensor::<f64>::randn([2, 5, 3, 3], 1.0, &mut rng(32)).with_requires_grad());
    let c = tape.concat_channels(a, b).unwrap();
    let s = tape.sum(c).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.wrt(a).unwrap().iter().all(|&v| v == 1.0));
    assert!(g.wrt(b).unwrap().iter().all(|&v| v == 1.0));
    assert_eq!(g.wrt(b).unwrap().len(), 90);
}

// ---------- backward ----------

#[test]
fn backward_sum_of_squares() {
    let x0 = Tensor::<f64>::randn([7], 1.0, &mut rng(40)).with_requires_grad();
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    for (gi, xi) in g.wrt(x).unwrap().iter().zip(x0.data()) {
        assert!((gi - 2.0 * xi).abs() < 1e-15);
    }
}

#[test]
fn backward_sigmoid_at_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f32>::zeros([1]).with_requires_grad());
    let y = tape.sigmoid(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[0.25]);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f32>::zeros([3]).with_requires_grad());
    let y = tape.relu(x).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn backward_visits_each_node_once() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::randn([2, 3], 1.0, &mut rng(41)).with_requires_grad());
    let w = tape.leaf(Tensor::<f64>::randn([3, 4], 1.0, &mut rng(42)).with_requires_grad());
    let h = tape.matmul(x, w).unwrap();
    let a = tape.gelu(h).unwrap();
    let b = tape.sigmoid(h).unwrap();
    let c = tape.add(a, b).unwrap();
    let s = tape.mean(c).unwrap();
    let nodes = tape.len();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.nodes_visited(), nodes);
}

#[test]
fn non_finite_output_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f32>::full([2], f32::MAX));
    assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite(_))));
}

#[test]
fn identical_inputs_give_bitwise_identical_outputs() {
    let run = || {
        let x = Tensor::<f32>::randn([2, 3, 8, 8], 1.0, &mut rng(50));
        let w = Tensor::<f32>::randn([4, 3, 3, 3], 1.0, &mut rng(51));
        let y = ops::conv2d(&x, &w, None, 1, 1).unwrap();
        let mut rs = RunningStats::new(4);
        ops::batch_norm2d(&y, &Tensor::ones([4]), &Tensor::zeros([4]), NormMode::Train, &mut rs, 1e-5).unwrap()
    };
    assert_eq!(run(), run());
}

// ---------- grad_check ----------

fn opts() -> GradCheckOptions {
    GradCheckOptions::default()
}

#[test]
fn grad_check_linear_function_is_exact() {
    let mut params = vec![
        Tensor::<f64>::randn([3, 2], 1.0, &mut rng(60)).with_requires_grad(),
        Tensor::<f64>::randn([2], 1.0, &mut rng(61)).with_requires_grad(),
    ];
    let x = Tensor::<f64>::randn([4, 3], 1.0, &mut rng(62));
    let report = grad_check(
        &mut params,
        |tape, p| {
            let xv = tape.constant(x.clone());
            let (w, b) = (tape.param(0, &p[0]), tape.param(1, &p[1]));
            let y = tape.linear(xv, w, Some(b))?;
            tape.sum(y)
        },
        &opts(),
    )
    .unwrap();
    assert!(report.passed);
    assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
}

#[test]
fn grad_check_conv_bn_relu_stack() {
    let mut params = vec![
        Tensor::<f64>::randn([2, 4, 6, 6], 1.0, &mut rng(70)).with_requires_grad(),
        Tensor::<f64>::randn([3, 4, 3, 3], 0.3, &mut rng(71)).with_requires_grad(),
        Tensor::<f64>::randn([3], 0.1, &mut rng(72)).with_requires_grad(),
        Tensor::<f64>::rand_uniform([3], 0.5, 1.5, &mut rng(73)).with_requires_grad(),
        Tensor::<f64>::randn([3], 0.1, &mut rng(74)).with_requires_grad(),
    ];
    let target = Tensor::<f64>::randn([2, 3, 6, 6], 1.0, &mut rng(75));
    let report = grad_check(
        &mut params,
        |tape, p| {
            let x = tape.param(0, &p[0]);
            let (w, b) = (tape.param(1, &p[1]), tape.param(2, &p[2]));
            let (g, bt) = (tape.param(3, &p[3]), tape.param(4, &p[4]));
            let y = tape.conv2d(x, w, Some(b), 1, 1)?;
            let (y, _) = tape.batch_norm2d(y, g, bt, NormStats::Batch, 1e-5)?;
            let y = tape.relu(y)?;
            let t = tape.constant(target.clone());
            let y = tape.mul(y, t)?;
            tape.sum(y)
        },
        &opts(),
    )
    .unwrap();
    let worst = report.worst().unwrap();
    assert!(report.passed, "worst {worst:?}");
}

#[test]
fn grad_check_flags_corrupted_backward_rule() {
    let mut params = vec![Tensor::<f64>::randn([5], 1.0, &mut rng(80)).with_requires_grad()];
    let report = grad_check(
        &mut params,
        |tape, p| {
            let x = tape.param(0, &p[0]);
            // forward tanh, backward deliberately off by a factor of 1.5
            let y = tape.custom_unary(x, |v| v.tanh(), |_, out, g| {
                out.iter().zip(g).map(|(&o, &gi)| 1.5 * gi * (1.0 - o * o)).collect()
            })?;
            tape.sum(y)
        },
        &opts(),
    )
    .unwrap();
    assert!(!report.passed);
    assert!(report.max_rel_error > 0.1);
}

#[test]
fn grad_check_aborts_on_non_finite_loss() {
    let mut params = vec![Tensor::<f64>::from_fn([1], |_| 0.0).with_requires_grad()];
    let r = grad_check(
        &mut params,
        |tape, p| {
            let x = tape.param(0, &p[0]);
            let y = tape.custom_unary(x, |v| if v > 0.0 { f64::INFINITY } else { v }, |_, _, g| g.to_vec())?;
            tape.sum(y)
        },
        &opts(),
    );
    assert!(matches!(r, Err(Error::NonFinite(_))));
}

#[test]
fn grad_check_every_differentiable_op() {
    let mut r = rng(90);
    let mut params = vec![
        Tensor::<f64>::randn([2, 3, 4], 1.0, &mut r).with_requires_grad(), // tokens
        Tensor::<f64>::randn([4, 4], 0.5, &mut r).with_requires_grad(),    // wq
        Tensor::<f64>::randn([4, 4], 0.5, &mut r).with_requires_grad(),    // wk
        Tensor::<f64>::randn([4, 4], 0.5, &mut r).with_requires_grad(),    // wv
        Tensor::<f64>::rand_uniform([4], 0.5, 1.5, &mut r).with_requires_grad(), // ln gamma
        Tensor::<f64>::randn([4], 0.2, &mut r).with_requires_grad(),       // ln beta
        Tensor::<f64>::randn([3, 4], 0.2, &mut r).with_requires_grad(),    // pos
        Tensor::<f64>::randn([4, 2, 2, 2], 0.5, &mut r).with_requires_grad(), // convT w
        Tensor::<f64>::randn([2], 0.1, &mut r).with_requires_grad(),       // convT b
    ];
    let target = Tensor::<f64>::from_fn([2, 4, 2, 2], |i| ((i * 7) % 3 == 0) as u8 as f64);
    let report = grad_check(
        &mut params,
        |tape, p| {
            let v: Vec<_> = (0..p.len()).map(|i| tape.param(i, &p[i])).collect();
            let x = tape.add_broadcast(v[0], v[6])?;
            let x = tape.layer_norm(x, v[4], v[5], 1e-6)?;
            let q = tape.linear(x, v[1], None)?;
            let k = tape.linear(x, v[2], None)?;
            let val = tape.linear(x, v[3], None)?;
            let a = tape.attention(q, k, val, 2)?;
            let a = tape.gelu(a)?;
            let x = tape.add(a, x)?;
            let m = tape.mean_tokens(x)?;
            let m = tape.reshape(m, &[2, 4, 1, 1])?;
            let up = tape.conv_transpose2d(m, v[7], Some(v[8]), 2, 0)?;
            let map = tape.reshape(x, &[2, 3, 2, 2])?;
            let tokens = tape.tokens_from_map(map)?;
            let tokens = tape.reshape(tokens, &[2, 1, 2, 6])?;
            let tokens = tape.scale(tokens, 0.5)?;
            let up2 = tape.reshape(up, &[2, 1, 2, 4])?;
            let up2 = tape.reshape(up2, &[2, 2, 2, 2])?;
            let cat = tape.concat_channels(up2, up)?;
            let probs = tape.sigmoid(cat)?;
            let loss = tape.bce(probs, &target, 1e-7)?;
            let extra = tape.sum(tokens)?;
            let extra = tape.scale(extra, 0.01)?;
            tape.add(loss, extra)
        },
        &opts(),
    )
    .unwrap();
    assert!(report.passed, "worst {:?}", report.worst());
}
