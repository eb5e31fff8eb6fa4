//! Layer primitives. Each forward has a matching backward implementing the
//! exact chain rule; all of them are certified by `grad_check` in the tests.

use super::{NumericsError, Tensor1, Tensor2};

/// LayerNorm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

/// `Y = X Wᵀ + b` for a batch of row vectors. `w` is `N×D`, `x` is `B×D`,
/// output `B×N`.
pub fn linear_forward(w: &Tensor2, b: &Tensor1, x: &Tensor2) -> Result<Tensor2, NumericsError> {
    if w.cols() != x.cols() || b.len() != w.rows() {
        return Err(NumericsError::ShapeMismatch(format!(
            "linear: w {}x{}, b {}, x {}x{}",
            w.rows(),
            w.cols(),
            b.len(),
            x.rows(),
            x.cols()
        )));
    }
    let mut y = Tensor2::zeros(x.rows(), w.rows());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        for (i, out) in yr.iter_mut().enumerate() {
            let wr = w.row(i);
            let mut acc = 0.0;
            for (a, c) in xr.iter().zip(wr.iter()) {
                acc += a * c;
            }
            *out = acc + b.data()[i];
        }
    }
    y.validate_finite("linear_forward")?;
    Ok(y)
}

/// Backward of [`linear_forward`]: given `dY`, returns `(dW, db, dX)`.
pub fn linear_backward(
    w: &Tensor2,
    x: &Tensor2,
    d_y: &Tensor2,
) -> Result<(Tensor2, Tensor1, Tensor2), NumericsError> {
    if d_y.rows() != x.rows() || d_y.cols() != w.rows() || w.cols() != x.cols() {
        return Err(NumericsError::ShapeMismatch(format!(
            "linear backward: w {}x{}, x {}x{}, dY {}x{}",
            w.rows(),
            w.cols(),
            x.rows(),
            x.cols(),
            d_y.rows(),
            d_y.cols()
        )));
    }
    let mut d_w = Tensor2::zeros(w.rows(), w.cols());
    let mut d_b = Tensor1::zeros(w.rows());
    let mut d_x = Tensor2::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dyr = d_y.row(r);
        let dxr = d_x.row_mut(r);
        for (i, &g) in dyr.iter().enumerate() {
            d_b.data_mut()[i] += g;
            let dwr = d_w.row_mut(i);
            let wr = w.row(i);
            for j in 0..xr.len() {
                dwr[j] += g * xr[j];
                dxr[j] += g * wr[j];
            }
        }
    }
    d_w.validate_finite("linear_backward dW")?;
    d_x.validate_finite("linear_backward dX")?;
    Ok((d_w, d_b, d_x))
}

/// Single-vector form of [`linear_forward`]: `y = W x + b`.
pub fn linear_vec(w: &Tensor2, b: &Tensor1, x: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if w.cols() != x.len() || b.len() != w.rows() {
        return Err(NumericsError::ShapeMismatch(format!(
            "linear_vec: w {}x{}, b {}, x {}",
            w.rows(),
            w.cols(),
            b.len(),
            x.len()
        )));
    }
    let mut y = vec![0.0; w.rows()];
    for (i, out) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (a, c) in x.iter().zip(w.row(i).iter()) {
            acc += a * c;
        }
        *out = acc + b.data()[i];
        if !out.is_finite() {
            return Err(NumericsError::NonFinite("linear_vec"));
        }
    }
    Ok(y)
}

/// Backward of [`linear_vec`]: returns `(dW, db, dx)`.
pub fn linear_vec_backward(w: &Tensor2, x: &[f64], d_y: &[f64]) -> (Tensor2, Tensor1, Vec<f64>) {
    let mut d_w = Tensor2::zeros(w.rows(), w.cols());
    let d_b = Tensor1::from_vec(d_y.to_vec());
    let mut d_x = vec![0.0; x.len()];
    for (i, &g) in d_y.iter().enumerate() {
        let dwr = d_w.row_mut(i);
        let wr = w.row(i);
        for j in 0..x.len() {
            dwr[j] = g * x[j];
            d_x[j] += g * wr[j];
        }
    }
    (d_w, d_b, d_x)
}

/// Intermediates cached by [`layer_norm_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: f64,
}

/// Per-vector LayerNorm: `(x - mean) / sqrt(var + eps) * gain + bias`.
pub fn layer_norm_forward(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
) -> Result<(Vec<f64>, LayerNormCache), NumericsError> {
    let n = x.len();
    if n < 2 || gain.len() != n || bias.len() != n {
        return Err(NumericsError::ShapeMismatch(format!(
            "layer_norm: x {}, gain {}, bias {}",
            n,
            gain.len(),
            bias.len()
        )));
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let normalized: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y: Vec<f64> = normalized
        .iter()
        .zip(gain.iter().zip(bias.iter()))
        .map(|(xh, (g, b))| xh * g + b)
        .collect();
    if !y.iter().all(|v| v.is_finite()) {
        return Err(NumericsError::NonFinite("layer_norm_forward"));
    }
    Ok((y, LayerNormCache { normalized, inv_std }))
}

/// Backward of [`layer_norm_forward`]: returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    d_y: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = cache.normalized.len();
    let d_gain: Vec<f64> = d_y
        .iter()
        .zip(cache.normalized.iter())
        .map(|(dy, xh)| dy * xh)
        .collect();
    let d_bias = d_y.to_vec();
    let d_xhat: Vec<f64> = d_y.iter().zip(gain.iter()).map(|(dy, g)| dy * g).collect();
    let mean_dxhat = d_xhat.iter().sum::<f64>() / n as f64;
    let mean_dxhat_xhat = d_xhat
        .iter()
        .zip(cache.normalized.iter())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / n as f64;
    let d_x: Vec<f64> = d_xhat
        .iter()
        .zip(cache.normalized.iter())
        .map(|(dxh, xh)| cache.inv_std * (dxh - mean_dxhat - xh * mean_dxhat_xhat))
        .collect();
    (d_x, d_gain, d_bias)
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

/// Backward of [`relu`] w.r.t. the pre-activation `x` (subgradient 0 at 0).
pub fn relu_backward(x: &[f64], d_y: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(d_y.iter())
        .map(|(v, dy)| if *v > 0.0 { *dy } else { 0.0 })
        .collect()
}

/// Scales to unit Euclidean norm. Returns the output and the input norm.
pub fn l2_normalize(x: &[f64]) -> Result<(Vec<f64>, f64), NumericsError> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(NumericsError::ZeroVector);
    }
    Ok((x.iter().map(|v| v / norm).collect(), norm))
}

/// Backward of [`l2_normalize`] given its output `y` and the input norm.
pub fn l2_normalize_backward(y: &[f64], norm: f64, d_y: &[f64]) -> Vec<f64> {
    let y_dot_dy: f64 = y.iter().zip(d_y.iter()).map(|(a, b)| a * b).sum();
    y.iter()
        .zip(d_y.iter())
        .map(|(yi, dyi)| (dyi - yi * y_dot_dy) / norm)
        .collect()
}

/// Max-shifted softmax. The output sums to 1 up to float rounding.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Backward of [`softmax`] given its output `p`.
pub fn softmax_backward(p: &[f64], d_p: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(d_p.iter()).map(|(a, b)| a * b).sum();
    p.iter()
        .zip(d_p.iter())
        .map(|(pi, dpi)| pi * (dpi - dot))
        .collect()
}

/// `log Σ exp(v_i)` computed with a max shift; finite for entries up to 1e4.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Backward of [`log_sum_exp`]: `d/dv_i = softmax(v)_i * upstream`.
pub fn log_sum_exp_backward(v: &[f64], upstream: f64) -> Vec<f64> {
    softmax(v).into_iter().map(|s| s * upstream).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_vec(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn linear_identity_passthrough() {
        let mut w = Tensor2::zeros(3, 3);
        for i in 0..3 {
            w.set(i, i, 1.0);
        }
        let b = Tensor1::zeros(3);
        let x = Tensor2::from_vec(2, 3, vec![1.0, 2.0, 3.0, -4.0, 5.0, -6.0]).unwrap();
        let y = linear_forward(&w, &b, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn linear_scalar_case() {
        // 1x1: y = w*x + b, dL/dw = dy*x, dL/db = dy, dL/dx = dy*w.
        let w = Tensor2::from_vec(1, 1, vec![3.0]).unwrap();
        let b = Tensor1::from_vec(vec![0.5]);
        let x = Tensor2::from_vec(1, 1, vec![2.0]).unwrap();
        let y = linear_forward(&w, &b, &x).unwrap();
        assert_eq!(y.get(0, 0), 6.5);
        let dy = Tensor2::from_vec(1, 1, vec![1.0]).unwrap();
        let (dw, db, dx) = linear_backward(&w, &x, &dy).unwrap();
        assert_eq!(dw.get(0, 0), 2.0);
        assert_eq!(db.data()[0], 1.0);
        assert_eq!(dx.get(0, 0), 3.0);
    }

    #[test]
    fn linear_shape_mismatch() {
        let w = Tensor2::zeros(2, 3);
        let b = Tensor1::zeros(2);
        let x = Tensor2::zeros(1, 4);
        assert!(matches!(
            linear_forward(&w, &b, &x),
            Err(NumericsError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn linear_nonfinite_detected() {
        let w = Tensor2::from_vec(1, 1, vec![f64::MAX]).unwrap();
        let b = Tensor1::zeros(1);
        let x = Tensor2::from_vec(1, 1, vec![f64::MAX]).unwrap();
        assert_eq!(
            linear_forward(&w, &b, &x),
            Err(NumericsError::NonFinite("linear_forward"))
        );
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let (n, d) = (3, 4);
        let w0 = rand_vec(&mut rng, n * d);
        let b0 = rand_vec(&mut rng, n);
        let x0 = rand_vec(&mut rng, d);
        // Scalar objective: sum of squares of the outputs.
        let f = |params: &[Vec<f64>]| {
            let w = Tensor2::from_vec(n, d, params[0].clone()).unwrap();
            let b = Tensor1::from_vec(params[1].clone());
            let x = Tensor2::from_vec(1, d, params[2].clone()).unwrap();
            let y = linear_forward(&w, &b, &x).unwrap();
            let loss: f64 = y.data().iter().map(|v| v * v).sum();
            let dy = Tensor2::from_vec(1, n, y.data().iter().map(|v| 2.0 * v).collect()).unwrap();
            let (dw, db, dx) = linear_backward(&w, &x, &dy).unwrap();
            (
                loss,
                vec![dw.data().to_vec(), db.data().to_vec(), dx.data().to_vec()],
            )
        };
        let report = grad_check(f, &[w0, b0, x0], 1e-6);
        assert!(report.passed, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn layer_norm_constant_input_gives_bias() {
        let x = vec![5.0; 6];
        let gain = vec![2.0; 6];
        let bias: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let (y, _) = layer_norm_forward(&x, &gain, &bias).unwrap();
        // Zero variance: normalized values are 0, output is the bias.
        for (a, b) in y.iter().zip(bias.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_near_identity_on_standardized_input() {
        // Already zero-mean unit-variance input with unit gain, zero bias.
        let x = vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let gain = vec![1.0; 8];
        let bias = vec![0.0; 8];
        let (y, _) = layer_norm_forward(&x, &gain, &bias).unwrap();
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let d = 8;
        let x0 = rand_vec(&mut rng, d);
        let g0 = rand_vec(&mut rng, d);
        let b0 = rand_vec(&mut rng, d);
        let targets = rand_vec(&mut rng, d);
        let f = move |params: &[Vec<f64>]| {
            let (y, cache) = layer_norm_forward(&params[0], &params[1], &params[2]).unwrap();
            let loss: f64 = y
                .iter()
                .zip(targets.iter())
                .map(|(a, t)| (a - t) * (a - t))
                .sum();
            let dy: Vec<f64> = y
                .iter()
                .zip(targets.iter())
                .map(|(a, t)| 2.0 * (a - t))
                .collect();
            let (dx, dg, db) = layer_norm_backward(&cache, &params[1], &dy);
            (loss, vec![dx, dg, db])
        };
        let report = grad_check(f, &[x0, g0, b0], 1e-6);
        assert!(report.passed, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let n = 7;
        let p = softmax(&vec![3.25; n]);
        for v in &p {
            assert!((v - 1.0 / n as f64).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let logits = vec![0.3, -1.2, 4.0, 2.2];
        let shifted: Vec<f64> = logits.iter().map(|v| v + 100.0).collect();
        let a = softmax(&logits);
        let b = softmax(&shifted);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_idempotent_and_zero_guard() {
        let (y, _) = l2_normalize(&[3.0, 4.0]).unwrap();
        let (y2, n2) = l2_normalize(&y).unwrap();
        assert!((n2 - 1.0).abs() < 1e-12);
        for (a, b) in y.iter().zip(y2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(l2_normalize(&[0.0, 0.0]), Err(NumericsError::ZeroVector));
    }

    #[test]
    fn log_sum_exp_reference_and_large_inputs() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for _ in 0..50 {
            let v = rand_vec(&mut rng, 9)
                .into_iter()
                .map(|x| x * 20.0)
                .collect::<Vec<_>>();
            let direct = v.iter().map(|x| x.exp()).sum::<f64>().ln();
            assert!((log_sum_exp(&v) - direct).abs() < 1e-12);
        }
        // Entries up to 1e4 stay finite.
        assert!(log_sum_exp(&[1e4, 1e4 - 5.0]).is_finite());
    }

    #[test]
    fn elementwise_backwards_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(19);
        let d = 6;
        // relu -> l2_normalize -> softmax -> lse chain, differentiated by hand.
        let x0: Vec<f64> = rand_vec(&mut rng, d)
            .into_iter()
            .map(|v| v + 0.1) // keep away from the relu kink
            .collect();
        let f = |params: &[Vec<f64>]| {
            let a = relu(&params[0]);
            let (y, norm) = l2_normalize(&a).unwrap();
            let loss = log_sum_exp(&y);
            let dy = log_sum_exp_backward(&y, 1.0);
            let da = l2_normalize_backward(&y, norm, &dy);
            let dx = relu_backward(&params[0], &da);
            (loss, vec![dx])
        };
        let report = grad_check(f, &[x0], 1e-6);
        assert!(report.passed, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let weights = rand_vec(&mut rng, 5);
        let x0 = rand_vec(&mut rng, 5);
        let f = move |params: &[Vec<f64>]| {
            let p = softmax(&params[0]);
            let loss: f64 = p.iter().zip(weights.iter()).map(|(a, w)| a * w).sum();
            let dx = softmax_backward(&p, &weights);
            (loss, vec![dx])
        };
        let report = grad_check(f, &[x0], 1e-6);
        assert!(report.passed, "max rel err {}", report.max_rel_error);
    }
}
