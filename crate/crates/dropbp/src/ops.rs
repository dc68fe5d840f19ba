//! Primitive kernels: every forward has a hand-written backward, and every
//! kernel meters its flops. Backward math is validated against central
//! finite differences in the test suite.

use ndarray::linalg::general_mat_mul;

use crate::error::{Error, Result};
use crate::flops::{self, FlopsMeter};
use crate::tensor::Tensor;

/// Layer-norm stabilizer for zero-variance rows.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Target id meaning "no loss at this position".
pub const IGNORE_TARGET: u32 = u32::MAX;

fn check_matmul(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if !a.is_matrix() || !b.is_matrix() {
        return Err(Error::Dimension("matmul expects 2-d tensors".into()));
    }
    if a.cols() != b.rows() {
        return Err(Error::Dimension(format!(
            "matmul inner dims disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((a.rows(), a.cols(), b.cols()))
}

/// out = a * b, metering 2mkn forward flops.
pub fn matmul_forward(a: &Tensor, b: &Tensor, meter: &mut FlopsMeter) -> Result<Tensor> {
    let (m, k, n) = check_matmul(a, b)?;
    let mut out = Tensor::zeros(vec![m, n]);
    general_mat_mul(1.0, &a.view2(), &b.view2(), 0.0, &mut out.view2_mut());
    meter.add_forward(flops::matmul_fwd(m, k, n));
    Ok(out)
}

/// grad_a = grad_out * b^T (the input-gradient side of a matmul backward).
pub fn matmul_grad_left(grad_out: &Tensor, b: &Tensor, meter: &mut FlopsMeter) -> Result<Tensor> {
    if grad_out.cols() != b.cols() {
        return Err(Error::Dimension(format!(
            "grad_left: {:?} vs {:?}",
            grad_out.shape(),
            b.shape()
        )));
    }
    let (m, n, k) = (grad_out.rows(), grad_out.cols(), b.rows());
    let mut out = Tensor::zeros(vec![m, k]);
    general_mat_mul(
        1.0,
        &grad_out.view2(),
        &b.view2().reversed_axes(),
        0.0,
        &mut out.view2_mut(),
    );
    meter.add_backward(flops::matmul_grad_one(m, k, n));
    Ok(out)
}

/// grad_b = a^T * grad_out (the parameter-gradient side of a matmul backward).
pub fn matmul_grad_right(a: &Tensor, grad_out: &Tensor, meter: &mut FlopsMeter) -> Result<Tensor> {
    if a.rows() != grad_out.rows() {
        return Err(Error::Dimension(format!(
            "grad_right: {:?} vs {:?}",
            a.shape(),
            grad_out.shape()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), grad_out.cols());
    let mut out = Tensor::zeros(vec![k, n]);
    general_mat_mul(
        1.0,
        &a.view2().reversed_axes(),
        &grad_out.view2(),
        0.0,
        &mut out.view2_mut(),
    );
    meter.add_backward(flops::matmul_grad_one(m, k, n));
    Ok(out)
}

/// Plain product a * b executed as part of a backward pass (attention score
/// gradients), metered to the backward counter.
pub fn matmul_product_backward(a: &Tensor, b: &Tensor, meter: &mut FlopsMeter) -> Result<Tensor> {
    let (m, k, n) = check_matmul(a, b)?;
    let mut out = Tensor::zeros(vec![m, n]);
    general_mat_mul(1.0, &a.view2(), &b.view2(), 0.0, &mut out.view2_mut());
    meter.add_backward(flops::matmul_grad_one(m, k, n));
    Ok(out)
}

/// Full matmul backward: both operand gradients, 4mkn backward flops.
pub fn matmul_backward(
    grad_out: &Tensor,
    a: &Tensor,
    b: &Tensor,
    meter: &mut FlopsMeter,
) -> Result<(Tensor, Tensor)> {
    let (m, k, n) = check_matmul(a, b)?;
    if grad_out.shape() != [m, n] {
        return Err(Error::Dimension(format!(
            "matmul backward: grad shape {:?}, expected [{m}, {n}]",
            grad_out.shape()
        )));
    }
    let grad_a = matmul_grad_left(grad_out, b, meter)?;
    let grad_b = matmul_grad_right(a, grad_out, meter)?;
    Ok((grad_a, grad_b))
}

/// Elementwise sum, metered as one forward pass.
pub fn add(a: &Tensor, b: &Tensor, meter: &mut FlopsMeter) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "add: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
    meter.add_forward(flops::add(a.len()));
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// Activations a layer-norm backward reads.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    /// Normalized input, pre-affine.
    pub x_hat: Tensor,
    /// Per-row 1/sqrt(var + eps).
    pub inv_std: Tensor,
}

/// Row-wise layer norm with affine parameters.
pub fn layer_norm_forward(
    x: &Tensor,
    scale: &Tensor,
    bias: &Tensor,
    meter: &mut FlopsMeter,
) -> Result<(Tensor, LayerNormCache)> {
    let (rows, cols) = (x.rows(), x.cols());
    if scale.len() != cols || bias.len() != cols {
        return Err(Error::Dimension(format!(
            "layer_norm: {cols} cols vs scale {} / bias {}",
            scale.len(),
            bias.len()
        )));
    }
    let mut y = vec![0.0; rows * cols];
    let mut x_hat = vec![0.0; rows * cols];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = istd;
        for c in 0..cols {
            let h = (row[c] - mean) * istd;
            x_hat[r * cols + c] = h;
            y[r * cols + c] = scale.data()[c] * h + bias.data()[c];
        }
    }
    meter.add_forward(flops::layer_norm_fwd(rows * cols));
    Ok((
        Tensor::from_parts(vec![rows, cols], y),
        LayerNormCache {
            x_hat: Tensor::from_parts(vec![rows, cols], x_hat),
            inv_std: Tensor::from_parts(vec![rows], inv_std),
        },
    ))
}

/// Returns (dx, dscale, dbias).
pub fn layer_norm_backward(
    dy: &Tensor,
    scale: &Tensor,
    cache: &LayerNormCache,
    meter: &mut FlopsMeter,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, cols) = (dy.rows(), dy.cols());
    if cache.x_hat.shape() != dy.shape() {
        return Err(Error::Dimension("layer_norm backward cache mismatch".into()));
    }
    let mut dx = vec![0.0; rows * cols];
    let mut dscale = vec![0.0; cols];
    let mut dbias = vec![0.0; cols];
    for r in 0..rows {
        let istd = cache.inv_std.data()[r];
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for c in 0..cols {
            let i = r * cols + c;
            let g = dy.data()[i];
            let xh = cache.x_hat.data()[i];
            dbias[c] += g;
            dscale[c] += g * xh;
            let dxh = g * scale.data()[c];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
        }
        let mean_dxh = sum_dxh / cols as f64;
        let mean_dxh_xh = sum_dxh_xh / cols as f64;
        for c in 0..cols {
            let i = r * cols + c;
            let dxh = dy.data()[i] * scale.data()[c];
            dx[i] = istd * (dxh - mean_dxh - cache.x_hat.data()[i] * mean_dxh_xh);
        }
    }
    meter.add_backward(flops::layer_norm_bwd(rows * cols));
    Ok((
        Tensor::from_parts(vec![rows, cols], dx),
        Tensor::from_parts(vec![cols], dscale),
        Tensor::from_parts(vec![cols], dbias),
    ))
}

/// Row-wise softmax. Very negative entries (masked positions) come out as
/// exactly zero probability.
pub fn softmax_forward(x: &Tensor, meter: &mut FlopsMeter) -> Result<Tensor> {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..cols {
            let e = (row[c] - max).exp();
            out[r * cols + c] = e;
            sum += e;
        }
        if sum <= 0.0 || !sum.is_finite() {
            return Err(Error::Numeric(format!("softmax row {r} degenerate")));
        }
        for c in 0..cols {
            out[r * cols + c] /= sum;
        }
    }
    meter.add_forward(flops::softmax_fwd(rows * cols));
    Ok(Tensor::from_parts(vec![rows, cols], out))
}

/// dx_i = p_i * (dp_i - sum_j p_j dp_j), per row.
pub fn softmax_backward(probs: &Tensor, dprobs: &Tensor, meter: &mut FlopsMeter) -> Result<Tensor> {
    if probs.shape() != dprobs.shape() {
        return Err(Error::Dimension("softmax backward shape mismatch".into()));
    }
    let (rows, cols) = (probs.rows(), probs.cols());
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        let mut dot = 0.0;
        for c in 0..cols {
            let i = r * cols + c;
            dot += probs.data()[i] * dprobs.data()[i];
        }
        for c in 0..cols {
            let i = r * cols + c;
            dx[i] = probs.data()[i] * (dprobs.data()[i] - dot);
        }
    }
    meter.add_backward(flops::softmax_bwd(rows * cols));
    Ok(Tensor::from_parts(probs.shape().to_vec(), dx))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu_forward(x: &Tensor, meter: &mut FlopsMeter) -> Tensor {
    let data = x.iter().map(|&v| gelu_scalar(v)).collect();
    meter.add_forward(flops::gelu_fwd(x.len()));
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Needs the pre-activation input.
pub fn gelu_backward(x: &Tensor, dy: &Tensor, meter: &mut FlopsMeter) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return Err(Error::Dimension("gelu backward shape mismatch".into()));
    }
    let data = x
        .iter()
        .zip(dy.iter())
        .map(|(&v, &g)| gelu_grad_scalar(v) * g)
        .collect();
    meter.add_backward(flops::gelu_bwd(x.len()));
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Gather rows of `table` for each id.
pub fn embedding_forward(table: &Tensor, ids: &[u32], meter: &mut FlopsMeter) -> Result<Tensor> {
    let (vocab, dim) = (table.rows(), table.cols());
    let mut out = vec![0.0; ids.len() * dim];
    for (i, &id) in ids.iter().enumerate() {
        if id as usize >= vocab {
            return Err(Error::Input(format!(
                "token id {id} out of range (vocab {vocab})"
            )));
        }
        let row = &table.data()[id as usize * dim..(id as usize + 1) * dim];
        out[i * dim..(i + 1) * dim].copy_from_slice(row);
    }
    meter.add_forward(flops::embedding_fwd(ids.len() * dim));
    Ok(Tensor::from_parts(vec![ids.len(), dim], out))
}

/// Scatter-add of the output gradient into a dense table gradient.
pub fn embedding_backward(
    dout: &Tensor,
    ids: &[u32],
    vocab: usize,
    meter: &mut FlopsMeter,
) -> Result<Tensor> {
    let dim = dout.cols();
    if dout.rows() != ids.len() {
        return Err(Error::Dimension("embedding backward rows != ids".into()));
    }
    let mut grad = vec![0.0; vocab * dim];
    for (i, &id) in ids.iter().enumerate() {
        let dst = &mut grad[id as usize * dim..(id as usize + 1) * dim];
        for c in 0..dim {
            dst[c] += dout.data()[i * dim + c];
        }
    }
    meter.add_backward(flops::embedding_bwd(ids.len() * dim));
    Ok(Tensor::from_parts(vec![vocab, dim], grad))
}

/// Softmax probabilities kept for the loss backward.
#[derive(Debug, Clone)]
pub struct CrossEntropyCache {
    pub probs: Tensor,
    pub counted: usize,
}

/// Mean token-level cross entropy over positions whose target is not
/// IGNORE_TARGET. Probabilities are computed for every row so the flop cost
/// does not depend on the mask.
pub fn cross_entropy_forward(
    logits: &Tensor,
    targets: &[u32],
    meter: &mut FlopsMeter,
) -> Result<(f64, CrossEntropyCache)> {
    let (rows, cols) = (logits.rows(), logits.cols());
    if targets.len() != rows {
        return Err(Error::Dimension(format!(
            "cross_entropy: {rows} rows vs {} targets",
            targets.len()
        )));
    }
    let mut probs = vec![0.0; rows * cols];
    let mut loss = 0.0;
    let mut counted = 0usize;
    for r in 0..rows {
        let row = &logits.data()[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..cols {
            let e = (row[c] - max).exp();
            probs[r * cols + c] = e;
            sum += e;
        }
        for c in 0..cols {
            probs[r * cols + c] /= sum;
        }
        let t = targets[r];
        if t != IGNORE_TARGET {
            if t as usize >= cols {
                return Err(Error::Input(format!(
                    "target {t} out of range (vocab {cols})"
                )));
            }
            loss -= (row[t as usize] - max - sum.ln()).max(f64::MIN);
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Input("cross_entropy: every target ignored".into()));
    }
    meter.add_forward(flops::cross_entropy_fwd(rows * cols));
    let loss = loss / counted as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("cross_entropy produced non-finite loss".into()));
    }
    Ok((
        loss,
        CrossEntropyCache {
            probs: Tensor::from_parts(vec![rows, cols], probs),
            counted,
        },
    ))
}

/// dlogits = (probs - onehot) / counted on counted rows, zero elsewhere.
pub fn cross_entropy_backward(
    cache: &CrossEntropyCache,
    targets: &[u32],
    meter: &mut FlopsMeter,
) -> Result<Tensor> {
    let (rows, cols) = (cache.probs.rows(), cache.probs.cols());
    if targets.len() != rows {
        return Err(Error::Dimension("cross_entropy backward targets".into()));
    }
    let scale = 1.0 / cache.counted as f64;
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        let t = targets[r];
        if t == IGNORE_TARGET {
            continue;
        }
        for c in 0..cols {
            let i = r * cols + c;
            let onehot = if c == t as usize { 1.0 } else { 0.0 };
            dx[i] = (cache.probs.data()[i] - onehot) * scale;
        }
    }
    meter.add_backward(flops::cross_entropy_bwd(rows * cols));
    Ok(Tensor::from_parts(vec![rows, cols], dx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meter() -> FlopsMeter {
        FlopsMeter::new()
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = matmul_forward(&eye, &b, &mut meter()).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let out = matmul_forward(&a, &b, &mut meter()).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_meter_delta() {
        let a = Tensor::zeros(vec![4, 8]);
        let b = Tensor::zeros(vec![8, 2]);
        let mut m = meter();
        matmul_forward(&a, &b, &mut m).unwrap();
        assert_eq!(m.forward(), 128); // 2*4*8*2
        let g = Tensor::zeros(vec![4, 2]);
        matmul_backward(&g, &a, &b, &mut m).unwrap();
        assert_eq!(m.backward(), 256); // 4*4*8*2
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        assert!(matches!(
            matmul_forward(&a, &b, &mut meter()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn matmul_backward_zero_grad() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let g = Tensor::zeros(vec![2, 2]);
        let (da, db) = matmul_backward(&g, &a, &b, &mut meter()).unwrap();
        assert!(da.iter().all(|&v| v == 0.0));
        assert!(db.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_backward_scalar_product_rule() {
        // m=k=n=1, a=2, b=3, grad=1: grad_a = 3, grad_b = 2.
        let a = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let b = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        let g = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let (da, db) = matmul_backward(&g, &a, &b, &mut meter()).unwrap();
        assert_eq!(da.data(), &[3.0]);
        assert_eq!(db.data(), &[2.0]);
    }

    #[test]
    fn softmax_uniform_input() {
        let x = Tensor::matrix(1, 4, vec![0.7; 4]).unwrap();
        let p = softmax_forward(&x, &mut meter()).unwrap();
        for &v in p.iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_masked_entries_are_exact_zero() {
        let x = Tensor::matrix(1, 3, vec![0.1, -1e30, 0.2]).unwrap();
        let p = softmax_forward(&x, &mut meter()).unwrap();
        assert_eq!(p.data()[1], 0.0);
        assert!((p.data()[0] + p.data()[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_statistics() {
        let x = Tensor::matrix(2, 8, (0..16).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let scale = Tensor::new(vec![8], vec![1.0; 8]).unwrap();
        let bias = Tensor::zeros(vec![8]);
        let (_, cache) = layer_norm_forward(&x, &scale, &bias, &mut meter()).unwrap();
        for r in 0..2 {
            let row = &cache.x_hat.data()[r * 8..(r + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            // eps shifts the variance slightly below 1
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_zero_variance_row() {
        let x = Tensor::matrix(1, 4, vec![2.5; 4]).unwrap();
        let scale = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let bias = Tensor::zeros(vec![4]);
        let (y, _) = layer_norm_forward(&x, &scale, &bias, &mut meter()).unwrap();
        y.ensure_finite("ln").unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_one_hot_prediction() {
        // Strongly peaked logits at the target: loss ~ 0.
        let logits = Tensor::matrix(1, 3, vec![80.0, 0.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy_forward(&logits, &[0], &mut meter()).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros(vec![2, 7]);
        let (loss, _) = cross_entropy_forward(&logits, &[3, 6], &mut meter()).unwrap();
        assert!((loss - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_hand_case() {
        // 2 tokens, vocab 2: logits [[ln 3, 0], [0, 0]], targets [0, 1].
        // p(correct) = 3/4 and 1/2, loss = -(ln(3/4) + ln(1/2)) / 2.
        let logits = Tensor::matrix(2, 2, vec![(3.0f64).ln(), 0.0, 0.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy_forward(&logits, &[0, 1], &mut meter()).unwrap();
        let expect = -(0.75f64.ln() + 0.5f64.ln()) / 2.0;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_respects_ignore() {
        let logits = Tensor::matrix(2, 4, vec![1.0, 0.0, 2.0, 0.5, 9.0, 0.0, 0.0, 0.0]).unwrap();
        let (loss_all, cache) =
            cross_entropy_forward(&logits, &[2, IGNORE_TARGET], &mut meter()).unwrap();
        let (loss_first, _) = cross_entropy_forward(
            &Tensor::matrix(1, 4, logits.data()[..4].to_vec()).unwrap(),
            &[2],
            &mut meter(),
        )
        .unwrap();
        assert!((loss_all - loss_first).abs() < 1e-12);
        let d = cross_entropy_backward(&cache, &[2, IGNORE_TARGET], &mut meter()).unwrap();
        assert!(d.data()[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_out_of_range() {
        let table = Tensor::zeros(vec![4, 2]);
        assert!(matches!(
            embedding_forward(&table, &[4], &mut meter()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn embedding_backward_scatters() {
        let d = Tensor::matrix(2, 2, vec![1.0, 2.0, 10.0, 20.0]).unwrap();
        let g = embedding_backward(&d, &[1, 1], 3, &mut meter()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 11.0, 22.0, 0.0, 0.0]);
    }
}
