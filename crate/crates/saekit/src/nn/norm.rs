//! Batch normalization over N x C x H x W maps.
//!
//! Training mode normalizes with biased batch statistics (divide by m) and
//! maintains running statistics with the unbiased variance (divide by m - 1),
//! blended as running <- (1 - momentum) * running + momentum * batch_stat.
//! Eval mode normalizes with the running statistics. The training backward
//! pass differentiates through the batch mean and variance in full.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::expect_rank4;

/// What the backward pass needs from a training-mode forward.
#[derive(Debug, Clone)]
pub struct BnSaved<E: Scalar> {
    pub xhat: Tensor<E>,
    pub inv_std: Vec<E>,
}

/// Batch statistics surfaced so the caller can update running buffers.
#[derive(Debug, Clone)]
pub struct BnStats<E: Scalar> {
    pub mean: Vec<E>,
    pub var_unbiased: Vec<E>,
}

fn check_affine<E: Scalar>(
    op: &'static str,
    c: usize,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
) -> Result<()> {
    for t in [gamma, beta] {
        if t.shape() != [c] {
            return Err(Error::ChannelMismatch {
                op,
                expected: c,
                got: t.len(),
            });
        }
    }
    Ok(())
}

pub fn batchnorm2d_train<E: Scalar>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<(Tensor<E>, BnSaved<E>, BnStats<E>)> {
    let (n, c, h, w) = expect_rank4("batchnorm2d", x)?;
    check_affine("batchnorm2d", c, gamma, beta)?;
    let m = n * h * w;
    if m < 2 {
        return Err(Error::SingletonBatch(m));
    }
    let m_e = E::from_f64(m as f64);
    let eps_e = E::from_f64(eps);
    let hw = h * w;
    let chw = c * hw;
    let xd = x.data();

    let mut mean = vec![E::ZERO; c];
    let mut var = vec![E::ZERO; c];
    for ci in 0..c {
        let mut acc = E::ZERO;
        for ni in 0..n {
            let base = ni * chw + ci * hw;
            for t in 0..hw {
                acc += xd[base + t];
            }
        }
        mean[ci] = acc / m_e;
        let mu = mean[ci];
        let mut vacc = E::ZERO;
        for ni in 0..n {
            let base = ni * chw + ci * hw;
            for t in 0..hw {
                let d = xd[base + t] - mu;
                vacc += d * d;
            }
        }
        var[ci] = vacc / m_e;
    }

    let inv_std: Vec<E> = var.iter().map(|&v| E::ONE / (v + eps_e).sqrt()).collect();
    let mut xhat = vec![E::ZERO; xd.len()];
    let mut out = vec![E::ZERO; xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = ni * chw + ci * hw;
            let (mu, is) = (mean[ci], inv_std[ci]);
            let (ga, be) = (gamma.data()[ci], beta.data()[ci]);
            for t in 0..hw {
                let xh = (xd[base + t] - mu) * is;
                xhat[base + t] = xh;
                out[base + t] = ga * xh + be;
            }
        }
    }

    let bessel = E::from_f64(m as f64 / (m as f64 - 1.0));
    let var_unbiased = var.iter().map(|&v| v * bessel).collect();
    Ok((
        Tensor::from_raw(x.shape().to_vec(), out),
        BnSaved {
            xhat: Tensor::from_raw(x.shape().to_vec(), xhat),
            inv_std,
        },
        BnStats { mean, var_unbiased },
    ))
}

/// Full training-mode pullback, including the paths through the batch mean
/// and variance:
///   dx = gamma * inv_std * (g - mean(g) - xhat * mean(g * xhat))
/// with the means taken per channel over N, H, W.
pub fn batchnorm2d_train_backward<E: Scalar>(
    saved: &BnSaved<E>,
    gamma: &Tensor<E>,
    grad_out: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (n, c, h, w) = expect_rank4("batchnorm2d_backward", grad_out)?;
    if saved.xhat.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch {
            op: "batchnorm2d_backward",
            lhs: saved.xhat.shape().to_vec(),
            rhs: grad_out.shape().to_vec(),
        });
    }
    let hw = h * w;
    let chw = c * hw;
    let m_e = E::from_f64((n * hw) as f64);
    let xh = saved.xhat.data();
    let gd = grad_out.data();

    let mut dgamma = vec![E::ZERO; c];
    let mut dbeta = vec![E::ZERO; c];
    for ci in 0..c {
        let mut s1 = E::ZERO;
        let mut s2 = E::ZERO;
        for ni in 0..n {
            let base = ni * chw + ci * hw;
            for t in 0..hw {
                s1 += gd[base + t];
                s2 += gd[base + t] * xh[base + t];
            }
        }
        dbeta[ci] = s1;
        dgamma[ci] = s2;
    }

    let mut dx = vec![E::ZERO; gd.len()];
    for ci in 0..c {
        let g_mean = dbeta[ci] / m_e;
        let gx_mean = dgamma[ci] / m_e;
        let k = gamma.data()[ci] * saved.inv_std[ci];
        for ni in 0..n {
            let base = ni * chw + ci * hw;
            for t in 0..hw {
                dx[base + t] = k * (gd[base + t] - g_mean - xh[base + t] * gx_mean);
            }
        }
    }

    Ok((
        Tensor::from_raw(grad_out.shape().to_vec(), dx),
        Tensor::from_raw(vec![c], dgamma),
        Tensor::from_raw(vec![c], dbeta),
    ))
}

/// Eval-mode forward: a per-channel affine map using running statistics.
/// Also returns xhat and inv_std for the backward pass.
pub fn batchnorm2d_eval<E: Scalar>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &Tensor<E>,
    running_var: &Tensor<E>,
    eps: f64,
) -> Result<(Tensor<E>, Tensor<E>, Vec<E>)> {
    let (n, c, h, w) = expect_rank4("batchnorm2d", x)?;
    check_affine("batchnorm2d", c, gamma, beta)?;
    check_affine("batchnorm2d", c, running_mean, running_var)?;
    let eps_e = E::from_f64(eps);
    let hw = h * w;
    let chw = c * hw;
    let inv_std: Vec<E> = running_var
        .data()
        .iter()
        .map(|&v| E::ONE / (v + eps_e).sqrt())
        .collect();
    let mut xhat = vec![E::ZERO; x.len()];
    let mut out = vec![E::ZERO; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = ni * chw + ci * hw;
            let mu = running_mean.data()[ci];
            let is = inv_std[ci];
            let (ga, be) = (gamma.data()[ci], beta.data()[ci]);
            for t in 0..hw {
                let xh = (x.data()[base + t] - mu) * is;
                xhat[base + t] = xh;
                out[base + t] = ga * xh + be;
            }
        }
    }
    Ok((
        Tensor::from_raw(x.shape().to_vec(), out),
        Tensor::from_raw(x.shape().to_vec(), xhat),
        inv_std,
    ))
}

/// Eval-mode pullback: running statistics are constants, so dx is just
/// g * gamma * inv_std per channel.
pub fn batchnorm2d_eval_backward<E: Scalar>(
    xhat: &Tensor<E>,
    inv_std: &[E],
    gamma: &Tensor<E>,
    grad_out: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (n, c, h, w) = expect_rank4("batchnorm2d_backward", grad_out)?;
    let hw = h * w;
    let chw = c * hw;
    let gd = grad_out.data();
    let xh = xhat.data();
    let mut dx = vec![E::ZERO; gd.len()];
    let mut dgamma = vec![E::ZERO; c];
    let mut dbeta = vec![E::ZERO; c];
    for ci in 0..c {
        let k = gamma.data()[ci] * inv_std[ci];
        for ni in 0..n {
            let base = ni * chw + ci * hw;
            for t in 0..hw {
                dx[base + t] = gd[base + t] * k;
                dgamma[ci] += gd[base + t] * xh[base + t];
                dbeta[ci] += gd[base + t];
            }
        }
    }
    Ok((
        Tensor::from_raw(grad_out.shape().to_vec(), dx),
        Tensor::from_raw(vec![c], dgamma),
        Tensor::from_raw(vec![c], dbeta),
    ))
}
