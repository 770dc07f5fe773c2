//! Layer primitives: convolutions, batch normalization, pooling, linear maps,
//! ReLU, and softmax. Each operation comes as a pure forward function plus a
//! matching backward rule; the autodiff tape wires them together.
//!
//! Shape conventions: feature maps are N x C x H x W, linear inputs are
//! N x features. Convolution here is cross-correlation (no kernel flip) with
//! zero padding, and an output extent of floor((H + 2p - k) / s) + 1.

mod conv;
pub mod loss;
mod norm;
mod pool;

pub use conv::{
    conv2d, conv2d_backward, conv2d_direct, conv_transpose2d, conv_transpose2d_backward,
};
pub use norm::{
    batchnorm2d_eval, batchnorm2d_eval_backward, batchnorm2d_train, batchnorm2d_train_backward,
    BnSaved, BnStats,
};
pub use pool::{
    adaptive_avgpool_1x1, adaptive_avgpool_1x1_backward, maxpool2d, maxpool2d_backward,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Whether batch statistics (train) or running statistics (eval) drive
/// normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Output extent of a strided window op: floor((extent + 2 pad - k) / stride) + 1.
pub(crate) fn window_out(
    op: &'static str,
    extent: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < k {
        return Err(Error::DegenerateOutput {
            op,
            detail: format!("window {k} exceeds padded extent {padded}"),
        });
    }
    Ok((padded - k) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl ConvGeom {
    /// Square-kernel convolution without bias (the common case inside blocks,
    /// where a BatchNorm follows and absorbs any offset).
    pub fn square(in_ch: usize, out_ch: usize, k: usize, stride: usize, padding: usize) -> Self {
        ConvGeom {
            in_ch,
            out_ch,
            kh: k,
            kw: k,
            stride,
            padding,
            has_bias: false,
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.has_bias = true;
        self
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_ch, self.in_ch, self.kh, self.kw]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.out_ch == 0 || self.kh == 0 || self.kw == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig(format!(
                "conv geometry has a zero field: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            window_out("conv2d", h, self.kh, self.stride, self.padding)?,
            window_out("conv2d", w, self.kw, self.stride, self.padding)?,
        ))
    }
}

/// Transposed convolution geometry. Weights are laid out in_ch x out_ch x
/// kh x kw and the output extent is (H - 1) * stride + k. No bias: every use
/// in this kit feeds a concatenation followed by convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl ConvTGeom {
    pub fn square(in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Self {
        ConvTGeom {
            in_ch,
            out_ch,
            kh: k,
            kw: k,
            stride,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.in_ch, self.out_ch, self.kh, self.kw]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.out_ch == 0 || self.kh == 0 || self.kw == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig(format!(
                "transposed conv geometry has a zero field: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) * self.stride + self.kh, (w - 1) * self.stride + self.kw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolGeom {
    pub fn square(k: usize, stride: usize, padding: usize) -> Self {
        PoolGeom {
            kh: k,
            kw: k,
            stride,
            padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kh == 0 || self.kw == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig(format!(
                "pool geometry has a zero field: {self:?}"
            )));
        }
        // padding < kernel keeps at least one real cell in every window
        if self.padding >= self.kh || self.padding >= self.kw {
            return Err(Error::InvalidConfig(format!(
                "pool padding {} must be smaller than the kernel",
                self.padding
            )));
        }
        Ok(())
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            window_out("maxpool2d", h, self.kh, self.stride, self.padding)?,
            window_out("maxpool2d", w, self.kw, self.stride, self.padding)?,
        ))
    }
}

pub(crate) fn expect_rank4<'a, E: Scalar>(
    op: &'static str,
    x: &'a Tensor<E>,
) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            op,
            shape: s.to_vec(),
            reason: "expected rank 4 (N x C x H x W)".into(),
        });
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// max(x, 0), elementwise.
pub fn relu<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| v.maximum(E::ZERO))
}

/// ReLU pullback. The subgradient at exactly zero is taken to be zero, so
/// only strictly positive inputs pass gradient through.
pub fn relu_backward<E: Scalar>(x: &Tensor<E>, grad_out: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu_backward",
            lhs: x.shape().to_vec(),
            rhs: grad_out.shape().to_vec(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data().iter())
        .map(|(&v, &g)| if v > E::ZERO { g } else { E::ZERO })
        .collect();
    Ok(Tensor::from_raw(x.shape().to_vec(), data))
}

/// x W^T + b for x of shape N x in, W of shape out x in, b of shape out.
pub fn linear<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (n, d_in) = (x.shape()[0], x.shape()[1]);
    let d_out = w.shape()[0];
    if let Some(b) = b {
        if b.shape() != [d_out] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: vec![d_out],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let mut out = vec![E::ZERO; n * d_out];
    for i in 0..n {
        let row = &x.data()[i * d_in..(i + 1) * d_in];
        for o in 0..d_out {
            let wrow = &w.data()[o * d_in..(o + 1) * d_in];
            let mut acc = E::ZERO;
            for (a, bb) in row.iter().zip(wrow.iter()) {
                acc += *a * *bb;
            }
            if let Some(b) = b {
                acc += b.data()[o];
            }
            out[i * d_out + o] = acc;
        }
    }
    Ok(Tensor::from_raw(vec![n, d_out], out))
}

/// Pullback of [`linear`]: returns (dx, dw, db) with db present only when a
/// bias was in play.
pub fn linear_backward<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    has_bias: bool,
    grad_out: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Option<Tensor<E>>)> {
    let (n, d_in) = (x.shape()[0], x.shape()[1]);
    let d_out = w.shape()[0];
    if grad_out.shape() != [n, d_out] {
        return Err(Error::ShapeMismatch {
            op: "linear_backward",
            lhs: vec![n, d_out],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let mut dx = vec![E::ZERO; n * d_in];
    let mut dw = vec![E::ZERO; d_out * d_in];
    for i in 0..n {
        let grow = &grad_out.data()[i * d_out..(i + 1) * d_out];
        let xrow = &x.data()[i * d_in..(i + 1) * d_in];
        let dxrow = &mut dx[i * d_in..(i + 1) * d_in];
        for o in 0..d_out {
            let g = grow[o];
            let wrow = &w.data()[o * d_in..(o + 1) * d_in];
            for k in 0..d_in {
                dxrow[k] += g * wrow[k];
            }
            let dwrow = &mut dw[o * d_in..(o + 1) * d_in];
            for k in 0..d_in {
                dwrow[k] += g * xrow[k];
            }
        }
    }
    let db = if has_bias {
        let mut db = vec![E::ZERO; d_out];
        for i in 0..n {
            for o in 0..d_out {
                db[o] += grad_out.data()[i * d_out + o];
            }
        }
        Some(Tensor::from_raw(vec![d_out], db))
    } else {
        None
    };
    Ok((
        Tensor::from_raw(vec![n, d_in], dx),
        Tensor::from_raw(vec![d_out, d_in], dw),
        db,
    ))
}

/// Row-wise softmax for N x C inputs, with the usual max subtraction so huge
/// logits cannot overflow the exponentials.
pub fn softmax<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    if x.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "softmax",
            shape: x.shape().to_vec(),
            reason: "expected rank 2 (N x C)".into(),
        });
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![E::ZERO; n * c];
    for i in 0..n {
        let row = &x.data()[i * c..(i + 1) * c];
        let mut m = row[0];
        for &v in row {
            m = m.maximum(v);
        }
        let mut sum = E::ZERO;
        for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row.iter()) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in &mut out[i * c..(i + 1) * c] {
            *o /= sum;
        }
    }
    Ok(Tensor::from_raw(vec![n, c], out))
}

/// Pullback of softmax given its own output y: dx = y * (g - sum(g * y)) per row.
pub fn softmax_backward<E: Scalar>(y: &Tensor<E>, grad_out: &Tensor<E>) -> Result<Tensor<E>> {
    if y.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch {
            op: "softmax_backward",
            lhs: y.shape().to_vec(),
            rhs: grad_out.shape().to_vec(),
        });
    }
    let (n, c) = (y.shape()[0], y.shape()[1]);
    let mut dx = vec![E::ZERO; n * c];
    for i in 0..n {
        let yr = &y.data()[i * c..(i + 1) * c];
        let gr = &grad_out.data()[i * c..(i + 1) * c];
        let mut dot = E::ZERO;
        for (a, b) in gr.iter().zip(yr.iter()) {
            dot += *a * *b;
        }
        for k in 0..c {
            dx[i * c + k] = yr[k] * (gr[k] - dot);
        }
    }
    Ok(Tensor::from_raw(vec![n, c], dx))
}
