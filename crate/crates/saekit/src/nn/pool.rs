//! Max pooling and the 1x1 adaptive average pool.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{expect_rank4, PoolGeom};

/// Max pool with zero-influence padding: padded cells never win a window.
/// Returns the pooled map and, per output element, the flat index into the
/// input buffer of the winning cell. Ties break to the lowest flat index
/// because the window scan is ascending and only a strictly greater value
/// displaces the current winner.
pub fn maxpool2d<E: Scalar>(x: &Tensor<E>, g: &PoolGeom) -> Result<(Tensor<E>, Vec<usize>)> {
    g.validate()?;
    let (n, c, h, w) = expect_rank4("maxpool2d", x)?;
    let (oh, ow) = g.out_hw(h, w)?;
    let (kh, kw, s, p) = (g.kh, g.kw, g.stride, g.padding);
    let planes = n * c;
    let mut out = vec![E::ZERO; planes * oh * ow];
    let mut arg = vec![0usize; planes * oh * ow];
    let xd = x.data();

    out.par_chunks_mut(oh * ow)
        .zip(arg.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(plane, (ochunk, achunk))| {
            let base = plane * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best: Option<(E, usize)> = None;
                    for u in 0..kh {
                        let y = (oi * s + u) as isize - p as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let xx = (oj * s + v) as isize - p as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let idx = base + (y as usize) * w + xx as usize;
                            let val = xd[idx];
                            match best {
                                None => best = Some((val, idx)),
                                Some((bv, _)) if val > bv => best = Some((val, idx)),
                                _ => {}
                            }
                        }
                    }
                    // geometry validation guarantees a real cell in every window
                    let (bv, bi) = best.expect("window without valid cells");
                    ochunk[oi * ow + oj] = bv;
                    achunk[oi * ow + oj] = bi;
                }
            }
        });
    Ok((Tensor::from_raw(vec![n, c, oh, ow], out), arg))
}

/// Routes each output gradient to its argmax cell. Overlapping windows that
/// picked the same cell accumulate.
pub fn maxpool2d_backward<E: Scalar>(
    in_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<E>,
) -> Result<Tensor<E>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::InvalidShape {
            op: "maxpool2d_backward",
            shape: grad_out.shape().to_vec(),
            reason: format!("{} gradients for {} argmax entries", grad_out.len(), argmax.len()),
        });
    }
    let per_plane_in = in_shape[2] * in_shape[3];
    let per_plane_out = grad_out.shape()[2] * grad_out.shape()[3];
    let mut dx = vec![E::ZERO; in_shape.iter().product()];
    let god = grad_out.data();
    dx.par_chunks_mut(per_plane_in)
        .enumerate()
        .for_each(|(plane, dchunk)| {
            let base_in = plane * per_plane_in;
            let base_out = plane * per_plane_out;
            for t in 0..per_plane_out {
                dchunk[argmax[base_out + t] - base_in] += god[base_out + t];
            }
        });
    Ok(Tensor::from_raw(in_shape.to_vec(), dx))
}

/// Global average pool to 1x1: the mean of each N x C plane.
pub fn adaptive_avgpool_1x1<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, c, h, w) = expect_rank4("adaptive_avgpool", x)?;
    let hw = E::from_f64((h * w) as f64);
    let mut out = vec![E::ZERO; n * c];
    for (plane, o) in out.iter_mut().enumerate() {
        let base = plane * h * w;
        let mut acc = E::ZERO;
        for t in 0..h * w {
            acc += x.data()[base + t];
        }
        *o = acc / hw;
    }
    Ok(Tensor::from_raw(vec![n, c, 1, 1], out))
}

/// Spreads each plane's gradient uniformly over its pixels.
pub fn adaptive_avgpool_1x1_backward<E: Scalar>(
    in_shape: &[usize],
    grad_out: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    if grad_out.shape() != [n, c, 1, 1] {
        return Err(Error::ShapeMismatch {
            op: "adaptive_avgpool_backward",
            lhs: vec![n, c, 1, 1],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let hw = E::from_f64((h * w) as f64);
    let mut dx = vec![E::ZERO; n * c * h * w];
    for plane in 0..n * c {
        let g = grad_out.data()[plane] / hw;
        for t in 0..h * w {
            dx[plane * h * w + t] = g;
        }
    }
    Ok(Tensor::from_raw(in_shape.to_vec(), dx))
}
