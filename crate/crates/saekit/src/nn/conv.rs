//! Convolution kernels.
//!
//! `conv2d_direct` is the reference implementation: the literal nested-loop
//! cross-correlation. `conv2d` is the production entry point; it lowers to an
//! im2col matrix product (or a plain channel matmul for 1x1 kernels) and is
//! validated against the direct path in tests. Both accumulate each output
//! element in the same fixed (c, u, v) order, and parallelism only ever splits
//! work across independent output regions, so results do not depend on thread
//! count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{expect_rank4, ConvGeom, ConvTGeom};

fn validate_conv_inputs<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
    g: &ConvGeom,
) -> Result<(usize, usize, usize, usize)> {
    g.validate()?;
    let (n, c, h, wd) = expect_rank4("conv2d", x)?;
    if c != g.in_ch {
        return Err(Error::ChannelMismatch {
            op: "conv2d",
            expected: g.in_ch,
            got: c,
        });
    }
    if w.shape() != g.weight_shape().as_slice() {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: g.weight_shape(),
            rhs: w.shape().to_vec(),
        });
    }
    match (g.has_bias, b) {
        (true, Some(b)) if b.shape() == [g.out_ch] => {}
        (false, None) => {}
        (true, Some(b)) => {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: vec![g.out_ch],
                rhs: b.shape().to_vec(),
            })
        }
        (true, None) => {
            return Err(Error::InvalidConfig("conv2d: bias expected but missing".into()))
        }
        (false, Some(_)) => {
            return Err(Error::InvalidConfig("conv2d: bias given but geometry has none".into()))
        }
    }
    Ok((n, c, h, wd))
}

/// Reference convolution: nested loops, no lowering. Semantics live here.
pub fn conv2d_direct<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
    g: &ConvGeom,
) -> Result<Tensor<E>> {
    let (n, _, h, wd) = validate_conv_inputs(x, w, b, g)?;
    let (oh, ow) = g.out_hw(h, wd)?;
    let (kh, kw, s, p) = (g.kh, g.kw, g.stride, g.padding);
    let mut out = vec![E::ZERO; n * g.out_ch * oh * ow];
    let xd = x.data();
    let wdta = w.data();
    for ni in 0..n {
        for o in 0..g.out_ch {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = match b {
                        Some(b) => b.data()[o],
                        None => E::ZERO,
                    };
                    for c in 0..g.in_ch {
                        for u in 0..kh {
                            let y = (oi * s + u) as isize - p as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let xx = (oj * s + v) as isize - p as isize;
                                if xx < 0 || xx >= wd as isize {
                                    continue;
                                }
                                let xi = ((ni * g.in_ch + c) * h + y as usize) * wd + xx as usize;
                                let wi = ((o * g.in_ch + c) * kh + u) * kw + v;
                                acc += xd[xi] * wdta[wi];
                            }
                        }
                    }
                    out[((ni * g.out_ch + o) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![n, g.out_ch, oh, ow], out))
}

/// im2col buffer for one sample: rows are (c, u, v), columns are (oi, oj).
fn im2col<E: Scalar>(
    xs: &[E],
    (c_in, h, w): (usize, usize, usize),
    g: &ConvGeom,
    (oh, ow): (usize, usize),
    cols: &mut [E],
) {
    let (kh, kw, s, p) = (g.kh, g.kw, g.stride, g.padding);
    let ohw = oh * ow;
    for c in 0..c_in {
        for u in 0..kh {
            for v in 0..kw {
                let row = ((c * kh + u) * kw + v) * ohw;
                for oi in 0..oh {
                    let y = (oi * s + u) as isize - p as isize;
                    for oj in 0..ow {
                        let xx = (oj * s + v) as isize - p as isize;
                        cols[row + oi * ow + oj] =
                            if y < 0 || y >= h as isize || xx < 0 || xx >= w as isize {
                                E::ZERO
                            } else {
                                xs[(c * h + y as usize) * w + xx as usize]
                            };
                    }
                }
            }
        }
    }
}

/// Production convolution. Parallel over samples; per output element the
/// reduction runs in ascending (c, u, v) order, matching `conv2d_direct`.
pub fn conv2d<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
    g: &ConvGeom,
) -> Result<Tensor<E>> {
    let (n, _, h, wd) = validate_conv_inputs(x, w, b, g)?;
    let (oh, ow) = g.out_hw(h, wd)?;
    let ohw = oh * ow;
    let ckk = g.in_ch * g.kh * g.kw;
    let per_in = g.in_ch * h * wd;
    let per_out = g.out_ch * ohw;
    let mut out = vec![E::ZERO; n * per_out];
    let wdta = w.data();

    let one_by_one = g.kh == 1 && g.kw == 1 && g.padding == 0 && g.stride == 1;
    out.par_chunks_mut(per_out)
        .enumerate()
        .for_each(|(ni, ochunk)| {
            let xs = &x.data()[ni * per_in..(ni + 1) * per_in];
            let mut colbuf;
            let cols: &[E] = if one_by_one {
                xs // already C x HW
            } else {
                colbuf = vec![E::ZERO; ckk * ohw];
                im2col(xs, (g.in_ch, h, wd), g, (oh, ow), &mut colbuf);
                &colbuf
            };
            for o in 0..g.out_ch {
                let wrow = &wdta[o * ckk..(o + 1) * ckk];
                let orow = &mut ochunk[o * ohw..(o + 1) * ohw];
                if let Some(b) = b {
                    orow.fill(b.data()[o]);
                }
                for (k, &wk) in wrow.iter().enumerate() {
                    let crow = &cols[k * ohw..(k + 1) * ohw];
                    for (ov, &cv) in orow.iter_mut().zip(crow.iter()) {
                        *ov += wk * cv;
                    }
                }
            }
        });
    Ok(Tensor::from_raw(vec![n, g.out_ch, oh, ow], out))
}

/// Inverse of [`im2col`]: scatter-adds each column row back onto the image.
fn col2im_add<E: Scalar>(
    cols: &[E],
    (c_in, h, w): (usize, usize, usize),
    g: &ConvGeom,
    (oh, ow): (usize, usize),
    dx: &mut [E],
) {
    let (kh, kw, s, p) = (g.kh, g.kw, g.stride, g.padding);
    let ohw = oh * ow;
    for c in 0..c_in {
        for u in 0..kh {
            for v in 0..kw {
                let row = ((c * kh + u) * kw + v) * ohw;
                for oi in 0..oh {
                    let y = (oi * s + u) as isize - p as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let ybase = (c * h + y as usize) * w;
                    for oj in 0..ow {
                        let xx = (oj * s + v) as isize - p as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        dx[ybase + xx as usize] += cols[row + oi * ow + oj];
                    }
                }
            }
        }
    }
}

/// Pullback of [`conv2d`]: gradients for input, weight, and (if present) bias.
///
/// Lowered through the same column buffer as the forward pass: dw rows are
/// dot products of grad rows with column rows, and dx is the weight-transpose
/// product scattered back through `col2im_add`. Per-sample partials reduce in
/// ascending sample order, so results are independent of thread count.
pub fn conv2d_backward<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    g: &ConvGeom,
    grad_out: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Option<Tensor<E>>)> {
    let (n, _, h, wd) = expect_rank4("conv2d_backward", x)?;
    let (oh, ow) = g.out_hw(h, wd)?;
    if grad_out.shape() != [n, g.out_ch, oh, ow] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            lhs: vec![n, g.out_ch, oh, ow],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let ohw = oh * ow;
    let per_in = g.in_ch * h * wd;
    let per_out = g.out_ch * ohw;
    let ckk = g.in_ch * g.kh * g.kw;
    let god = grad_out.data();
    let xd = x.data();
    let wdta = w.data();
    let one_by_one = g.kh == 1 && g.kw == 1 && g.padding == 0 && g.stride == 1;

    let per_sample: Vec<(Vec<E>, Vec<E>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let xs = &xd[ni * per_in..(ni + 1) * per_in];
            let gs = &god[ni * per_out..(ni + 1) * per_out];
            let mut colbuf;
            let cols: &[E] = if one_by_one {
                xs
            } else {
                colbuf = vec![E::ZERO; ckk * ohw];
                im2col(xs, (g.in_ch, h, wd), g, (oh, ow), &mut colbuf);
                &colbuf
            };
            // dw[o][k] = <grad row o, column row k>
            let mut dw_p = vec![E::ZERO; g.out_ch * ckk];
            for o in 0..g.out_ch {
                let grow = &gs[o * ohw..(o + 1) * ohw];
                let dwrow = &mut dw_p[o * ckk..(o + 1) * ckk];
                for (k, dwk) in dwrow.iter_mut().enumerate() {
                    let crow = &cols[k * ohw..(k + 1) * ohw];
                    let mut acc = E::ZERO;
                    for (&gv, &cv) in grow.iter().zip(crow.iter()) {
                        acc += gv * cv;
                    }
                    *dwk = acc;
                }
            }
            // dcols[k][t] = sum_o w[o][k] grad[o][t], then scatter back.
            let mut dcols = vec![E::ZERO; ckk * ohw];
            for o in 0..g.out_ch {
                let grow = &gs[o * ohw..(o + 1) * ohw];
                let wrow = &wdta[o * ckk..(o + 1) * ckk];
                for (k, &wk) in wrow.iter().enumerate() {
                    let drow = &mut dcols[k * ohw..(k + 1) * ohw];
                    for (dv, &gv) in drow.iter_mut().zip(grow.iter()) {
                        *dv += wk * gv;
                    }
                }
            }
            let mut dx_s = vec![E::ZERO; per_in];
            if one_by_one {
                dx_s.copy_from_slice(&dcols);
            } else {
                col2im_add(&dcols, (g.in_ch, h, wd), g, (oh, ow), &mut dx_s);
            }
            (dx_s, dw_p)
        })
        .collect();

    let mut dx = Vec::with_capacity(n * per_in);
    let mut dw = vec![E::ZERO; g.out_ch * ckk];
    for (dx_s, dw_p) in per_sample {
        dx.extend_from_slice(&dx_s);
        for (d, p) in dw.iter_mut().zip(dw_p.iter()) {
            *d += *p;
        }
    }

    let db = if g.has_bias {
        let mut db = vec![E::ZERO; g.out_ch];
        for ni in 0..n {
            for o in 0..g.out_ch {
                let base = (ni * g.out_ch + o) * oh * ow;
                for t in 0..oh * ow {
                    db[o] += god[base + t];
                }
            }
        }
        Some(Tensor::from_raw(vec![g.out_ch], db))
    } else {
        None
    };

    Ok((
        Tensor::from_raw(vec![n, g.in_ch, h, wd], dx),
        Tensor::from_raw(g.weight_shape(), dw),
        db,
    ))
}

/// Transposed convolution, computed in gather form: each output pixel sums
/// the input positions that would have written to it under scatter semantics.
pub fn conv_transpose2d<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    g: &ConvTGeom,
) -> Result<Tensor<E>> {
    g.validate()?;
    let (n, c, h, wd) = expect_rank4("conv_transpose2d", x)?;
    if c != g.in_ch {
        return Err(Error::ChannelMismatch {
            op: "conv_transpose2d",
            expected: g.in_ch,
            got: c,
        });
    }
    if w.shape() != g.weight_shape().as_slice() {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose2d",
            lhs: g.weight_shape(),
            rhs: w.shape().to_vec(),
        });
    }
    let (oh, ow) = g.out_hw(h, wd);
    let (kh, kw, s) = (g.kh, g.kw, g.stride);
    let per_in = g.in_ch * h * wd;
    let per_out = g.out_ch * oh * ow;
    let xd = x.data();
    let wdta = w.data();
    let mut out = vec![E::ZERO; n * per_out];
    out.par_chunks_mut(per_out)
        .enumerate()
        .for_each(|(ni, ochunk)| {
            let xs = &xd[ni * per_in..(ni + 1) * per_in];
            for oc in 0..g.out_ch {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = E::ZERO;
                        for ic in 0..g.in_ch {
                            for u in 0..kh {
                                if y < u || (y - u) % s != 0 {
                                    continue;
                                }
                                let i = (y - u) / s;
                                if i >= h {
                                    continue;
                                }
                                for v in 0..kw {
                                    if xo < v || (xo - v) % s != 0 {
                                        continue;
                                    }
                                    let j = (xo - v) / s;
                                    if j >= wd {
                                        continue;
                                    }
                                    acc += xs[(ic * h + i) * wd + j]
                                        * wdta[((ic * g.out_ch + oc) * kh + u) * kw + v];
                                }
                            }
                        }
                        ochunk[(oc * oh + y) * ow + xo] = acc;
                    }
                }
            }
        });
    Ok(Tensor::from_raw(vec![n, g.out_ch, oh, ow], out))
}

/// Pullback of [`conv_transpose2d`]: (dx, dw).
pub fn conv_transpose2d_backward<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    g: &ConvTGeom,
    grad_out: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (n, _, h, wd) = expect_rank4("conv_transpose2d_backward", x)?;
    let (oh, ow) = g.out_hw(h, wd);
    if grad_out.shape() != [n, g.out_ch, oh, ow] {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose2d_backward",
            lhs: vec![n, g.out_ch, oh, ow],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let (kh, kw, s) = (g.kh, g.kw, g.stride);
    let per_in = g.in_ch * h * wd;
    let per_out = g.out_ch * oh * ow;
    let xd = x.data();
    let god = grad_out.data();
    let wdta = w.data();

    // every (i, u) pair lands in bounds: i*s + u <= (h-1)*s + k-1 = oh - 1
    let mut dx = vec![E::ZERO; n * per_in];
    dx.par_chunks_mut(per_in).enumerate().for_each(|(ni, dxs)| {
        let gs = &god[ni * per_out..(ni + 1) * per_out];
        for ic in 0..g.in_ch {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = E::ZERO;
                    for oc in 0..g.out_ch {
                        for u in 0..kh {
                            let y = i * s + u;
                            for v in 0..kw {
                                let xo = j * s + v;
                                acc += gs[(oc * oh + y) * ow + xo]
                                    * wdta[((ic * g.out_ch + oc) * kh + u) * kw + v];
                            }
                        }
                    }
                    dxs[(ic * h + i) * wd + j] += acc;
                }
            }
        }
    });

    let okk = g.out_ch * kh * kw;
    let mut dw = vec![E::ZERO; g.in_ch * okk];
    dw.par_chunks_mut(okk).enumerate().for_each(|(ic, dwrow)| {
        for ni in 0..n {
            let xs = &xd[ni * per_in..(ni + 1) * per_in];
            let gs = &god[ni * per_out..(ni + 1) * per_out];
            for i in 0..h {
                for j in 0..wd {
                    let xv = xs[(ic * h + i) * wd + j];
                    if xv == E::ZERO {
                        continue;
                    }
                    for oc in 0..g.out_ch {
                        for u in 0..kh {
                            let y = i * s + u;
                            for v in 0..kw {
                                let xo = j * s + v;
                                dwrow[(oc * kh + u) * kw + v] += xv * gs[(oc * oh + y) * ow + xo];
                            }
                        }
                    }
                }
            }
        }
    });

    Ok((
        Tensor::from_raw(vec![n, g.in_ch, h, wd], dx),
        Tensor::from_raw(g.weight_shape(), dw),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_hand_case_2x2_kernel() {
        // x = [[1,2],[3,4]], w = [[1,0],[0,1]] -> single output 1*1 + 4*1 = 5
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let g = ConvGeom::square(1, 1, 2, 1, 0);
        let out = conv2d(&x, &w, None, &g).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[5.0]);
        assert_eq!(conv2d_direct(&x, &w, None, &g).unwrap().data(), &[5.0]);
    }

    #[test]
    fn identity_1x1_conv_preserves_input() {
        let mut rng = SplitMix64::new(4);
        let x = Tensor::<f64>::uniform(vec![2, 3, 4, 4], -1.0, 1.0, &mut rng).unwrap();
        // weight [c_out, c_in, 1, 1] = identity over channels
        let mut wdata = vec![0.0; 9];
        for i in 0..3 {
            wdata[i * 3 + i] = 1.0;
        }
        let w = t(&[3, 3, 1, 1], &wdata);
        let g = ConvGeom::square(3, 3, 1, 1, 0);
        let out = conv2d(&x, &w, None, &g).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn stem_shape_7x7_s2_p3() {
        let x = Tensor::<f32>::zeros(vec![1, 3, 224, 224]).unwrap();
        let g = ConvGeom::square(3, 64, 7, 2, 3);
        let w = Tensor::<f32>::zeros(g.weight_shape()).unwrap();
        let out = conv2d(&x, &w, None, &g).unwrap();
        assert_eq!(out.shape(), &[1, 64, 112, 112]);
    }

    #[test]
    fn im2col_path_matches_direct_within_1e5_relative() {
        let mut rng = SplitMix64::new(12);
        for &(cin, cout, k, s, p, h) in &[
            (3usize, 8usize, 3usize, 1usize, 1usize, 9usize),
            (4, 6, 5, 2, 2, 11),
            (2, 4, 7, 2, 3, 16),
            (5, 5, 1, 2, 0, 8),
        ] {
            let x = Tensor::<f32>::uniform(vec![2, cin, h, h], -1.0, 1.0, &mut rng).unwrap();
            let g = ConvGeom::square(cin, cout, k, s, p).with_bias();
            let w = Tensor::<f32>::uniform(g.weight_shape(), -1.0, 1.0, &mut rng).unwrap();
            let b = Tensor::<f32>::uniform(vec![cout], -1.0, 1.0, &mut rng).unwrap();
            let fast = conv2d(&x, &w, Some(&b), &g).unwrap();
            let slow = conv2d_direct(&x, &w, Some(&b), &g).unwrap();
            for (a, bb) in fast.data().iter().zip(slow.data().iter()) {
                let denom = a.abs().max(bb.abs()).max(1e-5);
                assert!(
                    ((a - bb).abs() / denom) <= 1e-5,
                    "paths diverge: {a} vs {bb} (k={k} s={s} p={p})"
                );
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 4, 4]).unwrap();
        let g = ConvGeom::square(3, 4, 3, 1, 1);
        let w = Tensor::<f32>::zeros(g.weight_shape()).unwrap();
        assert!(matches!(
            conv2d(&x, &w, None, &g),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn conv_rejects_degenerate_output() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 2, 2]).unwrap();
        let g = ConvGeom::square(1, 1, 5, 1, 0);
        let w = Tensor::<f32>::zeros(g.weight_shape()).unwrap();
        assert!(matches!(
            conv2d(&x, &w, None, &g),
            Err(Error::DegenerateOutput { .. })
        ));
    }

    // Oracle: central finite differences on the direct forward path.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = SplitMix64::new(77);
        let g = ConvGeom::square(2, 3, 3, 2, 1).with_bias();
        let x = Tensor::<f64>::uniform(vec![2, 2, 5, 5], -1.0, 1.0, &mut rng).unwrap();
        let w = Tensor::<f64>::uniform(g.weight_shape(), -1.0, 1.0, &mut rng).unwrap();
        let b = Tensor::<f64>::uniform(vec![3], -1.0, 1.0, &mut rng).unwrap();
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            conv2d_direct(x, w, Some(b), &g).unwrap().sum_all()
        };
        let out = conv2d(&x, &w, Some(&b), &g).unwrap();
        let ones = Tensor::<f64>::ones(out.shape().to_vec()).unwrap();
        let (dx, dw, db) = conv2d_backward(&x, &w, &g, &ones).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-7, "dx[{i}]: {fd} vs {}", dx.data()[i]);
        }
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[i] += h;
            let mut wm = w.clone();
            wm.data_mut()[i] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - dw.data()[i]).abs() < 1e-7, "dw[{i}]");
        }
        let db = db.unwrap();
        for i in 0..b.len() {
            let mut bp = b.clone();
            bp.data_mut()[i] += h;
            let mut bm = b.clone();
            bm.data_mut()[i] -= h;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert!((fd - db.data()[i]).abs() < 1e-7, "db[{i}]");
        }
    }

    #[test]
    fn transposed_conv_scatter_of_single_pixel() {
        // one input pixel of value 1 stamps the whole 2x2 kernel
        let x = t(&[1, 1, 1, 1], &[1.0]);
        let w = Tensor::<f64>::ones(vec![1, 1, 2, 2]).unwrap();
        let g = ConvTGeom::square(1, 1, 2, 2);
        let out = conv_transpose2d(&x, &w, &g).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn transposed_conv_doubles_extent_with_k2_s2() {
        let x = Tensor::<f32>::zeros(vec![1, 4, 4, 4]).unwrap();
        let g = ConvTGeom::square(4, 2, 2, 2);
        let w = Tensor::<f32>::zeros(g.weight_shape()).unwrap();
        let out = conv_transpose2d(&x, &w, &g).unwrap();
        assert_eq!(out.shape(), &[1, 2, 8, 8]);
    }

    // Oracle: scatter-form reimplementation of the transposed conv.
    #[test]
    fn transposed_conv_matches_scatter_oracle() {
        let mut rng = SplitMix64::new(31);
        let g = ConvTGeom::square(3, 2, 2, 2);
        let x = Tensor::<f64>::uniform(vec![2, 3, 3, 4], -1.0, 1.0, &mut rng).unwrap();
        let w = Tensor::<f64>::uniform(g.weight_shape(), -1.0, 1.0, &mut rng).unwrap();
        let got = conv_transpose2d(&x, &w, &g).unwrap();

        let (n, h, wd) = (2, 3, 4);
        let (oh, ow) = g.out_hw(h, wd);
        let mut want = vec![0.0f64; n * g.out_ch * oh * ow];
        for ni in 0..n {
            for ic in 0..g.in_ch {
                for i in 0..h {
                    for j in 0..wd {
                        let xv = x.data()[((ni * g.in_ch + ic) * h + i) * wd + j];
                        for oc in 0..g.out_ch {
                            for u in 0..g.kh {
                                for v in 0..g.kw {
                                    let y = i * g.stride + u;
                                    let xo = j * g.stride + v;
                                    want[((ni * g.out_ch + oc) * oh + y) * ow + xo] += xv
                                        * w.data()[((ic * g.out_ch + oc) * g.kh + u) * g.kw + v];
                                }
                            }
                        }
                    }
                }
            }
        }
        for (a, b) in got.data().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_backward_matches_finite_differences() {
        let mut rng = SplitMix64::new(55);
        let g = ConvTGeom::square(2, 3, 2, 2);
        let x = Tensor::<f64>::uniform(vec![1, 2, 3, 3], -1.0, 1.0, &mut rng).unwrap();
        let w = Tensor::<f64>::uniform(g.weight_shape(), -1.0, 1.0, &mut rng).unwrap();
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
            conv_transpose2d(x, w, &g).unwrap().sum_all()
        };
        let out = conv_transpose2d(&x, &w, &g).unwrap();
        let ones = Tensor::<f64>::ones(out.shape().to_vec()).unwrap();
        let (dx, dw) = conv_transpose2d_backward(&x, &w, &g, &ones).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-7, "dx[{i}]");
        }
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[i] += h;
            let mut wm = w.clone();
            wm.data_mut()[i] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            assert!((fd - dw.data()[i]).abs() < 1e-7, "dw[{i}]");
        }
    }
}
