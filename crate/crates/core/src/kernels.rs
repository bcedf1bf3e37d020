//! Forward and backward kernels for the spatial operators.
//!
//! Convolution is cross-correlation. Horizontal taps are summed in mirrored
//! pairs `(kx, kw-1-kx)` before the centre tap, so a stride-1 "same" convolution
//! with a left-right symmetric kernel maps a left-right symmetric input to an
//! output that is symmetric bit for bit.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

fn out_extent(len: usize, k: usize, g: ConvGeometry) -> Option<usize> {
    let padded = len + 2 * g.pad;
    (padded >= k).then(|| (padded - k) / g.stride + 1)
}

/// Output shape of a convolution, validating every precondition.
pub fn conv2d_shape(input: Shape, weight: Shape, bias: Shape, g: ConvGeometry) -> Result<Shape> {
    if g.stride == 0 {
        return Err(Error::invalid("conv2d stride must be at least 1"));
    }
    if input.c != weight.c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: input,
            right: weight,
        });
    }
    if bias.numel() != weight.n {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            left: weight,
            right: bias,
        });
    }
    let oh = out_extent(input.h, weight.h, g);
    let ow = out_extent(input.w, weight.w, g);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(Shape::new(input.n, weight.n, oh, ow)),
        _ => Err(Error::ShapeMismatch {
            op: "conv2d kernel larger than padded input",
            left: input,
            right: weight,
        }),
    }
}

/// Zero-padded copy of one input plane.
fn padded_plane<T: Scalar>(src: &[T], h: usize, w: usize, pad: usize, buf: &mut Vec<T>) {
    let pw = w + 2 * pad;
    buf.clear();
    buf.resize((h + 2 * pad) * pw, T::zero());
    for y in 0..h {
        let dst = (y + pad) * pw + pad;
        buf[dst..dst + w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    g: ConvGeometry,
) -> Result<Tensor<T>> {
    let ishape = input.shape();
    let wshape = weight.shape();
    let oshape = conv2d_shape(ishape, wshape, bias.shape(), g)?;
    let (kh, kw) = (wshape.h, wshape.w);
    let (oh, ow) = (oshape.h, oshape.w);
    let pw = ishape.w + 2 * g.pad;
    let s = g.stride;
    let wdata = weight.data();
    let mut out = vec![T::zero(); oshape.numel()];
    let mut padded: Vec<Vec<T>> = Vec::with_capacity(ishape.c);
    let mut rowacc = vec![T::zero(); ow];

    for n in 0..ishape.n {
        padded.clear();
        for ci in 0..ishape.c {
            let mut buf = Vec::new();
            padded_plane(input.plane(n, ci), ishape.h, ishape.w, g.pad, &mut buf);
            padded.push(buf);
        }
        for co in 0..oshape.c {
            let b = bias.data()[co];
            let oplane = &mut out[oshape.offset(n, co, 0, 0)..oshape.offset(n, co, 0, 0) + oh * ow];
            oplane.iter_mut().for_each(|v| *v = b);
            for (ci, xp) in padded.iter().enumerate() {
                for ky in 0..kh {
                    let krow = &wdata[wshape.offset(co, ci, ky, 0)..wshape.offset(co, ci, ky, 0) + kw];
                    for oy in 0..oh {
                        let xrow = &xp[(oy * s + ky) * pw..(oy * s + ky + 1) * pw];
                        rowacc.iter_mut().for_each(|v| *v = T::zero());
                        for k in 0..kw / 2 {
                            let (wl, wr) = (krow[k], krow[kw - 1 - k]);
                            let kr = kw - 1 - k;
                            if s == 1 {
                                for (ox, acc) in rowacc.iter_mut().enumerate() {
                                    *acc = *acc + (wl * xrow[ox + k] + wr * xrow[ox + kr]);
                                }
                            } else {
                                for (ox, acc) in rowacc.iter_mut().enumerate() {
                                    *acc = *acc + (wl * xrow[ox * s + k] + wr * xrow[ox * s + kr]);
                                }
                            }
                        }
                        if kw % 2 == 1 {
                            let k = kw / 2;
                            let wc = krow[k];
                            for (ox, acc) in rowacc.iter_mut().enumerate() {
                                *acc = *acc + wc * xrow[ox * s + k];
                            }
                        }
                        let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                        for (o, a) in orow.iter_mut().zip(&rowacc) {
                            *o = *o + *a;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(oshape, out)
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: ConvGeometry,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let ishape = input.shape();
    let wshape = weight.shape();
    let oshape = grad_out.shape();
    let (kh, kw) = (wshape.h, wshape.w);
    let (oh, ow) = (oshape.h, oshape.w);
    let (ph, pw) = (ishape.h + 2 * g.pad, ishape.w + 2 * g.pad);
    let s = g.stride;
    let wdata = weight.data();

    let mut gx = vec![T::zero(); ishape.numel()];
    let mut gw = vec![T::zero(); wshape.numel()];
    let mut gb = vec![T::zero(); wshape.n];
    let mut xp = Vec::new();
    let mut gxp = vec![T::zero(); ph * pw];

    for n in 0..ishape.n {
        for co in 0..oshape.c {
            gb[co] = gb[co] + grad_out.plane(n, co).iter().copied().sum::<T>();
        }
        for ci in 0..ishape.c {
            padded_plane(input.plane(n, ci), ishape.h, ishape.w, g.pad, &mut xp);
            gxp.iter_mut().for_each(|v| *v = T::zero());
            for co in 0..oshape.c {
                let gplane = grad_out.plane(n, co);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = wshape.offset(co, ci, ky, kx);
                        let wv = wdata[widx];
                        let mut dot = T::zero();
                        for oy in 0..oh {
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let base = (oy * s + ky) * pw + kx;
                            if s == 1 {
                                let xrow = &xp[base..base + ow];
                                let gxrow = &mut gxp[base..base + ow];
                                for ((gv, xv), gxv) in grow.iter().zip(xrow).zip(gxrow.iter_mut()) {
                                    dot = dot + *gv * *xv;
                                    *gxv = *gxv + *gv * wv;
                                }
                            } else {
                                for (ox, gv) in grow.iter().enumerate() {
                                    let idx = base + ox * s;
                                    dot = dot + *gv * xp[idx];
                                    gxp[idx] = gxp[idx] + *gv * wv;
                                }
                            }
                        }
                        gw[widx] = gw[widx] + dot;
                    }
                }
            }
            let dst = ishape.offset(n, ci, 0, 0);
            for y in 0..ishape.h {
                let src = (y + g.pad) * pw + g.pad;
                gx[dst + y * ishape.w..dst + (y + 1) * ishape.w]
                    .copy_from_slice(&gxp[src..src + ishape.w]);
            }
        }
    }
    (
        Tensor::new(ishape, gx).expect("input gradient shape"),
        Tensor::new(wshape, gw).expect("weight gradient shape"),
        Tensor::new(Shape::new(1, wshape.n, 1, 1), gb).expect("bias gradient shape"),
    )
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let out = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    Tensor::from_fn(out, |n, c, y, xx| x.at(n, c, y / 2, xx / 2))
}

pub fn upsample2x_backward<T: Scalar>(grad: &Tensor<T>) -> Tensor<T> {
    let s = grad.shape();
    let out = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    Tensor::from_fn(out, |n, c, y, x| {
        (grad.at(n, c, 2 * y, 2 * x) + grad.at(n, c, 2 * y, 2 * x + 1))
            + (grad.at(n, c, 2 * y + 1, 2 * x) + grad.at(n, c, 2 * y + 1, 2 * x + 1))
    })
}

/// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avgpool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h < 2 || s.w < 2 {
        return Err(Error::invalid(format!("avgpool2 needs at least 2×2 input, got {s}")));
    }
    let out = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let q = T::narrow(0.25);
    Ok(Tensor::from_fn(out, |n, c, y, xx| {
        ((x.at(n, c, 2 * y, 2 * xx) + x.at(n, c, 2 * y, 2 * xx + 1))
            + (x.at(n, c, 2 * y + 1, 2 * xx) + x.at(n, c, 2 * y + 1, 2 * xx + 1)))
            * q
    }))
}

pub fn avgpool2_backward<T: Scalar>(grad: &Tensor<T>, input: Shape) -> Tensor<T> {
    let q = T::narrow(0.25);
    let gs = grad.shape();
    Tensor::from_fn(input, |n, c, y, x| {
        let (oy, ox) = (y / 2, x / 2);
        if oy < gs.h && ox < gs.w {
            grad.at(n, c, oy, ox) * q
        } else {
            T::zero()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAME: ConvGeometry = ConvGeometry { stride: 1, pad: 0 };

    #[test]
    fn scalar_kernel_scales_input() {
        let x = Tensor::<f32>::from_plane(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::<f32>::full(Shape::new(1, 1, 1, 1), 2.0);
        let b = Tensor::<f32>::zeros(Shape::new(1, 1, 1, 1));
        let y = conv2d(&x, &w, &b, SAME).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn zero_input_yields_bias() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 5, 5));
        let w = Tensor::<f32>::full(Shape::new(3, 2, 3, 3), 0.7);
        let b = Tensor::<f32>::from_f64(Shape::new(1, 3, 1, 1), &[0.5, -1.0, 2.0]).unwrap();
        let y = conv2d(&x, &w, &b, ConvGeometry { stride: 1, pad: 1 }).unwrap();
        for c in 0..3 {
            assert!(y.plane(0, c).iter().all(|&v| v == b.data()[c]));
        }
    }

    #[test]
    fn output_size_follows_floor_formula() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 7, 6));
        let w = Tensor::<f32>::zeros(Shape::new(4, 2, 3, 2));
        let b = Tensor::<f32>::zeros(Shape::new(1, 4, 1, 1));
        let y = conv2d(&x, &w, &b, ConvGeometry { stride: 2, pad: 1 }).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, (7 + 2 - 3) / 2 + 1, (6 + 2 - 2) / 2 + 1));
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::<f32>::zeros(Shape::new(1, 3, 3, 3));
        let b = Tensor::<f32>::zeros(Shape::new(1, 1, 1, 1));
        let msg = conv2d(&x, &w, &b, SAME).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn symmetric_kernel_preserves_mirror_symmetry_bitwise() {
        let w = 9;
        let x = Tensor::<f32>::from_fn(Shape::new(1, 2, 6, w), |_, c, y, xx| {
            let m = xx.min(w - 1 - xx) as f32;
            (0.37 * m + 0.11 * y as f32 + c as f32).sin()
        });
        let k = Tensor::<f32>::from_fn(Shape::new(3, 2, 3, 3), |o, c, y, xx| {
            let m = xx.min(2 - xx) as f32;
            (1.3 * m - 0.7 * y as f32 + 0.21 * (o * 2 + c) as f32).cos()
        });
        let b = Tensor::<f32>::from_f64(Shape::new(1, 3, 1, 1), &[0.1, -0.2, 0.3]).unwrap();
        let y = conv2d(&x, &k, &b, ConvGeometry { stride: 1, pad: 1 }).unwrap();
        assert!(y.hflip().bits_eq(&y));
    }

    #[test]
    fn upsample_and_pool_backward_shapes() {
        let x = Tensor::<f32>::from_fn(Shape::new(1, 1, 2, 2), |_, _, y, x| (y * 2 + x) as f32);
        let up = upsample2x(&x);
        assert_eq!(up.at(0, 0, 3, 2), 3.0);
        let back = upsample2x_backward(&Tensor::<f32>::ones(up.shape()));
        assert!(back.data().iter().all(|&v| v == 4.0));
        let pooled = avgpool2(&up).unwrap();
        assert_eq!(pooled, x);
    }
}
