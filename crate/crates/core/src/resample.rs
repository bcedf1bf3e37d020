//! Bilinear resampling with half-pixel-centred coordinates.
//!
//! Pixel `i` covers `[i, i+1)` and has its centre at `i + 0.5`. A continuous
//! position `p` is sampled at index coordinate `p - 0.5`.

use crate::maps::ValidMask;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Index coordinates this close to an integer are snapped to it, so that
/// rotations by multiples of 90° are exact permutations.
const SNAP: f64 = 1e-6;

fn snap(u: f64) -> f64 {
    let r = u.round();
    if (u - r).abs() < SNAP {
        r
    } else {
        u
    }
}

/// Resizes every plane to `oh×ow`; source coordinates are clamped to the edge.
pub fn resize_bilinear<T: Scalar>(t: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let s = t.shape();
    let (sy, sx) = (s.h as f64 / oh as f64, s.w as f64 / ow as f64);
    let axis = |o: usize, scale: f64, len: usize| {
        let u = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, u - i0 as f64)
    };
    let ys: Vec<_> = (0..oh).map(|y| axis(y, sy, s.h)).collect();
    let xs: Vec<_> = (0..ow).map(|x| axis(x, sx, s.w)).collect();
    Tensor::from_fn(Shape::new(s.n, s.c, oh, ow), |n, c, y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let p = |yy, xx| t.at(n, c, yy, xx).widen();
        let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
        let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
        T::narrow(top * (1.0 - fy) + bottom * fy)
    })
}

/// Rotates every plane by `degrees` about the image centre. With rows growing
/// downwards, positive angles turn the content clockwise as displayed.
///
/// Reads outside the frame contribute 0. The returned mask is true where every
/// bilinear neighbour with non-zero weight lies inside the frame and is valid
/// in `src_mask` (all valid when `None`).
pub fn rotate<T: Scalar>(
    t: &Tensor<T>,
    degrees: f64,
    src_mask: Option<&ValidMask>,
) -> (Tensor<T>, ValidMask) {
    let s = t.shape();
    let (h, w) = (s.h, s.w);
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);

    struct Tap {
        idx: usize,
        weight: f64,
    }
    let mut taps: Vec<Vec<Tap>> = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for oy in 0..h {
        for ox in 0..w {
            let dx = ox as f64 + 0.5 - cx;
            let dy = oy as f64 + 0.5 - cy;
            let u = snap(cos * dx + sin * dy + cx - 0.5);
            let v = snap(-sin * dx + cos * dy + cy - 0.5);
            let (x0, y0) = (u.floor(), v.floor());
            let (fx, fy) = (u - x0, v - y0);
            let mut pixel_taps = Vec::with_capacity(4);
            let mut ok = true;
            for (yy, wy) in [(y0, 1.0 - fy), (y0 + 1.0, fy)] {
                for (xx, wx) in [(x0, 1.0 - fx), (x0 + 1.0, fx)] {
                    let weight = wy * wx;
                    if weight == 0.0 {
                        continue;
                    }
                    let inside = yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64;
                    if !inside {
                        ok = false;
                        continue;
                    }
                    let (yi, xi) = (yy as usize, xx as usize);
                    if let Some(m) = src_mask {
                        ok &= m.get(yi, xi);
                    }
                    pixel_taps.push(Tap {
                        idx: yi * w + xi,
                        weight,
                    });
                }
            }
            taps.push(pixel_taps);
            valid.push(ok);
        }
    }

    let mut data = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = t.plane(n, c);
            for pixel_taps in &taps {
                let v: f64 = pixel_taps
                    .iter()
                    .map(|tap| plane[tap.idx].widen() * tap.weight)
                    .sum();
                data.push(T::narrow(v));
            }
        }
    }
    (
        Tensor::new(s, data).expect("same shape"),
        ValidMask::from_bits(h, w, valid).expect("mask size"),
    )
}
