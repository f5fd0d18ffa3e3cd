//! Align-corners bilinear interpolation.
//!
//! Target index `i` on an axis of length `dst` maps to source coordinate
//! `i * (src - 1) / (dst - 1)`; a length-1 target axis samples the source
//! center. Values are blended with `a + t * (b - a)` so constant inputs are
//! reproduced exactly and `t == 0` copies the source value bit for bit.

use super::FeatureMap;

/// Interpolation stencil along one axis: `value = v[lo] + t * (v[hi] - v[lo])`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisStencil {
    pub lo: usize,
    pub hi: usize,
    pub t: f64,
}

impl AxisStencil {
    /// `(index, weight)` pairs, omitting the upper neighbor when `t == 0`.
    pub fn terms(&self) -> impl Iterator<Item = (usize, f64)> {
        let first = (self.lo, 1.0 - self.t);
        let second = (self.t != 0.0).then_some((self.hi, self.t));
        std::iter::once(first).chain(second)
    }
}

pub fn axis_stencils(src: usize, dst: usize) -> Vec<AxisStencil> {
    assert!(src >= 1 && dst >= 1, "axis lengths must be positive");
    (0..dst)
        .map(|i| {
            let pos = if src == 1 {
                0.0
            } else if dst == 1 {
                (src - 1) as f64 / 2.0
            } else {
                (i * (src - 1)) as f64 / (dst - 1) as f64
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let t = pos - lo as f64;
            if t == 0.0 || lo + 1 >= src {
                AxisStencil { lo, hi: lo, t: 0.0 }
            } else {
                AxisStencil { lo, hi: lo + 1, t }
            }
        })
        .collect()
}

/// Per-target-position source weights (`α_ik`) for a 2-D resize.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpWeights {
    pub src_h: usize,
    pub src_w: usize,
    pub dst_h: usize,
    pub dst_w: usize,
    /// Indexed by `y * dst_w + x`; each entry lists `(y_src * src_w + x_src, weight)`.
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl InterpWeights {
    pub fn at(&self, y: usize, x: usize) -> &[(usize, f64)] {
        &self.entries[y * self.dst_w + x]
    }
}

pub fn bilinear_weights(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> InterpWeights {
    let ys = axis_stencils(src_h, dst_h);
    let xs = axis_stencils(src_w, dst_w);
    let mut entries = Vec::with_capacity(dst_h * dst_w);
    for sy in &ys {
        for sx in &xs {
            let mut e = Vec::with_capacity(4);
            for (yi, wy) in sy.terms() {
                for (xi, wx) in sx.terms() {
                    e.push((yi * src_w + xi, wy * wx));
                }
            }
            entries.push(e);
        }
    }
    InterpWeights {
        src_h,
        src_w,
        dst_h,
        dst_w,
        entries,
    }
}

/// Bilinear resize of every channel to `dst_h × dst_w`.
pub fn resize(map: &FeatureMap, dst_h: usize, dst_w: usize) -> FeatureMap {
    let (h, w, c) = map.shape();
    if (h, w) == (dst_h, dst_w) {
        return map.clone();
    }
    let ys = axis_stencils(h, dst_h);
    let xs = axis_stencils(w, dst_w);
    let src = map.data();

    // horizontal pass: h × dst_w × c
    let mut rows = vec![0.0; h * dst_w * c];
    for y in 0..h {
        for (x, s) in xs.iter().enumerate() {
            let out = &mut rows[(y * dst_w + x) * c..(y * dst_w + x + 1) * c];
            let a = &src[(y * w + s.lo) * c..(y * w + s.lo + 1) * c];
            if s.t == 0.0 {
                out.copy_from_slice(a);
            } else {
                let b = &src[(y * w + s.hi) * c..(y * w + s.hi + 1) * c];
                for ch in 0..c {
                    out[ch] = a[ch] + s.t * (b[ch] - a[ch]);
                }
            }
        }
    }

    let mut out = FeatureMap::zeros(dst_h, dst_w, c);
    let dst = out.data_mut();
    let stride = dst_w * c;
    for (y, s) in ys.iter().enumerate() {
        let o = &mut dst[y * stride..(y + 1) * stride];
        let a = &rows[s.lo * stride..(s.lo + 1) * stride];
        if s.t == 0.0 {
            o.copy_from_slice(a);
        } else {
            let b = &rows[s.hi * stride..(s.hi + 1) * stride];
            for i in 0..stride {
                o[i] = a[i] + s.t * (b[i] - a[i]);
            }
        }
    }
    out
}

/// Transpose of [`resize`]: maps a gradient at `dst` resolution back onto a
/// `src_h × src_w` map.
pub fn resize_adjoint(grad: &FeatureMap, src_h: usize, src_w: usize) -> FeatureMap {
    let (dst_h, dst_w, c) = grad.shape();
    if (src_h, src_w) == (dst_h, dst_w) {
        return grad.clone();
    }
    let ys = axis_stencils(src_h, dst_h);
    let xs = axis_stencils(src_w, dst_w);
    let g = grad.data();

    // undo vertical pass: src_h × dst_w × c
    let stride = dst_w * c;
    let mut rows = vec![0.0; src_h * stride];
    for (y, s) in ys.iter().enumerate() {
        let gy = &g[y * stride..(y + 1) * stride];
        for (yi, wy) in s.terms() {
            let r = &mut rows[yi * stride..(yi + 1) * stride];
            for i in 0..stride {
                r[i] += wy * gy[i];
            }
        }
    }

    let mut out = FeatureMap::zeros(src_h, src_w, c);
    let o = out.data_mut();
    for y in 0..src_h {
        for (x, s) in xs.iter().enumerate() {
            let gx = &rows[(y * dst_w + x) * c..(y * dst_w + x + 1) * c];
            for (xi, wx) in s.terms() {
                let t = &mut o[(y * src_w + xi) * c..(y * src_w + xi + 1) * c];
                for ch in 0..c {
                    t[ch] += wx * gx[ch];
                }
            }
        }
    }
    out
}
