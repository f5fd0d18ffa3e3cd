use serde::{Deserialize, Serialize};

use super::FeatureMap;
use crate::error::{invalid, Result};

/// Convolution weights laid out as `[out_channels, size, size, in_channels]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    out_channels: usize,
    size: usize,
    in_channels: usize,
    data: Vec<f64>,
}

impl Kernel {
    pub fn new(out_channels: usize, size: usize, in_channels: usize, data: Vec<f64>) -> Result<Self> {
        if out_channels == 0 || size == 0 || in_channels == 0 {
            return Err(invalid!("kernel dimensions must be positive"));
        }
        if size % 2 == 0 {
            return Err(invalid!("kernel size must be odd, got {size}"));
        }
        let len = out_channels * size * size * in_channels;
        if data.len() != len {
            return Err(invalid!("kernel needs {len} values, got {}", data.len()));
        }
        Ok(Self {
            out_channels,
            size,
            in_channels,
            data,
        })
    }

    pub fn zeros(out_channels: usize, size: usize, in_channels: usize) -> Self {
        Self::new(
            out_channels,
            size,
            in_channels,
            vec![0.0; out_channels * size * size * in_channels],
        )
        .expect("valid kernel dimensions")
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, o: usize, ky: usize, kx: usize, i: usize) -> usize {
        ((o * self.size + ky) * self.size + kx) * self.in_channels + i
    }

    /// Weights of one output channel, `[size, size, in_channels]` flattened.
    pub fn filter(&self, o: usize) -> &[f64] {
        let n = self.size * self.size * self.in_channels;
        &self.data[o * n..(o + 1) * n]
    }

    pub fn filter_mut(&mut self, o: usize) -> &mut [f64] {
        let n = self.size * self.size * self.in_channels;
        &mut self.data[o * n..(o + 1) * n]
    }
}

fn check(map: &FeatureMap, kernel: &Kernel, bias: &[f64], padding: usize) -> Result<(usize, usize)> {
    if kernel.in_channels != map.channels() {
        return Err(invalid!(
            "kernel expects {} input channels but map has {}",
            kernel.in_channels,
            map.channels()
        ));
    }
    if bias.len() != kernel.out_channels {
        return Err(invalid!(
            "bias has {} entries for {} output channels",
            bias.len(),
            kernel.out_channels
        ));
    }
    if padding != 0 && padding != (kernel.size - 1) / 2 {
        return Err(invalid!(
            "padding must be 0 or {} for a {}x{} kernel, got {padding}",
            (kernel.size - 1) / 2,
            kernel.size,
            kernel.size
        ));
    }
    let out_h = (map.height() + 2 * padding).checked_sub(kernel.size - 1);
    let out_w = (map.width() + 2 * padding).checked_sub(kernel.size - 1);
    match (out_h, out_w) {
        (Some(h), Some(w)) if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(invalid!(
            "{}x{} kernel does not fit a {}x{} map without padding",
            kernel.size,
            kernel.size,
            map.height(),
            map.width()
        )),
    }
}

/// Cross-correlation with zero padding.
pub fn convolve(map: &FeatureMap, kernel: &Kernel, bias: &[f64], padding: usize) -> Result<FeatureMap> {
    let (out_h, out_w) = check(map, kernel, bias, padding)?;
    let (h, w, cin) = map.shape();
    let n = kernel.size;
    let cout = kernel.out_channels;
    let mut out = FeatureMap::zeros(out_h, out_w, cout);
    for y in 0..out_h {
        for x in 0..out_w {
            let acc = out.pixel_mut(y, x);
            acc.copy_from_slice(bias);
            for ky in 0..n {
                let sy = (y + ky) as isize - padding as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..n {
                    let sx = (x + kx) as isize - padding as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let px = map.pixel(sy as usize, sx as usize);
                    for (o, a) in acc.iter_mut().enumerate() {
                        let k = &kernel.data[kernel.index(o, ky, kx, 0)..][..cin];
                        *a += dot(k, px);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub kernel: Kernel,
    pub bias: Vec<f64>,
    pub input: FeatureMap,
}

/// Reverse-mode gradients of [`convolve`] given the upstream gradient.
pub fn convolve_backward(
    map: &FeatureMap,
    kernel: &Kernel,
    padding: usize,
    grad_out: &FeatureMap,
) -> Result<ConvGrads> {
    let bias = vec![0.0; kernel.out_channels];
    let (out_h, out_w) = check(map, kernel, &bias, padding)?;
    if grad_out.shape() != (out_h, out_w, kernel.out_channels) {
        return Err(invalid!(
            "upstream gradient {:?} does not match convolution output {:?}",
            grad_out.shape(),
            (out_h, out_w, kernel.out_channels)
        ));
    }
    let (h, w, cin) = map.shape();
    let n = kernel.size;
    let mut gk = Kernel::zeros(kernel.out_channels, n, cin);
    let mut gb = vec![0.0; kernel.out_channels];
    let mut gi = FeatureMap::zeros(h, w, cin);
    for y in 0..out_h {
        for x in 0..out_w {
            let g = grad_out.pixel(y, x);
            for (o, &go) in g.iter().enumerate() {
                gb[o] += go;
            }
            for ky in 0..n {
                let sy = (y + ky) as isize - padding as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..n {
                    let sx = (x + kx) as isize - padding as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let (sy, sx) = (sy as usize, sx as usize);
                    for (o, &go) in g.iter().enumerate() {
                        if go == 0.0 {
                            continue;
                        }
                        let base = kernel.index(o, ky, kx, 0);
                        let px = map.pixel(sy, sx);
                        for i in 0..cin {
                            gk.data[base + i] += go * px[i];
                        }
                        let gpx = gi.pixel_mut(sy, sx);
                        for i in 0..cin {
                            gpx[i] += go * kernel.data[base + i];
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        kernel: gk,
        bias: gb,
        input: gi,
    })
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}
