use super::FeatureMap;
use crate::error::{invalid, Result};

/// Result of a max-pool, carrying the flat input index chosen for every
/// output element so the backward pass can route gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Pooled {
    pub map: FeatureMap,
    pub argmax: Vec<usize>,
}

/// Per-channel max over `window × window` patches taken every `stride`
/// pixels. Ties go to the first maximum in row-major patch order.
pub fn max_pool(map: &FeatureMap, window: usize, stride: usize) -> Result<Pooled> {
    if window == 0 || stride == 0 {
        return Err(invalid!("pool window and stride must be positive"));
    }
    let (h, w, c) = map.shape();
    if window > h || window > w {
        return Err(invalid!("pool window {window} larger than {h}x{w} map"));
    }
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let mut out = FeatureMap::zeros(out_h, out_w, c);
    let mut argmax = vec![0; out_h * out_w * c];
    for oy in 0..out_h {
        for ox in 0..out_w {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..window {
                    for dx in 0..window {
                        let i = map.index(oy * stride + dy, ox * stride + dx, ch);
                        let v = map.data()[i];
                        if v > best {
                            best = v;
                            best_i = i;
                        }
                    }
                }
                let o = out.index(oy, ox, ch);
                out.data_mut()[o] = best;
                argmax[o] = best_i;
            }
        }
    }
    Ok(Pooled { map: out, argmax })
}

pub fn max_pool_backward(input_shape: (usize, usize, usize), argmax: &[usize], grad_out: &FeatureMap) -> FeatureMap {
    let (h, w, c) = input_shape;
    let mut g = FeatureMap::zeros(h, w, c);
    for (o, &i) in argmax.iter().enumerate() {
        g.data_mut()[i] += grad_out.data()[o];
    }
    g
}
