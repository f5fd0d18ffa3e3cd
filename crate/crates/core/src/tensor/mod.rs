//! Dense feature maps and the interpolation/convolution kernels built on them.

mod container;
mod conv;
mod interp;
mod map;
mod pool;

pub use container::{read_map, write_map, MAGIC as MAP_MAGIC};
pub use conv::{convolve, convolve_backward, ConvGrads, Kernel};
pub(crate) use conv::dot;
pub use interp::{axis_stencils, bilinear_weights, resize, resize_adjoint, AxisStencil, InterpWeights};
pub use map::FeatureMap;
pub use pool::{max_pool, max_pool_backward, Pooled};

/// Logistic function, branching on sign so neither tail overflows.
#[inline]
pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^s)` without overflow.
#[inline]
pub fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

pub fn sigmoid_map(map: &FeatureMap) -> FeatureMap {
    map.map(sigmoid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        let hi = sigmoid(745.0);
        assert!(hi.is_finite() && hi <= 1.0);
        let lo = sigmoid(-745.0);
        assert!(lo.is_finite() && lo > 0.0);
        let m = sigmoid_map(&FeatureMap::new(1, 3, 1, vec![-1e3, 0.0, 1e3]).unwrap());
        assert!(m.is_finite());
        assert_eq!(m.get(0, 1, 0), 0.5);
    }

    #[test]
    fn softplus_tails() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(3.0) - (1.0 + 3f64.exp()).ln()).abs() < 1e-12);
    }
}
