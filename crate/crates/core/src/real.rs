use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Scalar type the network runs on: `f32` for training, `f64` for gradient checks.
pub trait Real: NdFloat + FromPrimitive + Default + std::iter::Sum {
    fn erf(self) -> Self;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits scalar type")
    }

    fn to_f64_lossless(self) -> f64;
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn to_f64_lossless(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn to_f64_lossless(self) -> f64 {
        self
    }
}
