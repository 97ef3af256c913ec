use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type the engine is generic over.
///
/// `f32` is the training dtype; `f64` instantiates the same code path for
/// oracle-grade gradient checks. Reductions accumulate in `f64` regardless
/// of the storage type.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    /// Narrowing conversion from the accumulation type.
    #[inline]
    fn cast(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(|| {
            if v > 0.0 {
                Self::infinity()
            } else {
                Self::neg_infinity()
            }
        })
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}
