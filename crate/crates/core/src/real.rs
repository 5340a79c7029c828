//! Scalar abstraction: the whole numeric stack is generic over [`Real`] so
//! training runs in `f32` while the finite-difference gradient audit runs the
//! identical code in `f64`.

use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, MulAssign, SubAssign};
use num_traits::{Float, FromPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` constant.
    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    /// Widen to `f64` (exact for both instantiations).
    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("real widens to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
