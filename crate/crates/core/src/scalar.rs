//! Floating-point abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type the network math is written against: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Tag written into checkpoints.
    const DTYPE: &'static str;
    /// Width of one value in bytes.
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Lossy conversion from an `f64` literal or config value.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn le_round_trip_is_bit_exact() {
        for x in [0.0f64, -0.0, 1.5, f64::MIN_POSITIVE, 1e300, -3.25e-7] {
            let mut buf = Vec::new();
            x.write_le(&mut buf);
            assert_eq!(f64::read_le(&buf).to_bits(), x.to_bits());
        }
        let mut buf = Vec::new();
        0.1f32.write_le(&mut buf);
        assert_eq!(buf.len(), f32::BYTES);
        assert_eq!(f32::read_le(&buf).to_bits(), 0.1f32.to_bits());
    }
}
