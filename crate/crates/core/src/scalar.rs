//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// A real floating-point element type (`f32` or `f64`).
///
/// Training runs in `f32`; gradient checks and oracles run in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossless widening to `f64` (both supported types embed exactly).
    fn to_f64_lossless(self) -> f64 {
        self.to_f64().expect("float widens to f64")
    }

    /// Rounding conversion from an `f64` constant.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant fits scalar type")
    }

    /// Number of bytes used when this scalar is written to disk natively.
    const BYTES: usize;

    /// Tag recorded in binary headers (`4` for `f32`, `8` for `f64`).
    const DTYPE: u32 = Self::BYTES as u32;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn le_round_trip_is_bitwise() {
        for x in [0.1f32, -3.5e-20, f32::MAX, f32::MIN_POSITIVE] {
            let mut buf = Vec::new();
            x.write_le(&mut buf);
            assert_eq!(f32::read_le(&buf).to_bits(), x.to_bits());
        }
        let mut buf = Vec::new();
        std::f64::consts::PI.write_le(&mut buf);
        assert_eq!(f64::read_le(&buf), std::f64::consts::PI);
    }
}
