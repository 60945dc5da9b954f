use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element precision tag, also the dtype byte of the tensor dump format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    Single = 0,
    Double = 1,
}

impl DType {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(DType::Single),
            1 => Some(DType::Double),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::Single => 4,
            DType::Double => 8,
        }
    }
}

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: DType;

    fn of(x: f64) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::Single;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::Double;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}
