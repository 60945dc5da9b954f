//! Binary tensor dump: `WAUT`, version byte, dtype byte, four little-endian
//! u32 dims (N, C, H, W), then little-endian scalars in layout order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Shape, Tensor};
use crate::error::{Result, WauError};
use crate::scalar::{DType, Scalar};

pub const DUMP_MAGIC: &[u8; 4] = b"WAUT";
pub const DUMP_VERSION: u8 = 1;

const HEADER_LEN: usize = 4 + 1 + 1 + 16;

pub fn write_tensor<T: Scalar>(out: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + t.numel() * T::DTYPE.width());
    buf.extend_from_slice(DUMP_MAGIC);
    buf.push(DUMP_VERSION);
    buf.push(T::DTYPE as u8);
    for d in t.shape().dims() {
        let d = u32::try_from(d).map_err(|_| WauError::Format(format!("dim {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(input: &mut impl Read) -> Result<Tensor<T>> {
    let mut header = [0u8; HEADER_LEN];
    input.read_exact(&mut header)?;
    if &header[..4] != DUMP_MAGIC {
        return Err(WauError::Format("bad magic, expected WAUT".into()));
    }
    if header[4] != DUMP_VERSION {
        return Err(WauError::Format(format!("unsupported version {}", header[4])));
    }
    let dtype = DType::from_byte(header[5])
        .ok_or_else(|| WauError::Format(format!("unknown dtype byte {}", header[5])))?;
    if dtype != T::DTYPE {
        return Err(WauError::Format(format!(
            "dtype mismatch: file holds {dtype:?}, requested {:?}",
            T::DTYPE
        )));
    }
    let dim = |i: usize| {
        let off = 6 + 4 * i;
        u32::from_le_bytes(header[off..off + 4].try_into().expect("4 bytes")) as usize
    };
    let shape = Shape::new(dim(0), dim(1), dim(2), dim(3));
    let width = dtype.width();
    let mut body = vec![0u8; shape.numel() * width];
    input.read_exact(&mut body)?;
    let data = body.chunks_exact(width).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

pub fn write_tensor_file<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write_tensor(&mut f, t)
}

pub fn read_tensor_file<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let mut f = fs::File::open(path)?;
    read_tensor(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::<f32>::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"WAUT");
        assert_eq!(buf[4], DUMP_VERSION);
        assert_eq!(buf[5], 0);
        assert_eq!(&buf[6..10], &1u32.to_le_bytes());
        assert_eq!(&buf[10..14], &2u32.to_le_bytes());
        assert_eq!(&buf[22..26], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 22 + 8);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let t = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(buf[5], 1);
        assert!(read_tensor::<f32>(&mut buf.as_slice()).is_err());
        let back: Tensor<f64> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_body_errors() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 3));
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_tensor::<f32>(&mut buf.as_slice()).is_err());
    }
}
