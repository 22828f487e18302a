//! Plain array dump: one ASCII header line followed by raw little-endian values.
//!
//! ```text
//! ACTLUMOS-ARRAY 1 dtype=f64le dims=3x16x32x32\n
//! <product(dims) * 8 bytes, row-major>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &str = "ACTLUMOS-ARRAY";
const VERSION: u32 = 1;

pub fn write_array(mut w: impl Write, array: &ArrayD<f64>) -> Result<()> {
    let dims: Vec<String> = array.shape().iter().map(|d| d.to_string()).collect();
    writeln!(w, "{MAGIC} {VERSION} dtype=f64le dims={}", dims.join("x"))?;
    for v in array.iter() {
        w.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

pub fn read_array(r: impl Read) -> Result<ArrayD<f64>> {
    let mut reader = BufReader::new(r);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let corrupt = |reason: &str| Error::Corrupt { path: "<array>".into(), reason: reason.to_string() };
    let mut fields = header.trim_end().split(' ');
    if fields.next() != Some(MAGIC) {
        return Err(corrupt("missing array magic"));
    }
    let version: u32 = fields.next().and_then(|v| v.parse().ok()).ok_or_else(|| corrupt("bad version"))?;
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    if fields.next() != Some("dtype=f64le") {
        return Err(corrupt("unsupported dtype"));
    }
    let dims: Vec<usize> = fields
        .next()
        .and_then(|d| d.strip_prefix("dims="))
        .ok_or_else(|| corrupt("missing dims"))?
        .split('x')
        .map(|d| d.parse().map_err(|_| corrupt("bad dims")))
        .collect::<Result<_>>()?;
    let n: usize = dims.iter().product();
    let mut values = vec![0.0; n];
    reader.read_f64_into::<LittleEndian>(&mut values)?;
    ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| corrupt(&e.to_string()))
}

pub fn save(path: impl AsRef<Path>, array: &ArrayD<f64>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_array(&mut w, array)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ArrayD<f64>> {
    read_array(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let a = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |i| (i[0] * 12 + i[1] * 4 + i[2]) as f64 / 7.0);
        let mut buf = Vec::new();
        write_array(&mut buf, &a).unwrap();
        assert!(buf.starts_with(b"ACTLUMOS-ARRAY 1 dtype=f64le dims=2x3x4\n"));
        let b = read_array(buf.as_slice()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_truncated_payload() {
        let a = ArrayD::from_elem(IxDyn(&[4]), 1.0);
        let mut buf = Vec::new();
        write_array(&mut buf, &a).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_array(buf.as_slice()).is_err());
    }
}
