//! Flat binary tensor container.
//!
//! Layout: a plain-text index followed by raw little-endian `f64` data.
//!
//! ```text
//! CRTENSORS 1
//! <name> <offset> <d0>x<d1>x...      one line per record; offset counts values
//! END
//! <values>
//! ```
//!
//! A scalar has the shape token `-`. Names may not contain whitespace.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use super::Tensor;
use crate::error::{bail, Result};

const MAGIC: &str = "CRTENSORS 1";

pub fn encode(records: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    let mut offset = 0usize;
    for (name, t) in records {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            bail!(InvalidInput, "tensor name {name:?} must be non-empty without whitespace");
        }
        let dims = if t.shape().is_empty() {
            "-".to_string()
        } else {
            t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
        };
        let _ = writeln!(header, "{name} {offset} {dims}");
        offset += t.len();
    }
    header.push_str("END\n");
    let mut out = header.into_bytes();
    out.reserve(offset * 8);
    for (_, t) in records {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut pos = 0usize;
    let mut next_line = || -> Result<&str> {
        let Some(end) = bytes[pos..].iter().position(|b| *b == b'\n') else {
            bail!(InvalidInput, "truncated tensor index");
        };
        let line = core::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| crate::Error::InvalidInput("index is not UTF-8".into()))?;
        pos += end + 1;
        Ok(line)
    };
    if next_line()? != MAGIC {
        bail!(InvalidInput, "not a tensor container");
    }
    let mut index = Vec::new();
    loop {
        let line = next_line()?;
        if line == "END" {
            break;
        }
        let mut parts = line.split(' ');
        let (Some(name), Some(off), Some(dims), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            bail!(InvalidInput, "malformed index line {line:?}");
        };
        let off: usize = off.parse().map_err(|_| crate::Error::InvalidInput(format!("bad offset in {line:?}")))?;
        let shape: Vec<usize> = if dims == "-" {
            Vec::new()
        } else {
            dims.split('x')
                .map(|d| d.parse().map_err(|_| crate::Error::InvalidInput(format!("bad shape in {line:?}"))))
                .collect::<Result<_>>()?
        };
        index.push((name.to_string(), off, shape));
    }
    let data = &bytes[pos..];
    if data.len() % 8 != 0 {
        bail!(InvalidInput, "data section is not a whole number of f64 values");
    }
    let total = data.len() / 8;
    let mut out = Vec::with_capacity(index.len());
    for (name, off, shape) in index {
        let n: usize = shape.iter().product();
        if off + n > total {
            bail!(InvalidInput, "tensor {name} runs past the data section");
        }
        let vals = data[off * 8..(off + n) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor::new(&shape, vals)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn round_trip() {
        let recs = vec![
            ("a.w".to_string(), Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, f64::MAX]).unwrap()),
            ("s".to_string(), Tensor::scalar(-0.25)),
            ("empty".to_string(), Tensor::zeros(&[0, 4])),
        ];
        let bytes = encode(&recs).unwrap();
        assert!(bytes.starts_with(b"CRTENSORS 1\na.w 0 2x3\ns 6 -\nempty 7 0x4\nEND\n"));
        assert_eq!(decode(&bytes).unwrap(), recs);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"hello\n").is_err());
        assert!(decode(b"CRTENSORS 1\nx 0 4\nEND\n").is_err());
        assert!(encode(&[("bad name".to_string(), Tensor::scalar(1.0))]).is_err());
    }
}
