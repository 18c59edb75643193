//! Parameter checkpoints: one JSON header line followed by little-endian f32 data.

use std::io::{BufRead, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "provfield-params";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<TensorShape>,
}

pub fn write_tensors<W: Write>(mut w: W, names: &[&str], tensors: &[Array2<f64>]) -> Result<()> {
    let header = CheckpointHeader {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        tensors: names
            .iter()
            .zip(tensors)
            .map(|(n, t)| TensorShape {
                name: n.to_string(),
                shape: [t.nrows(), t.ncols()],
            })
            .collect(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for t in tensors {
        for &v in t.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: BufRead>(mut r: R) -> Result<(CheckpointHeader, Vec<Array2<f64>>)> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
    if header.format != FORMAT_NAME {
        return Err(Error::Checkpoint(format!("unknown format `{}`", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            header.version
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; 4];
    for spec in &header.tensors {
        let [rows, cols] = spec.shape;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut buf).map_err(|_| {
                Error::Checkpoint(format!("truncated data in tensor `{}`", spec.name))
            })?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        tensors.push(Array2::from_shape_vec((rows, cols), data).expect("length checked"));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok((header, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn header_line_then_f32_payload() {
        let t = vec![array![[1.5, -2.0]], array![[0.25], [8.0]]];
        let mut buf = Vec::new();
        write_tensors(&mut buf, &["a", "b"], &t).unwrap();
        let nl = buf.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&buf[..nl]).unwrap();
        assert_eq!(header["version"], 1);
        assert_eq!(header["tensors"][1]["shape"], serde_json::json!([2, 1]));
        assert_eq!(buf.len() - nl - 1, 4 * 4);
        assert_eq!(&buf[nl + 1..nl + 5], &1.5f32.to_le_bytes());
        let (_, back) = read_tensors(&buf[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &["a"], &[array![[1.0, 2.0]]]).unwrap();
        buf.pop();
        assert!(matches!(read_tensors(&buf[..]), Err(Error::Checkpoint(_))));
    }
}
