//! Binary arrays with a one-line JSON header.
//!
//! Layout: a single-line JSON object terminated by `\n`, immediately
//! followed by raw little-endian `f32` values in C order. Used for feature
//! tensors, probability maps and model checkpoints.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const DTYPE: &str = "f32le";

pub fn write_blob<W: Write, H: Serialize>(mut out: W, header: &H, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let line = serde_json::to_string(header)?;
    let io = |e| Error::io("<blob>", e);
    out.write_all(line.as_bytes()).map_err(io)?;
    out.write_all(b"\n").map_err(io)?;
    for v in values {
        out.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

pub fn save_blob<H: Serialize>(path: &Path, header: &H, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_blob(&mut out, header, values)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_blob<R: Read, H: DeserializeOwned>(input: R) -> Result<(H, Vec<f32>)> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| Error::validation(format!("blob header: {e}")))?;
    if !line.ends_with('\n') {
        return Err(Error::validation("blob header is not newline-terminated"));
    }
    let header: H = serde_json::from_str(line.trim_end())?;
    let mut raw = Vec::new();
    reader
        .read_to_end(&mut raw)
        .map_err(|e| Error::validation(format!("blob payload: {e}")))?;
    if raw.len() % 4 != 0 {
        return Err(Error::validation(format!("blob payload of {} bytes is not whole f32 values", raw.len())));
    }
    let values = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((header, values))
}

pub fn load_blob<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f32>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_blob(file)
}
