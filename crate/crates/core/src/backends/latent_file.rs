//! Latent-code files.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "CFW+" | u32 n_latent | u32 dim_w | f32 × (count · n_latent · dim_w)
//! ```
//!
//! where `count` follows from the file length. The text layout starts with a
//! `cfw+ <n_latent> <dim_w>` line followed by whitespace-separated rows, one
//! row per line; blank lines and `#` comments are ignored, so inverted codes
//! can be pasted one matrix per paragraph.

use std::path::Path;

use super::LatentCode;
use crate::error::{Error, Result};

pub const LATENT_MAGIC: &[u8; 4] = b"CFW+";
const TEXT_TAG: &str = "cfw+";

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::LatentFile {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn common_shape(codes: &[LatentCode]) -> Result<(usize, usize)> {
    let first = codes
        .first()
        .ok_or_else(|| Error::BadDims("no latent codes to write".into()))?;
    let shape = first.shape();
    if let Some(c) = codes.iter().find(|c| c.shape() != shape) {
        return Err(Error::BadDims(format!(
            "mixed latent shapes {:?} and {:?}",
            shape,
            c.shape()
        )));
    }
    Ok(shape)
}

pub fn write_latents(path: &Path, codes: &[LatentCode]) -> Result<()> {
    let (n, d) = common_shape(codes)?;
    let mut buf = Vec::with_capacity(12 + 4 * n * d * codes.len());
    buf.extend_from_slice(LATENT_MAGIC);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for c in codes {
        for v in c.values() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn write_latents_text(path: &Path, codes: &[LatentCode]) -> Result<()> {
    let (n, d) = common_shape(codes)?;
    let mut out = format!("{TEXT_TAG} {n} {d}\n");
    for c in codes {
        for i in 0..n {
            let row: Vec<String> = c.row(i).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_latents(path: &Path) -> Result<Vec<LatentCode>> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(LATENT_MAGIC) {
        parse_binary(path, &bytes)
    } else {
        let text =
            std::str::from_utf8(&bytes).map_err(|_| bad(path, "neither CFW+ binary nor UTF-8"))?;
        parse_text(path, text)
    }
}

fn parse_binary(path: &Path, bytes: &[u8]) -> Result<Vec<LatentCode>> {
    if bytes.len() < 12 {
        return Err(bad(path, "truncated header"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if n == 0 || d == 0 {
        return Err(bad(path, format!("empty shape {n}x{d}")));
    }
    let body = &bytes[12..];
    let per_code = 4 * n * d;
    if body.is_empty() || !body.len().is_multiple_of(per_code) {
        return Err(bad(
            path,
            format!("{} payload bytes is not a multiple of {per_code}", body.len()),
        ));
    }
    body.chunks_exact(per_code)
        .map(|chunk| {
            let values = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            LatentCode::new(n, d, values).map_err(|e| bad(path, e.to_string()))
        })
        .collect()
}

fn parse_text(path: &Path, text: &str) -> Result<Vec<LatentCode>> {
    let mut lines = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty());
    let header = lines.next().ok_or_else(|| bad(path, "empty file"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (n, d) = match fields.as_slice() {
        [tag, n, d] if tag.eq_ignore_ascii_case(TEXT_TAG) => (
            n.parse::<usize>().map_err(|_| bad(path, "bad n_latent"))?,
            d.parse::<usize>().map_err(|_| bad(path, "bad dim_w"))?,
        ),
        _ => return Err(bad(path, format!("expected `{TEXT_TAG} <n_latent> <dim_w>` header"))),
    };
    let mut values = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(path, format!("row {}: not a number", lineno + 1)))?;
        if row.len() != d {
            return Err(bad(
                path,
                format!("row {} has {} values, expected {d}", lineno + 1, row.len()),
            ));
        }
        values.extend(row);
    }
    if values.is_empty() || values.len() % (n * d) != 0 {
        return Err(bad(path, format!("row count is not a multiple of {n}")));
    }
    values
        .chunks_exact(n * d)
        .map(|c| LatentCode::new(n, d, c.to_vec()).map_err(|e| bad(path, e.to_string())))
        .collect()
}
