//! Portable float map (PFM) depth files: single channel `Pf`, 32-bit floats,
//! scanlines stored bottom-up. Files are written little-endian; both
//! byte orders are accepted on read.

use std::io::{BufRead, Write};

use super::DatasetError;
use crate::geometry::DepthMap;

pub fn encode(depth: &DepthMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    out.reserve(depth.data.len() * 4);
    for row in depth.data.chunks_exact(depth.width).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn header_token(reader: &mut impl BufRead) -> std::io::Result<String> {
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        reader.read_exact(&mut byte)?;
        if byte[0].is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(String::from_utf8_lossy(&token).into_owned());
        }
        token.push(byte[0]);
    }
}

pub fn decode(mut reader: impl BufRead, what: &str) -> Result<DepthMap, DatasetError> {
    let corrupt = |detail: String| DatasetError::Corrupt { path: what.to_string(), detail };
    let io = |e: std::io::Error| corrupt(format!("truncated header: {e}"));
    let magic = header_token(&mut reader).map_err(io)?;
    if magic != "Pf" {
        return Err(corrupt(format!("expected single-channel 'Pf' magic, found {magic:?}")));
    }
    let width: usize = header_token(&mut reader).map_err(io)?.parse().map_err(|e| corrupt(format!("width: {e}")))?;
    let height: usize = header_token(&mut reader).map_err(io)?.parse().map_err(|e| corrupt(format!("height: {e}")))?;
    let scale: f64 = header_token(&mut reader).map_err(io)?.parse().map_err(|e| corrupt(format!("scale: {e}")))?;
    if scale == 0.0 || width == 0 || height == 0 {
        return Err(corrupt(format!("bad header {width}x{height} scale {scale}")));
    }
    let little = scale < 0.0;
    let mut raw = vec![0u8; width * height * 4];
    reader.read_exact(&mut raw).map_err(|e| corrupt(format!("truncated payload: {e}")))?;
    let mut data = vec![0f32; width * height];
    for (row_idx, row) in raw.chunks_exact(width * 4).enumerate() {
        let y = height - 1 - row_idx;
        for (x, b) in row.chunks_exact(4).enumerate() {
            let bytes = [b[0], b[1], b[2], b[3]];
            data[y * width + x] = if little { f32::from_le_bytes(bytes) } else { f32::from_be_bytes(bytes) };
        }
    }
    Ok(DepthMap::new(width, height, data))
}

pub fn write(path: &std::path::Path, depth: &DepthMap) -> Result<(), DatasetError> {
    let mut file = std::fs::File::create(path).map_err(|e| DatasetError::io(path, e))?;
    file.write_all(&encode(depth)).map_err(|e| DatasetError::io(path, e))
}

pub fn read(path: &std::path::Path) -> Result<DepthMap, DatasetError> {
    let file = std::fs::File::open(path).map_err(|e| DatasetError::io(path, e))?;
    decode(std::io::BufReader::new(file), &path.display().to_string())
}
