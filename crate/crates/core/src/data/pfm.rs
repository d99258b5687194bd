//! Grayscale PFM ("Pf") disparity maps.
//!
//! Header: magic, `width height`, scale. A negative scale means
//! little-endian payload. Rows are stored bottom-up; the reader flips them
//! to top-down order.

use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

/// Top-down rows, row-major.
pub struct PfmImage {
    pub data: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub scale: f32,
}

struct TokenReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> TokenReader<'a> {
    fn token(&mut self, path: &Path) -> Result<(&'a str, usize)> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(
                path,
                format!("truncated header at byte offset {start}"),
            ));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::format(path, format!("non-ASCII header at byte offset {start}")))?;
        Ok((s, start))
    }
}

pub fn read_pfm(path: &Path) -> Result<PfmImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut tr = TokenReader { bytes: &bytes, pos: 0 };

    let (magic, off) = tr.token(path)?;
    match magic {
        "Pf" => {}
        "PF" => {
            return Err(Error::format(
                path,
                format!("color PFM at byte offset {off}; disparity maps must be grayscale `Pf`"),
            ))
        }
        other => {
            return Err(Error::format(
                path,
                format!("bad magic `{other}` at byte offset {off}"),
            ))
        }
    }
    let (w_tok, w_off) = tr.token(path)?;
    let width: usize = w_tok
        .parse()
        .map_err(|_| Error::format(path, format!("bad width `{w_tok}` at byte offset {w_off}")))?;
    let (h_tok, h_off) = tr.token(path)?;
    let height: usize = h_tok
        .parse()
        .map_err(|_| Error::format(path, format!("bad height `{h_tok}` at byte offset {h_off}")))?;
    if width == 0 || height == 0 {
        return Err(Error::format(
            path,
            format!("degenerate dimensions {width}x{height}"),
        ));
    }
    let (s_tok, s_off) = tr.token(path)?;
    let scale: f32 = s_tok
        .parse()
        .map_err(|_| Error::format(path, format!("bad scale `{s_tok}` at byte offset {s_off}")))?;

    // Exactly one whitespace byte separates the header from the payload.
    let data_start = tr.pos + 1;
    let need = width * height * 4;
    if bytes.len() < data_start + need {
        return Err(Error::format(
            path,
            format!(
                "payload truncated at byte offset {}: need {need} bytes, have {}",
                data_start,
                bytes.len().saturating_sub(data_start)
            ),
        ));
    }
    let little_endian = scale < 0.0;
    let raw = &bytes[data_start..data_start + need];
    let mut data = vec![0.0f32; width * height];
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        // Stored bottom-up: flip the row.
        let row = i / width;
        let col = i % width;
        data[(height - 1 - row) * width + col] = v;
    }
    Ok(PfmImage {
        data,
        height,
        width,
        scale,
    })
}

/// Writes little-endian (scale -1.0), rows bottom-up.
pub fn write_pfm(path: &Path, data: &[f32], height: usize, width: usize) -> Result<()> {
    if data.len() != height * width {
        return Err(Error::Config(format!(
            "pfm payload of {} values does not match {height}x{width}",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(32 + data.len() * 4);
    out.extend_from_slice(format!("Pf\n{width} {height}\n-1.0\n").as_bytes());
    for row in (0..height).rev() {
        for col in 0..width {
            out.extend_from_slice(&data[row * width + col].to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pfm");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f32> = (0..20).map(|_| rng.random_range(-50.0..300.0)).collect();
        write_pfm(&path, &data, 5, 4).unwrap();
        let img = read_pfm(&path).unwrap();
        assert_eq!((img.height, img.width), (5, 4));
        assert!(img
            .data
            .iter()
            .zip(&data)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn little_endian_decode_against_hand_packed_bytes() {
        // 2x2, scale -1 (little-endian), bottom row first in the file.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hand.pfm");
        let mut bytes = b"Pf\n2 2\n-1.0\n".to_vec();
        let bottom = [3.0f32, 4.0];
        let top = [1.0f32, 2.0];
        for v in bottom.iter().chain(top.iter()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let img = read_pfm(&path).unwrap();
        assert_eq!(img.data, vec![1.0, 2.0, 3.0, 4.0], "reader flips to top-down");
        assert!(img.scale < 0.0);
    }

    #[test]
    fn big_endian_decode() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("be.pfm");
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&7.5f32.to_be_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert_eq!(read_pfm(&path).unwrap().data, vec![7.5]);
    }

    #[test]
    fn color_header_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("color.pfm");
        std::fs::write(&path, b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        let err = read_pfm(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("byte offset 0") && msg.contains("grayscale"), "got: {msg}");
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.pfm");
        std::fs::write(&path, b"Pf\n3 3\n-1.0\nxx").unwrap();
        let err = read_pfm(&path).unwrap_err();
        assert!(err.to_string().contains("byte offset"), "got: {err}");
    }
}
