//! Portable float maps. Files are written little-endian (negative scale),
//! bottom row first, as the format requires; both byte orders are read.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PfmError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed PFM header: {0}")]
    Header(String),
    #[error("PFM payload has {got} bytes, expected {expected}")]
    Payload { got: usize, expected: usize },
    #[error("channel count must be 1 or 3, got {0}")]
    Channels(usize),
}

/// Row-major float raster, top row first, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn encode(&self) -> Result<Vec<u8>, PfmError> {
        let tag = match self.channels {
            1 => "Pf",
            3 => "PF",
            c => return Err(PfmError::Channels(c)),
        };
        let mut out = format!("{tag}\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        let row_len = self.width * self.channels;
        let mut buf = [0u8; 4];
        for row in (0..self.height).rev() {
            for &v in &self.data[row * row_len..(row + 1) * row_len] {
                LittleEndian::write_f32(&mut buf, v);
                out.extend_from_slice(&buf);
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PfmError> {
        // header tokens: tag, width, height, scale
        let mut pos = 0;
        let mut token = || -> Result<String, PfmError> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(PfmError::Header("unexpected end of header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let channels = match token()?.as_str() {
            "Pf" => 1,
            "PF" => 3,
            other => return Err(PfmError::Header(format!("unknown tag '{other}'"))),
        };
        let parse = |s: String| {
            s.parse::<usize>()
                .map_err(|_| PfmError::Header(format!("invalid dimension '{s}'")))
        };
        let width = parse(token()?)?;
        let height = parse(token()?)?;
        let scale_tok = token()?;
        let scale: f32 = scale_tok
            .parse()
            .map_err(|_| PfmError::Header(format!("invalid scale '{scale_tok}'")))?;
        // exactly one whitespace byte separates the header from the payload
        let payload = &bytes[(pos + 1).min(bytes.len())..];
        let n = width * height * channels;
        if payload.len() != n * 4 {
            return Err(PfmError::Payload {
                got: payload.len(),
                expected: n * 4,
            });
        }
        let read: fn(&[u8]) -> f32 = if scale < 0.0 {
            LittleEndian::read_f32
        } else {
            BigEndian::read_f32
        };
        let row_len = width * channels;
        let mut data = vec![0f32; n];
        for (file_row, chunk) in payload.chunks_exact((row_len * 4).max(1)).enumerate().take(height) {
            let row = height - 1 - file_row;
            for (i, b) in chunk.chunks_exact(4).enumerate() {
                data[row * row_len + i] = read(b);
            }
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), PfmError> {
        fs::write(path, self.encode()?).map_err(|source| PfmError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, PfmError> {
        let bytes = fs::read(path).map_err(|source| PfmError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }
}
