//! Binary netpbm images: P6 (RGB) and P5 (grayscale), 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// Samples per pixel: 3 for P6, 1 for P5.
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub samples: Vec<u8>,
}

fn fail(path: &Path, message: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(buf: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    if buf.len() < 2 || &buf[..2] != magic {
        return Err(fail(
            path,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments between tokens
        loop {
            match buf.get(pos) {
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(fail(path, "truncated header")),
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fail(path, "malformed header field"));
        }
        *field = std::str::from_utf8(&buf[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| fail(path, "header number out of range"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    match buf.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(fail(path, "missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(fail(path, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(fail(path, format!("unsupported maxval {maxval}")));
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_start: pos,
    })
}

fn decode(buf: &[u8], magic: &[u8; 2], channels: usize, path: &Path) -> Result<Raster> {
    let h = parse_header(buf, magic, path)?;
    let len = h.width * h.height * channels;
    let data = buf
        .get(h.data_start..h.data_start + len)
        .ok_or_else(|| fail(path, "truncated raster"))?;
    let samples = if h.maxval == 255 {
        data.to_vec()
    } else {
        data.iter()
            .map(|&v| ((v as usize * 255 + h.maxval / 2) / h.maxval).min(255) as u8)
            .collect()
    };
    Ok(Raster {
        width: h.width,
        height: h.height,
        channels,
        samples,
    })
}

pub fn decode_ppm(buf: &[u8], path: &Path) -> Result<Raster> {
    decode(buf, b"P6", 3, path)
}

pub fn decode_pgm(buf: &[u8], path: &Path) -> Result<Raster> {
    decode(buf, b"P5", 1, path)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::DataIo {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    decode_ppm(&read(path)?, path)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    decode_pgm(&read(path)?, path)
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.samples);
    out
}

pub fn write(path: impl AsRef<Path>, r: &Raster) -> Result<()> {
    debug_assert!(r.channels == 1 || r.channels == 3);
    std::fs::write(path, encode(r))?;
    Ok(())
}
