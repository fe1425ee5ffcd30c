//! Binary PPM (P6) and PGM (P5) image I/O — the only image formats the
//! crate reads or writes, so outputs stay byte-exactly comparable.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Write an 8-bit RGB image, `data` in row-major RGB interleaved order.
pub fn write_ppm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    if data.len() != width * height * 3 {
        return Err(Error::invalid(format!(
            "write_ppm: {} bytes for {width}x{height}",
            data.len()
        )));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{width} {height}\n255\n")?;
    f.write_all(data)?;
    Ok(())
}

/// Write an 8-bit grayscale image.
pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::invalid(format!(
            "write_pgm: {} bytes for {width}x{height}",
            data.len()
        )));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(data)?;
    Ok(())
}

/// Read a binary P6 file written by [`write_ppm`] (maxval 255).
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_pnm(&bytes, b"P6", 3)
}

fn parse_pnm(bytes: &[u8], magic: &[u8], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<Vec<u8>> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::invalid("pnm: truncated header"));
        }
        Ok(bytes[start..pos].to_vec())
    };
    let m = token(bytes)?;
    if m != magic {
        return Err(Error::invalid(format!(
            "pnm: magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let width: usize = String::from_utf8_lossy(&token(bytes)?)
        .parse()
        .map_err(|_| Error::invalid("pnm: bad width"))?;
    let height: usize = String::from_utf8_lossy(&token(bytes)?)
        .parse()
        .map_err(|_| Error::invalid("pnm: bad height"))?;
    let maxval: usize = String::from_utf8_lossy(&token(bytes)?)
        .parse()
        .map_err(|_| Error::invalid("pnm: bad maxval"))?;
    if maxval != 255 {
        return Err(Error::invalid(format!("pnm: maxval {maxval}, expected 255")));
    }
    // single whitespace byte after maxval
    pos += 1;
    let need = width * height * channels;
    if bytes.len() < pos + need {
        return Err(Error::invalid("pnm: truncated pixel data"));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}

/// `[0,1]` float plane (3,H,W) to interleaved RGB bytes.
pub fn chw_f32_to_rgb(img: &[f32], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; h * w * 3];
    for c in 0..3 {
        for p in 0..h * w {
            out[p * 3 + c] = (img[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

/// Interleaved RGB bytes to `[0,1]` float plane (3,H,W).
pub fn rgb_to_chw_f32(rgb: &[u8], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0f32; 3 * h * w];
    for c in 0..3 {
        for p in 0..h * w {
            out[c * h * w + p] = rgb[p * 3 + c] as f32 / 255.0;
        }
    }
    out
}
