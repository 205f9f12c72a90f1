//! PFM (grayscale float), PPM (P6) and PGM (P5) codecs.

use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};

use super::Image;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
/// Consumes exactly one trailing whitespace byte.
fn token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut out = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return if out.is_empty() { Err(format_err("truncated header")) } else { Ok(String::from_utf8_lossy(&out).into_owned()) };
        }
        let c = byte[0];
        if c == b'#' && out.is_empty() {
            let mut rest = Vec::new();
            r.read_until(b'\n', &mut rest)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if out.is_empty() {
                continue;
            }
            return Ok(String::from_utf8_lossy(&out).into_owned());
        }
        out.push(c);
        if out.len() > 64 {
            return Err(format_err("header token too long"));
        }
    }
}

fn number<R: BufRead>(r: &mut R, what: &str) -> Result<usize> {
    let t = token(r)?;
    t.parse().map_err(|_| format_err(format!("bad {what} '{t}'")))
}

fn dims<R: BufRead>(r: &mut R) -> Result<(usize, usize)> {
    let w = number(r, "width")?;
    let h = number(r, "height")?;
    if w == 0 || h == 0 {
        return Err(format_err(format!("empty image {w}x{h}")));
    }
    Ok((w, h))
}

fn payload<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err(format!("truncated payload, expected {n} bytes")),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

/// Grayscale little-endian PFM; rows stored bottom to top.
pub fn write_pfm<W: Write>(mut w: W, img: &Image<f32>) -> Result<()> {
    if img.channels != 1 {
        return Err(format_err("PFM writer supports one channel"));
    }
    write!(w, "Pf\n{} {}\n-1.0\n", img.width, img.height)?;
    let mut buf = Vec::with_capacity(img.data.len() * 4);
    for row in img.data.chunks(img.width).rev() {
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads grayscale PFM of either endianness.
pub fn read_pfm<R: BufRead>(mut r: R) -> Result<Image<f32>> {
    let magic = token(&mut r)?;
    if magic != "Pf" {
        return Err(format_err(format!("expected grayscale PFM magic 'Pf', got '{magic}'")));
    }
    let (width, height) = dims(&mut r)?;
    let scale_tok = token(&mut r)?;
    let scale: f64 = scale_tok.parse().map_err(|_| format_err(format!("bad PFM scale '{scale_tok}'")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(format_err("PFM scale must be non-zero"));
    }
    let little = scale < 0.0;
    let bytes = payload(&mut r, width * height * 4)?;
    let vals: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| {
            let b = [c[0], c[1], c[2], c[3]];
            if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
        })
        .collect();
    let data = vals.chunks(width).rev().flatten().copied().collect();
    Image::new(width, height, 1, data)
}

/// Binary RGB, maxval 255.
pub fn write_ppm<W: Write>(mut w: W, img: &Image<u8>) -> Result<()> {
    if img.channels != 3 {
        return Err(format_err("PPM needs three channels"));
    }
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.data)?;
    Ok(())
}

pub fn read_ppm<R: BufRead>(mut r: R) -> Result<Image<u8>> {
    let magic = token(&mut r)?;
    if magic != "P6" {
        return Err(format_err(format!("expected PPM magic 'P6', got '{magic}'")));
    }
    let (width, height) = dims(&mut r)?;
    let maxval = number(&mut r, "maxval")?;
    if maxval != 255 {
        return Err(format_err(format!("PPM maxval {maxval} unsupported (need 255)")));
    }
    let data = payload(&mut r, width * height * 3)?;
    Image::new(width, height, 3, data)
}

/// Binary 8-bit graymap with an explicit maxval (labels use `num_labels - 1`).
pub fn write_pgm<W: Write>(mut w: W, img: &Image<u8>, maxval: u8) -> Result<()> {
    if img.channels != 1 {
        return Err(format_err("PGM needs one channel"));
    }
    if maxval == 0 {
        return Err(format_err("PGM maxval must be positive"));
    }
    if let Some(v) = img.data.iter().find(|&&v| v > maxval) {
        return Err(format_err(format!("value {v} exceeds maxval {maxval}")));
    }
    write!(w, "P5\n{} {}\n{}\n", img.width, img.height, maxval)?;
    w.write_all(&img.data)?;
    Ok(())
}

/// A decoded graymap: 8-bit or big-endian 16-bit samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Graymap {
    pub image: Image<u16>,
    pub maxval: u16,
}

pub fn read_pgm<R: BufRead>(mut r: R) -> Result<Graymap> {
    let magic = token(&mut r)?;
    if magic != "P5" {
        return Err(format_err(format!("expected PGM magic 'P5', got '{magic}'")));
    }
    let (width, height) = dims(&mut r)?;
    let maxval = number(&mut r, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(format!("PGM maxval {maxval} out of range")));
    }
    let n = width * height;
    let data: Vec<u16> = if maxval < 256 {
        payload(&mut r, n)?.into_iter().map(u16::from).collect()
    } else {
        payload(&mut r, 2 * n)?.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    if let Some(v) = data.iter().find(|&&v| usize::from(v) > maxval) {
        return Err(format_err(format!("sample {v} exceeds maxval {maxval}")));
    }
    Ok(Graymap { image: Image::new(width, height, 1, data)?, maxval: maxval as u16 })
}
