//! Binary PNM images (P5 grayscale, P6 RGB) as `[C,H,W]` tensors in `[0,1]`.

use crate::error::{domain, parse_err, Result};
use crate::tensor::Tensor;

/// Maps a value in `[0,1]` to an 8-bit level, rounding half to even.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Encodes a `[1,H,W]` tensor as P5 or a `[3,H,W]` tensor as P6.
pub fn encode_pnm(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = img.dims3()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(domain(format!("PNM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    out.reserve(c * plane);
    for i in 0..plane {
        for ch in 0..c {
            out.push(quantize(img.data()[ch * plane + i]));
        }
    }
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(start, format!("{what} out of range")))
    }
}

/// Decodes a binary P5/P6 image with maxval up to 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let c = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(parse_err(0, "bad magic, expected P5 or P6")),
    };
    let mut hd = Header { bytes, pos: 2 };
    let w = hd.number("width")?;
    let h = hd.number("height")?;
    let maxval_at = hd.pos;
    let maxval = hd.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(parse_err(maxval_at, format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(parse_err(2, "image has zero extent"));
    }
    match bytes.get(hd.pos) {
        Some(b) if b.is_ascii_whitespace() => hd.pos += 1,
        _ => return Err(parse_err(hd.pos, "expected whitespace after maxval")),
    }
    let plane = h * w;
    let need = c * plane;
    let body = &bytes[hd.pos..];
    if body.len() < need {
        return Err(parse_err(
            bytes.len(),
            format!("truncated pixel data: need {need} bytes, have {}", body.len()),
        ));
    }
    let scale = maxval as f64;
    let mut data = vec![0.0; need];
    for i in 0..plane {
        for ch in 0..c {
            data[ch * plane + i] = body[i * c + ch] as f64 / scale;
        }
    }
    Tensor::from_vec(&[c, h, w], data)
}

pub fn read_pnm(path: &std::path::Path) -> Result<Tensor> {
    decode_pnm(&std::fs::read(path)?)
}

pub fn write_pnm(path: &std::path::Path, img: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pnm(img)?)?;
    Ok(())
}
