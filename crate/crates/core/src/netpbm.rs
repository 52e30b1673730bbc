//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Planar `3 x H x W` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut out = vec![0.0f32; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        Tensor::new(vec![3, self.height, self.width], out).expect("finite pixels")
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn put(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::format(path, "file too short for a netpbm header"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format(path, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "header field out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(path, "missing whitespace after maxval")),
    }
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        data_start: pos,
    })
}

fn check_body(h: &Header, bytes: &[u8], channels: usize, path: &Path) -> Result<()> {
    if h.maxval == 0 || h.maxval > 255 {
        return Err(Error::format(path, format!("unsupported maxval {}", h.maxval)));
    }
    let need = h.width * h.height * channels;
    if bytes.len() - h.data_start < need {
        return Err(Error::format(
            path,
            format!("pixel data has {} bytes, need {need}", bytes.len() - h.data_start),
        ));
    }
    Ok(())
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let h = parse_header(bytes, path)?;
    if &h.magic != b"P6" {
        return Err(Error::format(path, "not a binary PPM (P6)"));
    }
    check_body(&h, bytes, 3, path)?;
    let n = h.width * h.height * 3;
    Ok(RgbImage {
        width: h.width,
        height: h.height,
        data: bytes[h.data_start..h.data_start + n].to_vec(),
    })
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let h = parse_header(bytes, path)?;
    if &h.magic != b"P5" {
        return Err(Error::format(path, "not a binary PGM (P5)"));
    }
    check_body(&h, bytes, 1, path)?;
    let n = h.width * h.height;
    Ok(GrayImage {
        width: h.width,
        height: h.height,
        data: bytes[h.data_start..h.data_start + n].to_vec(),
    })
}

fn header(magic: &str, width: usize, height: usize, comments: &[String]) -> Vec<u8> {
    let mut out = format!("{magic}\n");
    for c in comments {
        for line in c.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
    }
    out.push_str(&format!("{width} {height}\n255\n"));
    out.into_bytes()
}

pub fn encode_ppm(img: &RgbImage, comments: &[String]) -> Vec<u8> {
    let mut out = header("P6", img.width, img.height, comments);
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pgm(img: &GrayImage, comments: &[String]) -> Vec<u8> {
    let mut out = header("P5", img.width, img.height, comments);
    out.extend_from_slice(&img.data);
    out
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_ppm(&bytes, path)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_pgm(&bytes, path)
}

pub fn write_ppm(path: &Path, img: &RgbImage, comments: &[String]) -> Result<()> {
    fs::write(path, encode_ppm(img, comments)).map_err(Error::io(path))
}

pub fn write_pgm(path: &Path, img: &GrayImage, comments: &[String]) -> Result<()> {
    fs::write(path, encode_pgm(img, comments)).map_err(Error::io(path))
}
