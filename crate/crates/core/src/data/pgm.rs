//! Binary PGM (P5, maxval 255) encoding.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Rounds and clamps a `H x W x 1` (or `H x W`) intensity tensor.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (height, width) = match *t.dims() {
            [h, w] | [h, w, 1] => (h, w),
            ref d => return Err(Error::shape(format!("not a grayscale image: {d:?}"))),
        };
        Ok(GrayImage {
            width,
            height,
            pixels: t.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(
            &[self.height, self.width, 1],
            self.pixels.iter().map(|&v| f32::from(v)).collect(),
        )
        .expect("pixel count matches dims")
    }
}

pub fn write_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format {
        offset: 0,
        msg: msg.into(),
    }
}

pub fn read_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if !bytes.starts_with(b"P5") {
        return Err(bad("not a binary PGM (missing P5 magic)"));
    }
    // Three header fields follow the magic, separated by whitespace and
    // optional `#` comments; exactly one whitespace byte precedes the raster.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: start,
                msg: "malformed PGM header".into(),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("PGM header value out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(format!("unsupported PGM maxval {maxval} (expected 255)")));
    }
    if width == 0 || height == 0 {
        return Err(bad("PGM has zero extent"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format {
            offset: pos,
            msg: "missing whitespace before PGM raster".into(),
        });
    }
    let raster = &bytes[pos + 1..];
    if raster.len() != width * height {
        return Err(Error::Format {
            offset: pos + 1,
            msg: format!("PGM raster has {} bytes, expected {}", raster.len(), width * height),
        });
    }
    Ok(GrayImage {
        width,
        height,
        pixels: raster.to_vec(),
    })
}
