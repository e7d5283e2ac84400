//! Binary PPM (`P6`) and PGM (`P5`) images with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    /// Interleaved samples, rows top to bottom.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Invalid(format!("{channels} channels (expected 1 or 3)")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Invalid(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    /// Gray images are replicated into three identical channels.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    /// `1×C×H×W` tensor with values divided by 255.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (c, w) = (self.channels, self.width);
        Tensor::from_fn(Shape::new(1, c, self.height, w), |_, ch, y, x| {
            T::from_f64(self.data[(y * w + x) * c + ch] as f64 / 255.0)
        })
    }

    /// Inverse of [`Image::to_tensor`] for the first sample; values are
    /// clamped to `[0,1]` and rounded.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Image> {
        let s = t.shape();
        if s.n == 0 || (s.c != 1 && s.c != 3) {
            return Err(Error::shape("image", format!("cannot store tensor {s} as an image")));
        }
        let mut data = Vec::with_capacity(s.c * s.plane());
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..s.c {
                    let v = t.at(0, c, y, x).as_f64();
                    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                    data.push((v * 255.0).round() as u8);
                }
            }
        }
        Image::new(s.w, s.h, s.c, data)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut cur = Cursor { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(cur.err("not a binary PPM/PGM file (expected P6 or P5)")),
    };
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_space();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Format {
            offset: maxval_at,
            msg: format!("maxval {maxval} unsupported (expected 255)"),
        });
    }
    if !cur.bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(cur.err("expected a single whitespace byte after maxval"));
    }
    cur.pos += 1;
    if width == 0 || height == 0 {
        return Err(cur.err(format!("empty image {width}x{height}")));
    }
    let need = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .ok_or_else(|| cur.err("image dimensions overflow"))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: format!("truncated payload: expected {need} bytes, found {}", payload.len()),
        });
    }
    if payload.len() > need {
        return Err(Error::Format {
            offset: cur.pos + need,
            msg: format!("{} trailing bytes after payload", payload.len() - need),
        });
    }
    Image::new(width, height, channels, payload.to_vec())
}

pub fn encode(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode(&std::fs::read(path)?)
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    std::fs::write(path, encode(img))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_white_pixel() {
        let img = decode(b"P6 1 1 255 \xff\xff\xff").unwrap();
        assert_eq!((img.width, img.height, img.channels), (1, 1, 3));
        assert_eq!(img.data, [255, 255, 255]);
    }

    #[test]
    fn header_comments_and_gray() {
        let img = decode(b"P5\n# comment\n2 1\n255\n\x00\x80").unwrap();
        assert_eq!(img.channels, 1);
        let rgb = img.to_rgb();
        assert_eq!(rgb.data, [0, 0, 0, 128, 128, 128]);
    }

    #[test]
    fn errors_carry_offsets() {
        let cases: [(&[u8], usize); 5] = [
            (b"P3 1 1 255 x", 0),
            (b"P6 1 1 65535 \x00", 7),
            (b"P6 1 1 255 \xff\xff", 13),
            (b"P6 x", 3),
            (b"P6 1 1 255 \xff\xff\xff\x00", 14),
        ];
        for (bytes, offset) in cases {
            match decode(bytes) {
                Err(Error::Format { offset: o, .. }) => assert_eq!(o, offset, "{bytes:?}"),
                other => panic!("{bytes:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn tensor_conversion_round_trip() {
        let data: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = Image::new(4, 3, 3, data).unwrap();
        let t = img.to_tensor::<f32>();
        assert_eq!(t.shape(), Shape::new(1, 3, 3, 4));
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
        assert_eq!(decode(&encode(&img)).unwrap(), img);
    }
}
