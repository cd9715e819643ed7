//! Binary PPM (`P6`, 8-bit) and grayscale PFM (`Pf`) readers and writers.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            format: self.format,
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("unexpected end of header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::Format {
            format: self.format,
            offset: start,
            reason: "header is not ASCII".into(),
        })
    }

    fn number<N: std::str::FromStr>(&mut self, what: &str) -> Result<N> {
        let start = {
            self.skip_space_and_comments();
            self.pos
        };
        let tok = self.token()?;
        tok.parse().map_err(|_| Error::Format {
            format: self.format,
            offset: start,
            reason: format!("invalid {what} `{tok}`"),
        })
    }

    /// Consumes the single whitespace byte that ends a header.
    fn end_header(&mut self) -> Result<()> {
        match self.bytes.get(self.pos) {
            Some(c) if c.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err("header must end with one whitespace byte")),
        }
    }
}

/// Decodes a `P6` image with maxval 255 into a `1×3×H×W` tensor in `[0,1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        format: "PPM",
    };
    let magic = c.token()?;
    if magic != "P6" {
        return Err(Error::Format {
            format: "PPM",
            offset: 0,
            reason: format!("expected magic P6, found `{magic}`"),
        });
    }
    let w: usize = c.number("width")?;
    let h: usize = c.number("height")?;
    c.skip_space_and_comments();
    let maxval_at = c.pos;
    let maxval: u32 = c.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Format {
            format: "PPM",
            offset: maxval_at,
            reason: format!("only maxval 255 is supported, found {maxval}"),
        });
    }
    c.end_header()?;
    let need = w * h * 3;
    let body = &bytes[c.pos..];
    if body.len() < need {
        return Err(Error::Format {
            format: "PPM",
            offset: bytes.len(),
            reason: format!("expected {need} pixel bytes, found {}", body.len()),
        });
    }
    let shape = Shape::new(1, 3, h, w);
    let mut t = Tensor::zeros(shape);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = body[(y * w + x) * 3 + ch];
                t.set(0, ch, y, x, v as f32 / 255.0);
            }
        }
    }
    Ok(t)
}

/// Encodes channels 0..3 of batch item 0, rounding to 8 bits.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.c != 3 {
        return Err(Error::invalid("save_image", format!("expected 3 channels, got {s}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.reserve(s.plane() * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for ch in 0..3 {
                let v = image.at(0, ch, y, x).clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Decodes a single-channel `Pf` map into `1×1×H×W`, top row first.
pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        format: "PFM",
    };
    let magic = c.token()?;
    if magic != "Pf" {
        return Err(Error::Format {
            format: "PFM",
            offset: 0,
            reason: format!("expected grayscale magic Pf, found `{magic}`"),
        });
    }
    let w: usize = c.number("width")?;
    let h: usize = c.number("height")?;
    let scale: f32 = c.number("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(c.err("scale must be a non-zero finite number"));
    }
    c.end_header()?;
    let little = scale < 0.0;
    let need = w * h * 4;
    let body = &bytes[c.pos..];
    if body.len() < need {
        return Err(Error::Format {
            format: "PFM",
            offset: bytes.len(),
            reason: format!("expected {need} data bytes, found {}", body.len()),
        });
    }
    let mut t = Tensor::zeros(Shape::new(1, 1, h, w));
    for (i, chunk) in body[..need].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        // Rows are stored bottom-up.
        let (row, x) = (i / w, i % w);
        t.set(0, 0, h - 1 - row, x, v);
    }
    Ok(t)
}

/// Encodes channel 0 of batch item 0 as little-endian `Pf`, bottom row first.
pub fn encode_pfm(map: &Tensor<f32>) -> Vec<u8> {
    let s = map.shape();
    let mut out = format!("Pf\n{} {}\n-1.0\n", s.w, s.h).into_bytes();
    out.reserve(s.plane() * 4);
    for y in (0..s.h).rev() {
        for x in 0..s.w {
            out.extend_from_slice(&map.at(0, 0, y, x).to_le_bytes());
        }
    }
    out
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn load_pfm(path: &Path) -> Result<Tensor<f32>> {
    decode_pfm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_pfm(path: &Path, map: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_pfm(map)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_built_pfm_decodes() {
        // 2 wide, 1 high, little-endian: values 1.5 and -2.0.
        let mut bytes = b"Pf\n2 1\n-1.0\n".to_vec();
        bytes.extend_from_slice(&[0x00, 0x00, 0xC0, 0x3F]);
        bytes.extend_from_slice(&[0x00, 0x00, 0x00, 0xC0]);
        let t = decode_pfm(&bytes).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 1, 1, 2));
        assert_eq!(t.data(), &[1.5, -2.0]);
    }

    #[test]
    fn pfm_rows_are_bottom_up() {
        let t = Tensor::from_vec(Shape::new(1, 1, 2, 1), vec![1.0f32, 2.0]).unwrap();
        let bytes = encode_pfm(&t);
        let body = &bytes[bytes.len() - 8..];
        assert_eq!(&body[..4], &2.0f32.to_le_bytes());
        assert_eq!(&body[4..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn big_endian_pfm_is_accepted() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&0.25f32.to_be_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap().data(), &[0.25]);
    }

    #[test]
    fn ppm_maxval_other_than_255_is_rejected() {
        let mut bytes = b"P6\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0; 6]);
        match decode_ppm(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        assert!(matches!(
            decode_ppm(b"P3\n1 1\n255\n"),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            decode_pfm(b"PF\n1 1\n-1\n"),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn truncated_body_is_rejected() {
        assert!(decode_ppm(b"P6\n2 2\n255\n\x01\x02").is_err());
        assert!(decode_pfm(b"Pf\n2 2\n-1.0\n\x00\x00").is_err());
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 51]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.2]);
    }

    proptest! {
        #[test]
        fn pfm_round_trip_is_bit_exact(
            h in 1usize..6, w in 1usize..6,
            seed in any::<u64>()
        ) {
            let mut state = seed | 1;
            let t = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, _, _| {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                f32::from_bits((state >> 32) as u32)
            });
            let back = decode_pfm(&encode_pfm(&t)).unwrap();
            let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn ppm_round_trip_within_quantization(
            h in 1usize..5, w in 1usize..5, vals in prop::collection::vec(0.0f32..=1.0, 75)
        ) {
            let t = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| vals[(c * 25 + y * 5 + x) % 75]);
            let back = decode_ppm(&encode_ppm(&t).unwrap()).unwrap();
            for (a, b) in t.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }
}
