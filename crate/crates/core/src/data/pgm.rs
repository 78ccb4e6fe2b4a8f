//! Netpbm grayscale (PGM) reading and writing.
//!
//! Reads plain (`P2`) and raw (`P5`) files with `maxval` up to 255; writes raw
//! `P5` with `maxval = 255`.

use std::path::Path;

use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major samples, each `<= maxval`.
    pub pixels: Vec<u8>,
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    /// Skips whitespace and `#` comments; errors if nothing was skipped and
    /// `required` is set.
    fn skip_separators(&mut self, required: bool) -> Result<()> {
        let start = self.pos;
        loop {
            match self.buf.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.buf.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        if required && self.pos == start {
            return Err(parse_err(self.pos, "expected whitespace"));
        }
        Ok(())
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(match self.buf.get(self.pos) {
                None => parse_err(start, format!("unexpected end of file, expected {what}")),
                Some(&b) => parse_err(start, format!("expected {what}, found byte 0x{b:02x}")),
            });
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(start, format!("{what} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<PgmImage> {
    let plain = match bytes.get(..2) {
        Some(b"P2") => true,
        Some(b"P5") => false,
        Some(_) => return Err(parse_err(0, "not a PGM file (expected P2 or P5)")),
        None => return Err(parse_err(0, "unexpected end of file in magic number")),
    };
    let mut c = Cursor { buf: bytes, pos: 2 };
    c.skip_separators(true)?;
    let width_at = c.pos;
    let width = c.number("width")?;
    c.skip_separators(true)?;
    let height_at = c.pos;
    let height = c.number("height")?;
    c.skip_separators(true)?;
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if width == 0 {
        return Err(parse_err(width_at, "width must be positive"));
    }
    if height == 0 {
        return Err(parse_err(height_at, "height must be positive"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(parse_err(maxval_at, format!("unsupported maxval {maxval} (1..=255 supported)")));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| parse_err(width_at, "image dimensions overflow"))?;
    let pixels = if plain {
        let mut pixels = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            c.skip_separators(true)?;
            let at = c.pos;
            let v = c.number("sample")?;
            if v > maxval {
                return Err(parse_err(at, format!("sample {v} exceeds maxval {maxval}")));
            }
            pixels.push(v as u8);
        }
        pixels
    } else {
        match bytes.get(c.pos) {
            Some(b) if b.is_ascii_whitespace() => c.pos += 1,
            Some(_) => return Err(parse_err(c.pos, "expected a single whitespace after maxval")),
            None => return Err(parse_err(c.pos, "unexpected end of file after maxval")),
        }
        let raster = &bytes[c.pos..];
        if raster.len() < n {
            return Err(parse_err(
                bytes.len(),
                format!("truncated raster: expected {n} bytes, found {}", raster.len()),
            ));
        }
        if let Some(i) = raster[..n].iter().position(|&v| v as usize > maxval) {
            return Err(parse_err(c.pos + i, format!("sample exceeds maxval {maxval}")));
        }
        raster[..n].to_vec()
    };
    Ok(PgmImage {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

/// Raw `P5` encoding.
pub fn encode(img: &PgmImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

impl PgmImage {
    /// `(H, W)` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let m = self.maxval as f64;
        Tensor::from_parts(
            vec![self.height, self.width],
            self.pixels.iter().map(|&v| v as f64 / m).collect(),
        )
    }

    /// Quantizes a `(H, W)` or `(1, H, W)` tensor in `[0, 1]` to 8 bits.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (height, width) = match *t.shape() {
            [h, w] | [1, h, w] => (h, w),
            _ => {
                return Err(Error::InvalidTensor(format!(
                    "cannot write shape {:?} as a grayscale image",
                    t.shape()
                )))
            }
        };
        let pixels = t
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Ok(Self {
            width,
            height,
            maxval: 255,
            pixels,
        })
    }
}

pub fn load_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?.to_tensor())
}

pub fn save_pgm(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = encode(&PgmImage::from_tensor(t)?);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `1` where the value exceeds `threshold`, else `0`.
pub fn binarize_gt(t: &Tensor, threshold: f64) -> Tensor {
    t.map(|v| if v > threshold { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn p5_binarize() {
        let bytes = b"P5\n2 2\n255\n\x00\xff\x00\xff";
        let t = decode(bytes).unwrap().to_tensor();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(binarize_gt(&t, 0.5).data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn all_zero_mask() {
        let bytes = b"P5 3 1 255 \x00\x00\x00";
        let t = decode(bytes).unwrap().to_tensor();
        assert!(binarize_gt(&t, 0.5).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn plain_with_comments() {
        let bytes = b"P2\n# a comment\n3 2 # trailing\n15\n0 15 3\n 7 0\n15\n";
        let img = decode(bytes).unwrap();
        assert_eq!((img.width, img.height, img.maxval), (3, 2, 15));
        assert_eq!(img.pixels, vec![0, 15, 3, 7, 0, 15]);
        assert_eq!(img.to_tensor().data()[1], 1.0);
    }

    #[test]
    fn rejects_bad_headers() {
        let cases: &[&[u8]] = &[
            b"",
            b"P",
            b"P6\n1 1\n255\n\x00",
            b"P5",
            b"P5\n",
            b"P5\nx 1\n255\n\x00",
            b"P5\n0 1\n255\n",
            b"P5\n2\n",
            b"P5\n2 2\n",
            b"P5\n2 2\n0\n\x00\x00\x00\x00",
            b"P5\n2 2\n65535\n\x00\x00\x00\x00",
            b"P5\n2 2\n255",
            b"P5\n2 2\n255\n\x00\x00\x00",
            b"P2\n2 1\n10\n3 11\n",
            b"P2\n2 1\n10\n3\n",
        ];
        for bytes in cases {
            match decode(bytes) {
                Err(Error::Parse { .. }) => {}
                other => panic!("{:?} -> {other:?}", String::from_utf8_lossy(bytes)),
            }
        }
    }

    #[test]
    fn quantization_of_tensor() {
        let t = Tensor::new([1, 1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        let img = PgmImage::from_tensor(&t).unwrap();
        assert_eq!(img.pixels, vec![0, 128, 255]);
    }

    proptest! {
        #[test]
        fn raw_round_trip(w in 1usize..16, h in 1usize..16, seed in any::<u64>()) {
            let mut rng = crate::SeededRng::new(seed);
            let pixels: Vec<u8> = (0..w * h).map(|_| rng.next_u64() as u8).collect();
            let img = PgmImage { width: w, height: h, maxval: 255, pixels };
            let back = decode(&encode(&img)).unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(PgmImage::from_tensor(&back.to_tensor()).unwrap(), img);
        }
    }
}
