//! Binary PGM (P5) images and label maps, raw `f64` planes.

use std::path::Path;

use crate::dataio::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::maps::{Image, LabelMap, ScribbleMap};

/// Decoded P5 payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u8,
    pub pixels: Vec<u8>,
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Header<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Parse { path: self.path.into(), offset: self.pos, reason: reason.into() }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
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
            return Err(self.fail(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Parse { path: self.path.into(), offset: start, reason: format!("{what} out of range") })
    }
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Pgm> {
    let mut r = Header { bytes, pos: 0, path };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(r.fail("missing P5 magic"));
    }
    r.pos = 2;
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if !(1..=255).contains(&maxval) {
        return Err(r.fail(format!("maxval {maxval} unsupported; only 8-bit files are read")));
    }
    if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
        return Err(r.fail("expected a single whitespace byte after maxval"));
    }
    r.pos += 1;
    let n = width.checked_mul(height).ok_or_else(|| r.fail("extent overflows"))?;
    let payload = &bytes[r.pos..];
    if payload.len() < n {
        r.pos = bytes.len();
        return Err(r.fail(format!("truncated payload: {} of {n} pixel bytes", payload.len())));
    }
    if payload.len() > n {
        r.pos += n;
        return Err(r.fail("trailing bytes after payload"));
    }
    Ok(Pgm { width, height, maxval: maxval as u8, pixels: payload.to_vec() })
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    decode_pgm(&read_file(path)?, path)
}

/// Grayscale image scaled to `[0, 1]` by the file's maxval.
pub fn read_image(path: &Path) -> Result<Image> {
    let p = read_pgm(path)?;
    let scale = p.maxval as f64;
    Image::gray(p.height, p.width, p.pixels.iter().map(|&v| v as f64 / scale).collect())
}

/// Quantise `[0, 1]` intensities to 8 bits.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    if image.channels != 1 {
        return Err(Error::contract(format!("PGM holds one channel, image has {}", image.channels)));
    }
    let px: Vec<u8> = image.data.iter().map(|&v| quantize(v)).collect();
    write_atomic(path, &encode_pgm(image.width, image.height, &px))
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let p = read_pgm(path)?;
    LabelMap::from_vec(p.height, p.width, p.pixels)
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    write_atomic(path, &encode_pgm(labels.width, labels.height, &labels.data))
}

pub fn read_scribbles(path: &Path) -> Result<ScribbleMap> {
    let p = read_pgm(path)?;
    ScribbleMap::from_vec(p.height, p.width, p.pixels)
}

pub fn write_scribbles(path: &Path, scribbles: &ScribbleMap) -> Result<()> {
    write_atomic(path, &encode_pgm(scribbles.width, scribbles.height, &scribbles.data))
}

/// Headerless little-endian `f64` values in plane order.
pub fn write_f64_raw(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(path, &bytes)
}

pub fn read_f64_raw(path: &Path) -> Result<Vec<f64>> {
    let bytes = read_file(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse {
            path: path.into(),
            offset: bytes.len() - bytes.len() % 8,
            reason: "length is not a multiple of 8".into(),
        });
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let labels = LabelMap::from_vec(2, 3, vec![0, 1, 2, 255, 3, 0]).unwrap();
        write_labels(&path, &labels).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(read_labels(&path).unwrap(), labels);
        write_labels(&path, &read_labels(&path).unwrap()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        assert_eq!(read_scribbles(&path).unwrap().data[3], crate::UNLABELED);
    }

    #[test]
    fn intensity_is_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pgm");
        std::fs::write(&path, encode_pgm(1, 1, &[128])).unwrap();
        assert!((read_image(&path).unwrap().data[0] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let bytes = b"P5 # made by hand\n2 1\n# depth\n255\n\x01\x02";
        let p = decode_pgm(bytes, Path::new("x")).unwrap();
        assert_eq!((p.width, p.height, p.pixels), (2, 1, vec![1, 2]));
    }

    #[test]
    fn malformed_files_report_offsets() {
        let at = |bytes: &[u8]| match decode_pgm(bytes, Path::new("x")).unwrap_err() {
            Error::Parse { offset, .. } => offset,
            e => panic!("{e}"),
        };
        assert_eq!(at(b"P6\n1 1\n255\n\x00"), 0);
        assert_eq!(at(b"P5\n1 x\n255\n\x00"), 5);
        assert_eq!(at(b"P5\n2 2\n255\n\x00"), 12);
        assert_eq!(at(b"P5\n1 1\n65535\n\x00\x00"), 12);
    }
}
