//! Binary netpbm codecs: P6 (PPM) for RGB images, P5 (PGM) for label maps
//! and gray heatmaps. Only maxval 255 is handled; the writers emit one
//! canonical header form so write∘read∘write is byte-identical.
//!
//! The decoders are strict: exactly one payload, no trailing bytes, and
//! every header failure reports the byte offset it happened at. They take
//! plain byte slices so they can be driven directly by a fuzzer; the
//! path-based wrappers add file context.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::error::DataError;
use crate::fields::LabelField;
use crate::tensor::Tensor4;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("not a {expected} file (magic {found:?})")]
    BadMagic { expected: &'static str, found: String },
    #[error("malformed header at byte {offset}: {what}")]
    Header { offset: usize, what: String },
    #[error("unsupported maxval {maxval} at byte {offset}; only 255 is handled")]
    UnsupportedMaxval { offset: usize, maxval: u64 },
    #[error("payload needs {expected} bytes, file holds {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after the payload")]
    Trailing(usize),
    #[error(transparent)]
    Label(#[from] DataError),
    #[error("cannot encode: {0}")]
    Encode(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn is_pnm_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\r' | b'\n')
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    /// Skips whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if is_pnm_space(b) {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&b) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn decimal(&mut self, what: &str) -> Result<u64, PnmError> {
        self.skip_separators();
        let start = self.pos;
        let mut value: u64 = 0;
        let mut digits = 0usize;
        while let Some(&b) = self.bytes.get(self.pos) {
            if !b.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add(u64::from(b - b'0')))
                .ok_or(PnmError::Header {
                    offset: start,
                    what: format!("{what} overflows"),
                })?;
            digits += 1;
            self.pos += 1;
        }
        if digits == 0 {
            return Err(PnmError::Header { offset: self.pos, what: format!("expected {what}") });
        }
        Ok(value)
    }
}

/// Parses `P6`/`P5`, width, height, maxval and the single separator byte;
/// returns (width, height, payload offset).
fn decode_header(bytes: &[u8], magic: &'static str) -> Result<(usize, usize, usize), PnmError> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        let found: String = bytes
            .iter()
            .take(2)
            .map(|&b| if b.is_ascii_graphic() { b as char } else { '?' })
            .collect();
        return Err(PnmError::BadMagic { expected: magic, found });
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let w = cur.decimal("width")?;
    let h = cur.decimal("height")?;
    let maxval_at = {
        cur.skip_separators();
        cur.pos
    };
    let maxval = cur.decimal("maxval")?;
    if maxval != 255 {
        return Err(PnmError::UnsupportedMaxval { offset: maxval_at, maxval });
    }
    if w == 0 || h == 0 {
        return Err(PnmError::Header {
            offset: 2,
            what: format!("degenerate size {w}x{h}"),
        });
    }
    match bytes.get(cur.pos) {
        Some(&b) if is_pnm_space(b) => Ok((w as usize, h as usize, cur.pos + 1)),
        _ => Err(PnmError::Header {
            offset: cur.pos,
            what: "expected one whitespace byte after maxval".into(),
        }),
    }
}

fn payload<'a>(bytes: &'a [u8], off: usize, expected: usize) -> Result<&'a [u8], PnmError> {
    let found = bytes.len().saturating_sub(off);
    if found < expected {
        return Err(PnmError::Truncated { expected, found });
    }
    if found > expected {
        return Err(PnmError::Trailing(found - expected));
    }
    Ok(&bytes[off..off + expected])
}

/// Decodes a P6 image into a unit-range `1 x H x W x 3` tensor.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor4, PnmError> {
    let (w, h, off) = decode_header(bytes, "P6")?;
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(3))
        .ok_or(PnmError::Header { offset: 2, what: "size overflows".into() })?;
    let raw = payload(bytes, off, expected)?;
    let data: Vec<f64> = raw.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Tensor4::from_vec(1, h, w, 3, data).expect("byte payload is finite and sized"))
}

/// Encodes a unit-range `1 x H x W x 3` tensor as P6; values are clamped
/// to [0, 1] and rounded to the nearest of 256 levels.
pub fn encode_ppm(image: &Tensor4) -> Result<Vec<u8>, PnmError> {
    let (n, h, w, c) = image.dims();
    if n != 1 || c != 3 {
        return Err(PnmError::Encode(format!("need a 1 x H x W x 3 tensor, got {n} x {h} x {w} x {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Decodes a P5 label map; each gray level is a class index and must lie
/// below `num_classes`.
pub fn decode_pgm(bytes: &[u8], num_classes: usize) -> Result<LabelField, PnmError> {
    let (w, h, off) = decode_header(bytes, "P5")?;
    let expected = h
        .checked_mul(w)
        .ok_or(PnmError::Header { offset: 2, what: "size overflows".into() })?;
    let raw = payload(bytes, off, expected)?;
    Ok(LabelField::from_vec(h, w, num_classes, raw.to_vec())?)
}

/// Encodes a label map as P5 with the class index as the gray level.
pub fn encode_pgm(labels: &LabelField) -> Vec<u8> {
    let (h, w) = (labels.h(), labels.w());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(labels.data());
    out
}

/// Encodes raw gray bytes (already scaled to 0..=255) as P5, for heatmaps.
pub fn encode_pgm_gray(h: usize, w: usize, gray: &[u8]) -> Result<Vec<u8>, PnmError> {
    if gray.len() != h * w || h == 0 || w == 0 {
        return Err(PnmError::Encode(format!(
            "{} gray bytes do not fill {h} x {w}",
            gray.len()
        )));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    Ok(out)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PnmError + '_ {
    move |source| PnmError::Io { path: path.to_path_buf(), source }
}

pub fn read_ppm(path: &Path) -> Result<Tensor4, PnmError> {
    decode_ppm(&fs::read(path).map_err(io_err(path))?)
}

pub fn write_ppm(path: &Path, image: &Tensor4) -> Result<(), PnmError> {
    fs::write(path, encode_ppm(image)?).map_err(io_err(path))
}

pub fn read_pgm(path: &Path, num_classes: usize) -> Result<LabelField, PnmError> {
    decode_pgm(&fs::read(path).map_err(io_err(path))?, num_classes)
}

pub fn write_pgm(path: &Path, labels: &LabelField) -> Result<(), PnmError> {
    fs::write(path, encode_pgm(labels)).map_err(io_err(path))
}

pub fn write_pgm_gray(path: &Path, h: usize, w: usize, gray: &[u8]) -> Result<(), PnmError> {
    fs::write(path, encode_pgm_gray(h, w, gray)?).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_bit_identical() {
        let vals: Vec<f64> = (0..12).map(|i| f64::from(i as u8 * 20) / 255.0).collect();
        let img = Tensor4::from_vec(1, 2, 2, 3, vals).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(encode_ppm(&back).unwrap(), bytes);
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn pgm_round_trip_preserves_labels() {
        let labels = LabelField::from_vec(2, 3, 4, vec![0, 1, 2, 3, 3, 0]).unwrap();
        let bytes = encode_pgm(&labels);
        let back = decode_pgm(&bytes, 4).unwrap();
        assert_eq!(back.data(), labels.data());
        assert_eq!(encode_pgm(&back), bytes);
    }

    #[test]
    fn label_value_at_class_count_is_rejected() {
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 3]);
        let err = decode_pgm(&bytes, 3).unwrap_err();
        assert!(matches!(err, PnmError::Label(DataError::LabelRange { value: 3, .. })), "{err}");
    }

    #[test]
    fn sixteen_bit_maxval_is_rejected_with_offset() {
        let bytes = b"P6\n2 2\n65535\n".to_vec();
        match decode_ppm(&bytes).unwrap_err() {
            PnmError::UnsupportedMaxval { maxval: 65535, offset } => assert_eq!(offset, 7),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5 # a comment\n# another\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[5, 7]);
        let labels = decode_pgm(&bytes, 256).unwrap();
        assert_eq!(labels.data(), &[5, 7]);
    }

    #[test]
    fn truncation_and_trailing_bytes_are_distinct_errors() {
        let good = encode_pgm(&LabelField::zeros(2, 2, 2));
        let mut short = good.clone();
        short.pop();
        assert!(matches!(decode_pgm(&short, 2), Err(PnmError::Truncated { .. })));
        let mut long = good;
        long.push(0);
        assert!(matches!(decode_pgm(&long, 2), Err(PnmError::Trailing(1))));
    }

    #[test]
    fn wrong_magic_is_reported() {
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n0"), Err(PnmError::BadMagic { .. })));
        assert!(matches!(decode_pgm(b"", 2), Err(PnmError::BadMagic { .. })));
    }

    #[test]
    fn header_overflow_is_an_error_not_a_panic() {
        let bytes = b"P5\n99999999999999999999 1\n255\n".to_vec();
        assert!(matches!(decode_pgm(&bytes, 2), Err(PnmError::Header { .. })));
        // Width times height overflowing usize is also caught.
        let big = format!("P5\n{0} {0}\n255\n", u64::MAX / 2);
        assert!(decode_pgm(big.as_bytes(), 2).is_err());
    }

    #[test]
    fn out_of_range_values_clamp_on_write() {
        let img = Tensor4::from_vec(1, 1, 1, 3, vec![-0.5, 0.5, 1.5]).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
    }

    #[test]
    fn gray_writer_checks_its_size() {
        assert!(encode_pgm_gray(2, 2, &[0, 1, 2, 3]).is_ok());
        assert!(encode_pgm_gray(2, 2, &[0, 1, 2]).is_err());
    }

    #[test]
    fn file_wrappers_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.ppm");
        let img = Tensor4::filled(1, 4, 4, 3, 0.25);
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(back.dims(), (1, 4, 4, 3));
        let missing = read_ppm(&dir.path().join("absent.ppm"));
        assert!(matches!(missing, Err(PnmError::Io { .. })));
    }
}
