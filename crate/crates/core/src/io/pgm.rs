//! Binary PGM (P5) images mapped to intensities in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::field::{GridShape, ScalarField};

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, FormatError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(FormatError::NotP5);
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in &mut fields {
        // Whitespace and comments between tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(FormatError::BadPgmHeader("unexpected end of header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(FormatError::BadPgmHeader(format!(
                "expected a number at byte {start}"
            )));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| FormatError::BadPgmHeader(format!("number too large: {text}")))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(FormatError::BadPgmHeader(
            "missing separator before raster".into(),
        ));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 && maxval != 65535 {
        return Err(FormatError::BadMaxval(maxval.min(u32::MAX as u64) as u32));
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        maxval: maxval as u32,
        data_start: pos + 1,
    })
}

pub fn decode(bytes: &[u8]) -> Result<ScalarField> {
    let h = parse_header(bytes)?;
    let shape = GridShape::new2(h.width, h.height)?;
    let bpp = if h.maxval > 255 { 2 } else { 1 };
    let expected = shape.len() * bpp;
    let raster = &bytes[h.data_start..];
    if raster.len() < expected {
        return Err(FormatError::TruncatedPayload {
            expected,
            found: raster.len(),
        }
        .into());
    }
    let scale = 1.0 / h.maxval as f64;
    let values = if bpp == 1 {
        raster[..expected]
            .iter()
            .map(|&b| b as f64 * scale)
            .collect()
    } else {
        raster[..expected]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 * scale)
            .collect()
    };
    ScalarField::new(shape, values)
}

/// 8-bit P5 encoding of a 2D field: values are clamped to `[0, 1]` and
/// rounded to the nearest of 256 levels.
pub fn encode(field: &ScalarField) -> Result<Vec<u8>> {
    let shape = field.shape();
    if shape.ndim() != 2 {
        return Err(Error::InvalidShape(format!(
            "PGM needs a 2D field, got {shape}"
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", shape.extent(0), shape.extent(1)).into_bytes();
    out.extend(
        field
            .values()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn read_pgm(path: &Path) -> Result<ScalarField> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_pgm(field: &ScalarField, path: &Path) -> Result<()> {
    super::write_atomic(path, &encode(field)?)
}
