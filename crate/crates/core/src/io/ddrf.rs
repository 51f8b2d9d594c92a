//! DDRF: a minimal little-endian container for scalar and vector fields.
//!
//! ```text
//! "DDRF" | version u32 = 1 | ndim u32 | dims ndim x u32 | channels u32 | dtype u32 = 0
//! payload: product(dims) * channels f32, channels interleaved, first axis fastest
//! ```

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::field::{GridShape, ScalarField, VectorField};

pub const MAGIC: [u8; 4] = *b"DDRF";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

#[derive(Clone, Debug, PartialEq)]
pub enum Field {
    Scalar(ScalarField),
    Vector(VectorField),
}

impl Field {
    pub fn shape(&self) -> GridShape {
        match self {
            Field::Scalar(f) => f.shape(),
            Field::Vector(f) => f.shape(),
        }
    }

    pub fn into_scalar(self) -> Result<ScalarField> {
        match self {
            Field::Scalar(f) => Ok(f),
            Field::Vector(f) => Err(Error::InvalidField(format!(
                "expected a scalar field, found a {}-channel vector field",
                f.ndim()
            ))),
        }
    }

    pub fn into_vector(self) -> Result<VectorField> {
        match self {
            Field::Vector(f) => Ok(f),
            Field::Scalar(_) => Err(Error::InvalidField(
                "expected a vector field, found a scalar field".into(),
            )),
        }
    }
}

impl From<ScalarField> for Field {
    fn from(f: ScalarField) -> Self {
        Field::Scalar(f)
    }
}

impl From<VectorField> for Field {
    fn from(f: VectorField) -> Self {
        Field::Vector(f)
    }
}

fn header_len(ndim: usize) -> usize {
    4 + 4 + 4 + 4 * ndim + 4 + 4
}

/// Serializes a field; values are rounded to `f32`.
pub fn encode(field: &Field) -> Vec<u8> {
    let (shape, channels, data) = match field {
        Field::Scalar(f) => (f.shape(), 1, f.values()),
        Field::Vector(f) => (f.shape(), f.ndim(), f.data()),
    };
    let mut out = Vec::with_capacity(header_len(shape.ndim()) + data.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(shape.ndim() as u32).to_le_bytes());
    for &d in shape.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(channels as u32).to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self) -> Result<u32, FormatError> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or(FormatError::TruncatedHeader)?;
        self.pos += 4;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a DDRF byte buffer. Nothing is returned unless the whole payload
/// is present and valid.
pub fn decode(bytes: &[u8]) -> Result<Field, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::TruncatedHeader);
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let ndim = cur.u32()?;
    if !(2..=3).contains(&ndim) {
        return Err(FormatError::DimOverflow(vec![ndim]));
    }
    let dims: Vec<u32> = (0..ndim).map(|_| cur.u32()).collect::<Result<_, _>>()?;
    let channels = cur.u32()?;
    let dtype = cur.u32()?;
    if dtype != DTYPE_F32 {
        return Err(FormatError::BadDtype(dtype));
    }
    if channels != 1 && channels != ndim {
        return Err(FormatError::BadChannels { channels, ndim });
    }
    let dims_usize: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    let shape = GridShape::new(&dims_usize).map_err(|_| FormatError::DimOverflow(dims.clone()))?;
    let expected = shape
        .len()
        .checked_mul(channels as usize)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| FormatError::DimOverflow(dims.clone()))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(FormatError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(FormatError::TrailingData(payload.len() - expected));
    }
    let mut data = Vec::with_capacity(expected / 4);
    for (i, b) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if !v.is_finite() {
            return Err(FormatError::NonFinitePayload(i));
        }
        data.push(v as f64);
    }
    let field = if channels == 1 {
        Field::Scalar(ScalarField::new(shape, data).expect("validated payload"))
    } else {
        Field::Vector(VectorField::new(shape, data).expect("validated payload"))
    };
    Ok(field)
}

pub fn read_field(path: &Path) -> Result<Field> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

/// Atomically writes `field` to `path`.
pub fn write_field(field: &Field, path: &Path) -> Result<()> {
    super::write_atomic(path, &encode(field))
}
