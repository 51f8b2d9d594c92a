//! Dividing and downsampling: overlapping chunk tiling with feathered
//! merging, and fusion of the half-resolution global velocity with the
//! merged chunk velocities at full resolution.
//!
//! Each axis is split into two chunks of extent `ceil(n/2) + overlap`, one
//! anchored at the origin and one at the far face, giving `2^ndim` chunks.
//! Inside the shared band the weights ramp linearly so that the weights of
//! all chunks covering a voxel sum to one.

use crate::error::{Error, Result};
use crate::field::{upsample, GridField, GridShape, ScalarField, VectorField};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PyramidConfig {
    /// Extra voxels each chunk extends past the grid midpoint.
    pub overlap: usize,
    /// Weight of the upsampled global velocity in the fused field; the merged
    /// chunk velocity receives `1 - global_weight`.
    pub global_weight: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            overlap: 4,
            global_weight: 0.5,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.global_weight) {
            return Err(Error::InvalidConfig(format!(
                "global_weight must be in [0, 1], got {}",
                self.global_weight
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ChunkLayout {
    full_shape: GridShape,
    chunk_shape: GridShape,
    overlap: usize,
    origins: Vec<[usize; 3]>,
    weights: Vec<ScalarField>,
}

/// Per-axis weight of the low (`upper == false`) or high chunk at global
/// coordinate `x`.
fn axis_weight(dim: usize, extent: usize, x: usize, upper: bool) -> f64 {
    let start = dim - extent;
    let t = if x < start {
        0.0
    } else if x >= extent {
        1.0
    } else {
        ((x - start) as f64 + 0.5) / (extent - start) as f64
    };
    if upper {
        t
    } else {
        1.0 - t
    }
}

pub fn make_chunk_layout(full_shape: GridShape, overlap: usize) -> Result<ChunkLayout> {
    let ndim = full_shape.ndim();
    for &dim in full_shape.dims() {
        if dim < 2 * overlap + 4 {
            return Err(Error::OverlapTooLarge { overlap, dim });
        }
    }
    let extents: Vec<usize> = full_shape
        .dims()
        .iter()
        .map(|&d| d.div_ceil(2) + overlap)
        .collect();
    let chunk_shape = GridShape::new(&extents)?;
    let k = 1usize << ndim;

    let origins: Vec<[usize; 3]> = (0..k)
        .map(|i| {
            let mut o = [0usize; 3];
            for a in 0..ndim {
                if (i >> a) & 1 == 1 {
                    o[a] = full_shape.extent(a) - extents[a];
                }
            }
            o
        })
        .collect();

    let mut weights: Vec<ScalarField> = origins
        .iter()
        .enumerate()
        .map(|(i, o)| {
            ScalarField::from_fn(chunk_shape, |c| {
                (0..ndim)
                    .map(|a| {
                        axis_weight(
                            full_shape.extent(a),
                            extents[a],
                            c[a] + o[a],
                            (i >> a) & 1 == 1,
                        )
                    })
                    .product()
            })
        })
        .collect();

    // Renormalize so the products sum to one to the last bit available.
    let mut total = vec![0.0; full_shape.len()];
    for (w, o) in weights.iter().zip(&origins) {
        for (j, c) in chunk_shape.voxels().enumerate() {
            total[full_shape.index(offset(c, *o))] += w.values()[j];
        }
    }
    for (w, o) in weights.iter_mut().zip(&origins) {
        let values: Vec<f64> = chunk_shape
            .voxels()
            .enumerate()
            .map(|(j, c)| w.values()[j] / total[full_shape.index(offset(c, *o))])
            .collect();
        *w = ScalarField::new(chunk_shape, values)?;
    }

    Ok(ChunkLayout {
        full_shape,
        chunk_shape,
        overlap,
        origins,
        weights,
    })
}

#[inline]
fn offset(c: [usize; 3], o: [usize; 3]) -> [usize; 3] {
    [c[0] + o[0], c[1] + o[1], c[2] + o[2]]
}

impl ChunkLayout {
    pub fn full_shape(&self) -> GridShape {
        self.full_shape
    }

    pub fn chunk_shape(&self) -> GridShape {
        self.chunk_shape
    }

    pub fn overlap(&self) -> usize {
        self.overlap
    }

    /// Number of chunks, `2^ndim`.
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn origins(&self) -> &[[usize; 3]] {
        &self.origins
    }

    pub fn weights(&self) -> &[ScalarField] {
        &self.weights
    }

    fn check_chunks<F: GridField>(&self, chunks: &[F]) -> Result<()> {
        if chunks.len() != self.len() {
            return Err(Error::ChunkCount {
                expected: self.len(),
                found: chunks.len(),
            });
        }
        for c in chunks {
            Error::check_shape(self.chunk_shape, c.shape())?;
        }
        Ok(())
    }

    /// Global storage index of every voxel of a chunk at `origin`.
    fn global_indices(&self, origin: [usize; 3]) -> impl Iterator<Item = usize> + '_ {
        self.chunk_shape
            .voxels()
            .map(move |c| self.full_shape.index(offset(c, origin)))
    }
}

/// Copies the sub-grid of every chunk out of `field`.
pub fn split_chunks<F: GridField>(field: &F, layout: &ChunkLayout) -> Result<Vec<F>> {
    Error::check_shape(layout.full_shape, field.shape())?;
    let ch = field.channels();
    let src = field.raw();
    Ok(layout
        .origins
        .iter()
        .map(|&o| {
            let mut data = Vec::with_capacity(layout.chunk_shape.len() * ch);
            for gi in layout.global_indices(o) {
                data.extend_from_slice(&src[gi * ch..(gi + 1) * ch]);
            }
            F::from_raw(layout.chunk_shape, data)
        })
        .collect())
}

/// Feathered blend of per-chunk fields back onto the full grid.
pub fn merge_chunks<F: GridField>(chunks: &[F], layout: &ChunkLayout) -> Result<F> {
    layout.check_chunks(chunks)?;
    let ch = chunks[0].channels();
    let mut out = vec![0.0; layout.full_shape.len() * ch];
    for ((chunk, w), &o) in chunks.iter().zip(&layout.weights).zip(&layout.origins) {
        let src = chunk.raw();
        for (j, gi) in layout.global_indices(o).enumerate() {
            let wj = w.values()[j];
            for c in 0..ch {
                out[gi * ch + c] += wj * src[j * ch + c];
            }
        }
    }
    Ok(F::from_raw(layout.full_shape, out))
}

/// Transpose of [`merge_chunks`] for vector fields.
pub(crate) fn merge_chunks_adjoint(grad: &VectorField, layout: &ChunkLayout) -> Vec<VectorField> {
    let d = grad.ndim();
    let g = grad.data();
    layout
        .origins
        .iter()
        .zip(&layout.weights)
        .map(|(&o, w)| {
            let mut data = Vec::with_capacity(layout.chunk_shape.len() * d);
            for (j, gi) in layout.global_indices(o).enumerate() {
                let wj = w.values()[j];
                data.extend(g[gi * d..(gi + 1) * d].iter().map(|v| wj * v));
            }
            VectorField::from_raw(layout.chunk_shape, data)
        })
        .collect()
}

/// `0.5 * (upsample(v_global) + v_local)`.
pub fn fuse_velocities(v_global: &VectorField, v_local: &VectorField) -> Result<VectorField> {
    fuse_velocities_weighted(v_global, v_local, 0.5)
}

/// `w * upsample(v_global) + (1 - w) * v_local`.
pub fn fuse_velocities_weighted(
    v_global: &VectorField,
    v_local: &VectorField,
    global_weight: f64,
) -> Result<VectorField> {
    let up = upsample(v_global);
    Error::check_shape(v_local.shape(), up.shape())?;
    let mut out = up.scaled(global_weight);
    out.axpy(1.0 - global_weight, v_local);
    Ok(out)
}
