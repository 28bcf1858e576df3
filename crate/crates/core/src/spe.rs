//! Fixed sinusoidal encoding of 2-D patch grid positions.
//!
//! The embedding width `D` is split in half: the first `D/2` entries encode
//! `x`, the last `D/2` encode `y`. Within each half, frequency `j` occupies
//! the pair `(2j, 2j + 1)` as `(sin, cos)` of `c · 10000^(−4j/D)`.
//! Coordinates are grid indices (pixel position over patch size).

use serde::{Deserialize, Serialize};

use crate::error::{HpdpError, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coord {
    pub x: f64,
    pub y: f64,
}

impl Coord {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 || d % 4 != 0 {
        return Err(HpdpError::Config(format!(
            "positional embedding width must be a positive multiple of 4, got {d}"
        )));
    }
    Ok(())
}

fn encode_axis(c: f64, d: usize, out: &mut [f64]) {
    for j in 0..d / 4 {
        let rate = 10000f64.powf(-4.0 * j as f64 / d as f64);
        let (s, co) = (c * rate).sin_cos();
        out[2 * j] = s;
        out[2 * j + 1] = co;
    }
}

/// Embedding of one coordinate, length `d`.
pub fn encode_position(c: Coord, d: usize) -> Result<Vec<f64>> {
    check_dim(d)?;
    let mut out = vec![0.0; d];
    let (xs, ys) = out.split_at_mut(d / 2);
    encode_axis(c.x, d, xs);
    encode_axis(c.y, d, ys);
    Ok(out)
}

/// Embeddings for every coordinate, one row each (`N × d`).
pub fn encode_coords(coords: &[Coord], d: usize) -> Result<Matrix> {
    check_dim(d)?;
    let mut out = Matrix::zeros(coords.len(), d);
    for (r, c) in coords.iter().enumerate() {
        let row = out.row_mut(r);
        let (xs, ys) = row.split_at_mut(d / 2);
        encode_axis(c.x, d, xs);
        encode_axis(c.y, d, ys);
    }
    Ok(out)
}

/// `H = F + S`.
pub fn fuse(features: &Matrix, embeddings: &Matrix) -> Result<Matrix> {
    features.add(embeddings).map_err(|_| {
        HpdpError::shape(
            "spe::fuse",
            format!("features {:?} vs embeddings {:?}", features.shape(), embeddings.shape()),
        )
    })
}
