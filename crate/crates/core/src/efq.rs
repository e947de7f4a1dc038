//! 8-bit grouped affine quantization of the error-feedback buffer.
//!
//! Elements are taken in column-major order and split into flat groups of
//! `group_size`. Each group stores `zero_point = min` and
//! `scale = (max - min) / 255` (or `1` for a constant group); a value is
//! recovered as `zero_point + scale * code`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, invalid, Result};
use crate::projector::Projection;

pub const DEFAULT_GROUP_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantBuffer {
    rows: usize,
    cols: usize,
    group_size: usize,
    codes: Vec<u8>,
    scales: Vec<f64>,
    zero_points: Vec<f64>,
}

impl QuantBuffer {
    pub fn quantize(x: &DMatrix<f64>) -> Result<Self> {
        Self::quantize_grouped(x, DEFAULT_GROUP_SIZE)
    }

    pub fn quantize_grouped(x: &DMatrix<f64>, group_size: usize) -> Result<Self> {
        if group_size == 0 {
            return Err(invalid("group size must be at least 1"));
        }
        ensure_finite(x, "error-feedback buffer")?;
        let data = x.as_slice();
        let groups = data.len().div_ceil(group_size);
        let mut codes = Vec::with_capacity(data.len());
        let mut scales = Vec::with_capacity(groups);
        let mut zero_points = Vec::with_capacity(groups);
        for chunk in data.chunks(group_size) {
            let lo = chunk.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = hi - lo;
            if range > 0.0 {
                scales.push(range / 255.0);
                // Scaling by 255/range instead of dividing by the stored scale
                // keeps exact midpoints (e.g. 0.5 of the range) at .5 before
                // rounding half away from zero.
                codes.extend(
                    chunk.iter().map(|&v| ((v - lo) * 255.0 / range).round().clamp(0.0, 255.0) as u8),
                );
            } else {
                scales.push(1.0);
                codes.extend(std::iter::repeat_n(0u8, chunk.len()));
            }
            zero_points.push(lo);
        }
        Ok(Self { rows: x.nrows(), cols: x.ncols(), group_size, codes, scales, zero_points })
    }

    /// Rebuilds a buffer from its stored parts (checkpoint loading).
    pub fn from_parts(
        rows: usize,
        cols: usize,
        group_size: usize,
        codes: Vec<u8>,
        scales: Vec<f64>,
        zero_points: Vec<f64>,
    ) -> Result<Self> {
        let groups = (rows * cols).div_ceil(group_size.max(1));
        if group_size == 0
            || codes.len() != rows * cols
            || scales.len() != groups
            || zero_points.len() != groups
        {
            return Err(invalid("inconsistent quantized buffer parts"));
        }
        Ok(Self { rows, cols, group_size, codes, scales, zero_points })
    }

    pub fn dequantize(&self) -> DMatrix<f64> {
        let data = self
            .codes
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let g = k / self.group_size;
                self.zero_points[g] + self.scales[g] * c as f64
            })
            .collect();
        DMatrix::from_vec(self.rows, self.cols, data)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn num_groups(&self) -> usize {
        self.scales.len()
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[f64] {
        &self.zero_points
    }

    pub fn max_scale(&self) -> f64 {
        self.scales.iter().copied().fold(0.0, f64::max)
    }

    /// One byte per element plus an f64 scale and zero point per group.
    pub fn memory_bytes(&self) -> usize {
        self.codes.len() + 16 * self.num_groups()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EfMode {
    /// Residuals are discarded.
    #[default]
    None,
    Dense,
    Quant8,
}

/// The error-feedback buffer of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum ErrorFeedback {
    Absent,
    Dense(DMatrix<f64>),
    Quant8(QuantBuffer),
}

impl ErrorFeedback {
    /// A zero buffer for a `rows x cols` parameter, or nothing for
    /// [`EfMode::None`].
    pub fn new(mode: EfMode, rows: usize, cols: usize) -> Result<Self> {
        Ok(match mode {
            EfMode::None => ErrorFeedback::Absent,
            EfMode::Dense => ErrorFeedback::Dense(DMatrix::zeros(rows, cols)),
            EfMode::Quant8 => ErrorFeedback::Quant8(QuantBuffer::quantize(&DMatrix::zeros(rows, cols))?),
        })
    }

    pub fn mode(&self) -> EfMode {
        match self {
            ErrorFeedback::Absent => EfMode::None,
            ErrorFeedback::Dense(_) => EfMode::Dense,
            ErrorFeedback::Quant8(_) => EfMode::Quant8,
        }
    }

    /// The stored residual, dequantized, or `None` when absent.
    pub fn value(&self) -> Option<DMatrix<f64>> {
        match self {
            ErrorFeedback::Absent => None,
            ErrorFeedback::Dense(m) => Some(m.clone()),
            ErrorFeedback::Quant8(q) => Some(q.dequantize()),
        }
    }

    /// Overwrites the buffer with `residual` under the buffer's mode.
    pub fn store(&mut self, residual: DMatrix<f64>) -> Result<()> {
        match self {
            ErrorFeedback::Absent => {}
            ErrorFeedback::Dense(m) => {
                if m.shape() != residual.shape() {
                    return Err(invalid("error-feedback shape mismatch"));
                }
                *m = residual;
            }
            ErrorFeedback::Quant8(q) => {
                if q.shape() != residual.shape() {
                    return Err(invalid("error-feedback shape mismatch"));
                }
                *q = QuantBuffer::quantize_grouped(&residual, q.group_size())?;
            }
        }
        Ok(())
    }

    pub fn memory_bytes(&self) -> usize {
        match self {
            ErrorFeedback::Absent => 0,
            ErrorFeedback::Dense(m) => 8 * m.len(),
            ErrorFeedback::Quant8(q) => q.memory_bytes(),
        }
    }
}

/// Stores the projection residual `G_t - up(g_t)` in `ef` and returns its
/// exact squared Frobenius norm (before any quantization).
///
/// `full` already contains the previous buffer's contribution.
pub fn accumulate_error(
    ef: &mut ErrorFeedback,
    full: &DMatrix<f64>,
    low: &DMatrix<f64>,
    projection: &Projection,
) -> Result<f64> {
    let back = projection.up(low)?;
    if back.shape() != full.shape() {
        return Err(invalid("projected gradient does not match the full gradient shape"));
    }
    let residual = full - back;
    let energy = residual.norm_squared();
    ef.store(residual)?;
    Ok(energy)
}
