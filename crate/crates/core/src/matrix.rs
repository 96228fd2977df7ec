//! Dense `B x D` matrices crossing the cut layer.
//!
//! Storage is column-major: columns (one feature across the mini-batch) are
//! the unit every compressor works on.

use crate::error::{Error, Result};

/// Partition of the columns into channels.
///
/// A reshaped `C x H x W` activation uses channel-major concatenation, so
/// channel `h` owns columns `h*H*W .. (h+1)*H*W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelLayout {
    sets: Vec<Vec<usize>>,
}

impl ChannelLayout {
    /// Validates that `sets` is a partition of `0..cols`.
    pub fn new(sets: Vec<Vec<usize>>, cols: usize) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::Layout("no channels".into()));
        }
        let mut seen = vec![false; cols];
        let mut count = 0usize;
        for (h, set) in sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Layout(format!("channel {h} is empty")));
            }
            for &j in set {
                if j >= cols {
                    return Err(Error::Layout(format!("column {j} out of range 0..{cols}")));
                }
                if seen[j] {
                    return Err(Error::Layout(format!("column {j} appears in more than one channel")));
                }
                seen[j] = true;
                count += 1;
            }
        }
        if count != cols {
            return Err(Error::Layout(format!("channels cover {count} of {cols} columns")));
        }
        Ok(Self { sets })
    }

    /// One channel per column, the layout of a fully connected cut layer.
    pub fn per_column(cols: usize) -> Self {
        Self {
            sets: (0..cols).map(|j| vec![j]).collect(),
        }
    }

    /// `channels` contiguous channels of `per_channel` columns each.
    pub fn contiguous(channels: usize, per_channel: usize) -> Self {
        Self {
            sets: (0..channels)
                .map(|h| (h * per_channel..(h + 1) * per_channel).collect())
                .collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.sets.len()
    }

    pub fn sets(&self) -> &[Vec<usize>] {
        &self.sets
    }

    pub fn covered_columns(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }
}

/// A `rows x cols` real matrix with an optional channel layout.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    layout: Option<ChannelLayout>,
}

impl IntermediateMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            layout: None,
        }
    }

    /// Builds from column-major data, rejecting NaN and infinities.
    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "expected {} values for {rows}x{cols}, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos % rows.max(1),
                col: pos / rows.max(1),
            });
        }
        Ok(Self {
            rows,
            cols,
            data,
            layout: None,
        })
    }

    pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "expected {} values for {rows}x{cols}, got {}",
                rows * cols,
                data.len()
            )));
        }
        let mut col_major = vec![0.0; rows * cols];
        for b in 0..rows {
            for j in 0..cols {
                col_major[j * rows + b] = data[b * cols + j];
            }
        }
        Self::from_col_major(rows, cols, col_major)
    }

    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * columns.len());
        for (j, c) in columns.iter().enumerate() {
            if c.len() != rows {
                return Err(Error::Shape(format!("column {j} has {} rows, expected {rows}", c.len())));
            }
            data.extend_from_slice(c);
        }
        Self::from_col_major(rows, columns.len(), data)
    }

    pub fn with_layout(mut self, layout: ChannelLayout) -> Result<Self> {
        if layout.covered_columns() != self.cols {
            return Err(Error::Layout(format!(
                "layout covers {} columns, matrix has {}",
                layout.covered_columns(),
                self.cols
            )));
        }
        self.layout = Some(layout);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn layout(&self) -> Option<&ChannelLayout> {
        self.layout.as_ref()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn column_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.cols).map(move |j| self.column(j))
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[col * self.rows + row]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[col * self.rows + row] = value;
    }

    pub fn as_col_major(&self) -> &[f64] {
        &self.data
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for j in 0..self.cols {
            for b in 0..self.rows {
                out[b * self.cols + j] = self.data[j * self.rows + b];
            }
        }
        out
    }

    /// New matrix holding the listed columns, in the listed order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for &j in cols {
            if j >= self.cols {
                return Err(Error::Shape(format!("column {j} out of range 0..{}", self.cols)));
            }
            data.extend_from_slice(self.column(j));
        }
        Ok(Self {
            rows: self.rows,
            cols: cols.len(),
            data,
            layout: None,
        })
    }

    /// Sum of squared entry differences.
    pub fn squared_distance(&self, other: &Self) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }
}

/// Per-column summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub mean: Vec<f64>,
    /// Population standard deviation (divides by the row count).
    pub std: Vec<f64>,
}

impl ColumnStats {
    pub fn range(&self, j: usize) -> f64 {
        self.max[j] - self.min[j]
    }
}

pub fn column_stats(m: &IntermediateMatrix) -> ColumnStats {
    let n = m.cols();
    let mut stats = ColumnStats {
        min: Vec::with_capacity(n),
        max: Vec::with_capacity(n),
        mean: Vec::with_capacity(n),
        std: Vec::with_capacity(n),
    };
    let rows = m.rows().max(1) as f64;
    for col in m.columns() {
        let (lo, hi) = col
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let mean = col.iter().sum::<f64>() / rows;
        // Clamp: the rounded mean may sit an ulp outside [lo, hi].
        let mean = if col.is_empty() { 0.0 } else { mean.clamp(lo, hi) };
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / rows;
        let std = if lo == hi { 0.0 } else { var.sqrt() };
        stats.min.push(if col.is_empty() { 0.0 } else { lo });
        stats.max.push(if col.is_empty() { 0.0 } else { hi });
        stats.mean.push(mean);
        stats.std.push(std);
    }
    stats
}

/// Min-max normalizes every channel to `[0, 1]` using the channel-wide extrema.
///
/// A constant channel maps to all zeros.
pub fn normalize_per_channel(m: &IntermediateMatrix) -> Result<IntermediateMatrix> {
    let layout = m
        .layout()
        .ok_or_else(|| Error::Layout("matrix has no channel layout".into()))?;
    let mut out = m.clone();
    for set in layout.sets() {
        let (lo, hi) = set
            .iter()
            .flat_map(|&j| m.column(j).iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        for &j in set {
            for v in out.column_mut(j) {
                *v = if span > 0.0 {
                    ((*v - lo) / span).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            }
        }
    }
    Ok(out)
}
