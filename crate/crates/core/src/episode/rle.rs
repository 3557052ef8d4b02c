//! Run-length encoded binary masks.
//!
//! `counts` alternates runs of background and foreground pixels over
//! row-major order, always starting with a background run (possibly 0).

use serde::{Deserialize, Serialize};

use crate::geometry::{Pixel, Rect};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RleError {
    #[error("run lengths sum to {sum}, expected width*height = {expected}")]
    LengthMismatch { sum: u64, expected: u64 },
    #[error("mask dimensions must be positive, got {width}x{height}")]
    ZeroSize { width: u32, height: u32 },
    #[error("grid has {len} cells, expected {width}x{height}")]
    GridSize { len: usize, width: u32, height: u32 },
    #[error("mask has no foreground pixels")]
    EmptyMask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u32>,
}

/// Dense binary image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryGrid {
    width: u32,
    height: u32,
    cells: Vec<bool>,
}

impl BinaryGrid {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            cells: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_cells(width: u32, height: u32, cells: Vec<bool>) -> Result<Self, RleError> {
        if cells.len() != width as usize * height as usize {
            return Err(RleError::GridSize {
                len: cells.len(),
                width,
                height,
            });
        }
        Ok(Self { width, height, cells })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.cells[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let w = self.width;
        self.cells[(y * w + x) as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    /// Foreground pixel coordinates in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| **c)
            .map(move |(i, _)| (i as u32 % w, i as u32 / w))
    }
}

impl RleMask {
    pub fn validate(&self) -> Result<(), RleError> {
        if self.width == 0 || self.height == 0 {
            return Err(RleError::ZeroSize {
                width: self.width,
                height: self.height,
            });
        }
        let sum: u64 = self.counts.iter().map(|&c| c as u64).sum();
        let expected = self.width as u64 * self.height as u64;
        if sum != expected {
            return Err(RleError::LengthMismatch { sum, expected });
        }
        Ok(())
    }

    pub fn foreground_count(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }
}

pub fn encode_mask(grid: &BinaryGrid) -> Result<RleMask, RleError> {
    if grid.width == 0 || grid.height == 0 {
        return Err(RleError::ZeroSize {
            width: grid.width,
            height: grid.height,
        });
    }
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &cell in &grid.cells {
        if cell == current {
            run += 1;
        } else {
            counts.push(run);
            current = cell;
            run = 1;
        }
    }
    counts.push(run);
    Ok(RleMask {
        width: grid.width,
        height: grid.height,
        counts,
    })
}

pub fn decode_mask(mask: &RleMask) -> Result<BinaryGrid, RleError> {
    mask.validate()?;
    let mut cells = Vec::with_capacity(mask.width as usize * mask.height as usize);
    let mut value = false;
    for &run in &mask.counts {
        cells.extend(std::iter::repeat(value).take(run as usize));
        value = !value;
    }
    Ok(BinaryGrid {
        width: mask.width,
        height: mask.height,
        cells,
    })
}

/// Tight bounding box (inclusive pixel coordinates) and centroid of the foreground.
pub fn mask_bbox_centroid(mask: &RleMask) -> Result<(Rect, Pixel), RleError> {
    mask.validate()?;
    let w = mask.width as u64;
    let (mut x1, mut y1, mut x2, mut y2) = (u64::MAX, u64::MAX, 0u64, 0u64);
    let (mut sx, mut sy, mut n) = (0f64, 0f64, 0u64);
    let mut pos = 0u64;
    for (i, &run) in mask.counts.iter().enumerate() {
        let run = run as u64;
        if i % 2 == 1 && run > 0 {
            // walk the run row by row
            let mut start = pos;
            let end = pos + run;
            while start < end {
                let y = start / w;
                let row_end = ((y + 1) * w).min(end);
                let xa = start % w;
                let xb = row_end - 1 - y * w;
                let len = row_end - start;
                x1 = x1.min(xa);
                x2 = x2.max(xb);
                y1 = y1.min(y);
                y2 = y2.max(y);
                sx += (xa + xb) as f64 * len as f64 / 2.0;
                sy += y as f64 * len as f64;
                n += len;
                start = row_end;
            }
        }
        pos += run;
    }
    if n == 0 {
        return Err(RleError::EmptyMask);
    }
    Ok((
        Rect::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64),
        Pixel::new(sx / n as f64, sy / n as f64),
    ))
}
