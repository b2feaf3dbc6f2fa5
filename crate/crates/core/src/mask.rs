//! Binary masks, mask geometry and the column-major run-length codec.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("mask dimensions must be at least 1x1, got {height}x{width}")]
    BadDimensions { height: usize, width: usize },
    #[error("mask bit buffer has {got} entries, expected {expected}")]
    BadLength { expected: usize, got: usize },
    #[error("mask is empty")]
    EmptyMask,
    #[error("malformed RLE: {0}")]
    MalformedRle(String),
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("track invariant violated at frame {frame}: {reason}")]
    BadTrack { frame: u32, reason: &'static str },
}

/// A row-major boolean pixel grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self, MaskError> {
        if height == 0 || width == 0 {
            return Err(MaskError::BadDimensions { height, width });
        }
        if bits.len() != height * width {
            return Err(MaskError::BadLength {
                expected: height * width,
                got: bits.len(),
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    /// All-false mask. Panics on a zero dimension.
    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width]).expect("nonzero mask dimensions")
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![true; height * width]).expect("nonzero mask dimensions")
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Self::new(height, width, bits).expect("nonzero mask dimensions")
    }

    pub fn from_pixels(height: usize, width: usize, pixels: &[(usize, usize)]) -> Self {
        let mut m = Self::empty(height, width);
        for &(r, c) in pixels {
            m.set(r, c, true);
        }
        m
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn same_dims(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if self.height != other.height || self.width != other.width {
            return Err(MaskError::DimensionMismatch(
                self.height,
                self.width,
                other.height,
                other.width,
            ));
        }
        Ok(())
    }

    pub fn area(&self) -> usize {
        area(self)
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Iterator over `(row, col)` of set pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / w, i % w))
    }

    /// Inclusive bounding box `(row_min, col_min, row_max, col_max)`; `None` when empty.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for (r, c) in self.pixels() {
            bb = Some(match bb {
                None => (r, c, r, c),
                Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
            });
        }
        bb
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union_count(&self, other: &BinaryMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a || b)
            .count()
    }

    /// Max-pool by `factor`: a cell is set when any covered pixel is set.
    pub fn downsample_any(&self, factor: usize) -> BinaryMask {
        let h = self.height.div_ceil(factor);
        let w = self.width.div_ceil(factor);
        let mut out = BinaryMask::empty(h, w);
        for (r, c) in self.pixels() {
            out.set(r / factor, c / factor, true);
        }
        out
    }

    /// Majority downsampling: a cell is set when at least half of its pixels
    /// are set. Falls back to [`BinaryMask::downsample_any`] when that would
    /// erase a nonempty mask entirely.
    pub fn downsample_majority(&self, factor: usize) -> BinaryMask {
        let h = self.height.div_ceil(factor);
        let w = self.width.div_ceil(factor);
        let mut counts = vec![0usize; h * w];
        for (r, c) in self.pixels() {
            counts[(r / factor) * w + c / factor] += 1;
        }
        let mut out = BinaryMask::empty(h, w);
        let mut any = false;
        for r in 0..h {
            for c in 0..w {
                let rows = (self.height - r * factor).min(factor);
                let cols = (self.width - c * factor).min(factor);
                if 2 * counts[r * w + c] >= rows * cols && counts[r * w + c] > 0 {
                    out.set(r, c, true);
                    any = true;
                }
            }
        }
        if !any && !self.is_empty() {
            return self.downsample_any(factor);
        }
        out
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> BinaryMask {
        BinaryMask::from_fn(self.height * factor, self.width * factor, |r, c| {
            self.get(r / factor, c / factor)
        })
    }
}

/// Number of set pixels.
pub fn area(mask: &BinaryMask) -> usize {
    mask.bits.iter().filter(|&&b| b).count()
}

/// Mean `(row, col)` of the set pixels; pixel `(r, c)` has its center at `(r, c)`.
pub fn centroid(mask: &BinaryMask) -> Result<(f64, f64), MaskError> {
    let mut n = 0usize;
    let (mut sr, mut sc) = (0usize, 0usize);
    for (r, c) in mask.pixels() {
        n += 1;
        sr += r;
        sc += c;
    }
    if n == 0 {
        return Err(MaskError::EmptyMask);
    }
    Ok((sr as f64 / n as f64, sc as f64 / n as f64))
}

/// Shift every set pixel by `(drow, dcol)`; pixels leaving the frame are dropped.
pub fn translate(mask: &BinaryMask, drow: i64, dcol: i64) -> BinaryMask {
    let (h, w) = (mask.height as i64, mask.width as i64);
    let mut out = BinaryMask::empty(mask.height, mask.width);
    for (r, c) in mask.pixels() {
        let (nr, nc) = (r as i64 + drow, c as i64 + dcol);
        if (0..h).contains(&nr) && (0..w).contains(&nc) {
            out.set(nr as usize, nc as usize, true);
        }
    }
    out
}

/// Column-major run lengths, alternating 0-runs and 1-runs, starting with a
/// (possibly empty) 0-run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<u64>,
}

impl RleMask {
    pub fn validate(&self) -> Result<(), MaskError> {
        if self.height == 0 || self.width == 0 {
            return Err(MaskError::MalformedRle(format!(
                "zero dimension {}x{}",
                self.height, self.width
            )));
        }
        if self.runs.is_empty() {
            return Err(MaskError::MalformedRle("no runs".into()));
        }
        let total: u64 = self.runs.iter().sum();
        let expected = (self.height * self.width) as u64;
        if total != expected {
            return Err(MaskError::MalformedRle(format!(
                "runs sum to {total}, expected {expected}"
            )));
        }
        if self.runs.iter().skip(1).any(|&r| r == 0) {
            return Err(MaskError::MalformedRle(
                "zero-length run after the leading run".into(),
            ));
        }
        Ok(())
    }
}

pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u64;
    for c in 0..mask.width {
        for r in 0..mask.height {
            let v = mask.get(r, c);
            if v != current {
                runs.push(len);
                len = 0;
                current = v;
            }
            len += 1;
        }
    }
    runs.push(len);
    RleMask {
        height: mask.height,
        width: mask.width,
        runs,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask, MaskError> {
    rle.validate()?;
    let (h, w) = (rle.height, rle.width);
    let mut out = BinaryMask::empty(h, w);
    let mut idx = 0usize;
    let mut value = false;
    for &run in &rle.runs {
        if value {
            for k in idx..idx + run as usize {
                out.set(k % h, k / h, true);
            }
        }
        idx += run as usize;
        value = !value;
    }
    Ok(out)
}

/// One frame of a [`MaskTrack`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrackFrame {
    pub mask: Option<BinaryMask>,
    pub visible: bool,
}

/// Frame-indexed masks of one object in one view.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskTrack {
    frames: BTreeMap<u32, TrackFrame>,
}

impl MaskTrack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        frame_index: u32,
        mask: Option<BinaryMask>,
        visible: bool,
    ) -> Result<(), MaskError> {
        let nonempty = mask.as_ref().is_some_and(|m| !m.is_empty());
        if visible && !nonempty {
            return Err(MaskError::BadTrack {
                frame: frame_index,
                reason: "visible frame without a nonempty mask",
            });
        }
        if !visible && nonempty {
            return Err(MaskError::BadTrack {
                frame: frame_index,
                reason: "invisible frame with a nonempty mask",
            });
        }
        self.frames.insert(frame_index, TrackFrame { mask, visible });
        Ok(())
    }

    pub fn get(&self, frame_index: u32) -> Option<&TrackFrame> {
        self.frames.get(&frame_index)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &TrackFrame)> {
        self.frames.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}
