//! Run-length mask codec and the IoU kernels built on it.
//!
//! Masks are stored as row-major run lengths whose first run counts zeros.
//! Every IoU here is returned as an [`Overlap`], an exact integer pair, so
//! threshold tests such as "vIOU greater than 0.5" can be decided without
//! floating point rounding.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use num_bigint::BigInt;
use num_rational::BigRational;
use thiserror::Error;

use crate::model::{FrameInterval, MaskTube, PointTube, Tube};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OverlapError {
    #[error("malformed RLE: runs sum to {sum}, expected {expected}")]
    MalformedRle { sum: u64, expected: u64 },
    #[error("bitmap has {actual} pixels, expected {height}x{width}")]
    BitmapSize {
        height: u32,
        width: u32,
        actual: usize,
    },
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((u32, u32), (u32, u32)),
    #[error("cannot compare a mask tube with a point tube")]
    KindMismatch,
}

/// Dense binary image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    pub height: u32,
    pub width: u32,
    pub bits: Vec<bool>,
}

impl Bitmap {
    pub fn zeros(height: u32, width: u32) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height as usize * width as usize],
        }
    }

    pub fn from_bits(height: u32, width: u32, bits: Vec<bool>) -> Result<Self, OverlapError> {
        if bits.len() != height as usize * width as usize {
            return Err(OverlapError::BitmapSize {
                height,
                width,
                actual: bits.len(),
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn get(&self, row: u32, col: u32) -> bool {
        self.bits[row as usize * self.width as usize + col as usize]
    }

    pub fn set(&mut self, row: u32, col: u32, value: bool) {
        self.bits[row as usize * self.width as usize + col as usize] = value;
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|b| **b).count() as u64
    }
}

/// Run-length encoded binary mask.
///
/// `runs` alternate zero-runs and one-runs over the row-major scan; the first
/// entry counts zeros and may be 0. The representation is canonical: no other
/// run is empty, so two masks are equal iff their runs are equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RleMask {
    height: u32,
    width: u32,
    runs: Vec<u32>,
}

impl RleMask {
    /// Encodes a bitmap. Encoding an empty (0-pixel) bitmap is allowed and
    /// yields `[0]`.
    pub fn encode(bitmap: &Bitmap) -> Self {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &bit in &bitmap.bits {
            if bit == current {
                len += 1;
            } else {
                runs.push(len);
                current = bit;
                len = 1;
            }
        }
        runs.push(len);
        Self {
            height: bitmap.height,
            width: bitmap.width,
            runs,
        }
    }

    /// Builds a mask from wire-form runs. Interior zero-length runs are merged
    /// away so the result is canonical.
    pub fn from_runs(height: u32, width: u32, runs: Vec<u32>) -> Result<Self, OverlapError> {
        let expected = height as u64 * width as u64;
        let sum: u64 = runs.iter().map(|&r| r as u64).sum();
        if sum != expected || runs.is_empty() {
            return Err(OverlapError::MalformedRle { sum, expected });
        }
        Ok(Self {
            height,
            width,
            runs: canonicalize(runs),
        })
    }

    /// An all-zero mask.
    pub fn empty(height: u32, width: u32) -> Self {
        Self {
            height,
            width,
            runs: vec![height * width],
        }
    }

    /// Axis-aligned filled rectangle covering rows `[row0, row1)` and columns
    /// `[col0, col1)`, clipped to the image.
    pub fn rectangle(height: u32, width: u32, row0: u32, row1: u32, col0: u32, col1: u32) -> Self {
        let (row1, col1) = (row1.min(height), col1.min(width));
        if row0 >= row1 || col0 >= col1 {
            return Self::empty(height, width);
        }
        let span = col1 - col0;
        let mut runs = Vec::with_capacity(2 * (row1 - row0) as usize + 1);
        let mut pending_zeros = row0 * width + col0;
        for _ in row0..row1 {
            runs.push(pending_zeros);
            runs.push(span);
            pending_zeros = width - span;
        }
        runs.push(height * width - (row1 - 1) * width - col1);
        Self {
            height,
            width,
            runs: canonicalize(runs),
        }
    }

    pub fn decode(&self) -> Bitmap {
        let mut bits = Vec::with_capacity(self.pixel_count() as usize);
        let mut value = false;
        for &run in &self.runs {
            bits.extend(std::iter::repeat_n(value, run as usize));
            value = !value;
        }
        Bitmap {
            height: self.height,
            width: self.width,
            bits,
        }
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn shape(&self) -> (u32, u32) {
        (self.height, self.width)
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn pixel_count(&self) -> u64 {
        self.height as u64 * self.width as u64
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Half-open `[start, end)` ranges of foreground pixel indices, ascending.
    pub fn foreground(&self) -> Foreground<'_> {
        Foreground {
            runs: &self.runs,
            index: 0,
            position: 0,
        }
    }

    /// Row-major indices of every foreground pixel.
    pub fn pixel_indices(&self) -> impl Iterator<Item = u64> + '_ {
        self.foreground().flat_map(|(start, end)| start..end)
    }
}

fn canonicalize(runs: Vec<u32>) -> Vec<u32> {
    // Starts with the (possibly empty) leading zero-run.
    let mut out = vec![0u32];
    for (i, run) in runs.into_iter().enumerate() {
        if run == 0 {
            continue;
        }
        let is_one = i % 2 == 1;
        let last_is_one = out.len() % 2 == 0;
        if is_one == last_is_one {
            *out.last_mut().expect("non-empty") += run;
        } else {
            out.push(run);
        }
    }
    out
}

pub struct Foreground<'a> {
    runs: &'a [u32],
    index: usize,
    position: u64,
}

impl Iterator for Foreground<'_> {
    type Item = (u64, u64);

    fn next(&mut self) -> Option<Self::Item> {
        while self.index + 1 < self.runs.len() {
            let zeros = self.runs[self.index] as u64;
            let ones = self.runs[self.index + 1] as u64;
            self.index += 2;
            let start = self.position + zeros;
            self.position = start + ones;
            if ones > 0 {
                return Some((start, start + ones));
            }
        }
        None
    }
}

/// An IoU held as exact integer counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Overlap {
    pub intersection: u64,
    pub union: u64,
}

impl Overlap {
    pub fn new(intersection: u64, union: u64) -> Self {
        debug_assert!(intersection <= union);
        Self {
            intersection,
            union,
        }
    }

    /// IoU as a real; an empty union counts as zero overlap.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            0.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    /// Exact comparison of this ratio against `other`.
    pub fn cmp_ratio(&self, other: &Overlap) -> Ordering {
        let lhs = self.intersection as u128 * other.union.max(1) as u128;
        let rhs = other.intersection as u128 * self.union.max(1) as u128;
        lhs.cmp(&rhs)
    }

    fn accumulate(&mut self, other: Overlap) {
        self.intersection += other.intersection;
        self.union += other.union;
    }
}

/// A real-valued IoU threshold converted once to an exact rational, so that
/// strict comparisons at the boundary are decided exactly.
#[derive(Debug, Clone)]
pub struct IouThreshold {
    value: f64,
    exact: BigRational,
}

impl IouThreshold {
    /// Returns `None` for non-finite values. The threshold is taken to be the
    /// shortest decimal that round-trips to `value`, so `0.1` means exactly
    /// one tenth.
    pub fn new(value: f64) -> Option<Self> {
        if !value.is_finite() {
            return None;
        }
        let text = format!("{value}");
        let (negative, digits) = match text.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, text.as_str()),
        };
        let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
        let numer: BigInt = format!("{int}{frac}").parse().ok()?;
        let denom = pow10(frac.len());
        let exact = BigRational::new(if negative { -numer } else { numer }, denom);
        Some(Self { value, exact })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    /// `overlap.iou() > threshold`, decided exactly.
    pub fn exceeded_by(&self, overlap: &Overlap) -> bool {
        if overlap.union == 0 {
            return self.value < 0.0;
        }
        let ratio = BigRational::new(
            BigInt::from(overlap.intersection),
            BigInt::from(overlap.union),
        );
        ratio > self.exact
    }

    /// `overlap.iou() >= threshold`, decided exactly.
    pub fn reached_by(&self, overlap: &Overlap) -> bool {
        if overlap.union == 0 {
            return self.value <= 0.0;
        }
        let ratio = BigRational::new(
            BigInt::from(overlap.intersection),
            BigInt::from(overlap.union),
        );
        ratio >= self.exact
    }
}

fn pow10(exp: usize) -> BigInt {
    (0..exp).fold(BigInt::from(1u8), |acc, _| acc * 10u8)
}

/// Counts `|a ∩ b|` by merging the two foreground run lists.
pub fn intersection_count(a: &RleMask, b: &RleMask) -> u64 {
    let mut fa = a.foreground();
    let mut fb = b.foreground();
    let (mut ra, mut rb) = (fa.next(), fb.next());
    let mut total = 0u64;
    while let (Some((a0, a1)), Some((b0, b1))) = (ra, rb) {
        let lo = a0.max(b0);
        let hi = a1.min(b1);
        if hi > lo {
            total += hi - lo;
        }
        if a1 <= b1 {
            ra = fa.next();
        } else {
            rb = fb.next();
        }
    }
    total
}

fn frame_overlap(a: &RleMask, b: &RleMask) -> Overlap {
    let inter = intersection_count(a, b);
    Overlap::new(inter, a.area() + b.area() - inter)
}

/// IoU of two masks, computed on runs without decoding.
pub fn frame_iou(a: &RleMask, b: &RleMask) -> Result<Overlap, OverlapError> {
    if a.shape() != b.shape() {
        return Err(OverlapError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(frame_overlap(a, b))
}

fn sorted_intersection(a: &[u32], b: &[u32]) -> u64 {
    let (mut i, mut j, mut count) = (0, 0, 0u64);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                count += 1;
                i += 1;
                j += 1;
            }
        }
    }
    count
}

fn mask_volume(a: &MaskTube, b: &MaskTube) -> Result<Overlap, OverlapError> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(OverlapError::ShapeMismatch(
            (a.height, a.width),
            (b.height, b.width),
        ));
    }
    let frames: BTreeSet<u32> = a.frames.keys().chain(b.frames.keys()).copied().collect();
    let mut total = Overlap::default();
    for frame in frames {
        let part = match (a.frames.get(&frame), b.frames.get(&frame)) {
            (Some(ma), Some(mb)) => {
                if ma.shape() != mb.shape() {
                    return Err(OverlapError::ShapeMismatch(ma.shape(), mb.shape()));
                }
                frame_overlap(ma, mb)
            }
            (Some(m), None) | (None, Some(m)) => Overlap::new(0, m.area()),
            (None, None) => unreachable!(),
        };
        total.accumulate(part);
    }
    Ok(total)
}

fn point_volume(a: &PointTube, b: &PointTube) -> Overlap {
    let frames: BTreeSet<u32> = a.frames.keys().chain(b.frames.keys()).copied().collect();
    let mut total = Overlap::default();
    for frame in frames {
        let pa = a.frames.get(&frame).map(Vec::as_slice).unwrap_or(&[]);
        let pb = b.frames.get(&frame).map(Vec::as_slice).unwrap_or(&[]);
        let inter = sorted_intersection(pa, pb);
        total.accumulate(Overlap::new(inter, (pa.len() + pb.len()) as u64 - inter));
    }
    total
}

/// Volume IoU: `Σ_t |a_t ∩ b_t| / Σ_t |a_t ∪ b_t|` over the union of frames,
/// where a tube missing a frame is empty there.
pub fn volume_iou(a: &Tube, b: &Tube) -> Result<Overlap, OverlapError> {
    match (a, b) {
        (Tube::Mask(a), Tube::Mask(b)) => mask_volume(a, b),
        (Tube::Points(a), Tube::Points(b)) => Ok(point_volume(a, b)),
        _ => Err(OverlapError::KindMismatch),
    }
}

/// Temporal IoU of two half-open frame intervals.
pub fn span_overlap(a: &FrameInterval, b: &FrameInterval) -> Overlap {
    let lo = a.start().max(b.start());
    let hi = a.end().min(b.end());
    let inter = hi.saturating_sub(lo) as u64;
    Overlap::new(inter, a.len() as u64 + b.len() as u64 - inter)
}

pub fn span_iou(a: &FrameInterval, b: &FrameInterval) -> f64 {
    span_overlap(a, b).iou()
}
