//! Binary instance masks.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask dimensions must be at least 1x1, got {0}x{1}")]
    Empty(u32, u32),
    #[error("expected {expected} bits, got {got}")]
    Length { expected: usize, got: usize },
    #[error("masks differ in size: {0:?} vs {1:?}")]
    SizeMismatch((u32, u32), (u32, u32)),
}

/// Row-major binary raster with a cached popcount.
#[derive(Clone, PartialEq, Eq)]
pub struct InstanceMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
    area: u64,
}

impl std::fmt::Debug for InstanceMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "InstanceMask({}x{}, area {})", self.width, self.height, self.area)
    }
}

/// Axis-aligned box `(x, y, width, height)` in pixels.
pub type BBox = (u32, u32, u32, u32);

impl InstanceMask {
    pub fn new(width: u32, height: u32) -> Self {
        assert!(width >= 1 && height >= 1, "mask must be at least 1x1");
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
            area: 0,
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::Empty(width, height));
        }
        let expected = width as usize * height as usize;
        if bits.len() != expected {
            return Err(MaskError::Length {
                expected,
                got: bits.len(),
            });
        }
        let area = bits.iter().filter(|b| **b).count() as u64;
        Ok(Self {
            width,
            height,
            bits,
            area,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn area(&self) -> u64 {
        self.area
    }

    pub fn is_empty(&self) -> bool {
        self.area == 0
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    fn idx(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[self.idx(x, y)]
    }

    /// Out-of-range coordinates read as unset.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as u64) < self.width as u64
            && (y as u64) < self.height as u64
            && self.get(x as u32, y as u32)
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = self.idx(x, y);
        if self.bits[i] != value {
            self.bits[i] = value;
            if value {
                self.area += 1;
            } else {
                self.area -= 1;
            }
        }
    }

    /// Tight bounding box of the set bits.
    pub fn bbox(&self) -> Option<BBox> {
        if self.area == 0 {
            return None;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for y in 0..self.height {
            let row = &self.bits[self.idx(0, y)..self.idx(0, y) + self.width as usize];
            if let Some(first) = row.iter().position(|b| *b) {
                let last = row.iter().rposition(|b| *b).unwrap();
                x0 = x0.min(first as u32);
                x1 = x1.max(last as u32);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
        Some((x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    pub fn crop(&self, (x, y, w, h): BBox) -> InstanceMask {
        InstanceMask::from_fn(w, h, |cx, cy| self.get(x + cx, y + cy))
    }

    fn same_dims(&self, other: &Self) -> Result<(), MaskError> {
        if self.dims() != other.dims() {
            return Err(MaskError::SizeMismatch(self.dims(), other.dims()));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &Self) -> Result<u64, MaskError> {
        self.same_dims(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count() as u64)
    }

    pub fn iou(&self, other: &Self) -> Result<f64, MaskError> {
        let inter = self.intersection_area(other)?;
        let union = self.area + other.area - inter;
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }

    /// Clear every bit set in `other`.
    pub fn subtract(&mut self, other: &Self) -> Result<(), MaskError> {
        self.same_dims(other)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            if *a && *b {
                *a = false;
                self.area -= 1;
            }
        }
        Ok(())
    }

    pub fn union_with(&mut self, other: &Self) -> Result<(), MaskError> {
        self.same_dims(other)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            if !*a && *b {
                *a = true;
                self.area += 1;
            }
        }
        Ok(())
    }

    /// Fraction of pixels set.
    pub fn fill_fraction(&self) -> f64 {
        self.area as f64 / self.bits.len() as f64
    }
}
