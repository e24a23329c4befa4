//! Binary pixel masks and per-pixel depth.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Row-major binary grid. Serialized as run lengths, alternating runs of
/// unset and set pixels and always starting with an unset run (possibly 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    /// Exclusive.
    pub x1: usize,
    /// Exclusive.
    pub y1: usize,
}

impl PixelBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

impl Bitmap {
    pub fn new(width: usize, height: usize) -> Self {
        Bitmap {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        Error::check_dim(width * height, bits.len())?;
        Ok(Bitmap {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    /// Value at a continuous pixel position; false outside the grid.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        if !(x >= 0.0 && y >= 0.0) {
            return false;
        }
        let (xi, yi) = (x.floor() as usize, y.floor() as usize);
        xi < self.width && yi < self.height && self.get(xi, yi)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % w, i / w))
    }

    pub fn bounding_box(&self) -> Option<PixelBox> {
        let mut bb: Option<PixelBox> = None;
        for (x, y) in self.iter_set() {
            bb = Some(match bb {
                None => PixelBox {
                    x0: x,
                    y0: y,
                    x1: x + 1,
                    y1: y + 1,
                },
                Some(b) => PixelBox {
                    x0: b.x0.min(x),
                    y0: b.y0.min(y),
                    x1: b.x1.max(x + 1),
                    y1: b.y1.max(y + 1),
                },
            });
        }
        bb
    }

    pub fn intersection_count(&self, other: &Bitmap) -> Result<usize> {
        self.check_same_size(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count())
    }

    pub fn union_count(&self, other: &Bitmap) -> Result<usize> {
        self.check_same_size(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a || **b)
            .count())
    }

    fn check_same_size(&self, other: &Bitmap) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::validation(
                "bitmap",
                format!(
                    "size mismatch: {}x{} vs {}x{}",
                    self.width, self.height, other.width, other.height
                ),
            ));
        }
        Ok(())
    }

    /// 3x3 binary dilation. Pixels outside the grid count as unset.
    pub fn dilate(&self) -> Bitmap {
        let mut out = Bitmap::new(self.width, self.height);
        for (x, y) in self.iter_set() {
            for yy in y.saturating_sub(1)..(y + 2).min(self.height) {
                for xx in x.saturating_sub(1)..(x + 2).min(self.width) {
                    out.set(xx, yy, true);
                }
            }
        }
        out
    }

    /// 3x3 binary erosion. Pixels outside the grid count as unset.
    pub fn erode(&self) -> Bitmap {
        let mut out = Bitmap::new(self.width, self.height);
        for (x, y) in self.iter_set() {
            if x == 0 || y == 0 || x + 1 == self.width || y + 1 == self.height {
                continue;
            }
            let keep = (y - 1..y + 2).all(|yy| (x - 1..x + 2).all(|xx| self.get(xx, yy)));
            out.set(x, y, keep);
        }
        out
    }

    /// Morphological closing (dilation then erosion), computed on a canvas
    /// padded by one pixel so the image border does not act as foreground.
    pub fn close(&self) -> Bitmap {
        let mut padded = Bitmap::new(self.width + 2, self.height + 2);
        for (x, y) in self.iter_set() {
            padded.set(x + 1, y + 1, true);
        }
        let closed = padded.dilate().erode();
        let mut out = Bitmap::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, closed.get(x + 1, y + 1));
            }
        }
        out
    }

    fn runs(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    fn from_runs(width: usize, height: usize, runs: &[u32]) -> Result<Self> {
        let mut bits = Vec::with_capacity(width * height);
        let mut value = false;
        for &r in runs {
            bits.extend(std::iter::repeat_n(value, r as usize));
            value = !value;
        }
        Bitmap::from_bits(width, height, bits)
    }
}

#[derive(Serialize, Deserialize)]
struct RleBitmap {
    width: usize,
    height: usize,
    runs: Vec<u32>,
}

impl Serialize for Bitmap {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RleBitmap {
            width: self.width,
            height: self.height,
            runs: self.runs(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Bitmap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rle = RleBitmap::deserialize(d)?;
        Bitmap::from_runs(rle.width, rle.height, &rle.runs).map_err(serde::de::Error::custom)
    }
}

/// Per-pixel camera-frame depth in meters; `f64::INFINITY` where no surface was hit.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    depth: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            depth: vec![f64::INFINITY; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, d: f64) {
        self.depth[y * self.width + x] = d;
    }
}
