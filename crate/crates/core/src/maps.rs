//! Images and per-pixel label fields.

use crate::error::{Error, Result};

/// Reserved scribble value for pixels without an annotation.
pub const UNLABELED: u8 = 255;

/// Planar `[channels, height, width]` image with intensities nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::contract(format!(
                "image data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn gray(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(1, height, width, data)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Intensity of channel `c` at `(y, x)`.
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Sub-window `[y0, y0+h) × [x0, x0+w)` of every channel.
    pub fn window(&self, y0: usize, x0: usize, h: usize, w: usize) -> Image {
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Image { channels: self.channels, height: h, width: w, data }
    }
}

macro_rules! byte_map {
    ($name:ident) => {
        impl $name {
            pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
                if data.len() != height * width {
                    return Err(Error::contract(format!(
                        concat!(stringify!($name), " data length {} does not match {}x{}"),
                        data.len(),
                        height,
                        width
                    )));
                }
                Ok(Self { height, width, data })
            }

            pub fn filled(height: usize, width: usize, value: u8) -> Self {
                Self { height, width, data: vec![value; height * width] }
            }

            pub fn get(&self, y: usize, x: usize) -> u8 {
                self.data[y * self.width + x]
            }

            pub fn set(&mut self, y: usize, x: usize, v: u8) {
                self.data[y * self.width + x] = v;
            }

            pub fn len(&self) -> usize {
                self.data.len()
            }

            pub fn is_empty(&self) -> bool {
                self.data.is_empty()
            }

            pub fn same_extent(&self, height: usize, width: usize) -> bool {
                self.height == height && self.width == width
            }
        }
    };
}

/// Dense per-pixel class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}
byte_map!(LabelMap);

impl LabelMap {
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.data.iter().position(|&v| v as usize >= classes) {
            None => Ok(()),
            Some(i) if self.data[i] == UNLABELED => Err(Error::contract(format!(
                "label map has an unlabeled pixel at index {i}; dense labels are required"
            ))),
            Some(i) => Err(Error::contract(format!(
                "label {} at index {i} is not below class count {classes}",
                self.data[i]
            ))),
        }
    }

    /// Binary mask of pixels equal to `class`.
    pub fn class_mask(&self, class: u8) -> BinaryMask {
        BinaryMask { height: self.height, width: self.width, data: self.data.iter().map(|&v| v == class).collect() }
    }
}

/// Row-major boolean image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::contract(format!("{} mask values for a {height}x{width} mask", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    /// Value at signed coordinates; out of frame reads as `false`.
    pub fn at(&self, y: isize, x: isize) -> bool {
        y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width && self.get(y as usize, x as usize)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.len() == other.data.len() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// Sparse annotations: class index or [`UNLABELED`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScribbleMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}
byte_map!(ScribbleMap);

impl ScribbleMap {
    pub fn unlabeled(height: usize, width: usize) -> Self {
        Self::filled(height, width, UNLABELED)
    }

    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != UNLABELED).count()
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.data.iter().position(|&v| v != UNLABELED && v as usize >= classes) {
            None => Ok(()),
            Some(i) => Err(Error::contract(format!(
                "scribble class {} at index {i} is not below class count {classes}",
                self.data[i]
            ))),
        }
    }
}

/// Γ: 0 where the scribble map is labeled, 1 where it is not.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnlabeledMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}
byte_map!(UnlabeledMask);

/// Per-pixel class probabilities, planar `[classes, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != classes * height * width {
            return Err(Error::contract(format!(
                "probability map length {} does not match {classes}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { classes, height, width, data })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn prob(&self, class: usize, pixel: usize) -> f64 {
        self.data[class * self.pixels() + pixel]
    }

    /// Largest deviation of any pixel's channel sum from 1, or infinity if
    /// any probability is negative or non-finite.
    pub fn simplex_deviation(&self) -> f64 {
        let n = self.pixels();
        let mut worst = 0.0f64;
        for p in 0..n {
            let mut s = 0.0;
            for c in 0..self.classes {
                let v = self.prob(c, p);
                if !(v >= 0.0) || !v.is_finite() {
                    return f64::INFINITY;
                }
                s += v;
            }
            worst = worst.max((s - 1.0).abs());
        }
        worst
    }

    /// Per-pixel argmax; ties resolve to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        let n = self.pixels();
        let data = (0..n)
            .map(|p| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.prob(c, p) > self.prob(best, p) {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap { height: self.height, width: self.width, data }
    }

    /// Per-pixel Shannon entropy in nats.
    pub fn entropy(&self) -> Vec<f64> {
        (0..self.pixels())
            .map(|p| {
                -(0..self.classes)
                    .map(|c| self.prob(c, p))
                    .filter(|&v| v > 0.0)
                    .map(|v| v * v.ln())
                    .sum::<f64>()
            })
            .map(|h: f64| h.max(0.0))
            .collect()
    }
}
