//! Boxes, IoU, the state vocabulary and relative-size bins.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Axis-aligned box in image pixels, origin top-left, half-open extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub x_min: T,
    pub y_min: T,
    pub x_max: T,
    pub y_max: T,
}

impl<T: Real> BBox<T> {
    pub fn new(x_min: T, y_min: T, x_max: T, y_max: T) -> Result<Self> {
        let b = Self { x_min, y_min, x_max, y_max };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox(format!(
                "({x_min}, {y_min}, {x_max}, {y_max}) must be finite with min < max"
            )))
        }
    }

    /// Convenience for literals and tests; panics on an invalid box.
    pub fn from_f64(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self::new(T::lit(x_min), T::lit(y_min), T::lit(x_max), T::lit(y_max))
            .expect("valid box literal")
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    #[inline]
    pub fn width(&self) -> T {
        self.x_max - self.x_min
    }

    #[inline]
    pub fn height(&self) -> T {
        self.y_max - self.y_min
    }

    #[inline]
    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    #[inline]
    pub fn center(&self) -> (T, T) {
        let half = T::lit(0.5);
        ((self.x_min + self.x_max) * half, (self.y_min + self.y_max) * half)
    }

    #[inline]
    pub fn max_side(&self) -> T {
        self.width().max(self.height())
    }

    pub fn contains_point(&self, x: T, y: T) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn contains(&self, other: &Self) -> bool {
        other.x_min >= self.x_min
            && other.y_min >= self.y_min
            && other.x_max <= self.x_max
            && other.y_max <= self.y_max
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= T::zero() || h <= T::zero() {
            T::zero()
        } else {
            w * h
        }
    }

    pub fn cast<U: Real>(&self) -> BBox<U> {
        BBox {
            x_min: U::lit(self.x_min.as_f64()),
            y_min: U::lit(self.y_min.as_f64()),
            x_max: U::lit(self.x_max.as_f64()),
            y_max: U::lit(self.y_max.as_f64()),
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min.as_f64(), self.y_min.as_f64(), self.x_max.as_f64(), self.y_max.as_f64()]
    }
}

impl<T: Real> fmt::Display for BBox<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

/// Intersection over union of two valid boxes.
pub fn iou<T: Real>(a: &BBox<T>, b: &BBox<T>) -> T {
    let inter = a.intersection_area(b);
    if inter <= T::zero() {
        return T::zero();
    }
    let union = a.area() + b.area() - inter;
    (inter / union).min(T::one())
}

/// Clips `b` to `[0, W] × [0, H]`. `None` means the box lies fully outside
/// the image (the clipped extent would be empty).
pub fn clip_box<T: Real>(b: &BBox<T>, image_width: u32, image_height: u32) -> Option<BBox<T>> {
    let w = T::lit(image_width as f64);
    let h = T::lit(image_height as f64);
    let clipped = BBox {
        x_min: b.x_min.max(T::zero()).min(w),
        y_min: b.y_min.max(T::zero()).min(h),
        x_max: b.x_max.max(T::zero()).min(w),
        y_max: b.y_max.max(T::zero()).min(h),
    };
    clipped.is_valid().then_some(clipped)
}

/// Ordered state names. Background is implicit and never a member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateVocabulary {
    names: Vec<String>,
}

impl StateVocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Config("state vocabulary must not be empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(Error::Config("state names must be non-empty".into()));
            }
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate state name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl Default for StateVocabulary {
    fn default() -> Self {
        Self { names: ["stop", "warning", "go", "off"].map(String::from).to_vec() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation<T> {
    pub bbox: BBox<T>,
    pub state: usize,
}

/// Relative-size class of an annotation, `a = box_area / image_area`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBin {
    Tiny,
    Small,
    Medium,
    Large,
}

impl SizeBin {
    pub const ALL: [SizeBin; 4] = [SizeBin::Tiny, SizeBin::Small, SizeBin::Medium, SizeBin::Large];

    /// Inclusive upper edges of tiny, small and medium.
    pub const UPPER_EDGES: [f64; 3] = [0.0001, 0.0003, 0.0005];

    pub fn from_relative_area<T: Real>(a: T) -> SizeBin {
        let [t, s, m] = Self::UPPER_EDGES.map(T::lit);
        if a <= t {
            SizeBin::Tiny
        } else if a <= s {
            SizeBin::Small
        } else if a <= m {
            SizeBin::Medium
        } else {
            SizeBin::Large
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeBin::Tiny => "tiny",
            SizeBin::Small => "small",
            SizeBin::Medium => "medium",
            SizeBin::Large => "large",
        }
    }
}

impl fmt::Display for SizeBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn relative_area<T: Real>(b: &BBox<T>, image_width: u32, image_height: u32) -> T {
    b.area() / (T::lit(image_width as f64) * T::lit(image_height as f64))
}

pub fn size_bin_of_box<T: Real>(b: &BBox<T>, image_width: u32, image_height: u32) -> SizeBin {
    SizeBin::from_relative_area(relative_area(b, image_width, image_height))
}

pub fn size_bin<T: Real>(ann: &Annotation<T>, image_width: u32, image_height: u32) -> SizeBin {
    size_bin_of_box(&ann.bbox, image_width, image_height)
}
