//! Image-plane points and boxes.

use std::ops::{Add, Div, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A position on the image plane, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn norm_sq(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist_sq(self, other: Point) -> f64 {
        (self - other).norm_sq()
    }

    /// Total order used for deterministic tie-breaking: smallest x, then smallest y.
    pub fn lex_lt(self, other: Point) -> bool {
        self.x < other.x || (self.x == other.x && self.y < other.y)
    }

    /// Arithmetic mean, summed in slice order. `None` for an empty slice.
    pub fn mean(points: &[Point]) -> Option<Point> {
        if points.is_empty() {
            return None;
        }
        let sum = points.iter().fold(Point::default(), |acc, &p| acc + p);
        Some(sum / points.len() as f64)
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, rhs: f64) -> Point {
        Point::new(self.x * rhs, self.y * rhs)
    }
}

impl Div<f64> for Point {
    type Output = Point;
    fn div(self, rhs: f64) -> Point {
        Point::new(self.x / rhs, self.y / rhs)
    }
}

/// Width and height in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Size {
    pub w: f64,
    pub h: f64,
}

/// Axis-aligned box given by its center and size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_center(center: Point, size: Size) -> Self {
        BBox::new(center.x, center.y, size.w, size.h)
    }

    /// Box spanning `[x0, x1] x [y0, y1]`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    pub fn size(&self) -> Size {
        Size { w: self.w, h: self.h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0) || !self.cx.is_finite() || !self.cy.is_finite()
    }

    /// Mirror across the vertical axis of an image `image_width` pixels wide.
    pub fn mirrored(&self, image_width: f64) -> BBox {
        BBox::new(image_width - self.cx, self.cy, self.w, self.h)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        let (x0, x1) = (self.cx - self.w / 2.0, self.cx + self.w / 2.0);
        let (y0, y1) = (self.cy - self.h / 2.0, self.cy + self.h / 2.0);
        x0 >= 0.0 && y0 >= 0.0 && x1 <= width && y1 <= height
    }

    /// Intersection over union.
    pub fn iou(&self, other: &BBox) -> Result<f64> {
        if self.is_degenerate() || other.is_degenerate() {
            return Err(Error::DegenerateBox);
        }
        let ix = overlap(self.cx, self.w, other.cx, other.w);
        let iy = overlap(self.cy, self.h, other.cy, other.h);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        Ok((inter / union).clamp(0.0, 1.0))
    }
}

fn overlap(c0: f64, s0: f64, c1: f64, s1: f64) -> f64 {
    let lo = (c0 - s0 / 2.0).max(c1 - s1 / 2.0);
    let hi = (c0 + s0 / 2.0).min(c1 + s1 / 2.0);
    (hi - lo).max(0.0)
}
