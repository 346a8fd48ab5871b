//! Axis-aligned boxes and flat point storage.

use crate::error::{Error, Result};

/// Axis-aligned box with strictly positive volume.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegion {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<BoxRegion> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::invalid(format!(
                "box corners must share a positive dimension, got {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || hi <= lo {
                return Err(Error::invalid(format!(
                    "box axis {i} needs finite lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(BoxRegion { lower, upper })
    }

    pub fn unit_cube(dimension: usize) -> BoxRegion {
        BoxRegion::new(vec![0.0; dimension], vec![1.0; dimension]).expect("unit cube")
    }

    /// d = 2 convenience: [x_lo, x_hi] x [y_lo, y_hi].
    pub fn rect(x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) -> Result<BoxRegion> {
        BoxRegion::new(vec![x_lo, y_lo], vec![x_hi, y_hi])
    }

    pub fn square(lo: f64, hi: f64) -> Result<BoxRegion> {
        BoxRegion::rect(lo, hi, lo, hi)
    }

    pub fn dimension(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn side(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(lo, hi)| hi - lo).product()
    }

    /// Half-open membership: lower <= x < upper componentwise.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dimension()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&c, (&lo, &hi))| lo <= c && c < hi)
    }

    /// Closed membership with a tolerance for boundary sites.
    pub fn contains_closed(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dimension()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&c, (&lo, &hi))| lo - tol <= c && c <= hi + tol)
    }

    /// Whether self sits inside `other` (closed, with tolerance).
    pub fn inside(&self, other: &BoxRegion, tol: f64) -> bool {
        self.dimension() == other.dimension()
            && self
                .lower
                .iter()
                .zip(&other.lower)
                .all(|(&a, &b)| a >= b - tol)
            && self.upper.iter().zip(&other.upper).all(|(&a, &b)| a <= b + tol)
    }

    /// Grow the box by `pad` on every side.
    pub fn grow(&self, pad: f64) -> Result<BoxRegion> {
        BoxRegion::new(
            self.lower.iter().map(|&v| v - pad).collect(),
            self.upper.iter().map(|&v| v + pad).collect(),
        )
    }

    pub fn translate(&self, shift: &[f64]) -> Result<BoxRegion> {
        if shift.len() != self.dimension() {
            return Err(Error::invalid("translation arity mismatch".to_string()));
        }
        BoxRegion::new(
            self.lower.iter().zip(shift).map(|(&v, &s)| v + s).collect(),
            self.upper.iter().zip(shift).map(|(&v, &s)| v + s).collect(),
        )
    }
}

/// Euclidean distance between two boxes (zero if they intersect).
pub fn box_distance(a: &BoxRegion, b: &BoxRegion) -> f64 {
    assert_eq!(a.dimension(), b.dimension());
    let mut sq = 0.0;
    for i in 0..a.dimension() {
        let gap = (a.lower()[i] - b.upper()[i]).max(b.lower()[i] - a.upper()[i]).max(0.0);
        sq += gap * gap;
    }
    sq.sqrt()
}

/// Flat row-major point storage: n points of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    dimension: usize,
    coords: Vec<f64>,
}

impl Points {
    pub fn new(dimension: usize) -> Points {
        Points { dimension, coords: Vec::new() }
    }

    pub fn with_capacity(dimension: usize, n: usize) -> Points {
        Points { dimension, coords: Vec::with_capacity(n * dimension) }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dimension
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn push(&mut self, p: &[f64]) {
        debug_assert_eq!(p.len(), self.dimension);
        self.coords.extend_from_slice(p);
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dimension)
    }

    pub fn extend(&mut self, other: &Points) {
        debug_assert_eq!(self.dimension, other.dimension);
        self.coords.extend_from_slice(&other.coords);
    }
}
