//! Dyadic machinery: recursive halving of the unit cube, per-cell L2
//! fluctuation moduli, and the aggregated level modulus that controls
//! coupling quality.

use crate::error::{Error, Result};
use crate::geom::BoxRegion;
use crate::quad;

/// Recursive halving of the unit cube, one axis per level in cyclic order.
/// Cells are generated on demand from the level/index pair; endpoints are
/// exact dyadic rationals.
#[derive(Debug, Clone)]
pub struct BinaryExpansion {
    dimension: usize,
    depth: u32,
}

pub const MAX_DEPTH: u32 = 30;

impl BinaryExpansion {
    pub fn new(dimension: usize, depth: u32) -> Result<BinaryExpansion> {
        if dimension == 0 {
            return Err(Error::invalid("expansion dimension must be positive".to_string()));
        }
        if depth > MAX_DEPTH {
            return Err(Error::invalid(format!(
                "expansion depth {depth} exceeds the supported maximum {MAX_DEPTH}"
            )));
        }
        Ok(BinaryExpansion { dimension, depth })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// Cell k at the given level, walking the index bits from the root:
    /// the leading bit selects the child of the first split.
    pub fn cell(&self, level: u32, index: u64) -> Result<BoxRegion> {
        if level > self.depth {
            return Err(Error::invalid(format!(
                "level {level} exceeds expansion depth {}",
                self.depth
            )));
        }
        if index >> level != 0 {
            return Err(Error::invalid(format!(
                "cell index {index} out of range at level {level}"
            )));
        }
        let d = self.dimension;
        let mut corner = vec![0u64; d];
        let mut halvings = vec![0u32; d];
        for step in 0..level {
            let axis = (step as usize) % d;
            let bit = (index >> (level - 1 - step)) & 1;
            corner[axis] = 2 * corner[axis] + bit;
            halvings[axis] += 1;
        }
        let lower: Vec<f64> = corner
            .iter()
            .zip(&halvings)
            .map(|(&a, &q)| a as f64 / (1u64 << q) as f64)
            .collect();
        let upper: Vec<f64> = corner
            .iter()
            .zip(&halvings)
            .map(|(&a, &q)| (a + 1) as f64 / (1u64 << q) as f64)
            .collect();
        BoxRegion::new(lower, upper)
    }

    /// All cells of one level, in index order.
    pub fn level_cells(&self, level: u32) -> Result<Vec<BoxRegion>> {
        (0..(1u64 << level)).map(|k| self.cell(level, k)).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuadratureSpec {
    pub nodes_per_axis: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec { nodes_per_axis: 8 }
    }
}

/// Mean squared fluctuation of h around its cell average,
/// Vol(D)^{-1} int_D (h - mean)^2, by tensor Gauss-Legendre quadrature.
/// Fewer than 4 nodes per axis are promoted to 4.
pub fn l2_modulus(
    h: impl Fn(&[f64]) -> f64,
    cell: &BoxRegion,
    spec: QuadratureSpec,
) -> f64 {
    let d = cell.dimension();
    let n = spec.nodes_per_axis.max(4);
    let base = quad::gauss_legendre(n);

    // tensor nodes mapped to the cell; two passes over cached values keep
    // the variance free of large-mean cancellation
    let total = n.pow(d as u32);
    let mut values = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    let mut x = vec![0.0f64; d];
    let mut idx = vec![0usize; d];
    loop {
        let mut w = 1.0;
        for a in 0..d {
            let (node, wt) = base[idx[a]];
            // gauss_legendre nodes live on [-1, 1]
            x[a] = cell.lower()[a] + 0.5 * cell.side(a) * (node + 1.0);
            w *= 0.5 * wt;
        }
        values.push(h(&x));
        weights.push(w);
        let mut axis = d;
        loop {
            if axis == 0 {
                break;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < n {
                break;
            }
            idx[axis] = 0;
        }
        if idx.iter().all(|&i| i == 0) {
            break;
        }
    }

    // a node-constant function has modulus exactly zero; skipping the
    // arithmetic keeps the "zero iff constant" contract free of roundoff
    if values.iter().all(|&v| v == values[0]) {
        return 0.0;
    }
    let w_total: f64 = weights.iter().sum();
    let mean: f64 = values.iter().zip(&weights).map(|(v, w)| v * w).sum::<f64>() / w_total;
    let second: f64 = values
        .iter()
        .zip(&weights)
        .map(|(v, w)| {
            let c = v - mean;
            c * c * w
        })
        .sum::<f64>()
        / w_total;
    second.max(0.0)
}

/// Aggregated level modulus: the root of the sum of every cell's l2_modulus
/// over levels 0..=m.
pub fn q_modulus(
    h: impl Fn(&[f64]) -> f64,
    expansion: &BinaryExpansion,
    m: u32,
    spec: QuadratureSpec,
) -> Result<f64> {
    if m > expansion.depth() {
        return Err(Error::invalid(format!(
            "level {m} exceeds expansion depth {}",
            expansion.depth()
        )));
    }
    let mut sum = 0.0;
    for level in 0..=m {
        for k in 0..(1u64 << level) {
            let cell = expansion.cell(level, k)?;
            sum += l2_modulus(&h, &cell, spec);
        }
    }
    Ok(sum.sqrt())
}

/// Worst normalized Neumann-Poincare constant among the cell shapes the
/// expansion produces (cubes and 2:1 boxes): the optimal box constant is
/// (longest side / pi)^2, normalized here by the squared diameter.
pub fn poincare_constant(dimension: usize) -> f64 {
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    let mut worst = 0.0f64;
    for stretched in [false, true] {
        let mut sides = vec![1.0f64; dimension];
        if stretched {
            sides[0] = 2.0;
        }
        let l_max: f64 = sides.iter().fold(0.0, |m, &s| m.max(s));
        let diam_sq: f64 = sides.iter().map(|s| s * s).sum();
        worst = worst.max(l_max * l_max / (pi2 * diam_sq));
    }
    worst
}

/// L2 norm of the gradient over the unit cube, by central finite
/// differences under tensor Gauss-Legendre quadrature.
pub fn gradient_l2_norm(
    h: impl Fn(&[f64]) -> f64,
    dimension: usize,
    spec: QuadratureSpec,
) -> f64 {
    let cube = BoxRegion::unit_cube(dimension);
    let n = spec.nodes_per_axis.max(4);
    let base = quad::gauss_legendre(n);
    let step = 1e-4;

    let mut idx = vec![0usize; dimension];
    let mut x = vec![0.0f64; dimension];
    let mut sum = 0.0;
    loop {
        let mut w = 1.0;
        for a in 0..dimension {
            let (node, wt) = base[idx[a]];
            x[a] = cube.lower()[a] + 0.5 * (node + 1.0);
            w *= 0.5 * wt;
        }
        let mut grad_sq = 0.0;
        for a in 0..dimension {
            let keep = x[a];
            x[a] = keep + step;
            let hi = h(&x);
            x[a] = keep - step;
            let lo = h(&x);
            x[a] = keep;
            let g = (hi - lo) / (2.0 * step);
            grad_sq += g * g;
        }
        sum += w * grad_sq;
        let mut axis = dimension;
        loop {
            if axis == 0 {
                break;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < n {
                break;
            }
            idx[axis] = 0;
        }
        if idx.iter().all(|&i| i == 0) {
            break;
        }
    }
    sum.sqrt()
}
