//! Regular lattices over boxes and real-valued fields sampled on them.

use crate::error::{Error, Result};
use crate::geom::BoxRegion;
use std::fmt;
use std::io::Write as _;
use std::path::Path;

/// Lattice geometry: sites at lower + k * spacing per axis,
/// ceil(side / spacing) + 1 sites per axis (the last site may overshoot the
/// upper corner by less than one spacing).
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    region: BoxRegion,
    spacing: f64,
    site_counts: Vec<usize>,
}

impl GridSpec {
    pub fn new(region: BoxRegion, spacing: f64) -> Result<GridSpec> {
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::invalid(format!("grid spacing must be positive, got {spacing}")));
        }
        let site_counts = (0..region.dimension())
            .map(|a| (region.side(a) / spacing - 1e-9).ceil().max(0.0) as usize + 1)
            .collect();
        Ok(GridSpec { region, spacing, site_counts })
    }

    pub fn region(&self) -> &BoxRegion {
        &self.region
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn dimension(&self) -> usize {
        self.region.dimension()
    }

    pub fn site_counts(&self) -> &[usize] {
        &self.site_counts
    }

    pub fn total_sites(&self) -> usize {
        self.site_counts.iter().product()
    }

    pub fn same_geometry(&self, other: &GridSpec) -> bool {
        self.region == other.region && self.spacing == other.spacing
    }

    /// Row-major flat index (axis 0 outermost).
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dimension());
        idx.iter().zip(&self.site_counts).fold(0, |acc, (&i, &n)| {
            debug_assert!(i < n);
            acc * n + i
        })
    }

    pub fn site_coordinate(&self, idx: &[usize], out: &mut [f64]) {
        for (a, &i) in idx.iter().enumerate() {
            out[a] = self.region.lower()[a] + i as f64 * self.spacing;
        }
    }

    /// Inclusive per-axis site index ranges whose coordinates fall inside the
    /// closed sub-box (1e-9 tolerance on the boundary).
    pub fn site_ranges(&self, sub: &BoxRegion) -> Result<Vec<(usize, usize)>> {
        if sub.dimension() != self.dimension() {
            return Err(Error::invalid("sub-region dimension mismatch".to_string()));
        }
        let mut out = Vec::with_capacity(self.dimension());
        for a in 0..self.dimension() {
            let lo = (sub.lower()[a] - self.region.lower()[a]) / self.spacing;
            let hi = (sub.upper()[a] - self.region.lower()[a]) / self.spacing;
            let k_lo = (lo - 1e-9).ceil().max(0.0) as usize;
            let k_hi_f = (hi + 1e-9).floor();
            if k_hi_f < 0.0 {
                return Err(Error::invalid(format!(
                    "sub-region lies outside the grid on axis {a}"
                )));
            }
            let k_hi = (k_hi_f as usize).min(self.site_counts[a] - 1);
            if k_lo > k_hi {
                return Err(Error::invalid(format!(
                    "sub-region contains no grid sites on axis {a}"
                )));
            }
            out.push((k_lo, k_hi));
        }
        Ok(out)
    }
}

/// Visit every multi-index in the inclusive ranges, row-major order.
pub fn for_each_in_ranges<F: FnMut(&[usize])>(ranges: &[(usize, usize)], mut f: F) {
    let mut idx: Vec<usize> = ranges.iter().map(|r| r.0).collect();
    loop {
        f(&idx);
        // odometer increment
        let mut axis = ranges.len();
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            if idx[axis] < ranges[axis].1 {
                idx[axis] += 1;
                break;
            }
            idx[axis] = ranges[axis].0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldLabel {
    ShotNoise { lambda: f64 },
    Gaussian,
    TruncatedShotNoise { lambda: f64, range: f64 },
    TruncatedGaussian { range: f64 },
}

impl fmt::Display for FieldLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldLabel::ShotNoise { lambda } => write!(f, "shot_noise(lambda={lambda})"),
            FieldLabel::Gaussian => write!(f, "gaussian"),
            FieldLabel::TruncatedShotNoise { lambda, range } => {
                write!(f, "truncated_shot_noise(lambda={lambda}, r={range})")
            }
            FieldLabel::TruncatedGaussian { range } => {
                write!(f, "truncated_gaussian(r={range})")
            }
        }
    }
}

/// A field sampled on a grid, with provenance label and the derivative
/// multi-index it represents.
#[derive(Debug, Clone)]
pub struct GridField {
    spec: GridSpec,
    values: Vec<f64>,
    label: FieldLabel,
    deriv: Vec<u32>,
}

impl GridField {
    pub fn new(
        spec: GridSpec,
        values: Vec<f64>,
        label: FieldLabel,
        deriv: Vec<u32>,
    ) -> Result<GridField> {
        if values.len() != spec.total_sites() {
            return Err(Error::invalid(format!(
                "field has {} values for {} grid sites",
                values.len(),
                spec.total_sites()
            )));
        }
        if deriv.len() != spec.dimension() {
            return Err(Error::invalid("derivative multi-index arity mismatch".to_string()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("field contains a non-finite value {bad}")));
        }
        Ok(GridField { spec, values, label, deriv })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn label(&self) -> FieldLabel {
        self.label
    }

    pub fn deriv(&self) -> &[u32] {
        &self.deriv
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.values[self.spec.flat_index(idx)]
    }

    /// Pointwise combination into a fresh field (used by shift/difference
    /// constructions in tests and experiments).
    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridField {
        GridField {
            spec: self.spec.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            label: self.label,
            deriv: self.deriv.clone(),
        }
    }

    /// Binary dump: row-major little-endian f64, plus a text sidecar
    /// `<path>.meta` describing region, spacing, label, and the stream note.
    pub fn dump(&self, path: &Path, stream_note: &str) -> Result<()> {
        let ctx = |e: std::io::Error| Error::io(path.display().to_string(), e);
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, &bytes).map_err(ctx)?;

        let meta_path = path.with_extension(format!(
            "{}meta",
            path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
        ));
        let mut meta = Vec::new();
        writeln!(meta, "dimension = {}", self.spec.dimension()).unwrap();
        let fmt_vec = |v: &[f64]| {
            v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
        };
        writeln!(meta, "lower = {}", fmt_vec(self.spec.region().lower())).unwrap();
        writeln!(meta, "upper = {}", fmt_vec(self.spec.region().upper())).unwrap();
        writeln!(meta, "spacing = {}", self.spec.spacing()).unwrap();
        writeln!(
            meta,
            "sites = {}",
            self.spec
                .site_counts()
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        )
        .unwrap();
        writeln!(meta, "label = {}", self.label).unwrap();
        writeln!(
            meta,
            "deriv = {}",
            self.deriv.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" ")
        )
        .unwrap();
        writeln!(meta, "stream = {stream_note}").unwrap();
        std::fs::write(&meta_path, &meta)
            .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
        Ok(())
    }
}

/// Max over lattice sites of |a - b| inside the closed sub-region.
pub fn sup_norm_diff(a: &GridField, b: &GridField, sub: &BoxRegion) -> Result<f64> {
    if !a.spec.same_geometry(&b.spec) {
        return Err(Error::invalid(
            "sup-norm difference requires identical grid geometry".to_string(),
        ));
    }
    let ranges = a.spec.site_ranges(sub)?;
    let mut best: f64 = 0.0;
    for_each_in_ranges(&ranges, |idx| {
        let i = a.spec.flat_index(idx);
        best = best.max((a.values[i] - b.values[i]).abs());
    });
    Ok(best)
}

/// Max over the sub-region of |values| and of every finite-difference first
/// partial (central in the grid interior, one-sided at the grid boundary).
pub fn c1_norm(field: &GridField, sub: &BoxRegion) -> Result<f64> {
    let spec = &field.spec;
    let ranges = spec.site_ranges(sub)?;
    if ranges.iter().any(|(lo, hi)| hi - lo < 1)
        || spec.site_counts().iter().any(|&n| n < 2)
    {
        return Err(Error::invalid(
            "C1 norm needs at least two sites per axis in the sub-region".to_string(),
        ));
    }
    let d = spec.dimension();
    let eps = spec.spacing();
    let counts = spec.site_counts().to_vec();
    let mut best: f64 = 0.0;
    for_each_in_ranges(&ranges, |idx| {
        let i = spec.flat_index(idx);
        best = best.max(field.values[i].abs());
        for a in 0..d {
            let mut up = idx.to_vec();
            let mut dn = idx.to_vec();
            let grad = if idx[a] + 1 < counts[a] && idx[a] >= 1 {
                up[a] += 1;
                dn[a] -= 1;
                (field.values[spec.flat_index(&up)] - field.values[spec.flat_index(&dn)])
                    / (2.0 * eps)
            } else if idx[a] + 1 < counts[a] {
                up[a] += 1;
                (field.values[spec.flat_index(&up)] - field.values[i]) / eps
            } else {
                dn[a] -= 1;
                (field.values[i] - field.values[spec.flat_index(&dn)]) / eps
            };
            best = best.max(grad.abs());
        }
    });
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_from_fn(
        region: BoxRegion,
        eps: f64,
        f: impl Fn(&[f64]) -> f64,
    ) -> GridField {
        let spec = GridSpec::new(region, eps).unwrap();
        let mut values = vec![0.0; spec.total_sites()];
        let ranges: Vec<(usize, usize)> =
            spec.site_counts().iter().map(|&n| (0, n - 1)).collect();
        let mut x = vec![0.0; spec.dimension()];
        for_each_in_ranges(&ranges, |idx| {
            spec.site_coordinate(idx, &mut x);
            values[spec.flat_index(idx)] = f(&x);
        });
        GridField::new(spec, values, FieldLabel::Gaussian, vec![0; 2]).unwrap()
    }

    #[test]
    fn site_counts_follow_ceiling_rule() {
        let spec = GridSpec::new(BoxRegion::square(0.0, 1.0).unwrap(), 0.25).unwrap();
        assert_eq!(spec.site_counts(), &[5, 5]);
        // ragged: ceil(1 / 0.3) + 1 = 5 sites, last site overshoots
        let spec = GridSpec::new(BoxRegion::square(0.0, 1.0).unwrap(), 0.3).unwrap();
        assert_eq!(spec.site_counts(), &[5, 5]);
        // no spurious extra site from float division of 1 / 0.1
        let spec = GridSpec::new(BoxRegion::square(0.0, 1.0).unwrap(), 0.1).unwrap();
        assert_eq!(spec.site_counts(), &[11, 11]);
    }

    #[test]
    fn site_ranges_select_the_expected_window() {
        let spec = GridSpec::new(BoxRegion::square(0.0, 1.0).unwrap(), 0.25).unwrap();
        let sub = BoxRegion::square(0.5, 1.0).unwrap();
        assert_eq!(spec.site_ranges(&sub).unwrap(), vec![(2, 4), (2, 4)]);
        let outside = BoxRegion::square(2.0, 3.0).unwrap();
        assert!(spec.site_ranges(&outside).is_err());
    }

    #[test]
    fn field_construction_validates() {
        let spec = GridSpec::new(BoxRegion::square(0.0, 1.0).unwrap(), 0.5).unwrap();
        assert!(GridField::new(spec.clone(), vec![0.0; 5], FieldLabel::Gaussian, vec![0, 0])
            .is_err());
        let mut vals = vec![0.0; 9];
        vals[3] = f64::NAN;
        assert!(GridField::new(spec, vals, FieldLabel::Gaussian, vec![0, 0]).is_err());
    }

    #[test]
    fn sup_norm_identity_and_shift() {
        let region = BoxRegion::square(0.0, 2.0).unwrap();
        let a = field_from_fn(region.clone(), 0.25, |x| x[0] * x[1]);
        let b = a.map(|v| v + 0.75);
        let sub = BoxRegion::square(0.0, 2.0).unwrap();
        assert_eq!(sup_norm_diff(&a, &a, &sub).unwrap(), 0.0);
        let d = sup_norm_diff(&a, &b, &sub).unwrap();
        assert!((d - 0.75).abs() < 1e-15);
        let other = field_from_fn(BoxRegion::square(0.0, 1.0).unwrap(), 0.25, |x| x[0]);
        assert!(sup_norm_diff(&a, &other, &sub).is_err());
    }

    #[test]
    fn c1_norm_of_linear_field_is_one() {
        let region = BoxRegion::square(0.0, 1.0).unwrap();
        let f = field_from_fn(region.clone(), 0.01, |x| x[0]);
        let v = c1_norm(&f, &region).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn c1_norm_of_constant_field() {
        let region = BoxRegion::square(0.0, 1.0).unwrap();
        let f = field_from_fn(region.clone(), 0.25, |_| -2.5);
        assert_eq!(c1_norm(&f, &region).unwrap(), 2.5);
        // single-site sub-region is degenerate
        let tiny = BoxRegion::square(0.4, 0.45).unwrap();
        assert!(c1_norm(&f, &tiny).is_err());
    }

    #[test]
    fn dump_writes_binary_and_sidecar() {
        let region = BoxRegion::square(0.0, 1.0).unwrap();
        let f = field_from_fn(region, 0.5, |x| x[0] + 10.0 * x[1]);
        let dir = std::env::temp_dir().join("shotperc_grid_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("field.f64");
        f.dump(&path, "unit-test").unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), f.values().len() * 8);
        let first = f64::from_le_bytes(bytes[0..8].try_into().unwrap());
        assert_eq!(first, f.values()[0]);
        let meta = std::fs::read_to_string(dir.join("field.f64.meta")).unwrap();
        assert!(meta.contains("spacing = 0.5"));
        assert!(meta.contains("label = gaussian"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
