//! Field synthesis: shot-noise and Gaussian fields rendered on grids by
//! binning sources to a padded lattice and FFT-convolving with a sampled
//! kernel table.
//!
//! The shot-noise compensator is the captured lattice mass (the exact mean
//! of the binned model), not the full-space integral: for slowly decaying
//! kernels the uncaptured tail would otherwise leave a bias of order
//! sqrt(lambda) times the tail mass at any affordable padding. The captured
//! mass converges to the full integral as the padding grows, and the
//! synthesized field is exactly centered at every padding.

use crate::dist;
use crate::error::{Error, Result};
use crate::fftconv::{self, FftEngine, KernelSpectrum};
use crate::geom::{BoxRegion, Points};
use crate::grid::{for_each_in_ranges, FieldLabel, GridField, GridSpec};
use crate::kernel::{parse_multi_index, DerivForm, EvalKernel};
use crate::point_process;
use rand_chacha::ChaCha8Rng;

/// Largest neglected-tail bound a padding radius may leave behind.
pub const PAD_TAIL_TOL: f64 = 1.0;

fn tail_bound(kernel: &dyn EvalKernel, order: u32, radius: f64) -> f64 {
    // the value tail has its own (much tighter) closed form; derivative
    // tails fall back to the uniform decay-constant bound
    if order == 0 {
        kernel.radial_tail_mass(radius)
    } else {
        kernel.deriv_tail_bound(radius)
    }
}

/// Smallest padding radius whose neglected-tail bound drops below `tol`.
pub fn required_pad_radius(kernel: &dyn EvalKernel, order: u32, tol: f64) -> f64 {
    if let Some(sup) = kernel.support_radius() {
        return sup;
    }
    let mut hi = 1.0;
    while tail_bound(kernel, order, hi) >= tol {
        hi *= 2.0;
        if hi > 1e12 {
            return hi;
        }
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if tail_bound(kernel, order, mid) < tol {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

fn check_pad(kernel: &dyn EvalKernel, order: u32, pad_radius: f64) -> Result<()> {
    if !(pad_radius.is_finite() && pad_radius >= 0.0) {
        return Err(Error::invalid(format!("pad radius must be nonnegative, got {pad_radius}")));
    }
    let bound = tail_bound(kernel, order, pad_radius);
    if bound >= PAD_TAIL_TOL {
        let needed = required_pad_radius(kernel, order, PAD_TAIL_TOL);
        return Err(Error::invalid(format!(
            "pad radius {pad_radius} leaves a neglected kernel tail bound of {bound:.3e} \
             (tolerance {PAD_TAIL_TOL:.1e}); increase it to at least {needed:.3}"
        )));
    }
    Ok(())
}

/// Grid extended by whole sites on every side; sources live on the extended
/// lattice, fields are read off on the interior window.
#[derive(Debug, Clone)]
pub struct PaddedLayout {
    spec: GridSpec,
    pad_sites: usize,
    padded_counts: Vec<usize>,
}

impl PaddedLayout {
    pub fn new(spec: &GridSpec, pad_radius: f64) -> Result<PaddedLayout> {
        if !(pad_radius.is_finite() && pad_radius >= 0.0) {
            return Err(Error::invalid(format!(
                "pad radius must be nonnegative, got {pad_radius}"
            )));
        }
        let p = (pad_radius / spec.spacing() - 1e-9).ceil().max(0.0) as usize;
        let padded_counts = spec.site_counts().iter().map(|&n| n + 2 * p).collect();
        Ok(PaddedLayout { spec: spec.clone(), pad_sites: p, padded_counts })
    }

    /// Variant whose padded cell block tiles exactly into unit boxes:
    /// site counts are rounded up to a multiple of 1/spacing (which must be
    /// an integer) and the grid origin must sit on the spacing lattice.
    pub fn unit_aligned(spec: &GridSpec, pad_radius: f64) -> Result<PaddedLayout> {
        let eps = spec.spacing();
        let per_unit = 1.0 / eps;
        if (per_unit - per_unit.round()).abs() > 1e-9 || per_unit < 2.0 {
            return Err(Error::invalid(format!(
                "unit-cell alignment needs an integer 1/spacing >= 2, got spacing {eps}"
            )));
        }
        let per_unit = per_unit.round() as usize;
        for (a, &lo) in spec.region().lower().iter().enumerate() {
            if (lo / eps - (lo / eps).round()).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "unit-cell alignment needs the axis-{a} origin {lo} on the spacing lattice"
                )));
            }
        }
        let mut layout = PaddedLayout::new(spec, pad_radius)?;
        for n in layout.padded_counts.iter_mut() {
            *n = n.div_ceil(per_unit) * per_unit;
        }
        Ok(layout)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn pad_sites(&self) -> usize {
        self.pad_sites
    }

    pub fn padded_counts(&self) -> &[usize] {
        &self.padded_counts
    }

    pub fn total_padded(&self) -> usize {
        self.padded_counts.iter().product()
    }

    pub fn first_site(&self, axis: usize) -> f64 {
        self.spec.region().lower()[axis] - self.pad_sites as f64 * self.spec.spacing()
    }

    pub fn padded_site(&self, idx: &[usize], out: &mut [f64]) {
        for (a, &i) in idx.iter().enumerate() {
            out[a] = self.first_site(a) + i as f64 * self.spec.spacing();
        }
    }

    /// Half-open box tiled exactly by the padded lattice cells
    /// [site - eps/2, site + eps/2).
    pub fn point_box(&self) -> BoxRegion {
        let eps = self.spec.spacing();
        let lower: Vec<f64> = (0..self.spec.dimension())
            .map(|a| self.first_site(a) - 0.5 * eps)
            .collect();
        let upper: Vec<f64> = lower
            .iter()
            .zip(&self.padded_counts)
            .map(|(&lo, &n)| lo + n as f64 * eps)
            .collect();
        BoxRegion::new(lower, upper).expect("padded box")
    }

    /// Per-cell counts of the given points on the padded lattice, row-major.
    /// Points are assigned to the nearest site; strays clamp to the border.
    pub fn bin(&self, points: &Points) -> Vec<f64> {
        let eps = self.spec.spacing();
        let d = self.spec.dimension();
        let mut counts = vec![0.0f64; self.total_padded()];
        for p in points.iter() {
            let mut flat = 0usize;
            for a in 0..d {
                let rel = (p[a] - self.first_site(a)) / eps + 0.5;
                let i = (rel.floor().max(0.0) as usize).min(self.padded_counts[a] - 1);
                flat = flat * self.padded_counts[a] + i;
            }
            counts[flat] += 1.0;
        }
        counts
    }
}

/// Reusable synthesis pipeline for one (kernel, derivative, grid, padding)
/// choice: kernel spectrum and FFT plans are built once, replicas stream
/// sources through it.
pub struct FieldAssembler {
    layout: PaddedLayout,
    conv_dims: Vec<usize>,
    engine: FftEngine,
    spectrum: KernelSpectrum,
    lattice_mean: Vec<f64>,
    deriv: Vec<u32>,
    truncation_range: Option<f64>,
}

impl FieldAssembler {
    pub fn new(
        kernel: &dyn EvalKernel,
        alpha: &[u32],
        spec: &GridSpec,
        pad_radius: f64,
    ) -> Result<FieldAssembler> {
        let form = parse_multi_index(alpha, spec.dimension())?;
        if kernel.dimension() != spec.dimension() {
            return Err(Error::invalid(format!(
                "kernel dimension {} does not match grid dimension {}",
                kernel.dimension(),
                spec.dimension()
            )));
        }
        let order: u32 = alpha.iter().sum();
        check_pad(kernel, order, pad_radius)?;
        let layout = PaddedLayout::new(spec, pad_radius)?;
        FieldAssembler::from_layout(kernel, alpha, form, layout)
    }

    /// Same pipeline over a caller-built layout (unit-aligned layouts for
    /// the coupled construction).
    pub fn with_layout(
        kernel: &dyn EvalKernel,
        alpha: &[u32],
        layout: PaddedLayout,
    ) -> Result<FieldAssembler> {
        let form = parse_multi_index(alpha, layout.spec().dimension())?;
        if kernel.dimension() != layout.spec().dimension() {
            return Err(Error::invalid("kernel/grid dimension mismatch".to_string()));
        }
        FieldAssembler::from_layout(kernel, alpha, form, layout)
    }

    fn from_layout(
        kernel: &dyn EvalKernel,
        alpha: &[u32],
        form: DerivForm,
        layout: PaddedLayout,
    ) -> Result<FieldAssembler> {
        let d = layout.spec().dimension();
        let eps = layout.spec().spacing();
        let conv_dims: Vec<usize> = layout
            .padded_counts()
            .iter()
            .map(|&n| fftconv::next_good_len(2 * n - 1))
            .collect();
        let total: usize = conv_dims.iter().product();

        // offset table: index m decodes to the signed lattice offset m or
        // m - M; the gap between the two bands stays zero and is never read
        // back because the convolution is linear (no wraparound reaches the
        // padded window).
        let mut table = vec![0.0f64; total];
        let mut x = vec![0.0f64; d];
        for (flat, slot) in table.iter_mut().enumerate() {
            let mut rest = flat;
            let mut dead = false;
            for a in (0..d).rev() {
                let m = rest % conv_dims[a];
                rest /= conv_dims[a];
                let n = layout.padded_counts()[a];
                let j = if m < n {
                    m as isize
                } else if m + n > conv_dims[a] {
                    m as isize - conv_dims[a] as isize
                } else {
                    dead = true;
                    break;
                };
                x[a] = j as f64 * eps;
            }
            if !dead {
                *slot = kernel.eval_form(form, &x);
            }
        }

        let mut engine = FftEngine::new();
        let spectrum = KernelSpectrum::from_real(&mut engine, &table, &conv_dims);

        let mut out = FieldAssembler {
            layout,
            conv_dims,
            engine,
            spectrum,
            lattice_mean: Vec::new(),
            deriv: alpha.to_vec(),
            truncation_range: kernel.support_radius().map(|s| 2.0 * s),
        };
        // captured mass per interior site: eps^d * sum of the table over the
        // padded lattice, one convolution of an all-ones source
        let ones = vec![1.0f64; out.layout.total_padded()];
        let win = out.convolve(&ones);
        let cell = eps.powi(d as i32);
        out.lattice_mean = win.into_iter().map(|v| v * cell).collect();
        Ok(out)
    }

    pub fn layout(&self) -> &PaddedLayout {
        &self.layout
    }

    /// Captured kernel mass per interior site (the shot-noise compensator
    /// per unit intensity).
    pub fn lattice_mean(&self) -> &[f64] {
        &self.lattice_mean
    }

    pub fn point_box(&self) -> BoxRegion {
        self.layout.point_box()
    }

    fn embed(&self, padded: &[f64]) -> Vec<f64> {
        let d = self.layout.spec().dimension();
        let mut src = vec![0.0f64; self.conv_dims.iter().product()];
        let row = self.layout.padded_counts()[d - 1];
        let ranges: Vec<(usize, usize)> = self
            .layout
            .padded_counts()
            .iter()
            .take(d - 1)
            .map(|&n| (0, n - 1))
            .collect();
        let mut from = 0usize;
        for_each_in_ranges(&ranges, |idx| {
            let mut to = 0usize;
            for (a, &i) in idx.iter().enumerate() {
                to = (to + i) * self.conv_dims[a + 1];
            }
            src[to..to + row].copy_from_slice(&padded[from..from + row]);
            from += row;
        });
        src
    }

    fn extract(&self, conv: &[f64]) -> Vec<f64> {
        let d = self.layout.spec().dimension();
        let counts = self.layout.spec().site_counts();
        let p = self.layout.pad_sites();
        let row = counts[d - 1];
        let mut values = vec![0.0f64; self.layout.spec().total_sites()];
        let ranges: Vec<(usize, usize)> =
            counts.iter().take(d - 1).map(|&n| (0, n - 1)).collect();
        let mut to = 0usize;
        for_each_in_ranges(&ranges, |idx| {
            let mut from = 0usize;
            for (a, &i) in idx.iter().enumerate() {
                from = (from + i + p) * self.conv_dims[a + 1];
            }
            values[to..to + row].copy_from_slice(&conv[from + p..from + p + row]);
            to += row;
        });
        values
    }

    fn convolve(&mut self, padded: &[f64]) -> Vec<f64> {
        let src = self.embed(padded);
        let conv = fftconv::convolve_one(&mut self.engine, &src, &self.spectrum);
        self.extract(&conv)
    }

    fn shot_label(&self, lambda: f64) -> FieldLabel {
        match self.truncation_range {
            Some(range) => FieldLabel::TruncatedShotNoise { lambda, range },
            None => FieldLabel::ShotNoise { lambda },
        }
    }

    fn gauss_label(&self) -> FieldLabel {
        match self.truncation_range {
            Some(range) => FieldLabel::TruncatedGaussian { range },
            None => FieldLabel::Gaussian,
        }
    }

    /// Compensated shot-noise field from caller-supplied points.
    pub fn shot_noise_from_points(&mut self, lambda: f64, points: &Points) -> Result<GridField> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::invalid(format!("intensity must be positive, got {lambda}")));
        }
        let counts = self.layout.bin(points);
        self.shot_noise_from_counts(lambda, &counts)
    }

    /// Compensated shot-noise field from pre-binned padded-lattice counts.
    pub fn shot_noise_from_counts(&mut self, lambda: f64, counts: &[f64]) -> Result<GridField> {
        let win = self.convolve(counts);
        let sqrt_l = lambda.sqrt();
        let values: Vec<f64> = win
            .iter()
            .zip(&self.lattice_mean)
            .map(|(&v, &m)| (v - lambda * m) / sqrt_l)
            .collect();
        GridField::new(self.layout.spec().clone(), values, self.shot_label(lambda), self.deriv.clone())
    }

    /// Samples a Poisson configuration on the padded box and renders it.
    pub fn shot_noise(&mut self, lambda: f64, rng: &mut ChaCha8Rng) -> Result<GridField> {
        let config = point_process::sample_poisson(&self.point_box(), lambda, rng)?;
        self.shot_noise_from_points(lambda, &config.points)
    }

    /// Gaussian moving-average field from caller-supplied cell masses.
    pub fn gaussian_from_masses(&mut self, masses: &[f64]) -> Result<GridField> {
        let values = self.convolve(masses);
        GridField::new(self.layout.spec().clone(), values, self.gauss_label(), self.deriv.clone())
    }

    /// Draws i.i.d. N(0, eps^d) cell masses (discrete white noise) and
    /// renders the moving average.
    pub fn gaussian(&mut self, rng: &mut ChaCha8Rng) -> Result<GridField> {
        let sd = self
            .layout
            .spec()
            .spacing()
            .powi(self.layout.spec().dimension() as i32)
            .sqrt();
        let masses: Vec<f64> =
            (0..self.layout.total_padded()).map(|_| sd * dist::draw_standard_normal(rng)).collect();
        self.gaussian_from_masses(&masses)
    }

    /// Renders both halves of a coupled source pair with one transform pair.
    pub fn assemble_pair(
        &mut self,
        counts: &[f64],
        lambda: f64,
        masses: &[f64],
    ) -> Result<(GridField, GridField)> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::invalid(format!("intensity must be positive, got {lambda}")));
        }
        let a = self.embed(counts);
        let b = self.embed(masses);
        let (ca, cb) = fftconv::convolve_pair(&mut self.engine, &a, &b, &self.spectrum);
        let wa = self.extract(&ca);
        let wb = self.extract(&cb);
        let sqrt_l = lambda.sqrt();
        let shot_values: Vec<f64> = wa
            .iter()
            .zip(&self.lattice_mean)
            .map(|(&v, &m)| (v - lambda * m) / sqrt_l)
            .collect();
        let shot = GridField::new(
            self.layout.spec().clone(),
            shot_values,
            self.shot_label(lambda),
            self.deriv.clone(),
        )?;
        let gauss = GridField::new(
            self.layout.spec().clone(),
            wb,
            self.gauss_label(),
            self.deriv.clone(),
        )?;
        Ok((shot, gauss))
    }
}

pub fn synthesize_shot_noise(
    kernel: &dyn EvalKernel,
    alpha: &[u32],
    lambda: f64,
    spec: &GridSpec,
    pad_radius: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GridField> {
    FieldAssembler::new(kernel, alpha, spec, pad_radius)?.shot_noise(lambda, rng)
}

pub fn synthesize_gaussian(
    kernel: &dyn EvalKernel,
    alpha: &[u32],
    spec: &GridSpec,
    pad_radius: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GridField> {
    FieldAssembler::new(kernel, alpha, spec, pad_radius)?.gaussian(rng)
}

/// Slow reference path: the field is evaluated by direct summation over the
/// exact point positions, and the compensator by direct summation over the
/// padded lattice. Shares no code with the FFT pipeline.
pub fn reference_shot_noise(
    kernel: &dyn EvalKernel,
    alpha: &[u32],
    lambda: f64,
    spec: &GridSpec,
    pad_radius: f64,
    points: &Points,
) -> Result<GridField> {
    let form = parse_multi_index(alpha, spec.dimension())?;
    let order: u32 = alpha.iter().sum();
    check_pad(kernel, order, pad_radius)?;
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::invalid(format!("intensity must be positive, got {lambda}")));
    }
    let layout = PaddedLayout::new(spec, pad_radius)?;
    let d = spec.dimension();
    let eps = spec.spacing();
    let cell = eps.powi(d as i32);
    let sqrt_l = lambda.sqrt();

    let site_ranges: Vec<(usize, usize)> =
        spec.site_counts().iter().map(|&n| (0, n - 1)).collect();
    let padded_ranges: Vec<(usize, usize)> =
        layout.padded_counts().iter().map(|&n| (0, n - 1)).collect();

    let mut values = Vec::with_capacity(spec.total_sites());
    let mut site = vec![0.0f64; d];
    let mut z = vec![0.0f64; d];
    let mut diff = vec![0.0f64; d];
    for_each_in_ranges(&site_ranges, |idx| {
        spec.site_coordinate(idx, &mut site);
        let mut sum = 0.0;
        for p in points.iter() {
            for a in 0..d {
                diff[a] = site[a] - p[a];
            }
            sum += kernel.eval_form(form, &diff);
        }
        let mut mass = 0.0;
        for_each_in_ranges(&padded_ranges, |zidx| {
            layout.padded_site(zidx, &mut z);
            for a in 0..d {
                diff[a] = site[a] - z[a];
            }
            mass += kernel.eval_form(form, &diff);
        });
        values.push((sum - lambda * mass * cell) / sqrt_l);
    });

    let label = match kernel.support_radius() {
        Some(s) => FieldLabel::TruncatedShotNoise { lambda, range: 2.0 * s },
        None => FieldLabel::ShotNoise { lambda },
    };
    GridField::new(spec.clone(), values, label, alpha.to_vec())
}

/// Pointwise sum of two kernels of the same dimension, for linearity checks
/// and composite-kernel synthesis. The squared-integral entry of
/// `integrals` is not available (the cross term has no closed form here).
pub struct SummedKernel<'a> {
    a: &'a dyn EvalKernel,
    b: &'a dyn EvalKernel,
}

impl<'a> SummedKernel<'a> {
    pub fn new(a: &'a dyn EvalKernel, b: &'a dyn EvalKernel) -> Result<SummedKernel<'a>> {
        if a.dimension() != b.dimension() {
            return Err(Error::invalid("summed kernels must share a dimension".to_string()));
        }
        Ok(SummedKernel { a, b })
    }
}

impl EvalKernel for SummedKernel<'_> {
    fn dimension(&self) -> usize {
        self.a.dimension()
    }

    fn profile(&self, s: f64) -> (f64, f64, f64) {
        let (va, pa1, pa2) = self.a.profile(s);
        let (vb, pb1, pb2) = self.b.profile(s);
        (va + vb, pa1 + pb1, pa2 + pb2)
    }

    fn support_radius(&self) -> Option<f64> {
        match (self.a.support_radius(), self.b.support_radius()) {
            (Some(x), Some(y)) => Some(x.max(y)),
            _ => None,
        }
    }

    fn decay_exponent(&self) -> f64 {
        self.a.decay_exponent().min(self.b.decay_exponent())
    }

    fn decay_constant(&self) -> f64 {
        // valid at the joint (smaller) exponent since each factor's weight
        // only shrinks
        self.a.decay_constant() + self.b.decay_constant()
    }

    fn integrals(&self) -> Result<(f64, f64)> {
        Err(Error::invalid(
            "summed kernel exposes no closed integral pair; query the parts".to_string(),
        ))
    }

    fn radial_tail_mass(&self, radius: f64) -> f64 {
        self.a.radial_tail_mass(radius) + self.b.radial_tail_mass(radius)
    }

    fn deriv_tail_bound(&self, radius: f64) -> f64 {
        self.a.deriv_tail_bound(radius) + self.b.deriv_tail_bound(radius)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{c1_norm, sup_norm_diff};
    use crate::kernel::{CovarianceOracle, CovarianceSpec, Kernel};
    use crate::rng;
    use crate::stats;

    fn k_rational() -> Kernel {
        Kernel::rational(3.0, 2).unwrap()
    }

    fn unit_spec(eps: f64) -> GridSpec {
        GridSpec::new(BoxRegion::unit_cube(2), eps).unwrap()
    }

    #[test]
    fn pad_precondition_rejects_small_radius() {
        let k = k_rational();
        let spec = unit_spec(0.1);
        let needed = required_pad_radius(&k, 0, PAD_TAIL_TOL);
        // rational beta=3 value tail 2*pi/R crosses 1.0 near R = 6.28
        assert!((needed - 2.0 * std::f64::consts::PI).abs() < 1e-3, "needed {needed}");
        let err = FieldAssembler::new(&k, &[0, 0], &spec, 0.5 * needed).map(|_| ()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("pad radius"), "message: {msg}");
        assert!(FieldAssembler::new(&k, &[0, 0], &spec, 1.05 * needed).is_ok());

        // truncated kernel: support radius r/2 is exactly enough
        let t = k.truncated(8.0).unwrap();
        assert!(FieldAssembler::new(&t, &[0, 0], &spec, 4.0).is_ok());
        assert!(FieldAssembler::new(&t, &[0, 0], &spec, 3.0).is_err());
    }

    #[test]
    fn captured_mass_approaches_truncated_integral() {
        // deterministic discretization check: the lattice compensator of a
        // compactly supported kernel matches its integral to midpoint-rule
        // accuracy
        let t = k_rational().truncated(8.0).unwrap();
        let (mass, _) = t.integrals().unwrap();
        let asm = FieldAssembler::new(&t, &[0, 0], &unit_spec(0.1), 4.0).unwrap();
        for &m in asm.lattice_mean() {
            assert!((m - mass).abs() < 3e-3, "captured {m} vs integral {mass}");
        }
        // and refines with the lattice
        let fine = FieldAssembler::new(&t, &[0, 0], &unit_spec(0.05), 4.0).unwrap();
        let coarse_err = (asm.lattice_mean()[0] - mass).abs();
        let fine_err = (fine.lattice_mean()[0] - mass).abs();
        assert!(fine_err < coarse_err, "{fine_err} vs {coarse_err}");
    }

    #[test]
    fn mean_mass_recovery_over_replicas() {
        // raw (uncompensated) field mean at one site recovers lambda * mass
        let t = k_rational().truncated(8.0).unwrap();
        let (mass, _) = t.integrals().unwrap();
        let lambda = 64.0f64;
        let mut asm = FieldAssembler::new(&t, &[0, 0], &unit_spec(0.1), 4.0).unwrap();
        let reps = 1000usize;
        let mut raw = Vec::with_capacity(reps);
        let sqrt_l = lambda.sqrt();
        for rep in 0..reps {
            let mut r = rng::stream(21, &[rep as u64]);
            let f = asm.shot_noise(lambda, &mut r).unwrap();
            raw.push(sqrt_l * f.values()[0] + lambda * asm.lattice_mean()[0]);
        }
        let mean = stats::mean(&raw);
        let se = stats::stderr_of_mean(&raw);
        assert!(
            (mean - lambda * mass).abs() < 3.0 * se + lambda * 3e-3,
            "mean {mean} vs {} (se {se})",
            lambda * mass
        );
    }

    #[test]
    fn empty_sample_sits_at_negative_compensator() {
        let t = k_rational().truncated(8.0).unwrap();
        let mut asm = FieldAssembler::new(&t, &[0, 0], &unit_spec(0.1), 4.0).unwrap();
        let lambda = 1e-12;
        let mut r = rng::stream(22, &[0]);
        let f = asm.shot_noise(lambda, &mut r).unwrap();
        assert_eq!(f.label(), FieldLabel::TruncatedShotNoise { lambda, range: 8.0 });
        let sqrt_l = lambda.sqrt();
        for (v, m) in f.values().iter().zip(asm.lattice_mean()) {
            let expected = (0.0 - lambda * m) / sqrt_l;
            assert_eq!(*v, expected);
        }
    }

    #[test]
    fn pointwise_variance_matches_covariance_oracle() {
        let k = k_rational();
        let spec = GridSpec::new(BoxRegion::square(0.0, 0.2).unwrap(), 0.1).unwrap();
        let oracle = CovarianceOracle::new(&k, CovarianceSpec::default()).unwrap();
        let k0 = oracle.eval(&[0.0, 0.0]).unwrap();
        let lambda = 64.0;
        let mut asm = FieldAssembler::new(&k, &[0, 0], &spec, 8.0).unwrap();
        let reps = 1000usize;
        let mut vals = Vec::with_capacity(reps);
        for rep in 0..reps {
            let mut r = rng::stream(23, &[rep as u64]);
            vals.push(asm.shot_noise(lambda, &mut r).unwrap().values()[0]);
        }
        let mean = stats::mean(&vals);
        let v = stats::variance(&vals);
        let m4: f64 = vals.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / reps as f64;
        let se_var = ((m4 - v * v).max(0.0) / reps as f64).sqrt();
        assert!(mean.abs() < 3.0 * stats::stderr_of_mean(&vals), "mean {mean}");
        assert!((v - k0).abs() < 3.0 * se_var, "var {v} vs K(0) {k0} (se {se_var})");
    }

    #[test]
    fn gaussian_mean_and_covariance_probes() {
        let k = k_rational();
        // grid spacing matches the oracle table lattice so lags line up
        let spec = GridSpec::new(BoxRegion::square(0.0, 2.0).unwrap(), 0.125).unwrap();
        let oracle = CovarianceOracle::new(&k, CovarianceSpec::default()).unwrap();
        let lags: [(usize, usize); 5] = [(0, 0), (3, 4), (6, 8), (9, 12), (12, 16)];
        let probes: Vec<Vec<f64>> =
            lags.iter().map(|&(i, j)| vec![0.125 * i as f64, 0.125 * j as f64]).collect();
        let targets = oracle.eval_many(&probes).unwrap();

        let mut asm = FieldAssembler::new(&k, &[0, 0], &spec, 8.0).unwrap();
        let reps = 1000usize;
        let mut at_origin = Vec::with_capacity(reps);
        let mut products: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); lags.len()];
        for rep in 0..reps {
            let mut r = rng::stream(24, &[rep as u64]);
            let f = asm.gaussian(&mut r).unwrap();
            assert_eq!(f.label(), FieldLabel::Gaussian);
            let x0 = f.at(&[0, 0]);
            at_origin.push(x0);
            for (slot, &(i, j)) in products.iter_mut().zip(&lags) {
                slot.push(x0 * f.at(&[i, j]));
            }
        }
        let mean = stats::mean(&at_origin);
        assert!(mean.abs() < 3.0 * stats::stderr_of_mean(&at_origin), "mean {mean}");
        for (p, (&target, &(i, j))) in products.iter().zip(targets.iter().zip(&lags)) {
            let est = stats::mean(p);
            let se = stats::stderr_of_mean(p);
            assert!(
                (est - target).abs() < 4.0 * se,
                "lag ({i},{j}): {est} vs {target} (se {se})"
            );
        }
    }

    #[test]
    fn independent_streams_give_uncorrelated_fields() {
        let k = k_rational();
        let spec = GridSpec::new(BoxRegion::square(0.0, 0.2).unwrap(), 0.1).unwrap();
        let mut asm = FieldAssembler::new(&k, &[0, 0], &spec, 8.0).unwrap();
        let reps = 500usize;
        let mut xs = Vec::with_capacity(reps);
        let mut ys = Vec::with_capacity(reps);
        for rep in 0..reps {
            let mut ra = rng::stream(25, &[0, rep as u64]);
            let mut rb = rng::stream(25, &[1, rep as u64]);
            xs.push(asm.gaussian(&mut ra).unwrap().values()[0]);
            ys.push(asm.gaussian(&mut rb).unwrap().values()[0]);
        }
        let mx = stats::mean(&xs);
        let my = stats::mean(&ys);
        let cov: f64 =
            xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (reps - 1) as f64;
        let corr = cov / (stats::variance(&xs) * stats::variance(&ys)).sqrt();
        assert!(corr.abs() < 4.0 / (reps as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn synthesis_is_linear_in_the_kernel() {
        let k1 = k_rational();
        let k2 = Kernel::rational(4.0, 2).unwrap();
        let sum = SummedKernel::new(&k1, &k2).unwrap();
        let spec = unit_spec(0.1);
        let lambda = 16.0;

        let shot = |kernel: &dyn EvalKernel| {
            let mut r = rng::stream(26, &[7]);
            synthesize_shot_noise(kernel, &[0, 0], lambda, &spec, 8.0, &mut r).unwrap()
        };
        let f1 = shot(&k1);
        let f2 = shot(&k2);
        let fs = shot(&sum);
        for ((a, b), s) in f1.values().iter().zip(f2.values()).zip(fs.values()) {
            assert!((a + b - s).abs() < 1e-10, "{a} + {b} vs {s}");
        }

        let gauss = |kernel: &dyn EvalKernel| {
            let mut r = rng::stream(26, &[8]);
            synthesize_gaussian(kernel, &[0, 0], &spec, 8.0, &mut r).unwrap()
        };
        let g1 = gauss(&k1);
        let g2 = gauss(&k2);
        let gs = gauss(&sum);
        for ((a, b), s) in g1.values().iter().zip(g2.values()).zip(gs.values()) {
            assert!((a + b - s).abs() < 1e-10, "{a} + {b} vs {s}");
        }
    }

    #[test]
    fn binned_field_tracks_reference_and_refines() {
        let k = k_rational();
        let lambda = 16.0;
        let spec_coarse = unit_spec(0.1);
        let spec_fine = unit_spec(0.05);
        let mut asm_coarse = FieldAssembler::new(&k, &[0, 0], &spec_coarse, 8.0).unwrap();
        let mut asm_fine = FieldAssembler::new(&k, &[0, 0], &spec_fine, 8.0).unwrap();

        // one shared point sample; the coarse box contains the fine box
        let mut r = rng::stream(27, &[0]);
        let config =
            point_process::sample_poisson(&asm_coarse.point_box(), lambda, &mut r).unwrap();

        let sub = BoxRegion::unit_cube(2);
        let s1 = asm_coarse.shot_noise_from_points(lambda, &config.points).unwrap();
        let r1 = reference_shot_noise(&k, &[0, 0], lambda, &spec_coarse, 8.0, &config.points)
            .unwrap();
        let d1 = sup_norm_diff(&s1, &r1, &sub).unwrap();

        let s2 = asm_fine.shot_noise_from_points(lambda, &config.points).unwrap();
        let r2 =
            reference_shot_noise(&k, &[0, 0], lambda, &spec_fine, 8.0, &config.points).unwrap();
        let d2 = sup_norm_diff(&s2, &r2, &sub).unwrap();

        // binning displacement error shrinks roughly linearly in the spacing
        assert!(d1 < 0.3, "coarse binning error {d1}");
        assert!(d2 < 0.8 * d1, "fine {d2} vs coarse {d1}");
    }

    #[test]
    fn lattice_mean_matches_direct_summation() {
        let k = k_rational();
        let spec = GridSpec::new(BoxRegion::square(0.0, 0.2).unwrap(), 0.1).unwrap();
        let asm = FieldAssembler::new(&k, &[0, 0], &spec, 7.0).unwrap();
        let layout = PaddedLayout::new(&spec, 7.0).unwrap();
        let ranges: Vec<(usize, usize)> =
            layout.padded_counts().iter().map(|&n| (0, n - 1)).collect();
        let mut z = [0.0f64; 2];
        let mut direct = 0.0;
        for_each_in_ranges(&ranges, |idx| {
            layout.padded_site(idx, &mut z);
            direct += k.value(&[0.0 - z[0], 0.0 - z[1]]);
        });
        direct *= 0.1 * 0.1;
        assert!((asm.lattice_mean()[0] - direct).abs() < 1e-9);
    }

    #[test]
    fn truncation_gap_shrinks_with_range() {
        let k = k_rational();
        let spec = unit_spec(0.1);
        let lambda = 16.0;
        let sub = BoxRegion::unit_cube(2);
        let reps = 9usize;

        let mut shot_meds = Vec::new();
        let mut gauss_meds = Vec::new();
        for &range in &[2.0, 4.0, 8.0] {
            let t = k.truncated(range).unwrap();
            let mut asm_full = FieldAssembler::new(&k, &[0, 0], &spec, 8.0).unwrap();
            let mut asm_tr = FieldAssembler::new(&t, &[0, 0], &spec, 8.0).unwrap();
            let mut sdiffs = Vec::new();
            let mut gdiffs = Vec::new();
            for rep in 0..reps {
                // identical padded boxes, so shared streams reproduce the
                // same points and masses for both kernels
                let mut ra = rng::stream(28, &[rep as u64]);
                let mut rb = rng::stream(28, &[rep as u64]);
                let f_full = asm_full.shot_noise(lambda, &mut ra).unwrap();
                let f_tr = asm_tr.shot_noise(lambda, &mut rb).unwrap();
                sdiffs.push(sup_norm_diff(&f_full, &f_tr, &sub).unwrap());

                let mut ga = rng::stream(29, &[rep as u64]);
                let mut gb = rng::stream(29, &[rep as u64]);
                let g_full = asm_full.gaussian(&mut ga).unwrap();
                let g_tr = asm_tr.gaussian(&mut gb).unwrap();
                gdiffs.push(sup_norm_diff(&g_full, &g_tr, &sub).unwrap());
            }
            shot_meds.push(stats::median(&sdiffs));
            gauss_meds.push(stats::median(&gdiffs));
        }
        assert!(
            shot_meds[0] > shot_meds[1] && shot_meds[1] > shot_meds[2],
            "shot medians {shot_meds:?}"
        );
        assert!(
            gauss_meds[0] > gauss_meds[1] && gauss_meds[1] > gauss_meds[2],
            "gaussian medians {gauss_meds:?}"
        );
    }

    #[test]
    fn gaussian_c1_exceedance_has_gaussian_tail_shape() {
        let k = k_rational();
        let spec = unit_spec(0.1);
        let sub = BoxRegion::unit_cube(2);
        let mut asm = FieldAssembler::new(&k, &[0, 0], &spec, 8.0).unwrap();
        let reps = 600usize;
        let mut norms = Vec::with_capacity(reps);
        for rep in 0..reps {
            let mut r = rng::stream(30, &[rep as u64]);
            norms.push(c1_norm(&asm.gaussian(&mut r).unwrap(), &sub).unwrap());
        }
        let levels = [1.5, 2.0, 2.5, 3.0];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &u in &levels {
            let frac = norms.iter().filter(|&&n| n >= u).count() as f64 / reps as f64;
            assert!(frac > 0.0, "no exceedances at level {u}");
            xs.push(u * u);
            ys.push(frac.ln());
        }
        let fit = stats::fit_line(&xs, &ys).unwrap();
        assert!(fit.slope < 0.0, "slope {}", fit.slope);
        assert!(fit.r_squared > 0.9, "r^2 {}", fit.r_squared);
    }

    #[test]
    fn shot_c1_exceedance_decreases() {
        let k = k_rational();
        let spec = unit_spec(0.1);
        let sub = BoxRegion::unit_cube(2);
        let lambda = 1.0;
        let mut asm = FieldAssembler::new(&k, &[0, 0], &spec, 8.0).unwrap();
        let reps = 400usize;
        let mut norms = Vec::with_capacity(reps);
        for rep in 0..reps {
            let mut r = rng::stream(31, &[rep as u64]);
            norms.push(c1_norm(&asm.shot_noise(lambda, &mut r).unwrap(), &sub).unwrap());
        }
        let sqrt_l = lambda.sqrt();
        let fracs: Vec<f64> = [1.0, 2.0, 3.0]
            .iter()
            .map(|u| norms.iter().filter(|&&n| n >= u * sqrt_l).count() as f64 / reps as f64)
            .collect();
        assert!(
            fracs[0] > fracs[1] && fracs[1] > fracs[2],
            "exceedance fractions {fracs:?}"
        );
    }

    #[test]
    fn derivative_field_matches_finite_differences() {
        let k = k_rational();
        let eps = 0.1;
        let spec = unit_spec(eps);
        let lambda = 4.0;
        let pad = required_pad_radius(&k, 1, PAD_TAIL_TOL) * 1.01;
        let mut asm_v = FieldAssembler::new(&k, &[0, 0], &spec, pad).unwrap();
        let mut asm_dx = FieldAssembler::new(&k, &[1, 0], &spec, pad).unwrap();
        let mut r = rng::stream(32, &[0]);
        let config = point_process::sample_poisson(&asm_v.point_box(), lambda, &mut r).unwrap();
        let f = asm_v.shot_noise_from_points(lambda, &config.points).unwrap();
        let fx = asm_dx.shot_noise_from_points(lambda, &config.points).unwrap();
        assert_eq!(fx.deriv(), &[1, 0]);
        let n = spec.site_counts();
        let mut worst = 0.0f64;
        for i in 1..n[0] - 1 {
            for j in 0..n[1] {
                let fd = (f.at(&[i + 1, j]) - f.at(&[i - 1, j])) / (2.0 * eps);
                worst = worst.max((fd - fx.at(&[i, j])).abs());
            }
        }
        assert!(worst < 0.05, "max |finite difference - derivative field| = {worst}");
    }

    #[test]
    fn deterministic_given_stream() {
        let k = k_rational();
        let spec = GridSpec::new(BoxRegion::square(0.0, 0.3).unwrap(), 0.1).unwrap();
        let run = |word: u64| {
            let mut r = rng::stream(33, &[word]);
            synthesize_shot_noise(&k, &[0, 0], 16.0, &spec, 7.0, &mut r).unwrap()
        };
        assert_eq!(run(5).values(), run(5).values());
        assert_ne!(run(5).values(), run(6).values());

        let gauss = |word: u64| {
            let mut r = rng::stream(34, &[word]);
            synthesize_gaussian(&k, &[0, 0], &spec, 7.0, &mut r).unwrap()
        };
        assert_eq!(gauss(5).values(), gauss(5).values());
        assert_ne!(gauss(5).values(), gauss(6).values());
    }

    #[test]
    fn unit_aligned_layout_rounds_to_whole_cells() {
        let spec = GridSpec::new(BoxRegion::square(0.0, 4.0).unwrap(), 0.125).unwrap();
        let layout = PaddedLayout::unit_aligned(&spec, 8.0).unwrap();
        for &n in layout.padded_counts() {
            assert_eq!(n % 8, 0, "count {n} not a whole number of unit cells");
        }
        // plain layout for comparison: 33 + 2*64 = 161 sites, not a multiple
        let plain = PaddedLayout::new(&spec, 8.0).unwrap();
        assert_eq!(plain.padded_counts(), &[161, 161]);
        assert_eq!(layout.padded_counts(), &[168, 168]);

        // misaligned origin is rejected
        let off = GridSpec::new(BoxRegion::square(0.03, 4.03).unwrap(), 0.125).unwrap();
        assert!(PaddedLayout::unit_aligned(&off, 8.0).is_err());
        // non-dyadic spacing is rejected
        let coarse = GridSpec::new(BoxRegion::square(0.0, 4.0).unwrap(), 0.3).unwrap();
        assert!(PaddedLayout::unit_aligned(&coarse, 8.0).is_err());
    }
}
