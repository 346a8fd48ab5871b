//! Experiment drivers behind the CLI: each runner turns a validated
//! configuration into a fixed-schema report table.
//!
//! Reproducibility contract: every random draw comes from a counter-based
//! stream keyed by (seed, experiment id, grid indices, replica index), and
//! all reductions fold replica results in index order, so the same config
//! and seed produce the same table bytes at any thread count. Wall time, the
//! one quantity that cannot be deterministic, is written to a `.meta`
//! sidecar instead of the report header.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::coupling::{self, FieldCoupler};
use crate::csvio::{self, Cell, CsvTable};
use crate::dist;
use crate::error::{Error, Result};
use crate::geom::BoxRegion;
use crate::grid::{self, for_each_in_ranges, GridField, GridSpec};
use crate::kernel::{EvalKernel, Kernel};
use crate::kesten::{self, KestenGeometry};
use crate::percolation::{self, Connectivity, ExcursionSet, Orientation};
use crate::point_process;
use crate::quad;
use crate::rng::{self, label};
use crate::stats;
use crate::synthesis::{self, FieldAssembler};

/// Power-law fit of y against x on log-log axes, with the data kept
/// alongside the coefficients.
#[derive(Debug, Clone)]
pub struct RateFit {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least squares on (ln x, ln y). Demands at least three strictly positive
/// points and is exact on noiseless power laws.
pub fn fit_loglog(x: &[f64], y: &[f64]) -> Result<RateFit> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "rate fit needs matched abscissas and values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::invalid(format!(
            "rate fit needs at least 3 points, got {}",
            x.len()
        )));
    }
    if let Some(bad) = x.iter().chain(y).find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::invalid(format!(
            "rate fit needs positive finite data, got {bad}"
        )));
    }
    let line = stats::fit_loglog(x, y)?;
    Ok(RateFit {
        x: x.to_vec(),
        y: y.to_vec(),
        slope: line.slope,
        intercept: line.intercept,
        r_squared: line.r_squared,
    })
}

/// Version tag embedded in report headers.
pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

/// Stable per-experiment stream label; part of the output format.
fn id(kind: ExperimentKind) -> u64 {
    ExperimentKind::ALL
        .iter()
        .position(|k| *k == kind)
        .expect("every kind is listed") as u64
}

fn zero_alpha(dimension: usize) -> Vec<u32> {
    vec![0u32; dimension]
}

/// Pointwise standard deviation of the stationary field: the root of the
/// covariance at zero lag, which equals the L2 norm of the kernel.
fn field_sd(kernel: &dyn EvalKernel) -> Result<f64> {
    Ok(kernel.integrals()?.1.sqrt())
}

/// Integral of the kernel over a box by nested adaptive quadrature; the
/// exact compensator for single-point functionals over that box.
fn box_kernel_integral(kernel: &dyn EvalKernel, region: &BoxRegion) -> f64 {
    fn layer(kernel: &dyn EvalKernel, region: &BoxRegion, prefix: &[f64]) -> f64 {
        let axis = prefix.len();
        let last = axis + 1 == region.dimension();
        quad::integrate(
            |x| {
                let mut point = Vec::with_capacity(axis + 1);
                point.extend_from_slice(prefix);
                point.push(x);
                if last {
                    kernel.value(&point)
                } else {
                    layer(kernel, region, &point)
                }
            },
            region.lower()[axis],
            region.upper()[axis],
            1e-10,
            1e-13,
        )
        .value
    }
    layer(kernel, region, &[])
}

/// Run `task` over replica indices `0..n` on a dedicated pool, preserving
/// index order in the returned vector. `init` builds per-worker scratch
/// state (convolution plans and the like); it is probed once up front so a
/// deterministic construction failure surfaces before any thread spawns.
fn parallel_stateful<S, T, I, F>(threads: Option<usize>, n: u64, init: I, task: F) -> Result<Vec<T>>
where
    T: Send,
    I: Fn() -> Result<S> + Sync + Send,
    F: Fn(&mut S, u64) -> Result<T> + Sync + Send,
{
    drop(init()?);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::invalid(format!("worker pool failed to start: {e}")))?;
    let results: Vec<Result<T>> = pool.install(|| {
        (0..n)
            .into_par_iter()
            .map_init(&init, |state, rep| match state {
                Ok(s) => task(s, rep),
                Err(_) => Err(Error::invalid("worker state failed to initialize")),
            })
            .collect()
    });
    results.into_iter().collect()
}

/// Incremental builder for the fixed ten-column report schema; the column
/// meanings per experiment are documented in docs/schemas.md.
struct Rows {
    table: CsvTable,
    experiment: &'static str,
    epsilon: f64,
    replicas: u64,
    seed: u64,
}

impl Rows {
    fn new(cfg: &ExperimentConfig) -> Rows {
        Rows {
            table: CsvTable::with_standard_columns(),
            experiment: cfg.experiment.name(),
            epsilon: cfg.epsilon,
            replicas: cfg.replicas,
            seed: cfg.seed,
        }
    }

    fn push(
        &mut self,
        lambda: Option<f64>,
        scale: Option<f64>,
        abscissa: Option<f64>,
        statistic: &str,
        value: f64,
        stderr: Option<f64>,
    ) -> Result<()> {
        let opt = |v: Option<f64>| v.map(Cell::Number).unwrap_or(Cell::Empty);
        self.table.push_row(vec![
            Cell::from(self.experiment),
            opt(lambda),
            opt(scale),
            opt(abscissa),
            Cell::Number(self.epsilon),
            Cell::Count(self.replicas),
            Cell::from(statistic),
            Cell::Number(value),
            opt(stderr),
            Cell::Count(self.seed),
        ])
    }
}

/// Kolmogorov-Smirnov distance of the single-point marginal to its Gaussian
/// limit across the intensity grid.
///
/// One replica carries every intensity: points are sampled once at the
/// largest intensity with an independent uniform mark each, and the sample
/// at a smaller intensity keeps exactly the points with small marks (Poisson
/// thinning). The shared points make the distance trend far less noisy than
/// independent sampling would. The compensator is the exact box integral of
/// the kernel, so every sample has mean zero by construction.
fn run_marginal_clt(
    cfg: &ExperimentConfig,
    kernel: &Kernel,
    threads: Option<usize>,
    rows: &mut Rows,
) -> Result<()> {
    let d = kernel.dimension();
    let pad = synthesis::required_pad_radius(kernel, 0, synthesis::PAD_TAIL_TOL);
    let window = BoxRegion::new(vec![-pad; d], vec![pad; d])?;
    let compensator = box_kernel_integral(kernel, &window);
    let sd0 = field_sd(kernel)?;

    let mut lams = cfg.lambda.clone();
    lams.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let lam_max = *lams.last().expect("validated nonempty");
    let eid = id(cfg.experiment);
    let seed = cfg.seed;

    let samples: Vec<Vec<f64>> = parallel_stateful(
        threads,
        cfg.replicas,
        || Ok(()),
        |_, rep| {
            let mut r = rng::stream(seed, &[label::EXPERIMENT, eid, rep]);
            let config = point_process::sample_poisson(&window, lam_max, &mut r)?;
            let mut marked: Vec<(f64, f64)> = config
                .points
                .iter()
                .map(|p| (0.0, kernel.value(p)))
                .collect();
            for slot in marked.iter_mut() {
                slot.0 = r.gen();
            }
            marked.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());

            let mut out = Vec::with_capacity(lams.len());
            let mut acc = 0.0f64;
            let mut taken = 0usize;
            for &lam in &lams {
                let keep = lam / lam_max;
                while taken < marked.len() && marked[taken].0 <= keep {
                    acc += marked[taken].1;
                    taken += 1;
                }
                out.push((acc - lam * compensator) / lam.sqrt());
            }
            Ok(out)
        },
    )?;

    for (j, &lam) in lams.iter().enumerate() {
        let vals: Vec<f64> = samples.iter().map(|s| s[j]).collect();
        let ks = stats::ks_distance(&vals, |x| dist::phi(x / sd0));
        rows.push(Some(lam), None, None, "ks_distance", ks, None)?;
        rows.push(
            Some(lam),
            None,
            None,
            "sample_mean",
            stats::mean(&vals),
            Some(stats::stderr_of_mean(&vals)),
        )?;
        rows.push(Some(lam), None, None, "sample_sd", stats::variance(&vals).sqrt(), None)?;
    }
    Ok(())
}

/// Median sup-norm gap of the coupled pair over the centered window of
/// radius 4, against the same-marginals independent baseline, with a
/// log-log rate fit over the intensity grid.
fn run_coupling_rate(
    cfg: &ExperimentConfig,
    kernel: &Kernel,
    threads: Option<usize>,
    rows: &mut Rows,
) -> Result<()> {
    let d = kernel.dimension();
    let window = BoxRegion::new(vec![-4.0; d], vec![4.0; d])?;
    let spec = GridSpec::new(window.clone(), cfg.epsilon)?;
    let pad = synthesis::required_pad_radius(kernel, 0, synthesis::PAD_TAIL_TOL);
    let eid = id(cfg.experiment);
    let seed = cfg.seed;

    let mut medians = Vec::with_capacity(cfg.lambda.len());
    for (li, &lam) in cfg.lambda.iter().enumerate() {
        let depth = if cfg.m == 0 { coupling::default_depth(lam) } else { cfg.m };
        let gaps: Vec<[f64; 2]> = parallel_stateful(
            threads,
            cfg.replicas,
            || FieldCoupler::new(kernel, lam, &spec, depth, pad),
            |coupler, rep| {
                let li = li as u64;
                let pair = coupler.sample(seed, &[label::EXPERIMENT, eid, li, rep, 0])?;
                let coupled = grid::sup_norm_diff(&pair.shot, &pair.gauss, &window)?;
                let mut shot_rng = rng::stream(seed, &[label::EXPERIMENT, eid, li, rep, 1]);
                let mut gauss_rng = rng::stream(seed, &[label::EXPERIMENT, eid, li, rep, 2]);
                let (shot, gauss) = coupler.independent_pair(&mut shot_rng, &mut gauss_rng)?;
                let independent = grid::sup_norm_diff(&shot, &gauss, &window)?;
                Ok([coupled, independent])
            },
        )?;
        let coupled: Vec<f64> = gaps.iter().map(|g| g[0]).collect();
        let independent: Vec<f64> = gaps.iter().map(|g| g[1]).collect();
        let paired: Vec<f64> = gaps.iter().map(|g| g[1] - g[0]).collect();
        let med = stats::median(&coupled);
        rows.push(
            Some(lam),
            None,
            None,
            "coupled_median",
            med,
            Some(stats::median_stderr(&coupled)),
        )?;
        rows.push(
            Some(lam),
            None,
            None,
            "independent_median",
            stats::median(&independent),
            Some(stats::median_stderr(&independent)),
        )?;
        rows.push(
            Some(lam),
            None,
            None,
            "paired_gap_mean",
            stats::mean(&paired),
            Some(stats::stderr_of_mean(&paired)),
        )?;
        medians.push(med);
    }

    if cfg.lambda.len() >= 3 && medians.iter().all(|m| *m > 0.0) {
        let fit = fit_loglog(&cfg.lambda, &medians)?;
        rows.push(None, None, None, "rate_slope", fit.slope, None)?;
        rows.push(None, None, None, "rate_intercept", fit.intercept, None)?;
        rows.push(None, None, None, "rate_r_squared", fit.r_squared, None)?;
    }
    Ok(())
}

/// Sup over `sub` of |(a + s*ma) - (b + s*mb)|: the gap between two raw
/// (uncompensated) kernel sums sharing one source, recovered by adding each
/// field's own compensator back, in units of root intensity.
fn raw_sup_gap(
    a: &GridField,
    ma: &[f64],
    b: &GridField,
    mb: &[f64],
    sqrt_l: f64,
    sub: &BoxRegion,
) -> Result<f64> {
    let spec = a.spec();
    if !spec.same_geometry(b.spec()) {
        return Err(Error::invalid("fields live on different grids"));
    }
    let ranges = spec.site_ranges(sub)?;
    let mut best = 0.0f64;
    for_each_in_ranges(&ranges, |idx| {
        let i = spec.flat_index(idx);
        let va = a.values()[i] + sqrt_l * ma[i];
        let vb = b.values()[i] + sqrt_l * mb[i];
        best = best.max((va - vb).abs());
    });
    Ok(best)
}

/// Median sup-norm cost of truncating the kernel, one shared source per
/// replica rendered through the full kernel and through each truncation.
///
/// The shot-noise gap compares the raw sums (equivalently, fields sharing
/// the full kernel's compensator), where the removed tail's mean dominates;
/// the Gaussian gap compares the mean-zero fields directly. The two decay at
/// visibly different rates in the truncation range.
fn run_truncation_rate(
    cfg: &ExperimentConfig,
    kernel: &Kernel,
    threads: Option<usize>,
    rows: &mut Rows,
) -> Result<()> {
    let d = kernel.dimension();
    let lam = cfg.lambda[0];
    let sqrt_l = lam.sqrt();
    let window = BoxRegion::new(vec![-4.0; d], vec![4.0; d])?;
    let spec = GridSpec::new(window.clone(), cfg.epsilon)?;
    let r_max = cfg.r.iter().cloned().fold(0.0f64, f64::max);
    // the padded box must capture the truncation difference out to twice the
    // largest range, or the large-range gaps would be biased low
    let pad = synthesis::required_pad_radius(kernel, 0, synthesis::PAD_TAIL_TOL).max(2.0 * r_max);
    let eid = id(cfg.experiment);
    let seed = cfg.seed;
    let cell_sd = cfg.epsilon.powi(d as i32).sqrt();

    struct Bank {
        full: FieldAssembler,
        truncated: Vec<FieldAssembler>,
    }
    let init = || -> Result<Bank> {
        let full = FieldAssembler::new(kernel, &zero_alpha(d), &spec, pad)?;
        let truncated = cfg
            .r
            .iter()
            .map(|&range| {
                let tk = kernel.truncated(range)?;
                FieldAssembler::new(&tk, &zero_alpha(d), &spec, pad)
            })
            .collect::<Result<Vec<_>>>()?;
        for t in &truncated {
            if t.layout().total_padded() != full.layout().total_padded() {
                return Err(Error::inconsistent(
                    "truncated and full layouts disagree; sources cannot be shared",
                ));
            }
        }
        Ok(Bank { full, truncated })
    };

    let per_rep: Vec<(Vec<f64>, Vec<f64>)> = parallel_stateful(
        threads,
        cfg.replicas,
        init,
        |bank, rep| {
            let mut pr = rng::stream(seed, &[label::EXPERIMENT, eid, rep, 0]);
            let config = point_process::sample_poisson(&bank.full.point_box(), lam, &mut pr)?;
            let counts = bank.full.layout().bin(&config.points);
            let full_shot = bank.full.shot_noise_from_counts(lam, &counts)?;

            let mut mr = rng::stream(seed, &[label::EXPERIMENT, eid, rep, 1]);
            let masses: Vec<f64> = (0..bank.full.layout().total_padded())
                .map(|_| cell_sd * dist::draw_standard_normal(&mut mr))
                .collect();
            let full_gauss = bank.full.gaussian_from_masses(&masses)?;

            let mut shot_gaps = Vec::with_capacity(bank.truncated.len());
            let mut gauss_gaps = Vec::with_capacity(bank.truncated.len());
            for tr in bank.truncated.iter_mut() {
                let shot = tr.shot_noise_from_counts(lam, &counts)?;
                shot_gaps.push(raw_sup_gap(
                    &full_shot,
                    bank.full.lattice_mean(),
                    &shot,
                    tr.lattice_mean(),
                    sqrt_l,
                    &window,
                )?);
                let gauss = tr.gaussian_from_masses(&masses)?;
                gauss_gaps.push(grid::sup_norm_diff(&full_gauss, &gauss, &window)?);
            }
            Ok((shot_gaps, gauss_gaps))
        },
    )?;

    let mut shot_medians = Vec::with_capacity(cfg.r.len());
    let mut gauss_medians = Vec::with_capacity(cfg.r.len());
    for (k, &radius) in cfg.r.iter().enumerate() {
        let sg: Vec<f64> = per_rep.iter().map(|(s, _)| s[k]).collect();
        let gg: Vec<f64> = per_rep.iter().map(|(_, g)| g[k]).collect();
        let sm = stats::median(&sg);
        let gm = stats::median(&gg);
        rows.push(
            Some(lam),
            None,
            Some(radius),
            "shot_gap_median",
            sm,
            Some(stats::median_stderr(&sg)),
        )?;
        rows.push(
            Some(lam),
            None,
            Some(radius),
            "gauss_gap_median",
            gm,
            Some(stats::median_stderr(&gg)),
        )?;
        shot_medians.push(sm);
        gauss_medians.push(gm);
    }

    if cfg.r.len() >= 3 {
        if shot_medians.iter().all(|m| *m > 0.0) {
            let fit = fit_loglog(&cfg.r, &shot_medians)?;
            rows.push(Some(lam), None, None, "shot_rate_slope", fit.slope, None)?;
            rows.push(Some(lam), None, None, "shot_rate_r_squared", fit.r_squared, None)?;
        }
        if gauss_medians.iter().all(|m| *m > 0.0) {
            let fit = fit_loglog(&cfg.r, &gauss_medians)?;
            rows.push(Some(lam), None, None, "gauss_rate_slope", fit.slope, None)?;
            rows.push(Some(lam), None, None, "gauss_rate_r_squared", fit.r_squared, None)?;
        }
    }
    Ok(())
}

/// Exact tail probabilities of the count-versus-surrogate deviation in the
/// cellwise quantile coupling, plus a Monte Carlo pin at the most accessible
/// threshold. The scan resolves probabilities far below sampling reach;
/// thresholds the deviation never attains are reported as unreachable rather
/// than as a fabricated zero.
fn run_c1_tails(cfg: &ExperimentConfig, rows: &mut Rows) -> Result<()> {
    let lam = cfg.lambda[0];
    let masses = coupling::deviation_tail_masses(lam, &cfg.r)?;

    let mut ts = Vec::new();
    let mut logs = Vec::new();
    for (&t, &mass) in cfg.r.iter().zip(&masses) {
        if mass > 0.0 {
            rows.push(Some(lam), None, Some(t), "deviation_log_prob", mass.ln(), None)?;
            ts.push(t);
            logs.push(mass.ln());
        } else {
            rows.push(Some(lam), None, Some(t), "deviation_prob_zero", 0.0, None)?;
        }
    }
    if ts.len() >= 2 {
        let fit = stats::fit_line(&ts, &logs)?;
        rows.push(Some(lam), None, None, "tail_slope", fit.slope, None)?;
        rows.push(Some(lam), None, None, "tail_r_squared", fit.r_squared, None)?;
    }

    let t0 = cfg.r[0];
    let n_mc = cfg.replicas * 100;
    let mut r = rng::stream(cfg.seed, &[label::EXPERIMENT, id(cfg.experiment), 0]);
    let sd = lam.sqrt();
    let mut hits = 0u64;
    for _ in 0..n_mc {
        let z = dist::draw_standard_normal(&mut r);
        let (u, su) = dist::phi_pair(z);
        let deviation = dist::poisson_quantile(u, su, lam) as f64 - lam - sd * z;
        if deviation.abs() >= t0 {
            hits += 1;
        }
    }
    let p_hat = hits as f64 / n_mc as f64;
    let se = (p_hat * (1.0 - p_hat) / n_mc as f64).sqrt();
    rows.push(Some(lam), None, Some(t0), "mc_tail_prob", p_hat, Some(se))?;
    Ok(())
}

/// Half-crossing level of the square excursion geometry over an intensity
/// and box-size grid. Within one replica the intensities share a single
/// source: cell occupations are drawn once at the largest intensity and
/// thinned downward with a binomial chain (the same joint law as thinning a
/// point sample, at a fraction of the cost), so the level comparison across
/// the intensity grid rides on common randomness.
fn run_lc_sweep(
    cfg: &ExperimentConfig,
    kernel: &Kernel,
    threads: Option<usize>,
    rows: &mut Rows,
) -> Result<()> {
    let bracket_scale = field_sd(kernel)?;
    let pad = synthesis::required_pad_radius(kernel, 0, synthesis::PAD_TAIL_TOL);
    let mut lams = cfg.lambda.clone();
    lams.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let eid = id(cfg.experiment);
    let seed = cfg.seed;
    let cell_volume = cfg.epsilon.powi(kernel.dimension() as i32);

    for (si, &side) in cfg.scales.iter().enumerate() {
        let region = BoxRegion::square(0.0, side)?;
        let spec = GridSpec::new(region.clone(), cfg.epsilon)?;
        let per_rep: Vec<Vec<f64>> = parallel_stateful(
            threads,
            cfg.replicas,
            || FieldAssembler::new(kernel, &zero_alpha(2), &spec, pad),
            |asm, rep| {
                let mut r = rng::stream(seed, &[label::EXPERIMENT, eid, si as u64, rep]);
                let cells = asm.layout().total_padded();
                let mut counts = vec![vec![0.0f64; cells]; lams.len()];
                let top = lams.len() - 1;
                for c in 0..cells {
                    let mut n = dist::sample_poisson_count(lams[top] * cell_volume, &mut r);
                    counts[top][c] = n as f64;
                    for j in (0..top).rev() {
                        if n > 0 {
                            let keep = Binomial::new(n, lams[j] / lams[j + 1])
                                .expect("thinning fraction is a probability");
                            n = keep.sample(&mut r);
                        }
                        counts[j][c] = n as f64;
                    }
                }
                let mut thresholds = Vec::with_capacity(lams.len());
                for (j, &lam) in lams.iter().enumerate() {
                    let field = asm.shot_noise_from_counts(lam, &counts[j])?;
                    thresholds.push(percolation::exact_crossing_threshold(
                        &field,
                        &region,
                        Orientation::LeftRight,
                    )?);
                }
                Ok(thresholds)
            },
        )?;

        for (j, &lam) in lams.iter().enumerate() {
            let thresholds: Vec<f64> = per_rep.iter().map(|t| t[j]).collect();
            let est = percolation::critical_level_from_thresholds(
                thresholds,
                side,
                1e-3,
                bracket_scale,
                Some(lam),
            )?;
            rows.push(
                Some(lam),
                Some(side),
                None,
                "critical_level",
                est.level,
                Some(est.level_stderr),
            )?;
            rows.push(Some(lam), Some(side), None, "bracket_lo", est.bracket.0, None)?;
            rows.push(Some(lam), Some(side), None, "bracket_hi", est.bracket.1, None)?;
        }

        // Adjacent intensities share their point sample, so the drop in
        // |level| is resolved far better than the marginal stderrs suggest.
        // The bootstrap resamples whole replicas, preserving that pairing;
        // rows carry the lower intensity in the lambda column and the upper
        // one in the r column.
        let n = cfg.replicas as usize;
        for j in 0..lams.len().saturating_sub(1) {
            let lo: Vec<f64> = per_rep.iter().map(|t| t[j]).collect();
            let hi: Vec<f64> = per_rep.iter().map(|t| t[j + 1]).collect();
            let drop = stats::median(&lo).abs() - stats::median(&hi).abs();
            let mut br =
                rng::stream(seed, &[label::EXPERIMENT, eid, si as u64, u64::MAX, j as u64]);
            let mut rlo = vec![0.0f64; n];
            let mut rhi = vec![0.0f64; n];
            let drops: Vec<f64> = (0..400)
                .map(|_| {
                    for k in 0..n {
                        let pick = br.gen_range(0..n);
                        rlo[k] = lo[pick];
                        rhi[k] = hi[pick];
                    }
                    stats::median(&rlo).abs() - stats::median(&rhi).abs()
                })
                .collect();
            rows.push(
                Some(lams[j]),
                Some(side),
                Some(lams[j + 1]),
                "abs_level_drop",
                drop,
                Some(stats::variance(&drops).sqrt()),
            )?;
        }
    }
    Ok(())
}

/// Crossing probabilities of the Gaussian field at five levels spanning the
/// near-critical window, one exact threshold per replica (common random
/// numbers across levels).
fn run_threshold_curve(
    cfg: &ExperimentConfig,
    kernel: &Kernel,
    threads: Option<usize>,
    rows: &mut Rows,
) -> Result<()> {
    let side = cfg.scales[0];
    let region = BoxRegion::square(0.0, side)?;
    let spec = GridSpec::new(region.clone(), cfg.epsilon)?;
    let pad = synthesis::required_pad_radius(kernel, 0, synthesis::PAD_TAIL_TOL);
    let w = 0.5 * field_sd(kernel)?;
    let levels = [-w, -0.5 * w, 0.0, 0.5 * w, w];
    let eid = id(cfg.experiment);
    let seed = cfg.seed;

    let thresholds: Vec<f64> = parallel_stateful(
        threads,
        cfg.replicas,
        || FieldAssembler::new(kernel, &zero_alpha(2), &spec, pad),
        |asm, rep| {
            let mut r = rng::stream(seed, &[label::EXPERIMENT, eid, rep]);
            let field = asm.gaussian(&mut r)?;
            percolation::exact_crossing_threshold(&field, &region, Orientation::LeftRight)
        },
    )?;

    rows.push(None, Some(side), None, "level_width", w, None)?;
    for &level in &levels {
        let successes = thresholds.iter().filter(|t| **t <= level).count() as u64;
        let p_hat = successes as f64 / cfg.replicas as f64;
        let (_, half) = stats::wilson_interval(successes, cfg.replicas);
        rows.push(None, Some(side), Some(level), "crossing_prob", p_hat, Some(half))?;
    }
    Ok(())
}

/// Level shift applied to the single-event side of the decoupling
/// comparisons, decaying in the separation scale with the kernel's tail
/// exponent.
fn sprinkling_shift(cfg: &ExperimentConfig, scale: f64) -> f64 {
    scale.powf(-0.5 * (cfg.kernel.beta - 2.0))
}

/// Joint crossing probability of two well-separated rectangles against the
/// product of the sprinkled (level-raised) single probabilities.
fn run_sprinkle(
    cfg: &ExperimentConfig,
    kernel: &Kernel,
    threads: Option<usize>,
    rows: &mut Rows,
) -> Result<()> {
    let lam = cfg.lambda[0];
    let pad = synthesis::required_pad_radius(kernel, 0, synthesis::PAD_TAIL_TOL);
    let level = 0.0;
    let eid = id(cfg.experiment);
    let seed = cfg.seed;

    for (si, &scale) in cfg.scales.iter().enumerate() {
        let shift = sprinkling_shift(cfg, scale);
        let region = BoxRegion::rect(0.0, 3.0 * scale, 0.0, 3.0 * scale)?;
        let spec = GridSpec::new(region.clone(), cfg.epsilon)?;
        let (rect_a, rect_b) = percolation::sprinkling_rects(scale)?;
        let indicator_rows: Vec<[f64; 3]> = parallel_stateful(
            threads,
            cfg.replicas,
            || FieldAssembler::new(kernel, &zero_alpha(2), &spec, pad),
            |asm, rep| {
                let mut r = rng::stream(seed, &[label::EXPERIMENT, eid, si as u64, rep]);
                let field = asm.shot_noise(lam, &mut r)?;
                let ta =
                    percolation::exact_crossing_threshold(&field, &rect_a, Orientation::LeftRight)?;
                let tb =
                    percolation::exact_crossing_threshold(&field, &rect_b, Orientation::LeftRight)?;
                let raised = level + shift;
                Ok([
                    f64::from(ta <= raised),
                    f64::from(tb <= raised),
                    f64::from(ta <= level && tb <= level),
                ])
            },
        )?;
        let report = percolation::decoupling_report(&indicator_rows, scale, level, shift, 1.0)?;
        rows.push(Some(lam), Some(scale), None, "joint_prob", report.lhs, Some(report.lhs_stderr))?;
        rows.push(
            Some(lam),
            Some(scale),
            None,
            "product_bound",
            report.rhs,
            Some(report.rhs_stderr),
        )?;
        rows.push(Some(lam), Some(scale), None, "slack", report.slack, Some(report.slack_stderr))?;
        rows.push(Some(lam), Some(scale), None, "level_shift", shift, None)?;
    }
    Ok(())
}

/// Master-crossing probability against the covering-family doubling bound,
/// with the per-replica inclusion audit.
fn run_kesten(
    cfg: &ExperimentConfig,
    kernel: &Kernel,
    threads: Option<usize>,
    rows: &mut Rows,
) -> Result<()> {
    let lam = cfg.lambda[0];
    let scale = cfg.scales[0];
    let shift = sprinkling_shift(cfg, scale);
    let level = 0.0;
    let ratio = scale / cfg.epsilon;
    if (ratio - ratio.round()).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "grid spacing {} must divide the scale {scale}",
            cfg.epsilon
        )));
    }
    let geometry = KestenGeometry::new(scale)?;
    let spec = GridSpec::new(geometry.required_region(), cfg.epsilon)?;
    let pad = synthesis::required_pad_radius(kernel, 0, synthesis::PAD_TAIL_TOL);
    let eid = id(cfg.experiment);
    let seed = cfg.seed;

    let per_rep: Vec<(bool, [f64; 3])> = parallel_stateful(
        threads,
        cfg.replicas,
        || FieldAssembler::new(kernel, &zero_alpha(2), &spec, pad),
        |asm, rep| {
            let mut r = rng::stream(seed, &[label::EXPERIMENT, eid, rep]);
            let field = asm.shot_noise(lam, &mut r)?;
            kesten::evaluate_replica(&geometry, &field, level, shift)
        },
    )?;
    let violations = per_rep.iter().filter(|(v, _)| *v).count() as u64;
    let indicator_rows: Vec<[f64; 3]> = per_rep.iter().map(|(_, row)| *row).collect();
    let report = kesten::report_from_rows(&indicator_rows, violations, scale, level, shift);

    rows.push(
        Some(lam),
        Some(scale),
        None,
        "master_prob",
        report.master_prob,
        Some(report.master_stderr),
    )?;
    rows.push(Some(lam), Some(scale), None, "single_lr_raised", report.single_lr, None)?;
    rows.push(Some(lam), Some(scale), None, "single_tb_raised", report.single_tb, None)?;
    rows.push(Some(lam), Some(scale), None, "doubling_bound", report.bound, None)?;
    rows.push(Some(lam), Some(scale), None, "slack", report.slack, Some(report.slack_stderr))?;
    rows.push(
        Some(lam),
        Some(scale),
        None,
        "inclusion_violations",
        report.inclusion_violations as f64,
        None,
    )?;
    rows.push(Some(lam), Some(scale), None, "pair_min_gap", geometry.min_cross_gap(), None)?;
    rows.push(Some(lam), Some(scale), None, "window_min_gap", geometry.min_window_gap(), None)?;
    Ok(())
}

/// One window's worth of duality checks: every orientation must see exactly
/// one of the primal crossing and the transposed complement crossing.
fn audit_windows(ex: &ExcursionSet, windows: &[BoxRegion]) -> Result<(u64, u64)> {
    let mut checks = 0u64;
    let mut violations = 0u64;
    for rect in windows {
        for orientation in [Orientation::LeftRight, Orientation::TopBottom] {
            let primal = percolation::crossing(ex, rect, orientation, Connectivity::Primal)?;
            let dual =
                percolation::crossing(ex, rect, orientation.transposed(), Connectivity::Dual)?;
            checks += 1;
            if !(primal ^ dual) {
                violations += 1;
            }
        }
    }
    Ok((checks, violations))
}

/// Exhaustive-by-sampling audit of the crossing partition: random site masks
/// (ten per replica) and synthesized fields thresholded exactly at site
/// values, the tie-heaviest levels available.
fn run_duality_audit(
    cfg: &ExperimentConfig,
    kernel: &Kernel,
    threads: Option<usize>,
    rows: &mut Rows,
) -> Result<()> {
    let eid = id(cfg.experiment);
    let seed = cfg.seed;

    let mask_spec = GridSpec::new(BoxRegion::square(0.0, 11.0)?, 1.0)?;
    let mask_windows = [BoxRegion::square(0.0, 11.0)?, BoxRegion::rect(2.0, 9.0, 3.0, 8.0)?];
    let mask_stats: Vec<(u64, u64)> = parallel_stateful(
        threads,
        cfg.replicas * 10,
        || Ok(()),
        |_, m| {
            let mut r = rng::stream(seed, &[label::EXPERIMENT, eid, 0, m]);
            let density: f64 = 0.25 + 0.5 * r.gen::<f64>();
            let mask: Vec<bool> =
                (0..mask_spec.total_sites()).map(|_| r.gen::<f64>() < density).collect();
            let ex = ExcursionSet::from_mask(mask_spec.clone(), 0.0, mask)?;
            audit_windows(&ex, &mask_windows)
        },
    )?;

    let lam = cfg.lambda[0];
    let region = BoxRegion::square(0.0, 6.0)?;
    let field_spec = GridSpec::new(region.clone(), cfg.epsilon)?;
    let field_windows = [region.clone(), BoxRegion::rect(0.75, 5.25, 1.5, 4.5)?];
    let pad = synthesis::required_pad_radius(kernel, 0, synthesis::PAD_TAIL_TOL);
    let field_stats: Vec<(u64, u64)> = parallel_stateful(
        threads,
        cfg.replicas,
        || FieldAssembler::new(kernel, &zero_alpha(2), &field_spec, pad),
        |asm, f| {
            let mut r = rng::stream(seed, &[label::EXPERIMENT, eid, 1, f]);
            let field = asm.shot_noise(lam, &mut r)?;
            let total = field.spec().total_sites();
            let site_a = r.gen_range(0..total);
            let site_b = r.gen_range(0..total);
            let mut checks = 0u64;
            let mut violations = 0u64;
            for level in [field.values()[site_a], field.values()[site_b]] {
                let ex = percolation::excursion(&field, level)?;
                let (c, v) = audit_windows(&ex, &field_windows)?;
                checks += c;
                violations += v;
            }
            Ok((checks, violations))
        },
    )?;

    let sum = |xs: &[(u64, u64)]| {
        xs.iter().fold((0u64, 0u64), |(c, v), (dc, dv)| (c + dc, v + dv))
    };
    let (mask_checks, mask_violations) = sum(&mask_stats);
    let (field_checks, field_violations) = sum(&field_stats);
    rows.push(None, None, None, "mask_checks", mask_checks as f64, None)?;
    rows.push(None, None, None, "mask_violations", mask_violations as f64, None)?;
    rows.push(Some(lam), None, None, "field_checks", field_checks as f64, None)?;
    rows.push(Some(lam), None, None, "field_violations", field_violations as f64, None)?;
    Ok(())
}

/// Run one configured experiment and return its report table.
pub fn run_experiment(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<CsvTable> {
    cfg.validate()?;
    let kernel = cfg.kernel.build()?;
    let mut rows = Rows::new(cfg);
    match cfg.experiment {
        ExperimentKind::MarginalClt => run_marginal_clt(cfg, &kernel, threads, &mut rows)?,
        ExperimentKind::CouplingRate => run_coupling_rate(cfg, &kernel, threads, &mut rows)?,
        ExperimentKind::TruncationRate => run_truncation_rate(cfg, &kernel, threads, &mut rows)?,
        ExperimentKind::C1Tails => run_c1_tails(cfg, &mut rows)?,
        ExperimentKind::LcSweep => run_lc_sweep(cfg, &kernel, threads, &mut rows)?,
        ExperimentKind::ThresholdCurve => run_threshold_curve(cfg, &kernel, threads, &mut rows)?,
        ExperimentKind::Sprinkle => run_sprinkle(cfg, &kernel, threads, &mut rows)?,
        ExperimentKind::Kesten => run_kesten(cfg, &kernel, threads, &mut rows)?,
        ExperimentKind::DualityAudit => run_duality_audit(cfg, &kernel, threads, &mut rows)?,
    }
    Ok(rows.table)
}

/// Metadata header lines: version tag, then a full config echo, so a report
/// alone identifies what produced it.
fn metadata_lines(cfg: &ExperimentConfig) -> Vec<String> {
    let mut lines = vec![format!("shotperc {}", version_string())];
    for line in cfg.echo_toml().lines() {
        if !line.trim().is_empty() {
            lines.push(line.to_string());
        }
    }
    lines
}

/// Run the experiment, write the report atomically, and drop wall time into
/// the `.meta` sidecar. Returns the report path.
pub fn run_and_write(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<PathBuf> {
    let start = Instant::now();
    let table = run_experiment(cfg, threads)?;
    csvio::emit_csv(&table, &metadata_lines(cfg), &cfg.output)?;
    let sidecar = sidecar_path(&cfg.output);
    let body = format!(
        "wall_seconds = {:.3}\nrows = {}\n",
        start.elapsed().as_secs_f64(),
        table.rows.len()
    );
    std::fs::write(&sidecar, body).map_err(|e| Error::io(sidecar.display().to_string(), e))?;
    Ok(cfg.output.clone())
}

/// `<output>.meta`, next to the report.
pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut os = output.as_os_str().to_os_string();
    os.push(".meta");
    PathBuf::from(os)
}
