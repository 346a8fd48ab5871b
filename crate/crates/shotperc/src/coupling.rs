//! Joint construction of a compensated shot-noise field and its Gaussian
//! moving-average counterpart on one probability space.
//!
//! The region is tiled by unit cells aligned with the sampling lattice. In
//! each cell a single standard normal drives both the total point count (by
//! exact Poisson quantile inversion) and the total white-noise mass. The
//! count is then split down a dyadic tree by Binomial(n, 1/2) draws, each
//! obtained by quantile-coupling to the same standard normal that builds the
//! corresponding bridge increment of the white-noise leaf masses. Points fall
//! uniformly in their leaves; leaf masses are refined to lattice cells with
//! independent fill-in noise of the exact residual variance. Both fields are
//! then rendered through one shared convolution, so each is marginally
//! identical in law to its independently synthesized version while staying
//! pathwise close.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dist;
use crate::dyadic::BinaryExpansion;
use crate::error::{Error, Result};
use crate::geom::Points;
use crate::grid::{GridField, GridSpec};
use crate::kernel::EvalKernel;
use crate::rng::{self, label};
use crate::synthesis::{FieldAssembler, PaddedLayout};

/// Hard ceiling on the splitting depth; beyond this the binomial fluctuations
/// are far below double precision resolution of the bridge increments.
pub const DEPTH_CAP: u32 = 24;

/// Splitting depth balancing the count-quantile error against the number of
/// tree levels: about log2(2 lambda / log lambda), clamped to [0, DEPTH_CAP].
pub fn default_depth(lambda: f64) -> u32 {
    if !(lambda.is_finite() && lambda > 0.0) {
        return 0;
    }
    let t = lambda.ln().max(1.0);
    (2.0 * lambda / t).log2().ceil().clamp(0.0, DEPTH_CAP as f64) as u32
}

/// One standard normal Z drives both hands: N is the exact Poisson quantile
/// of Phi(Z), so N is a.s. nondecreasing in Z and marginally Poisson(lambda).
pub fn couple_poisson_gaussian(lambda: f64, rng: &mut ChaCha8Rng) -> Result<(u64, f64)> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::invalid(format!("intensity must be positive, got {lambda}")));
    }
    let z = dist::draw_standard_normal(rng);
    let (u, su) = dist::phi_pair(z);
    Ok((dist::poisson_quantile(u, su, lambda), z))
}

/// Record of one dyadic split: the parent's count, the count sent left, and
/// the standard normal that produced both the binomial draw and the bridge
/// increment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitVar {
    pub level: u32,
    pub index: u64,
    pub parent_count: u64,
    pub left_count: u64,
    pub gaussian: f64,
}

/// Coupled randomness of one unit cell: point positions in [0,1)^d, the
/// level-m leaf occupation counts, and the pinned (total-zero) white-noise
/// bridge over the leaves. Adding `total * 2^-m` to every bridge mass yields
/// leaf masses that are i.i.d. N(0, 2^-m) when `total` is standard normal.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCoupling {
    pub points: Points,
    pub leaf_counts: Vec<u64>,
    pub bridge_masses: Vec<f64>,
    pub splits: Vec<SplitVar>,
}

/// Splits `count` points down the dyadic tree and builds the matching
/// white-noise bridge, one shared standard normal per node. The draw order is
/// fixed (levels outward, nodes by index, then leaf-by-leaf placement), so
/// the output is a deterministic function of the stream state.
pub fn couple_cell(
    count: u64,
    expansion: &BinaryExpansion,
    m: u32,
    rng: &mut ChaCha8Rng,
) -> Result<CellCoupling> {
    if m > expansion.depth() {
        return Err(Error::invalid(format!(
            "coupling depth {m} exceeds the expansion depth {}",
            expansion.depth()
        )));
    }
    let d = expansion.dimension();
    let n_leaves = 1usize << m;
    let mut counts: Vec<u64> = vec![count];
    let mut bridges: Vec<f64> = vec![0.0];
    let mut splits: Vec<SplitVar> = Vec::with_capacity(n_leaves - 1);
    for level in 0..m {
        let width = 1usize << level;
        // a parent at this level has white-noise variance 2^-level, its
        // children split it as b_left = b/2 + (sqrt(var)/2) g
        let half_sd = 0.5 * 0.5f64.powi(level as i32).sqrt();
        let mut next_counts = Vec::with_capacity(2 * width);
        let mut next_bridges = Vec::with_capacity(2 * width);
        for k in 0..width {
            let g = dist::draw_standard_normal(rng);
            let (u, su) = dist::phi_pair(g);
            let left = dist::binomial_half_quantile(u, su, counts[k]);
            let left_bridge = 0.5 * bridges[k] + half_sd * g;
            splits.push(SplitVar {
                level,
                index: k as u64,
                parent_count: counts[k],
                left_count: left,
                gaussian: g,
            });
            next_counts.push(left);
            next_counts.push(counts[k] - left);
            next_bridges.push(left_bridge);
            next_bridges.push(bridges[k] - left_bridge);
        }
        counts = next_counts;
        bridges = next_bridges;
    }
    let mut points = Points::with_capacity(d, count as usize);
    let mut buf = vec![0.0f64; d];
    for (leaf, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let cell = expansion.cell(m, leaf as u64)?;
        for _ in 0..c {
            for (a, slot) in buf.iter_mut().enumerate() {
                let u: f64 = rng.gen();
                *slot = cell.lower()[a] + cell.side(a) * u;
            }
            points.push(&buf);
        }
    }
    Ok(CellCoupling { points, leaf_counts: counts, bridge_masses: bridges, splits })
}

/// Per-unit-cell summary kept with a coupled pair: enough to audit count
/// conservation and the leaf-level mass marginals after the fact.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    /// Per-axis index of the unit cell within the padded tiling.
    pub cell: Vec<usize>,
    pub count: u64,
    pub gauss_total: f64,
    pub leaf_counts: Vec<u64>,
    /// Leaf masses with the cell total folded in (bridge + total share).
    pub leaf_masses: Vec<f64>,
}

/// A shot-noise field and a Gaussian field drawn as one coupled sample.
#[derive(Debug, Clone)]
pub struct CoupledFieldPair {
    pub shot: GridField,
    pub gauss: GridField,
    pub lambda: f64,
    /// Effective splitting depth actually used.
    pub depth: u32,
    pub cells: Vec<CellRecord>,
}

/// Reusable driver holding the convolution state, the dyadic expansion, and
/// the leaf-to-lattice-cell map; `sample` draws one coupled pair per call.
pub struct FieldCoupler {
    assembler: FieldAssembler,
    expansion: BinaryExpansion,
    lambda: f64,
    depth: u32,
    per_unit: usize,
    cell_counts: Vec<usize>,
    /// Row-major flat offsets (within the padded array) of the lattice cells
    /// in each leaf, for the unit cell at the origin of the tiling.
    leaf_members: Vec<Vec<usize>>,
    /// Flat offset of each local lattice cell relative to the cell base.
    local_offsets: Vec<usize>,
    strides: Vec<usize>,
}

impl FieldCoupler {
    pub fn new(
        kernel: &dyn EvalKernel,
        lambda: f64,
        spec: &GridSpec,
        depth: u32,
        pad_radius: f64,
    ) -> Result<FieldCoupler> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::invalid(format!("intensity must be positive, got {lambda}")));
        }
        let d = spec.dimension();
        let inv = 1.0 / spec.spacing();
        let per_unit_f = inv.round();
        if (inv - per_unit_f).abs() > 1e-9
            || per_unit_f < 2.0
            || !(per_unit_f as u64).is_power_of_two()
        {
            return Err(Error::invalid(format!(
                "dyadic coupling needs spacing 2^-e with e >= 1, got {}",
                spec.spacing()
            )));
        }
        let per_unit = per_unit_f as usize;
        let e = per_unit.trailing_zeros();
        let layout = PaddedLayout::unit_aligned(spec, pad_radius)?;
        let zero = vec![0u32; d];
        let assembler = FieldAssembler::with_layout(kernel, &zero, layout)?;
        // splitting deeper than the lattice resolves is wasted: a leaf can
        // never be smaller than one lattice cell
        let depth = depth.min(DEPTH_CAP).min(e * d as u32);
        let expansion = BinaryExpansion::new(d, depth)?;

        let cell_counts: Vec<usize> =
            assembler.layout().padded_counts().iter().map(|&n| n / per_unit).collect();
        let mut strides = vec![1usize; d];
        for a in (0..d.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * assembler.layout().padded_counts()[a + 1];
        }
        // number of splits axis a receives among the first `depth` levels of
        // the cycling order 0, 1, ..., d-1, 0, ...
        let halvings: Vec<u32> = (0..d)
            .map(|a| {
                let a = a as u32;
                if depth > a { (depth - a).div_ceil(d as u32) } else { 0 }
            })
            .collect();
        let n_local: usize = per_unit.pow(d as u32);
        let mut leaf_members: Vec<Vec<usize>> = vec![Vec::new(); 1usize << depth];
        let mut local_offsets = Vec::with_capacity(n_local);
        for flat in 0..n_local {
            let mut rem = flat;
            let mut offset = 0usize;
            let mut axis_coord = vec![0usize; d];
            for a in (0..d).rev() {
                axis_coord[a] = rem % per_unit;
                rem /= per_unit;
            }
            for a in 0..d {
                offset += axis_coord[a] * strides[a];
            }
            // leaf index: bit t of the index is split t's side, read off the
            // top of the owning axis coordinate
            let mut leaf = 0usize;
            for t in 0..depth {
                let a = (t as usize) % d;
                let pos = t / d as u32;
                let top = axis_coord[a] >> (e - halvings[a]);
                let b = (top >> (halvings[a] - 1 - pos)) & 1;
                leaf = (leaf << 1) | b;
            }
            leaf_members[leaf].push(flat);
            local_offsets.push(offset);
        }
        for members in &leaf_members {
            debug_assert_eq!(members.len(), n_local >> depth);
        }
        Ok(FieldCoupler {
            assembler,
            expansion,
            lambda,
            depth,
            per_unit,
            cell_counts,
            leaf_members,
            local_offsets,
            strides,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Splitting depth after clamping to the lattice resolution.
    pub fn effective_depth(&self) -> u32 {
        self.depth
    }

    pub fn spec(&self) -> &GridSpec {
        self.assembler.layout().spec()
    }

    /// Draws one coupled pair. Every unit cell consumes its own substream
    /// derived from (seed, path), so the result does not depend on the order
    /// in which cells are processed.
    pub fn sample(&mut self, seed: u64, path: &[u64]) -> Result<CoupledFieldPair> {
        let d = self.spec().dimension();
        let eps = self.spec().spacing();
        let leaf_vol = 0.5f64.powi(self.depth as i32);
        let sub_vol = eps.powi(d as i32);
        let sub_sd = sub_vol.sqrt();
        let ratio = sub_vol / leaf_vol;
        let n_cells: usize = self.cell_counts.iter().product();
        let mut masses = vec![0.0f64; self.assembler.layout().total_padded()];
        let mut all_points = Points::new(d);
        let mut cells = Vec::with_capacity(n_cells);
        let mut cell_path: Vec<u64> = path.to_vec();
        cell_path.push(label::CELL);
        cell_path.push(0);

        let mut cell_idx = vec![0usize; d];
        let mut origin = vec![0.0f64; d];
        let mut global = vec![0.0f64; d];
        for flat_cell in 0..n_cells {
            let mut rem = flat_cell;
            for a in (0..d).rev() {
                cell_idx[a] = rem % self.cell_counts[a];
                rem /= self.cell_counts[a];
            }
            *cell_path.last_mut().unwrap() = flat_cell as u64;
            let mut stream = rng::stream(seed, &cell_path);

            let (n, z) = couple_poisson_gaussian(self.lambda, &mut stream)?;
            let cc = couple_cell(n, &self.expansion, self.depth, &mut stream)?;

            // unit cell origin in space and in the padded flat indexing
            let mut base = 0usize;
            for a in 0..d {
                origin[a] =
                    self.assembler.layout().first_site(a) - 0.5 * eps + cell_idx[a] as f64;
                base += cell_idx[a] * self.per_unit * self.strides[a];
            }
            for p in cc.points.iter() {
                for a in 0..d {
                    global[a] = origin[a] + p[a];
                }
                all_points.push(&global);
            }

            let mut leaf_masses = Vec::with_capacity(cc.bridge_masses.len());
            for (leaf, &bridge) in cc.bridge_masses.iter().enumerate() {
                let w = bridge + z * leaf_vol;
                leaf_masses.push(w);
                let members = &self.leaf_members[leaf];
                if members.len() == 1 {
                    masses[base + self.local_offsets[members[0]]] = w;
                } else {
                    // conditional white noise given the leaf total: i.i.d.
                    // N(0, sub_vol) shifted to hit the total exactly
                    let mut sum = 0.0;
                    let mut xi = Vec::with_capacity(members.len());
                    for _ in members {
                        let x = sub_sd * dist::draw_standard_normal(&mut stream);
                        sum += x;
                        xi.push(x);
                    }
                    let shift = ratio * (w - sum);
                    for (&x, &member) in xi.iter().zip(members) {
                        masses[base + self.local_offsets[member]] = x + shift;
                    }
                }
            }
            cells.push(CellRecord {
                cell: cell_idx.clone(),
                count: n,
                gauss_total: z,
                leaf_counts: cc.leaf_counts,
                leaf_masses,
            });
        }

        let counts = self.assembler.layout().bin(&all_points);
        let (shot, gauss) = self.assembler.assemble_pair(&counts, self.lambda, &masses)?;
        Ok(CoupledFieldPair { shot, gauss, lambda: self.lambda, depth: self.depth, cells })
    }

    /// Independent baseline with the same marginals and convolution state:
    /// a fresh Poisson field and a fresh Gaussian field from separate streams.
    pub fn independent_pair(
        &mut self,
        shot_rng: &mut ChaCha8Rng,
        gauss_rng: &mut ChaCha8Rng,
    ) -> Result<(GridField, GridField)> {
        let shot = self.assembler.shot_noise(self.lambda, shot_rng)?;
        let gauss = self.assembler.gaussian(gauss_rng)?;
        Ok((shot, gauss))
    }
}

/// Tail probabilities P[|N - lambda - sqrt(lambda) Z| >= t] of the quantile
/// coupling, one per threshold. The deviation is a deterministic function of
/// the driving normal, so each tail is the Gaussian measure of a level set;
/// a fine scan over the driver axis resolves masses far below Monte Carlo
/// reach. Thresholds the deviation never attains come back as exactly 0.
pub fn deviation_tail_masses(lambda: f64, thresholds: &[f64]) -> Result<Vec<f64>> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::invalid(format!(
            "deviation scan needs a positive finite intensity, got {lambda}"
        )));
    }
    if thresholds.is_empty() {
        return Err(Error::invalid("deviation scan needs at least one threshold"));
    }
    if let Some(t) = thresholds.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::invalid(format!(
            "deviation thresholds must be positive and finite, got {t}"
        )));
    }
    let sd = lambda.sqrt();
    let dev = |z: f64| {
        let (u, su) = dist::phi_pair(z);
        dist::poisson_quantile(u, su, lambda) as f64 - lambda - sd * z
    };
    // +-12 driver sigmas: the residual normal mass (~1e-33) is far below the
    // smallest tail the quartic-free deviation can reach inside the window
    let lo = -12.0f64;
    let hi = 12.0f64;
    let n_steps = 48_000usize;
    let h = (hi - lo) / n_steps as f64;
    let mut mass = vec![0.0f64; thresholds.len()];
    for i in 0..n_steps {
        let a = lo + i as f64 * h;
        let mid = a + 0.5 * h;
        let d = dev(mid).abs();
        // Gaussian measure of [a, a+h] via the more accurate tail
        let (ua, sua) = dist::phi_pair(a);
        let (ub, sub) = dist::phi_pair(a + h);
        let dm = if mid > 0.0 { sua - sub } else { ub - ua };
        for (t, acc) in thresholds.iter().zip(mass.iter_mut()) {
            if d >= *t {
                *acc += dm;
            }
        }
    }
    Ok(mass)
}

/// One-shot convenience over [`FieldCoupler`].
pub fn couple_fields(
    kernel: &dyn EvalKernel,
    lambda: f64,
    spec: &GridSpec,
    depth: u32,
    pad_radius: f64,
    seed: u64,
    path: &[u64],
) -> Result<CoupledFieldPair> {
    FieldCoupler::new(kernel, lambda, spec, depth, pad_radius)?.sample(seed, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::BoxRegion;
    use crate::grid::sup_norm_diff;
    use crate::kernel::Kernel;
    use crate::stats;

    #[test]
    fn default_depth_tracks_intensity() {
        assert_eq!(default_depth(1.0), 1);
        assert_eq!(default_depth(16.0), 4);
        assert_eq!(default_depth(64.0), 5);
        assert_eq!(default_depth(1024.0), 9);
        assert_eq!(default_depth(1e9), DEPTH_CAP);
    }

    #[test]
    fn count_and_total_are_comonotone() {
        let mut r = rng::stream(11, &[1]);
        let mut pairs: Vec<(f64, u64)> = (0..400)
            .map(|_| {
                let (n, z) = couple_poisson_gaussian(20.0, &mut r).unwrap();
                (z, n)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            assert!(w[0].1 <= w[1].1, "count dropped as the driver rose: {:?}", w);
        }
    }

    #[test]
    fn coupled_count_marginal_is_poisson() {
        use statrs::distribution::{Discrete, Poisson};
        for (case, lambda) in [(0u64, 1.0f64), (1, 20.0)].into_iter() {
            let mut r = rng::stream(12, &[case]);
            let top = (lambda + 8.0 * lambda.sqrt()) as usize + 2;
            let mut observed = vec![0.0f64; top + 1];
            let n_draws = 100_000;
            for _ in 0..n_draws {
                let (n, _) = couple_poisson_gaussian(lambda, &mut r).unwrap();
                observed[(n as usize).min(top)] += 1.0;
            }
            let pois = Poisson::new(lambda).unwrap();
            let mut expected: Vec<f64> =
                (0..=top).map(|k| n_draws as f64 * pois.pmf(k as u64)).collect();
            let assigned: f64 = expected.iter().take(top).sum();
            expected[top] = n_draws as f64 - assigned;
            let (stat, dof) = stats::chi_square(&observed, &expected, 5.0);
            let crit = stats::chi_square_critical(dof, 0.01);
            assert!(
                stat < crit,
                "lambda {lambda}: chi-square {stat:.2} over {dof} dof exceeds {crit:.2}"
            );
        }
    }

    #[test]
    fn median_driver_gives_unit_count_at_unit_intensity() {
        let mut r = rng::stream(13, &[2]);
        let mut seen = 0;
        for _ in 0..2000 {
            let (n, z) = couple_poisson_gaussian(1.0, &mut r).unwrap();
            // Poisson(1): N = 1 exactly when Phi(z) lies in (F(0), F(1)],
            // an interval that comfortably contains |z| <= 0.2
            if z.abs() <= 0.2 {
                assert_eq!(n, 1, "z {z} near the median must give one point");
                seen += 1;
            }
        }
        assert!(seen > 100, "median window never sampled");
    }

    /// The count deviation from its Gaussian surrogate is a deterministic
    /// function of the driver, so its tail probabilities can be read off by
    /// integrating the normal density over the deviation's level sets. The
    /// stated levels sit far below Monte Carlo resolution; a coarse empirical
    /// check pins the scan at an accessible level.
    #[test]
    fn coupling_deviation_has_exponential_tails() {
        let lambda = 100.0f64;
        let sd = lambda.sqrt();
        let thresholds = [2.0f64, 4.0, 6.0, 8.0];
        let mass = deviation_tail_masses(lambda, &thresholds).unwrap();
        for w in mass.windows(2) {
            assert!(
                w[1] > 0.0 && w[1] < w[0],
                "tail mass must decay strictly: {mass:?}"
            );
        }
        let logs: Vec<f64> = mass.iter().map(|p| p.ln()).collect();
        let fit = stats::fit_line(&thresholds, &logs).unwrap();
        assert!(
            fit.slope < -1.0 && fit.r_squared > 0.9,
            "log tail mass should fall steeply and linearly, got slope {:.3} r2 {:.3}",
            fit.slope,
            fit.r_squared
        );

        // Monte Carlo agreement at a level the sample size can resolve
        let dev = |z: f64| {
            let (u, su) = dist::phi_pair(z);
            dist::poisson_quantile(u, su, lambda) as f64 - lambda - sd * z
        };
        let t_mc = 2.0f64;
        let p_scan = mass[0];
        let mut r = rng::stream(14, &[3]);
        let n_draws = 200_000;
        let mut hits = 0u64;
        for _ in 0..n_draws {
            let z = dist::draw_standard_normal(&mut r);
            if dev(z).abs() >= t_mc {
                hits += 1;
            }
        }
        let p_hat = hits as f64 / n_draws as f64;
        let se = (p_scan * (1.0 - p_scan) / n_draws as f64).sqrt();
        assert!(
            (p_hat - p_scan).abs() < 5.0 * se.max(1e-9),
            "scan {p_scan:.3e} and Monte Carlo {p_hat:.3e} disagree at t = {t_mc}"
        );
    }

    #[test]
    fn cell_split_conserves_counts_exactly() {
        let m = 3u32;
        let exp = BinaryExpansion::new(2, m).unwrap();
        let mut r = rng::stream(15, &[4]);
        for _ in 0..300 {
            let n = dist::sample_poisson_count(30.0, &mut r);
            let cc = couple_cell(n, &exp, m, &mut r).unwrap();
            assert_eq!(cc.leaf_counts.len(), 1 << m);
            assert_eq!(cc.splits.len(), (1 << m) - 1);
            assert_eq!(cc.leaf_counts.iter().sum::<u64>(), n);
            assert_eq!(cc.points.len() as u64, n);
            assert!(cc.bridge_masses.iter().sum::<f64>().abs() < 1e-12);
            // every split hands its parent count to the two children
            for s in &cc.splits {
                assert!(s.left_count <= s.parent_count);
            }
            // re-derive each point's leaf from its coordinates and tally
            let mut tally = vec![0u64; 1 << m];
            for p in cc.points.iter() {
                assert!(p.iter().all(|&x| (0.0..1.0).contains(&x)));
                let mut leaf = 0usize;
                let mut halved = [0u32; 2];
                for t in 0..m {
                    let a = (t as usize) % 2;
                    halved[a] += 1;
                    let b = (p[a] * (1u64 << halved[a]) as f64) as usize & 1;
                    leaf = (leaf << 1) | b;
                }
                tally[leaf] += 1;
            }
            assert_eq!(tally, cc.leaf_counts, "points strayed from their leaves");
        }
    }

    #[test]
    fn bridge_plus_total_gives_iid_leaf_masses() {
        let m = 2u32;
        let exp = BinaryExpansion::new(1, m).unwrap();
        let leaf_vol = 0.25f64;
        let n_reps = 4000usize;
        let mut r = rng::stream(16, &[5]);
        let mut samples: Vec<[f64; 4]> = Vec::with_capacity(n_reps);
        for _ in 0..n_reps {
            let cc = couple_cell(7, &exp, m, &mut r).unwrap();
            let z = dist::draw_standard_normal(&mut r);
            let mut row = [0.0f64; 4];
            for (slot, &b) in row.iter_mut().zip(&cc.bridge_masses) {
                *slot = b + z * leaf_vol;
            }
            samples.push(row);
        }
        let nf = n_reps as f64;
        for i in 0..4 {
            let mean = samples.iter().map(|s| s[i]).sum::<f64>() / nf;
            assert!(
                mean.abs() < 4.0 * leaf_vol.sqrt() / nf.sqrt(),
                "leaf {i} mean {mean:.4} drifts from zero"
            );
            let var = samples.iter().map(|s| (s[i] - mean) * (s[i] - mean)).sum::<f64>() / nf;
            let se = leaf_vol * (2.0 / nf).sqrt();
            assert!(
                (var - leaf_vol).abs() < 4.0 * se,
                "leaf {i} variance {var:.4} misses {leaf_vol} by more than {:.4}",
                4.0 * se
            );
            for j in (i + 1)..4 {
                let cov = samples.iter().map(|s| s[i] * s[j]).sum::<f64>() / nf;
                assert!(
                    cov.abs() < 4.0 * leaf_vol / nf.sqrt(),
                    "leaves {i},{j} correlate: {cov:.4}"
                );
            }
        }
    }

    #[test]
    fn points_spread_uniformly_across_leaves() {
        let m = 4u32;
        let exp = BinaryExpansion::new(2, m).unwrap();
        let mut r = rng::stream(17, &[6]);
        let n_reps = 5000usize;
        let per_rep = 5u64;
        let mut leaf_tally = vec![0.0f64; 1 << m];
        let mut coord_tally = vec![0.0f64; 8];
        let mut n_coords = 0.0f64;
        for _ in 0..n_reps {
            let cc = couple_cell(per_rep, &exp, m, &mut r).unwrap();
            for (leaf, &c) in cc.leaf_counts.iter().enumerate() {
                leaf_tally[leaf] += c as f64;
            }
            // in-leaf placement: the low dyadic digits should be uniform too
            for p in cc.points.iter() {
                for &x in p {
                    let frac = (x * 4.0).fract();
                    coord_tally[(frac * 8.0) as usize & 7] += 1.0;
                    n_coords += 1.0;
                }
            }
        }
        let total: f64 = leaf_tally.iter().sum();
        let expected = vec![total / (1 << m) as f64; 1 << m];
        let (stat, dof) = stats::chi_square(&leaf_tally, &expected, 5.0);
        let crit = stats::chi_square_critical(dof, 0.01);
        assert!(stat < crit, "leaf occupancy chi-square {stat:.2} over {dof} dof > {crit:.2}");
        let expected_c = vec![n_coords / 8.0; 8];
        let (stat_c, dof_c) = stats::chi_square(&coord_tally, &expected_c, 5.0);
        let crit_c = stats::chi_square_critical(dof_c, 0.01);
        assert!(stat_c < crit_c, "sub-leaf digits chi-square {stat_c:.2} > {crit_c:.2}");
    }

    #[test]
    fn leaf_map_matches_the_expansion_geometry() {
        // the coupler's integer leaf map must agree with the dyadic cells
        let k = Kernel::rational(3.0, 2).unwrap();
        for depth in [0u32, 1, 3, 5, 6] {
            let spec =
                GridSpec::new(BoxRegion::square(0.0, 1.0).unwrap(), 0.125).unwrap();
            let coupler = FieldCoupler::new(&k, 4.0, &spec, depth, 6.3).unwrap();
            let m = coupler.effective_depth();
            assert_eq!(m, depth.min(6));
            let exp = BinaryExpansion::new(2, m).unwrap();
            let per = coupler.per_unit;
            let eps = 1.0 / per as f64;
            for (leaf, members) in coupler.leaf_members.iter().enumerate() {
                assert_eq!(members.len(), (per * per) >> m);
                let cell = exp.cell(m, leaf as u64).unwrap();
                for &flat in members {
                    let (i, j) = (flat / per, flat % per);
                    let center = [(i as f64 + 0.5) * eps, (j as f64 + 0.5) * eps];
                    assert!(
                        cell.contains(&center),
                        "depth {m}: local cell ({i},{j}) landed outside leaf {leaf}"
                    );
                }
            }
        }
    }

    #[test]
    fn coupler_reproduces_single_field_marginals() {
        let k = Kernel::rational(3.0, 2).unwrap();
        let spec = GridSpec::new(BoxRegion::square(0.0, 1.0).unwrap(), 0.125).unwrap();
        let lambda = 64.0;
        let mut coupler = FieldCoupler::new(&k, lambda, &spec, 5, 6.3).unwrap();
        let n_reps = 300usize;
        let mut shot_vals = Vec::with_capacity(n_reps);
        let mut gauss_vals = Vec::with_capacity(n_reps);
        for rep in 0..n_reps {
            let pair = coupler.sample(18, &[rep as u64]).unwrap();
            shot_vals.push(pair.shot.at(&[4, 4]));
            gauss_vals.push(pair.gauss.at(&[4, 4]));
        }
        let k0 = std::f64::consts::PI / 2.0;
        for (name, vals) in [("shot", &shot_vals), ("gauss", &gauss_vals)] {
            let mean = stats::mean(vals);
            let var = stats::variance(vals);
            let se_mean = (k0 / n_reps as f64).sqrt();
            let se_var = k0 * (2.0 / n_reps as f64).sqrt();
            assert!(
                mean.abs() < 4.0 * se_mean,
                "{name} center mean {mean:.3} away from zero"
            );
            assert!(
                (var - k0).abs() < 4.0 * se_var,
                "{name} center variance {var:.3} misses {k0:.3} by over {:.3}",
                4.0 * se_var
            );
        }
        // the pair must share structure, not just marginals
        let ms = stats::mean(&shot_vals);
        let mg = stats::mean(&gauss_vals);
        let cov = shot_vals
            .iter()
            .zip(&gauss_vals)
            .map(|(s, g)| (s - ms) * (g - mg))
            .sum::<f64>()
            / n_reps as f64;
        let corr =
            cov / (stats::variance(&shot_vals) * stats::variance(&gauss_vals)).sqrt();
        assert!(corr > 0.8, "coupled values barely correlate: {corr:.3}");
    }

    #[test]
    fn coupled_distance_beats_independent_baseline() {
        let k = Kernel::rational(3.0, 2).unwrap();
        let region = BoxRegion::square(0.0, 2.0).unwrap();
        let spec = GridSpec::new(region.clone(), 0.125).unwrap();
        let lambda = 64.0;
        let depth = default_depth(lambda);
        let mut coupler = FieldCoupler::new(&k, lambda, &spec, depth, 6.3).unwrap();
        let n_reps = 100usize;
        let mut coupled = Vec::with_capacity(n_reps);
        let mut indep = Vec::with_capacity(n_reps);
        let mut wins = 0usize;
        for rep in 0..n_reps {
            let pair = coupler.sample(19, &[rep as u64]).unwrap();
            let dc = sup_norm_diff(&pair.shot, &pair.gauss, &region).unwrap();
            let mut rs = rng::stream(19, &[label::BASELINE, rep as u64, 0]);
            let mut rg = rng::stream(19, &[label::BASELINE, rep as u64, 1]);
            let (shot, gauss) = coupler.independent_pair(&mut rs, &mut rg).unwrap();
            let di = sup_norm_diff(&shot, &gauss, &region).unwrap();
            if dc < di {
                wins += 1;
            }
            coupled.push(dc);
            indep.push(di);
        }
        assert!(
            wins >= 75,
            "coupling won only {wins}/{n_reps} replicas against the independent pair"
        );
        assert!(
            stats::median(&coupled) < stats::median(&indep),
            "median coupled distance {:.3} not below independent {:.3}",
            stats::median(&coupled),
            stats::median(&indep)
        );
    }

    #[test]
    fn coupling_error_shrinks_with_intensity() {
        let k = Kernel::rational(3.0, 2).unwrap();
        let region = BoxRegion::square(0.0, 1.0).unwrap();
        let spec = GridSpec::new(region.clone(), 0.125).unwrap();
        let n_reps = 60usize;
        let mut medians = Vec::new();
        for lambda in [16.0f64, 256.0] {
            let depth = default_depth(lambda);
            let mut coupler = FieldCoupler::new(&k, lambda, &spec, depth, 6.3).unwrap();
            let dists: Vec<f64> = (0..n_reps)
                .map(|rep| {
                    let pair = coupler.sample(20, &[lambda.to_bits(), rep as u64]).unwrap();
                    sup_norm_diff(&pair.shot, &pair.gauss, &region).unwrap()
                })
                .collect();
            medians.push(stats::median(&dists));
        }
        assert!(
            medians[1] < medians[0],
            "median distance failed to shrink: {medians:?}"
        );
    }

    #[test]
    fn sampling_is_deterministic_in_seed_and_path() {
        let k = Kernel::rational(3.0, 2).unwrap();
        let spec = GridSpec::new(BoxRegion::square(0.0, 1.0).unwrap(), 0.25).unwrap();
        let mut coupler = FieldCoupler::new(&k, 8.0, &spec, 3, 6.3).unwrap();
        let a = coupler.sample(21, &[7]).unwrap();
        let b = coupler.sample(21, &[7]).unwrap();
        assert_eq!(a.shot.values(), b.shot.values());
        assert_eq!(a.gauss.values(), b.gauss.values());
        assert_eq!(a.cells, b.cells);
        let c = coupler.sample(21, &[8]).unwrap();
        assert_ne!(a.shot.values(), c.shot.values());
    }

    #[test]
    fn counts_in_records_match_the_rendered_field_mass() {
        // total point count in the records equals the binned lattice mass
        let k = Kernel::rational(3.0, 2).unwrap();
        let spec = GridSpec::new(BoxRegion::square(0.0, 1.0).unwrap(), 0.25).unwrap();
        let mut coupler = FieldCoupler::new(&k, 12.0, &spec, 4, 6.3).unwrap();
        let pair = coupler.sample(22, &[0]).unwrap();
        for rec in &pair.cells {
            assert_eq!(rec.leaf_counts.iter().sum::<u64>(), rec.count);
            assert_eq!(rec.leaf_counts.len(), rec.leaf_masses.len());
        }
        let depth = pair.depth;
        assert_eq!(depth, 4);
    }

    #[test]
    fn rejects_bad_geometry() {
        let k = Kernel::rational(3.0, 2).unwrap();
        let fine = GridSpec::new(BoxRegion::square(0.0, 1.0).unwrap(), 0.1).unwrap();
        assert!(FieldCoupler::new(&k, 4.0, &fine, 3, 6.3).is_err());
        let shifted =
            GridSpec::new(BoxRegion::rect(0.3, 1.3, 0.0, 1.0).unwrap(), 0.125).unwrap();
        assert!(FieldCoupler::new(&k, 4.0, &shifted, 3, 6.3).is_err());
        let ok = GridSpec::new(BoxRegion::square(0.0, 1.0).unwrap(), 0.125).unwrap();
        assert!(FieldCoupler::new(&k, 0.0, &ok, 3, 6.3).is_err());
        let k1 = Kernel::rational(3.0, 1).unwrap();
        assert!(FieldCoupler::new(&k1, 4.0, &ok, 3, 6.3).is_err());
    }
}
