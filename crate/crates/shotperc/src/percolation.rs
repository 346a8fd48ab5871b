//! Crossings of excursion sets on the sampling lattice.
//!
//! The sub-level set `{f <= l}` restricted to a rectangular site window
//! either carries a 4-connected left-right path, or its complement carries
//! an 8-connected top-bottom path, never both and never neither. Everything
//! here is built so that discrete statements are exact: crossing levels are
//! computed as exact order statistics of a sorted activation sweep, so the
//! same replica can be interrogated at every level consistently and the
//! monotonicity of crossings in the level holds bitwise, not just in
//! distribution.

use crate::error::{Error, Result};
use crate::geom::{box_distance, BoxRegion};
use crate::grid::{GridField, GridSpec};
use crate::stats;

/// Which pair of opposite window edges a path must join.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    LeftRight,
    TopBottom,
}

impl Orientation {
    pub fn transposed(self) -> Orientation {
        match self {
            Orientation::LeftRight => Orientation::TopBottom,
            Orientation::TopBottom => Orientation::LeftRight,
        }
    }
}

/// Primal paths live on the excursion mask with 4-adjacency; dual paths live
/// on the complement of the mask with 8-adjacency. The two are matched: on
/// any window exactly one of {primal left-right, dual top-bottom} occurs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Primal,
    Dual,
}

/// Sub-level set `{value <= level}` of a sampled field, stored as a bitmap
/// over the field's own grid.
#[derive(Debug, Clone)]
pub struct ExcursionSet {
    spec: GridSpec,
    level: f64,
    mask: Vec<bool>,
}

impl ExcursionSet {
    /// Build directly from a mask (used by enumeration tests and audits that
    /// do not start from a sampled field).
    pub fn from_mask(spec: GridSpec, level: f64, mask: Vec<bool>) -> Result<ExcursionSet> {
        if mask.len() != spec.total_sites() {
            return Err(Error::invalid(format!(
                "mask has {} entries for {} grid sites",
                mask.len(),
                spec.total_sites()
            )));
        }
        Ok(ExcursionSet { spec, level, mask })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Fraction of grid sites inside the sub-level set.
    pub fn density(&self) -> f64 {
        let hits = self.mask.iter().filter(|&&b| b).count();
        hits as f64 / self.mask.len().max(1) as f64
    }
}

/// Threshold the field at `level`. Sites with value exactly equal to the
/// level are inside the set; this tie convention is what makes crossing at
/// level l equivalent to `exact_crossing_threshold <= l`.
pub fn excursion(field: &GridField, level: f64) -> Result<ExcursionSet> {
    if !level.is_finite() {
        return Err(Error::invalid(format!("excursion level must be finite, got {level}")));
    }
    let mask = field.values().iter().map(|&v| v <= level).collect();
    ExcursionSet::from_mask(field.spec().clone(), level, mask)
}

/// Union-find with path halving and union by size. Small and branch-light;
/// crossing checks spend nearly all their time here.
struct DisjointSets {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl DisjointSets {
    fn new(n: usize) -> DisjointSets {
        DisjointSets { parent: (0..n as u32).collect(), size: vec![1; n] }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra as usize] < self.size[rb as usize] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb as usize] = ra;
        self.size[ra as usize] += self.size[rb as usize];
    }

    fn connected(&mut self, a: u32, b: u32) -> bool {
        self.find(a) == self.find(b)
    }
}

/// The inclusive site window of `rect` on the grid of `spec`, as
/// (i0, i1, j0, j1) with i indexing axis 0 and j axis 1.
fn site_window(spec: &GridSpec, rect: &BoxRegion) -> Result<(usize, usize, usize, usize)> {
    if spec.dimension() != 2 {
        return Err(Error::invalid(format!(
            "crossings are defined for dimension 2, grid has dimension {}",
            spec.dimension()
        )));
    }
    if !rect.inside(spec.region(), 1e-9) {
        return Err(Error::invalid(format!(
            "crossing window [{:?}, {:?}] extends beyond the grid region",
            rect.lower(),
            rect.upper()
        )));
    }
    let ranges = spec.site_ranges(rect)?;
    Ok((ranges[0].0, ranges[0].1, ranges[1].0, ranges[1].1))
}

/// Does the window of `rect` carry a crossing of the excursion set?
///
/// `Primal` asks for a 4-connected path of mask sites, `Dual` for an
/// 8-connected path of complement sites. `LeftRight` joins the smallest and
/// largest axis-0 columns of the window, `TopBottom` the extreme axis-1 rows.
/// The rectangle must lie inside the grid region.
pub fn crossing(
    ex: &ExcursionSet,
    rect: &BoxRegion,
    orientation: Orientation,
    connectivity: Connectivity,
) -> Result<bool> {
    let (i0, i1, j0, j1) = site_window(&ex.spec, rect)?;
    let w = i1 - i0 + 1;
    let h = j1 - j0 + 1;
    let counts = ex.spec.site_counts();
    let stride = counts[1];

    let mut sets = DisjointSets::new(w * h + 2);
    let source = (w * h) as u32;
    let sink = source + 1;
    let local = |i: usize, j: usize| ((i - i0) * h + (j - j0)) as u32;

    // One pass in (i, j) lexicographic order: when a site is active, join it
    // to the already-visited active neighbors (previous column, previous row;
    // for 8-adjacency also the two previous-column diagonals).
    for i in i0..=i1 {
        for j in j0..=j1 {
            let here = match connectivity {
                Connectivity::Primal => ex.mask[i * stride + j],
                Connectivity::Dual => !ex.mask[i * stride + j],
            };
            if !here {
                continue;
            }
            let id = local(i, j);
            let active = |ii: usize, jj: usize| match connectivity {
                Connectivity::Primal => ex.mask[ii * stride + jj],
                Connectivity::Dual => !ex.mask[ii * stride + jj],
            };
            if j > j0 && active(i, j - 1) {
                sets.union(id, local(i, j - 1));
            }
            if i > i0 {
                if active(i - 1, j) {
                    sets.union(id, local(i - 1, j));
                }
                if connectivity == Connectivity::Dual {
                    if j > j0 && active(i - 1, j - 1) {
                        sets.union(id, local(i - 1, j - 1));
                    }
                    if j < j1 && active(i - 1, j + 1) {
                        sets.union(id, local(i - 1, j + 1));
                    }
                }
            }
            match orientation {
                Orientation::LeftRight => {
                    if i == i0 {
                        sets.union(id, source);
                    }
                    if i == i1 {
                        sets.union(id, sink);
                    }
                }
                Orientation::TopBottom => {
                    if j == j1 {
                        sets.union(id, source);
                    }
                    if j == j0 {
                        sets.union(id, sink);
                    }
                }
            }
        }
    }
    Ok(sets.connected(source, sink))
}

/// The exact smallest level at which the window of `rect` carries a primal
/// crossing: sites are activated in increasing value order (ties broken by
/// site index) and the returned value is the one whose activation first joins
/// the two target edges. Crossing at level l holds if and only if the
/// returned threshold is <= l, with no tolerance involved.
///
/// By edge duality the same number describes dual crossings: the transposed
/// dual crossing of the complement occurs at level l exactly when l is below
/// the threshold.
pub fn exact_crossing_threshold(
    field: &GridField,
    rect: &BoxRegion,
    orientation: Orientation,
) -> Result<f64> {
    let (i0, i1, j0, j1) = site_window(field.spec(), rect)?;
    let w = i1 - i0 + 1;
    let h = j1 - j0 + 1;
    let stride = field.spec().site_counts()[1];
    let values = field.values();

    let mut order: Vec<u32> = (0..(w * h) as u32).collect();
    let value_of = |id: u32| {
        let (di, dj) = ((id as usize) / h, (id as usize) % h);
        values[(i0 + di) * stride + (j0 + dj)]
    };
    order.sort_unstable_by(|&a, &b| {
        value_of(a).partial_cmp(&value_of(b)).unwrap().then(a.cmp(&b))
    });

    let mut sets = DisjointSets::new(w * h + 2);
    let source = (w * h) as u32;
    let sink = source + 1;
    let mut active = vec![false; w * h];

    for id in order {
        let (di, dj) = ((id as usize) / h, (id as usize) % h);
        active[id as usize] = true;
        if di > 0 && active[id as usize - h] {
            sets.union(id, id - h as u32);
        }
        if di + 1 < w && active[id as usize + h] {
            sets.union(id, id + h as u32);
        }
        if dj > 0 && active[id as usize - 1] {
            sets.union(id, id - 1);
        }
        if dj + 1 < h && active[id as usize + 1] {
            sets.union(id, id + 1);
        }
        match orientation {
            Orientation::LeftRight => {
                if di == 0 {
                    sets.union(id, source);
                }
                if di == w - 1 {
                    sets.union(id, sink);
                }
            }
            Orientation::TopBottom => {
                if dj == h - 1 {
                    sets.union(id, source);
                }
                if dj == 0 {
                    sets.union(id, sink);
                }
            }
        }
        if sets.connected(source, sink) {
            return Ok(value_of(id));
        }
    }
    // With every site active a full row and column are active, so the edges
    // connect no matter the orientation; reaching here means the window was
    // empty, which site_ranges already rejects.
    unreachable!("activation sweep exhausted without connecting the window edges")
}

/// Monte Carlo crossing estimate at one level.
#[derive(Debug, Clone)]
pub struct CrossingEstimate {
    pub level: f64,
    pub p_hat: f64,
    /// Half-width of the Wilson 95% interval; used as the reporting stderr.
    pub stderr: f64,
    pub successes: u64,
    pub replicas: u64,
}

fn check_replicas(n_reps: u64) -> Result<()> {
    if n_reps < 30 {
        return Err(Error::invalid(format!(
            "replicas must be at least 30 for interval estimates, got {n_reps}"
        )));
    }
    Ok(())
}

/// Estimate primal crossing probabilities at several levels with common
/// random numbers: each replica contributes its exact crossing threshold, so
/// the estimates are consistent across levels (monotone by construction) and
/// one field synthesis serves the whole curve. `sample_field` maps a replica
/// index to a field; determinism in the replica index is the caller's
/// contract and makes the whole curve reproducible.
pub fn crossing_curve(
    mut sample_field: impl FnMut(u64) -> Result<GridField>,
    levels: &[f64],
    rect: &BoxRegion,
    orientation: Orientation,
    n_reps: u64,
) -> Result<Vec<CrossingEstimate>> {
    check_replicas(n_reps)?;
    if levels.is_empty() {
        return Err(Error::invalid("levels list must be nonempty".to_string()));
    }
    let mut counts = vec![0u64; levels.len()];
    for rep in 0..n_reps {
        let field = sample_field(rep)?;
        let t = exact_crossing_threshold(&field, rect, orientation)?;
        for (k, &level) in levels.iter().enumerate() {
            if t <= level {
                counts[k] += 1;
            }
        }
    }
    Ok(levels
        .iter()
        .zip(&counts)
        .map(|(&level, &successes)| {
            let (_, half) = stats::wilson_interval(successes, n_reps);
            CrossingEstimate {
                level,
                p_hat: successes as f64 / n_reps as f64,
                stderr: half,
                successes,
                replicas: n_reps,
            }
        })
        .collect())
}

/// Single-level convenience wrapper around [`crossing_curve`].
pub fn crossing_probability(
    sample_field: impl FnMut(u64) -> Result<GridField>,
    level: f64,
    rect: &BoxRegion,
    orientation: Orientation,
    n_reps: u64,
) -> Result<CrossingEstimate> {
    let mut curve = crossing_curve(sample_field, &[level], rect, orientation, n_reps)?;
    Ok(curve.pop().unwrap())
}

/// Finite-box stand-in for the critical level: the level at which half the
/// replicas cross.
#[derive(Debug, Clone)]
pub struct CriticalLevelEstimate {
    /// Intensity tag carried through for reporting; None for Gaussian fields.
    pub lambda: Option<f64>,
    pub box_size: f64,
    pub level: f64,
    pub level_stderr: f64,
    /// Strict bracket: crossing count is below half at `.0` and above half
    /// at `.1`.
    pub bracket: (f64, f64),
    pub replicas: u64,
}

/// Estimate the level at which the left-right crossing probability of
/// `square` reaches one half.
///
/// Each replica yields an exact crossing threshold; the reported level is the
/// smallest level at which at least half the replicas cross, i.e. an order
/// statistic of the thresholds. That definition shifts exactly with the field
/// (adding a constant to every field value moves the estimate by the same
/// constant, bit for bit) and needs no interpolation. A bisection over probe
/// levels maintains the strict bracket, starting from `[-scale, scale]` and
/// widening stepwise to five times that before giving up.
pub fn estimate_critical_level(
    mut sample_field: impl FnMut(u64) -> Result<GridField>,
    square: &BoxRegion,
    n_reps: u64,
    tol: f64,
    scale: f64,
    lambda: Option<f64>,
) -> Result<CriticalLevelEstimate> {
    check_replicas(n_reps)?;
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::invalid(format!("bracket tolerance must be positive, got {tol}")));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("initial bracket scale must be positive, got {scale}")));
    }

    let mut thresholds = Vec::with_capacity(n_reps as usize);
    for rep in 0..n_reps {
        let field = sample_field(rep)?;
        thresholds.push(exact_crossing_threshold(&field, square, Orientation::LeftRight)?);
    }
    critical_level_from_thresholds(thresholds, square.side(0), tol, scale, lambda)
}

/// The estimator core of [`estimate_critical_level`], starting from
/// per-replica crossing thresholds that the caller has already collected
/// (possibly in parallel).
pub fn critical_level_from_thresholds(
    thresholds: Vec<f64>,
    box_size: f64,
    tol: f64,
    scale: f64,
    lambda: Option<f64>,
) -> Result<CriticalLevelEstimate> {
    let n_reps = thresholds.len() as u64;
    check_replicas(n_reps)?;
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::invalid(format!("bracket tolerance must be positive, got {tol}")));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("initial bracket scale must be positive, got {scale}")));
    }
    let mut sorted = thresholds;
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let crossers_at = |level: f64| sorted.partition_point(|&t| t <= level) as u64;

    let n = n_reps;
    let mut lo = -scale;
    while 2 * crossers_at(lo) >= n {
        lo -= scale;
        if lo < -5.0 * scale - 1e-12 {
            return Err(Error::inconsistent(format!(
                "crossing count stays at or above half down to level {:.6}; \
                 the half-crossing level is not bracketed within five scales",
                lo + scale
            )));
        }
    }
    let mut hi = scale;
    while 2 * crossers_at(hi) <= n {
        hi += scale;
        if hi > 5.0 * scale + 1e-12 {
            return Err(Error::inconsistent(format!(
                "crossing count stays at or below half up to level {:.6}; \
                 the half-crossing level is not bracketed within five scales",
                hi - scale
            )));
        }
    }

    // Strict bracket ends: both initial endpoints qualify by construction.
    let mut best_lo = lo;
    let mut best_hi = hi;
    for _ in 0..60 {
        if hi - lo < tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let c = 2 * crossers_at(mid);
        if c >= n {
            hi = mid;
            if c > n {
                best_hi = mid;
            }
        } else {
            lo = mid;
            best_lo = mid;
        }
    }

    // Smallest level reached by at least half the replicas.
    let half_index = (n as usize).div_ceil(2) - 1;
    let level = sorted[half_index];
    debug_assert!(level > best_lo && level <= best_hi.max(level));

    Ok(CriticalLevelEstimate {
        lambda,
        box_size,
        level,
        level_stderr: stats::median_stderr(&sorted),
        bracket: (best_lo, best_hi),
        replicas: n,
    })
}

/// Outcome of a product-bound check: an intersection (or master) probability
/// against a product of sprinkled single-event probabilities.
#[derive(Debug, Clone)]
pub struct DecouplingReport {
    pub scale: f64,
    pub level: f64,
    /// Level raise applied to the single-event side.
    pub shift: f64,
    /// Estimated joint (left-hand) probability.
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// Estimated product (right-hand) bound, before any additive error term.
    pub rhs: f64,
    pub rhs_stderr: f64,
    /// rhs - lhs; nonnegative up to the model's additive error term.
    pub slack: f64,
    pub slack_stderr: f64,
    pub replicas: u64,
}

pub(crate) fn mean_and_cov(rows: &[[f64; 3]]) -> ([f64; 3], [[f64; 3]; 3]) {
    let n = rows.len() as f64;
    let mut mean = [0.0f64; 3];
    for row in rows {
        for k in 0..3 {
            mean[k] += row[k];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = [[0.0f64; 3]; 3];
    for row in rows {
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += (row[a] - mean[a]) * (row[b] - mean[b]);
            }
        }
    }
    let denom = (n - 1.0).max(1.0);
    for r in &mut cov {
        for c in r {
            *c /= denom;
        }
    }
    (mean, cov)
}

/// Compare P[both rectangles cross at `level`] against
/// P[left crosses at `level + shift`] * P[right crosses at `level + shift`].
///
/// The two rectangles are `[0, R] x [0, 3R]` and `[2R, 3R] x [0, 3R]`, a gap
/// of exactly `R` apart; the sampled fields must cover `[0, 3R] x [0, 3R]`.
/// Raising the level on the product side is the sprinkling: it makes each
/// single crossing more likely and is what absorbs the dependence between
/// the two sides, up to an additive error that decays in `R`. Positive slack
/// (or slack within noise of zero) is the expected outcome; the joint and
/// single estimates share replicas so the slack estimate has a proper
/// delta-method stderr.
pub fn sprinkling_check(
    mut sample_field: impl FnMut(u64) -> Result<GridField>,
    scale: f64,
    level: f64,
    shift: f64,
    n_reps: u64,
) -> Result<DecouplingReport> {
    check_replicas(n_reps)?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("separation scale must be positive, got {scale}")));
    }
    if !(shift >= 0.0 && shift.is_finite()) {
        return Err(Error::invalid(format!("level shift must be nonnegative, got {shift}")));
    }
    let (rect_a, rect_b) = sprinkling_rects(scale)?;
    let mut rows = Vec::with_capacity(n_reps as usize);
    for rep in 0..n_reps {
        let field = sample_field(rep)?;
        let ta = exact_crossing_threshold(&field, &rect_a, Orientation::LeftRight)?;
        let tb = exact_crossing_threshold(&field, &rect_b, Orientation::LeftRight)?;
        let raised = level + shift;
        rows.push([
            f64::from(ta <= raised),
            f64::from(tb <= raised),
            f64::from(ta <= level && tb <= level),
        ]);
    }
    decoupling_report(&rows, scale, level, shift, 1.0)
}

/// The two crossing rectangles of the sprinkling comparison: `R x 3R` boxes
/// separated by exactly `R`.
pub fn sprinkling_rects(scale: f64) -> Result<(BoxRegion, BoxRegion)> {
    let r = scale;
    let rect_a = BoxRegion::rect(0.0, r, 0.0, 3.0 * r)?;
    let rect_b = BoxRegion::rect(2.0 * r, 3.0 * r, 0.0, 3.0 * r)?;
    debug_assert!(box_distance(&rect_a, &rect_b) >= r - 1e-9);
    Ok((rect_a, rect_b))
}

/// Assemble a [`DecouplingReport`] from per-replica indicator rows
/// `[single_a, single_b, joint]` with rhs = factor * mean_a * mean_b.
pub(crate) fn decoupling_report(
    rows: &[[f64; 3]],
    scale: f64,
    level: f64,
    shift: f64,
    factor: f64,
) -> Result<DecouplingReport> {
    let n = rows.len() as f64;
    let (mean, cov) = mean_and_cov(rows);
    let rhs = factor * mean[0] * mean[1];
    let lhs = mean[2];
    // Delta method for factor*pa*pb - pj with gradient (factor*pb, factor*pa, -1).
    let g = [factor * mean[1], factor * mean[0], -1.0];
    let mut var_slack = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            var_slack += g[a] * g[b] * cov[a][b];
        }
    }
    let var_rhs = g[0] * g[0] * cov[0][0] + 2.0 * g[0] * g[1] * cov[0][1] + g[1] * g[1] * cov[1][1];
    Ok(DecouplingReport {
        scale,
        level,
        shift,
        lhs,
        lhs_stderr: (cov[2][2] / n).sqrt(),
        rhs,
        rhs_stderr: (var_rhs.max(0.0) / n).sqrt(),
        slack: rhs - lhs,
        slack_stderr: (var_slack.max(0.0) / n).sqrt(),
        replicas: rows.len() as u64,
    })
}
