//! REML fitting of the Hussey–Hughes linear mixed model on cluster-period
//! cell summaries.
//!
//! Because the covariance is exchangeable within each cell, the likelihood,
//! GLS estimates, and information depend on the data only through per-cell
//! counts, means, and within-cell sums of squares. Per-cluster covariance
//! inverses use the diagonal-plus-rank-one closed form, so a criterion
//! evaluation costs O(C (L^2 + L p^2)) for L observed cells per cluster.

use crate::design::{AllocationMatrix, PeriodRange, VarianceComponents};
use crate::linalg::SymMatrix;
use crate::{Error, Real, Result};

/// Sufficient statistics for one cluster-period cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellStat<F> {
    /// Number of individuals observed in the cell.
    pub count: usize,
    /// Cell mean.
    pub mean: F,
    /// Within-cell sum of squared deviations from the cell mean.
    pub sum_sq: F,
}

/// Cell summaries for every cluster over a contiguous period range, plus the
/// allocation matrix they were observed under.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummaries<F> {
    alloc: AllocationMatrix,
    periods: PeriodRange,
    cells: Vec<CellStat<F>>, // cluster-major, then period
}

impl<F: Real> CellSummaries<F> {
    /// Builds summaries from raw `(cluster, period, value)` observations.
    ///
    /// Every cell of `alloc x periods` must receive at least one
    /// observation; observations outside the design are rejected.
    pub fn from_observations(
        alloc: &AllocationMatrix,
        periods: PeriodRange,
        observations: &[(usize, usize, F)],
    ) -> Result<Self> {
        if periods.last() > alloc.periods() {
            return Err(Error::Argument(format!(
                "period range ends at {} but the design has {} periods",
                periods.last(),
                alloc.periods()
            )));
        }
        let n_cells = alloc.clusters() * periods.len();
        let mut cells = vec![
            CellStat {
                count: 0,
                mean: F::zero(),
                sum_sq: F::zero(),
            };
            n_cells
        ];
        for &(cluster, period, value) in observations {
            if cluster >= alloc.clusters() || !periods.contains(period) {
                return Err(Error::Data(format!(
                    "observation for cluster {cluster}, period {period} lies outside the design"
                )));
            }
            if !value.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite observation in cluster {cluster}, period {period}"
                )));
            }
            let idx = cluster * periods.len() + (period - periods.first());
            let cell = &mut cells[idx];
            // Welford update: one pass, numerically stable.
            cell.count += 1;
            let delta = value - cell.mean;
            cell.mean += delta / F::of(cell.count);
            cell.sum_sq += delta * (value - cell.mean);
        }
        for (idx, cell) in cells.iter().enumerate() {
            if cell.count == 0 {
                let cluster = idx / periods.len();
                let period = periods.first() + idx % periods.len();
                return Err(Error::Data(format!(
                    "no observations for cluster {cluster}, period {period}"
                )));
            }
        }
        Ok(Self {
            alloc: alloc.clone(),
            periods,
            cells,
        })
    }

    /// Builds summaries directly from per-cell statistics (cluster-major,
    /// then period).
    pub fn from_parts(
        alloc: &AllocationMatrix,
        periods: PeriodRange,
        cells: Vec<CellStat<F>>,
    ) -> Result<Self> {
        if periods.last() > alloc.periods() {
            return Err(Error::Argument(format!(
                "period range ends at {} but the design has {} periods",
                periods.last(),
                alloc.periods()
            )));
        }
        let expect = alloc.clusters() * periods.len();
        if cells.len() != expect {
            return Err(Error::Data(format!(
                "{} cell statistics supplied, expected {expect}",
                cells.len()
            )));
        }
        for cell in &cells {
            if cell.count == 0 {
                return Err(Error::Data("cell with zero count".into()));
            }
            if !cell.mean.is_finite() || !cell.sum_sq.is_finite() || cell.sum_sq < F::zero() {
                return Err(Error::Data("cell with invalid mean or sum of squares".into()));
            }
            if cell.count == 1 && cell.sum_sq != F::zero() {
                return Err(Error::Data(
                    "singleton cell must have zero sum of squares".into(),
                ));
            }
        }
        Ok(Self {
            alloc: alloc.clone(),
            periods,
            cells,
        })
    }

    pub fn alloc(&self) -> &AllocationMatrix {
        &self.alloc
    }

    pub fn periods(&self) -> PeriodRange {
        self.periods
    }

    pub fn cell(&self, cluster: usize, period: usize) -> &CellStat<F> {
        debug_assert!(self.periods.contains(period));
        &self.cells[cluster * self.periods.len() + (period - self.periods.first())]
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    /// Total number of individuals.
    pub fn total_count(&self) -> usize {
        self.cells.iter().map(|c| c.count).sum()
    }

    /// Sum of within-cell sums of squares.
    pub fn pooled_within_sum_sq(&self) -> F {
        self.cells.iter().map(|c| c.sum_sq).sum()
    }

    /// Grand mean over all individuals.
    pub fn grand_mean(&self) -> F {
        let mut weighted = F::zero();
        let mut total = F::zero();
        for c in &self.cells {
            let m = F::of(c.count);
            weighted += m * c.mean;
            total += m;
        }
        weighted / total
    }

    pub fn iter_cells(&self) -> impl Iterator<Item = (usize, usize, &CellStat<F>)> {
        let len = self.periods.len();
        let first = self.periods.first();
        self.cells
            .iter()
            .enumerate()
            .map(move |(idx, cell)| (idx / len, first + idx % len, cell))
    }

    /// Merges two summaries over the same allocation matrix. Overlapping
    /// cells are pooled; the union of the period ranges must be contiguous.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.alloc != other.alloc {
            return Err(Error::Data(
                "cannot merge summaries from different allocation matrices".into(),
            ));
        }
        let first = self.periods.first().min(other.periods.first());
        let last = self.periods.last().max(other.periods.last());
        for j in first..=last {
            if !self.periods.contains(j) && !other.periods.contains(j) {
                return Err(Error::Data(format!(
                    "merged period ranges leave a gap at period {j}"
                )));
            }
        }
        let union = PeriodRange::new(first, last)?;
        let mut cells = Vec::with_capacity(self.alloc.clusters() * union.len());
        for cluster in 0..self.alloc.clusters() {
            for period in union.iter() {
                let a = self.periods.contains(period).then(|| self.cell(cluster, period));
                let b = other
                    .periods
                    .contains(period)
                    .then(|| other.cell(cluster, period));
                let merged = match (a, b) {
                    (Some(a), Some(b)) => pool_cells(a, b),
                    (Some(a), None) => *a,
                    (None, Some(b)) => *b,
                    (None, None) => unreachable!("gap checked above"),
                };
                cells.push(merged);
            }
        }
        Ok(Self {
            alloc: self.alloc.clone(),
            periods: union,
            cells,
        })
    }
}

/// Pools two summaries of the same cell (parallel Welford combination).
fn pool_cells<F: Real>(a: &CellStat<F>, b: &CellStat<F>) -> CellStat<F> {
    let ma = F::of(a.count);
    let mb = F::of(b.count);
    let count = a.count + b.count;
    let total = ma + mb;
    let delta = b.mean - a.mean;
    let mean = a.mean + delta * mb / total;
    let sum_sq = a.sum_sq + b.sum_sq + delta * delta * ma * mb / total;
    CellStat {
        count,
        mean,
        sum_sq,
    }
}

/// Which fixed effects enter the model, following the interim case analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub period_effects: bool,
    pub treatment_effect: bool,
}

impl ModelSpec {
    /// The full analysis model: period effects and the treatment effect.
    pub fn full() -> Self {
        Self {
            period_effects: true,
            treatment_effect: true,
        }
    }
}

/// Chooses the interim model: the treatment term enters once any cluster has
/// been treated (`sum(X^(t)) > 0`), period effects once `t > 1`.
pub fn select_interim_model(x_t: &AllocationMatrix, t: usize) -> ModelSpec {
    ModelSpec {
        period_effects: t > 1,
        treatment_effect: x_t.treated_cells_through(t) > 0,
    }
}

/// REML fit: variance components, GLS fixed effects, and the model-based
/// variance of the treatment-effect estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<F> {
    pub variance: VarianceComponents<F>,
    /// Fixed-effect estimates in `(mu, pi_..., tau)` order for the fitted
    /// columns.
    pub beta_hat: Vec<F>,
    /// Treatment-effect estimate, when the treatment term is in the model.
    pub tau_hat: Option<F>,
    /// Model-based `Var(tau_hat)`, element `[tau, tau]` of the inverse GLS
    /// cross-product at the REML estimates.
    pub var_tau_hat: Option<F>,
    pub reml_loglik: F,
    pub converged: bool,
    /// Set when the unconstrained optimum had a negative cluster variance
    /// and the fit was clamped to `sigma_c^2 = 0`.
    pub boundary: bool,
    /// Set when the data carry essentially no residual variance and the
    /// residual component was floored.
    pub degenerate: bool,
    pub iterations: usize,
}

// Column layout of the fitted fixed effects.
#[derive(Debug, Clone)]
pub(crate) struct FixedEffects {
    cols: Vec<Effect>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Effect {
    Intercept,
    Period(usize),
    Treatment,
}

impl FixedEffects {
    pub(crate) fn for_model(periods: PeriodRange, spec: ModelSpec) -> Self {
        let mut cols = vec![Effect::Intercept];
        if spec.period_effects {
            for j in periods.iter() {
                if j >= 2 {
                    cols.push(Effect::Period(j));
                }
            }
        }
        if spec.treatment_effect {
            cols.push(Effect::Treatment);
        }
        Self { cols }
    }

    pub(crate) fn len(&self) -> usize {
        self.cols.len()
    }

    pub(crate) fn tau_index(&self) -> Option<usize> {
        self.cols.iter().position(|c| *c == Effect::Treatment)
    }

    pub(crate) fn name(&self, idx: usize) -> String {
        match self.cols[idx] {
            Effect::Intercept => "mu".into(),
            Effect::Period(j) => format!("pi_{j}"),
            Effect::Treatment => "tau".into(),
        }
    }

    pub(crate) fn fill_row<F: Real>(&self, treated: bool, period: usize, out: &mut [F]) {
        for (slot, col) in out.iter_mut().zip(&self.cols) {
            *slot = match col {
                Effect::Intercept => F::one(),
                Effect::Period(j) => {
                    if *j == period {
                        F::one()
                    } else {
                        F::zero()
                    }
                }
                Effect::Treatment => {
                    if treated {
                        F::one()
                    } else {
                        F::zero()
                    }
                }
            };
        }
    }
}

// Per-cluster data with design rows baked in; rows do not depend on the
// variance components, so repeated criterion evaluations reuse them.
struct Prepared<F> {
    clusters: Vec<PreparedCluster<F>>,
    n_total: usize,
    p: usize,
}

struct PreparedCluster<F> {
    rows: Vec<F>, // L x p, row-major
    counts: Vec<F>,
    means: Vec<F>,
    sum_sq: F,
    total: F,
}

impl<F: Real> Prepared<F> {
    fn new(cells: &CellSummaries<F>, fx: &FixedEffects) -> Self {
        let p = fx.len();
        let len = cells.periods().len();
        let mut clusters = Vec::with_capacity(cells.alloc().clusters());
        for i in 0..cells.alloc().clusters() {
            let mut rows = vec![F::zero(); len * p];
            let mut counts = Vec::with_capacity(len);
            let mut means = Vec::with_capacity(len);
            let mut sum_sq = F::zero();
            let mut total = F::zero();
            for (offset, j) in cells.periods().iter().enumerate() {
                let stat = cells.cell(i, j);
                fx.fill_row(
                    cells.alloc().is_treated(i, j),
                    j,
                    &mut rows[offset * p..(offset + 1) * p],
                );
                counts.push(F::of(stat.count));
                means.push(stat.mean);
                sum_sq += stat.sum_sq;
                total += F::of(stat.count);
            }
            clusters.push(PreparedCluster {
                rows,
                counts,
                means,
                sum_sq,
                total,
            });
        }
        Self {
            clusters,
            n_total: cells.total_count(),
            p,
        }
    }
}

struct NormalEq<F> {
    a: SymMatrix<F>,
    b: Vec<F>,
    yy: F,
    log_det_sigma: F,
}

fn normal_equations<F: Real>(prep: &Prepared<F>, vc: &VarianceComponents<F>) -> NormalEq<F> {
    let p = prep.p;
    let se = vc.sigma_e_sq();
    let sc = vc.sigma_c_sq();
    let mut a = SymMatrix::zeros(p);
    let mut b = vec![F::zero(); p];
    let mut yy = F::zero();
    let mut log_det_sigma = F::zero();
    let mut u = vec![F::zero(); p];
    for cl in &prep.clusters {
        let m_total = cl.total;
        let lambda = sc * se / (se + m_total * sc);
        u.iter_mut().for_each(|v| *v = F::zero());
        let mut h = F::zero();
        for (idx, row) in cl.rows.chunks_exact(p).enumerate() {
            let w = cl.counts[idx] / se;
            let ybar = cl.means[idx];
            a.add_outer(row, w);
            for (k, &r) in row.iter().enumerate() {
                b[k] += w * ybar * r;
                u[k] += w * r;
            }
            h += w * ybar;
            yy += w * ybar * ybar;
        }
        if lambda > F::zero() {
            a.add_outer(&u, -lambda);
            for k in 0..p {
                b[k] -= lambda * h * u[k];
            }
            yy -= lambda * h * h;
        }
        yy += cl.sum_sq / se;
        log_det_sigma += (m_total - F::one()) * se.ln() + (se + m_total * sc).ln();
    }
    NormalEq {
        a,
        b,
        yy,
        log_det_sigma,
    }
}

fn solve_normal_equations<F: Real>(
    neq: &NormalEq<F>,
    fx: &FixedEffects,
) -> Result<(Vec<F>, crate::linalg::Cholesky<F>)> {
    match neq.a.cholesky() {
        Ok(chol) => {
            let beta = chol.solve(&neq.b);
            Ok((beta, chol))
        }
        Err(pivot) => Err(Error::NotIdentifiable(fx.name(pivot))),
    }
}

/// REML log-likelihood (including constants) of the individual-level model
/// evaluated through cell summaries.
pub fn reml_criterion<F: Real>(
    cells: &CellSummaries<F>,
    vc: &VarianceComponents<F>,
    spec: ModelSpec,
) -> Result<F> {
    let fx = FixedEffects::for_model(cells.periods(), spec);
    let prep = Prepared::new(cells, &fx);
    criterion_prepared(&prep, vc, &fx)
}

fn criterion_prepared<F: Real>(
    prep: &Prepared<F>,
    vc: &VarianceComponents<F>,
    fx: &FixedEffects,
) -> Result<F> {
    let neq = normal_equations(prep, vc);
    let (beta, chol) = solve_normal_equations(&neq, fx)?;
    let mut quad = neq.yy;
    for (bk, xk) in neq.b.iter().zip(&beta) {
        quad -= *bk * *xk;
    }
    let resid_dof = F::of(prep.n_total - prep.p);
    let two_pi = F::c(core::f64::consts::TAU);
    let half = F::c(0.5);
    Ok(-half * (resid_dof * two_pi.ln() + neq.log_det_sigma + chol.log_det() + quad))
}

/// Analytic gradient of [`reml_criterion`] with respect to
/// `(sigma_c^2, sigma_e^2)`.
pub fn reml_gradient<F: Real>(
    cells: &CellSummaries<F>,
    vc: &VarianceComponents<F>,
    spec: ModelSpec,
) -> Result<(F, F)> {
    let fx = FixedEffects::for_model(cells.periods(), spec);
    let prep = Prepared::new(cells, &fx);
    gradient_prepared(&prep, vc, &fx)
}

fn gradient_prepared<F: Real>(
    prep: &Prepared<F>,
    vc: &VarianceComponents<F>,
    fx: &FixedEffects,
) -> Result<(F, F)> {
    let neq = normal_equations(prep, vc);
    let (beta, chol) = solve_normal_equations(&neq, fx)?;
    let a_inv = chol.inverse();
    let p = prep.p;
    let se = vc.sigma_e_sq();
    let sc = vc.sigma_c_sq();
    let one = F::one();
    let two = F::c(2.0);

    let mut tr1_c = F::zero();
    let mut tr2_c = F::zero();
    let mut quad_c = F::zero();
    let mut tr1_e = F::zero();
    let mut tr2_e = F::zero();
    let mut quad_e = F::zero();

    let mut u = vec![F::zero(); p];
    for cl in &prep.clusters {
        let m_total = cl.total;
        let denom = se + m_total * sc;
        let kappa = se / denom;
        let c_i = sc / denom;
        u.iter_mut().for_each(|v| *v = F::zero());
        let mut g_i = F::zero();
        let mut resid_wsq = F::zero();
        let mut row_quads = F::zero();
        for (idx, row) in cl.rows.chunks_exact(p).enumerate() {
            let w = cl.counts[idx] / se;
            for (k, &r) in row.iter().enumerate() {
                u[k] += w * r;
            }
            let mut fitted = F::zero();
            for (k, &r) in row.iter().enumerate() {
                fitted += r * beta[k];
            }
            let resid = cl.means[idx] - fitted;
            g_i += w * resid;
            resid_wsq += w * resid * resid;
            row_quads += w * a_inv.quad_form(row, row);
        }
        let u_quad = a_inv.quad_form(&u, &u);

        tr1_c += m_total / denom;
        tr2_c += kappa * kappa * u_quad;
        quad_c += (kappa * g_i) * (kappa * g_i);

        tr1_e += (m_total - one) / se + one / denom;
        tr2_e += row_quads / se - c_i * (two - c_i * m_total) * u_quad;
        quad_e += cl.sum_sq / (se * se) + resid_wsq / se - c_i * (two - c_i * m_total) * g_i * g_i;
    }
    let half = F::c(0.5);
    Ok((
        -half * (tr1_c - tr2_c - quad_c),
        -half * (tr1_e - tr2_e - quad_e),
    ))
}

/// GLS fixed effects and their covariance at known variance components.
pub fn gls_fixed_effects<F: Real>(
    cells: &CellSummaries<F>,
    vc: &VarianceComponents<F>,
    spec: ModelSpec,
) -> Result<(Vec<F>, SymMatrix<F>)> {
    let fx = FixedEffects::for_model(cells.periods(), spec);
    let prep = Prepared::new(cells, &fx);
    let neq = normal_equations(&prep, vc);
    let (beta, chol) = solve_normal_equations(&neq, &fx)?;
    Ok((beta, chol.inverse()))
}

// Profile quantities at a fixed variance ratio gamma = sigma_c^2 / sigma_e^2.
#[derive(Clone, Copy)]
struct ProfilePoint<F> {
    gamma: F,
    sigma_e_sq: F,
    loglik: F,
    grad_c: F,
}

const MAX_ITERATIONS: usize = 200;

fn profile_eval<F: Real>(
    prep: &Prepared<F>,
    fx: &FixedEffects,
    gamma: F,
) -> Result<Option<ProfilePoint<F>>> {
    let unit = VarianceComponents::new(gamma, F::one())?;
    let neq = normal_equations(prep, &unit);
    let (beta, chol) = solve_normal_equations(&neq, fx)?;
    let mut quad = neq.yy;
    for (bk, xk) in neq.b.iter().zip(&beta) {
        quad -= *bk * *xk;
    }
    let resid_dof = F::of(prep.n_total - prep.p);
    let scale_floor = F::c(1e-28) * (F::one() + neq.yy.abs());
    if !(quad > scale_floor) {
        return Ok(None); // essentially zero residual variance
    }
    let sigma_e_sq = quad / resid_dof;
    let two_pi = F::c(core::f64::consts::TAU);
    let half = F::c(0.5);
    let loglik = -half
        * (resid_dof * (two_pi.ln() + F::one() + sigma_e_sq.ln())
            + neq.log_det_sigma
            + chol.log_det());
    let vc = VarianceComponents::new(gamma * sigma_e_sq, sigma_e_sq)?;
    let (grad_c, _) = gradient_prepared(prep, &vc, fx)?;
    Ok(Some(ProfilePoint {
        gamma,
        sigma_e_sq,
        loglik,
        grad_c,
    }))
}

/// Maximizes the REML criterion over `sigma_e^2 > 0`, `sigma_c^2 >= 0`.
///
/// The residual variance is profiled out in closed form at each variance
/// ratio, leaving a one-dimensional root-find on the cluster-variance
/// gradient with a bisection safeguard. A negative gradient at ratio zero
/// means the unconstrained optimum has a negative cluster variance; the fit
/// is then clamped to the boundary and flagged.
pub fn reml_fit<F: Real>(cells: &CellSummaries<F>, spec: ModelSpec) -> Result<FitResult<F>> {
    let fx = FixedEffects::for_model(cells.periods(), spec);
    let p = fx.len();
    let n_total = cells.total_count();
    if cells.alloc().clusters() < 2 {
        return Err(Error::Data("need at least 2 clusters".into()));
    }
    if n_total <= p + 2 {
        return Err(Error::Data(format!(
            "total count {n_total} too small for {p} fixed effects"
        )));
    }
    let prep = Prepared::new(cells, &fx);

    let mut iterations = 0usize;
    let mut eval = |gamma: F| -> Result<Option<ProfilePoint<F>>> {
        iterations += 1;
        profile_eval(&prep, &fx, gamma)
    };

    let at_zero = eval(F::zero())?;
    let Some(at_zero) = at_zero else {
        return degenerate_fit(&prep, &fx, cells, spec);
    };

    let point = if at_zero.grad_c <= F::zero() {
        // Unconstrained optimum has sigma_c^2 <= 0: clamp to the boundary.
        at_zero
    } else {
        let g_tol = (F::c(1e-9) * (F::one() + at_zero.grad_c.abs())).min(F::c(1e-7));

        // Bracket: expand until the gradient turns negative.
        let mut lo = at_zero;
        let mut hi_gamma = moment_ratio_start(cells).max(F::c(1e-4));
        let mut bracketed = None;
        for _ in 0..80 {
            match eval(hi_gamma)? {
                Some(pt) if pt.grad_c < F::zero() => {
                    bracketed = Some(pt);
                    break;
                }
                Some(pt) => lo = pt,
                None => return degenerate_fit(&prep, &fx, cells, spec),
            }
            hi_gamma = hi_gamma * F::c(4.0);
            if hi_gamma > F::c(1e12) {
                break;
            }
        }
        match bracketed {
            None => {
                // Gradient never turned negative: report the last point,
                // flagged as non-converged.
                let pt = lo;
                return finish_fit(&prep, &fx, cells, spec, pt, iterations, false, false);
            }
            Some(mut hi) => {
                // Illinois-damped regula falsi on the profiled gradient.
                let mut converged = false;
                let mut lo_weight = F::one();
                let mut hi_weight = F::one();
                let mut best = if lo.loglik > hi.loglik { lo.gamma } else { hi.gamma };
                for _ in 0..MAX_ITERATIONS {
                    let glo = lo.grad_c * lo_weight;
                    let ghi = hi.grad_c * hi_weight;
                    let mut cand = hi.gamma - ghi * (hi.gamma - lo.gamma) / (ghi - glo);
                    let width = hi.gamma - lo.gamma;
                    if !cand.is_finite() || cand <= lo.gamma || cand >= hi.gamma {
                        cand = (lo.gamma + hi.gamma) * F::c(0.5);
                    }
                    let Some(pt) = eval(cand)? else {
                        return degenerate_fit(&prep, &fx, cells, spec);
                    };
                    best = pt.gamma;
                    if pt.grad_c.abs() <= g_tol
                        || width <= F::c(1e-13) * (F::one() + pt.gamma)
                    {
                        converged = true;
                        lo = pt;
                        break;
                    }
                    if pt.grad_c > F::zero() {
                        lo = pt;
                        lo_weight = F::one();
                        hi_weight = hi_weight * F::c(0.5);
                    } else {
                        hi = pt;
                        hi_weight = F::one();
                        lo_weight = lo_weight * F::c(0.5);
                    }
                }
                if !converged {
                    let Some(pt) = eval(best)? else {
                        return degenerate_fit(&prep, &fx, cells, spec);
                    };
                    return finish_fit(&prep, &fx, cells, spec, pt, iterations, false, false);
                }
                lo
            }
        }
    };

    let boundary = point.gamma == F::zero() && at_zero.grad_c < F::zero();
    finish_fit(&prep, &fx, cells, spec, point, iterations, true, boundary)
}

fn finish_fit<F: Real>(
    prep: &Prepared<F>,
    fx: &FixedEffects,
    cells: &CellSummaries<F>,
    spec: ModelSpec,
    point: ProfilePoint<F>,
    iterations: usize,
    converged: bool,
    boundary: bool,
) -> Result<FitResult<F>> {
    let vc = VarianceComponents::new(point.gamma * point.sigma_e_sq, point.sigma_e_sq)?;
    let neq = normal_equations(prep, &vc);
    let (beta, chol) = solve_normal_equations(&neq, fx)?;
    let cov = chol.inverse();
    let tau_idx = fx.tau_index();
    let tau_hat = tau_idx.map(|k| beta[k]);
    let var_tau_hat = tau_idx.map(|k| cov.get(k, k));
    let loglik = reml_criterion(cells, &vc, spec)?;
    Ok(FitResult {
        variance: vc,
        beta_hat: beta,
        tau_hat,
        var_tau_hat,
        reml_loglik: loglik,
        converged,
        boundary,
        degenerate: false,
        iterations,
    })
}

// Zero-residual data: floor the residual variance and flag the fit.
fn degenerate_fit<F: Real>(
    prep: &Prepared<F>,
    fx: &FixedEffects,
    _cells: &CellSummaries<F>,
    _spec: ModelSpec,
) -> Result<FitResult<F>> {
    let floor = F::c(1e-30);
    let vc = VarianceComponents::new(F::zero(), floor)?;
    let neq = normal_equations(prep, &vc);
    let (beta, _) = solve_normal_equations(&neq, fx)?;
    let tau_hat = fx.tau_index().map(|k| beta[k]);
    Ok(FitResult {
        variance: vc,
        beta_hat: beta,
        tau_hat,
        var_tau_hat: None,
        reml_loglik: F::infinity(),
        converged: false,
        boundary: true,
        degenerate: true,
        iterations: 0,
    })
}

// Method-of-moments ratio used to seed the bracket expansion (the blinded
// estimator pair with tau* = 0).
fn moment_ratio_start<F: Real>(cells: &CellSummaries<F>) -> F {
    match crate::ssre::one_sample_variance_stats(cells) {
        Ok((s1, s_ct)) if s_ct > F::zero() => {
            let n = F::of(cells.total_count());
            let c = F::of(cells.alloc().clusters());
            let f = (n - F::one()) / n * c / (c - F::one()) * (s1 - s_ct);
            (f.max(F::zero()) / s_ct).max(F::c(1e-4)).min(F::c(1e4))
        }
        _ => F::one(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::RngStream;

    fn alloc_2x2() -> AllocationMatrix {
        AllocationMatrix::standard(2, 2, &[0, 1]).unwrap()
    }

    fn range(a: usize, b: usize) -> PeriodRange {
        PeriodRange::new(a, b).unwrap()
    }

    #[test]
    fn summarize_constant_data() {
        let alloc = alloc_2x2();
        let mut obs = Vec::new();
        for cluster in 0..2 {
            for period in 1..=2 {
                for _ in 0..3 {
                    obs.push((cluster, period, 7.0));
                }
            }
        }
        let cells = CellSummaries::from_observations(&alloc, range(1, 2), &obs).unwrap();
        for (_, _, cell) in cells.iter_cells() {
            assert_eq!(cell.mean, 7.0);
            assert_eq!(cell.sum_sq, 0.0);
            assert_eq!(cell.count, 3);
        }
    }

    #[test]
    fn summarize_two_point_cell() {
        let alloc = alloc_2x2();
        let obs = vec![
            (0, 1, 1.0),
            (0, 1, 3.0),
            (0, 2, 0.0),
            (1, 1, 0.0),
            (1, 2, 0.0),
        ];
        let cells = CellSummaries::from_observations(&alloc, range(1, 2), &obs).unwrap();
        let c = cells.cell(0, 1);
        assert_eq!(c.mean, 2.0);
        assert_eq!(c.sum_sq, 2.0);
    }

    #[test]
    fn summarize_rejects_out_of_design_and_missing_cells() {
        let alloc = alloc_2x2();
        let bad = vec![(2, 1, 0.0)];
        assert!(CellSummaries::from_observations(&alloc, range(1, 2), &bad).is_err());
        let bad = vec![(0, 3, 0.0)];
        assert!(CellSummaries::from_observations(&alloc, range(1, 2), &bad).is_err());
        let missing = vec![(0, 1, 0.0), (0, 2, 0.0), (1, 1, 0.0)];
        assert!(CellSummaries::from_observations(&alloc, range(1, 2), &missing).is_err());
    }

    #[test]
    fn merge_pools_split_observation_streams() {
        let alloc = alloc_2x2();
        let mut stream = RngStream::new(3, 1);
        let mut all: Vec<(usize, usize, f64)> = Vec::new();
        for cluster in 0..2 {
            for period in 1..=2 {
                for _ in 0..9 {
                    all.push((cluster, period, stream.normal(1.0, 4.0).unwrap()));
                }
            }
        }
        // split so each half covers every cell
        let first: Vec<_> = all.iter().copied().filter(|o| o.2 < 1.0).collect();
        let second: Vec<_> = all.iter().copied().filter(|o| o.2 >= 1.0).collect();
        if first.len() < 4 || second.len() < 4 {
            return; // extraordinarily unlikely with this seed
        }
        let whole = CellSummaries::from_observations(&alloc, range(1, 2), &all).unwrap();
        let a = CellSummaries::from_observations(&alloc, range(1, 2), &first);
        let b = CellSummaries::from_observations(&alloc, range(1, 2), &second);
        let (Ok(a), Ok(b)) = (a, b) else { return };
        let merged = a.merge(&b).unwrap();
        for ((_, _, x), (_, _, y)) in whole.iter_cells().zip(merged.iter_cells()) {
            assert_eq!(x.count, y.count);
            assert!((x.mean - y.mean).abs() < 1e-12);
            assert!((x.sum_sq - y.sum_sq).abs() < 1e-10);
        }
    }

    #[test]
    fn merge_concatenates_disjoint_periods_and_rejects_gaps() {
        let alloc = AllocationMatrix::standard(2, 4, &[0, 1, 1, 0]).unwrap();
        let seg = |r: PeriodRange, n: usize| {
            let stats = vec![
                CellStat {
                    count: n,
                    mean: 1.0,
                    sum_sq: 2.0,
                };
                2 * r.len()
            ];
            CellSummaries::from_parts(&alloc, r, stats).unwrap()
        };
        let a = seg(range(1, 2), 5);
        let b = seg(range(3, 4), 7);
        let merged = a.merge(&b).unwrap();
        assert_eq!(merged.periods(), range(1, 4));
        assert_eq!(merged.total_count(), 2 * 2 * 5 + 2 * 2 * 7);
        let c = seg(range(4, 4), 7);
        assert!(seg(range(1, 2), 5).merge(&c).is_err());
    }

    #[test]
    fn interim_model_selection_cases() {
        let x = AllocationMatrix::standard(4, 5, &[0, 1, 1, 1, 1]).unwrap();
        let x3 = x.restrict(3).unwrap();
        assert_eq!(
            select_interim_model(&x3, 3),
            ModelSpec {
                period_effects: true,
                treatment_effect: true
            }
        );
        let x1 = x.restrict(1).unwrap();
        assert_eq!(
            select_interim_model(&x1, 1),
            ModelSpec {
                period_effects: false,
                treatment_effect: false
            }
        );
        let zero = AllocationMatrix::standard(3, 2, &[0, 0]).unwrap();
        assert_eq!(
            select_interim_model(&zero.restrict(2).unwrap(), 2),
            ModelSpec {
                period_effects: true,
                treatment_effect: false
            }
        );
    }

    // Balanced one-way layout: REML equals the classical ANOVA closed form.
    fn one_way_oracle(cells: &CellSummaries<f64>) -> (f64, f64) {
        let c = cells.alloc().clusters();
        let group: Vec<(f64, f64)> = (0..c)
            .map(|i| {
                let mut sum = 0.0;
                let mut count = 0.0;
                for j in cells.periods().iter() {
                    let cell = cells.cell(i, j);
                    sum += cell.mean * cell.count as f64;
                    count += cell.count as f64;
                }
                (sum / count, count)
            })
            .collect();
        let g = group[0].1;
        let grand = group.iter().map(|(m, n)| m * n).sum::<f64>() / (g * c as f64);
        // within-group SS = within-cell SS + between-cell-within-group SS
        let mut ssw = cells.pooled_within_sum_sq();
        for i in 0..c {
            for j in cells.periods().iter() {
                let cell = cells.cell(i, j);
                ssw += cell.count as f64 * (cell.mean - group[i].0).powi(2);
            }
        }
        let mse = ssw / (c as f64 * (g - 1.0));
        let msb = g * group.iter().map(|(m, _)| (m - grand).powi(2)).sum::<f64>() / (c as f64 - 1.0);
        let sc2 = ((msb - mse) / g).max(0.0);
        (sc2, mse)
    }

    #[test]
    fn reml_matches_one_way_anova_closed_form() {
        let alloc = AllocationMatrix::standard(5, 3, &[0, 0, 0]).unwrap();
        let spec = ModelSpec {
            period_effects: false,
            treatment_effect: false,
        };
        for seed in [1u64, 2, 3, 9] {
            let mut stream = RngStream::new(seed, 1);
            let mut obs = Vec::new();
            for cluster in 0..5 {
                let ci = stream.normal(0.0, 0.4).unwrap();
                for period in 1..=3 {
                    for _ in 0..4 {
                        obs.push((cluster, period, stream.normal(2.0 + ci, 1.3).unwrap()));
                    }
                }
            }
            let cells =
                CellSummaries::from_observations(&alloc, range(1, 3), &obs).unwrap();
            let fit = reml_fit(&cells, spec).unwrap();
            let (sc2, se2) = one_way_oracle(&cells);
            assert!(fit.converged);
            assert!(
                (fit.variance.sigma_c_sq() - sc2).abs() < 1e-7 * (1.0 + sc2),
                "seed {seed}: {} vs {sc2}",
                fit.variance.sigma_c_sq()
            );
            assert!(
                (fit.variance.sigma_e_sq() - se2).abs() < 1e-7 * (1.0 + se2),
                "seed {seed}: {} vs {se2}",
                fit.variance.sigma_e_sq()
            );
            assert_eq!(fit.boundary, sc2 == 0.0);
        }
    }

    #[test]
    fn criterion_translation_invariant_with_intercept() {
        let alloc = AllocationMatrix::standard(3, 3, &[0, 1, 1]).unwrap();
        let mut stream = RngStream::new(11, 1);
        let mut obs = Vec::new();
        for cluster in 0..3 {
            for period in 1..=3 {
                for _ in 0..3 {
                    obs.push((cluster, period, stream.normal(0.0, 1.0).unwrap()));
                }
            }
        }
        let cells = CellSummaries::from_observations(&alloc, range(1, 3), &obs).unwrap();
        let shifted: Vec<_> = obs.iter().map(|&(c, p, v)| (c, p, v + 41.5)).collect();
        let cells2 = CellSummaries::from_observations(&alloc, range(1, 3), &shifted).unwrap();
        let vc = VarianceComponents::new(0.3, 0.9).unwrap();
        let a: f64 = reml_criterion(&cells, &vc, ModelSpec::full()).unwrap();
        let b: f64 = reml_criterion(&cells2, &vc, ModelSpec::full()).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn criterion_rejects_rank_deficient_design() {
        // All clusters treated from period 1: tau is confounded with mu.
        let alloc = AllocationMatrix::new(&[vec![1, 1], vec![1, 1]]).unwrap();
        let stats = vec![
            CellStat {
                count: 3,
                mean: 1.0,
                sum_sq: 1.0
            };
            4
        ];
        let cells = CellSummaries::from_parts(&alloc, range(1, 2), stats).unwrap();
        let vc = VarianceComponents::new(0.1, 1.0).unwrap();
        let err = reml_criterion(&cells, &vc, ModelSpec::full()).unwrap_err();
        assert!(matches!(err, Error::NotIdentifiable(name) if name == "tau"));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let alloc = AllocationMatrix::standard(3, 3, &[0, 1, 1]).unwrap();
        let mut stream = RngStream::new(17, 1);
        let mut obs = Vec::new();
        for cluster in 0..3 {
            let ci = stream.normal(0.0, 0.2).unwrap();
            for period in 1..=3 {
                for _ in 0..4 {
                    obs.push((
                        cluster,
                        period,
                        stream
                            .normal(ci + 0.3 * alloc.entry(cluster, period) as f64, 0.8)
                            .unwrap(),
                    ));
                }
            }
        }
        let cells = CellSummaries::from_observations(&alloc, range(1, 3), &obs).unwrap();
        let spec = ModelSpec::full();
        let mut stream = RngStream::new(18, 1);
        for _ in 0..20 {
            let sc: f64 = 0.05 + 0.5 * stream.uniform::<f64>();
            let se: f64 = 0.3 + stream.uniform::<f64>();
            let vc = VarianceComponents::new(sc, se).unwrap();
            let (gc, ge): (f64, f64) = reml_gradient(&cells, &vc, spec).unwrap();
            let h = 1e-6;
            let fc = |s: f64| {
                reml_criterion(&cells, &VarianceComponents::new(s, se).unwrap(), spec).unwrap()
            };
            let fe = |s: f64| {
                reml_criterion(&cells, &VarianceComponents::new(sc, s).unwrap(), spec).unwrap()
            };
            let gc_fd = (fc(sc + h) - fc(sc - h)) / (2.0 * h);
            let ge_fd = (fe(se + h) - fe(se - h)) / (2.0 * h);
            assert!(
                (gc - gc_fd).abs() <= 1e-5 * (1.0 + gc_fd.abs()),
                "sc: {gc} vs {gc_fd}"
            );
            assert!(
                (ge - ge_fd).abs() <= 1e-5 * (1.0 + ge_fd.abs()),
                "se: {ge} vs {ge_fd}"
            );
        }
    }

    #[test]
    fn gradient_vanishes_at_interior_optimum() {
        let alloc = AllocationMatrix::standard(4, 3, &[0, 2, 1]).unwrap();
        let mut stream = RngStream::new(23, 1);
        let mut obs = Vec::new();
        for cluster in 0..4 {
            let ci = stream.normal(0.0, 0.5).unwrap();
            for period in 1..=3 {
                for _ in 0..6 {
                    obs.push((cluster, period, stream.normal(ci, 1.0).unwrap()));
                }
            }
        }
        let cells = CellSummaries::from_observations(&alloc, range(1, 3), &obs).unwrap();
        let fit = reml_fit(&cells, ModelSpec::full()).unwrap();
        assert!(fit.converged);
        if !fit.boundary {
            let (gc, ge): (f64, f64) =
                reml_gradient(&cells, &fit.variance, ModelSpec::full()).unwrap();
            assert!(gc.abs() < 1e-6, "grad_c = {gc}");
            assert!(ge.abs() < 1e-6, "grad_e = {ge}");
        }
    }

    #[test]
    fn fit_invariant_to_cluster_relabeling() {
        let alloc = AllocationMatrix::standard(3, 3, &[0, 1, 1]).unwrap();
        let mut stream = RngStream::new(31, 1);
        let mut obs = Vec::new();
        for cluster in 0..3 {
            let ci = stream.normal(0.0, 0.3).unwrap();
            for period in 1..=3 {
                for _ in 0..5 {
                    obs.push((
                        cluster,
                        period,
                        stream
                            .normal(ci + 0.2 * alloc.entry(cluster, period) as f64, 0.7)
                            .unwrap(),
                    ));
                }
            }
        }
        let cells = CellSummaries::from_observations(&alloc, range(1, 3), &obs).unwrap();
        let fit = reml_fit(&cells, ModelSpec::full()).unwrap();

        // Swap clusters 0 and 1 in both the data and the allocation rows.
        let rows: Vec<Vec<u8>> = [1usize, 0, 2]
            .iter()
            .map(|&i| (1..=3).map(|j| alloc.entry(i, j)).collect())
            .collect();
        let alloc2 = AllocationMatrix::new_unrestricted(&rows).unwrap();
        let relabel = |c: usize| match c {
            0 => 1,
            1 => 0,
            other => other,
        };
        let obs2: Vec<_> = obs.iter().map(|&(c, p, v)| (relabel(c), p, v)).collect();
        let cells2 = CellSummaries::from_observations(&alloc2, range(1, 3), &obs2).unwrap();
        let fit2 = reml_fit(&cells2, ModelSpec::full()).unwrap();
        assert!((fit.variance.sigma_c_sq() - fit2.variance.sigma_c_sq()).abs() < 1e-10);
        assert!((fit.variance.sigma_e_sq() - fit2.variance.sigma_e_sq()).abs() < 1e-10);
        assert!((fit.tau_hat.unwrap() - fit2.tau_hat.unwrap()).abs() < 1e-10);
    }

    #[test]
    fn fit_scales_with_the_data() {
        let alloc = AllocationMatrix::standard(3, 3, &[0, 1, 1]).unwrap();
        let mut stream = RngStream::new(37, 1);
        let mut obs = Vec::new();
        for cluster in 0..3 {
            let ci = stream.normal(0.0, 0.4).unwrap();
            for period in 1..=3 {
                for _ in 0..5 {
                    obs.push((
                        cluster,
                        period,
                        stream
                            .normal(ci + 0.3 * alloc.entry(cluster, period) as f64, 1.1)
                            .unwrap(),
                    ));
                }
            }
        }
        let scale = 2.5f64;
        let scaled: Vec<_> = obs.iter().map(|&(c, p, v)| (c, p, v * scale)).collect();
        let cells = CellSummaries::from_observations(&alloc, range(1, 3), &obs).unwrap();
        let cells2 = CellSummaries::from_observations(&alloc, range(1, 3), &scaled).unwrap();
        let fit = reml_fit(&cells, ModelSpec::full()).unwrap();
        let fit2 = reml_fit(&cells2, ModelSpec::full()).unwrap();
        let s2 = scale * scale;
        assert!(
            (fit2.variance.sigma_c_sq() - s2 * fit.variance.sigma_c_sq()).abs()
                < 1e-8 * (1.0 + fit.variance.sigma_c_sq())
        );
        assert!(
            (fit2.variance.sigma_e_sq() - s2 * fit.variance.sigma_e_sq()).abs()
                < 1e-8 * (1.0 + fit.variance.sigma_e_sq())
        );
        assert!(
            (fit2.tau_hat.unwrap() - scale * fit.tau_hat.unwrap()).abs() < 1e-8,
            "{} vs {}",
            fit2.tau_hat.unwrap(),
            scale * fit.tau_hat.unwrap()
        );
        assert!(
            (fit2.var_tau_hat.unwrap() - s2 * fit.var_tau_hat.unwrap()).abs()
                < 1e-8 * (1.0 + fit.var_tau_hat.unwrap())
        );
    }

    #[test]
    fn constant_data_is_degenerate() {
        let alloc = alloc_2x2();
        let stats = vec![
            CellStat {
                count: 4,
                mean: 3.0,
                sum_sq: 0.0
            };
            4
        ];
        let cells = CellSummaries::from_parts(&alloc, range(1, 2), stats).unwrap();
        let fit = reml_fit(&cells, ModelSpec::full()).unwrap();
        assert!(fit.degenerate);
        assert!(!fit.converged);
        assert!(fit.boundary);
        assert_eq!(fit.variance.sigma_c_sq(), 0.0);
    }

    #[test]
    fn gls_with_zero_cluster_variance_is_weighted_ols() {
        let alloc = AllocationMatrix::standard(3, 2, &[0, 2]).unwrap();
        let mut stream = RngStream::new(41, 1);
        let stats: Vec<CellStat<f64>> = (0..6)
            .map(|k| CellStat {
                count: 2 + (k % 3),
                mean: stream.normal(0.0, 1.0).unwrap(),
                sum_sq: 0.5,
            })
            .collect();
        let cells = CellSummaries::from_parts(&alloc, range(1, 2), stats).unwrap();
        let vc = VarianceComponents::new(0.0, 0.8).unwrap();
        let (beta, _) = gls_fixed_effects(&cells, &vc, ModelSpec::full()).unwrap();

        // weighted OLS on cell means, weights m_ij, solved densely in-test
        let fx = FixedEffects::for_model(cells.periods(), ModelSpec::full());
        let p = fx.len();
        let mut xtx = vec![vec![0.0f64; p]; p];
        let mut xty = vec![0.0f64; p];
        let mut row = vec![0.0f64; p];
        for (i, j, cell) in cells.iter_cells() {
            fx.fill_row(cells.alloc().is_treated(i, j), j, &mut row);
            let w = cell.count as f64;
            for r in 0..p {
                for c in 0..p {
                    xtx[r][c] += w * row[r] * row[c];
                }
                xty[r] += w * row[r] * cell.mean;
            }
        }
        // Gauss elimination
        let mut aug: Vec<Vec<f64>> = xtx
            .iter()
            .zip(&xty)
            .map(|(r, y)| {
                let mut v = r.clone();
                v.push(*y);
                v
            })
            .collect();
        for col in 0..p {
            let piv = (col..p)
                .max_by(|&a, &b| aug[a][col].abs().partial_cmp(&aug[b][col].abs()).unwrap())
                .unwrap();
            aug.swap(col, piv);
            let d = aug[col][col];
            for c in col..=p {
                aug[col][c] /= d;
            }
            for r in 0..p {
                if r != col {
                    let f = aug[r][col];
                    for c in col..=p {
                        aug[r][c] -= f * aug[col][c];
                    }
                }
            }
        }
        for k in 0..p {
            assert!(
                (beta[k] - aug[k][p]).abs() < 1e-10,
                "beta[{k}]: {} vs {}",
                beta[k],
                aug[k][p]
            );
        }
    }

    #[test]
    fn gls_recovers_noiseless_fixed_effects_exactly() {
        let alloc = AllocationMatrix::standard(3, 3, &[0, 1, 1]).unwrap();
        let beta_true = [1.5, -0.4, 0.7, 0.25]; // mu, pi_2, pi_3, tau
        let stats: Vec<CellStat<f64>> = (0..3)
            .flat_map(|i| {
                (1..=3).map(move |j| (i, j))
            })
            .map(|(i, j)| {
                let mut mean = beta_true[0];
                if j >= 2 {
                    mean += beta_true[j - 1];
                }
                if alloc.is_treated(i, j) {
                    mean += beta_true[3];
                }
                CellStat {
                    count: 4,
                    mean,
                    sum_sq: 0.0,
                }
            })
            .collect();
        let cells = CellSummaries::from_parts(&alloc, range(1, 3), stats).unwrap();
        let vc = VarianceComponents::new(0.2, 0.6).unwrap();
        let (beta, _) = gls_fixed_effects(&cells, &vc, ModelSpec::full()).unwrap();
        for (got, want) in beta.iter().zip(&beta_true) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn fit_requires_enough_data() {
        let alloc = alloc_2x2();
        let stats = vec![
            CellStat {
                count: 1,
                mean: 0.5,
                sum_sq: 0.0
            };
            4
        ];
        let cells = CellSummaries::from_parts(&alloc, range(1, 2), stats).unwrap();
        // N = 4 <= p + 2 = 6
        assert!(reml_fit(&cells, ModelSpec::full()).is_err());
    }
}
