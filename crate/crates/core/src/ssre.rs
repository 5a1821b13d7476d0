//! The interim re-estimation step: blinded moment estimators, the unblinded
//! interim REML fit, and the resulting per-cell sample size decision.

use crate::design::AllocationMatrix;
use crate::model::{reml_fit, select_interim_model, CellSummaries};
use crate::power::{clamp_n, dof_split, required_n_reest, SplitDesign, TestSpec};
use crate::{Error, Real, Result};

/// How the interim variance estimates are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateMethod {
    Blinded,
    Unblinded,
}

/// Interim variance estimates together with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct InterimEstimate<F> {
    pub sigma_c_sq_hat: F,
    pub sigma_e_sq_hat: F,
    pub method: EstimateMethod,
    /// One-sample variance of all interim responses (blinded path only).
    pub s1_sq: Option<F>,
    /// Pooled within-cell variance (blinded path only).
    pub s_ct_sq: Option<F>,
    /// Set when the cluster-variance estimate was truncated at zero
    /// (blinded) or the REML fit sat on the boundary (unblinded).
    pub clamped_at_zero: bool,
    /// Unblinded path: REML iteration converged.
    pub converged: bool,
    /// The estimates carry no usable residual variance.
    pub degenerate: bool,
}

/// The full interim decision record.
#[derive(Debug, Clone, PartialEq)]
pub struct SsreDecision<F> {
    /// Unclamped search result.
    pub n_reest: usize,
    /// Clamped per-cell size for the remaining periods.
    pub n_final: usize,
    pub estimate: InterimEstimate<F>,
    /// Analysis degrees of freedom at `n_final`.
    pub dof_final: usize,
}

/// Re-estimation controls: estimation method, test specification, and the
/// clamp band.
#[derive(Debug, Clone, PartialEq)]
pub struct SsrePolicy<F> {
    pub method: SsreMethod<F>,
    pub test: TestSpec<F>,
    pub n_min: usize,
    pub n_max: usize,
}

/// Blinded re-estimation needs the assumed treatment effect `tau*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SsreMethod<F> {
    Blinded { tau_star: F },
    Unblinded,
}

/// One-sample and pooled within-cell variances `(S_1^2, S_Ct^2)` of the
/// interim data, computed from cell summaries via the within/between
/// decomposition. Blind-safe: treatment labels are never consulted.
pub fn one_sample_variance_stats<F: Real>(cells: &CellSummaries<F>) -> Result<(F, F)> {
    let n_total = cells.total_count();
    let n_cells = cells.n_cells();
    if n_total < 2 {
        return Err(Error::Data(
            "one-sample variance needs at least 2 observations".into(),
        ));
    }
    if n_total <= n_cells {
        return Err(Error::Data(
            "pooled within-cell variance needs at least one cell with 2 observations".into(),
        ));
    }
    let within = cells.pooled_within_sum_sq();
    let grand = cells.grand_mean();
    let mut between = F::zero();
    for (_, _, cell) in cells.iter_cells() {
        let dev = cell.mean - grand;
        between += F::of(cell.count) * dev * dev;
    }
    let s1 = (within + between) / F::of(n_total - 1);
    let s_ct = within / F::of(n_total - n_cells);
    Ok((s1, s_ct))
}

/// Blinded moment estimates: `sigma_e^2 = S_Ct^2` and
/// `sigma_c^2 = max{f(S_1^2, S_Ct^2, X^(t), n_init, tau*), 0}`, where `f`
/// inverts the one-sample variance expectation. The treatment assignment
/// enters only through `sum(X^(t))`, a design constant known before
/// unblinding.
pub fn blinded_estimate<F: Real>(
    cells: &CellSummaries<F>,
    x_t: &AllocationMatrix,
    n_init: usize,
    tau_star: F,
) -> Result<InterimEstimate<F>> {
    let clusters = cells.alloc().clusters();
    if clusters < 2 {
        return Err(Error::Data("blinded estimation needs at least 2 clusters".into()));
    }
    for (i, j, cell) in cells.iter_cells() {
        if cell.count != n_init {
            return Err(Error::Data(format!(
                "cell ({i}, {j}) has {} observations, expected n_init = {n_init}",
                cell.count
            )));
        }
    }
    let (s1, s_ct) = one_sample_variance_stats(cells)?;
    let t = cells.periods().len();
    let treated = F::of(x_t.treated_cells_through(t));
    let n = F::of(n_init);
    let n_t = F::of(n_init * clusters * t);
    let c = F::of(clusters);
    let one = F::one();
    let tau_sq = tau_star * tau_star;
    let f = (n_t - one) / n_t
        * (c / (c - one))
        * (s1 - s_ct - n * tau_sq / (n_t - one) * treated
            + n * n * tau_sq / (n_t * (n_t - one)) * treated * treated);
    let clamped = f < F::zero();
    let sigma_c_sq_hat = f.max(F::zero());
    Ok(InterimEstimate {
        sigma_c_sq_hat,
        sigma_e_sq_hat: s_ct,
        method: EstimateMethod::Blinded,
        s1_sq: Some(s1),
        s_ct_sq: Some(s_ct),
        clamped_at_zero: clamped,
        converged: true,
        degenerate: !(s_ct > F::zero()),
    })
}

/// Unblinded interim estimates: fits the interim model selected by
/// [`select_interim_model`] with REML and returns the fitted variance
/// components.
pub fn unblinded_estimate<F: Real>(cells: &CellSummaries<F>) -> Result<InterimEstimate<F>> {
    if cells.periods().first() != 1 {
        return Err(Error::Data(
            "interim summaries must start at period 1".into(),
        ));
    }
    let t = cells.periods().last();
    let x_t = cells.alloc().restrict(t)?;
    let spec = select_interim_model(&x_t, t);
    let fit = reml_fit(cells, spec)?;
    Ok(InterimEstimate {
        sigma_c_sq_hat: fit.variance.sigma_c_sq(),
        sigma_e_sq_hat: if fit.degenerate {
            F::zero()
        } else {
            fit.variance.sigma_e_sq()
        },
        method: EstimateMethod::Unblinded,
        s1_sq: None,
        s_ct_sq: None,
        clamped_at_zero: fit.boundary,
        converged: fit.converged,
        degenerate: fit.degenerate,
    })
}

/// Runs the full interim step on summaries covering periods `1..=t`:
/// estimate the variance components (blinded or unblinded), search for the
/// minimal post-interim per-cell size, and clamp to the allowed band.
///
/// Degenerate estimates (zero residual variance or a failed fit) map to
/// `n_reest = n_min`: no usable evidence of needing more data.
pub fn interim_reestimate<F: Real>(
    cells: &CellSummaries<F>,
    n_init: usize,
    policy: &SsrePolicy<F>,
) -> Result<SsreDecision<F>> {
    let alloc = cells.alloc().clone();
    let t = cells.periods().last();
    if cells.periods().first() != 1 {
        return Err(Error::Data(
            "interim summaries must start at period 1".into(),
        ));
    }
    if t >= alloc.periods() {
        return Err(Error::Argument(format!(
            "interim period {t} leaves no room for re-estimation in a {}-period design",
            alloc.periods()
        )));
    }
    let estimate = match policy.method {
        SsreMethod::Blinded { tau_star } => {
            let x_t = alloc.restrict(t)?;
            blinded_estimate(cells, &x_t, n_init, tau_star)?
        }
        SsreMethod::Unblinded => unblinded_estimate(cells)?,
    };
    let n_reest = if estimate.degenerate || !(estimate.sigma_e_sq_hat > F::zero()) {
        policy.n_min
    } else {
        let vc_hat = crate::design::VarianceComponents::new(
            estimate.sigma_c_sq_hat,
            estimate.sigma_e_sq_hat,
        )?;
        required_n_reest(&alloc, t, n_init, &vc_hat, &policy.test, policy.n_max)?
    };
    let n_final = clamp_n(n_reest, policy.n_min, policy.n_max)?;
    let dof_final = dof_split(&SplitDesign::new(alloc, t, n_init, n_final)?)?;
    Ok(SsreDecision {
        n_reest,
        n_final,
        estimate,
        dof_final,
    })
}
