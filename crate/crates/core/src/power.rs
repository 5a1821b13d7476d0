//! Information, power, and minimal-integer sample-size searches for fixed
//! and split (pre/post-interim) stepped-wedge designs.

use crate::design::{fill_full_row, AllocationMatrix, VarianceComponents};
use crate::dist::{shifted_t_tail, t_quantile};
use crate::linalg::SymMatrix;
use crate::{Error, Real, Result};

/// A trial split at an interim period: `n_init` per cell in periods
/// `1..=t`, `n_post` per cell in periods `t+1..=T`.
///
/// The conventional fixed design is the degenerate split with `t = T` and an
/// empty second segment rather than a separate code path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDesign {
    alloc: AllocationMatrix,
    interim_period: usize,
    n_init: usize,
    n_post: usize,
}

impl SplitDesign {
    pub fn new(
        alloc: AllocationMatrix,
        interim_period: usize,
        n_init: usize,
        n_post: usize,
    ) -> Result<Self> {
        let t_total = alloc.periods();
        if interim_period < 1 || interim_period > t_total {
            return Err(Error::Argument(format!(
                "interim period {interim_period} outside 1..={t_total}"
            )));
        }
        if n_init < 1 {
            return Err(Error::Argument("n_init must be at least 1".into()));
        }
        if interim_period < t_total && n_post < 1 {
            return Err(Error::Argument(
                "n_post must be at least 1 when periods remain after the interim".into(),
            ));
        }
        if interim_period == t_total && n_post != 0 {
            return Err(Error::Argument(
                "the degenerate fixed design has no post-interim segment".into(),
            ));
        }
        Ok(Self {
            alloc,
            interim_period,
            n_init,
            n_post,
        })
    }

    /// Fixed design with `n` per cell throughout.
    pub fn fixed(alloc: AllocationMatrix, n: usize) -> Result<Self> {
        let t_total = alloc.periods();
        Self::new(alloc, t_total, n, 0)
    }

    pub fn alloc(&self) -> &AllocationMatrix {
        &self.alloc
    }

    pub fn interim_period(&self) -> usize {
        self.interim_period
    }

    pub fn n_init(&self) -> usize {
        self.n_init
    }

    pub fn n_post(&self) -> usize {
        self.n_post
    }

    /// Per-cell size in period `j` (1-based).
    fn cell_size(&self, period: usize) -> usize {
        if period <= self.interim_period {
            self.n_init
        } else {
            self.n_post
        }
    }
}

/// One-sided test specification: size, type-II rate, and the clinically
/// relevant difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestSpec<F> {
    alpha: F,
    beta: F,
    delta: F,
}

impl<F: Real> TestSpec<F> {
    pub fn new(alpha: F, beta: F, delta: F) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !v.is_finite() || !(v > F::zero()) || !(v < F::one()) {
                return Err(Error::Argument(format!(
                    "{name} = {v} must lie strictly inside (0, 1)"
                )));
            }
        }
        if !delta.is_finite() || !(delta > F::zero()) {
            return Err(Error::Argument(format!(
                "delta = {delta} must be finite and > 0"
            )));
        }
        Ok(Self { alpha, beta, delta })
    }

    pub fn alpha(&self) -> F {
        self.alpha
    }

    pub fn beta(&self) -> F {
        self.beta
    }

    pub fn delta(&self) -> F {
        self.delta
    }

    pub fn target_power(&self) -> F {
        F::one() - self.beta
    }
}

/// Degrees of freedom of the fixed design: `n C T - C - T`.
pub fn dof_fixed(n: usize, clusters: usize, periods: usize) -> Result<usize> {
    let nu = (n * clusters * periods) as i64 - clusters as i64 - periods as i64;
    if nu < 1 {
        return Err(Error::DegenerateDof(nu));
    }
    Ok(nu as usize)
}

/// Degrees of freedom of the split design:
/// `n_init C t + n_post C (T - t) - C - T`.
pub fn dof_split(sd: &SplitDesign) -> Result<usize> {
    let c = sd.alloc.clusters() as i64;
    let t_total = sd.alloc.periods() as i64;
    let t = sd.interim_period as i64;
    let nu = sd.n_init as i64 * c * t + sd.n_post as i64 * c * (t_total - t) - c - t_total;
    if nu < 1 {
        return Err(Error::DegenerateDof(nu));
    }
    Ok(nu as usize)
}

/// Fisher information for the treatment effect of the split design: the
/// reciprocal of element `[tau, tau]` of the inverse of the GLS
/// cross-product, accumulated at cell level per cluster over both segments
/// (periods `1..=t` at `n_init`, `t+1..=T` at `n_post`; the second segment
/// is skipped entirely when `n_post = 0`).
pub fn information_split<F: Real>(sd: &SplitDesign, vc: &VarianceComponents<F>) -> Result<F> {
    let alloc = &sd.alloc;
    let t_total = alloc.periods();
    let p = t_total + 1;
    let se = vc.sigma_e_sq();
    let sc = vc.sigma_c_sq();
    let mut a = SymMatrix::zeros(p);
    let mut row = vec![F::zero(); p];
    let mut u = vec![F::zero(); p];
    for i in 0..alloc.clusters() {
        u.iter_mut().for_each(|v| *v = F::zero());
        let mut total = F::zero();
        for j in 1..=t_total {
            let m = sd.cell_size(j);
            if m == 0 {
                continue;
            }
            fill_full_row(&mut row, alloc.is_treated(i, j), j, t_total);
            let w = F::of(m) / se;
            a.add_outer(&row, w);
            for (k, &r) in row.iter().enumerate() {
                u[k] += w * r;
            }
            total += F::of(m);
        }
        let lambda = sc * se / (se + total * sc);
        if lambda > F::zero() {
            a.add_outer(&u, -lambda);
        }
    }
    match a.cholesky() {
        Ok(chol) => {
            let inv = chol.inverse();
            let v = inv.get(p - 1, p - 1);
            Ok(F::one() / v)
        }
        Err(pivot) => {
            let name = if pivot == 0 {
                "mu".to_string()
            } else if pivot == p - 1 {
                "tau".to_string()
            } else {
                format!("pi_{}", pivot + 1)
            };
            Err(Error::NotIdentifiable(name))
        }
    }
}

/// Critical value `e` with `P(T_nu > e) = alpha`.
pub fn critical_value<F: Real>(alpha: F, nu: usize) -> Result<F> {
    t_quantile(F::one() - alpha, F::of(nu))
}

/// Power to reject at `tau = delta` for the split design under the given
/// variance components.
pub fn power_split<F: Real>(
    sd: &SplitDesign,
    vc: &VarianceComponents<F>,
    ts: &TestSpec<F>,
) -> Result<F> {
    let nu = dof_split(sd)?;
    let info = information_split(sd, vc)?;
    let e = critical_value(ts.alpha(), nu)?;
    shifted_t_tail(e, ts.delta() * info.sqrt(), F::of(nu))
}

const SEARCH_CAP: usize = 1_000_000;

/// Minimal integer per-cell size whose fixed-design power reaches
/// `1 - beta`; power is monotone in `n`, so a doubling bracket plus
/// bisection is exact. The returned `n` is confirmed minimal against
/// `n - 1`.
pub fn required_n_fixed<F: Real>(
    alloc: &AllocationMatrix,
    vc_assumed: &VarianceComponents<F>,
    ts: &TestSpec<F>,
) -> Result<usize> {
    let target = ts.target_power();
    let power_at = |n: usize| -> Result<Option<F>> {
        let sd = SplitDesign::fixed(alloc.clone(), n)?;
        match dof_split(&sd) {
            Ok(_) => power_split(&sd, vc_assumed, ts).map(Some),
            Err(Error::DegenerateDof(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let mut hi = 1usize;
    loop {
        if let Some(p) = power_at(hi)? {
            if p >= target {
                break;
            }
        }
        hi *= 2;
        if hi > SEARCH_CAP {
            return Err(Error::SampleSizeUnattainable(SEARCH_CAP));
        }
    }
    let mut lo = hi / 2; // power(lo) < target or lo = 0
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        match power_at(mid)? {
            Some(p) if p >= target => hi = mid,
            _ => lo = mid,
        }
    }
    debug_assert!(matches!(power_at(hi), Ok(Some(p)) if p >= target));
    Ok(hi)
}

/// Minimal `n_post` in `[1, n_cap]` whose split-design power reaches
/// `1 - beta` under the interim variance estimates; returns `n_cap` when
/// even the cap falls short (the caller clamps anyway).
pub fn required_n_reest<F: Real>(
    alloc: &AllocationMatrix,
    interim_period: usize,
    n_init: usize,
    vc_hat: &VarianceComponents<F>,
    ts: &TestSpec<F>,
    n_cap: usize,
) -> Result<usize> {
    if interim_period >= alloc.periods() {
        return Err(Error::Argument(format!(
            "re-estimation requires an interim before the last period, got t = {interim_period}"
        )));
    }
    if n_cap < 1 {
        return Err(Error::Argument("n_cap must be at least 1".into()));
    }
    let target = ts.target_power();
    let power_at = |n_post: usize| -> Result<Option<F>> {
        let sd = SplitDesign::new(alloc.clone(), interim_period, n_init, n_post)?;
        match dof_split(&sd) {
            Ok(_) => power_split(&sd, vc_hat, ts).map(Some),
            Err(Error::DegenerateDof(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    match power_at(n_cap)? {
        Some(p) if p >= target => {}
        _ => return Ok(n_cap),
    }
    let mut lo = 0usize; // candidate below `hi` that fails (0 = sentinel)
    let mut hi = n_cap;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        match power_at(mid)? {
            Some(p) if p >= target => hi = mid,
            _ => lo = mid,
        }
    }
    Ok(hi)
}

/// Clamps the re-estimated size to the allowed band `[n_min, n_max]`.
pub fn clamp_n(n_reest: usize, n_min: usize, n_max: usize) -> Result<usize> {
    if n_min < 1 || n_min > n_max {
        return Err(Error::Argument(format!(
            "invalid clamp band [{n_min}, {n_max}]"
        )));
    }
    Ok(n_reest.clamp(n_min, n_max))
}
