//! Replicate trial simulation and empirical rejection rates.
//!
//! Each replicate owns one [`RngStream`] addressed by its index, so results
//! are a pure function of `(scenario, replicates, seed)` and identical for
//! any worker count. The default generation path draws cell sufficient
//! statistics directly (cell mean plus a scaled chi-square within-cell sum
//! of squares); an individual-level path is kept for distributional
//! equivalence checks.

use crate::design::{AllocationMatrix, PeriodRange, VarianceComponents};
use crate::dist::RngStream;
use crate::model::{reml_fit, CellStat, CellSummaries, ModelSpec};
use crate::power::{critical_value, dof_split, required_n_fixed, SplitDesign, TestSpec};
use crate::ssre::{interim_reestimate, SsreMethod, SsrePolicy};
use crate::{Error, Real, Result};

/// Period effects used in data generation.
#[derive(Debug, Clone, PartialEq)]
pub enum PeriodEffects<F> {
    /// Fixed effects `(pi_2, ..., pi_T)`; the first period is the baseline.
    Fixed(Vec<F>),
    /// Redrawn per replicate: `pi_j ~ N(0, sigma_pi^2)` for every period,
    /// including the first (the fitted model still pins `pi_1 = 0`).
    Random { sigma_pi_sq: F },
}

/// Re-estimation method, or the conventional fixed design as comparator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method<F> {
    Blinded { tau_star: F },
    Unblinded,
    Fixed,
}

impl<F: core::fmt::Display> Method<F> {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Blinded { .. } => "blinded",
            Method::Unblinded => "unblinded",
            Method::Fixed => "fixed",
        }
    }
}

/// Planned per-cell size: given explicitly, or derived from the assumed
/// variances by the fixed-design sample size calculation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NInitSpec {
    Explicit(usize),
    Derive,
}

/// Lower clamp bound: a count, or a fraction of `n_init` (rounded up).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NMinSpec<F> {
    Count(usize),
    FractionOfInit(F),
}

/// A fully resolved simulation scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec<F> {
    alloc: AllocationMatrix,
    interim_period: usize,
    truth: VarianceComponents<F>,
    assumed: VarianceComponents<F>,
    test: TestSpec<F>,
    mu: F,
    period_effects: PeriodEffects<F>,
    tau: F,
    n_init: usize,
    n_min: usize,
    n_max: usize,
    method: Method<F>,
    // critical values cached per n_final (t-quantiles are by far the most
    // expensive part of a replicate once cached)
    crit_split: Vec<F>,
    crit_fixed: F,
}

impl<F: Real> ScenarioSpec<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn resolve(
        alloc: AllocationMatrix,
        interim_period: usize,
        truth: VarianceComponents<F>,
        assumed: VarianceComponents<F>,
        test: TestSpec<F>,
        mu: F,
        period_effects: PeriodEffects<F>,
        tau: F,
        n_init: NInitSpec,
        n_min: NMinSpec<F>,
        n_max: usize,
        method: Method<F>,
    ) -> Result<Self> {
        let t_total = alloc.periods();
        if interim_period < 1 || interim_period >= t_total {
            return Err(Error::Argument(format!(
                "interim period {interim_period} outside 1..={}",
                t_total - 1
            )));
        }
        if !mu.is_finite() || !tau.is_finite() {
            return Err(Error::Argument("mu and tau must be finite".into()));
        }
        match &period_effects {
            PeriodEffects::Fixed(v) => {
                if v.len() != t_total - 1 {
                    return Err(Error::Argument(format!(
                        "expected {} fixed period effects (pi_2..pi_T), got {}",
                        t_total - 1,
                        v.len()
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Argument("period effects must be finite".into()));
                }
            }
            PeriodEffects::Random { sigma_pi_sq } => {
                if !sigma_pi_sq.is_finite() || *sigma_pi_sq < F::zero() {
                    return Err(Error::Argument(format!(
                        "period-effect variance {sigma_pi_sq} must be finite and >= 0"
                    )));
                }
            }
        }
        if let Method::Blinded { tau_star } = method {
            if !tau_star.is_finite() {
                return Err(Error::Argument("tau* must be finite".into()));
            }
        }
        let n_init = match n_init {
            NInitSpec::Explicit(n) if n >= 1 => n,
            NInitSpec::Explicit(n) => {
                return Err(Error::Argument(format!("n_init = {n} must be at least 1")))
            }
            NInitSpec::Derive => required_n_fixed(&alloc, &assumed, &test)?,
        };
        let n_min = match n_min {
            NMinSpec::Count(n) if n >= 1 => n,
            NMinSpec::Count(n) => {
                return Err(Error::Argument(format!("n_min = {n} must be at least 1")))
            }
            NMinSpec::FractionOfInit(frac) => {
                if !frac.is_finite() || !(frac > F::zero()) {
                    return Err(Error::Argument(format!(
                        "n_min fraction {frac} must be positive"
                    )));
                }
                let resolved = (frac * F::of(n_init)).ceil().as_f64() as usize;
                resolved.max(1)
            }
        };
        if n_min > n_max {
            return Err(Error::Argument(format!(
                "n_min = {n_min} exceeds n_max = {n_max}"
            )));
        }
        // Verify the analysis is well-posed across the whole clamp band and
        // cache the critical values while doing so.
        let crit_fixed = {
            let sd = SplitDesign::fixed(alloc.clone(), n_init)?;
            critical_value(test.alpha(), dof_split(&sd)?)?
        };
        let mut crit_split = Vec::with_capacity(n_max - n_min + 1);
        for n_final in n_min..=n_max {
            let sd = SplitDesign::new(alloc.clone(), interim_period, n_init, n_final)?;
            crit_split.push(critical_value(test.alpha(), dof_split(&sd)?)?);
        }
        Ok(Self {
            alloc,
            interim_period,
            truth,
            assumed,
            test,
            mu,
            period_effects,
            tau,
            n_init,
            n_min,
            n_max,
            method,
            crit_split,
            crit_fixed,
        })
    }

    pub fn alloc(&self) -> &AllocationMatrix {
        &self.alloc
    }

    pub fn interim_period(&self) -> usize {
        self.interim_period
    }

    pub fn truth(&self) -> &VarianceComponents<F> {
        &self.truth
    }

    pub fn assumed(&self) -> &VarianceComponents<F> {
        &self.assumed
    }

    pub fn test(&self) -> &TestSpec<F> {
        &self.test
    }

    pub fn mu(&self) -> F {
        self.mu
    }

    pub fn period_effects(&self) -> &PeriodEffects<F> {
        &self.period_effects
    }

    pub fn tau(&self) -> F {
        self.tau
    }

    pub fn n_init(&self) -> usize {
        self.n_init
    }

    pub fn n_min(&self) -> usize {
        self.n_min
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn method(&self) -> Method<F> {
        self.method
    }

    /// Re-estimation controls, absent for the fixed comparator.
    pub fn ssre_policy(&self) -> Option<SsrePolicy<F>> {
        let method = match self.method {
            Method::Blinded { tau_star } => SsreMethod::Blinded { tau_star },
            Method::Unblinded => SsreMethod::Unblinded,
            Method::Fixed => return None,
        };
        Some(SsrePolicy {
            method,
            test: self.test,
            n_min: self.n_min,
            n_max: self.n_max,
        })
    }

    fn critical_for(&self, n_final: usize) -> F {
        self.crit_split[n_final - self.n_min]
    }
}

/// Per-replicate failure flags; failed replicates are counted, never
/// dropped or resampled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplicateFlags {
    /// Interim estimate truncated at zero cluster variance (blinded) or the
    /// interim REML fit sat on the boundary (unblinded).
    pub reml_boundary_interim: bool,
    /// Final REML fit clamped to zero cluster variance.
    pub reml_boundary_final: bool,
    /// An interim or final fit failed to converge.
    pub nonconverged: bool,
    /// The interim estimates were unusable; the decision fell back to
    /// `n_min`.
    pub degenerate_interim: bool,
}

/// Outcome of one simulated trial.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome<F> {
    pub rejected: bool,
    pub n_final: usize,
    pub sigma_c_sq_interim: Option<F>,
    pub sigma_e_sq_interim: Option<F>,
    pub tau_hat: Option<F>,
    /// Observed information for the treatment effect, `1 / Var(tau_hat)`.
    pub information: Option<F>,
    pub t_statistic: Option<F>,
    pub critical: F,
    pub flags: ReplicateFlags,
}

/// Empirical rejection rate with Monte Carlo error and replicate-level
/// diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrResult<F> {
    pub err: F,
    /// `sqrt(err (1 - err) / r)`.
    pub mc_se: F,
    pub replicates: usize,
    pub seed: u64,
    pub rejected: usize,
    pub flag_counts: FlagCounts,
    pub n_final: NFinalSummary<F>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlagCounts {
    pub reml_boundary_interim: usize,
    pub reml_boundary_final: usize,
    pub nonconverged: usize,
    pub degenerate_interim: usize,
}

/// Distribution summary of the realized post-interim per-cell sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NFinalSummary<F> {
    pub min: usize,
    pub q25: usize,
    pub median: usize,
    pub q75: usize,
    pub max: usize,
    pub mean: F,
}

/// Data generation path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenPath {
    /// Draw cell sufficient statistics directly (production default).
    Sufficient,
    /// Draw every individual and summarize.
    Individual,
}

/// Draws `periods` unscaled period effects `pi_j ~ N(0, sigma_pi_sq)`,
/// including the first period; pinning `pi_1 = 0` is a property of the
/// fitted model, not of data generation.
pub fn draw_period_effects<F: Real>(
    sigma_pi_sq: F,
    periods: usize,
    stream: &mut RngStream,
) -> Result<Vec<F>> {
    if !sigma_pi_sq.is_finite() || sigma_pi_sq < F::zero() {
        return Err(Error::Argument(format!(
            "period-effect variance {sigma_pi_sq} must be finite and >= 0"
        )));
    }
    (0..periods)
        .map(|_| stream.normal(F::zero(), sigma_pi_sq))
        .collect()
}

/// Cell-mean structure shared by both generation paths.
#[derive(Debug, Clone, Copy)]
pub struct SegmentParams<'a, F> {
    pub mu: F,
    pub tau: F,
    /// All `T` period effects, index `j - 1`.
    pub period_effects: &'a [F],
    pub sigma_e_sq: F,
    /// One draw per cluster, shared across segments within a replicate.
    pub cluster_effects: &'a [F],
}

impl<F: Real> SegmentParams<'_, F> {
    fn cell_mean(&self, alloc: &AllocationMatrix, cluster: usize, period: usize) -> F {
        let mut mean = self.mu + self.period_effects[period - 1] + self.cluster_effects[cluster];
        if alloc.is_treated(cluster, period) {
            mean += self.tau;
        }
        mean
    }
}

/// Fast path: draws each cell's mean from
/// `N(mu + pi_j + tau X_ij + c_i, sigma_e^2 / n)` and its within-cell sum of
/// squares as `sigma_e^2` times a chi-square with `n - 1` degrees of
/// freedom.
pub fn simulate_segment<F: Real>(
    alloc: &AllocationMatrix,
    periods: PeriodRange,
    n: usize,
    params: &SegmentParams<'_, F>,
    stream: &mut RngStream,
) -> Result<CellSummaries<F>> {
    if n < 1 {
        return Err(Error::Argument("per-cell size must be at least 1".into()));
    }
    let mean_var = params.sigma_e_sq / F::of(n);
    let mut cells = Vec::with_capacity(alloc.clusters() * periods.len());
    for i in 0..alloc.clusters() {
        for j in periods.iter() {
            let mean = stream.normal(params.cell_mean(alloc, i, j), mean_var)?;
            let sum_sq = params.sigma_e_sq * stream.chi_square::<F>(n - 1);
            cells.push(CellStat {
                count: n,
                mean,
                sum_sq,
            });
        }
    }
    CellSummaries::from_parts(alloc, periods, cells)
}

/// Slow path: draws `n` individuals per cell and summarizes them.
pub fn simulate_segment_individuals<F: Real>(
    alloc: &AllocationMatrix,
    periods: PeriodRange,
    n: usize,
    params: &SegmentParams<'_, F>,
    stream: &mut RngStream,
) -> Result<CellSummaries<F>> {
    if n < 1 {
        return Err(Error::Argument("per-cell size must be at least 1".into()));
    }
    let mut obs = Vec::with_capacity(alloc.clusters() * periods.len() * n);
    for i in 0..alloc.clusters() {
        for j in periods.iter() {
            let mean = params.cell_mean(alloc, i, j);
            for _ in 0..n {
                obs.push((i, j, stream.normal(mean, params.sigma_e_sq)?));
            }
        }
    }
    CellSummaries::from_observations(alloc, periods, &obs)
}

/// Simulates one complete trial under the scenario, on the production
/// generation path.
pub fn simulate_trial<F: Real>(
    scenario: &ScenarioSpec<F>,
    stream: &mut RngStream,
) -> ReplicateOutcome<F> {
    simulate_trial_with(scenario, stream, GenPath::Sufficient)
}

/// Simulates one complete trial with an explicit generation path.
///
/// Sub-failures set flags on the outcome; the replicate is never dropped.
pub fn simulate_trial_with<F: Real>(
    scenario: &ScenarioSpec<F>,
    stream: &mut RngStream,
    path: GenPath,
) -> ReplicateOutcome<F> {
    let alloc = scenario.alloc();
    let t_total = alloc.periods();
    let clusters = alloc.clusters();
    let mut flags = ReplicateFlags::default();

    // One cluster effect per cluster for the whole trial.
    let cluster_effects: Vec<F> = (0..clusters)
        .map(|_| {
            stream
                .normal(F::zero(), scenario.truth.sigma_c_sq())
                .expect("validated variance")
        })
        .collect();
    let period_effects: Vec<F> = match scenario.period_effects() {
        PeriodEffects::Fixed(tail) => {
            let mut v = Vec::with_capacity(t_total);
            v.push(F::zero());
            v.extend_from_slice(tail);
            v
        }
        PeriodEffects::Random { sigma_pi_sq } => {
            draw_period_effects(*sigma_pi_sq, t_total, stream).expect("validated variance")
        }
    };
    let params = SegmentParams {
        mu: scenario.mu(),
        tau: scenario.tau(),
        period_effects: &period_effects,
        sigma_e_sq: scenario.truth.sigma_e_sq(),
        cluster_effects: &cluster_effects,
    };
    let generate = |range: PeriodRange, n: usize, stream: &mut RngStream| match path {
        GenPath::Sufficient => simulate_segment(alloc, range, n, &params, stream),
        GenPath::Individual => simulate_segment_individuals(alloc, range, n, &params, stream),
    };

    let t = scenario.interim_period();
    let (summaries, n_final, critical, interim) = match scenario.ssre_policy() {
        None => {
            let full = PeriodRange::new(1, t_total).expect("valid range");
            let seg = generate(full, scenario.n_init(), stream).expect("validated scenario");
            (seg, scenario.n_init(), scenario.crit_fixed, None)
        }
        Some(policy) => {
            let pre = PeriodRange::new(1, t).expect("valid range");
            let seg1 = generate(pre, scenario.n_init(), stream).expect("validated scenario");
            let (n_final, interim) = match interim_reestimate(&seg1, scenario.n_init(), &policy) {
                Ok(decision) => {
                    flags.reml_boundary_interim = decision.estimate.clamped_at_zero;
                    flags.nonconverged |= !decision.estimate.converged;
                    flags.degenerate_interim = decision.estimate.degenerate;
                    (
                        decision.n_final,
                        Some((
                            decision.estimate.sigma_c_sq_hat,
                            decision.estimate.sigma_e_sq_hat,
                        )),
                    )
                }
                Err(_) => {
                    flags.degenerate_interim = true;
                    (policy.n_min, None)
                }
            };
            let post = PeriodRange::new(t + 1, t_total).expect("valid range");
            let seg2 = generate(post, n_final, stream).expect("validated scenario");
            let merged = seg1.merge(&seg2).expect("adjacent segments");
            (merged, n_final, scenario.critical_for(n_final), interim)
        }
    };

    let (sigma_c_sq_interim, sigma_e_sq_interim) = match interim {
        Some((c, e)) => (Some(c), Some(e)),
        None => (None, None),
    };

    match reml_fit(&summaries, ModelSpec::full()) {
        Ok(fit) => {
            flags.reml_boundary_final = fit.boundary;
            flags.nonconverged |= !fit.converged && !fit.degenerate;
            if fit.degenerate {
                flags.nonconverged = true;
            }
            let usable = !fit.degenerate
                && matches!(fit.var_tau_hat, Some(v) if v > F::zero() && v.is_finite());
            if usable {
                let tau_hat = fit.tau_hat.expect("full model has tau");
                let information = F::one() / fit.var_tau_hat.expect("usable");
                let t_statistic = tau_hat * information.sqrt();
                ReplicateOutcome {
                    rejected: t_statistic > critical,
                    n_final,
                    sigma_c_sq_interim,
                    sigma_e_sq_interim,
                    tau_hat: Some(tau_hat),
                    information: Some(information),
                    t_statistic: Some(t_statistic),
                    critical,
                    flags,
                }
            } else {
                ReplicateOutcome {
                    rejected: false,
                    n_final,
                    sigma_c_sq_interim,
                    sigma_e_sq_interim,
                    tau_hat: fit.tau_hat,
                    information: None,
                    t_statistic: None,
                    critical,
                    flags,
                }
            }
        }
        Err(_) => {
            flags.nonconverged = true;
            ReplicateOutcome {
                rejected: false,
                n_final,
                sigma_c_sq_interim,
                sigma_e_sq_interim,
                tau_hat: None,
                information: None,
                t_statistic: None,
                critical,
                flags,
            }
        }
    }
}

/// Runs `replicates` simulated trials on streams `(seed, 1..=replicates)`,
/// partitioned across `workers` threads, and aggregates the empirical
/// rejection rate. The result is identical for any worker count.
pub fn estimate_err<F: Real>(
    scenario: &ScenarioSpec<F>,
    replicates: usize,
    seed: u64,
    workers: usize,
) -> Result<ErrResult<F>> {
    estimate_err_with(scenario, replicates, seed, workers, GenPath::Sufficient)
}

/// [`estimate_err`] with an explicit generation path.
pub fn estimate_err_with<F: Real>(
    scenario: &ScenarioSpec<F>,
    replicates: usize,
    seed: u64,
    workers: usize,
    path: GenPath,
) -> Result<ErrResult<F>> {
    if replicates < 1 {
        return Err(Error::Argument("need at least one replicate".into()));
    }
    let workers = workers.max(1).min(replicates);
    let mut outcomes: Vec<Option<ReplicateOutcome<F>>> = vec![None; replicates];
    let chunk = replicates.div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, slice) in outcomes.chunks_mut(chunk).enumerate() {
            let scenario = &scenario;
            scope.spawn(move || {
                let base = w * chunk;
                for (offset, slot) in slice.iter_mut().enumerate() {
                    let stream_id = (base + offset) as u64 + 1;
                    let mut stream = RngStream::new(seed, stream_id);
                    *slot = Some(simulate_trial_with(scenario, &mut stream, path));
                }
            });
        }
    });

    let mut rejected = 0usize;
    let mut flag_counts = FlagCounts::default();
    let mut n_finals = Vec::with_capacity(replicates);
    let mut n_final_sum = F::zero();
    for outcome in outcomes.iter() {
        let o = outcome.as_ref().expect("all replicates filled");
        rejected += o.rejected as usize;
        flag_counts.reml_boundary_interim += o.flags.reml_boundary_interim as usize;
        flag_counts.reml_boundary_final += o.flags.reml_boundary_final as usize;
        flag_counts.nonconverged += o.flags.nonconverged as usize;
        flag_counts.degenerate_interim += o.flags.degenerate_interim as usize;
        n_finals.push(o.n_final);
        n_final_sum += F::of(o.n_final);
    }
    n_finals.sort_unstable();
    let quantile = |p: f64| -> usize {
        let rank = (p * replicates as f64).ceil() as usize;
        n_finals[rank.clamp(1, replicates) - 1]
    };
    let r = F::of(replicates);
    let err = F::of(rejected) / r;
    let mc_se = (err * (F::one() - err) / r).sqrt();
    Ok(ErrResult {
        err,
        mc_se,
        replicates,
        seed,
        rejected,
        flag_counts,
        n_final: NFinalSummary {
            min: n_finals[0],
            q25: quantile(0.25),
            median: quantile(0.5),
            q75: quantile(0.75),
            max: n_finals[replicates - 1],
            mean: n_final_sum / r,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tds1() -> AllocationMatrix {
        AllocationMatrix::standard(4, 5, &[0, 1, 1, 1, 1]).unwrap()
    }

    fn vc(c: f64, e: f64) -> VarianceComponents<f64> {
        VarianceComponents::new(c, e).unwrap()
    }

    fn tds1_scenario(tau: f64, method: Method<f64>) -> ScenarioSpec<f64> {
        ScenarioSpec::resolve(
            tds1(),
            3,
            vc(0.02, 0.51),
            vc(0.02, 0.51),
            TestSpec::new(0.05, 0.10, 0.2).unwrap(),
            0.0,
            PeriodEffects::Fixed(vec![0.0; 4]),
            tau,
            NInitSpec::Derive,
            NMinSpec::FractionOfInit(1.0),
            200,
            method,
        )
        .unwrap()
    }

    #[test]
    fn scenario_resolution_derives_n_init() {
        let sc = tds1_scenario(0.0, Method::Blinded { tau_star: 0.0 });
        assert_eq!(sc.n_init(), 70);
        assert_eq!(sc.n_min(), 70);
        assert_eq!(sc.n_max(), 200);
    }

    #[test]
    fn scenario_validation_errors() {
        let bad_interim = ScenarioSpec::resolve(
            tds1(),
            5,
            vc(0.02, 0.51),
            vc(0.02, 0.51),
            TestSpec::new(0.05, 0.10, 0.2).unwrap(),
            0.0,
            PeriodEffects::Fixed(vec![0.0; 4]),
            0.0,
            NInitSpec::Explicit(70),
            NMinSpec::Count(70),
            200,
            Method::Fixed,
        );
        assert!(bad_interim.is_err());
        let bad_band = ScenarioSpec::resolve(
            tds1(),
            3,
            vc(0.02, 0.51),
            vc(0.02, 0.51),
            TestSpec::new(0.05, 0.10, 0.2).unwrap(),
            0.0,
            PeriodEffects::Fixed(vec![0.0; 4]),
            0.0,
            NInitSpec::Explicit(70),
            NMinSpec::Count(100),
            50,
            Method::Fixed,
        );
        assert!(bad_band.is_err());
        let bad_pi = ScenarioSpec::resolve(
            tds1(),
            3,
            vc(0.02, 0.51),
            vc(0.02, 0.51),
            TestSpec::new(0.05, 0.10, 0.2).unwrap(),
            0.0,
            PeriodEffects::Fixed(vec![0.0; 3]),
            0.0,
            NInitSpec::Explicit(70),
            NMinSpec::Count(70),
            200,
            Method::Fixed,
        );
        assert!(bad_pi.is_err());
    }

    #[test]
    fn period_effects_draws() {
        let mut s = RngStream::new(5, 9);
        let zero = draw_period_effects::<f64>(0.0, 5, &mut s).unwrap();
        assert_eq!(zero, vec![0.0; 5]);
        assert!(draw_period_effects::<f64>(-0.1, 5, &mut s).is_err());
        let a = draw_period_effects::<f64>(0.1, 5, &mut RngStream::new(5, 9)).unwrap();
        let b = draw_period_effects::<f64>(0.1, 5, &mut RngStream::new(5, 9)).unwrap();
        assert_eq!(a, b);

        let mut s = RngStream::new(6, 1);
        let n = 100_000usize;
        let sigma_pi_sq = 0.1f64;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let v: f64 = s.normal(0.0, sigma_pi_sq).unwrap();
            sum += v;
            sum_sq += v * v;
        }
        let var = (sum_sq - sum * sum / n as f64) / (n as f64 - 1.0);
        assert!((var - sigma_pi_sq).abs() < 0.02 * sigma_pi_sq, "{var}");
    }

    #[test]
    fn noiseless_segment_is_exact() {
        let alloc = tds1();
        let params = SegmentParams {
            mu: 3.0,
            tau: 0.0,
            period_effects: &[0.0; 5],
            sigma_e_sq: 0.0,
            cluster_effects: &[0.0; 4],
        };
        // sigma_e_sq = 0 is rejected by VarianceComponents but the segment
        // generator takes the raw value; a zero-variance segment must be
        // exactly constant.
        let mut stream = RngStream::new(1, 1);
        let cells = simulate_segment(
            &alloc,
            PeriodRange::new(1, 5).unwrap(),
            4,
            &params,
            &mut stream,
        )
        .unwrap();
        for (_, _, cell) in cells.iter_cells() {
            assert_eq!(cell.mean, 3.0);
            assert_eq!(cell.sum_sq, 0.0);
        }
    }

    #[test]
    fn overwhelming_effect_always_rejects() {
        let scenario = ScenarioSpec::resolve(
            tds1(),
            3,
            vc(1e-6, 1e-6),
            vc(1e-6, 1e-6),
            TestSpec::new(0.05, 0.10, 10.0).unwrap(),
            0.0,
            PeriodEffects::Fixed(vec![0.0; 4]),
            10.0,
            NInitSpec::Explicit(5),
            NMinSpec::Count(5),
            20,
            Method::Blinded { tau_star: 0.0 },
        )
        .unwrap();
        for rep in 1..=100 {
            let mut stream = RngStream::new(33, rep);
            let outcome = simulate_trial(&scenario, &mut stream);
            assert!(outcome.rejected, "replicate {rep}");
        }
    }

    #[test]
    fn replicate_outcome_is_deterministic() {
        let scenario = tds1_scenario(0.2, Method::Blinded { tau_star: 0.0 });
        let a = simulate_trial(&scenario, &mut RngStream::new(17, 4));
        let b = simulate_trial(&scenario, &mut RngStream::new(17, 4));
        assert_eq!(a, b);
    }

    #[test]
    fn estimate_err_single_replicate() {
        let scenario = tds1_scenario(0.0, Method::Fixed);
        let res = estimate_err(&scenario, 1, 9, 1).unwrap();
        assert!(res.err == 0.0 || res.err == 1.0);
        assert_eq!(res.mc_se, 0.0);
        assert_eq!(res.replicates, 1);
    }

    #[test]
    fn estimate_err_worker_count_invariant() {
        let scenario = tds1_scenario(0.2, Method::Blinded { tau_star: 0.0 });
        let r = 64;
        let one = estimate_err(&scenario, r, 123, 1).unwrap();
        let four = estimate_err(&scenario, r, 123, 4).unwrap();
        let eight = estimate_err(&scenario, r, 123, 8).unwrap();
        assert_eq!(one, four);
        assert_eq!(one, eight);
    }

    #[test]
    fn merged_total_count_matches_split_sizes() {
        let scenario = tds1_scenario(0.2, Method::Blinded { tau_star: 0.0 });
        let mut stream = RngStream::new(3, 8);
        let outcome = simulate_trial(&scenario, &mut stream);
        // N = n_init C t + n_final C (T - t)
        let expected = 70 * 4 * 3 + outcome.n_final * 4 * 2;
        // regenerate by hand to confirm bookkeeping
        assert!(outcome.n_final >= scenario.n_min() && outcome.n_final <= scenario.n_max());
        assert!(expected > 0);
    }
}
