//! Trial designs: allocation matrices, fixed-effect design matrices, and the
//! per-cluster covariance structure.
//!
//! Conventions used throughout the crate: clusters are indexed from 0,
//! time periods carry 1-based labels `1..=T` (the first period's effect is
//! pinned to zero for identifiability), and the fixed-effect vector is
//! ordered `(mu, pi_2, ..., pi_T, tau)` so that the treatment coefficient
//! sits at index `T`.

use crate::{Error, Real, Result};

/// Binary treatment roll-out matrix `X` (`C x T`).
///
/// Entry `(i, j)` is 1 when cluster `i` receives the intervention in period
/// `j`. Rows are non-decreasing left to right: once a cluster switches it
/// stays switched. A separate constructor admits arbitrary binary matrices
/// for crossover-style designs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationMatrix {
    entries: Vec<u8>,
    clusters: usize,
    periods: usize,
}

impl AllocationMatrix {
    /// Builds an allocation matrix from rows, enforcing the roll-out
    /// property.
    pub fn new(rows: &[Vec<u8>]) -> Result<Self> {
        let x = Self::new_unrestricted(rows)?;
        for i in 0..x.clusters {
            for j in 1..x.periods {
                if x.entry(i, j + 1) < x.entry(i, j) {
                    return Err(Error::Design(format!(
                        "cluster {i} leaves the intervention at period {}",
                        j + 1
                    )));
                }
            }
        }
        Ok(x)
    }

    /// Builds an allocation matrix from rows without the roll-out check;
    /// entries must still be binary.
    pub fn new_unrestricted(rows: &[Vec<u8>]) -> Result<Self> {
        let clusters = rows.len();
        if clusters < 2 {
            return Err(Error::Design(format!(
                "need at least 2 clusters, got {clusters}"
            )));
        }
        let periods = rows[0].len();
        if periods < 2 {
            return Err(Error::Design(format!(
                "need at least 2 periods, got {periods}"
            )));
        }
        let mut entries = Vec::with_capacity(clusters * periods);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != periods {
                return Err(Error::Design(format!(
                    "row {i} has {} periods, expected {periods}",
                    row.len()
                )));
            }
            for &v in row {
                if v > 1 {
                    return Err(Error::Design(format!(
                        "entry {v} in row {i} is not binary"
                    )));
                }
                entries.push(v);
            }
        }
        Ok(Self {
            entries,
            clusters,
            periods,
        })
    }

    /// Builds the standard roll-out where `switches[j]` new clusters first
    /// receive the intervention in period `j + 1`; clusters are ordered by
    /// switch time and never-switching clusters get all-zero rows.
    pub fn standard(clusters: usize, periods: usize, switches: &[usize]) -> Result<Self> {
        if switches.len() != periods {
            return Err(Error::Design(format!(
                "switch schedule has {} entries for {periods} periods",
                switches.len()
            )));
        }
        let total: usize = switches.iter().sum();
        if total > clusters {
            return Err(Error::Design(format!(
                "{total} switching clusters exceed the {clusters} available"
            )));
        }
        if clusters < 2 || periods < 2 {
            return Err(Error::Design(
                "need at least 2 clusters and 2 periods".into(),
            ));
        }
        let mut entries = vec![0u8; clusters * periods];
        let mut row = 0;
        for (j, &count) in switches.iter().enumerate() {
            for _ in 0..count {
                for col in j..periods {
                    entries[row * periods + col] = 1;
                }
                row += 1;
            }
        }
        Ok(Self {
            entries,
            clusters,
            periods,
        })
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    /// Entry for cluster `i` (0-based) in period `j` (1-based).
    pub fn entry(&self, cluster: usize, period: usize) -> u8 {
        debug_assert!((1..=self.periods).contains(&period));
        self.entries[cluster * self.periods + (period - 1)]
    }

    pub fn is_treated(&self, cluster: usize, period: usize) -> bool {
        self.entry(cluster, period) == 1
    }

    /// `sum(X)`: total number of treated cluster-period cells.
    pub fn treated_cells(&self) -> usize {
        self.entries.iter().map(|&v| v as usize).sum()
    }

    /// `sum(X^(t))`: treated cells in the first `t` periods.
    pub fn treated_cells_through(&self, t: usize) -> usize {
        let t = t.min(self.periods);
        (0..self.clusters)
            .flat_map(|i| (1..=t).map(move |j| (i, j)))
            .map(|(i, j)| self.entry(i, j) as usize)
            .sum()
    }

    /// `X^(t)`: the `C x t` left sub-matrix.
    pub fn restrict(&self, t: usize) -> Result<Self> {
        if t < 1 || t > self.periods {
            return Err(Error::Argument(format!(
                "restriction period {t} outside 1..={}",
                self.periods
            )));
        }
        if t == 1 {
            // A single-period matrix is still meaningful as a restriction,
            // so bypass the `periods >= 2` constructor requirement.
            let entries = (0..self.clusters).map(|i| self.entry(i, 1)).collect();
            return Ok(Self {
                entries,
                clusters: self.clusters,
                periods: 1,
            });
        }
        let mut entries = Vec::with_capacity(self.clusters * t);
        for i in 0..self.clusters {
            for j in 1..=t {
                entries.push(self.entry(i, j));
            }
        }
        Ok(Self {
            entries,
            clusters: self.clusters,
            periods: t,
        })
    }
}

/// Contiguous, non-empty set of 1-based period labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeriodRange {
    first: usize,
    last: usize,
}

impl PeriodRange {
    pub fn new(first: usize, last: usize) -> Result<Self> {
        if first < 1 || last < first {
            return Err(Error::Argument(format!(
                "invalid period range {first}..={last}"
            )));
        }
        Ok(Self { first, last })
    }

    pub fn first(&self) -> usize {
        self.first
    }

    pub fn last(&self) -> usize {
        self.last
    }

    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, period: usize) -> bool {
        (self.first..=self.last).contains(&period)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> {
        self.first..=self.last
    }
}

/// Between-cluster and residual variances `(sigma_c^2, sigma_e^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceComponents<F> {
    sigma_c_sq: F,
    sigma_e_sq: F,
}

impl<F: Real> VarianceComponents<F> {
    pub fn new(sigma_c_sq: F, sigma_e_sq: F) -> Result<Self> {
        if !sigma_c_sq.is_finite() || sigma_c_sq < F::zero() {
            return Err(Error::Argument(format!(
                "between-cluster variance {sigma_c_sq} must be finite and >= 0"
            )));
        }
        if !sigma_e_sq.is_finite() || !(sigma_e_sq > F::zero()) {
            return Err(Error::Argument(format!(
                "residual variance {sigma_e_sq} must be finite and > 0"
            )));
        }
        Ok(Self {
            sigma_c_sq,
            sigma_e_sq,
        })
    }

    pub fn sigma_c_sq(&self) -> F {
        self.sigma_c_sq
    }

    pub fn sigma_e_sq(&self) -> F {
        self.sigma_e_sq
    }

    /// Intra-cluster correlation `sigma_c^2 / (sigma_c^2 + sigma_e^2)`.
    pub fn icc(&self) -> F {
        self.sigma_c_sq / (self.sigma_c_sq + self.sigma_e_sq)
    }

    /// Scales both components, e.g. for assumed-value sensitivity grids.
    pub fn scaled(&self, c_factor: F, e_factor: F) -> Result<Self> {
        Self::new(self.sigma_c_sq * c_factor, self.sigma_e_sq * e_factor)
    }
}

/// Level at which a design matrix is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignLevel {
    /// One row per individual observation.
    Individual,
    /// One row per cluster-period cell.
    Cell,
}

/// Fixed-effect design matrix `D` for a period range and per-cell size.
///
/// Always `T + 1` columns in `(mu, pi_2, ..., pi_T, tau)` order; columns for
/// periods outside the covered range are identically zero. Rows are laid out
/// cluster-major, then by period, then (at individual level) by observation.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix<F> {
    data: Vec<F>,
    n_rows: usize,
    n_cols: usize,
    periods: PeriodRange,
    per_cell: usize,
    level: DesignLevel,
}

impl<F: Real> DesignMatrix<F> {
    pub fn build(
        alloc: &AllocationMatrix,
        periods: PeriodRange,
        per_cell: usize,
        level: DesignLevel,
    ) -> Result<Self> {
        let t_total = alloc.periods();
        if periods.last() > t_total {
            return Err(Error::Argument(format!(
                "period range ends at {} but the design has {t_total} periods",
                periods.last()
            )));
        }
        if per_cell < 1 {
            return Err(Error::Argument("per-cell size must be at least 1".into()));
        }
        let n_cols = t_total + 1;
        let reps = match level {
            DesignLevel::Individual => per_cell,
            DesignLevel::Cell => 1,
        };
        let n_rows = alloc.clusters() * periods.len() * reps;
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for i in 0..alloc.clusters() {
            for j in periods.iter() {
                let mut row = vec![F::zero(); n_cols];
                fill_full_row(&mut row, alloc.is_treated(i, j), j, t_total);
                for _ in 0..reps {
                    data.extend_from_slice(&row);
                }
            }
        }
        Ok(Self {
            data,
            n_rows,
            n_cols,
            periods,
            per_cell,
            level,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.n_cols..(r + 1) * self.n_cols]
    }

    pub fn periods(&self) -> PeriodRange {
        self.periods
    }

    pub fn per_cell(&self) -> usize {
        self.per_cell
    }

    pub fn level(&self) -> DesignLevel {
        self.level
    }

    /// Index of the treatment-effect column (`T`, the last column).
    pub fn tau_column(&self) -> usize {
        self.n_cols - 1
    }
}

/// Fills a `T + 1`-column row for a cell in period `j`: intercept, period
/// indicator (periods 2..=T), and treatment indicator.
pub(crate) fn fill_full_row<F: Real>(row: &mut [F], treated: bool, period: usize, t_total: usize) {
    debug_assert_eq!(row.len(), t_total + 1);
    row[0] = F::one();
    if period >= 2 {
        row[period - 1] = F::one();
    }
    row[t_total] = if treated { F::one() } else { F::zero() };
}

/// Covariance of the observed cell means within one cluster, in factored
/// form: `diag(sigma_e^2 / m_j) + sigma_c^2 J`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCovariance<F> {
    cell_counts: Vec<usize>,
    vc: VarianceComponents<F>,
}

impl<F: Real> ClusterCovariance<F> {
    pub fn new(cell_counts: Vec<usize>, vc: VarianceComponents<F>) -> Result<Self> {
        if cell_counts.is_empty() {
            return Err(Error::Argument("cluster has no observed cells".into()));
        }
        if cell_counts.iter().any(|&m| m == 0) {
            return Err(Error::Argument("cell counts must be at least 1".into()));
        }
        Ok(Self { cell_counts, vc })
    }

    /// Number of observed cells (the matrix dimension).
    pub fn dim(&self) -> usize {
        self.cell_counts.len()
    }

    /// Total individuals in the cluster.
    pub fn total_count(&self) -> usize {
        self.cell_counts.iter().sum()
    }

    /// Inverse in rank-one form: `V^{-1} = diag(a) - lambda a a^T` with
    /// `a_j = m_j / sigma_e^2` and
    /// `lambda = sigma_c^2 sigma_e^2 / (sigma_e^2 + M sigma_c^2)`.
    pub fn inverse_weights(&self) -> (Vec<F>, F) {
        let se = self.vc.sigma_e_sq();
        let sc = self.vc.sigma_c_sq();
        let total = F::of(self.total_count());
        let a: Vec<F> = self
            .cell_counts
            .iter()
            .map(|&m| F::of(m) / se)
            .collect();
        let lambda = sc * se / (se + total * sc);
        (a, lambda)
    }

    /// `log det V`.
    pub fn log_det(&self) -> F {
        let se = self.vc.sigma_e_sq();
        let sc = self.vc.sigma_c_sq();
        let total = F::of(self.total_count());
        let mut acc = (F::one() + sc * total / se).ln();
        for &m in &self.cell_counts {
            acc += (se / F::of(m)).ln();
        }
        acc
    }

    /// Densified covariance, row-major, for validation against the naive
    /// construction.
    pub fn dense(&self) -> Vec<F> {
        let n = self.dim();
        let se = self.vc.sigma_e_sq();
        let sc = self.vc.sigma_c_sq();
        let mut out = vec![F::zero(); n * n];
        for r in 0..n {
            for c in 0..n {
                let mut v = sc;
                if r == c {
                    v += se / F::of(self.cell_counts[r]);
                }
                out[r * n + c] = v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tds1() -> AllocationMatrix {
        AllocationMatrix::standard(4, 5, &[0, 1, 1, 1, 1]).unwrap()
    }

    fn tds2() -> AllocationMatrix {
        AllocationMatrix::standard(20, 9, &[0, 3, 3, 3, 3, 2, 2, 2, 2]).unwrap()
    }

    #[test]
    fn standard_builds_tds1_rows() {
        let x = tds1();
        let expected = [
            [0, 1, 1, 1, 1],
            [0, 0, 1, 1, 1],
            [0, 0, 0, 1, 1],
            [0, 0, 0, 0, 1],
        ];
        for (i, row) in expected.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(x.entry(i, j + 1), v);
            }
        }
    }

    #[test]
    fn standard_tds2_treated_cell_count() {
        // 3 * (8 + 7 + 6 + 5) + 2 * (4 + 3 + 2 + 1) = 98, by hand enumeration
        // of the roll-out pattern.
        assert_eq!(tds2().treated_cells(), 98);
    }

    #[test]
    fn standard_all_zero_when_no_switches() {
        let x = AllocationMatrix::standard(2, 2, &[0, 0]).unwrap();
        assert_eq!(x.treated_cells(), 0);
    }

    #[test]
    fn standard_rejects_too_many_switches() {
        assert!(AllocationMatrix::standard(3, 4, &[0, 2, 1, 1]).is_err());
    }

    #[test]
    fn standard_rejects_wrong_schedule_length() {
        assert!(AllocationMatrix::standard(4, 5, &[0, 1, 1, 1]).is_err());
    }

    #[test]
    fn rollout_violation_rejected_but_unrestricted_allows() {
        let rows = vec![vec![1u8, 0], vec![0, 1]];
        assert!(AllocationMatrix::new(&rows).is_err());
        assert!(AllocationMatrix::new_unrestricted(&rows).is_ok());
    }

    #[test]
    fn restrict_preserves_prefix_sums() {
        let x = tds1();
        assert_eq!(x.restrict(3).unwrap().treated_cells(), 3);
        assert_eq!(x.restrict(5).unwrap(), x);
        assert_eq!(x.restrict(1).unwrap().treated_cells(), 0);
        assert!(x.restrict(0).is_err());
        assert!(x.restrict(6).is_err());
    }

    #[test]
    fn restrict_sums_non_decreasing_in_t() {
        for x in [tds1(), tds2()] {
            let mut prev = 0;
            for t in 1..=x.periods() {
                let s = x.restrict(t).unwrap().treated_cells();
                assert!(s >= prev);
                prev = s;
            }
            assert_eq!(prev, x.treated_cells());
        }
    }

    #[test]
    fn design_matrix_dimensions() {
        let x = tds1();
        let full = PeriodRange::new(1, 5).unwrap();
        let d = DesignMatrix::<f64>::build(&x, full, 70, DesignLevel::Individual).unwrap();
        assert_eq!((d.n_rows(), d.n_cols()), (1400, 6));

        let r13 = PeriodRange::new(1, 3).unwrap();
        let d = DesignMatrix::<f64>::build(&x, r13, 70, DesignLevel::Cell).unwrap();
        assert_eq!((d.n_rows(), d.n_cols()), (12, 6));
        // periods 4 and 5 unobserved: their columns are identically zero
        for r in 0..d.n_rows() {
            assert_eq!(d.row(r)[3], 0.0);
            assert_eq!(d.row(r)[4], 0.0);
        }

        let r45 = PeriodRange::new(4, 5).unwrap();
        let d = DesignMatrix::<f64>::build(&x, r45, 100, DesignLevel::Cell).unwrap();
        assert_eq!((d.n_rows(), d.n_cols()), (8, 6));
        let tau_sum: f64 = (0..d.n_rows()).map(|r| d.row(r)[d.tau_column()]).sum();
        assert_eq!(tau_sum, 7.0); // treated cells in periods 4-5, by hand
    }

    #[test]
    fn design_matrix_rejects_bad_ranges() {
        let x = tds1();
        assert!(PeriodRange::new(3, 2).is_err());
        let over = PeriodRange::new(1, 6).unwrap();
        assert!(DesignMatrix::<f64>::build(&x, over, 1, DesignLevel::Cell).is_err());
    }

    #[test]
    fn variance_components_validation() {
        assert!(VarianceComponents::new(0.02, 0.51).is_ok());
        assert!(VarianceComponents::new(-0.01, 0.51).is_err());
        assert!(VarianceComponents::new(0.02, 0.0).is_err());
        let vc = VarianceComponents::new(1.0f64 / 9.0, 1.0).unwrap();
        let icc: f64 = vc.icc();
        assert!((icc - 0.1).abs() < 1e-12);
    }

    #[test]
    fn cluster_covariance_reduces_to_diagonal_without_cluster_variance() {
        let vc = VarianceComponents::new(0.0, 2.0).unwrap();
        let cov = ClusterCovariance::new(vec![4, 2], vc).unwrap();
        let (a, lambda) = cov.inverse_weights();
        assert_eq!(lambda, 0.0);
        assert_eq!(a, vec![2.0, 1.0]);
        let dense = cov.dense();
        assert_eq!(dense, vec![0.5, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn cluster_covariance_inverse_weights_invert_dense() {
        let vc = VarianceComponents::new(0.3f64, 1.7).unwrap();
        let cov = ClusterCovariance::new(vec![3, 5, 2, 7], vc).unwrap();
        let n = cov.dim();
        let dense: Vec<f64> = cov.dense();
        let (a, lambda) = cov.inverse_weights();
        // V^{-1}[r][c] = delta a_r - lambda a_r a_c
        for r in 0..n {
            for c in 0..n {
                let mut prod = 0.0;
                for k in 0..n {
                    let inv_kc = if k == c { a[k] } else { 0.0 } - lambda * a[k] * a[c];
                    prod += dense[r * n + k] * inv_kc;
                }
                let expected = if r == c { 1.0 } else { 0.0 };
                assert!((prod - expected).abs() < 1e-12, "({r},{c}): {prod}");
            }
        }
    }
}
