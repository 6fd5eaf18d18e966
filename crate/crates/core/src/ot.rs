//! Entropic optimal transport with dust bins.
//!
//! The score matrix is augmented with one extra row and column (the inflow and
//! outflow containers) filled with a single threshold score. Marginals give
//! every real instance unit mass, the inflow row mass `N` and the outflow
//! column mass `M`, so both sides total `M + N`. Sinkhorn scaling runs on the
//! marginals divided by `max(M,1) * max(N,1)`; [`rescale_plan`] brings a plan
//! back to assignment-probability ("count") scale.
//!
//! Scores are similarities, so the solver maximizes `sum(P * C)` and the Gibbs
//! kernel is `exp(+C / sigma)`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Score matrix with the dust-bin row and column appended.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedScore {
    matrix: Array2<f64>,
}

impl AugmentedScore {
    /// Wraps an arbitrary `(M+1) x (N+1)` matrix. Used by oracles and tests
    /// that need borders other than a single threshold.
    pub fn from_matrix(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(invalid("augmented score needs at least one row and column"));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(invalid("augmented score contains non-finite entries"));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// Number of real rows (instances in the earlier frame).
    pub fn rows(&self) -> usize {
        self.matrix.nrows() - 1
    }

    /// Number of real columns (instances in the later frame).
    pub fn cols(&self) -> usize {
        self.matrix.ncols() - 1
    }

    /// The corner cell, equal to the threshold score for matrices built by
    /// [`build_augmented_score`].
    pub fn bin_score(&self) -> f64 {
        self.matrix[[self.rows(), self.cols()]]
    }
}

/// Appends the dust-bin row and column, every augmented cell holding `bin_score`.
pub fn build_augmented_score(similarity: &Array2<f64>, bin_score: f64) -> Result<AugmentedScore> {
    if similarity.iter().any(|v| !v.is_finite()) {
        return Err(invalid("similarity matrix contains non-finite entries"));
    }
    if !bin_score.is_finite() {
        return Err(invalid(format!(
            "bin score must be finite, got {bin_score}"
        )));
    }
    let (m, n) = similarity.dim();
    let mut matrix = Array2::from_elem((m + 1, n + 1), bin_score);
    matrix.slice_mut(ndarray::s![..m, ..n]).assign(similarity);
    Ok(AugmentedScore { matrix })
}

/// Histogram marginals for an `M x N` problem with dust bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    /// `[1; M]` followed by `N`.
    pub source: Vec<f64>,
    /// `[1; N]` followed by `M`.
    pub target: Vec<f64>,
    /// Divisor taking count-scale marginals to the normalized ones.
    pub scale: f64,
}

impl Marginals {
    pub fn rows(&self) -> usize {
        self.source.len() - 1
    }

    pub fn cols(&self) -> usize {
        self.target.len() - 1
    }

    pub fn normalized_source(&self) -> Vec<f64> {
        self.source.iter().map(|v| v / self.scale).collect()
    }

    pub fn normalized_target(&self) -> Vec<f64> {
        self.target.iter().map(|v| v / self.scale).collect()
    }

    /// Total count-scale mass, `M + N`.
    pub fn total(&self) -> f64 {
        (self.rows() + self.cols()) as f64
    }
}

pub fn build_marginals(m: usize, n: usize) -> Result<Marginals> {
    if m == 0 && n == 0 {
        return Err(invalid(
            "marginals need at least one instance on either side",
        ));
    }
    let mut source = vec![1.0; m];
    source.push(n as f64);
    let mut target = vec![1.0; n];
    target.push(m as f64);
    // MN is undefined as a divisor when a side is empty.
    let scale = (m.max(1) * n.max(1)) as f64;
    Ok(Marginals {
        source,
        target,
        scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanScale {
    Normalized,
    Count,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SinkhornDomain {
    /// Scaling vectors `u`, `v` updated directly.
    Naive,
    /// Log-potentials with log-sum-exp reductions.
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub sigma: f64,
    pub iterations: usize,
    pub domain: SinkhornDomain,
    /// Record the entropic dual objective after every iteration.
    pub record_dual: bool,
    /// Log domain only: start at this larger temperature and shrink it
    /// geometrically to `sigma` over the first half of the iterations,
    /// carrying the potentials across temperatures.
    #[serde(default)]
    pub anneal_from: Option<f64>,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            iterations: 100,
            domain: SinkhornDomain::Log,
            record_dual: false,
            anneal_from: None,
        }
    }
}

impl SinkhornConfig {
    pub fn new(sigma: f64, iterations: usize) -> Self {
        Self {
            sigma,
            iterations,
            ..Self::default()
        }
    }

    pub fn with_domain(mut self, domain: SinkhornDomain) -> Self {
        self.domain = domain;
        self
    }

    pub fn with_annealing(mut self, start_sigma: f64) -> Self {
        self.anneal_from = Some(start_sigma);
        self
    }

    /// Temperature used at iteration `k` (0-based).
    pub fn sigma_at(&self, k: usize) -> f64 {
        match self.anneal_from {
            Some(start) if start > self.sigma => {
                let ramp = self.iterations / 2;
                if k >= ramp {
                    self.sigma
                } else {
                    start * (self.sigma / start).powf(k as f64 / ramp as f64)
                }
            }
            _ => self.sigma,
        }
    }

    pub fn with_dual_trace(mut self) -> Self {
        self.record_dual = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.iterations == 0 {
            return Err(invalid("sinkhorn needs at least one iteration"));
        }
        if let Some(start) = self.anneal_from {
            if !(start > 0.0 && start.is_finite()) {
                return Err(invalid(format!(
                    "annealing start must be positive, got {start}"
                )));
            }
            if self.domain == SinkhornDomain::Naive {
                return Err(invalid("annealing needs the log domain"));
            }
        }
        Ok(())
    }
}

/// `(M+1) x (N+1)` transport plan plus solve diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub matrix: Array2<f64>,
    pub scale: PlanScale,
    /// Count-scale divisor of the marginals the plan was solved against.
    pub mass_scale: f64,
    pub iterations_run: usize,
    /// L1 distance between count-scale row/column sums and the marginals.
    pub marginal_violation: f64,
    pub sigma: f64,
    /// Set when a naive-domain solve overflowed and was redone in log domain.
    pub log_fallback: bool,
    /// Entropic dual objective after each iteration, when requested.
    pub dual_trace: Vec<f64>,
}

impl TransportPlan {
    pub fn rows(&self) -> usize {
        self.matrix.nrows() - 1
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols() - 1
    }

    /// Entry at count scale regardless of the stored scale.
    pub fn count_entry(&self, i: usize, j: usize) -> f64 {
        match self.scale {
            PlanScale::Count => self.matrix[[i, j]],
            PlanScale::Normalized => self.matrix[[i, j]] * self.mass_scale,
        }
    }

    /// `sum(P * C)` evaluated at count scale.
    pub fn objective(&self, score: &AugmentedScore) -> f64 {
        let factor = match self.scale {
            PlanScale::Count => 1.0,
            PlanScale::Normalized => self.mass_scale,
        };
        factor
            * self
                .matrix
                .iter()
                .zip(score.matrix().iter())
                .map(|(p, c)| p * c)
                .sum::<f64>()
    }

    /// Total count-scale mass.
    pub fn total_mass(&self) -> f64 {
        let s: f64 = self.matrix.sum();
        match self.scale {
            PlanScale::Count => s,
            PlanScale::Normalized => s * self.mass_scale,
        }
    }

    /// Mass on real-to-real cells (count scale).
    pub fn matched_mass(&self) -> f64 {
        let (m, n) = (self.rows(), self.cols());
        let s: f64 = self.matrix.slice(ndarray::s![..m, ..n]).sum();
        match self.scale {
            PlanScale::Count => s,
            PlanScale::Normalized => s * self.mass_scale,
        }
    }

    /// Corner cell (count scale).
    pub fn corner_mass(&self) -> f64 {
        self.count_entry(self.rows(), self.cols())
    }

    pub fn require_count_scale(&self) -> Result<()> {
        match self.scale {
            PlanScale::Count => Ok(()),
            PlanScale::Normalized => Err(Error::State(
                "plan is in normalized scale; rescale it first".into(),
            )),
        }
    }
}

/// Count-scale L1 marginal violation of a matrix with the given scale factor.
pub fn marginal_violation(matrix: &Array2<f64>, marg: &Marginals, factor: f64) -> f64 {
    let rows: f64 = matrix
        .rows()
        .into_iter()
        .zip(&marg.source)
        .map(|(row, a)| (row.sum() * factor - a).abs())
        .sum();
    let cols: f64 = matrix
        .columns()
        .into_iter()
        .zip(&marg.target)
        .map(|(col, b)| (col.sum() * factor - b).abs())
        .sum();
    rows + cols
}

fn check_shapes(score: &AugmentedScore, marg: &Marginals) -> Result<()> {
    if score.rows() != marg.rows() || score.cols() != marg.cols() {
        return Err(Error::ShapeMismatch(format!(
            "score is {}x{} but marginals describe {}x{}",
            score.rows(),
            score.cols(),
            marg.rows(),
            marg.cols()
        )));
    }
    Ok(())
}

/// Runs exactly `cfg.iterations` Sinkhorn alternations (u then v, starting
/// from `v = 1`) and returns a normalized-scale plan.
pub fn sinkhorn(
    score: &AugmentedScore,
    marg: &Marginals,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    cfg.validate()?;
    check_shapes(score, marg)?;
    match cfg.domain {
        SinkhornDomain::Log => Ok(sinkhorn_log(score, marg, cfg)),
        SinkhornDomain::Naive => match sinkhorn_naive(score, marg, cfg) {
            Some(plan) => Ok(plan),
            None => {
                let mut plan = sinkhorn_log(score, marg, cfg);
                plan.log_fallback = true;
                Ok(plan)
            }
        },
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `sigma * (<f,a> + <g,b> - sum exp(f + C/sigma + g))` with `f = ln u`, `g = ln v`.
fn dual_objective(
    scaled: &Array2<f64>,
    f: &[f64],
    g: &[f64],
    a: &[f64],
    b: &[f64],
    sigma: f64,
) -> f64 {
    let lin: f64 = f
        .iter()
        .zip(a)
        .chain(g.iter().zip(b))
        .filter(|(_, &mass)| mass > 0.0)
        .map(|(pot, mass)| pot * mass)
        .sum();
    let mut mass = 0.0;
    for ((i, j), s) in scaled.indexed_iter() {
        let e = f[i] + s + g[j];
        if e > f64::NEG_INFINITY {
            mass += e.exp();
        }
    }
    sigma * (lin - mass)
}

fn sinkhorn_log(score: &AugmentedScore, marg: &Marginals, cfg: &SinkhornConfig) -> TransportPlan {
    let c = score.matrix();
    let (rows, cols) = c.dim();
    let a = marg.normalized_source();
    let b = marg.normalized_target();
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    // Potentials in score units: f = F / sigma, g = G / sigma.
    let mut big_f = vec![0.0; rows];
    let mut big_g = vec![0.0; cols];
    let mut dual_trace = Vec::new();
    let scaled = c.mapv(|x| x / cfg.sigma);

    for k in 0..cfg.iterations {
        let sigma = cfg.sigma_at(k);
        for i in 0..rows {
            big_f[i] = if a[i] > 0.0 {
                sigma * (log_a[i] - log_sum_exp((0..cols).map(|j| (c[[i, j]] + big_g[j]) / sigma)))
            } else {
                f64::NEG_INFINITY
            };
        }
        for j in 0..cols {
            big_g[j] = if b[j] > 0.0 {
                sigma * (log_b[j] - log_sum_exp((0..rows).map(|i| (c[[i, j]] + big_f[i]) / sigma)))
            } else {
                f64::NEG_INFINITY
            };
        }
        if cfg.record_dual {
            let f: Vec<f64> = big_f.iter().map(|x| x / cfg.sigma).collect();
            let g: Vec<f64> = big_g.iter().map(|x| x / cfg.sigma).collect();
            dual_trace.push(dual_objective(&scaled, &f, &g, &a, &b, cfg.sigma));
        }
    }

    let matrix = Array2::from_shape_fn((rows, cols), |(i, j)| {
        let e = (big_f[i] + c[[i, j]] + big_g[j]) / cfg.sigma;
        if e > f64::NEG_INFINITY {
            e.exp()
        } else {
            0.0
        }
    });
    let marginal_violation = marginal_violation(&matrix, marg, marg.scale);
    TransportPlan {
        matrix,
        scale: PlanScale::Normalized,
        mass_scale: marg.scale,
        iterations_run: cfg.iterations,
        marginal_violation,
        sigma: cfg.sigma,
        log_fallback: false,
        dual_trace,
    }
}

/// Direct scaling iterations. Returns `None` on overflow or underflow so the
/// caller can fall back to the log domain.
fn sinkhorn_naive(
    score: &AugmentedScore,
    marg: &Marginals,
    cfg: &SinkhornConfig,
) -> Option<TransportPlan> {
    let kernel = score.matrix().mapv(|c| (c / cfg.sigma).exp());
    if kernel.iter().any(|k| !k.is_finite() || *k == 0.0) {
        return None;
    }
    let (rows, cols) = kernel.dim();
    let a = marg.normalized_source();
    let b = marg.normalized_target();
    let mut u = vec![1.0; rows];
    let mut v = vec![1.0; cols];
    let mut dual_trace = Vec::new();
    let scaled = if cfg.record_dual {
        Some(score.matrix().mapv(|c| c / cfg.sigma))
    } else {
        None
    };

    for _ in 0..cfg.iterations {
        for i in 0..rows {
            let kv: f64 = (0..cols).map(|j| kernel[[i, j]] * v[j]).sum();
            u[i] = a[i] / kv;
            if !u[i].is_finite() || (a[i] > 0.0 && u[i] == 0.0) {
                return None;
            }
        }
        for j in 0..cols {
            let ktu: f64 = (0..rows).map(|i| kernel[[i, j]] * u[i]).sum();
            v[j] = b[j] / ktu;
            if !v[j].is_finite() || (b[j] > 0.0 && v[j] == 0.0) {
                return None;
            }
        }
        if let Some(scaled) = &scaled {
            let f: Vec<f64> = u.iter().map(|x| x.ln()).collect();
            let g: Vec<f64> = v.iter().map(|x| x.ln()).collect();
            dual_trace.push(dual_objective(scaled, &f, &g, &a, &b, cfg.sigma));
        }
    }

    let matrix = Array2::from_shape_fn((rows, cols), |(i, j)| u[i] * kernel[[i, j]] * v[j]);
    if matrix.iter().any(|p| !p.is_finite()) {
        return None;
    }
    let marginal_violation = marginal_violation(&matrix, marg, marg.scale);
    Some(TransportPlan {
        matrix,
        scale: PlanScale::Normalized,
        mass_scale: marg.scale,
        iterations_run: cfg.iterations,
        marginal_violation,
        sigma: cfg.sigma,
        log_fallback: false,
        dual_trace,
    })
}

/// Multiplies a normalized plan by `max(M,1) * max(N,1)`.
pub fn rescale_plan(mut plan: TransportPlan) -> Result<TransportPlan> {
    if plan.scale == PlanScale::Count {
        return Err(Error::State("plan is already in count scale".into()));
    }
    let factor = plan.mass_scale;
    plan.matrix.mapv_inplace(|p| p * factor);
    plan.scale = PlanScale::Count;
    Ok(plan)
}

/// Largest `M + N` accepted by [`lp_oracle`].
pub const ORACLE_SIZE_LIMIT: usize = 12;

/// Exact solution of the unregularized problem.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    /// Count-scale plan at an optimal vertex.
    pub plan: TransportPlan,
    pub objective: f64,
    /// Real-to-real pairs of the optimal vertex, sorted by row.
    pub matching: Vec<(usize, usize)>,
    /// Objective gap to the best vertex with a different matching
    /// (`f64::INFINITY` when the feasible set is a single point).
    pub runner_up_gap: f64,
}

/// Exact maximizer of `sum(P * C)` over the dust-bin transport polytope.
pub fn lp_oracle(score: &AugmentedScore, marg: &Marginals) -> Result<TransportPlan> {
    lp_oracle_solution(score, marg).map(|s| s.plan)
}

/// Exhaustive vertex enumeration. With integral marginals every vertex is
/// integral: each real row sends its unit to one column or the outflow bin,
/// each real column receives from one row or the inflow bin, and the corner
/// absorbs the remaining `t` units for `t` real-to-real pairs. Vertices are
/// therefore exactly the partial matchings between rows and columns.
pub fn lp_oracle_solution(score: &AugmentedScore, marg: &Marginals) -> Result<OracleSolution> {
    check_shapes(score, marg)?;
    let (m, n) = (score.rows(), score.cols());
    if m + n > ORACLE_SIZE_LIMIT {
        return Err(Error::TooLarge {
            size: m + n,
            limit: ORACLE_SIZE_LIMIT,
        });
    }
    let c = score.matrix();

    struct Search<'a> {
        c: &'a Array2<f64>,
        m: usize,
        n: usize,
        col_used: Vec<bool>,
        current: Vec<Option<usize>>,
        best: Option<(f64, Vec<Option<usize>>)>,
        second: f64,
    }

    impl Search<'_> {
        fn value(&self) -> f64 {
            let (m, n) = (self.m, self.n);
            let mut total = 0.0;
            let mut matched = 0usize;
            for (i, choice) in self.current.iter().enumerate() {
                match choice {
                    Some(j) => {
                        total += self.c[[i, *j]];
                        matched += 1;
                    }
                    None => total += self.c[[i, n]],
                }
            }
            for j in 0..n {
                if !self.col_used[j] {
                    total += self.c[[m, j]];
                }
            }
            total + matched as f64 * self.c[[m, n]]
        }

        fn visit(&mut self, row: usize) {
            if row == self.m {
                let v = self.value();
                match &self.best {
                    Some((best, _)) if v <= *best => {
                        if v > self.second {
                            self.second = v;
                        }
                    }
                    _ => {
                        if let Some((prev, _)) = &self.best {
                            self.second = *prev;
                        }
                        self.best = Some((v, self.current.clone()));
                    }
                }
                return;
            }
            self.current.push(None);
            self.visit(row + 1);
            self.current.pop();
            for j in 0..self.n {
                if self.col_used[j] {
                    continue;
                }
                self.col_used[j] = true;
                self.current.push(Some(j));
                self.visit(row + 1);
                self.current.pop();
                self.col_used[j] = false;
            }
        }
    }

    let mut search = Search {
        c,
        m,
        n,
        col_used: vec![false; n],
        current: Vec::with_capacity(m),
        best: None,
        second: f64::NEG_INFINITY,
    };
    search.visit(0);
    let (objective, choice) = search.best.expect("at least one vertex exists");

    let mut matrix = Array2::zeros((m + 1, n + 1));
    let mut matching = Vec::new();
    let mut col_matched = vec![false; n];
    for (i, ch) in choice.iter().enumerate() {
        match ch {
            Some(j) => {
                matrix[[i, *j]] = 1.0;
                col_matched[*j] = true;
                matching.push((i, *j));
            }
            None => matrix[[i, n]] = 1.0,
        }
    }
    for (j, matched) in col_matched.iter().enumerate() {
        if !matched {
            matrix[[m, j]] = 1.0;
        }
    }
    matrix[[m, n]] = matching.len() as f64;

    let marginal_violation = marginal_violation(&matrix, marg, 1.0);
    Ok(OracleSolution {
        plan: TransportPlan {
            matrix,
            scale: PlanScale::Count,
            mass_scale: marg.scale,
            iterations_run: 0,
            marginal_violation,
            sigma: 0.0,
            log_fallback: false,
            dual_trace: Vec::new(),
        },
        objective,
        matching,
        runner_up_gap: objective - search.second,
    })
}

/// Convenience: augment, solve and rescale in one call.
pub fn solve_counts(
    similarity: &Array2<f64>,
    bin_score: f64,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    let (m, n) = similarity.dim();
    let score = build_augmented_score(similarity, bin_score)?;
    let marg = build_marginals(m, n)?;
    rescale_plan(sinkhorn(&score, &marg, cfg)?)
}
