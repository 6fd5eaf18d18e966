//! Inflow/outflow readout from transport plans, discrete decoding, and the
//! thresholded Hungarian baseline.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::assignment::maximum_weight_assignment;
use crate::error::Result;
use crate::ot::TransportPlan;

/// Partition of a frame pair into matched pairs, newcomers and departures.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowDecomposition {
    /// `(earlier index, later index)`, sorted by earlier index.
    pub matched: Vec<(usize, usize)>,
    /// Later-frame indices with no partner.
    pub inflow: Vec<usize>,
    /// Earlier-frame indices with no partner.
    pub outflow: Vec<usize>,
}

impl FlowDecomposition {
    /// Builds the decomposition from matched pairs of an `m x n` problem.
    pub fn from_matches(m: usize, n: usize, mut matched: Vec<(usize, usize)>) -> Self {
        matched.sort_unstable();
        let mut row_used = vec![false; m];
        let mut col_used = vec![false; n];
        for &(i, j) in &matched {
            row_used[i] = true;
            col_used[j] = true;
        }
        Self {
            matched,
            inflow: (0..n).filter(|&j| !col_used[j]).collect(),
            outflow: (0..m).filter(|&i| !row_used[i]).collect(),
        }
    }

    /// Checks the partition invariants for an `m x n` problem.
    pub fn is_partition_of(&self, m: usize, n: usize) -> bool {
        let mut rows = vec![0u32; m];
        let mut cols = vec![0u32; n];
        for &(i, j) in &self.matched {
            if i >= m || j >= n {
                return false;
            }
            rows[i] += 1;
            cols[j] += 1;
        }
        for &i in &self.outflow {
            if i >= m {
                return false;
            }
            rows[i] += 1;
        }
        for &j in &self.inflow {
            if j >= n {
                return false;
            }
            cols[j] += 1;
        }
        rows.iter().all(|&c| c == 1) && cols.iter().all(|&c| c == 1)
    }
}

/// Sum of the inflow row over the real columns.
pub fn soft_inflow_count(plan: &TransportPlan) -> Result<f64> {
    plan.require_count_scale()?;
    let (m, n) = (plan.rows(), plan.cols());
    Ok((0..n).map(|j| plan.matrix[[m, j]]).sum())
}

/// Sum of the outflow column over the real rows.
pub fn soft_outflow_count(plan: &TransportPlan) -> Result<f64> {
    plan.require_count_scale()?;
    let (m, n) = (plan.rows(), plan.cols());
    Ok((0..m).map(|i| plan.matrix[[i, n]]).sum())
}

/// Index of the first maximum.
fn first_argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in values.enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

/// Mutual-argmax decode. Row argmaxes run over all `N+1` columns and column
/// argmaxes over all `M+1` rows, so a dust-bin winner sends the instance to
/// inflow/outflow. Ties go to the lower index.
pub fn decode_assignment(plan: &TransportPlan) -> FlowDecomposition {
    let (m, n) = (plan.rows(), plan.cols());
    let p = &plan.matrix;
    let col_best: Vec<usize> = (0..n)
        .map(|j| first_argmax((0..=m).map(|i| p[[i, j]])))
        .collect();
    let matched = (0..m)
        .filter_map(|i| {
            let j = first_argmax((0..=n).map(|j| p[[i, j]]));
            (j < n && col_best[j] == i).then_some((i, j))
        })
        .collect();
    FlowDecomposition::from_matches(m, n, matched)
}

/// Optimal one-to-one assignment on raw similarities; pairs scoring below
/// `threshold` are split into an outflow and an inflow.
pub fn hungarian_baseline(similarity: &Array2<f64>, threshold: f64) -> FlowDecomposition {
    let (m, n) = similarity.dim();
    let matched = maximum_weight_assignment(similarity)
        .into_iter()
        .enumerate()
        .filter_map(|(i, j)| {
            j.filter(|&j| similarity[[i, j]] >= threshold)
                .map(|j| (i, j))
        })
        .collect();
    FlowDecomposition::from_matches(m, n, matched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::{
        build_augmented_score, build_marginals, lp_oracle_solution, rescale_plan, sinkhorn,
        solve_counts, PlanScale, SinkhornConfig,
    };
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn count_plan(matrix: Array2<f64>) -> TransportPlan {
        TransportPlan {
            matrix,
            scale: PlanScale::Count,
            mass_scale: 1.0,
            iterations_run: 0,
            marginal_violation: 0.0,
            sigma: 1.0,
            log_fallback: false,
            dual_trace: vec![],
        }
    }

    #[test]
    fn all_new_when_earlier_frame_empty() {
        let plan = solve_counts(&Array2::zeros((0, 3)), 0.4, &SinkhornConfig::default()).unwrap();
        assert!((soft_inflow_count(&plan).unwrap() - 3.0).abs() < 1e-6);
        assert_eq!(soft_outflow_count(&plan).unwrap(), 0.0);
        let d = decode_assignment(&plan);
        assert_eq!(d.inflow, vec![0, 1, 2]);
        assert!(d.matched.is_empty() && d.outflow.is_empty());
    }

    #[test]
    fn all_gone_when_later_frame_empty() {
        let plan = solve_counts(&Array2::zeros((2, 0)), 0.4, &SinkhornConfig::default()).unwrap();
        assert!((soft_outflow_count(&plan).unwrap() - 2.0).abs() < 1e-6);
        assert_eq!(decode_assignment(&plan).outflow, vec![0, 1]);
    }

    #[test]
    fn normalized_plan_is_refused() {
        let score = build_augmented_score(&array![[0.5]], 0.0).unwrap();
        let marg = build_marginals(1, 1).unwrap();
        let plan = sinkhorn(&score, &marg, &SinkhornConfig::default()).unwrap();
        assert!(soft_inflow_count(&plan).is_err());
        assert!(soft_outflow_count(&plan).is_err());
    }

    #[test]
    fn identical_sets_have_no_flow() {
        // Identical unit descriptors: similarity 1 on the diagonal.
        let sim = array![[1.0, 0.1, -0.2], [0.1, 1.0, 0.05], [-0.2, 0.05, 1.0]];
        let score = build_augmented_score(&sim, -1.0).unwrap();
        let marg = build_marginals(3, 3).unwrap();
        let oracle = lp_oracle_solution(&score, &marg).unwrap();
        assert_eq!(oracle.matching.len(), 3);

        let plan = solve_counts(&sim, -1.0, &SinkhornConfig::new(0.05, 200)).unwrap();
        assert!(soft_inflow_count(&plan).unwrap() <= 0.05);
        assert!(soft_outflow_count(&plan).unwrap() <= 0.05);
    }

    #[test]
    fn flow_difference_matches_size_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let m = rng.random_range(0..8);
            let n = rng.random_range(1..8);
            let sim = Array2::from_shape_fn((m, n), |_| rng.random_range(-1.0..1.0));
            let plan = solve_counts(
                &sim,
                rng.random_range(-1.0..1.0),
                &SinkhornConfig::default(),
            )
            .unwrap();
            let diff = soft_inflow_count(&plan).unwrap() - soft_outflow_count(&plan).unwrap();
            assert!((diff - (n as f64 - m as f64)).abs() < 1e-6);
        }
    }

    #[test]
    fn symmetric_instance_has_equal_flows() {
        let sim = array![[0.9, 0.2, -0.3], [0.2, 0.1, 0.4], [-0.3, 0.4, -0.8]];
        let plan = solve_counts(&sim, 0.2, &SinkhornConfig::default()).unwrap();
        let d = soft_inflow_count(&plan).unwrap() - soft_outflow_count(&plan).unwrap();
        assert!(d.abs() < 1e-6);
    }

    #[test]
    fn diagonal_plan_decodes_to_matches() {
        let plan = count_plan(array![
            [0.9, 0.05, 0.05],
            [0.05, 0.9, 0.05],
            [0.05, 0.05, 1.8]
        ]);
        let d = decode_assignment(&plan);
        assert_eq!(d.matched, vec![(0, 0), (1, 1)]);
        assert!(d.inflow.is_empty() && d.outflow.is_empty());
    }

    #[test]
    fn ties_go_to_lower_index() {
        let plan = count_plan(array![[0.4, 0.4, 0.2], [0.3, 0.3, 0.4], [0.3, 0.3, 1.4]]);
        let d = decode_assignment(&plan);
        assert_eq!(d.matched, vec![(0, 0)]);
        assert_eq!(d.inflow, vec![1]);
        assert_eq!(d.outflow, vec![1]);
    }

    #[test]
    fn hungarian_examples() {
        let sim = array![[1.0, -1.0], [-1.0, 1.0]];
        assert_eq!(hungarian_baseline(&sim, 0.0).matched, vec![(0, 0), (1, 1)]);
        let d = hungarian_baseline(&sim, 1.5);
        assert!(d.matched.is_empty());
        assert_eq!(d.inflow.len(), 2);
        assert_eq!(d.outflow.len(), 2);
    }

    #[test]
    fn decode_agrees_with_hungarian_on_separable_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let m = rng.random_range(1..7);
            let n = rng.random_range(1..7);
            let k = rng.random_range(0..=m.min(n));
            let mut cols: Vec<usize> = (0..n).collect();
            for s in 0..n {
                let t = rng.random_range(s..n);
                cols.swap(s, t);
            }
            let mut sim = Array2::from_shape_fn((m, n), |_| rng.random_range(-1.0..-0.5));
            for i in 0..k {
                sim[[i, cols[i]]] = rng.random_range(0.5..1.0);
            }
            let plan = solve_counts(&sim, 0.0, &SinkhornConfig::new(0.05, 100)).unwrap();
            let dot = decode_assignment(&plan);
            let hung = hungarian_baseline(&sim, 0.0);
            assert!(dot.is_partition_of(m, n));
            assert_eq!(dot, hung);
            assert!((soft_inflow_count(&plan).unwrap() - dot.inflow.len() as f64).abs() < 0.05);
        }
    }

    #[test]
    fn partition_check_catches_duplicates() {
        let d = FlowDecomposition {
            matched: vec![(0, 0)],
            inflow: vec![0],
            outflow: vec![],
        };
        assert!(!d.is_partition_of(1, 1));
    }

    #[test]
    fn rescaled_plan_roundtrip_through_decode() {
        let score = build_augmented_score(&array![[0.9, -0.4], [-0.3, -0.9]], 0.0).unwrap();
        let marg = build_marginals(2, 2).unwrap();
        let plan = rescale_plan(sinkhorn(&score, &marg, &SinkhornConfig::new(0.05, 100)).unwrap())
            .unwrap();
        let d = decode_assignment(&plan);
        assert_eq!(d.matched, vec![(0, 0)]);
        assert_eq!(d.inflow, vec![1]);
        assert_eq!(d.outflow, vec![1]);
    }
}
