//! Adaptive feature-wise dropout.
//!
//! Columns of the cut-layer output are dropped whole. Each column's
//! importance is the standard deviation of its channel-normalized values;
//! higher importance means a lower dropout probability. Survivors are scaled
//! by `1 / (1 - p_i)` so that the zero-filled reconstruction is unbiased.

use crate::error::{Error, Result};
use crate::matrix::{column_stats, normalize_per_channel, IntermediateMatrix};
use crate::rng::SimRng;

/// Per-column dropout probabilities for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutPlan {
    /// Importance score of each column (normalized standard deviation).
    pub sigma: Vec<f64>,
    /// Relative importance `sigma_i * D / sum(sigma)`.
    pub q: Vec<f64>,
    /// Dropout probability of each column.
    pub probs: Vec<f64>,
    /// Bias added to every sigma when some `q_i` exceeds one; zero otherwise.
    pub c_bias: f64,
    /// Expected number of surviving columns.
    pub target_d: f64,
}

impl DropoutPlan {
    pub fn total_columns(&self) -> usize {
        self.probs.len()
    }

    /// Dimensionality reduction ratio `D_bar / D`.
    pub fn reduction_ratio(&self) -> f64 {
        self.total_columns() as f64 / self.target_d
    }

    /// Sum of keep probabilities; equals `target_d` for a valid plan.
    pub fn expected_survivors(&self) -> f64 {
        self.probs.iter().map(|p| 1.0 - p).sum()
    }

    /// Scale applied to a surviving column.
    pub fn survivor_scale(&self, j: usize) -> f64 {
        1.0 / (1.0 - self.probs[j])
    }

    /// Plan for a deterministic selection: kept columns get `p = 0`
    /// (no rescaling), dropped columns `p = 1`.
    pub fn deterministic(mask: &DropoutMask) -> Self {
        let probs: Vec<f64> = mask.delta().iter().map(|&k| if k { 0.0 } else { 1.0 }).collect();
        let n = probs.len();
        Self {
            sigma: vec![0.0; n],
            q: mask.delta().iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
            probs,
            c_bias: 0.0,
            target_d: mask.d_hat() as f64,
        }
    }
}

/// Lower bound on the bias that keeps every probability in `[0, 1]`.
pub fn c_bias_lower_bound(sigma: &[f64], d: f64) -> f64 {
    let n = sigma.len() as f64;
    let sum: f64 = sigma.iter().sum();
    let max = sigma.iter().copied().fold(0.0, f64::max);
    (max * d - sum) / (n - d)
}

/// Dropout probabilities from column importances and a target survivor count.
///
/// `c_bias_override` is clamped to at least [`c_bias_lower_bound`].
pub fn compute_probabilities(sigma: &[f64], d: f64, c_bias_override: Option<f64>) -> Result<DropoutPlan> {
    let n = sigma.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty sigma".into()));
    }
    if !(d > 0.0 && d < n as f64) {
        return Err(Error::InvalidArgument(format!("target D = {d} must lie in (0, {n})")));
    }
    if let Some(bad) = sigma.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::InvalidArgument(format!("sigma entries must be finite and >= 0, got {bad}")));
    }

    let total: f64 = sigma.iter().sum();
    if total == 0.0 {
        // Degenerate: no column carries variation, keep uniformly.
        let p = 1.0 - d / n as f64;
        return Ok(DropoutPlan {
            sigma: sigma.to_vec(),
            q: vec![d / n as f64; n],
            probs: vec![p; n],
            c_bias: 0.0,
            target_d: d,
        });
    }

    let q: Vec<f64> = sigma.iter().map(|s| s * d / total).collect();
    let q_max = q.iter().copied().fold(0.0, f64::max);
    let (probs, c_bias) = if q_max <= 1.0 {
        (q.iter().map(|qi| (1.0 - qi).clamp(0.0, 1.0)).collect(), 0.0)
    } else {
        let bound = c_bias_lower_bound(sigma, d);
        let c = c_bias_override.map_or(bound, |o| o.max(bound));
        let denom = total + n as f64 * c;
        let probs = sigma
            .iter()
            .map(|s| (1.0 - (s + c) * d / denom).clamp(0.0, 1.0))
            .collect();
        (probs, c)
    };

    Ok(DropoutPlan {
        sigma: sigma.to_vec(),
        q,
        probs,
        c_bias,
        target_d: d,
    })
}

/// Importance of each column: std of the channel-normalized matrix.
pub fn importance(f: &IntermediateMatrix) -> Result<Vec<f64>> {
    let normalized = normalize_per_channel(f)?;
    Ok(column_stats(&normalized).std)
}

/// Plan for a feature matrix and a reduction ratio `R > 1`.
pub fn plan_for(f: &IntermediateMatrix, ratio: f64) -> Result<DropoutPlan> {
    if !(ratio > 1.0) {
        return Err(Error::InvalidArgument(format!("reduction ratio must exceed 1, got {ratio}")));
    }
    let sigma = importance(f)?;
    compute_probabilities(&sigma, f.cols() as f64 / ratio, None)
}

/// Which columns survived; one bit per original column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropoutMask {
    delta: Vec<bool>,
    survivors: Vec<usize>,
}

impl DropoutMask {
    pub fn from_delta(delta: Vec<bool>) -> Self {
        let survivors = delta.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect();
        Self { delta, survivors }
    }

    pub fn keep_all(n: usize) -> Self {
        Self::from_delta(vec![true; n])
    }

    pub fn delta(&self) -> &[bool] {
        &self.delta
    }

    /// Surviving column indices, ascending.
    pub fn survivors(&self) -> &[usize] {
        &self.survivors
    }

    pub fn d_hat(&self) -> usize {
        self.survivors.len()
    }

    pub fn total(&self) -> usize {
        self.delta.len()
    }
}

/// Draws an independent Bernoulli keep bit per column.
pub fn sample_mask(plan: &DropoutPlan, rng: &mut SimRng) -> DropoutMask {
    DropoutMask::from_delta(plan.probs.iter().map(|p| rng.uniform() < 1.0 - p).collect())
}

/// Keeps the surviving columns of `f`, each scaled by `1 / (1 - p_j)`.
pub fn apply_dropout(f: &IntermediateMatrix, mask: &DropoutMask, plan: &DropoutPlan) -> Result<IntermediateMatrix> {
    check_widths(f.cols(), mask, Some(plan))?;
    let mut out = f.select_columns(mask.survivors())?;
    for (slot, &j) in mask.survivors().iter().enumerate() {
        let p = plan.probs[j];
        assert!(p < 1.0, "column {j} survived with dropout probability 1");
        let scale = 1.0 / (1.0 - p);
        if scale != 1.0 {
            for v in out.column_mut(slot) {
                *v *= scale;
            }
        }
    }
    Ok(out)
}

/// Gradient columns aligned with the surviving features.
pub fn drop_gradients(g: &IntermediateMatrix, mask: &DropoutMask) -> Result<IntermediateMatrix> {
    check_widths(g.cols(), mask, None)?;
    g.select_columns(mask.survivors())
}

/// Puts compact columns back at their original positions, zeros elsewhere.
pub fn restore_columns(compact: &IntermediateMatrix, mask: &DropoutMask) -> Result<IntermediateMatrix> {
    if compact.cols() != mask.d_hat() {
        return Err(Error::Shape(format!(
            "{} compact columns for {} survivors",
            compact.cols(),
            mask.d_hat()
        )));
    }
    let mut out = IntermediateMatrix::zeros(compact.rows(), mask.total());
    for (slot, &j) in mask.survivors().iter().enumerate() {
        out.column_mut(j).copy_from_slice(compact.column(slot));
    }
    Ok(out)
}

/// Gradient with respect to the un-dropped features: the chain-rule factor
/// of the survivor scaling is `delta_j / (1 - p_j)`.
pub fn backprop_scale(g_hat: &IntermediateMatrix, mask: &DropoutMask, plan: &DropoutPlan) -> Result<IntermediateMatrix> {
    check_widths(mask.total(), mask, Some(plan))?;
    let mut full = restore_columns(g_hat, mask)?;
    for &j in mask.survivors() {
        let scale = 1.0 / (1.0 - plan.probs[j]);
        if scale != 1.0 {
            for v in full.column_mut(j) {
                *v *= scale;
            }
        }
    }
    Ok(full)
}

fn check_widths(cols: usize, mask: &DropoutMask, plan: Option<&DropoutPlan>) -> Result<()> {
    if cols != mask.total() {
        return Err(Error::Shape(format!("matrix has {cols} columns, mask covers {}", mask.total())));
    }
    if let Some(plan) = plan {
        if plan.total_columns() != mask.total() {
            return Err(Error::Shape(format!(
                "plan covers {} columns, mask covers {}",
                plan.total_columns(),
                mask.total()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn low_branch_example() {
        let plan = compute_probabilities(&[0.4, 0.4, 0.1, 0.1], 2.0, None).unwrap();
        let q = [0.8, 0.8, 0.2, 0.2];
        let p = [0.2, 0.2, 0.8, 0.8];
        for i in 0..4 {
            assert!(close(plan.q[i], q[i]));
            assert!(close(plan.probs[i], p[i]));
        }
        assert_eq!(plan.c_bias, 0.0);
    }

    #[test]
    fn biased_branch_example() {
        let plan = compute_probabilities(&[0.9, 0.05, 0.03, 0.02], 2.0, None).unwrap();
        assert!(close(plan.q[0], 1.8));
        assert!(close(plan.c_bias, 0.4));
        assert!(plan.probs[0].abs() < 1e-12);
        assert!(close(plan.expected_survivors(), 2.0));
    }

    #[test]
    fn override_is_clamped_to_bound() {
        let low = compute_probabilities(&[0.9, 0.05, 0.03, 0.02], 2.0, Some(0.0)).unwrap();
        assert!(close(low.c_bias, 0.4));
        let high = compute_probabilities(&[0.9, 0.05, 0.03, 0.02], 2.0, Some(2.0)).unwrap();
        assert_eq!(high.c_bias, 2.0);
        assert!(high.probs[0] > 0.0);
        assert!(close(high.expected_survivors(), 2.0));
    }

    #[test]
    fn equal_sigma_is_uniform() {
        let plan = compute_probabilities(&[0.3; 8], 3.0, None).unwrap();
        for p in &plan.probs {
            assert!(close(*p, 1.0 - 3.0 / 8.0));
        }
    }

    #[test]
    fn all_zero_sigma_falls_back_to_uniform() {
        let plan = compute_probabilities(&[0.0; 4], 1.0, None).unwrap();
        assert!(plan.probs.iter().all(|p| close(*p, 0.75)));
    }

    #[test]
    fn rejects_bad_target() {
        assert!(compute_probabilities(&[0.1, 0.2], 2.0, None).is_err());
        assert!(compute_probabilities(&[0.1, 0.2], 0.0, None).is_err());
        assert!(compute_probabilities(&[0.1, -0.2], 1.0, None).is_err());
    }

    #[test]
    fn degenerate_masks() {
        let mut rng = SimRng::new(0);
        let mut plan = compute_probabilities(&[0.5; 4], 2.0, None).unwrap();
        plan.probs = vec![0.0; 4];
        assert_eq!(sample_mask(&plan, &mut rng).d_hat(), 4);
        plan.probs = vec![1.0; 4];
        assert_eq!(sample_mask(&plan, &mut rng).d_hat(), 0);
    }

    #[test]
    fn mean_survivor_count() {
        let plan = compute_probabilities(&[0.4, 0.4, 0.1, 0.1], 2.0, None).unwrap();
        let mut rng = SimRng::new(11);
        let n = 100_000;
        let total: usize = (0..n).map(|_| sample_mask(&plan, &mut rng).d_hat()).sum();
        let mean = total as f64 / n as f64;
        assert!((1.98..=2.02).contains(&mean), "mean {mean}");
    }

    #[test]
    fn scaling_and_selection() {
        let f = IntermediateMatrix::from_columns(2, &[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let plan = DropoutPlan {
            sigma: vec![0.0; 2],
            q: vec![0.0; 2],
            probs: vec![0.5, 0.0],
            c_bias: 0.0,
            target_d: 1.5,
        };
        let mask = DropoutMask::from_delta(vec![true, true]);
        let out = apply_dropout(&f, &mask, &plan).unwrap();
        assert_eq!(out.column(0), &[2.0, 4.0]);
        assert_eq!(out.column(1), &[3.0, 4.0]);
    }

    #[test]
    fn gradient_dropping() {
        let cols: Vec<Vec<f64>> = (0..6).map(|j| vec![j as f64; 3]).collect();
        let g = IntermediateMatrix::from_columns(3, &cols).unwrap();

        let all = drop_gradients(&g, &DropoutMask::keep_all(6)).unwrap();
        assert_eq!(all, g.select_columns(&[0, 1, 2, 3, 4, 5]).unwrap());

        let none = drop_gradients(&g, &DropoutMask::from_delta(vec![false; 6])).unwrap();
        assert_eq!(none.cols(), 0);
        let restored = restore_columns(&none, &DropoutMask::from_delta(vec![false; 6])).unwrap();
        assert!(restored.as_col_major().iter().all(|v| *v == 0.0));

        // Columns 2 and 5 in one-based terms.
        let mask = DropoutMask::from_delta(vec![false, true, false, false, true, false]);
        let kept = drop_gradients(&g, &mask).unwrap();
        assert_eq!(kept.column(0), &[1.0; 3]);
        assert_eq!(kept.column(1), &[4.0; 3]);

        let short = IntermediateMatrix::zeros(3, 5);
        assert!(drop_gradients(&short, &mask).is_err());
    }

    #[test]
    fn backprop_scaling() {
        let plan = DropoutPlan {
            sigma: vec![0.0; 3],
            q: vec![0.0; 3],
            probs: vec![0.75, 0.0, 0.5],
            c_bias: 0.0,
            target_d: 1.75,
        };
        let mask = DropoutMask::from_delta(vec![true, true, false]);
        let g_hat = IntermediateMatrix::from_columns(2, &[vec![1.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let full = backprop_scale(&g_hat, &mask, &plan).unwrap();
        assert_eq!(full.column(0), &[4.0, 4.0]);
        assert_eq!(full.column(1), &[2.0, 3.0]);
        assert_eq!(full.column(2), &[0.0, 0.0]);
    }

    #[test]
    fn reconstruction_is_unbiased() {
        let mut rng = SimRng::new(5);
        let cols: Vec<Vec<f64>> = (0..6).map(|j| (0..4).map(|b| (j * 4 + b) as f64 * 0.1 - 1.0).collect()).collect();
        let f = IntermediateMatrix::from_columns(4, &cols).unwrap();
        let plan = compute_probabilities(&[0.9, 0.5, 0.3, 0.2, 0.1, 0.05], 3.0, None).unwrap();
        let n = 100_000;
        let mut sum = vec![0.0; 24];
        let mut sum_sq = vec![0.0; 24];
        for _ in 0..n {
            let mask = sample_mask(&plan, &mut rng);
            let recon = restore_columns(&apply_dropout(&f, &mask, &plan).unwrap(), &mask).unwrap();
            for (i, v) in recon.as_col_major().iter().enumerate() {
                sum[i] += v;
                sum_sq[i] += v * v;
            }
        }
        for (i, target) in f.as_col_major().iter().enumerate() {
            let mean = sum[i] / n as f64;
            let var = (sum_sq[i] / n as f64 - mean * mean).max(0.0);
            let se = (var / n as f64).sqrt();
            assert!((mean - target).abs() <= 3.0 * se + 1e-9 * target.abs(), "entry {i}: {mean} vs {target} (se {se})");
        }
    }

    proptest! {
        #[test]
        fn plan_invariants(
            sigma in prop::collection::vec(0.0f64..1.0, 2..40),
            frac in 0.01f64..0.99,
            skew in 0usize..3,
        ) {
            let mut sigma = sigma;
            // Push some vectors into the biased branch.
            if skew > 0 { sigma[0] += 10.0 * skew as f64; }
            let d = frac * sigma.len() as f64;
            let plan = compute_probabilities(&sigma, d, None).unwrap();
            prop_assert!((plan.expected_survivors() - d).abs() < 1e-9);
            for &p in &plan.probs {
                prop_assert!((0.0..=1.0).contains(&p));
            }
            for i in 0..sigma.len() {
                for j in 0..sigma.len() {
                    if sigma[i] > sigma[j] {
                        prop_assert!(plan.probs[i] <= plan.probs[j] + 1e-15);
                    }
                }
            }
        }
    }
}
