//! Offline layer profiling (mean input-output cosine similarity) and
//! softmax-temperature budget allocation across layers.
//!
//! Layers whose outputs stay close to their inputs (cosine near 1) are
//! near-identity and tolerate small token budgets; the softmax over
//! `1 - rho_bar` concentrates the global budget on high-transformation
//! layers. Temperature flattens or sharpens that distribution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BudgetError {
    #[error("empty profile")]
    EmptyProfile,
    #[error("layer {layer} has no samples")]
    EmptyLayer { layer: usize },
    #[error("zero-norm vector at layer {layer}, sample {sample}")]
    ZeroNormSample { layer: usize, sample: usize },
    #[error("vector length mismatch at layer {layer}, sample {sample}: {x_len} vs {y_len}")]
    SampleDimMismatch {
        layer: usize,
        sample: usize,
        x_len: usize,
        y_len: usize,
    },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("infeasible budget: total {total} < {layers} layers x floor {floor}")]
    InfeasibleBudget {
        total: usize,
        layers: usize,
        floor: usize,
    },
}

/// Per-layer mean input-output cosine similarity with sample counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    rho_bar: Vec<f64>,
    sample_count: Vec<usize>,
}

impl LayerProfile {
    /// Builds a profile from per-layer mean cosines, clamping float residue
    /// outside `[-1, 1]`.
    pub fn new(rho_bar: Vec<f64>, sample_count: Vec<usize>) -> Result<Self, BudgetError> {
        if rho_bar.is_empty() {
            return Err(BudgetError::EmptyProfile);
        }
        if let Some(layer) = sample_count.iter().position(|&c| c == 0) {
            return Err(BudgetError::EmptyLayer { layer });
        }
        assert_eq!(rho_bar.len(), sample_count.len());
        Ok(Self {
            rho_bar: rho_bar.into_iter().map(|r| r.clamp(-1.0, 1.0)).collect(),
            sample_count,
        })
    }

    /// Convenience constructor for a profile without recorded sample counts
    /// (each layer marked as one sample).
    pub fn from_rho(rho_bar: Vec<f64>) -> Result<Self, BudgetError> {
        let n = rho_bar.len();
        Self::new(rho_bar, vec![1; n])
    }

    pub fn layer_count(&self) -> usize {
        self.rho_bar.len()
    }

    pub fn rho_bar(&self) -> &[f64] {
        &self.rho_bar
    }

    pub fn sample_count(&self) -> &[usize] {
        &self.sample_count
    }
}

/// Per-layer budget vector with its provenance (temperature, total, floor).
/// `temperature` is absent for uniform plans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub budgets: Vec<usize>,
    pub total: usize,
    pub temperature: Option<f64>,
    pub floor: usize,
}

impl BudgetPlan {
    pub fn layer_count(&self) -> usize {
        self.budgets.len()
    }

    /// Checks conservation and the per-layer floor.
    pub fn validate(&self) -> Result<(), BudgetError> {
        if self.budgets.is_empty() {
            return Err(BudgetError::EmptyProfile);
        }
        let sum: usize = self.budgets.iter().sum();
        if sum != self.total || self.budgets.iter().any(|&b| b < self.floor) {
            return Err(BudgetError::InfeasibleBudget {
                total: self.total,
                layers: self.budgets.len(),
                floor: self.floor,
            });
        }
        Ok(())
    }
}

/// Mean cosine similarity per layer over recorded (input, output) activation
/// pairs. Multi-dimensional activations are expected pre-flattened row-major;
/// the cosine is taken on the whole flattened vector per sample.
pub fn mean_cosine_profile(
    samples: &[Vec<(Vec<f64>, Vec<f64>)>],
) -> Result<LayerProfile, BudgetError> {
    if samples.is_empty() {
        return Err(BudgetError::EmptyProfile);
    }
    let mut rho_bar = Vec::with_capacity(samples.len());
    let mut counts = Vec::with_capacity(samples.len());
    for (layer, pairs) in samples.iter().enumerate() {
        if pairs.is_empty() {
            return Err(BudgetError::EmptyLayer { layer });
        }
        let mut sum = 0.0;
        for (sample, (x, y)) in pairs.iter().enumerate() {
            if x.len() != y.len() {
                return Err(BudgetError::SampleDimMismatch {
                    layer,
                    sample,
                    x_len: x.len(),
                    y_len: y.len(),
                });
            }
            let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            let nx: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nx == 0.0 || ny == 0.0 {
                return Err(BudgetError::ZeroNormSample { layer, sample });
            }
            sum += dot / (nx * ny);
        }
        rho_bar.push(sum / pairs.len() as f64);
        counts.push(pairs.len());
    }
    LayerProfile::new(rho_bar, counts)
}

/// Softmax-temperature budget allocation.
///
/// Layer importance is `a = 1 - rho_bar`; shares come from an overflow-safe
/// softmax `exp(a/tau)` with max-subtraction. Each budget is the floored
/// share of `b_total`; the whole rounding residual goes to the single
/// highest-share layer (ties to the lowest index). Layers below `floor` are
/// raised to it and the deficit is taken one token at a time from the
/// currently largest layer (ties to the lowest index) until the total is
/// conserved.
pub fn allocate_budgets(
    profile: &LayerProfile,
    tau: f64,
    b_total: usize,
    floor: usize,
) -> Result<BudgetPlan, BudgetError> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(BudgetError::NonPositiveTemperature(tau));
    }
    let layers = profile.layer_count();
    if b_total < layers * floor {
        return Err(BudgetError::InfeasibleBudget {
            total: b_total,
            layers,
            floor,
        });
    }

    let logits: Vec<f64> = profile.rho_bar().iter().map(|r| (1.0 - r) / tau).collect();
    let max_logit = logits.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max_logit).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let shares: Vec<f64> = exps.iter().map(|e| e / denom).collect();

    let mut budgets: Vec<usize> = shares
        .iter()
        .map(|pi| (pi * b_total as f64).floor() as usize)
        .collect();

    // Full rounding residual to the highest-share layer, lowest index on ties.
    let residual = b_total - budgets.iter().sum::<usize>();
    let top = shares
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
        .map(|(i, _)| i)
        .unwrap();
    budgets[top] += residual;

    // Floor repair: raise deficits, then shave the largest layer one token
    // at a time. b_total >= layers*floor guarantees the largest layer stays
    // at or above floor throughout.
    let mut deficit = 0usize;
    for b in budgets.iter_mut() {
        if *b < floor {
            deficit += floor - *b;
            *b = floor;
        }
    }
    for _ in 0..deficit {
        let largest = budgets
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.cmp(b).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .unwrap();
        budgets[largest] -= 1;
    }

    let plan = BudgetPlan {
        budgets,
        total: b_total,
        temperature: Some(tau),
        floor,
    };
    debug_assert!(plan.validate().is_ok());
    Ok(plan)
}

/// One plan per temperature. For a fixed non-constant profile the budget
/// vector flattens (variance nonincreasing) as tau grows.
pub fn sweep_temperature(
    profile: &LayerProfile,
    taus: &[f64],
    b_total: usize,
    floor: usize,
) -> Result<Vec<BudgetPlan>, BudgetError> {
    taus.iter()
        .map(|&tau| allocate_budgets(profile, tau, b_total, floor))
        .collect()
}

/// Population variance of a budget vector, for flattening checks.
pub fn budget_variance(budgets: &[usize]) -> f64 {
    let n = budgets.len() as f64;
    let mean = budgets.iter().sum::<usize>() as f64 / n;
    budgets
        .iter()
        .map(|&b| (b as f64 - mean).powi(2))
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0), "{a} vs {b}");
    }

    #[test]
    fn identity_layers_profile_to_one() {
        let samples = vec![
            vec![(vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0])],
            vec![(vec![0.5, -0.25], vec![0.5, -0.25]); 3],
        ];
        let profile = mean_cosine_profile(&samples).unwrap();
        assert_close(profile.rho_bar()[0], 1.0);
        assert_close(profile.rho_bar()[1], 1.0);
        assert_eq!(profile.sample_count(), &[1, 3]);
    }

    #[test]
    fn antiparallel_outputs_profile_to_minus_one() {
        let samples = vec![vec![(vec![1.0, -2.0, 0.5], vec![-1.0, 2.0, -0.5])]];
        let profile = mean_cosine_profile(&samples).unwrap();
        assert_close(profile.rho_bar()[0], -1.0);
    }

    #[test]
    fn hand_built_vectors_match_per_sample_cosine_oracle() {
        let pairs = vec![
            (vec![1.0, 0.0, 0.0, 0.0], vec![1.0, 1.0, 0.0, 0.0]),
            (vec![0.0, 2.0, 0.0, 1.0], vec![0.0, 1.0, 1.0, 0.0]),
            (vec![1.0, 1.0, 1.0, 1.0], vec![2.0, 2.0, 2.0, 2.0]),
        ];
        let profile = mean_cosine_profile(std::slice::from_ref(&pairs)).unwrap();
        // Per-sample cosines computed independently, then averaged.
        let cos = |x: &[f64], y: &[f64]| {
            let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            dot / (x.iter().map(|v| v * v).sum::<f64>().sqrt()
                * y.iter().map(|v| v * v).sum::<f64>().sqrt())
        };
        let expected: f64 =
            pairs.iter().map(|(x, y)| cos(x, y)).sum::<f64>() / pairs.len() as f64;
        assert_close(profile.rho_bar()[0], expected);
    }

    #[test]
    fn zero_norm_sample_is_located() {
        let samples = vec![
            vec![(vec![1.0], vec![1.0])],
            vec![
                (vec![1.0, 1.0], vec![1.0, 0.0]),
                (vec![0.0, 0.0], vec![1.0, 0.0]),
            ],
        ];
        assert_eq!(
            mean_cosine_profile(&samples).unwrap_err(),
            BudgetError::ZeroNormSample { layer: 1, sample: 1 }
        );
    }

    #[test]
    fn uniform_profile_divisible_total() {
        let profile = LayerProfile::from_rho(vec![0.8; 24]).unwrap();
        let plan = allocate_budgets(&profile, 0.5, 1_200_000, 0).unwrap();
        assert!(plan.budgets.iter().all(|&b| b == 50_000));
        assert_eq!(plan.budgets.iter().sum::<usize>(), 1_200_000);
    }

    #[test]
    fn uniform_profile_residual_to_layer_zero() {
        let layers = 24;
        let k = 1000;
        let profile = LayerProfile::from_rho(vec![0.5; layers]).unwrap();
        let plan = allocate_budgets(&profile, 0.7, layers * k + 3, 0).unwrap();
        assert_eq!(plan.budgets[0], k + 3);
        assert!(plan.budgets[1..].iter().all(|&b| b == k));
    }

    #[test]
    fn minimum_similarity_layer_gets_maximum_budget() {
        let profile =
            LayerProfile::from_rho(vec![0.9, 0.7, 0.95, 0.4, 0.8, 0.99]).unwrap();
        let plan = allocate_budgets(&profile, 0.5, 100_000, 1).unwrap();
        let argmax = plan
            .budgets
            .iter()
            .enumerate()
            .max_by_key(|&(_, b)| b)
            .unwrap()
            .0;
        assert_eq!(argmax, 3);
    }

    #[test]
    fn near_zero_temperature_concentrates_to_floor() {
        let profile = LayerProfile::from_rho(vec![0.0, 1.0]).unwrap();
        let floor = 25;
        let total = 10_000;
        let plan = allocate_budgets(&profile, 1e-3, total, floor).unwrap();
        assert_eq!(plan.budgets, vec![total - floor, floor]);
    }

    #[test]
    fn infeasible_and_invalid_inputs() {
        let profile = LayerProfile::from_rho(vec![0.5; 4]).unwrap();
        assert!(matches!(
            allocate_budgets(&profile, 0.5, 3, 1),
            Err(BudgetError::InfeasibleBudget { .. })
        ));
        assert!(matches!(
            allocate_budgets(&profile, 0.0, 100, 1),
            Err(BudgetError::NonPositiveTemperature(_))
        ));
        assert!(matches!(
            allocate_budgets(&profile, -1.0, 100, 1),
            Err(BudgetError::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn floor_repair_preserves_total() {
        // Extreme profile: softmax share of the high-similarity layers
        // rounds to almost nothing, forcing floor repair.
        let profile = LayerProfile::from_rho(vec![0.0, 0.99, 0.99, 0.99]).unwrap();
        let floor = 100;
        let plan = allocate_budgets(&profile, 0.05, 1_000, floor).unwrap();
        assert_eq!(plan.budgets.iter().sum::<usize>(), 1_000);
        assert!(plan.budgets.iter().all(|&b| b >= floor));
        assert_eq!(plan.budgets[0], 700);
    }

    #[test]
    fn temperature_sweep_flattens() {
        let profile =
            LayerProfile::from_rho(vec![0.95, 0.9, 0.61, 0.7, 0.85, 0.99]).unwrap();
        let plans =
            sweep_temperature(&profile, &[0.3, 0.5, 0.7, 1.0], 600_000, 1).unwrap();
        assert_eq!(plans.len(), 4);
        let variances: Vec<f64> = plans.iter().map(|p| budget_variance(&p.budgets)).collect();
        for w in variances.windows(2) {
            assert!(w[1] <= w[0], "variance must not increase with tau: {variances:?}");
        }
    }

    #[test]
    fn constant_profile_sweep_is_uniform_at_any_temperature() {
        let profile = LayerProfile::from_rho(vec![0.8; 5]).unwrap();
        let plans = sweep_temperature(&profile, &[0.1, 1.0, 10.0], 500, 0).unwrap();
        for plan in plans {
            assert_eq!(plan.budgets, vec![100; 5]);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        // Adding a constant to every logit (equivalently shifting every
        // rho_bar by the same amount) leaves the plan unchanged.
        let base = vec![0.9, 0.5, 0.7, 0.95];
        let shifted: Vec<f64> = base.iter().map(|r| r - 0.3).collect();
        let pa = allocate_budgets(&LayerProfile::from_rho(base).unwrap(), 0.5, 77_777, 2)
            .unwrap();
        let pb = allocate_budgets(&LayerProfile::from_rho(shifted).unwrap(), 0.5, 77_777, 2)
            .unwrap();
        assert_eq!(pa.budgets, pb.budgets);
    }
}
