//! Per-parameter update probabilities from gradient-norm statistics.
//!
//! A scheme turns the current gradient snapshot into one Bernoulli success
//! probability per scalar parameter. The adaptive schemes standardize
//! absolute gradients within each (layer, kind) group and standardize the
//! group means across groups, then pass the scores through a logistic gate.

use crate::error::OptimError;
use crate::model::ParameterGroup;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Logistic gate `1 / (1 + exp(-slope*x - offset))`, evaluated without
/// overflow for any finite argument.
pub fn gate_sigmoid(x: f64, slope: f64, offset: f64) -> f64 {
    let t = slope * x + offset;
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Absolute-gradient moments per group plus size-weighted cross-group
/// moments of the group means.
#[derive(Debug, Clone)]
pub struct GroupStats {
    /// Per group: (mean |g|, population std |g|, group size).
    pub per_group: Vec<(f64, f64, usize)>,
    /// Size-weighted mean of the group means.
    pub cross_mean: f64,
    /// Size-weighted population std of the group means.
    pub cross_std: f64,
}

/// Moments of |g| per group and across groups, weighted by group size.
pub fn compute_group_stats(
    grads: &[f64],
    groups: &[ParameterGroup],
) -> Result<GroupStats, OptimError> {
    validate_finite(grads, groups)?;
    let mut per_group = Vec::with_capacity(groups.len());
    for g in groups {
        assert!(g.len > 0, "empty parameter group");
        let slice = &grads[g.offset..g.offset + g.len];
        let mut sum = 0.0;
        for &v in slice {
            sum += v.abs();
        }
        let mean = sum / g.len as f64;
        let mut sq = 0.0;
        for &v in slice {
            let d = v.abs() - mean;
            sq += d * d;
        }
        per_group.push((mean, (sq / g.len as f64).sqrt(), g.len));
    }
    let total: usize = per_group.iter().map(|&(_, _, n)| n).sum();
    let mut weighted = 0.0;
    for &(mean, _, n) in &per_group {
        weighted += n as f64 * mean;
    }
    let cross_mean = weighted / total as f64;
    let mut sq = 0.0;
    for &(mean, _, n) in &per_group {
        let d = mean - cross_mean;
        sq += n as f64 * d * d;
    }
    let cross_std = (sq / total as f64).sqrt();
    Ok(GroupStats {
        per_group,
        cross_mean,
        cross_std,
    })
}

fn validate_finite(grads: &[f64], groups: &[ParameterGroup]) -> Result<(), OptimError> {
    if let Some(param) = grads.iter().position(|v| !v.is_finite()) {
        let group = groups
            .iter()
            .find(|g| param >= g.offset && param < g.offset + g.len);
        let (layer, kind) = group.map_or((0, "unknown"), |g| (g.layer, g.kind.name()));
        return Err(OptimError::NonFiniteGradient { param, layer, kind });
    }
    Ok(())
}

/// Per-parameter probabilities plus the standardized scores and per-group
/// gate offsets they were derived from.
#[derive(Debug, Clone)]
pub struct ProbabilityField {
    pub probs: Vec<f64>,
    pub scores: Vec<f64>,
    pub offsets: Vec<f64>,
}

/// Shared kernel for the adaptive schemes.
///
/// Standardization guards: a group with zero std maps all its scores to 0;
/// zero cross-group std maps all standardized group means to 0. Both leave
/// the gate at its symmetric point.
fn adaptive_field(
    grads: &[f64],
    groups: &[ParameterGroup],
    slope: f64,
    cross_slope: f64,
) -> Result<ProbabilityField, OptimError> {
    let stats = compute_group_stats(grads, groups)?;
    let total: usize = groups.last().map_or(0, |g| g.offset + g.len);
    let mut probs = vec![0.0; total];
    let mut scores = vec![0.0; total];
    let mut offsets = Vec::with_capacity(groups.len());
    for (g, &(mean, std, _)) in groups.iter().zip(&stats.per_group) {
        let standardized_mean = if stats.cross_std > 0.0 {
            (mean - stats.cross_mean) / stats.cross_std
        } else {
            0.0
        };
        let offset = cross_slope * standardized_mean;
        offsets.push(offset);
        for j in g.offset..g.offset + g.len {
            let score = if std > 0.0 {
                (grads[j].abs() - mean) / std
            } else {
                0.0
            };
            scores[j] = score;
            probs[j] = gate_sigmoid(score, slope, offset);
        }
    }
    Ok(ProbabilityField {
        probs,
        scores,
        offsets,
    })
}

/// A probability scheme: gradient snapshot in, Bernoulli field out.
pub trait ProbabilityScheme: Send + Sync {
    fn name(&self) -> &'static str;
    fn field(
        &self,
        grads: &[f64],
        groups: &[ParameterGroup],
    ) -> Result<ProbabilityField, OptimError>;
}

struct ConstantScheme {
    p: f64,
}

impl ProbabilityScheme for ConstantScheme {
    fn name(&self) -> &'static str {
        "constant"
    }
    fn field(
        &self,
        grads: &[f64],
        groups: &[ParameterGroup],
    ) -> Result<ProbabilityField, OptimError> {
        validate_finite(grads, groups)?;
        Ok(ProbabilityField {
            probs: vec![self.p; grads.len()],
            scores: vec![0.0; grads.len()],
            offsets: vec![0.0; groups.len()],
        })
    }
}

struct LocalScheme {
    slope: f64,
}

impl ProbabilityScheme for LocalScheme {
    fn name(&self) -> &'static str {
        "local"
    }
    fn field(
        &self,
        grads: &[f64],
        groups: &[ParameterGroup],
    ) -> Result<ProbabilityField, OptimError> {
        adaptive_field(grads, groups, self.slope, 0.0)
    }
}

struct GlobalScheme {
    cross_slope: f64,
}

impl ProbabilityScheme for GlobalScheme {
    fn name(&self) -> &'static str {
        "global"
    }
    fn field(
        &self,
        grads: &[f64],
        groups: &[ParameterGroup],
    ) -> Result<ProbabilityField, OptimError> {
        adaptive_field(grads, groups, 0.0, self.cross_slope)
    }
}

struct CombinedScheme {
    slope: f64,
    cross_slope: f64,
}

impl ProbabilityScheme for CombinedScheme {
    fn name(&self) -> &'static str {
        "combined"
    }
    fn field(
        &self,
        grads: &[f64],
        groups: &[ParameterGroup],
    ) -> Result<ProbabilityField, OptimError> {
        adaptive_field(grads, groups, self.slope, self.cross_slope)
    }
}

/// Independent Bernoulli draws, one per parameter in index order.
pub fn sample_indicators(field: &ProbabilityField, rng: &mut ChaCha12Rng) -> Vec<bool> {
    field
        .probs
        .iter()
        .map(|&p| rng.random::<f64>() < p)
        .collect()
}

/// Scheme hyperparameters; each constructor reads what it needs.
#[derive(Debug, Clone)]
pub struct ProbParams {
    /// Within-group slope of the logistic gate.
    pub alpha: f64,
    /// Cross-group slope applied to the standardized group means.
    pub lambda: f64,
    /// Probability used by the constant scheme, in (0, 1].
    pub constant_p: f64,
}

impl Default for ProbParams {
    fn default() -> Self {
        ProbParams {
            alpha: 0.1,
            lambda: -4.0,
            constant_p: 1.0,
        }
    }
}

type Ctor = fn(&ProbParams) -> Result<Box<dyn ProbabilityScheme>, crate::error::StrategyError>;

fn build_constant(p: &ProbParams) -> Result<Box<dyn ProbabilityScheme>, crate::error::StrategyError> {
    if !(p.constant_p > 0.0 && p.constant_p <= 1.0) {
        return Err(crate::error::StrategyError::InvalidParam {
            family: "probability scheme",
            param: "constant_p",
            msg: format!("must lie in (0, 1], got {}", p.constant_p),
        });
    }
    Ok(Box::new(ConstantScheme { p: p.constant_p }))
}

fn build_local(p: &ProbParams) -> Result<Box<dyn ProbabilityScheme>, crate::error::StrategyError> {
    Ok(Box::new(LocalScheme { slope: p.alpha }))
}

fn build_global(p: &ProbParams) -> Result<Box<dyn ProbabilityScheme>, crate::error::StrategyError> {
    Ok(Box::new(GlobalScheme {
        cross_slope: p.lambda,
    }))
}

fn build_combined(p: &ProbParams) -> Result<Box<dyn ProbabilityScheme>, crate::error::StrategyError> {
    Ok(Box::new(CombinedScheme {
        slope: p.alpha,
        cross_slope: p.lambda,
    }))
}

const REGISTRY: &[(&str, Ctor)] = &[
    ("constant", build_constant),
    ("local", build_local),
    ("global", build_global),
    ("combined", build_combined),
];

pub fn names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

pub fn build(
    name: &str,
    params: &ProbParams,
) -> Result<Box<dyn ProbabilityScheme>, crate::error::StrategyError> {
    for (n, ctor) in REGISTRY {
        if *n == name {
            return ctor(params);
        }
    }
    Err(crate::error::StrategyError::Unknown {
        family: "probability scheme",
        name: name.to_string(),
        known: names().join(", "),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamKind;

    fn groups(sizes: &[usize]) -> Vec<ParameterGroup> {
        let mut offset = 0;
        sizes
            .iter()
            .enumerate()
            .map(|(i, &len)| {
                let g = ParameterGroup {
                    layer: i + 1,
                    kind: ParamKind::FullyConnected,
                    offset,
                    len,
                };
                offset += len;
                g
            })
            .collect()
    }

    #[test]
    fn sigmoid_basics() {
        assert_eq!(gate_sigmoid(0.0, 3.7, 0.0), 0.5);
        assert_eq!(gate_sigmoid(123.0, 0.0, 0.0), 0.5);
        for &(x, slope, offset) in &[(0.3, 1.0, 0.2), (-4.0, 0.5, 1.0), (9.0, 2.0, -3.0)] {
            let sum = gate_sigmoid(x, slope, offset) + gate_sigmoid(-x, slope, -offset);
            assert!((sum - 1.0).abs() < 1e-15);
        }
        // No overflow deep into the tails.
        assert!(gate_sigmoid(700.0, 1.0, 0.0).is_finite());
        assert!(gate_sigmoid(-700.0, 1.0, 0.0) >= 0.0);
    }

    #[test]
    fn group_stats_hand_values() {
        // |g| = {1, 0, 1}: mean 2/3, population std sqrt(2/9).
        let gs = groups(&[3]);
        let stats = compute_group_stats(&[-1.0, 0.0, 1.0], &gs).unwrap();
        let (mean, std, n) = stats.per_group[0];
        assert!((mean - 2.0 / 3.0).abs() < 1e-15);
        assert!((std - (2.0f64 / 9.0).sqrt()).abs() < 1e-15);
        assert_eq!(n, 3);
    }

    #[test]
    fn cross_group_weighted_mean() {
        // Sizes 1 and 3 with group means 1 and 5: weighted mean 4.
        let gs = groups(&[1, 3]);
        let stats = compute_group_stats(&[1.0, 5.0, 5.0, 5.0], &gs).unwrap();
        assert!((stats.per_group[0].0 - 1.0).abs() < 1e-15);
        assert!((stats.per_group[1].0 - 5.0).abs() < 1e-15);
        assert!((stats.cross_mean - 4.0).abs() < 1e-15);
        // Weighted-mean identity.
        let total: f64 = stats.per_group.iter().map(|&(_, _, n)| n as f64).sum();
        let weighted: f64 = stats
            .per_group
            .iter()
            .map(|&(m, _, n)| m * n as f64)
            .sum::<f64>()
            / total;
        assert_eq!(weighted, stats.cross_mean);
    }

    #[test]
    fn constant_gradients_zero_std() {
        let gs = groups(&[4]);
        let stats = compute_group_stats(&[2.0, 2.0, 2.0, 2.0], &gs).unwrap();
        assert_eq!(stats.per_group[0].1, 0.0);
        // Guard maps scores to 0 and the local gate to 1/2.
        let field = build("local", &ProbParams::default())
            .unwrap()
            .field(&[2.0, 2.0, 2.0, 2.0], &gs)
            .unwrap();
        assert!(field.probs.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn local_standardization_moments() {
        let gs = groups(&[5, 7]);
        let grads: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37 - 2.0) * 1.7).collect();
        let field = build("local", &ProbParams::default())
            .unwrap()
            .field(&grads, &gs)
            .unwrap();
        for g in &gs {
            let scores = &field.scores[g.offset..g.offset + g.len];
            let mean: f64 = scores.iter().sum::<f64>() / g.len as f64;
            let var: f64 = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / g.len as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn alpha_zero_gives_half_everywhere() {
        let gs = groups(&[3, 3]);
        let grads = [0.3, -1.0, 2.0, 0.1, 0.1, 4.0];
        let p = ProbParams {
            alpha: 0.0,
            lambda: 0.0,
            constant_p: 1.0,
        };
        for name in ["local", "combined"] {
            let field = build(name, &p).unwrap().field(&grads, &gs).unwrap();
            assert!(field.probs.iter().all(|&v| v == 0.5), "{name}");
        }
    }

    #[test]
    fn global_constant_within_group() {
        let gs = groups(&[4, 4]);
        let grads = [0.1, 3.0, -2.0, 0.7, 5.0, 5.5, -6.0, 4.8];
        let field = build("global", &ProbParams::default())
            .unwrap()
            .field(&grads, &gs)
            .unwrap();
        for g in &gs {
            let p = &field.probs[g.offset..g.offset + g.len];
            assert!(p.iter().all(|&v| v == p[0]));
        }
    }

    #[test]
    fn combined_reduces_to_local_and_global_bitwise() {
        let gs = groups(&[5, 3]);
        let grads: Vec<f64> = (0..8).map(|i| (i as f64 - 3.0) * 0.9).collect();
        let base = ProbParams::default();

        let local = build("local", &base).unwrap().field(&grads, &gs).unwrap();
        let combined_no_cross = build(
            "combined",
            &ProbParams {
                lambda: 0.0,
                ..base.clone()
            },
        )
        .unwrap()
        .field(&grads, &gs)
        .unwrap();
        assert_eq!(bits(&local.probs), bits(&combined_no_cross.probs));

        let global = build("global", &base).unwrap().field(&grads, &gs).unwrap();
        let combined_no_slope = build(
            "combined",
            &ProbParams {
                alpha: 0.0,
                ..base
            },
        )
        .unwrap()
        .field(&grads, &gs)
        .unwrap();
        assert_eq!(bits(&global.probs), bits(&combined_no_slope.probs));
    }

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn combined_table_point() {
        // Two equal groups crafted so group 1 has standardized mean 1 and
        // zero within-group spread: p = 1/(1+e^4) with slope 0.1, cross -4.
        let gs = groups(&[3, 3]);
        let grads = [2.0, 2.0, 2.0, 1.0, 1.0, 1.0];
        let field = build("combined", &ProbParams::default())
            .unwrap()
            .field(&grads, &gs)
            .unwrap();
        let expected = 1.0 / (1.0 + 4.0f64.exp());
        for &p in &field.probs[0..3] {
            assert!((p - expected).abs() < 1e-12, "p = {p}");
        }
        assert!((field.offsets[0] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn monotone_in_scores_when_slope_positive() {
        let gs = groups(&[16]);
        let grads: Vec<f64> = (0..16).map(|i| (i as f64 * 1.37).sin() * 3.0).collect();
        let field = build("local", &ProbParams::default())
            .unwrap()
            .field(&grads, &gs)
            .unwrap();
        let mut pairs: Vec<(f64, f64)> = field
            .scores
            .iter()
            .copied()
            .zip(field.probs.iter().copied())
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            if w[0].0 < w[1].0 {
                assert!(w[0].1 < w[1].1);
            }
        }
    }

    #[test]
    fn non_finite_gradient_is_reported_with_group() {
        let gs = groups(&[2, 2]);
        let err = compute_group_stats(&[0.0, 1.0, f64::NAN, 2.0], &gs).unwrap_err();
        match err {
            OptimError::NonFiniteGradient { param, layer, .. } => {
                assert_eq!(param, 2);
                assert_eq!(layer, 2);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn indicator_sampling_contracts() {
        let field = ProbabilityField {
            probs: vec![1.0; 8],
            scores: vec![0.0; 8],
            offsets: vec![0.0],
        };
        let mut rng = crate::rng::stream(5, &[1]);
        assert!(sample_indicators(&field, &mut rng).iter().all(|&b| b));

        let mut a = crate::rng::stream(5, &[2]);
        let mut b = crate::rng::stream(5, &[2]);
        let field = ProbabilityField {
            probs: vec![0.3; 64],
            scores: vec![0.0; 64],
            offsets: vec![0.0],
        };
        assert_eq!(
            sample_indicators(&field, &mut a),
            sample_indicators(&field, &mut b)
        );
    }

    #[test]
    fn bernoulli_frequency_concentrates() {
        let field = ProbabilityField {
            probs: vec![0.5],
            scores: vec![0.0],
            offsets: vec![0.0],
        };
        let mut rng = crate::rng::stream(17, &[3]);
        let draws = 100_000;
        let mut ones = 0usize;
        for _ in 0..draws {
            if sample_indicators(&field, &mut rng)[0] {
                ones += 1;
            }
        }
        let freq = ones as f64 / draws as f64;
        assert!((freq - 0.5).abs() < 0.00474, "freq {freq}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn scale_invariance_of_local_scores(scale in 0.01f64..100.0) {
                let gs = groups(&[6, 4]);
                let grads: Vec<f64> = (0..10).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
                let scaled: Vec<f64> = grads.iter().map(|g| g * scale).collect();
                let scheme = build("local", &ProbParams::default()).unwrap();
                let a = scheme.field(&grads, &gs).unwrap();
                let b = scheme.field(&scaled, &gs).unwrap();
                for (x, y) in a.probs.iter().zip(&b.probs) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }

            #[test]
            fn power_of_two_scaling_is_bitwise(exp in -8i32..8) {
                let gs = groups(&[6, 4]);
                let grads: Vec<f64> = (0..10).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
                let scale = 2.0f64.powi(exp);
                let scaled: Vec<f64> = grads.iter().map(|g| g * scale).collect();
                let scheme = build("local", &ProbParams::default()).unwrap();
                let a = scheme.field(&grads, &gs).unwrap();
                let b = scheme.field(&scaled, &gs).unwrap();
                prop_assert_eq!(bits(&a.probs), bits(&b.probs));
            }

            #[test]
            fn symmetric_scores_average_to_half(seed in 0u64..500) {
                // Absolute gradients placed symmetrically about a common
                // centre give a negation-closed score multiset, which keeps
                // the zero-offset gate balanced.
                let gs = groups(&[8]);
                let mut rng = crate::rng::stream(seed, &[9]);
                let mut grads = vec![0.0; 8];
                let centre = 5.0;
                for i in 0..4 {
                    let d: f64 = rng.random::<f64>() * 3.0 + 0.5;
                    grads[i] = centre + d;
                    grads[i + 4] = centre - d;
                }
                let field = build("local", &ProbParams { alpha: 0.7, ..ProbParams::default() })
                    .unwrap()
                    .field(&grads, &gs)
                    .unwrap();
                let mean: f64 = field.probs.iter().sum::<f64>() / 8.0;
                prop_assert!((mean - 0.5).abs() < 1e-12);
            }
        }
    }
}
