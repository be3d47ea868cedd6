//! Rollouts, populations and per-answer statistics.
//!
//! A rollout is reduced to three things: the canonical answer it produced,
//! its token sequence, and the entropy (in nats) of the next-token
//! distribution at every position. Per-answer uncertainty is the mean token
//! entropy divided by `ln V`, so it always lies in `[0, 1]`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that a probability vector sums to one.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Canonical answer key. Equality is exact key equality and the total order is
/// the lexicographic order of the underlying string.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnswerKey(pub String);

impl AnswerKey {
    pub fn new(key: impl Into<String>) -> Self {
        AnswerKey(key.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AnswerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AnswerKey {
    fn from(s: &str) -> Self {
        AnswerKey(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub answer: AnswerKey,
    pub tokens: Vec<u32>,
    pub entropy_trace: Vec<f64>,
}

impl Rollout {
    pub fn new(answer: impl Into<AnswerKey>, tokens: Vec<u32>, entropy_trace: Vec<f64>) -> Self {
        Self {
            answer: answer.into(),
            tokens,
            entropy_trace,
        }
    }

    /// Checks the rollout against a vocabulary of size `vocab_size`. `field`
    /// prefixes error locations.
    pub fn validate(&self, vocab_size: u32, field: &str) -> Result<()> {
        if self.entropy_trace.is_empty() {
            return Err(Error::validation(
                format!("{field}.entropy_trace"),
                "trace must contain at least one entry",
            ));
        }
        if self.entropy_trace.len() != self.tokens.len() {
            return Err(Error::validation(
                format!("{field}.entropy_trace"),
                format!(
                    "length {} does not match tokens length {}",
                    self.entropy_trace.len(),
                    self.tokens.len()
                ),
            ));
        }
        if let Some(pos) = self.tokens.iter().position(|&t| t >= vocab_size) {
            return Err(Error::validation(
                format!("{field}.tokens[{pos}]"),
                format!(
                    "token {} outside vocabulary of size {vocab_size}",
                    self.tokens[pos]
                ),
            ));
        }
        let max_entropy = f64::from(vocab_size).ln();
        for (pos, &h) in self.entropy_trace.iter().enumerate() {
            if !h.is_finite() || h < 0.0 || h > max_entropy + NORMALIZATION_TOL {
                return Err(Error::validation(
                    format!("{field}.entropy_trace[{pos}]"),
                    format!("entropy {h} outside [0, ln {vocab_size}]"),
                ));
            }
        }
        Ok(())
    }
}

/// The `M` rollouts sampled for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub query_id: String,
    pub vocab_size: u32,
    pub rollouts: Vec<Rollout>,
}

impl Population {
    /// Builds a population and validates it.
    pub fn new(
        query_id: impl Into<String>,
        vocab_size: u32,
        rollouts: Vec<Rollout>,
    ) -> Result<Self> {
        let pop = Self {
            query_id: query_id.into(),
            vocab_size,
            rollouts,
        };
        pop.validate()?;
        Ok(pop)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::validation(
                "vocab_size",
                format!("must be at least 2, got {}", self.vocab_size),
            ));
        }
        if self.rollouts.is_empty() {
            return Err(Error::validation(
                "rollouts",
                "population must contain at least one rollout",
            ));
        }
        for (i, r) in self.rollouts.iter().enumerate() {
            r.validate(self.vocab_size, &format!("rollouts[{i}]"))?;
        }
        Ok(())
    }

    /// Number of rollouts `M`.
    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let pop: Population = serde_json::from_str(text)?;
        pop.validate()?;
        Ok(pop)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Statistics for one distinct answer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerEntry {
    pub count: usize,
    pub mean_uncertainty: f64,
    /// Shaped weight; zero until a distribution has been computed.
    pub weight: f64,
    /// Normalized probability; zero until a distribution has been computed.
    pub probability: f64,
}

/// Per-answer statistics keyed by answer, in canonical key order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnswerStats {
    pub entries: BTreeMap<AnswerKey, AnswerEntry>,
}

impl AnswerStats {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &AnswerKey) -> Option<&AnswerEntry> {
        self.entries.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&AnswerKey, &AnswerEntry)> {
        self.entries.iter()
    }

    /// Sum of counts, i.e. the number of rollouts the table was built from.
    pub fn total_count(&self) -> usize {
        self.entries.values().map(|e| e.count).sum()
    }

    pub fn probabilities(&self) -> BTreeMap<AnswerKey, f64> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.probability))
            .collect()
    }
}

/// Shannon entropy in nats of a probability vector, with `0 ln 0 = 0`.
pub fn token_entropy(distribution: &[f64]) -> Result<f64> {
    if distribution.is_empty() {
        return Err(Error::validation(
            "distribution",
            "empty probability vector",
        ));
    }
    if let Some(i) = distribution.iter().position(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::validation(
            format!("distribution[{i}]"),
            format!("probability {} is negative or non-finite", distribution[i]),
        ));
    }
    let total: f64 = distribution.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::validation(
            "distribution",
            format!("probabilities sum to {total}, expected 1"),
        ));
    }
    let h: f64 = distribution
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    // Rounding can push a one-hot or uniform vector a hair outside [0, ln V].
    Ok(h.clamp(0.0, (distribution.len() as f64).ln()))
}

/// Mean token entropy of a rollout divided by `ln V`.
pub fn normalized_trace_uncertainty(rollout: &Rollout, vocab_size: u32) -> Result<f64> {
    if vocab_size < 2 {
        return Err(Error::validation("vocab_size", "must be at least 2"));
    }
    if rollout.entropy_trace.is_empty() {
        return Err(Error::validation(
            "entropy_trace",
            "trace must contain at least one entry",
        ));
    }
    let mean = rollout.entropy_trace.iter().sum::<f64>() / rollout.entropy_trace.len() as f64;
    Ok((mean / f64::from(vocab_size).ln()).clamp(0.0, 1.0))
}

/// Counts and mean normalized uncertainty per distinct answer. Weights and
/// probabilities are left at zero.
pub fn answer_stats(population: &Population) -> Result<AnswerStats> {
    population.validate()?;
    let mut sums: BTreeMap<AnswerKey, (usize, f64)> = BTreeMap::new();
    for r in &population.rollouts {
        let u = normalized_trace_uncertainty(r, population.vocab_size)?;
        let slot = sums.entry(r.answer.clone()).or_insert((0, 0.0));
        slot.0 += 1;
        slot.1 += u;
    }
    let entries = sums
        .into_iter()
        .map(|(k, (n, total_u))| {
            (
                k,
                AnswerEntry {
                    count: n,
                    mean_uncertainty: (total_u / n as f64).clamp(0.0, 1.0),
                    weight: 0.0,
                    probability: 0.0,
                },
            )
        })
        .collect();
    Ok(AnswerStats { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rollout_with_u(answer: &str, u: f64, vocab: u32) -> Rollout {
        let h = u * f64::from(vocab).ln();
        Rollout::new(answer, vec![0, 1], vec![h, h])
    }

    #[test]
    fn entropy_of_one_hot_is_zero() {
        assert_eq!(token_entropy(&[0.0, 1.0, 0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn entropy_of_uniform_is_log_v() {
        assert_abs_diff_eq!(
            token_entropy(&[0.25; 4]).unwrap(),
            4f64.ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(token_entropy(&[0.25; 4]).unwrap(), 1.3863, epsilon = 1e-4);
    }

    #[test]
    fn entropy_of_skewed_pair() {
        // -(0.9 ln 0.9 + 0.1 ln 0.1)
        assert_abs_diff_eq!(token_entropy(&[0.9, 0.1]).unwrap(), 0.3251, epsilon = 1e-4);
    }

    #[test]
    fn entropy_rejects_bad_vectors() {
        assert!(token_entropy(&[0.5, 0.4]).is_err());
        assert!(token_entropy(&[1.2, -0.2]).is_err());
        assert!(token_entropy(&[]).is_err());
    }

    #[test]
    fn trace_uncertainty_examples() {
        let zero = Rollout::new("A", vec![0, 1, 2], vec![0.0; 3]);
        assert_eq!(normalized_trace_uncertainty(&zero, 8).unwrap(), 0.0);

        let full = Rollout::new("A", vec![0, 1], vec![8f64.ln(); 2]);
        assert_abs_diff_eq!(
            normalized_trace_uncertainty(&full, 8).unwrap(),
            1.0,
            epsilon = 1e-12
        );

        let h = token_entropy(&[0.9, 0.1]).unwrap();
        let mixed = Rollout::new("A", vec![0, 1], vec![h, 0.0]);
        assert_abs_diff_eq!(
            normalized_trace_uncertainty(&mixed, 2).unwrap(),
            0.2345,
            epsilon = 1e-4
        );
    }

    #[test]
    fn trace_uncertainty_rejects_empty_trace() {
        let r = Rollout::new("A", vec![], vec![]);
        assert!(normalized_trace_uncertainty(&r, 4).is_err());
    }

    #[test]
    fn stats_unanimous() {
        let pop = Population::new(
            "q",
            4,
            (0..3).map(|_| rollout_with_u("A", 0.0, 4)).collect(),
        )
        .unwrap();
        let stats = answer_stats(&pop).unwrap();
        assert_eq!(stats.len(), 1);
        let a = stats.get(&"A".into()).unwrap();
        assert_eq!(a.count, 3);
        assert_eq!(a.mean_uncertainty, 0.0);
    }

    #[test]
    fn stats_count_and_average() {
        let pop = Population::new(
            "q",
            16,
            vec![
                rollout_with_u("A", 0.2, 16),
                rollout_with_u("B", 0.5, 16),
                rollout_with_u("A", 0.4, 16),
            ],
        )
        .unwrap();
        let stats = answer_stats(&pop).unwrap();
        let a = stats.get(&"A".into()).unwrap();
        let b = stats.get(&"B".into()).unwrap();
        assert_eq!((a.count, b.count), (2, 1));
        assert_abs_diff_eq!(a.mean_uncertainty, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(b.mean_uncertainty, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn validation_names_rollout_index() {
        let pop = Population {
            query_id: "q".into(),
            vocab_size: 4,
            rollouts: vec![
                Rollout::new("A", vec![0], vec![0.1]),
                Rollout::new("A", vec![0, 1], vec![0.1]),
            ],
        };
        let err = pop.validate().unwrap_err().to_string();
        assert!(err.contains("rollouts[1].entropy_trace"), "{err}");
    }

    #[test]
    fn validation_rejects_out_of_range_entropy_and_tokens() {
        let too_high = Population {
            query_id: "q".into(),
            vocab_size: 2,
            rollouts: vec![Rollout::new("A", vec![0], vec![1.0])],
        };
        assert!(too_high.validate().is_err());
        let bad_token = Population {
            query_id: "q".into(),
            vocab_size: 2,
            rollouts: vec![Rollout::new("A", vec![5], vec![0.1])],
        };
        assert!(bad_token
            .validate()
            .unwrap_err()
            .to_string()
            .contains("tokens[0]"));
        let empty = Population {
            query_id: "q".into(),
            vocab_size: 2,
            rollouts: vec![],
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn json_round_trip_uses_documented_field_names() {
        let text = r#"{"query_id":"q1","vocab_size":8,
            "rollouts":[{"answer":"42","tokens":[1,2],"entropy_trace":[0.1,0.2]}]}"#;
        let pop = Population::from_json(text).unwrap();
        assert_eq!(pop.rollouts[0].answer.as_str(), "42");
        let back = Population::from_json(&pop.to_json().unwrap()).unwrap();
        assert_eq!(pop, back);
    }

    fn arb_population() -> impl Strategy<Value = Population> {
        prop::collection::vec((0u8..4, 0.0f64..=1.0, 1usize..5), 1..24).prop_map(|spec| {
            let vocab = 16u32;
            let rollouts = spec
                .into_iter()
                .map(|(a, u, len)| {
                    let h = u * f64::from(vocab).ln();
                    Rollout::new(
                        format!("ans{a}").as_str(),
                        (0..len as u32).collect(),
                        vec![h; len],
                    )
                })
                .collect();
            Population {
                query_id: "p".into(),
                vocab_size: vocab,
                rollouts,
            }
        })
    }

    proptest! {
        #[test]
        fn counts_sum_to_population_size(pop in arb_population()) {
            let stats = answer_stats(&pop).unwrap();
            prop_assert_eq!(stats.total_count(), pop.len());
            for (_, e) in stats.iter() {
                prop_assert!(e.count >= 1);
                prop_assert!((0.0..=1.0).contains(&e.mean_uncertainty));
            }
        }

        #[test]
        fn stats_invariant_under_permutation(pop in arb_population(), rot in 0usize..24) {
            let mut shuffled = pop.clone();
            let k = rot % shuffled.rollouts.len();
            shuffled.rollouts.rotate_left(k);
            shuffled.rollouts.reverse();
            let a = answer_stats(&pop).unwrap();
            let b = answer_stats(&shuffled).unwrap();
            prop_assert_eq!(a.len(), b.len());
            for ((ka, ea), (kb, eb)) in a.iter().zip(b.iter()) {
                prop_assert_eq!(ka, kb);
                prop_assert_eq!(ea.count, eb.count);
                prop_assert!((ea.mean_uncertainty - eb.mean_uncertainty).abs() < 1e-12);
            }
        }

        #[test]
        fn entropy_invariant_under_permutation(raw in prop::collection::vec(0.0f64..1.0, 2..10), rot in 0usize..10) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-6);
            let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let mut q = p.clone();
            q.rotate_left(rot % p.len());
            q.reverse();
            let hp = token_entropy(&p).unwrap();
            let hq = token_entropy(&q).unwrap();
            prop_assert!((hp - hq).abs() < 1e-12);
            prop_assert!(hp >= 0.0 && hp <= (p.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn trace_uncertainty_is_monotone(trace in prop::collection::vec(0.0f64..1.0, 1..8), idx in 0usize..8, bump in 0.0f64..1.0) {
            let vocab = 4u32;
            let tokens: Vec<u32> = vec![0; trace.len()];
            let base = Rollout::new("A", tokens.clone(), trace.clone());
            let mut raised = trace.clone();
            let i = idx % raised.len();
            raised[i] = (raised[i] + bump).min(f64::from(vocab).ln());
            let up = Rollout::new("A", tokens, raised);
            prop_assert!(normalized_trace_uncertainty(&up, vocab).unwrap() >= normalized_trace_uncertainty(&base, vocab).unwrap());
        }
    }
}
