//! Latent-variable rollout generator.
//!
//! A population is produced by drawing one latent mode `z` and then sampling
//! every rollout independently from
//!
//! ```text
//! q(y | z) = (1 - kappa) * p(y) + kappa * p(y | z),   p(y) = sum_z P(z) p(y | z)
//! ```
//!
//! so rollouts are exchangeable and, for `kappa > 0`, positively correlated
//! through the shared mode. Each rollout also gets a synthetic entropy trace
//! whose mean follows the answer's trace model and a token sequence copied from
//! the answer's template with each position resampled with probability
//! `1 - kappa`.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{SeedStreams, StreamRng};
use crate::rollout::{AnswerKey, Population, Rollout, NORMALIZATION_TOL};

/// Probabilities below this are floored before taking logs for logit offsets.
pub const LOG_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentMode {
    pub probability: f64,
    /// Answer distribution conditional on this mode.
    pub conditional: BTreeMap<AnswerKey, f64>,
    /// Optional explicit logit offset used by the policy loop. When absent the
    /// offset is `ln p(y | z) - ln p(y)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logit_offset: Option<BTreeMap<AnswerKey, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceModel {
    /// Mean normalized uncertainty of rollouts with this answer, in `[0, 1]`.
    pub mean_entropy: f64,
    /// Standard deviation of the per-rollout uncertainty before truncation.
    #[serde(default)]
    pub entropy_jitter: f64,
    /// Base token sequence; empty means "derive from the answer index".
    #[serde(default)]
    pub template: Vec<u32>,
}

impl Default for TraceModel {
    fn default() -> Self {
        Self {
            mean_entropy: 0.5,
            entropy_jitter: 0.0,
            template: Vec::new(),
        }
    }
}

fn default_vocab() -> u32 {
    64
}

fn default_trace_length() -> usize {
    16
}

fn default_kappa() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentWorld {
    pub modes: Vec<LatentMode>,
    /// Ground-truth reward of every answer, 0 or 1.
    pub truth: BTreeMap<AnswerKey, u8>,
    #[serde(default)]
    pub trace_model: BTreeMap<AnswerKey, TraceModel>,
    #[serde(default = "default_vocab")]
    pub vocab_size: u32,
    #[serde(default = "default_trace_length")]
    pub trace_length: usize,
    /// Interpolates between i.i.d. marginal sampling (0) and fully
    /// latent-conditional sampling (1).
    #[serde(default = "default_kappa")]
    pub kappa: f64,
}

impl LatentWorld {
    /// Builds a world with default vocabulary, trace length and trace models,
    /// then fills in and validates it.
    pub fn new(
        modes: Vec<(f64, Vec<(&str, f64)>)>,
        truth: Vec<(&str, u8)>,
        kappa: f64,
    ) -> Result<Self> {
        let world = LatentWorld {
            modes: modes
                .into_iter()
                .map(|(p, cond)| LatentMode {
                    probability: p,
                    conditional: cond
                        .into_iter()
                        .map(|(k, v)| (AnswerKey::from(k), v))
                        .collect(),
                    logit_offset: None,
                })
                .collect(),
            truth: truth
                .into_iter()
                .map(|(k, r)| (AnswerKey::from(k), r))
                .collect(),
            trace_model: BTreeMap::new(),
            vocab_size: default_vocab(),
            trace_length: default_trace_length(),
            kappa,
        };
        world.finalize()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let world: LatentWorld = serde_json::from_str(text)?;
        world.finalize()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Sets the trace model of `answer`, keeping its template.
    pub fn with_trace(
        mut self,
        answer: &str,
        mean_entropy: f64,
        entropy_jitter: f64,
    ) -> Result<Self> {
        let entry = self.trace_model.entry(answer.into()).or_default();
        entry.mean_entropy = mean_entropy;
        entry.entropy_jitter = entropy_jitter;
        self.finalize()
    }

    pub fn with_kappa(mut self, kappa: f64) -> Result<Self> {
        self.kappa = kappa;
        self.finalize()
    }

    /// Fills missing trace models and templates with defaults, then validates.
    pub fn finalize(mut self) -> Result<Self> {
        let answers: Vec<AnswerKey> = self.truth.keys().cloned().collect();
        for (idx, key) in answers.iter().enumerate() {
            let length = self.trace_length;
            let vocab = self.vocab_size.max(1);
            let tm = self.trace_model.entry(key.clone()).or_default();
            if tm.template.is_empty() {
                tm.template = (0..length)
                    .map(|j| ((idx * length + j) % vocab as usize) as u32)
                    .collect();
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::validation("vocab_size", "must be at least 2"));
        }
        if self.trace_length == 0 {
            return Err(Error::validation("trace_length", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::validation(
                "kappa",
                format!("{} not in [0, 1]", self.kappa),
            ));
        }
        if self.truth.is_empty() {
            return Err(Error::validation("truth", "world has no answers"));
        }
        for (k, r) in &self.truth {
            if *r > 1 {
                return Err(Error::validation(
                    format!("truth.{k}"),
                    "reward must be 0 or 1",
                ));
            }
        }
        if self.modes.is_empty() {
            return Err(Error::validation("modes", "world has no latent modes"));
        }
        let mut total = 0.0;
        for (i, mode) in self.modes.iter().enumerate() {
            if !(mode.probability >= 0.0 && mode.probability.is_finite()) {
                return Err(Error::validation(
                    format!("modes[{i}].probability"),
                    "must be >= 0",
                ));
            }
            total += mode.probability;
            let mut sum = 0.0;
            for (k, p) in &mode.conditional {
                if !(*p >= 0.0 && p.is_finite()) {
                    return Err(Error::validation(
                        format!("modes[{i}].conditional.{k}"),
                        "must be >= 0",
                    ));
                }
                if !self.truth.contains_key(k) {
                    return Err(Error::validation(
                        format!("modes[{i}].conditional.{k}"),
                        "answer missing from truth",
                    ));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::validation(
                    format!("modes[{i}].conditional"),
                    format!("sums to {sum}, expected 1"),
                ));
            }
            if let Some(offset) = &mode.logit_offset {
                for (k, v) in offset {
                    if !self.truth.contains_key(k) || !v.is_finite() {
                        return Err(Error::validation(
                            format!("modes[{i}].logit_offset.{k}"),
                            "unknown answer or non-finite offset",
                        ));
                    }
                }
            }
        }
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::validation(
                "modes",
                format!("mode probabilities sum to {total}, expected 1"),
            ));
        }
        for key in self.truth.keys() {
            let tm = self.trace_model.get(key).ok_or_else(|| {
                Error::validation(format!("trace_model.{key}"), "missing trace model")
            })?;
            if !(0.0..=1.0).contains(&tm.mean_entropy) {
                return Err(Error::validation(
                    format!("trace_model.{key}.mean_entropy"),
                    "not in [0, 1]",
                ));
            }
            if !(tm.entropy_jitter >= 0.0 && tm.entropy_jitter.is_finite()) {
                return Err(Error::validation(
                    format!("trace_model.{key}.entropy_jitter"),
                    "must be >= 0",
                ));
            }
            if tm.template.len() != self.trace_length {
                return Err(Error::validation(
                    format!("trace_model.{key}.template"),
                    format!(
                        "length {} does not match trace_length {}",
                        tm.template.len(),
                        self.trace_length
                    ),
                ));
            }
            if tm.template.iter().any(|&t| t >= self.vocab_size) {
                return Err(Error::validation(
                    format!("trace_model.{key}.template"),
                    "token outside vocabulary",
                ));
            }
        }
        for key in self.trace_model.keys() {
            if !self.truth.contains_key(key) {
                return Err(Error::validation(
                    format!("trace_model.{key}"),
                    "answer missing from truth",
                ));
            }
        }
        Ok(())
    }

    /// Answers in canonical order; indices into this slice are used by the
    /// samplers and the toy policy.
    pub fn answers(&self) -> Vec<AnswerKey> {
        self.truth.keys().cloned().collect()
    }

    pub fn reward_of(&self, answer: &AnswerKey) -> u8 {
        self.truth.get(answer).copied().unwrap_or(0)
    }

    /// Ground-truth rewards aligned with [`LatentWorld::answers`].
    pub fn reward_vector(&self) -> Vec<f64> {
        self.truth.values().map(|&r| f64::from(r)).collect()
    }

    /// `p(y | z)` for every mode, aligned with [`LatentWorld::answers`].
    pub fn conditional_vectors(&self) -> Vec<Vec<f64>> {
        self.modes
            .iter()
            .map(|m| {
                self.truth
                    .keys()
                    .map(|k| m.conditional.get(k).copied().unwrap_or(0.0))
                    .collect()
            })
            .collect()
    }

    /// Marginal `p(y)` aligned with [`LatentWorld::answers`].
    pub fn marginal_vector(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.truth.len()];
        for (mode, cond) in self.modes.iter().zip(self.conditional_vectors()) {
            for (o, c) in out.iter_mut().zip(cond) {
                *o += mode.probability * c;
            }
        }
        out
    }

    /// Per-mode sampling distribution `(1 - kappa) p(y) + kappa p(y | z)`.
    pub fn mixed_conditionals(&self) -> Vec<Vec<f64>> {
        let marginal = self.marginal_vector();
        self.conditional_vectors()
            .into_iter()
            .map(|cond| {
                cond.iter()
                    .zip(&marginal)
                    .map(|(c, m)| (1.0 - self.kappa) * m + self.kappa * c)
                    .collect()
            })
            .collect()
    }

    /// Per-mode additive logit offsets (unscaled) aligned with the answers.
    pub fn mode_logit_offsets(&self) -> Vec<Vec<f64>> {
        let marginal = self.marginal_vector();
        self.modes
            .iter()
            .zip(self.conditional_vectors())
            .map(|(mode, cond)| match &mode.logit_offset {
                Some(explicit) => self
                    .truth
                    .keys()
                    .map(|k| explicit.get(k).copied().unwrap_or(0.0))
                    .collect(),
                None => cond
                    .iter()
                    .zip(&marginal)
                    .map(|(c, m)| c.max(LOG_FLOOR).ln() - m.max(LOG_FLOOR).ln())
                    .collect(),
            })
            .collect()
    }

    pub fn mode_probabilities(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.probability).collect()
    }
}

/// Exact mixture `sum_z P(z) p(y | z)` over every answer of the world.
pub fn marginal_distribution(world: &LatentWorld) -> BTreeMap<AnswerKey, f64> {
    world
        .answers()
        .into_iter()
        .zip(world.marginal_vector())
        .collect()
}

/// `mu = sum_y p(y) R(y)`.
pub fn marginal_expected_reward(world: &LatentWorld) -> f64 {
    world
        .marginal_vector()
        .iter()
        .zip(world.reward_vector())
        .map(|(p, r)| p * r)
        .sum()
}

/// Precomputed samplers for a world.
#[derive(Debug, Clone)]
pub struct WorldSampler {
    modes: WeightedIndex<f64>,
    answers_given_mode: Vec<WeightedIndex<f64>>,
}

impl WorldSampler {
    pub fn new(world: &LatentWorld) -> Result<Self> {
        let modes = WeightedIndex::new(world.mode_probabilities())
            .map_err(|e| Error::validation("modes", e.to_string()))?;
        let answers_given_mode = world
            .mixed_conditionals()
            .into_iter()
            .enumerate()
            .map(|(i, q)| {
                // Zero-probability modes never get drawn; give them a valid placeholder.
                if world.modes[i].probability == 0.0 && q.iter().all(|&x| x == 0.0) {
                    WeightedIndex::new(vec![1.0; q.len()])
                } else {
                    WeightedIndex::new(q)
                }
                .map_err(|e| Error::validation(format!("modes[{i}].conditional"), e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            modes,
            answers_given_mode,
        })
    }

    pub fn sample_mode<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.modes.sample(rng)
    }

    pub fn sample_answer<R: Rng + ?Sized>(&self, mode: usize, rng: &mut R) -> usize {
        self.answers_given_mode[mode].sample(rng)
    }

    /// Draws a mode, then `m` answer indices from it.
    pub fn sample_answers<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> (usize, Vec<usize>) {
        let z = self.sample_mode(rng);
        let answers = (0..m).map(|_| self.sample_answer(z, rng)).collect();
        (z, answers)
    }
}

/// Per-rollout uncertainty from a normal truncated to `[0, 1]`.
fn sample_uncertainty<R: Rng + ?Sized>(tm: &TraceModel, rng: &mut R) -> f64 {
    if tm.entropy_jitter == 0.0 {
        return tm.mean_entropy;
    }
    let normal = Normal::new(tm.mean_entropy, tm.entropy_jitter).expect("jitter validated >= 0");
    for _ in 0..1000 {
        let x: f64 = normal.sample(rng);
        if (0.0..=1.0).contains(&x) {
            return x;
        }
    }
    tm.mean_entropy
}

/// One synthetic rollout for the answer at `answer_idx`.
pub fn generate_rollout<R: Rng + ?Sized>(
    world: &LatentWorld,
    answer: &AnswerKey,
    rng: &mut R,
) -> Rollout {
    let tm = &world.trace_model[answer];
    let max_entropy = f64::from(world.vocab_size).ln();
    let u = sample_uncertainty(tm, rng);
    let per_token = (u * max_entropy).clamp(0.0, max_entropy);
    let resample = 1.0 - world.kappa;
    let tokens = tm
        .template
        .iter()
        .map(|&t| {
            if resample > 0.0 && rng.random_bool(resample) {
                rng.random_range(0..world.vocab_size)
            } else {
                t
            }
        })
        .collect();
    Rollout {
        answer: answer.clone(),
        tokens,
        entropy_trace: vec![per_token; world.trace_length],
    }
}

/// Builds a population from answer indices into [`LatentWorld::answers`].
pub fn population_from_answers<R: Rng + ?Sized>(
    world: &LatentWorld,
    query_id: &str,
    answers: &[usize],
    rng: &mut R,
) -> Population {
    let keys = world.answers();
    Population {
        query_id: query_id.to_owned(),
        vocab_size: world.vocab_size,
        rollouts: answers
            .iter()
            .map(|&i| generate_rollout(world, &keys[i], rng))
            .collect(),
    }
}

/// Samples a population of `m` rollouts using the caller's generator.
pub fn sample_population_with<R: Rng + ?Sized>(
    world: &LatentWorld,
    sampler: &WorldSampler,
    query_id: &str,
    m: usize,
    rng: &mut R,
) -> Result<Population> {
    if m == 0 {
        return Err(Error::validation("m", "population size must be at least 1"));
    }
    let (_, answers) = sampler.sample_answers(m, rng);
    Ok(population_from_answers(world, query_id, &answers, rng))
}

/// Samples a population of `m` rollouts; identical seeds give identical
/// populations.
pub fn sample_population(world: &LatentWorld, m: usize, seed: u64) -> Result<Population> {
    let sampler = WorldSampler::new(world)?;
    let mut rng: StreamRng = SeedStreams::new(seed).stream("population");
    sample_population_with(world, &sampler, &format!("sim-{seed}"), m, &mut rng)
}

/// Multiset Jaccard similarity `|a ∩ b| / |a ∪ b|` of two token sequences.
pub fn token_jaccard(a: &[u32], b: &[u32]) -> f64 {
    let mut counts: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for t in a {
        counts.entry(*t).or_default().0 += 1;
    }
    for t in b {
        counts.entry(*t).or_default().1 += 1;
    }
    let (inter, union) = counts.values().fold((0usize, 0usize), |(i, u), &(x, y)| {
        (i + x.min(y), u + x.max(y))
    });
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Average pairwise token overlap across all unordered rollout pairs.
pub fn rollout_correlation(population: &Population) -> Result<f64> {
    let m = population.len();
    if m < 2 {
        return Err(Error::validation(
            "rollouts",
            "correlation needs at least two rollouts",
        ));
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            total += token_jaccard(
                &population.rollouts[i].tokens,
                &population.rollouts[j].tokens,
            );
        }
    }
    Ok(total / (m * (m - 1) / 2) as f64)
}

/// Worlds used throughout the tests, the acceptance suite and the CLI.
pub mod presets {
    use super::*;

    /// Single mode over three answers: two correct (0.5, 0.2), one wrong (0.3).
    pub fn three_outcome() -> LatentWorld {
        LatentWorld::new(
            vec![(1.0, vec![("c1", 0.5), ("c2", 0.2), ("w", 0.3)])],
            vec![("c1", 1), ("c2", 1), ("w", 0)],
            1.0,
        )
        .expect("valid preset")
    }

    /// Two equally likely modes, each favouring a different wrong answer while
    /// the correct answer keeps probability 0.4.
    pub fn two_mode_bias() -> LatentWorld {
        LatentWorld::new(
            vec![
                (0.5, vec![("c", 0.4), ("wA", 0.6)]),
                (0.5, vec![("c", 0.4), ("wB", 0.6)]),
            ],
            vec![("c", 1), ("wA", 0), ("wB", 0)],
            1.0,
        )
        .expect("valid preset")
    }

    /// The two-mode world with confident correct traces and uncertain wrong
    /// ones, at `kappa = 0.9`. The correct answer is a marginal minority
    /// (0.4 vs 0.3 + 0.3) and never the conditional mode.
    pub fn collapse() -> LatentWorld {
        two_mode_bias()
            .with_kappa(0.9)
            .and_then(|w| w.with_trace("c", 0.1, 0.05))
            .and_then(|w| w.with_trace("wA", 0.8, 0.05))
            .and_then(|w| w.with_trace("wB", 0.8, 0.05))
            .expect("valid preset")
    }

    /// Correct answer is the marginal majority (0.5) but only ties the wrong
    /// answer inside each mode; `kappa = 0.5`.
    pub fn convergence() -> LatentWorld {
        LatentWorld::new(
            vec![
                (0.5, vec![("c", 0.5), ("wA", 0.5)]),
                (0.5, vec![("c", 0.5), ("wB", 0.5)]),
            ],
            vec![("c", 1), ("wA", 0), ("wB", 0)],
            0.5,
        )
        .and_then(|w| w.with_trace("c", 0.2, 0.05))
        .and_then(|w| w.with_trace("wA", 0.6, 0.05))
        .and_then(|w| w.with_trace("wB", 0.6, 0.05))
        .expect("valid preset")
    }

    pub fn by_name(name: &str) -> Option<LatentWorld> {
        match name {
            "three_outcome" => Some(three_outcome()),
            "two_mode_bias" => Some(two_mode_bias()),
            "collapse" => Some(collapse()),
            "convergence" => Some(convergence()),
            _ => None,
        }
    }

    pub const NAMES: [&str; 4] = ["three_outcome", "two_mode_bias", "collapse", "convergence"];
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::answer_stats;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_mode_marginal_is_its_conditional() {
        let w = presets::three_outcome();
        let m = marginal_distribution(&w);
        assert_eq!(m[&"c1".into()], 0.5);
        assert_eq!(m[&"c2".into()], 0.2);
        assert_eq!(m[&"w".into()], 0.3);
    }

    #[test]
    fn two_mode_marginal_and_expected_reward() {
        let w = presets::two_mode_bias();
        let m = marginal_distribution(&w);
        assert_abs_diff_eq!(m[&"c".into()], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(m[&"wA".into()], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(m[&"wB".into()], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(marginal_expected_reward(&w), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn sampled_counts_sum_to_m() {
        let pop = sample_population(&presets::collapse(), 37, 5).unwrap();
        assert_eq!(pop.len(), 37);
        pop.validate().unwrap();
        assert_eq!(answer_stats(&pop).unwrap().total_count(), 37);
    }

    #[test]
    fn iid_frequencies_converge_to_marginal() {
        let w = presets::three_outcome().with_kappa(0.0).unwrap();
        let sampler = WorldSampler::new(&w).unwrap();
        let mut rng = SeedStreams::new(11).stream("lln");
        let (_, answers) = sampler.sample_answers(100_000, &mut rng);
        let marginal = w.marginal_vector();
        for (k, p) in marginal.iter().enumerate() {
            let freq = answers.iter().filter(|&&a| a == k).count() as f64 / 1e5;
            assert!((freq - p).abs() < 0.01, "answer {k}: {freq} vs {p}");
        }
    }

    #[test]
    fn same_seed_same_population() {
        let w = presets::collapse();
        assert_eq!(
            sample_population(&w, 20, 9).unwrap(),
            sample_population(&w, 20, 9).unwrap()
        );
        assert_ne!(
            sample_population(&w, 20, 9).unwrap(),
            sample_population(&w, 20, 10).unwrap()
        );
    }

    #[test]
    fn traces_stay_in_range() {
        let w = presets::collapse()
            .with_trace("wA", 0.95, 0.5)
            .and_then(|w| w.with_trace("c", 0.02, 0.5))
            .unwrap();
        let ln_v = f64::from(w.vocab_size).ln();
        for seed in 0..20 {
            let pop = sample_population(&w, 16, seed).unwrap();
            for r in &pop.rollouts {
                assert!(r.entropy_trace.iter().all(|&h| (0.0..=ln_v).contains(&h)));
                assert_eq!(r.tokens.len(), w.trace_length);
            }
        }
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(token_jaccard(&[1, 2, 3], &[1, 2, 4]), 0.5);
        assert_eq!(token_jaccard(&[1, 1], &[1]), 0.5);
        assert_eq!(token_jaccard(&[1, 2], &[3, 4]), 0.0);
    }

    #[test]
    fn correlation_examples() {
        let same = Population {
            query_id: "q".into(),
            vocab_size: 8,
            rollouts: (0..4)
                .map(|_| Rollout::new("A", vec![1, 2, 3], vec![0.0; 3]))
                .collect(),
        };
        assert_eq!(rollout_correlation(&same).unwrap(), 1.0);
        let disjoint = Population {
            query_id: "q".into(),
            vocab_size: 8,
            rollouts: vec![
                Rollout::new("A", vec![1, 2], vec![0.0; 2]),
                Rollout::new("B", vec![3, 4], vec![0.0; 2]),
            ],
        };
        assert_eq!(rollout_correlation(&disjoint).unwrap(), 0.0);
        let one = Population {
            query_id: "q".into(),
            vocab_size: 8,
            rollouts: vec![Rollout::new("A", vec![1], vec![0.0])],
        };
        assert!(rollout_correlation(&one).is_err());
    }

    #[test]
    fn correlation_is_non_decreasing_in_kappa() {
        let base = presets::two_mode_bias();
        let mut previous = -1.0;
        for kappa in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let w = base.clone().with_kappa(kappa).unwrap();
            let sampler = WorldSampler::new(&w).unwrap();
            let mut rng = SeedStreams::new(3).stream("corr");
            let mean: f64 = (0..200)
                .map(|_| {
                    let pop = sample_population_with(&w, &sampler, "q", 8, &mut rng).unwrap();
                    rollout_correlation(&pop).unwrap()
                })
                .sum::<f64>()
                / 200.0;
            assert!(mean >= previous, "kappa {kappa}: {mean} < {previous}");
            previous = mean;
        }
    }

    #[test]
    fn answer_stats_distribution_is_exchangeable() {
        // Reversing the rollout order of every sampled population leaves the
        // statistic unchanged, so the two empirical distributions coincide.
        let w = presets::collapse();
        for seed in 0..30 {
            let pop = sample_population(&w, 12, seed).unwrap();
            let mut rev = pop.clone();
            rev.rollouts.reverse();
            let (a, b) = (answer_stats(&pop).unwrap(), answer_stats(&rev).unwrap());
            assert_eq!(a.len(), b.len());
            for ((ka, ea), (kb, eb)) in a.iter().zip(b.iter()) {
                assert_eq!((ka, ea.count), (kb, eb.count));
                assert_abs_diff_eq!(ea.mean_uncertainty, eb.mean_uncertainty, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn validation_catches_bad_worlds() {
        let unnormalized = LatentWorld::new(vec![(1.0, vec![("a", 0.5)])], vec![("a", 1)], 1.0);
        assert!(unnormalized
            .unwrap_err()
            .to_string()
            .contains("modes[0].conditional"));
        let unknown = LatentWorld::new(vec![(1.0, vec![("a", 1.0)])], vec![("b", 1)], 1.0);
        assert!(unknown.is_err());
        let modes = LatentWorld::new(vec![(0.4, vec![("a", 1.0)])], vec![("a", 1)], 1.0);
        assert!(modes.is_err());
        assert!(presets::collapse().with_kappa(1.5).is_err());
    }

    #[test]
    fn world_json_round_trip_keeps_defaults_filled() {
        let w = presets::collapse();
        let back = LatentWorld::from_json(&w.to_json().unwrap()).unwrap();
        assert_eq!(w, back);
        let minimal = r#"{"modes":[{"probability":1.0,"conditional":{"x":1.0}}],"truth":{"x":1}}"#;
        let w = LatentWorld::from_json(minimal).unwrap();
        assert_eq!(w.trace_model[&"x".into()].template.len(), w.trace_length);
        assert_eq!(w.kappa, 1.0);
    }

    #[test]
    fn derived_offsets_recover_conditionals() {
        let w = presets::two_mode_bias();
        let marginal = w.marginal_vector();
        for (offset, cond) in w.mode_logit_offsets().iter().zip(w.conditional_vectors()) {
            let logits: Vec<f64> = marginal
                .iter()
                .zip(offset)
                .map(|(m, o)| m.ln() + o)
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for (l, c) in logits.iter().zip(cond) {
                assert!((l.exp() / z - c).abs() < 1e-6);
            }
        }
    }
}
