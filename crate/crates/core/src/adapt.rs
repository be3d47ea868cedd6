//! Toy test-time adaptation loop.
//!
//! The policy is a softmax over the world's answers. Each step samples a
//! group of rollouts, scores them with the configured reward estimator,
//! standardizes the rewards within the group and takes one score-function
//! ascent step:
//!
//! ```text
//! A_i     = (r_i - mean(r)) / (std(r) + 1e-8)
//! logits += lr * sum_i A_i * (onehot(y_i) - softmax(logits))
//! ```
//!
//! Rollout correlation enters through a latent logit offset drawn once per
//! group and scaled by the world's `kappa`, so the same answer distribution
//! that is being adapted is also the one the correlated group is drawn from.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::{estimate_rewards, RewardConfig, RewardMode, RewardVector};
use crate::rng::{SeedStreams, StreamRng};
use crate::rollout::{AnswerKey, Population};
use crate::simulator::{generate_rollout, rollout_correlation, LatentWorld};

pub const ADVANTAGE_EPS: f64 = 1e-8;

/// Softmax policy over a fixed answer vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub answers: Vec<AnswerKey>,
    pub logits: Vec<f64>,
}

impl ToyPolicy {
    pub fn new(answers: Vec<AnswerKey>, logits: Vec<f64>) -> Result<Self> {
        if answers.is_empty() || answers.len() != logits.len() {
            return Err(Error::validation(
                "logits",
                format!("expected {} logits, got {}", answers.len(), logits.len()),
            ));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::validation("logits", "logits must be finite"));
        }
        Ok(Self { answers, logits })
    }

    pub fn uniform(answers: Vec<AnswerKey>) -> Self {
        let logits = vec![0.0; answers.len()];
        Self { answers, logits }
    }

    /// Policy whose probabilities equal `probs` (floored at 1e-9).
    pub fn from_probabilities(answers: Vec<AnswerKey>, probs: &[f64]) -> Result<Self> {
        Self::new(answers, probs.iter().map(|p| p.max(1e-9).ln()).collect())
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// Entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.probabilities()
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    pub fn index_of(&self, answer: &AnswerKey) -> Option<usize> {
        self.answers.iter().position(|a| a == answer)
    }

    pub fn log_prob(&self, index: usize) -> f64 {
        let max = self
            .logits
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + self
                .logits
                .iter()
                .map(|l| (l - max).exp())
                .sum::<f64>()
                .ln();
        self.logits[index] - lse
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn default_rollouts() -> usize {
    16
}

fn default_learning_rate() -> f64 {
    0.002
}

fn default_threshold() -> f64 {
    0.6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub steps: usize,
    /// Rollouts per step.
    #[serde(default = "default_rollouts")]
    pub rollouts: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub reward: RewardConfig,
    pub world: LatentWorld,
    /// Monte Carlo samples for pass@1; 0 selects the closed form.
    #[serde(default)]
    pub eval_samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Starting logits; defaults to the log of the world's marginal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_logits: Option<Vec<f64>>,
    /// pass@1 level used for steps-to-threshold.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// PPO-style ratio clip. Accepted for config compatibility; with a single
    /// on-policy step per group the ratio is always 1, so it never binds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_ratio: Option<f64>,
}

impl AdaptConfig {
    pub fn new(world: LatentWorld, reward: RewardConfig, steps: usize) -> Self {
        Self {
            steps,
            rollouts: default_rollouts(),
            learning_rate: default_learning_rate(),
            reward,
            world,
            eval_samples: 0,
            seed: 0,
            initial_logits: None,
            threshold: default_threshold(),
            clip_ratio: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::validation("steps", "must be at least 1"));
        }
        if self.rollouts < 2 {
            return Err(Error::validation(
                "rollouts",
                "group-normalized advantages need at least 2 rollouts",
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(
                "learning_rate",
                "must be finite and >= 0",
            ));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::validation("threshold", "must lie in [0, 1]"));
        }
        if let Some(c) = self.clip_ratio {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::validation("clip_ratio", "must be finite and > 0"));
            }
        }
        self.reward.validate()?;
        self.world.validate()?;
        if let Some(l) = &self.initial_logits {
            ToyPolicy::new(self.world.answers(), l.clone())?;
        }
        Ok(())
    }

    pub fn initial_policy(&self) -> Result<ToyPolicy> {
        let answers = self.world.answers();
        match &self.initial_logits {
            Some(l) => ToyPolicy::new(answers, l.clone()),
            None => ToyPolicy::from_probabilities(answers, &self.world.marginal_vector()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub pass_at_1: f64,
    pub policy_entropy: f64,
    pub mean_reward: f64,
    /// Only meaningful for majority vote.
    pub pseudo_label_correct: Option<bool>,
    pub rollout_correlation: f64,
    pub reward_variance: f64,
    /// Closed-form pass@1 regardless of `eval_samples`.
    #[serde(skip)]
    pub exact_pass_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptTrace {
    pub mode: RewardMode,
    pub initial_pass_at_1: f64,
    pub steps: Vec<StepRecord>,
    pub final_policy: ToyPolicy,
}

impl AdaptTrace {
    pub fn final_pass_at_1(&self) -> f64 {
        self.steps
            .last()
            .map_or(self.initial_pass_at_1, |s| s.exact_pass_at_1)
    }

    /// First step whose closed-form pass@1 reaches `threshold`; 0 when the
    /// initial policy already does, `None` when never reached.
    pub fn steps_to_threshold(&self, threshold: f64) -> Option<usize> {
        if self.initial_pass_at_1 >= threshold {
            return Some(0);
        }
        self.steps
            .iter()
            .find(|s| s.exact_pass_at_1 >= threshold)
            .map(|s| s.step)
    }

    pub fn mean_correlation(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.rollout_correlation)
            .sum::<f64>()
            / self.steps.len().max(1) as f64
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "step",
            "pass_at_1",
            "policy_entropy",
            "mean_reward",
            "pseudo_label_correct",
            "rollout_correlation",
            "reward_variance",
        ])?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.pass_at_1.to_string(),
                s.policy_entropy.to_string(),
                s.mean_reward.to_string(),
                s.pseudo_label_correct
                    .map_or_else(String::new, |c| u8::from(c).to_string()),
                s.rollout_correlation.to_string(),
                s.reward_variance.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Samples `m` rollouts from the policy. When the world's `kappa` is positive
/// one latent mode is drawn and its logit offset, scaled by `kappa`, is added
/// to the policy logits for the whole group.
pub fn policy_rollouts<R: Rng + ?Sized>(
    policy: &ToyPolicy,
    world: &LatentWorld,
    m: usize,
    rng: &mut R,
) -> Result<Population> {
    if m == 0 {
        return Err(Error::validation("rollouts", "must be at least 1"));
    }
    let mut logits = policy.logits.clone();
    if world.kappa > 0.0 {
        let modes = WeightedIndex::new(world.mode_probabilities())
            .map_err(|e| Error::validation("modes", e.to_string()))?;
        let z = modes.sample(rng);
        let offsets = world.mode_logit_offsets();
        for (l, o) in logits.iter_mut().zip(&offsets[z]) {
            *l += world.kappa * o;
        }
    }
    let dist = WeightedIndex::new(softmax(&logits)).map_err(|e| Error::Invariant(e.to_string()))?;
    let rollouts = (0..m)
        .map(|_| {
            let y = dist.sample(rng);
            generate_rollout(world, &policy.answers[y], rng)
        })
        .collect();
    Ok(Population {
        query_id: "adapt".to_owned(),
        vocab_size: world.vocab_size,
        rollouts,
    })
}

/// Group-standardized advantages with population standard deviation.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::validation(
            "rewards",
            "advantages need at least 2 rewards",
        ));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(rewards
        .iter()
        .map(|r| (r - mean) / (std + ADVANTAGE_EPS))
        .collect())
}

/// `sum_i A_i * grad log pi(y_i)` with respect to the logits.
pub fn score_function_gradient(
    policy: &ToyPolicy,
    answers: &[usize],
    advantages: &[f64],
) -> Result<Vec<f64>> {
    if answers.len() != advantages.len() {
        return Err(Error::validation(
            "advantages",
            format!(
                "{} advantages for {} rollouts",
                advantages.len(),
                answers.len()
            ),
        ));
    }
    let probs = policy.probabilities();
    let mut grad = vec![0.0; probs.len()];
    for (&y, &a) in answers.iter().zip(advantages) {
        if a == 0.0 {
            continue;
        }
        for (k, g) in grad.iter_mut().enumerate() {
            let onehot = if k == y { 1.0 } else { 0.0 };
            *g += a * (onehot - probs[k]);
        }
    }
    Ok(grad)
}

/// `sum_i A_i * log pi(y_i)`; its gradient is [`score_function_gradient`].
pub fn surrogate_objective(policy: &ToyPolicy, answers: &[usize], advantages: &[f64]) -> f64 {
    answers
        .iter()
        .zip(advantages)
        .map(|(&y, &a)| a * policy.log_prob(y))
        .sum()
}

/// One ascent step on the surrogate objective.
pub fn grpo_update(
    policy: &ToyPolicy,
    answers: &[usize],
    advantages: &[f64],
    learning_rate: f64,
) -> Result<ToyPolicy> {
    let grad = score_function_gradient(policy, answers, advantages)?;
    let mut next = policy.clone();
    for (l, g) in next.logits.iter_mut().zip(grad) {
        *l += learning_rate * g;
    }
    if next.logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Invariant("policy logits became non-finite".into()));
    }
    Ok(next)
}

/// pass@1 of the policy. `eval_samples == 0` returns `sum_y pi(y) R(y)`,
/// otherwise the fraction of correct answers among that many samples.
pub fn pass_at_1<R: Rng + ?Sized>(
    policy: &ToyPolicy,
    world: &LatentWorld,
    eval_samples: usize,
    rng: &mut R,
) -> f64 {
    let probs = policy.probabilities();
    let rewards: Vec<f64> = policy
        .answers
        .iter()
        .map(|a| f64::from(world.reward_of(a)))
        .collect();
    if eval_samples == 0 {
        return probs.iter().zip(&rewards).map(|(p, r)| p * r).sum();
    }
    let dist = WeightedIndex::new(&probs).expect("softmax is a valid distribution");
    let hits: f64 = (0..eval_samples).map(|_| rewards[dist.sample(rng)]).sum();
    hits / eval_samples as f64
}

/// Runs the adaptation loop. Identical configs give identical traces.
pub fn run_adaptation(cfg: &AdaptConfig) -> Result<AdaptTrace> {
    cfg.validate()?;
    let streams = SeedStreams::new(cfg.seed);
    let mut rollout_rng: StreamRng = streams.stream("adapt.rollouts");
    let mut eval_rng: StreamRng = streams.stream("adapt.eval");

    let mut policy = cfg.initial_policy()?;
    let initial_pass_at_1 = pass_at_1(&policy, &cfg.world, 0, &mut eval_rng);
    let mut steps = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let population = policy_rollouts(&policy, &cfg.world, cfg.rollouts, &mut rollout_rng)?;
        let rewards = estimate_rewards(&population, &cfg.reward)?;
        let answers: Vec<usize> = population
            .rollouts
            .iter()
            .map(|r| {
                policy
                    .index_of(&r.answer)
                    .expect("rollout answers come from the policy")
            })
            .collect();

        let (group_answers, group_rewards) = update_group(&cfg.reward, &answers, &rewards);
        if group_rewards.len() >= 2 {
            let advantages = grpo_advantages(&group_rewards)?;
            policy = grpo_update(&policy, &group_answers, &advantages, cfg.learning_rate)?;
        }

        let exact = pass_at_1(&policy, &cfg.world, 0, &mut eval_rng);
        let reported = if cfg.eval_samples == 0 {
            exact
        } else {
            pass_at_1(&policy, &cfg.world, cfg.eval_samples, &mut eval_rng)
        };
        steps.push(StepRecord {
            step,
            pass_at_1: reported,
            policy_entropy: policy.entropy(),
            mean_reward: rewards.mean(),
            pseudo_label_correct: rewards
                .pseudo_label
                .as_ref()
                .map(|l| cfg.world.reward_of(l) == 1),
            rollout_correlation: rollout_correlation(&population)?,
            reward_variance: rewards.variance(),
            exact_pass_at_1: exact,
        });
    }
    Ok(AdaptTrace {
        mode: cfg.reward.mode,
        initial_pass_at_1,
        steps,
        final_policy: policy,
    })
}

/// Rollouts and rewards entering the policy-gradient group.
fn update_group(
    cfg: &RewardConfig,
    answers: &[usize],
    rewards: &RewardVector,
) -> (Vec<usize>, Vec<f64>) {
    if cfg.exclude_pruned {
        answers
            .iter()
            .zip(&rewards.rewards)
            .zip(&rewards.retained)
            .filter(|(_, keep)| **keep)
            .map(|((a, r), _)| (*a, *r))
            .unzip()
    } else {
        (answers.to_vec(), rewards.rewards.clone())
    }
}

/// Seed of the `repeat`-th run derived from a base seed. Shared across modes
/// and kappa values so comparisons are paired.
pub fn repeat_seed(base_seed: u64, repeat: usize) -> u64 {
    SeedStreams::new(base_seed)
        .child("repeat", repeat as u64)
        .root()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kappa: f64,
    pub measured_correlation: f64,
    pub mode: RewardMode,
    pub final_pass_at_1: f64,
    pub repeats: usize,
}

/// For every kappa and mode, averages final pass@1 and measured rollout
/// correlation over seeded repeats.
pub fn correlation_sweep(
    base: &AdaptConfig,
    kappas: &[f64],
    modes: &[RewardMode],
    repeats: usize,
) -> Result<Vec<SweepRow>> {
    if repeats == 0 {
        return Err(Error::validation("repeats", "must be at least 1"));
    }
    if let Some(k) = kappas.iter().find(|k| !(0.0..=1.0).contains(*k)) {
        return Err(Error::validation(
            "kappa_grid",
            format!("{k} not in [0, 1]"),
        ));
    }
    let jobs: Vec<(usize, usize, usize)> = (0..kappas.len())
        .flat_map(|k| (0..modes.len()).flat_map(move |m| (0..repeats).map(move |r| (k, m, r))))
        .collect();
    let traces: Vec<AdaptTrace> = jobs
        .par_iter()
        .map(|&(k, m, r)| {
            let mut cfg = base.clone();
            cfg.world = cfg.world.clone().with_kappa(kappas[k])?;
            cfg.reward.mode = modes[m];
            cfg.seed = repeat_seed(base.seed, r);
            run_adaptation(&cfg)
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(kappas.len() * modes.len());
    for (chunk, (k, m)) in traces
        .chunks(repeats)
        .zip((0..kappas.len()).flat_map(|k| (0..modes.len()).map(move |m| (k, m))))
    {
        let n = chunk.len() as f64;
        rows.push(SweepRow {
            kappa: kappas[k],
            measured_correlation: chunk.iter().map(AdaptTrace::mean_correlation).sum::<f64>() / n,
            mode: modes[m],
            final_pass_at_1: chunk.iter().map(AdaptTrace::final_pass_at_1).sum::<f64>() / n,
            repeats,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "kappa",
        "measured_correlation",
        "mode",
        "final_pass_at_1",
        "repeats",
    ])?;
    for r in rows {
        w.write_record([
            r.kappa.to_string(),
            r.measured_correlation.to_string(),
            r.mode.name().to_owned(),
            r.final_pass_at_1.to_string(),
            r.repeats.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: RewardMode,
    pub seed: u64,
    pub initial_pass_at_1: f64,
    pub final_pass_at_1: f64,
    pub steps_to_threshold: Option<usize>,
}

/// One run per (variant, seed). Every variant sees the same seeds, hence the
/// same randomness streams.
pub fn ablation(
    base: &AdaptConfig,
    variants: &[RewardMode],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(RewardMode, u64)> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |s| (*v, *s)))
        .collect();
    jobs.par_iter()
        .map(|&(variant, seed)| {
            let mut cfg = base.clone();
            cfg.reward.mode = variant;
            cfg.seed = seed;
            let trace = run_adaptation(&cfg)?;
            Ok(AblationRow {
                variant,
                seed,
                initial_pass_at_1: trace.initial_pass_at_1,
                final_pass_at_1: trace.final_pass_at_1(),
                steps_to_threshold: trace.steps_to_threshold(cfg.threshold),
            })
        })
        .collect()
}

pub fn write_ablation_csv<W: std::io::Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "variant",
        "seed",
        "initial_pass_at_1",
        "final_pass_at_1",
        "steps_to_threshold",
    ])?;
    for r in rows {
        w.write_record([
            r.variant.name().to_owned(),
            r.seed.to_string(),
            r.initial_pass_at_1.to_string(),
            r.final_pass_at_1.to_string(),
            r.steps_to_threshold
                .map_or_else(|| "not reached".to_owned(), |s| s.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Median of `steps_to_threshold` values with "not reached" ordered last.
pub fn median_steps(values: &[Option<usize>]) -> Option<usize> {
    let mut v: Vec<usize> = values.iter().map(|s| s.unwrap_or(usize::MAX)).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_unstable();
    let mid = v[(v.len() - 1) / 2];
    (mid != usize::MAX).then_some(mid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::RewardMode;
    use crate::simulator::presets;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn keys(n: usize) -> Vec<AnswerKey> {
        (0..n).map(|i| AnswerKey::new(format!("a{i}"))).collect()
    }

    #[test]
    fn concentrated_policy_always_answers_the_same() {
        let world = presets::collapse().with_kappa(0.0).unwrap();
        let policy = ToyPolicy::from_probabilities(world.answers(), &[1.0, 0.0, 0.0]).unwrap();
        let mut rng = SeedStreams::new(1).stream("t");
        let pop = policy_rollouts(&policy, &world, 50, &mut rng).unwrap();
        assert!(pop.rollouts.iter().all(|r| r.answer.as_str() == "c"));
    }

    #[test]
    fn uniform_two_answer_policy_splits_evenly() {
        let world = LatentWorld::new(
            vec![(1.0, vec![("c", 0.5), ("w", 0.5)])],
            vec![("c", 1), ("w", 0)],
            0.0,
        )
        .unwrap();
        let policy = ToyPolicy::uniform(world.answers());
        let mut rng = SeedStreams::new(2).stream("t");
        let pop = policy_rollouts(&policy, &world, 10_000, &mut rng).unwrap();
        let c = pop
            .rollouts
            .iter()
            .filter(|r| r.answer.as_str() == "c")
            .count() as f64;
        // 3 sigma = 3 * sqrt(10^4 * 0.25) = 150
        assert!((c - 5000.0).abs() <= 150.0, "{c}");
    }

    #[test]
    fn policy_rollouts_are_deterministic() {
        let world = presets::collapse();
        let policy = ToyPolicy::uniform(world.answers());
        let a = policy_rollouts(&policy, &world, 16, &mut SeedStreams::new(5).stream("t")).unwrap();
        let b = policy_rollouts(&policy, &world, 16, &mut SeedStreams::new(5).stream("t")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn advantage_examples() {
        assert_eq!(grpo_advantages(&[0.3, 0.3, 0.3]).unwrap(), vec![0.0; 3]);
        let a = grpo_advantages(&[1.0, 1.0, 0.0, 0.0]).unwrap();
        for (x, e) in a.iter().zip([1.0, 1.0, -1.0, -1.0]) {
            assert_abs_diff_eq!(*x, e, epsilon = 1e-7);
        }
        let a = grpo_advantages(&[0.54, 0.24, 0.24]).unwrap();
        for (x, e) in a.iter().zip([1.4142, -0.7071, -0.7071]) {
            assert_abs_diff_eq!(*x, e, epsilon = 1e-4);
        }
        assert!(grpo_advantages(&[1.0]).is_err());
    }

    #[test]
    fn update_examples() {
        let policy = ToyPolicy::uniform(keys(2));
        let same = grpo_update(&policy, &[0, 1], &[0.0, 0.0], 0.5).unwrap();
        assert_eq!(same, policy);
        let next = grpo_update(&policy, &[0], &[1.0], 0.1).unwrap();
        assert_abs_diff_eq!(next.logits[0], 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(next.logits[1], -0.05, epsilon = 1e-12);
        assert!(grpo_update(&policy, &[0, 1], &[1.0], 0.1).is_err());
    }

    #[test]
    fn pass_at_1_examples() {
        let world = presets::collapse();
        let mut rng = SeedStreams::new(0).stream("eval");
        let correct = ToyPolicy::from_probabilities(world.answers(), &[1.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(
            pass_at_1(&correct, &world, 0, &mut rng),
            1.0,
            epsilon = 1e-8
        );

        let two = LatentWorld::new(
            vec![(1.0, vec![("c", 0.5), ("w", 0.5)])],
            vec![("c", 1), ("w", 0)],
            0.0,
        )
        .unwrap();
        let uniform = ToyPolicy::uniform(two.answers());
        assert_abs_diff_eq!(pass_at_1(&uniform, &two, 0, &mut rng), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_pass_at_1_matches_sampling() {
        let world = presets::collapse();
        let mut rng = SeedStreams::new(3).stream("eval");
        for trial in 0..20 {
            let logits: Vec<f64> = (0..3)
                .map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0))
                .collect();
            let policy = ToyPolicy::new(world.answers(), logits).unwrap();
            let exact = pass_at_1(&policy, &world, 0, &mut rng);
            let mc = pass_at_1(&policy, &world, 10_000, &mut rng);
            let sigma = (exact * (1.0 - exact) / 1e4).sqrt();
            assert!(
                (exact - mc).abs() <= 3.0 * sigma + 1e-12,
                "trial {trial}: {exact} vs {mc}"
            );
        }
    }

    #[test]
    fn zero_learning_rate_keeps_pass_at_1_constant() {
        let mut cfg = AdaptConfig::new(presets::collapse(), RewardConfig::default(), 20);
        cfg.learning_rate = 0.0;
        let trace = run_adaptation(&cfg).unwrap();
        assert!(trace
            .steps
            .iter()
            .all(|s| s.pass_at_1 == trace.initial_pass_at_1));
    }

    #[test]
    fn runs_are_deterministic() {
        let mut cfg = AdaptConfig::new(presets::collapse(), RewardConfig::default(), 30);
        cfg.eval_samples = 100;
        cfg.seed = 17;
        assert_eq!(run_adaptation(&cfg).unwrap(), run_adaptation(&cfg).unwrap());
    }

    #[test]
    fn trace_records_pseudo_label_only_for_mv() {
        let mut cfg = AdaptConfig::new(presets::collapse(), RewardConfig::default(), 3);
        let dare = run_adaptation(&cfg).unwrap();
        assert!(dare.steps.iter().all(|s| s.pseudo_label_correct.is_none()));
        cfg.reward.mode = RewardMode::Mv;
        let mv = run_adaptation(&cfg).unwrap();
        assert!(mv.steps.iter().all(|s| s.pseudo_label_correct.is_some()));
        assert_eq!(mv.steps.len(), 3);

        let mut buf = Vec::new();
        mv.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "step,pass_at_1,policy_entropy,mean_reward,pseudo_label_correct,rollout_correlation,reward_variance\n"
        ));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn excluding_pruned_rollouts_still_runs() {
        let mut cfg = AdaptConfig::new(presets::collapse(), RewardConfig::default(), 40);
        cfg.reward.exclude_pruned = true;
        let trace = run_adaptation(&cfg).unwrap();
        assert_eq!(trace.steps.len(), 40);
        assert!(trace.final_policy.logits.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn collapse_world_separates_mv_and_dare() {
        let mut cfg = AdaptConfig::new(presets::collapse(), RewardConfig::default(), 300);
        cfg.seed = 3;
        let dare = run_adaptation(&cfg).unwrap();
        cfg.reward.mode = RewardMode::Mv;
        let mv = run_adaptation(&cfg).unwrap();
        assert!(mv.final_pass_at_1() < mv.initial_pass_at_1);
        assert!(dare.final_pass_at_1() > dare.initial_pass_at_1);
    }

    #[test]
    fn sweep_has_one_row_per_kappa_and_mode() {
        let cfg = AdaptConfig::new(presets::collapse(), RewardConfig::default(), 10);
        let rows =
            correlation_sweep(&cfg, &[0.0, 0.5], &[RewardMode::Mv, RewardMode::Dare], 2).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!((rows[0].kappa, rows[0].mode), (0.0, RewardMode::Mv));
        assert_eq!((rows[3].kappa, rows[3].mode), (0.5, RewardMode::Dare));
        assert!(correlation_sweep(&cfg, &[1.5], &[RewardMode::Mv], 1).is_err());
    }

    #[test]
    fn uncorrelated_majority_correct_world_gives_similar_outcomes() {
        // Correct answer is the i.i.d. majority; both estimators push it up.
        let world = presets::convergence().with_kappa(0.0).unwrap();
        let mut cfg = AdaptConfig::new(world, RewardConfig::default(), 150);
        cfg.seed = 9;
        let rows = correlation_sweep(&cfg, &[0.0], &[RewardMode::Mv, RewardMode::Dare], 6).unwrap();
        assert!(
            rows[0].final_pass_at_1 > 0.9 && rows[1].final_pass_at_1 > 0.9,
            "{rows:?}"
        );
        assert!(
            (rows[0].final_pass_at_1 - rows[1].final_pass_at_1).abs() < 0.05,
            "{rows:?}"
        );
    }

    #[test]
    fn ablation_cardinality_and_pairing() {
        let cfg = AdaptConfig::new(presets::collapse(), RewardConfig::default(), 5);
        let rows = ablation(&cfg, &RewardMode::ALL, &[1, 2, 3]).unwrap();
        assert_eq!(rows.len(), 15);
        // Same seed, same initial policy and first rollout group across variants.
        assert!(rows
            .iter()
            .all(|r| r.initial_pass_at_1 == rows[0].initial_pass_at_1));
        let mut buf = Vec::new();
        write_ablation_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 16);
    }

    #[test]
    fn median_steps_orders_unreached_last() {
        assert_eq!(median_steps(&[Some(3), None, Some(1)]), Some(3));
        assert_eq!(median_steps(&[None, None, Some(1)]), None);
        assert_eq!(median_steps(&[]), None);
    }

    #[test]
    fn steps_to_threshold_uses_first_crossing() {
        let policy = ToyPolicy::uniform(keys(2));
        let rec = |step, p| StepRecord {
            step,
            pass_at_1: p,
            policy_entropy: 0.0,
            mean_reward: 0.0,
            pseudo_label_correct: None,
            rollout_correlation: 0.0,
            reward_variance: 0.0,
            exact_pass_at_1: p,
        };
        let trace = AdaptTrace {
            mode: RewardMode::Dare,
            initial_pass_at_1: 0.4,
            steps: vec![rec(1, 0.5), rec(2, 0.61), rec(3, 0.59), rec(4, 0.7)],
            final_policy: policy,
        };
        assert_eq!(trace.steps_to_threshold(0.6), Some(2));
        assert_eq!(trace.steps_to_threshold(0.3), Some(0));
        assert_eq!(trace.steps_to_threshold(0.9), None);
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(
            logits in prop::collection::vec(-3.0f64..3.0, 2..6),
            raw in prop::collection::vec((0usize..6, -2.0f64..2.0), 1..10),
        ) {
            let k = logits.len();
            let policy = ToyPolicy::new(keys(k), logits.clone()).unwrap();
            let answers: Vec<usize> = raw.iter().map(|(y, _)| y % k).collect();
            let adv: Vec<f64> = raw.iter().map(|(_, a)| *a).collect();
            let grad = score_function_gradient(&policy, &answers, &adv).unwrap();
            let h = 1e-5;
            for j in 0..k {
                let mut up = logits.clone();
                let mut down = logits.clone();
                up[j] += h;
                down[j] -= h;
                let fu = surrogate_objective(&ToyPolicy::new(keys(k), up).unwrap(), &answers, &adv);
                let fd = surrogate_objective(&ToyPolicy::new(keys(k), down).unwrap(), &answers, &adv);
                prop_assert!(((fu - fd) / (2.0 * h) - grad[j]).abs() < 1e-6);
            }
        }

        #[test]
        fn advantages_are_standardized(rewards in prop::collection::vec(0.0f64..2.0, 2..32)) {
            let a = grpo_advantages(&rewards).unwrap();
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            let r_mean = rewards.iter().sum::<f64>() / n;
            let r_std = (rewards.iter().map(|r| (r - r_mean).powi(2)).sum::<f64>() / n).sqrt();
            if r_std > 1e-2 {
                let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!((std - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn updates_keep_policy_valid(
            logits in prop::collection::vec(-5.0f64..5.0, 2..6),
            raw in prop::collection::vec((0usize..6, 0.0f64..1.0), 2..16),
            lr in 0.0f64..1.0,
        ) {
            let k = logits.len();
            let policy = ToyPolicy::new(keys(k), logits).unwrap();
            let answers: Vec<usize> = raw.iter().map(|(y, _)| y % k).collect();
            let rewards: Vec<f64> = raw.iter().map(|(_, r)| *r).collect();
            let adv = grpo_advantages(&rewards).unwrap();
            let next = grpo_update(&policy, &answers, &adv, lr).unwrap();
            let probs = next.probabilities();
            prop_assert!(next.logits.iter().all(|l| l.is_finite()));
            prop_assert!(probs.iter().all(|&p| p > 0.0));
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
