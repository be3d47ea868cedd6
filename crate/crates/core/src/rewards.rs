//! Rollout-level reward estimators.
//!
//! Two families live here. The majority-vote baseline picks the most frequent
//! answer as a pseudo-label and rewards agreement with it. The
//! distribution-aware estimator instead rewards each rollout with the
//! probability of its answer under an uncertainty-weighted empirical
//! distribution, adds an exploration bonus for infrequent low-uncertainty
//! answers, and prunes answers whose probability falls below a threshold:
//!
//! ```text
//! w(y)  = shape(n(y), u(y))                 uncertainty-aware weight
//! p(y)  = w(y) / sum_y' w(y')               empirical distribution
//! p~(y) = p(y) 1[p(y) >= tau] / Z           pruned + renormalized
//! r(y)  = p~(y) + alpha * b~(y)             b~ recomputed on survivors
//! ```

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::{answer_stats, AnswerKey, AnswerStats, Population, NORMALIZATION_TOL};

/// Which estimator produces the rewards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Majority vote over raw counts.
    Mv,
    /// Full pipeline: weighting, bonus and pruning.
    Dare,
    /// Weighting and pruning, no bonus.
    DareNoBonus,
    /// Weighting and bonus, no pruning.
    DareNoPrune,
    /// Weighting only.
    DistOnly,
}

impl RewardMode {
    pub const ALL: [RewardMode; 5] = [
        RewardMode::DistOnly,
        RewardMode::DareNoPrune,
        RewardMode::DareNoBonus,
        RewardMode::Dare,
        RewardMode::Mv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RewardMode::Mv => "mv",
            RewardMode::Dare => "dare",
            RewardMode::DareNoBonus => "dare_no_bonus",
            RewardMode::DareNoPrune => "dare_no_prune",
            RewardMode::DistOnly => "dist_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn is_distribution_based(self) -> bool {
        self != RewardMode::Mv
    }
}

/// How counts and mean uncertainty combine into an unnormalized weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shaping {
    /// `n / (u + eps)`
    LinearPenalty,
    /// `n / sqrt(u + eps)`
    SqrtPenalty,
    /// `n * exp(-lambda * u)`
    ExponentialPenalty,
    /// `n / ln(1 + u + eps)`
    LogPenalty,
    /// `n`
    FrequencyOnly,
}

impl Shaping {
    pub fn is_frequency_only(self) -> bool {
        self == Shaping::FrequencyOnly
    }
}

/// Functional form of the exploration bonus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BonusVariant {
    /// `(1 - n/M) * (1 - u)`
    Product,
    /// `(1 / (n + 1)) * (1 - u)`
    LinearInverse,
    /// `ln((M + 1) / (n + 1)) * (1 - u)`
    LogInverse,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub mode: RewardMode,
    pub shaping: Shaping,
    pub bonus: BonusVariant,
    /// Bonus strength, in `[0, 1]`.
    pub alpha: f64,
    /// Pruning threshold on the empirical probability, in `[0, 1)`.
    pub prune_threshold: f64,
    pub epsilon: f64,
    /// Rate of the exponential penalty.
    pub lambda: f64,
    /// Drop pruned rollouts from the policy-gradient group instead of giving
    /// them reward 0.
    pub exclude_pruned: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            mode: RewardMode::Dare,
            shaping: Shaping::LinearPenalty,
            bonus: BonusVariant::Product,
            alpha: 0.1,
            prune_threshold: 0.05,
            epsilon: 1e-6,
            lambda: 1.0,
            exclude_pruned: false,
        }
    }
}

impl RewardConfig {
    pub fn with_mode(mut self, mode: RewardMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::validation(
                "alpha",
                format!("{} not in [0, 1]", self.alpha),
            ));
        }
        if !(0.0..1.0).contains(&self.prune_threshold) {
            return Err(Error::validation(
                "prune_threshold",
                format!("{} not in [0, 1)", self.prune_threshold),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::validation(
                "epsilon",
                format!("{} must be > 0", self.epsilon),
            ));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::validation(
                "lambda",
                format!("{} must be > 0", self.lambda),
            ));
        }
        Ok(())
    }

    /// Bonus strength after the mode has switched components on or off.
    pub fn effective_alpha(&self) -> f64 {
        match self.mode {
            RewardMode::Dare | RewardMode::DareNoPrune => self.alpha,
            _ => 0.0,
        }
    }

    /// Pruning threshold after the mode has switched components on or off.
    pub fn effective_threshold(&self) -> f64 {
        match self.mode {
            RewardMode::Dare | RewardMode::DareNoBonus => self.prune_threshold,
            _ => 0.0,
        }
    }

    /// Upper bound on any single reward under this configuration.
    pub fn reward_upper_bound(&self, group_size: usize) -> f64 {
        if self.mode == RewardMode::Mv {
            return 1.0;
        }
        let max_bonus = match self.bonus {
            BonusVariant::Product => 1.0,
            BonusVariant::LinearInverse => 0.5,
            BonusVariant::LogInverse => ((group_size as f64 + 1.0) / 2.0).ln().max(0.0),
            BonusVariant::None => 0.0,
        };
        1.0 + self.effective_alpha() * max_bonus
    }
}

/// Rewards aligned with the rollouts of a population, plus diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub rewards: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_label: Option<AnswerKey>,
    /// Answers removed by support pruning.
    pub pruned: Vec<AnswerKey>,
    /// Empirical distribution before pruning (raw frequencies for MV).
    pub p_hat: BTreeMap<AnswerKey, f64>,
    /// Distribution over the retained support.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub p_tilde: BTreeMap<AnswerKey, f64>,
    /// `false` for rollouts whose answer was pruned.
    #[serde(skip)]
    pub retained: Vec<bool>,
}

impl RewardVector {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len().max(1) as f64
    }

    /// Population variance of the rewards.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>()
            / self.rewards.len().max(1) as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// CSV with one `index,answer,reward` row per rollout.
    pub fn write_csv<W: std::io::Write>(&self, population: &Population, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "answer", "reward"])?;
        for (i, (r, rollout)) in self.rewards.iter().zip(&population.rollouts).enumerate() {
            w.write_record([i.to_string(), rollout.answer.to_string(), r.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fills in shaped weights and normalized probabilities.
pub fn uncertainty_weighted_distribution(
    stats: &AnswerStats,
    cfg: &RewardConfig,
) -> Result<AnswerStats> {
    if stats.is_empty() {
        return Err(Error::validation("stats", "no answers to weight"));
    }
    cfg.validate()?;
    let mut out = stats.clone();
    for entry in out.entries.values_mut() {
        let n = entry.count as f64;
        let u = entry.mean_uncertainty;
        entry.weight = match cfg.shaping {
            Shaping::LinearPenalty => n / (u + cfg.epsilon),
            Shaping::SqrtPenalty => n / (u + cfg.epsilon).sqrt(),
            Shaping::ExponentialPenalty => n * (-cfg.lambda * u).exp(),
            Shaping::LogPenalty => n / (1.0 + u + cfg.epsilon).ln(),
            Shaping::FrequencyOnly => n,
        };
    }
    let total: f64 = out.entries.values().map(|e| e.weight).sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Invariant(format!(
            "total weight {total} is not positive and finite"
        )));
    }
    for entry in out.entries.values_mut() {
        entry.probability = entry.weight / total;
    }
    Ok(out)
}

/// Most frequent answer by raw count; ties go to the smallest key.
pub fn mv_pseudo_label(stats: &AnswerStats) -> Result<AnswerKey> {
    // BTreeMap iterates in ascending key order, so keeping the first maximum
    // implements the tie-break.
    let mut best: Option<(&AnswerKey, usize)> = None;
    for (k, e) in stats.iter() {
        if best.is_none_or(|(_, n)| e.count > n) {
            best = Some((k, e.count));
        }
    }
    best.map(|(k, _)| k.clone())
        .ok_or_else(|| Error::validation("stats", "no answers to vote over"))
}

/// Binary agreement reward with `pseudo_label`.
pub fn mv_rewards(population: &Population, pseudo_label: &AnswerKey) -> Result<RewardVector> {
    if !population
        .rollouts
        .iter()
        .any(|r| &r.answer == pseudo_label)
    {
        return Err(Error::validation(
            "pseudo_label",
            format!("answer {pseudo_label} does not occur in the population"),
        ));
    }
    let m = population.len() as f64;
    let mut p_hat = BTreeMap::new();
    for r in &population.rollouts {
        *p_hat.entry(r.answer.clone()).or_insert(0.0) += 1.0 / m;
    }
    Ok(RewardVector {
        rewards: population
            .rollouts
            .iter()
            .map(|r| if &r.answer == pseudo_label { 1.0 } else { 0.0 })
            .collect(),
        pseudo_label: Some(pseudo_label.clone()),
        pruned: Vec::new(),
        p_hat,
        p_tilde: BTreeMap::new(),
        retained: vec![true; population.len()],
    })
}

/// Bonus for an answer seen `count` times out of `group_size` with mean
/// uncertainty `uncertainty`.
pub fn exploration_bonus(
    count: usize,
    uncertainty: f64,
    group_size: usize,
    variant: BonusVariant,
) -> Result<f64> {
    if count == 0 || count > group_size {
        return Err(Error::validation(
            "count",
            format!("count {count} outside [1, group size {group_size}]"),
        ));
    }
    if !(0.0..=1.0).contains(&uncertainty) {
        return Err(Error::validation(
            "uncertainty",
            format!("{uncertainty} not in [0, 1]"),
        ));
    }
    let n = count as f64;
    let m = group_size as f64;
    let confidence = 1.0 - uncertainty;
    Ok(match variant {
        BonusVariant::Product => (1.0 - n / m) * confidence,
        BonusVariant::LinearInverse => confidence / (n + 1.0),
        BonusVariant::LogInverse => ((m + 1.0) / (n + 1.0)).ln() * confidence,
        BonusVariant::None => 0.0,
    })
}

/// Drops answers with probability below `threshold` and renormalizes the
/// rest. If nothing survives, only the most probable answer is kept (ties to
/// the smallest key) with probability 1.
pub fn prune_and_renormalize(stats: &AnswerStats, threshold: f64) -> Result<AnswerStats> {
    if stats.is_empty() {
        return Err(Error::validation("stats", "no answers to prune"));
    }
    let mut kept: BTreeMap<AnswerKey, _> = stats
        .iter()
        .filter(|(_, e)| e.probability >= threshold)
        .map(|(k, e)| (k.clone(), *e))
        .collect();
    if kept.is_empty() {
        let mut best: Option<(&AnswerKey, f64)> = None;
        for (k, e) in stats.iter() {
            if best.is_none_or(|(_, p)| e.probability > p) {
                best = Some((k, e.probability));
            }
        }
        let (k, _) = best.expect("stats is non-empty");
        kept.insert(k.clone(), *stats.get(k).expect("key from stats"));
    }
    let mass: f64 = kept.values().map(|e| e.probability).sum();
    if mass.is_nan() || mass <= 0.0 {
        // Only reachable when every probability is zero, i.e. weights were never computed.
        return Err(Error::Invariant("retained probability mass is zero".into()));
    }
    for e in kept.values_mut() {
        e.probability /= mass;
    }
    Ok(AnswerStats { entries: kept })
}

/// Distribution-aware rewards for every rollout of `population`.
pub fn dare_rewards(population: &Population, cfg: &RewardConfig) -> Result<RewardVector> {
    cfg.validate()?;
    let stats = answer_stats(population)?;
    let weighted = uncertainty_weighted_distribution(&stats, cfg)?;
    let retained_stats = prune_and_renormalize(&weighted, cfg.effective_threshold())?;

    let pruned: Vec<AnswerKey> = weighted
        .entries
        .keys()
        .filter(|k| !retained_stats.entries.contains_key(*k))
        .cloned()
        .collect();
    let pruned_set: BTreeSet<&AnswerKey> = pruned.iter().collect();
    let retained: Vec<bool> = population
        .rollouts
        .iter()
        .map(|r| !pruned_set.contains(&r.answer))
        .collect();

    // Counts, uncertainties and the group size are recomputed on the
    // surviving rollouts only.
    let survivors = Population {
        query_id: population.query_id.clone(),
        vocab_size: population.vocab_size,
        rollouts: population
            .rollouts
            .iter()
            .zip(&retained)
            .filter(|(_, keep)| **keep)
            .map(|(r, _)| r.clone())
            .collect(),
    };
    let survivor_stats = answer_stats(&survivors)?;
    let survivor_size = survivors.len();
    let alpha = cfg.effective_alpha();

    let mut per_answer = BTreeMap::new();
    for (k, e) in survivor_stats.iter() {
        let p_tilde = retained_stats
            .get(k)
            .ok_or_else(|| Error::Invariant(format!("survivor {k} missing from retained support")))?
            .probability;
        let bonus = if alpha > 0.0 {
            exploration_bonus(e.count, e.mean_uncertainty, survivor_size, cfg.bonus)?
        } else {
            0.0
        };
        per_answer.insert(k.clone(), p_tilde + alpha * bonus);
    }

    let rewards = population
        .rollouts
        .iter()
        .zip(&retained)
        .map(|(r, keep)| if *keep { per_answer[&r.answer] } else { 0.0 })
        .collect();

    Ok(RewardVector {
        rewards,
        pseudo_label: None,
        pruned,
        p_hat: weighted.probabilities(),
        p_tilde: retained_stats.probabilities(),
        retained,
    })
}

/// Dispatches on `cfg.mode`.
pub fn estimate_rewards(population: &Population, cfg: &RewardConfig) -> Result<RewardVector> {
    cfg.validate()?;
    match cfg.mode {
        RewardMode::Mv => {
            let stats = answer_stats(population)?;
            let label = mv_pseudo_label(&stats)?;
            mv_rewards(population, &label)
        }
        _ => dare_rewards(population, cfg),
    }
}

/// True when the probabilities of `stats` sum to one within tolerance.
pub fn is_normalized(stats: &AnswerStats) -> bool {
    let total: f64 = stats.iter().map(|(_, e)| e.probability).sum();
    (total - 1.0).abs() <= NORMALIZATION_TOL
}
