//! Monte Carlo checks of three estimator properties on synthetic worlds:
//!
//! - information collapse: `I(R; R_MV) <= I(R; Y)`, strictly when answers with
//!   different rewards both carry mass;
//! - latent-conditioned bias: under correlated rollouts the expected
//!   majority-vote reward differs from the marginal expected reward `mu`;
//! - marginal consistency: the frequency-weighted empirical distribution is an
//!   unbiased estimate of the marginal answer distribution.
//!
//! Every check pairs its Monte Carlo estimate with an exact value computed
//! independently (closed form or brute-force enumeration). Standard errors
//! come from batch means.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::{uncertainty_weighted_distribution, RewardConfig, Shaping};
use crate::rng::SeedStreams;
use crate::rollout::answer_stats;
use crate::simulator::{
    marginal_expected_reward, sample_population_with, LatentWorld, WorldSampler,
};

/// Number of batches used for batch-means standard errors.
pub const BATCHES: usize = 30;

/// Contingency table over `(R in {0, 1}) x (signal value)`. Cells hold
/// non-negative weights: counts, or exact probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointCounts {
    /// `cells[signal][reward]`.
    pub cells: Vec<[f64; 2]>,
}

impl JointCounts {
    pub fn new(num_signals: usize) -> Self {
        Self {
            cells: vec![[0.0; 2]; num_signals],
        }
    }

    pub fn add(&mut self, reward: u8, signal: usize, weight: f64) {
        self.cells[signal][usize::from(reward.min(1))] += weight;
    }

    pub fn total(&self) -> f64 {
        self.cells.iter().map(|c| c[0] + c[1]).sum()
    }

    pub fn merge(&mut self, other: &JointCounts) {
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            a[0] += b[0];
            a[1] += b[1];
        }
    }
}

/// Plug-in mutual information in bits, with `0 log 0 = 0`.
pub fn mutual_information(counts: &JointCounts) -> Result<f64> {
    let total = counts.total();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::validation("counts", "total count must be positive"));
    }
    if counts
        .cells
        .iter()
        .flatten()
        .any(|c| *c < 0.0 || !c.is_finite())
    {
        return Err(Error::validation(
            "counts",
            "cells must be finite and non-negative",
        ));
    }
    let mut reward_marginal = [0.0; 2];
    for c in &counts.cells {
        reward_marginal[0] += c[0] / total;
        reward_marginal[1] += c[1] / total;
    }
    let mut mi = 0.0;
    for c in &counts.cells {
        let signal_marginal = (c[0] + c[1]) / total;
        for r in 0..2 {
            let joint = c[r] / total;
            if joint > 0.0 {
                mi += joint * (joint / (reward_marginal[r] * signal_marginal)).log2();
            }
        }
    }
    Ok(mi.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// Pass iff `|estimate - oracle| <= tolerance`.
    Approx,
    /// Pass iff `estimate <= oracle + tolerance`.
    AtMost,
    /// Pass iff `estimate >= oracle + tolerance`.
    AtLeast,
    /// Shown for inspection only.
    Reported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub quantity: String,
    pub estimate: f64,
    pub oracle: Option<f64>,
    pub std_error: Option<f64>,
    pub samples: u64,
    pub tolerance: Option<f64>,
    pub kind: CheckKind,
    pub passed: Option<bool>,
}

impl ReportEntry {
    fn new(quantity: &str, estimate: f64, samples: u64) -> Self {
        Self {
            quantity: quantity.to_owned(),
            estimate,
            oracle: None,
            std_error: None,
            samples,
            tolerance: None,
            kind: CheckKind::Reported,
            passed: None,
        }
    }

    fn std_error(mut self, se: f64) -> Self {
        self.std_error = Some(se);
        self
    }

    fn oracle(mut self, oracle: f64) -> Self {
        self.oracle = Some(oracle);
        self
    }

    fn assert(mut self, kind: CheckKind, oracle: f64, tolerance: f64) -> Self {
        self.oracle = Some(oracle);
        self.tolerance = Some(tolerance);
        self.kind = kind;
        self.passed = Some(match kind {
            CheckKind::Approx => (self.estimate - oracle).abs() <= tolerance,
            CheckKind::AtMost => self.estimate <= oracle + tolerance,
            CheckKind::AtLeast => self.estimate >= oracle + tolerance,
            CheckKind::Reported => true,
        });
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub check: String,
    pub rollouts_per_population: usize,
    pub populations: u64,
    pub seed: u64,
    pub entries: Vec<ReportEntry>,
    pub notes: Vec<String>,
}

impl TheoryReport {
    /// False iff some asserted entry failed.
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed != Some(false))
    }

    pub fn entry(&self, quantity: &str) -> Option<&ReportEntry> {
        self.entries.iter().find(|e| e.quantity == quantity)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-width table for terminals.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} (M={}, populations={}, seed={})",
            self.check, self.rollouts_per_population, self.populations, self.seed
        );
        let _ = writeln!(
            out,
            "  {:<34} {:>10} {:>10} {:>10} {:>10} {:>9} {:>6}",
            "quantity", "estimate", "oracle", "std_err", "tol", "kind", "pass"
        );
        let fmt = |x: Option<f64>| x.map_or_else(|| "-".to_owned(), |v| format!("{v:.4}"));
        for e in &self.entries {
            let kind = match e.kind {
                CheckKind::Approx => "approx",
                CheckKind::AtMost => "at_most",
                CheckKind::AtLeast => "at_least",
                CheckKind::Reported => "reported",
            };
            let pass = match e.passed {
                Some(true) => "ok",
                Some(false) => "FAIL",
                None => "-",
            };
            let _ = writeln!(
                out,
                "  {:<34} {:>10.4} {:>10} {:>10} {:>10} {:>9} {:>6}",
                e.quantity,
                e.estimate,
                fmt(e.oracle),
                fmt(e.std_error),
                fmt(e.tolerance),
                kind,
                pass
            );
        }
        for n in &self.notes {
            let _ = writeln!(out, "  note: {n}");
        }
        out
    }
}

/// Mean and batch-means standard error of `values` split into [`BATCHES`]
/// contiguous batches.
pub fn batch_means(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n.max(1) as f64;
    let batches = BATCHES.min(n);
    if batches < 2 {
        return (mean, f64::NAN);
    }
    let means: Vec<f64> = (0..batches)
        .map(|b| {
            let lo = b * n / batches;
            let hi = (b + 1) * n / batches;
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    (mean, sample_sd(&means) / (batches as f64).sqrt())
}

fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Index of the most frequent entry of `answers`, ties to the smallest index.
/// Answer indices follow canonical key order, so this matches
/// [`crate::rewards::mv_pseudo_label`].
pub fn majority_index(answers: &[usize], num_answers: usize) -> usize {
    let mut counts = vec![0usize; num_answers];
    for &a in answers {
        counts[a] += 1;
    }
    argmax_first(&counts)
}

fn argmax_first<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// True when two answers with different rewards both have positive marginal
/// probability.
pub fn has_distinct_rewards(world: &LatentWorld) -> bool {
    let rewards = world.reward_vector();
    let mut seen = [false; 2];
    for (p, r) in world.marginal_vector().iter().zip(&rewards) {
        if *p > 0.0 {
            seen[usize::from(*r > 0.5)] = true;
        }
    }
    seen[0] && seen[1]
}

/// Exact `I(R(Y); Y)` for `Y ~ p(y)`.
pub fn exact_reward_information(world: &LatentWorld) -> f64 {
    let rewards = world.reward_vector();
    let mut table = JointCounts::new(rewards.len());
    for (y, p) in world.marginal_vector().iter().enumerate() {
        table.add(rewards[y] as u8, y, *p);
    }
    mutual_information(&table).unwrap_or(0.0)
}

/// `I(R(Y); 1[Y = mode_z])` in the infinite-population limit, where the
/// pseudo-label is the mode of each sampling distribution.
pub fn asymptotic_mv_information(world: &LatentWorld) -> f64 {
    let rewards = world.reward_vector();
    let mut table = JointCounts::new(2);
    for (pz, q) in world
        .mode_probabilities()
        .iter()
        .zip(world.mixed_conditionals())
    {
        let label = argmax_first(&q);
        for (y, qy) in q.iter().enumerate() {
            table.add(rewards[y] as u8, usize::from(y == label), pz * qy);
        }
    }
    mutual_information(&table).unwrap_or(0.0)
}

/// `E_z[max_y q(y | z)]`: the expected agreement rate in the infinite limit.
pub fn asymptotic_mv_agreement(world: &LatentWorld) -> f64 {
    world
        .mode_probabilities()
        .iter()
        .zip(world.mixed_conditionals())
        .map(|(pz, q)| pz * q.iter().cloned().fold(0.0, f64::max))
        .sum()
}

/// `E_z[R(mode_z)]`: the expected correctness of the pseudo-label in the limit.
pub fn asymptotic_label_reward(world: &LatentWorld) -> f64 {
    let rewards = world.reward_vector();
    world
        .mode_probabilities()
        .iter()
        .zip(world.mixed_conditionals())
        .map(|(pz, q)| pz * rewards[argmax_first(&q)])
        .sum()
}

/// Exact expected agreement with the pseudo-label, `E[count(label) / M]`, by
/// enumerating all `K^M` answer tuples per latent mode.
pub fn enumerate_mv_agreement(world: &LatentWorld, m: usize) -> f64 {
    let k = world.truth.len();
    let mut expected = 0.0;
    for (pz, q) in world
        .mode_probabilities()
        .iter()
        .zip(world.mixed_conditionals())
    {
        if *pz == 0.0 {
            continue;
        }
        let mut tuple = vec![0usize; m];
        loop {
            let prob: f64 = tuple.iter().map(|&y| q[y]).product();
            if prob > 0.0 {
                let mut counts = vec![0usize; k];
                for &y in &tuple {
                    counts[y] += 1;
                }
                let mut label = 0;
                for y in 1..k {
                    if counts[y] > counts[label] {
                        label = y;
                    }
                }
                expected += pz * prob * counts[label] as f64 / m as f64;
            }
            // odometer increment
            let mut pos = 0;
            while pos < m {
                tuple[pos] += 1;
                if tuple[pos] < k {
                    break;
                }
                tuple[pos] = 0;
                pos += 1;
            }
            if pos == m {
                break;
            }
        }
    }
    expected
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfoCollapseParams {
    pub rollouts: usize,
    pub populations: usize,
    pub seed: u64,
    /// Tolerance for `I(R;Y)` against its exact value.
    pub tolerance: f64,
    /// Also assert `I(R;R_MV)` against its infinite-population value.
    pub assert_asymptotic: bool,
}

impl Default for InfoCollapseParams {
    fn default() -> Self {
        Self {
            rollouts: 200,
            populations: 100_000,
            seed: 0,
            tolerance: 0.01,
            assert_asymptotic: false,
        }
    }
}

/// Tabulates `(R(Y), Y)` and `(R(Y), R_MV(Y; P))` for a fresh rollout `Y`
/// drawn alongside each population `P`.
pub fn information_collapse_check(
    world: &LatentWorld,
    params: &InfoCollapseParams,
) -> Result<TheoryReport> {
    if params.rollouts == 0 || params.populations < BATCHES {
        return Err(Error::validation(
            "populations",
            format!("need at least 1 rollout and {BATCHES} populations"),
        ));
    }
    let sampler = WorldSampler::new(world)?;
    let rewards: Vec<u8> = world.truth.values().copied().collect();
    let k = rewards.len();
    let mut rng = SeedStreams::new(params.seed).stream("theory.information");

    let n = params.populations;
    let mut by_answer = Vec::with_capacity(BATCHES);
    let mut by_mv = Vec::with_capacity(BATCHES);
    let mut answers = vec![0usize; params.rollouts];
    for b in 0..BATCHES {
        let size = (b + 1) * n / BATCHES - b * n / BATCHES;
        let mut t_answer = JointCounts::new(k);
        let mut t_mv = JointCounts::new(2);
        for _ in 0..size {
            let z = sampler.sample_mode(&mut rng);
            for a in answers.iter_mut() {
                *a = sampler.sample_answer(z, &mut rng);
            }
            let label = majority_index(&answers, k);
            let y = sampler.sample_answer(z, &mut rng);
            t_answer.add(rewards[y], y, 1.0);
            t_mv.add(rewards[y], usize::from(y == label), 1.0);
        }
        by_answer.push(t_answer);
        by_mv.push(t_mv);
    }

    let batch_mi = |tables: &[JointCounts]| -> Result<Vec<f64>> {
        tables.iter().map(mutual_information).collect()
    };
    let mi_answer_batches = batch_mi(&by_answer)?;
    let mi_mv_batches = batch_mi(&by_mv)?;
    let pooled = |tables: &[JointCounts]| {
        let mut all = tables[0].clone();
        for t in &tables[1..] {
            all.merge(t);
        }
        all
    };
    let mi_answer = mutual_information(&pooled(&by_answer))?;
    let mi_mv = mutual_information(&pooled(&by_mv))?;
    let se = |xs: &[f64]| sample_sd(xs) / (xs.len() as f64).sqrt();
    let se_answer = se(&mi_answer_batches);
    let se_mv = se(&mi_mv_batches);
    let diffs: Vec<f64> = mi_mv_batches
        .iter()
        .zip(&mi_answer_batches)
        .map(|(a, b)| a - b)
        .collect();
    let se_diff = se(&diffs);

    let exact_answer = exact_reward_information(world);
    let asymptotic_mv = asymptotic_mv_information(world);
    let samples = n as u64;
    let mut entries = vec![ReportEntry::new("I(R;Y) bits", mi_answer, samples)
        .std_error(se_answer)
        .assert(CheckKind::Approx, exact_answer, params.tolerance)];
    let mv_entry = ReportEntry::new("I(R;R_MV) bits", mi_mv, samples).std_error(se_mv);
    entries.push(if params.assert_asymptotic {
        mv_entry.assert(CheckKind::Approx, asymptotic_mv, params.tolerance)
    } else {
        mv_entry.oracle(asymptotic_mv)
    });
    entries.push(
        ReportEntry::new("I(R;R_MV) - I(R;Y)", mi_mv - mi_answer, samples)
            .std_error(se_diff)
            .assert(CheckKind::AtMost, 0.0, 3.0 * se_diff),
    );
    let mut notes = Vec::new();
    if has_distinct_rewards(world) {
        entries.push(
            ReportEntry::new("I(R;Y) - I(R;R_MV) strict gap", mi_answer - mi_mv, samples)
                .std_error(se_diff)
                .assert(CheckKind::AtLeast, 0.0, 3.0 * se_diff),
        );
    } else {
        notes.push("equality regime: every answer with mass has the same reward".to_owned());
    }
    Ok(TheoryReport {
        check: "information_collapse".to_owned(),
        rollouts_per_population: params.rollouts,
        populations: samples,
        seed: params.seed,
        entries,
        notes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasParams {
    pub rollouts: usize,
    pub populations: usize,
    pub seed: u64,
    /// Assert `E[R_MV] - mu >= min_bias` when set.
    pub min_bias: Option<f64>,
    /// Largest `K^M` for which the exact enumeration oracle is run.
    pub enumeration_limit: u64,
}

impl Default for BiasParams {
    fn default() -> Self {
        Self {
            rollouts: 200,
            populations: 10_000,
            seed: 0,
            min_bias: None,
            enumeration_limit: 1_000_000,
        }
    }
}

/// Compares the expected majority-vote reward (agreement with the
/// pseudo-label) with the marginal expected reward `mu`.
pub fn mv_bias_check(world: &LatentWorld, params: &BiasParams) -> Result<TheoryReport> {
    if params.rollouts == 0 || params.populations < BATCHES {
        return Err(Error::validation(
            "populations",
            format!("need at least 1 rollout and {BATCHES} populations"),
        ));
    }
    let sampler = WorldSampler::new(world)?;
    let rewards = world.reward_vector();
    let k = rewards.len();
    let m = params.rollouts;
    let mut rng = SeedStreams::new(params.seed).stream("theory.bias");

    let mut agreement = Vec::with_capacity(params.populations);
    let mut label_reward = Vec::with_capacity(params.populations);
    for _ in 0..params.populations {
        let (_, answers) = sampler.sample_answers(m, &mut rng);
        let label = majority_index(&answers, k);
        let hits = answers.iter().filter(|&&a| a == label).count();
        agreement.push(hits as f64 / m as f64);
        label_reward.push(rewards[label]);
    }
    let (agree_mean, agree_se) = batch_means(&agreement);
    let (label_mean, label_se) = batch_means(&label_reward);
    let mu = marginal_expected_reward(world);
    let samples = params.populations as u64;

    let mut notes = Vec::new();
    let agreement_entry =
        ReportEntry::new("E[R_MV] agreement", agree_mean, samples).std_error(agree_se);
    let tuples = (k as u64)
        .checked_pow(m as u32)
        .filter(|t| *t <= params.enumeration_limit);
    let agreement_entry = match tuples {
        Some(_) => agreement_entry.assert(
            CheckKind::Approx,
            enumerate_mv_agreement(world, m),
            3.0 * agree_se,
        ),
        None => {
            notes.push(format!(
                "K^M = {k}^{m} exceeds the enumeration limit; oracle column shows the infinite-population agreement"
            ));
            agreement_entry.oracle(asymptotic_mv_agreement(world))
        }
    };
    let bias_entry =
        ReportEntry::new("bias E[R_MV] - mu", agree_mean - mu, samples).std_error(agree_se);
    let bias_entry = match params.min_bias {
        Some(b) => bias_entry.assert(CheckKind::AtLeast, b, 0.0),
        None => bias_entry,
    };
    let entries = vec![
        agreement_entry,
        ReportEntry::new("mu marginal expected reward", mu, samples).oracle(mu),
        bias_entry,
        ReportEntry::new("E[R(pseudo_label)]", label_mean, samples)
            .std_error(label_se)
            .oracle(asymptotic_label_reward(world)),
        ReportEntry::new("E[R(pseudo_label)] - mu", label_mean - mu, samples).std_error(label_se),
    ];
    Ok(TheoryReport {
        check: "mv_bias".to_owned(),
        rollouts_per_population: m,
        populations: samples,
        seed: params.seed,
        entries,
        notes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyParams {
    pub rollouts: usize,
    pub populations: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        Self {
            rollouts: 20,
            populations: 10_000,
            seed: 0,
            tolerance: 0.01,
        }
    }
}

/// Averages the empirical distribution produced under `reward_config`'s
/// shaping across populations and compares it with the exact marginal. The
/// deviation is asserted only for frequency-only shaping.
pub fn marginal_consistency_check(
    world: &LatentWorld,
    reward_config: &RewardConfig,
    params: &ConsistencyParams,
) -> Result<TheoryReport> {
    if params.rollouts == 0 || params.populations == 0 {
        return Err(Error::validation(
            "populations",
            "need at least one population of one rollout",
        ));
    }
    let sampler = WorldSampler::new(world)?;
    let answers = world.answers();
    let marginal = world.marginal_vector();
    let mut rng = SeedStreams::new(params.seed).stream("theory.consistency");
    let mut sums = vec![0.0; answers.len()];
    for i in 0..params.populations {
        let pop = sample_population_with(
            world,
            &sampler,
            &format!("consistency-{i}"),
            params.rollouts,
            &mut rng,
        )?;
        let dist = uncertainty_weighted_distribution(&answer_stats(&pop)?, reward_config)?;
        for (j, key) in answers.iter().enumerate() {
            if let Some(e) = dist.get(key) {
                sums[j] += e.probability;
            }
        }
    }
    let samples = params.populations as u64;
    let averaged: Vec<f64> = sums.iter().map(|s| s / params.populations as f64).collect();
    let max_dev = averaged
        .iter()
        .zip(&marginal)
        .map(|(a, m)| (a - m).abs())
        .fold(0.0, f64::max);

    let mut entries: Vec<ReportEntry> = answers
        .iter()
        .zip(averaged.iter().zip(&marginal))
        .map(|(key, (a, m))| ReportEntry::new(&format!("E[p_hat({key})]"), *a, samples).oracle(*m))
        .collect();
    let dev = ReportEntry::new("max |E[p_hat] - p|", max_dev, samples);
    let mut notes = Vec::new();
    if reward_config.shaping == Shaping::FrequencyOnly {
        entries.push(dev.assert(CheckKind::AtMost, 0.0, params.tolerance));
    } else {
        notes.push("uncertainty-weighted shaping: deviation reported, consistency only holds for frequency weights".to_owned());
        entries.push(dev.oracle(0.0));
    }
    Ok(TheoryReport {
        check: "marginal_consistency".to_owned(),
        rollouts_per_population: params.rollouts,
        populations: samples,
        seed: params.seed,
        entries,
        notes,
    })
}

/// Exact per-answer probabilities of the marginal, keyed by answer.
pub fn marginal_table(world: &LatentWorld) -> BTreeMap<String, f64> {
    world
        .answers()
        .into_iter()
        .map(|k| k.0)
        .zip(world.marginal_vector())
        .collect()
}
