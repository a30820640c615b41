//! Metrics and the cross-validation harness: bag-level AUC-ROC, accuracy
//! under a learned threshold, stratified k-fold assignment, and the repeated
//! CV protocol with mean/std aggregation.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{apply_normalizer, fit_normalizer, MilDataset};
use crate::error::{Error, Result};
use crate::mil::{train, Bag, BagLabel, TrainConfig, TrainedModel};
use crate::model::ModelSpec;

fn check_scores(scores: &[f64], labels: &[BagLabel], op: &str) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{op}: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Input(format!("{op}: non-finite score {bad}")));
    }
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    Ok((pos, labels.len() - pos))
}

/// Bag-level AUC-ROC as the normalized Mann-Whitney statistic:
/// (pairs where a positive outscores a negative, ties counted half) divided
/// by |P|*|N|.
pub fn auc_roc(scores: &[f64], labels: &[BagLabel]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, labels, "auc_roc")?;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "AUC-ROC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Average ranks over tie groups; summing positive ranks gives U exactly.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            if labels[idx].is_positive() {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Fraction of bags classified correctly by the rule
/// `score > threshold => positive` (a score equal to the threshold counts as
/// negative).
pub fn accuracy(scores: &[f64], labels: &[BagLabel], threshold: f64) -> Result<f64> {
    check_scores(scores, labels, "accuracy")?;
    if scores.is_empty() {
        return Err(Error::Input("accuracy of an empty score list".into()));
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| (**s > threshold) == l.is_positive())
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Picks the threshold maximizing accuracy on the given scores.
///
/// Candidates are the midpoints between consecutive distinct sorted scores
/// plus two outside sentinels (min-1 and max+1, which classify everything
/// positive or everything negative). Ties are broken toward the candidate
/// closest to the median score, so the cut sits centrally in the score
/// distribution. The threshold is always finite.
pub fn select_threshold(scores: &[f64], labels: &[BagLabel]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, labels, "select_threshold")?;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "threshold selection needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
    };

    let mut distinct: Vec<f64> = sorted.clone();
    distinct.dedup();
    let mut candidates = Vec::with_capacity(distinct.len() + 1);
    candidates.push(distinct[0] - 1.0);
    for pair in distinct.windows(2) {
        candidates.push((pair[0] + pair[1]) / 2.0);
    }
    candidates.push(distinct[distinct.len() - 1] + 1.0);

    let mut best = (f64::NEG_INFINITY, f64::INFINITY, 0.0); // (accuracy, |t - median|, t)
    for &t in &candidates {
        let acc = accuracy(scores, labels, t)?;
        let dist = (t - median).abs();
        if acc > best.0 || (acc == best.0 && dist < best.1) {
            best = (acc, dist, t);
        }
    }
    Ok(best.2)
}

/// Disjoint bag-id folds covering the dataset, stratified by class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    folds: Vec<Vec<String>>,
}

impl FoldAssignment {
    pub fn folds(&self) -> &[Vec<String>] {
        &self.folds
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }
}

/// Shuffles each class with the seeded generator and deals round-robin into
/// `k` folds, keeping per-fold class counts within one of proportional.
pub fn stratified_kfold(bags: &[Bag], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Input(format!("k must be at least 2, got {k}")));
    }
    let mut pos: Vec<&str> = bags
        .iter()
        .filter(|b| b.label().is_positive())
        .map(|b| b.id())
        .collect();
    let mut neg: Vec<&str> = bags
        .iter()
        .filter(|b| !b.label().is_positive())
        .map(|b| b.id())
        .collect();
    if pos.len() < k || neg.len() < k {
        return Err(Error::Input(format!(
            "{k}-fold stratification needs at least {k} bags per class, got {} positive and {} negative",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, id) in pos.iter().chain(neg.iter()).enumerate() {
        folds[i % k].push(id.to_string());
    }
    Ok(FoldAssignment { folds })
}

/// One held-out fold's metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub run: usize,
    pub fold: usize,
    pub accuracy: f64,
    pub auc: f64,
}

/// Per-run averages over that run's folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub auc: f64,
}

/// Full cross-validation report: per-fold records ordered by (run, fold),
/// per-run means, and mean +/- std aggregates. The primary std is across the
/// per-run means; the std across all folds is reported alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub runs: usize,
    pub folds: usize,
    pub records: Vec<FoldRecord>,
    pub run_means: Vec<RunSummary>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub accuracy_std_folds: f64,
    pub auc_std_folds: f64,
}

fn mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    values.sum::<f64>() / n as f64
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    let m = mean(values.clone());
    (values.map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt()
}

impl CvReport {
    fn assemble(runs: usize, folds: usize, seeds: &[u64], records: Vec<FoldRecord>) -> CvReport {
        let run_means: Vec<RunSummary> = (0..runs)
            .map(|r| {
                let of_run = records.iter().filter(|rec| rec.run == r);
                RunSummary {
                    run: r,
                    seed: seeds[r],
                    accuracy: mean(of_run.clone().map(|rec| rec.accuracy)),
                    auc: mean(of_run.map(|rec| rec.auc)),
                }
            })
            .collect();
        CvReport {
            runs,
            folds,
            accuracy_mean: mean(run_means.iter().map(|r| r.accuracy)),
            accuracy_std: population_std(run_means.iter().map(|r| r.accuracy)),
            auc_mean: mean(run_means.iter().map(|r| r.auc)),
            auc_std: population_std(run_means.iter().map(|r| r.auc)),
            accuracy_std_folds: population_std(records.iter().map(|r| r.accuracy)),
            auc_std_folds: population_std(records.iter().map(|r| r.auc)),
            records,
            run_means,
        }
    }

    /// CSV rendering: one `run,fold,accuracy,auc` row per held-out fold,
    /// followed by a `#`-prefixed summary block (per-run means, then the
    /// overall mean and both std aggregations). Readers that treat `#` as a
    /// comment see a plain four-column table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,fold,accuracy,auc\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", r.run, r.fold, r.accuracy, r.auc);
        }
        let _ = writeln!(out, "# summary");
        for r in &self.run_means {
            let _ = writeln!(out, "# run_mean,{},{},{}", r.run, r.accuracy, r.auc);
        }
        let _ = writeln!(out, "# accuracy_mean,{}", self.accuracy_mean);
        let _ = writeln!(out, "# accuracy_std_runs,{}", self.accuracy_std);
        let _ = writeln!(out, "# accuracy_std_folds,{}", self.accuracy_std_folds);
        let _ = writeln!(out, "# auc_mean,{}", self.auc_mean);
        let _ = writeln!(out, "# auc_std_runs,{}", self.auc_std);
        let _ = writeln!(out, "# auc_std_folds,{}", self.auc_std_folds);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Trains on `bags` with per-fold normalization for vector models (image
/// inputs are already `[0, 1]`-scaled) and attaches the statistics to the
/// returned model.
pub fn train_normalized(bags: &[Bag], spec: &ModelSpec, cfg: &TrainConfig) -> Result<TrainedModel> {
    if spec.is_image_input() {
        return train(bags, spec, cfg);
    }
    let stats = fit_normalizer(bags)?;
    let normalized = apply_normalizer(&stats, bags)?;
    let mut model = train(&normalized, spec, cfg)?;
    model.feature_stats = Some(stats);
    Ok(model)
}

/// Repeated stratified cross-validation: `runs` runs of `k`-fold CV, run `r`
/// seeded with `cfg.seed + r`. Per fold, the normalizer and the decision
/// threshold are fit on the training split only; accuracy and AUC are
/// measured on the held-out fold. Folds execute in parallel; the report is
/// ordered by (run, fold) regardless of completion order.
pub fn run_cv(
    dataset: &MilDataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    runs: usize,
    k: usize,
) -> Result<CvReport> {
    if runs == 0 {
        return Err(Error::Input("runs must be positive".into()));
    }
    cfg.validate()?;
    let seeds: Vec<u64> = (0..runs).map(|r| cfg.seed.wrapping_add(r as u64)).collect();
    let assignments = seeds
        .iter()
        .map(|&seed| stratified_kfold(dataset.bags(), k, seed))
        .collect::<Result<Vec<_>>>()?;

    let tasks: Vec<(usize, usize)> = (0..runs)
        .flat_map(|r| (0..k).map(move |f| (r, f)))
        .collect();
    let mut records = tasks
        .into_par_iter()
        .map(|(run, fold)| {
            let evaluate = || -> Result<FoldRecord> {
                let held_out: HashSet<&str> = assignments[run].folds()[fold]
                    .iter()
                    .map(String::as_str)
                    .collect();
                let (test_bags, train_bags): (Vec<Bag>, Vec<Bag>) = dataset
                    .bags()
                    .iter()
                    .cloned()
                    .partition(|b| held_out.contains(b.id()));
                let run_cfg = TrainConfig {
                    seed: seeds[run],
                    ..cfg.clone()
                };
                let model = train_normalized(&train_bags, spec, &run_cfg)?;
                let mut scores = Vec::with_capacity(test_bags.len());
                let mut labels = Vec::with_capacity(test_bags.len());
                for bag in &test_bags {
                    scores.push(model.score_bag(bag)?.0);
                    labels.push(bag.label());
                }
                Ok(FoldRecord {
                    run,
                    fold,
                    accuracy: accuracy(&scores, &labels, model.threshold)?,
                    auc: auc_roc(&scores, &labels)?,
                })
            };
            evaluate().map_err(|e| e.context(format!("run {run} fold {fold}")))
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| (r.run, r.fold));
    Ok(CvReport::assemble(runs, k, &seeds, records))
}
