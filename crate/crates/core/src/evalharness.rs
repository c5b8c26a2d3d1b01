//! Repeated stratified k-fold cross-validation with ROC-AUC reporting.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{CorpusIndex, FeatureMatrix};
use crate::mil::{predict, train_mil, Bag, HeadKind, MilModel, MilTrainConfig};
use crate::rng::{derive_seed_indexed, Rng};

/// ROC-AUC as the Mann-Whitney statistic: the fraction of (positive,
/// negative) pairs ranked correctly, ties counted half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUC needs both classes present".into()));
    }
    // average ranks with midranks for ties
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block [i, j] shares the midrank
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Per-class one-vs-all AUC plus the unweighted macro average.
pub fn one_vs_all(scores: &[Vec<f64>], labels: &[u32], num_classes: usize) -> Result<(Vec<f64>, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} rows vs {} labels", scores.len(), labels.len())));
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        if !labels.iter().any(|&l| l as usize == c) {
            return Err(Error::Data(format!("class {c} missing from evaluation set")));
        }
        let col: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        let truth: Vec<bool> = labels.iter().map(|&l| l as usize == c).collect();
        per_class.push(auc(&col, &truth)?);
    }
    let macro_avg = per_class.iter().sum::<f64>() / num_classes as f64;
    Ok((per_class, macro_avg))
}

/// Cross-validation plan: k folds repeated several times.
#[derive(Debug, Clone)]
pub struct CvPlan {
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for CvPlan {
    fn default() -> Self {
        CvPlan { folds: 5, repeats: 5, seed: 0, stratified: true }
    }
}

/// One train/validation split.
#[derive(Debug, Clone)]
pub struct Split {
    pub repeat: usize,
    pub fold: usize,
    pub train_ids: Vec<usize>,
    pub valid_ids: Vec<usize>,
}

/// Deterministic fold assignment. Within a repeat the validation folds
/// partition the corpus; stratification deals each class round-robin so
/// per-fold class counts deviate by at most one.
pub fn repeated_kfold(labels: &[u32], plan: &CvPlan) -> Result<Vec<Split>> {
    let n = labels.len();
    if plan.folds < 2 {
        return Err(Error::Config(format!("{} folds; need at least 2", plan.folds)));
    }
    if plan.stratified {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &l in labels {
            *counts.entry(l).or_default() += 1;
        }
        for (&label, &count) in &counts {
            if count < plan.folds {
                return Err(Error::Data(format!(
                    "class {label} has {count} samples; need at least {} for stratified folds",
                    plan.folds
                )));
            }
        }
    } else if n < plan.folds {
        return Err(Error::Data(format!("{n} samples cannot fill {} folds", plan.folds)));
    }

    let mut splits = Vec::with_capacity(plan.folds * plan.repeats);
    for repeat in 0..plan.repeats {
        let mut fold_of = vec![0usize; n];
        let mut rng = Rng::stream_indexed(plan.seed, "cv.repeat", repeat as u64);
        if plan.stratified {
            // per class: shuffle, then deal round-robin starting at the fold
            // where the previous class stopped, keeping overall fold sizes
            // as equal as unstratified dealing
            let mut classes: Vec<u32> = {
                let mut cs: Vec<u32> = labels.to_vec();
                cs.sort_unstable();
                cs.dedup();
                cs
            };
            classes.sort_unstable();
            let mut next_fold = 0usize;
            for &class in &classes {
                let mut ids: Vec<usize> =
                    (0..n).filter(|&i| labels[i] == class).collect();
                rng.shuffle(&mut ids);
                for id in ids {
                    fold_of[id] = next_fold;
                    next_fold = (next_fold + 1) % plan.folds;
                }
            }
        } else {
            let mut ids: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut ids);
            for (pos, id) in ids.into_iter().enumerate() {
                fold_of[id] = pos % plan.folds;
            }
        }
        for fold in 0..plan.folds {
            let valid_ids: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
            let train_ids: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
            splits.push(Split { repeat, fold, train_ids, valid_ids });
        }
    }
    Ok(splits)
}

/// `mean(std)` rendering in percent: the mean is truncated at one decimal
/// (Table-style; 80.175 prints as 80.1) and the std is reported in
/// tenths-of-a-point units, rounded to the nearest integer.
pub fn format_report(mean: f64, std: f64) -> String {
    // kill float fuzz at the 1e-4-percent level, then truncate to tenths
    let tenths = ((mean * 1e6).round() as i64) / 1000;
    let std_tenths = (std * 1000.0).round() as i64;
    format!("{}.{}({})", tenths / 10, tenths % 10, std_tenths)
}

/// Sample standard deviation (n-1 denominator); 0 for a single value.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    var.sqrt()
}

/// Aggregated AUCs over all (repeat, fold) runs.
#[derive(Debug, Clone)]
pub struct MetricReport {
    /// One AUC per run (macro average for multiclass).
    pub values: Vec<f64>,
    /// Per-class AUC values per run (multiclass only).
    pub per_class: Vec<Vec<f64>>,
    pub mean: f64,
    pub std: f64,
}

impl MetricReport {
    pub fn from_values(values: Vec<f64>, per_class: Vec<Vec<f64>>) -> Self {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let std = sample_std(&values);
        MetricReport { values, per_class, mean, std }
    }

    pub fn formatted(&self) -> String {
        format_report(self.mean, self.std)
    }

    /// Formatted per-class summaries (multiclass).
    pub fn formatted_per_class(&self, num_classes: usize) -> Vec<String> {
        (0..num_classes)
            .map(|c| {
                let vals: Vec<f64> = self.per_class.iter().map(|row| row[c]).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                format_report(mean, sample_std(&vals))
            })
            .collect()
    }
}

/// One evaluated split.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub repeat: usize,
    pub fold: usize,
    pub auc: f64,
    pub per_class: Vec<f64>,
}

/// Train one head per split and evaluate on the held-out fold. Runs execute
/// in parallel; results aggregate in (repeat, fold) order.
pub fn run_experiment(
    kind: HeadKind,
    features: &[FeatureMatrix],
    labels: &[u32],
    plan: &CvPlan,
    cfg: &MilTrainConfig,
) -> Result<(MetricReport, Vec<RunRecord>)> {
    if features.len() != labels.len() {
        return Err(Error::shape(format!("{} matrices vs {} labels", features.len(), labels.len())));
    }
    let splits = repeated_kfold(labels, plan)?;
    let records: Vec<Result<RunRecord>> = splits
        .par_iter()
        .map(|split| {
            let bags: Vec<Bag> = split
                .train_ids
                .iter()
                .map(|&i| Bag { features: &features[i], label: labels[i] })
                .collect();
            let model_seed =
                derive_seed_indexed(plan.seed, "cv.model", (split.repeat * plan.folds + split.fold) as u64);
            let (model, _) = train_mil(kind, &bags, cfg, model_seed)?;
            let run_auc = evaluate_split(&model, features, labels, &split.valid_ids, cfg)?;
            Ok(RunRecord { repeat: split.repeat, fold: split.fold, auc: run_auc.0, per_class: run_auc.1 })
        })
        .collect();
    let mut records: Vec<RunRecord> = records.into_iter().collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| (r.repeat, r.fold));
    let values: Vec<f64> = records.iter().map(|r| r.auc).collect();
    let per_class: Vec<Vec<f64>> = records.iter().map(|r| r.per_class.clone()).collect();
    Ok((MetricReport::from_values(values, per_class), records))
}

fn evaluate_split(
    model: &MilModel,
    features: &[FeatureMatrix],
    labels: &[u32],
    valid_ids: &[usize],
    cfg: &MilTrainConfig,
) -> Result<(f64, Vec<f64>)> {
    if cfg.num_classes == 2 {
        let mut scores = Vec::with_capacity(valid_ids.len());
        let mut truth = Vec::with_capacity(valid_ids.len());
        for &i in valid_ids {
            scores.push(predict(model, &features[i])?.positive() as f64);
            truth.push(labels[i] == 1);
        }
        let a = auc(&scores, &truth)?;
        Ok((a, vec![]))
    } else {
        let mut scores = Vec::with_capacity(valid_ids.len());
        let mut ls = Vec::with_capacity(valid_ids.len());
        for &i in valid_ids {
            let p = predict(model, &features[i])?;
            scores.push(p.probs.iter().map(|&v| v as f64).collect::<Vec<f64>>());
            ls.push(labels[i]);
        }
        let (per_class, macro_avg) = one_vs_all(&scores, &ls, cfg.num_classes)?;
        Ok((macro_avg, per_class))
    }
}

/// Convenience: load every feature matrix of a corpus index and run the
/// experiment (supports indices extracted with any encoder fingerprint,
/// which is what the encoder-swap mode relies on).
pub fn run_experiment_on_corpus(
    kind: HeadKind,
    index: &CorpusIndex,
    base_dir: &Path,
    plan: &CvPlan,
    cfg: &MilTrainConfig,
) -> Result<(MetricReport, Vec<RunRecord>)> {
    let features = index.load_features(base_dir)?;
    let labels: Vec<u32> = index.entries.iter().map(|e| e.label).collect();
    run_experiment(kind, &features, &labels, plan, cfg)
}

/// Write per-run results as `repeat,fold,class,auc` CSV (class `macro` holds
/// the run-level value).
pub fn write_results_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "repeat,fold,class,auc")?;
    for r in records {
        writeln!(f, "{},{},macro,{:.6}", r.repeat, r.fold, r.auc)?;
        for (c, v) in r.per_class.iter().enumerate() {
            writeln!(f, "{},{},{c},{v:.6}", r.repeat, r.fold)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// O(n^2) pairwise oracle with half-ties.
    fn auc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_known_case() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [false, false, true, true];
        assert!((auc(&scores, &labels).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_perfect_and_all_ties() {
        let labels = [false, false, true, true];
        assert_eq!(auc(&[0.0, 0.1, 0.9, 1.0], &labels).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &labels).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_class_rejected() {
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_oracle_with_ties() {
        let mut rng = Rng::from_seed(3);
        for _ in 0..1000 {
            let n = 4 + rng.below(40);
            let scores: Vec<f64> = (0..n).map(|_| (rng.below(9) as f64) * 0.125).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
            labels[0] = true;
            labels[1] = false;
            let got = auc(&scores, &labels).unwrap();
            let want = auc_pairwise(&scores, &labels);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = Rng::from_seed(4);
        let scores: Vec<f64> = (0..50).map(|_| rng.normal_f64()).collect();
        let labels: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
        let base = auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|&s| (0.3 * s).tanh() * 5.0 + 7.0).collect();
        assert!((auc(&squashed, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn one_vs_all_macro_matches_mean() {
        // scores engineered so per-class AUCs differ; macro is their mean
        let mut rng = Rng::from_seed(5);
        let n = 120;
        let labels: Vec<u32> = (0..n).map(|i| (i % 4) as u32).collect();
        let scores: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| {
                (0..4)
                    .map(|c| {
                        let sep = if c as u32 == l { 0.8 + 0.2 * c as f64 } else { 0.0 };
                        sep + rng.normal_f64() * 0.8
                    })
                    .collect()
            })
            .collect();
        let (per_class, macro_avg) = one_vs_all(&scores, &labels, 4).unwrap();
        let mean = per_class.iter().sum::<f64>() / 4.0;
        assert!((macro_avg - mean).abs() < 1e-12);
    }

    #[test]
    fn one_vs_all_complement_symmetry() {
        let mut rng = Rng::from_seed(6);
        let n = 60;
        let labels: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
        // complementary columns: p(class0) = 1 - p(class1); each class scored
        // by its own column gives identical one-vs-all AUCs, and scoring the
        // other class with the same column gives the 1 - AUC complement
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let p = rng.uniform_f64();
                vec![p, 1.0 - p]
            })
            .collect();
        let (per_class, _) = one_vs_all(&scores, &labels, 2).unwrap();
        assert!((per_class[0] - per_class[1]).abs() < 1e-12);
        let col0: Vec<f64> = scores.iter().map(|r| r[0]).collect();
        let is0: Vec<bool> = labels.iter().map(|&l| l == 0).collect();
        let is1: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        let a0 = auc(&col0, &is0).unwrap();
        let a1_same_col = auc(&col0, &is1).unwrap();
        assert!((a0 - (1.0 - a1_same_col)).abs() < 1e-12);
    }

    #[test]
    fn one_vs_all_perfect_one_hot() {
        let labels: Vec<u32> = (0..20).map(|i| (i % 4) as u32).collect();
        let scores: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..4).map(|c| if c as u32 == l { 1.0 } else { 0.0 }).collect())
            .collect();
        let (per_class, macro_avg) = one_vs_all(&scores, &labels, 4).unwrap();
        assert!(per_class.iter().all(|&a| a == 1.0));
        assert_eq!(macro_avg, 1.0);
    }

    #[test]
    fn one_vs_all_missing_class_rejected() {
        let labels = vec![0u32, 0, 1, 1];
        let scores = vec![vec![0.1, 0.2, 0.7]; 4];
        assert!(one_vs_all(&scores, &labels, 3).is_err());
    }

    #[test]
    fn kfold_sizes_for_364_samples() {
        // 364 samples over 5 folds -> {73, 73, 73, 73, 72}
        let labels: Vec<u32> = (0..364).map(|i| (i % 4) as u32).collect();
        let plan = CvPlan { folds: 5, repeats: 1, seed: 9, stratified: true };
        let splits = repeated_kfold(&labels, &plan).unwrap();
        let mut sizes: Vec<usize> = splits.iter().map(|s| s.valid_ids.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![72, 73, 73, 73, 73]);
    }

    #[test]
    fn kfold_folds_partition_corpus() {
        let labels: Vec<u32> = (0..101).map(|i| (i % 2) as u32).collect();
        let plan = CvPlan { folds: 5, repeats: 3, seed: 2, stratified: true };
        let splits = repeated_kfold(&labels, &plan).unwrap();
        for repeat in 0..3 {
            let mut seen = vec![false; 101];
            for s in splits.iter().filter(|s| s.repeat == repeat) {
                for &i in &s.valid_ids {
                    assert!(!seen[i], "sample {i} in two validation folds");
                    seen[i] = true;
                }
                // train and valid are disjoint and complementary
                assert_eq!(s.train_ids.len() + s.valid_ids.len(), 101);
            }
            assert!(seen.iter().all(|&b| b));
        }
    }

    #[test]
    fn kfold_stratification_within_one_sample() {
        let labels: Vec<u32> = (0..97).map(|i| if i < 61 { 0 } else { 1 }).collect();
        let plan = CvPlan { folds: 5, repeats: 2, seed: 5, stratified: true };
        let splits = repeated_kfold(&labels, &plan).unwrap();
        for s in &splits {
            let pos = s.valid_ids.iter().filter(|&&i| labels[i] == 1).count();
            let neg = s.valid_ids.len() - pos;
            // 61 negatives over 5 folds: 12-13; 36 positives: 7-8
            assert!((12..=13).contains(&neg), "fold has {neg} negatives");
            assert!((7..=8).contains(&pos), "fold has {pos} positives");
        }
    }

    #[test]
    fn kfold_deterministic_and_repeat_sensitive() {
        let labels: Vec<u32> = (0..50).map(|i| (i % 2) as u32).collect();
        let plan = CvPlan { folds: 5, repeats: 2, seed: 77, stratified: true };
        let a = repeated_kfold(&labels, &plan).unwrap();
        let b = repeated_kfold(&labels, &plan).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.valid_ids, y.valid_ids);
        }
        // different repeats permute differently
        let r0: Vec<&Vec<usize>> =
            a.iter().filter(|s| s.repeat == 0).map(|s| &s.valid_ids).collect();
        let r1: Vec<&Vec<usize>> =
            a.iter().filter(|s| s.repeat == 1).map(|s| &s.valid_ids).collect();
        assert_ne!(r0, r1);
    }

    #[test]
    fn too_small_corpus_rejected() {
        let labels = vec![0u32, 0, 0, 1, 1];
        let plan = CvPlan { folds: 5, repeats: 1, seed: 1, stratified: true };
        assert!(repeated_kfold(&labels, &plan).is_err());
    }

    #[test]
    fn format_report_matches_table_strings() {
        assert_eq!(format_report(0.653, 0.137), "65.3(137)");
        assert_eq!(format_report(0.887, 0.047), "88.7(47)");
        assert_eq!(format_report(0.979, 0.014), "97.9(14)");
        assert_eq!(format_report(0.987, 0.002), "98.7(2)");
        assert_eq!(format_report(1.0, 0.0), "100.0(0)");
        // macro of 87.7, 81.9, 82.9, 68.2 is 80.175 and renders 80.1
        let macro_avg = (0.877 + 0.819 + 0.829 + 0.682) / 4.0;
        assert_eq!(format_report(macro_avg, 0.033), "80.1(33)");
    }

    #[test]
    fn zero_variance_renders_zero_std() {
        let report = MetricReport::from_values(vec![0.9, 0.9, 0.9], vec![]);
        assert_eq!(report.formatted(), "90.0(0)");
    }
}
