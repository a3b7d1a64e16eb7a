//! Classification metrics with an explicit marker for undefined values.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Rows are true classes, columns predictions.
pub fn confusion(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    if y_true.len() != y_pred.len() {
        return Err(invalid(format!("{} labels vs {} predictions", y_true.len(), y_pred.len())));
    }
    if y_true.is_empty() {
        return Err(invalid("no labels to score"));
    }
    let mut cm = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= n_classes || p >= n_classes {
            return Err(invalid(format!("label {} outside {n_classes} classes", t.max(p))));
        }
        cm[t][p] += 1;
    }
    Ok(cm)
}

/// Mean recall over the classes present in the truth. Undefined when only
/// one class is present.
pub fn balanced_accuracy(cm: &[Vec<usize>]) -> Result<f64> {
    let recalls: Vec<f64> = cm
        .iter()
        .enumerate()
        .filter_map(|(i, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[i] as f64 / n as f64)
        })
        .collect();
    if recalls.len() < 2 {
        return Err(Error::UndefinedMetric("balanced accuracy needs two classes in the truth".into()));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

pub fn cohen_kappa(cm: &[Vec<usize>]) -> Result<f64> {
    let n: usize = cm.iter().flatten().sum();
    let nf = n as f64;
    let po = (0..cm.len()).map(|i| cm[i][i]).sum::<usize>() as f64 / nf;
    let pe: f64 = (0..cm.len())
        .map(|i| {
            let row: usize = cm[i].iter().sum();
            let col: usize = cm.iter().map(|r| r[i]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (nf * nf);
    if (1.0 - pe).abs() < 1e-15 {
        return Err(Error::UndefinedMetric("kappa is undefined when chance agreement is 1".into()));
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Support-weighted F1; a class never predicted has precision 0.
pub fn weighted_f1(cm: &[Vec<usize>]) -> f64 {
    let n: usize = cm.iter().flatten().sum();
    let mut f = 0.0;
    for i in 0..cm.len() {
        let support: usize = cm[i].iter().sum();
        if support == 0 {
            continue;
        }
        let predicted: usize = cm.iter().map(|r| r[i]).sum();
        let tp = cm[i][i] as f64;
        let f1 = if tp == 0.0 {
            0.0
        } else {
            let p = tp / predicted as f64;
            let r = tp / support as f64;
            2.0 * p * r / (p + r)
        };
        f += f1 * support as f64 / n as f64;
    }
    f
}

fn binary_check(y_true: &[usize], scores: &[f64]) -> Result<(usize, usize)> {
    if y_true.len() != scores.len() {
        return Err(invalid(format!("{} labels vs {} scores", y_true.len(), scores.len())));
    }
    if y_true.iter().any(|&y| y > 1) {
        return Err(invalid("ranking metrics need labels in {0, 1}"));
    }
    let pos = y_true.iter().filter(|&&y| y == 1).count();
    let neg = y_true.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ranking metrics need both classes".into()));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve (Mann-Whitney, ties count one half).
pub fn auroc(y_true: &[usize], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = binary_check(y_true, scores)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if y_true[k] == 1 {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: precision summed at each recall increment, with
/// tied scores entering together.
pub fn auc_pr(y_true: &[usize], scores: &[f64]) -> Result<f64> {
    let (pos, _) = binary_check(y_true, scores)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            if y_true[k] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// `None` marks a metric that is undefined for this input; the reason is
/// listed in `undefined`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub balanced_accuracy: Option<f64>,
    pub kappa: Option<f64>,
    pub weighted_f1: f64,
    pub auroc: Option<f64>,
    pub auc_pr: Option<f64>,
    pub undefined: Vec<String>,
}

fn keep(name: &str, r: Result<f64>, undefined: &mut Vec<String>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(why)) => {
            undefined.push(format!("{name}: {why}"));
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Scores every metric. `scores` holds per-class probabilities; ranking
/// metrics are reported for binary tasks only, from the class-1 column.
pub fn evaluate(y_true: &[usize], y_pred: &[usize], scores: Option<&[Vec<f64>]>, n_classes: usize) -> Result<MetricReport> {
    if n_classes < 2 {
        return Err(invalid("need at least two classes"));
    }
    let cm = confusion(y_true, y_pred, n_classes)?;
    let mut undefined = Vec::new();
    let balanced_accuracy = keep("balanced_accuracy", balanced_accuracy(&cm), &mut undefined)?;
    let kappa = keep("kappa", cohen_kappa(&cm), &mut undefined)?;
    let (mut roc, mut pr) = (None, None);
    if let (Some(s), 2) = (scores, n_classes) {
        if s.len() != y_true.len() || s.iter().any(|r| r.len() != 2) {
            return Err(invalid("scores must hold one probability pair per sample"));
        }
        let pos: Vec<f64> = s.iter().map(|r| r[1]).collect();
        roc = keep("auroc", auroc(y_true, &pos), &mut undefined)?;
        pr = keep("auc_pr", auc_pr(y_true, &pos), &mut undefined)?;
    }
    Ok(MetricReport {
        n: y_true.len(),
        balanced_accuracy,
        kappa,
        weighted_f1: weighted_f1(&cm),
        auroc: roc,
        auc_pr: pr,
        undefined,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    /// Runs in which the metric was defined.
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(MeanStd {
        mean,
        std: var.sqrt(),
        n: values.len(),
    })
}

/// Per-metric mean and standard deviation over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: usize,
    pub balanced_accuracy: Option<MeanStd>,
    pub kappa: Option<MeanStd>,
    pub weighted_f1: Option<MeanStd>,
    pub auroc: Option<MeanStd>,
    pub auc_pr: Option<MeanStd>,
}

pub fn summarize(reports: &[MetricReport]) -> SeedSummary {
    let col = |f: &dyn Fn(&MetricReport) -> Option<f64>| -> Option<MeanStd> {
        mean_std(&reports.iter().filter_map(f).collect::<Vec<_>>())
    };
    SeedSummary {
        seeds: reports.len(),
        balanced_accuracy: col(&|r| r.balanced_accuracy),
        kappa: col(&|r| r.kappa),
        weighted_f1: col(&|r| Some(r.weighted_f1)),
        auroc: col(&|r| r.auroc),
        auc_pr: col(&|r| r.auc_pr),
    }
}

/// `metric,mean,std,n`; undefined metrics are written as `undefined`.
pub fn summary_csv(s: &SeedSummary) -> String {
    let mut out = String::from("metric,mean,std,n\n");
    for (name, m) in [
        ("balanced_accuracy", s.balanced_accuracy),
        ("kappa", s.kappa),
        ("weighted_f1", s.weighted_f1),
        ("auroc", s.auroc),
        ("auc_pr", s.auc_pr),
    ] {
        let _ = match m {
            Some(m) => writeln!(out, "{name},{},{},{}", m.mean, m.std, m.n),
            None => writeln!(out, "{name},undefined,undefined,0"),
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 1, 0, 1];
        let s: Vec<Vec<f64>> = y.iter().map(|&c| if c == 1 { vec![0.1, 0.9] } else { vec![0.8, 0.2] }).collect();
        let r = evaluate(&y, &y, Some(&s), 2).unwrap();
        assert_eq!(r.balanced_accuracy, Some(1.0));
        assert_eq!(r.kappa, Some(1.0));
        assert_eq!(r.weighted_f1, 1.0);
        assert_eq!(r.auroc, Some(1.0));
        assert_eq!(r.auc_pr, Some(1.0));
        assert!(r.undefined.is_empty());
    }

    #[test]
    fn constant_predictor_is_chance() {
        let y = [0, 1, 0, 1, 0, 1];
        let r = evaluate(&y, &[0; 6], None, 2).unwrap();
        assert_eq!(r.balanced_accuracy, Some(0.5));
        assert_eq!(r.kappa, Some(0.0));
    }

    #[test]
    fn three_class_swap() {
        let mut t = Vec::new();
        let mut p = Vec::new();
        for (c, pred) in [(0, 0), (1, 2), (2, 1)] {
            t.extend([c; 5]);
            p.extend([pred; 5]);
        }
        let cm = confusion(&t, &p, 3).unwrap();
        assert_eq!(cm, vec![vec![5, 0, 0], vec![0, 0, 5], vec![0, 5, 0]]);
        assert!((balanced_accuracy(&cm).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_undefined_not_an_error() {
        let r = evaluate(&[1, 1, 1], &[1, 0, 1], Some(&[vec![0.2, 0.8], vec![0.6, 0.4], vec![0.1, 0.9]]), 2).unwrap();
        assert_eq!(r.balanced_accuracy, None);
        assert_eq!(r.auroc, None);
        assert!(r.undefined.iter().any(|u| u.starts_with("balanced_accuracy")));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"balanced_accuracy\":null"));
        assert!(evaluate(&[0, 3], &[0, 1], None, 2).is_err());
    }

    #[test]
    fn ranking_metrics_by_hand() {
        // Positives at scores 0.9, 0.4; negatives at 0.6, 0.1.
        let y = [1, 0, 1, 0];
        let s = [0.9, 0.6, 0.4, 0.1];
        assert!((auroc(&y, &s).unwrap() - 0.75).abs() < 1e-15);
        // Precision 1 at recall 0.5, then 2/3 at recall 1.
        assert!((auc_pr(&y, &s).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(auroc(&[1, 0], &[0.5, 0.5]).unwrap(), 0.5);
    }

    #[test]
    fn summary_and_csv() {
        let a = evaluate(&[0, 1], &[0, 1], None, 2).unwrap();
        let b = evaluate(&[0, 1], &[0, 0], None, 2).unwrap();
        let s = summarize(&[a, b]);
        let ba = s.balanced_accuracy.unwrap();
        assert_eq!((ba.mean, ba.std, ba.n), (0.75, 0.25, 2));
        let csv = summary_csv(&s);
        assert!(csv.contains("auroc,undefined"));
        assert!(csv.starts_with("metric,mean,std,n\nbalanced_accuracy,0.75,0.25,2"));
    }

    proptest! {
        #[test]
        fn balanced_accuracy_ignores_relabeling(pairs in prop::collection::vec((0usize..3, 0usize..3), 4..60), perm_idx in 0usize..6) {
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let perm = perms[perm_idx];
            let t: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let p: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let tt: Vec<usize> = t.iter().map(|&c| perm[c]).collect();
            let pp: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
            let a = balanced_accuracy(&confusion(&t, &p, 3).unwrap());
            let b = balanced_accuracy(&confusion(&tt, &pp, 3).unwrap());
            match (a, b) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false),
            }
        }
    }
}
