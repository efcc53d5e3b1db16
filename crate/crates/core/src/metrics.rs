//! Detection metrics: thresholded accuracy, ROC AUC and per-group reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{DafError, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(DafError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(DafError::EmptyInput);
    }
    Ok(())
}

/// Fraction of samples where `score >= threshold` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check(scores, labels)?;
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Mann–Whitney statistic: P(score_pos > score_neg), ties credited ½.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DafError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, with midranks for ties, stays integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, midrank = (i + j + 2) / 2
        let twice_mid = (i + j + 2) as u128;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += twice_mid * pos_in_tie;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    // U = R_pos − p(p+1)/2; AUC = U / (p·n)
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// ROC staircase from (0,0) to (1,1), one vertex per distinct score.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DafError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub acc: f64,
    /// Absent when the group holds a single class.
    pub auc: Option<f64>,
    pub count: usize,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: GroupMetrics,
    pub groups: BTreeMap<String, GroupMetrics>,
    pub threshold: f64,
}

fn group_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<GroupMetrics> {
    let positives = labels.iter().filter(|&&l| l == 1).count();
    Ok(GroupMetrics {
        acc: accuracy(scores, labels, threshold)?,
        auc: match auc(scores, labels) {
            Ok(a) => Some(a),
            Err(DafError::SingleClass) => None,
            Err(e) => return Err(e),
        },
        count: labels.len(),
        positives,
        negatives: labels.len() - positives,
    })
}

impl EvalReport {
    /// Overall and per-tag metrics; untagged rows fall under `""`.
    pub fn build(scores: &[f64], labels: &[u8], tags: &[String], threshold: f64) -> Result<Self> {
        check(scores, labels)?;
        if tags.len() != labels.len() {
            return Err(DafError::LengthMismatch(tags.len(), labels.len()));
        }
        let mut overall = group_metrics(scores, labels, threshold)?;
        if overall.auc.is_none() {
            return Err(DafError::SingleClass);
        }
        overall.count = labels.len();
        let mut by_tag: BTreeMap<&str, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
        for ((s, l), t) in scores.iter().zip(labels).zip(tags) {
            let e = by_tag.entry(t.as_str()).or_default();
            e.0.push(*s);
            e.1.push(*l);
        }
        let mut groups = BTreeMap::new();
        for (tag, (s, l)) in by_tag {
            groups.insert(tag.to_string(), group_metrics(&s, &l, threshold)?);
        }
        Ok(EvalReport {
            overall,
            groups,
            threshold,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let fmt_auc = |a: Option<f64>| a.map_or("-".to_string(), |v| format!("{:.4}", v));
        let _ = writeln!(
            out,
            "{:<20} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "group", "count", "real", "fake", "acc", "auc"
        );
        let _ = writeln!(out, "{:-<20} {:->8} {:->8} {:->8} {:->8} {:->8}", "", "", "", "", "", "");
        let mut row = |name: &str, g: &GroupMetrics| {
            let _ = writeln!(
                out,
                "{:<20} {:>8} {:>8} {:>8} {:>8.4} {:>8}",
                name,
                g.count,
                g.negatives,
                g.positives,
                g.acc,
                fmt_auc(g.auc)
            );
        };
        for (tag, g) in &self.groups {
            row(if tag.is_empty() { "(untagged)" } else { tag }, g);
        }
        row("overall", &self.overall);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if li != 1 {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj != 0 {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    credit += 1.0;
                } else if scores[i] == scores[j] {
                    credit += 0.5;
                }
            }
        }
        credit / pairs
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0.6, 0.4], &[1, 0], 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.5], &[1], 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.9, 0.9], &[1, 0], 0.5).unwrap(), 0.5);
        assert!(matches!(accuracy(&[], &[], 0.5), Err(DafError::EmptyInput)));
        assert!(matches!(
            accuracy(&[0.1], &[1, 0], 0.5),
            Err(DafError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(DafError::SingleClass)));
    }

    #[test]
    fn roc_examples() {
        let pts = roc_points(&[0.2, 0.9], &[0, 1]).unwrap();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        let pts = roc_points(&[0.1, 0.2, 0.7, 0.8], &[0, 0, 1, 1]).unwrap();
        assert!(pts.contains(&(0.0, 1.0)));
        assert_eq!(*pts.last().unwrap(), (1.0, 1.0));
    }

    #[test]
    fn roc_area_matches_auc_on_random_input() {
        let mut rng = seed::rng(50);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..50).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
            let mut labels: Vec<u8> = (0..50).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let pts = roc_points(&scores, &labels).unwrap();
            assert!(pts.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
            let a = auc(&scores, &labels).unwrap();
            assert!((trapezoid_area(&pts) - a).abs() < 1e-12);
        }
    }

    #[test]
    fn report_groups() {
        let scores = [0.9, 0.1, 0.8, 0.2, 0.4];
        let labels = [1, 0, 1, 0, 1];
        let tags: Vec<String> = ["a", "a", "b", "b", "b"].iter().map(|s| s.to_string()).collect();
        let r = EvalReport::build(&scores, &labels, &tags, 0.5).unwrap();
        assert_eq!(r.overall.acc, accuracy(&scores, &labels, 0.5).unwrap());
        assert_eq!(r.overall.auc, Some(auc(&scores, &labels).unwrap()));
        assert_eq!(r.groups.values().map(|g| g.count).sum::<usize>(), 5);
        assert_eq!(r.groups["a"].acc, 1.0);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["threshold"], 0.5);
        assert!(json["groups"]["b"]["auc"].is_number());
        assert!(r.to_table().contains("overall"));
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count(n in 2usize..200, seed_value in any::<u64>()) {
            let mut rng = seed::rng(seed_value);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64 / 10.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            prop_assert_eq!(auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
        }

        #[test]
        fn auc_invariant_under_monotone_transform(n in 2usize..100, seed_value in any::<u64>()) {
            let mut rng = seed::rng(seed_value);
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&warped, &labels).unwrap());
        }

        #[test]
        fn accuracy_permutation_invariant(n in 1usize..60, seed_value in any::<u64>()) {
            let mut rng = seed::rng(seed_value);
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.reverse();
            idx.rotate_left(n / 3);
            let s2: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l2: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            prop_assert_eq!(accuracy(&scores, &labels, 0.5).unwrap(), accuracy(&s2, &l2, 0.5).unwrap());
        }
    }
}
