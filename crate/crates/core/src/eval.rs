//! Detection metrics: PA%K point adjustment, best-F1 threshold search,
//! AUC-ROC and AUC-PR.

use serde::{Deserialize, Serialize};

use crate::error::{CometError, Result};

/// Maximal runs of label 1 as `[start, end)`.
pub fn segments(labels: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &l) in labels.iter().enumerate() {
        match (l != 0, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, labels.len()));
    }
    out
}

/// Marks a whole labeled segment detected when the fraction of detected
/// points in it is strictly greater than `k/100`.
pub fn point_adjust(preds: &[u8], labels: &[u8], k: f64) -> Result<Vec<u8>> {
    check_lengths(preds.len(), labels.len())?;
    let mut out: Vec<u8> = preds.iter().map(|&p| u8::from(p != 0)).collect();
    for (s, e) in segments(labels) {
        let hits = out[s..e].iter().filter(|&&p| p == 1).count();
        if hits as f64 / (e - s) as f64 > k / 100.0 {
            out[s..e].iter_mut().for_each(|p| *p = 1);
        }
    }
    Ok(out)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(CometError::Data(format!("{a} scores/predictions but {b} labels")));
    }
    Ok(())
}

/// Point-wise F1 of binary predictions against labels.
pub fn f1_score(preds: &[u8], labels: &[u8]) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in preds.iter().zip(labels) {
        match (p != 0, l != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestF1 {
    pub f1: f64,
    pub threshold: f64,
}

/// Best F1 over thresholds `θ` with predictions `score ≥ θ` followed by
/// PA%K adjustment. Thresholds are every unique score, or `grid` evenly
/// spaced values between the minimum and maximum score. Ties go to the
/// lowest threshold.
pub fn best_f1(scores: &[f64], labels: &[u8], k: f64, grid: Option<usize>) -> Result<BestF1> {
    check_lengths(scores.len(), labels.len())?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CometError::Numeric("non-finite score".into()));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    if positives == 0 {
        return Err(CometError::UndefinedMetric("best F1 needs at least one positive label".into()));
    }

    let segs = segments(labels);
    let mut seg_of = vec![usize::MAX; labels.len()];
    for (n, &(s, e)) in segs.iter().enumerate() {
        seg_of[s..e].iter_mut().for_each(|x| *x = n);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let thresholds: Vec<f64> = match grid {
        None => {
            let mut u: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
            u.dedup();
            u
        }
        Some(g) => {
            let hi = scores[order[0]];
            let lo = scores[*order.last().expect("non-empty")];
            let g = g.max(1);
            if g == 1 || hi == lo {
                vec![lo]
            } else {
                (0..g).map(|i| hi - (hi - lo) * i as f64 / (g - 1) as f64).collect()
            }
        }
    };

    let mut hits = vec![0usize; segs.len()];
    let mut adjusted = vec![false; segs.len()];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut next = 0;
    let mut best = BestF1 {
        f1: -1.0,
        threshold: thresholds[0],
    };
    for &theta in &thresholds {
        while next < order.len() && scores[order[next]] >= theta {
            let t = order[next];
            next += 1;
            let s = seg_of[t];
            if s == usize::MAX {
                fp += 1;
                continue;
            }
            hits[s] += 1;
            if adjusted[s] {
                continue;
            }
            let len = segs[s].1 - segs[s].0;
            if hits[s] as f64 / len as f64 > k / 100.0 {
                adjusted[s] = true;
                tp += len - (hits[s] - 1);
            } else {
                tp += 1;
            }
        }
        let f1 = f1_from_counts(tp, fp, positives - tp);
        if f1 >= best.f1 {
            best = BestF1 { f1, threshold: theta };
        }
    }
    Ok(best)
}

fn check_both_classes(labels: &[u8]) -> Result<(usize, usize)> {
    let p = labels.iter().filter(|&&l| l != 0).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(CometError::UndefinedMetric("AUC needs both classes in the labels".into()));
    }
    Ok((p, n))
}

/// Area under the ROC curve as the Mann–Whitney statistic with tied ranks
/// averaged.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let (p, n) = check_both_classes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        for &t in &order[i..=j] {
            if labels[t] != 0 {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    Ok((rank_sum - (p * (p + 1)) as f64 / 2.0) / (p as f64 * n as f64))
}

/// Average precision: `Σ (R_k − R_{k−1})·P_k` over descending distinct
/// score thresholds.
pub fn auc_pr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let (p, _) = check_both_classes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &t in &order[i..=j] {
            seen += 1;
            if labels[t] != 0 {
                tp += 1;
            }
        }
        let recall = tp as f64 / p as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub f1_k0: f64,
    pub threshold_k0: f64,
    pub f1_k100: f64,
    pub threshold_k100: f64,
    pub auc_roc: f64,
    pub auc_pr: f64,
}

pub fn evaluate(scores: &[f64], labels: &[u8], grid: Option<usize>) -> Result<MetricReport> {
    let k0 = best_f1(scores, labels, 0.0, grid)?;
    let k100 = best_f1(scores, labels, 100.0, grid)?;
    Ok(MetricReport {
        f1_k0: k0.f1,
        threshold_k0: k0.threshold,
        f1_k100: k100.f1,
        threshold_k100: k100.threshold,
        auc_roc: auc_roc(scores, labels)?,
        auc_pr: auc_pr(scores, labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::Rng;
    use proptest::prelude::*;

    const LABELS: [u8; 4] = [0, 1, 1, 0];
    const SCORES: [f64; 4] = [0.1, 0.9, 0.2, 0.1];

    #[test]
    fn adjust_examples() {
        assert_eq!(point_adjust(&[0, 1, 0, 0], &LABELS, 0.0).unwrap(), vec![0, 1, 1, 0]);
        assert_eq!(point_adjust(&[0, 1, 0, 0], &LABELS, 100.0).unwrap(), vec![0, 1, 0, 0]);
        assert_eq!(point_adjust(&[1, 0, 1], &[0, 0, 0], 0.0).unwrap(), vec![1, 0, 1]);
        // exactly half detected does not exceed 50%
        assert_eq!(point_adjust(&[0, 1, 0, 0], &LABELS, 50.0).unwrap(), vec![0, 1, 0, 0]);
    }

    #[test]
    fn best_f1_fixture() {
        let k0 = best_f1(&SCORES, &LABELS, 0.0, None).unwrap();
        assert_eq!(k0.f1, 1.0);
        assert_eq!(k0.threshold, 0.2);
        // the scores separate the classes, so the raw point-wise optimum is
        // also perfect; θ = 0.9 alone gives precision 1, recall 1/2
        let k100 = best_f1(&SCORES, &LABELS, 100.0, None).unwrap();
        assert_eq!(k100.f1, 1.0);
        let at_09 = point_adjust(&[0, 1, 0, 0], &LABELS, 100.0).unwrap();
        assert!((f1_score(&at_09, &LABELS).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn best_f1_requires_positives() {
        assert!(matches!(
            best_f1(&[0.1, 0.2], &[0, 0], 0.0, None),
            Err(CometError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_roc(&[0.1, 0.9, 0.8, 0.2], &LABELS).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.9, 0.1, 0.2, 0.8], &LABELS).unwrap(), 0.0);
        assert_eq!(auc_roc(&[0.5; 4], &LABELS).unwrap(), 0.5);
        assert_eq!(auc_pr(&[0.1, 0.9, 0.8, 0.2], &LABELS).unwrap(), 1.0);
        assert!(matches!(auc_roc(&[0.1, 0.2], &[1, 1]), Err(CometError::UndefinedMetric(_))));
        assert!(matches!(auc_roc(&[0.1], &[1, 0]), Err(CometError::Data(_))));
    }

    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            // coarse values so ties occur
            let scores: Vec<f64> = (0..50).map(|_| (rng.uniform() * 10.0).floor() / 10.0).collect();
            let mut labels: Vec<u8> = (0..50).map(|_| u8::from(rng.uniform() < 0.3)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let a = auc_roc(&scores, &labels).unwrap();
            assert!((a - pairwise_auc(&scores, &labels)).abs() <= 1e-12);
        }
    }

    fn brute_best(scores: &[f64], labels: &[u8], k: f64) -> f64 {
        let mut best: f64 = 0.0;
        for &theta in scores {
            let preds: Vec<u8> = scores.iter().map(|&s| u8::from(s >= theta)).collect();
            let adj = point_adjust(&preds, labels, k).unwrap();
            best = best.max(f1_score(&adj, labels).unwrap());
        }
        best
    }

    proptest! {
        #[test]
        fn sweep_matches_brute_force(
            raw in prop::collection::vec((0u8..6, prop::bool::weighted(0.4)), 2..40),
            k in prop::sample::select(vec![0.0, 20.0, 50.0, 100.0]),
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| f64::from(*s)).collect();
            let mut labels: Vec<u8> = raw.iter().map(|(_, l)| u8::from(*l)).collect();
            labels[0] = 1;
            let fast = best_f1(&scores, &labels, k, None).unwrap().f1;
            prop_assert!((fast - brute_best(&scores, &labels, k)).abs() < 1e-12);
        }

        #[test]
        fn adjust_idempotent_monotone_and_lenient(
            raw in prop::collection::vec((prop::bool::ANY, prop::bool::ANY), 1..40),
            extra in 0usize..40,
            k in 0.0f64..=100.0,
        ) {
            let preds: Vec<u8> = raw.iter().map(|(p, _)| u8::from(*p)).collect();
            let labels: Vec<u8> = raw.iter().map(|(_, l)| u8::from(*l)).collect();
            let once = point_adjust(&preds, &labels, k).unwrap();
            prop_assert_eq!(point_adjust(&once, &labels, k).unwrap(), once.clone());
            let mut more = preds.clone();
            more[extra % preds.len()] = 1;
            let bigger = point_adjust(&more, &labels, k).unwrap();
            prop_assert!(once.iter().zip(&bigger).all(|(a, b)| a <= b));
            if labels.contains(&1) {
                let f0 = f1_score(&point_adjust(&preds, &labels, 0.0).unwrap(), &labels).unwrap();
                let f100 = f1_score(&point_adjust(&preds, &labels, 100.0).unwrap(), &labels).unwrap();
                prop_assert!(f0 >= f100);
            }
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            raw in prop::collection::vec((-5.0f64..5.0, prop::bool::ANY), 2..40),
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s).collect();
            let mut labels: Vec<u8> = raw.iter().map(|(_, l)| u8::from(*l)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let mapped: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(auc_roc(&scores, &labels).unwrap(), auc_roc(&mapped, &labels).unwrap());
        }
    }
}
