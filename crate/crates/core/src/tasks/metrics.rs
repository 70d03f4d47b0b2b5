use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Mean relative syllable-count error. Utterances with an actual count of
/// zero are skipped with a warning.
pub fn ser(actual: &[usize], predicted: &[usize]) -> Result<f64> {
    if actual.len() != predicted.len() {
        return Err(Error::Metric(format!("{} actual vs {} predicted counts", actual.len(), predicted.len())));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, p) in actual.iter().zip(predicted) {
        if *a == 0 {
            log::warn!("skipping utterance with zero syllables in SER");
            continue;
        }
        sum += (*a as f64 - *p as f64).abs() / *a as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Metric("no utterance with a positive syllable count".into()));
    }
    Ok(sum / n as f64)
}

/// Product-moment correlation coefficient.
pub fn pearson_corr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Metric("correlation needs two equal-length series of at least 2 values".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Metric("correlation undefined for a constant series".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// F1 on the positive class. Zero when neither side has a positive.
pub fn f1_binary(preds: &[u8], golds: &[u8]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Metric("prediction and gold lengths differ".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in preds.iter().zip(golds) {
        match (*p != 0, *g != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        log::warn!("F1 with no positive gold or prediction is defined as 0");
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// `(WA, UA)`: overall accuracy and mean recall over classes present in gold.
pub fn weighted_unweighted_accuracy(preds: &[usize], golds: &[usize], num_classes: usize) -> Result<(f64, f64)> {
    if preds.is_empty() || preds.len() != golds.len() {
        return Err(Error::Metric("accuracy needs equal-length, non-empty inputs".into()));
    }
    if let Some(l) = preds.iter().chain(golds).find(|l| **l >= num_classes) {
        return Err(Error::Metric(format!("label {l} outside {num_classes} classes")));
    }
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (p, g) in preds.iter().zip(golds) {
        totals[*g] += 1;
        if p == g {
            hits[*g] += 1;
        }
    }
    let wa = hits.iter().sum::<usize>() as f64 / preds.len() as f64;
    let recalls: Vec<f64> = (0..num_classes).filter(|c| totals[*c] > 0).map(|c| hits[c] as f64 / totals[c] as f64).collect();
    let ua = recalls.iter().sum::<f64>() / recalls.len() as f64;
    Ok((wa, ua))
}

/// Fold index per item: a seeded shuffle dealt round-robin, so fold sizes
/// differ by at most one.
pub fn kfold_split(num_items: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || num_items < k {
        return Err(Error::Config(format!("cannot split {num_items} items into {k} folds")));
    }
    let mut order: Vec<usize> = (0..num_items).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; num_items];
    for (pos, item) in order.into_iter().enumerate() {
        folds[item] = pos % k;
    }
    Ok(folds)
}

/// Number of runs above `threshold`, where runs closer than `min_gap`
/// frames are merged.
pub fn count_syllables_from_frames(probs: &[f64], threshold: f64, min_gap: usize) -> usize {
    let mut count = 0;
    let mut last_end: Option<usize> = None;
    let mut in_run = false;
    for (t, p) in probs.iter().enumerate() {
        let on = *p > threshold;
        if on && !in_run {
            if last_end.is_none_or(|e| t - e >= min_gap) {
                count += 1;
            }
            in_run = true;
        } else if !on && in_run {
            last_end = Some(t);
            in_run = false;
        }
    }
    count
}

pub const DEFAULT_PEAK_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MIN_GAP: usize = 3;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ser_fixtures() {
        assert_eq!(ser(&[5, 7], &[5, 7]).unwrap(), 0.0);
        assert!((ser(&[10], &[8]).unwrap() - 0.2).abs() < 1e-12);
        assert!((ser(&[10, 20], &[8, 25]).unwrap() - 0.225).abs() < 1e-12);
        assert!((ser(&[0, 10], &[3, 8]).unwrap() - 0.2).abs() < 1e-12);
        assert!(ser(&[0], &[1]).is_err());
    }

    #[test]
    fn pearson_fixtures() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson_corr(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson_corr(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        // a = [1,2,3], b = [1,3,2]: cov 0.5, var 1 each -> 0.5
        assert!((pearson_corr(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(pearson_corr(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn f1_fixtures() {
        assert_eq!(f1_binary(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(f1_binary(&[0, 0, 0], &[1, 0, 1]).unwrap(), 0.0);
        // TP=2 FP=1 FN=1
        let f = f1_binary(&[1, 1, 1, 0, 0], &[1, 1, 0, 1, 0]).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1_binary(&[0, 0], &[0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_fixtures() {
        assert_eq!(weighted_unweighted_accuracy(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), (1.0, 1.0));
        let golds: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
        let preds = vec![0; 100];
        let (wa, ua) = weighted_unweighted_accuracy(&preds, &golds, 2).unwrap();
        assert!((wa - 0.9).abs() < 1e-12 && (ua - 0.5).abs() < 1e-12);
        let (_, ua) = weighted_unweighted_accuracy(&[1, 0, 1, 1], &[1, 1, 1, 1], 2).unwrap();
        assert!((ua - 0.75).abs() < 1e-12);
        assert!(weighted_unweighted_accuracy(&[], &[], 2).is_err());
    }

    #[test]
    fn folds_partition() {
        let f = kfold_split(10, 5, 3).unwrap();
        for k in 0..5 {
            assert_eq!(f.iter().filter(|x| **x == k).count(), 2);
        }
        assert_eq!(f, kfold_split(10, 5, 3).unwrap());
        assert!(kfold_split(4, 5, 0).is_err());
    }

    #[test]
    fn syllable_counting() {
        assert_eq!(count_syllables_from_frames(&[0.0; 20], 0.5, 3), 0);
        let mut p = vec![0.0; 30];
        p[3..6].iter_mut().for_each(|v| *v = 0.9);
        p[20..24].iter_mut().for_each(|v| *v = 0.8);
        assert_eq!(count_syllables_from_frames(&p, 0.5, 3), 2);
        // a one-frame dip does not split a run
        p[4] = 0.1;
        assert_eq!(count_syllables_from_frames(&p, 0.5, 3), 2);
    }

    proptest! {
        #[test]
        fn fold_sizes_within_one(n in 5usize..200, k in 2usize..6, seed in 0u64..50) {
            let f = kfold_split(n, k, seed).unwrap();
            let sizes: Vec<usize> = (0..k).map(|c| f.iter().filter(|x| **x == c).count()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        }

        #[test]
        fn metric_ranges(p in proptest::collection::vec(0u8..2, 1..50), seed in 0u64..100) {
            let g: Vec<u8> = p.iter().enumerate().map(|(i, v)| if (i as u64 + seed) % 3 == 0 { 1 - v } else { *v }).collect();
            let f = f1_binary(&p, &g).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            let pu: Vec<usize> = p.iter().map(|v| *v as usize).collect();
            let gu: Vec<usize> = g.iter().map(|v| *v as usize).collect();
            let (wa, ua) = weighted_unweighted_accuracy(&pu, &gu, 2).unwrap();
            prop_assert!((0.0..=1.0).contains(&wa) && (0.0..=1.0).contains(&ua));
        }
    }
}
