#![allow(dead_code)]

use amilpath::stats::{
    binary_metrics, roc_auc, two_sided_p, AucCi, MetricsReport, PredictiveInterval,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// `(2 * concordant + ties) / (2 * m * n)` over all positive/negative pairs.
pub fn concordance_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut m, mut n) = (0u64, 0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            m += 1;
        } else {
            n += 1;
        }
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    num as f64 / (2 * m * n) as f64
}

pub fn random_case<R: Rng>(rng: &mut R, n: usize) -> (Vec<f64>, Vec<bool>) {
    loop {
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            // coarse grid so ties occur
            let scores = labels
                .iter()
                .map(|&l| ((rng.random::<f64>() + if l { 0.3 } else { 0.0 }) * 20.0).round() / 20.0)
                .collect();
            return (scores, labels);
        }
    }
}

/// Paired pair of score vectors with a shared latent component.
pub fn paired_case<R: Rng>(
    rng: &mut R,
    n_pos: usize,
    n_neg: usize,
) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let z = Normal::new(0.0, 1.0).unwrap();
    let (shift_a, shift_b) = (rng.random_range(0.3..1.3), rng.random_range(0.3..1.3));
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut y = Vec::new();
    for i in 0..n_pos + n_neg {
        let pos = i < n_pos;
        let common = z.sample(rng);
        a.push(common + z.sample(rng) + if pos { shift_a } else { 0.0 });
        b.push(0.6 * common + z.sample(rng) + if pos { shift_b } else { 0.0 });
        y.push(pos);
    }
    (a, b, y)
}

/// Stratified case bootstrap of the AUC difference; p from the bootstrap SE.
pub fn bootstrap_p(a: &[f64], b: &[f64], y: &[bool], reps: usize, seed: u64) -> f64 {
    let pos: Vec<usize> = (0..y.len()).filter(|&i| y[i]).collect();
    let neg: Vec<usize> = (0..y.len()).filter(|&i| !y[i]).collect();
    let d0 = roc_auc(a, y).unwrap() - roc_auc(b, y).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut diffs = Vec::with_capacity(reps);
    let (mut ra, mut rb, mut ry) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..reps {
        ra.clear();
        rb.clear();
        ry.clear();
        for group in [&pos, &neg] {
            for _ in 0..group.len() {
                let i = group[rng.random_range(0..group.len())];
                ra.push(a[i]);
                rb.push(b[i]);
                ry.push(y[i]);
            }
        }
        diffs.push(roc_auc(&ra, &ry).unwrap() - roc_auc(&rb, &ry).unwrap());
    }
    let mean = diffs.iter().sum::<f64>() / reps as f64;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    two_sided_p(d0 / sd)
}

/// Two-sided exact p by listing every split of the pooled sample.
pub fn enumerated_mw_p(x: &[f64], y: &[f64]) -> f64 {
    let all: Vec<f64> = x.iter().chain(y).copied().collect();
    let n = all.len();
    let nx = x.len();
    // doubled mid-ranks
    let r2: Vec<i64> = all
        .iter()
        .map(|&v| {
            let below = all.iter().filter(|&&w| w < v).count() as i64;
            let equal = all.iter().filter(|&&w| w == v).count() as i64;
            2 * below + equal + 1
        })
        .collect();
    let mu2 = nx as i64 * (n as i64 + 1);
    let obs = (r2[..nx].iter().sum::<i64>() - mu2).abs();
    let (mut extreme, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != nx {
            continue;
        }
        total += 1;
        let s: i64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| r2[i]).sum();
        if (s - mu2).abs() >= obs {
            extreme += 1;
        }
    }
    extreme as f64 / total as f64
}

/// Predictions and truth with the given 2x2 counts.
pub fn table(tp: usize, fn_: usize, tn: usize, fp: usize) -> (Vec<bool>, Vec<bool>) {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for (n, p, l) in [
        (tp, true, true),
        (fn_, false, true),
        (tn, false, false),
        (fp, true, false),
    ] {
        preds.extend(std::iter::repeat_n(p, n));
        labels.extend(std::iter::repeat_n(l, n));
    }
    (preds, labels)
}

pub fn report(
    cohort: &str,
    counts: (usize, usize, usize, usize),
    auc: (f64, f64, f64),
) -> MetricsReport {
    let (preds, labels) = table(counts.0, counts.1, counts.2, counts.3);
    MetricsReport {
        cohort: cohort.into(),
        n: labels.len(),
        n_pos: counts.0 + counts.1,
        threshold: 0.5,
        auc: AucCi {
            auc: auc.0,
            se: 0.0,
            lower: auc.1,
            upper: auc.2,
            degenerate: false,
        },
        rates: binary_metrics(&preds, &labels, 0.05, PredictiveInterval::Logit).unwrap(),
    }
}
