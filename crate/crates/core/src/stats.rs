//! Rank statistics used by the independence test and by distributional checks.

use statrs::distribution::{ContinuousCDF, Normal};

/// Kendall's tau-b with its two-sided p-value under independence (normal approximation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KendallTau {
    pub tau: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Kendall's tau-b in `O(n log n)` (Knight's merge-sort algorithm).
pub fn kendall_tau(x: &[f64], y: &[f64]) -> KendallTau {
    assert_eq!(x.len(), y.len(), "paired samples must have equal length");
    let n = x.len();
    if n < 2 {
        return KendallTau {
            tau: 0.0,
            z: 0.0,
            p_value: 1.0,
        };
    }
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let n0 = (n * (n - 1) / 2) as f64;
    let tied_x = tie_pairs(pairs.iter().map(|p| p.0));
    let tied_xy = tie_pairs_by(&pairs, |a, b| a == b);

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = ys.clone();
    let swaps = merge_count(&mut ys, &mut buf) as f64;
    let tied_y = tie_pairs(ys.iter().copied());

    let s = n0 - tied_x - tied_y + tied_xy - 2.0 * swaps;
    let denom = ((n0 - tied_x) * (n0 - tied_y)).sqrt();
    let tau = if denom > 0.0 { s / denom } else { 0.0 };
    let nf = n as f64;
    let var = 2.0 * (2.0 * nf + 5.0) / (9.0 * nf * (nf - 1.0));
    let z = tau / var.sqrt();
    let normal = Normal::standard();
    let p_value = (2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0);
    KendallTau { tau, z, p_value }
}

fn tie_pairs(sorted: impl Iterator<Item = f64>) -> f64 {
    let mut total = 0.0;
    let mut run = 0usize;
    let mut prev: Option<f64> = None;
    for v in sorted {
        if prev == Some(v) {
            run += 1;
        } else {
            total += (run * run.saturating_sub(1) / 2) as f64;
            run = 1;
        }
        prev = Some(v);
    }
    total + (run * run.saturating_sub(1) / 2) as f64
}

fn tie_pairs_by(sorted: &[(f64, f64)], eq: impl Fn(&(f64, f64), &(f64, f64)) -> bool) -> f64 {
    let mut total = 0.0;
    let mut start = 0;
    for i in 1..=sorted.len() {
        if i == sorted.len() || !eq(&sorted[i], &sorted[start]) {
            let run = i - start;
            total += (run * (run - 1) / 2) as f64;
            start = i;
        }
    }
    total
}

/// Sorts `v` and returns the number of inversions (strictly decreasing pairs).
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let (left, right) = v.split_at_mut(mid);
    let (bl, br) = buf.split_at_mut(mid);
    let mut count = merge_count(left, bl) + merge_count(right, br);
    let (mut i, mut j, mut k) = (0, 0, 0);
    while i < left.len() && j < right.len() {
        if right[j] < left[i] {
            buf[k] = right[j];
            count += (left.len() - i) as u64;
            j += 1;
        } else {
            buf[k] = left[i];
            i += 1;
        }
        k += 1;
    }
    while i < left.len() {
        buf[k] = left[i];
        i += 1;
        k += 1;
    }
    while j < right.len() {
        buf[k] = right[j];
        j += 1;
        k += 1;
    }
    v.copy_from_slice(&buf[..n]);
    count
}

/// Two-sample Kolmogorov–Smirnov statistic and its asymptotic p-value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsTest {
    assert!(!a.is_empty() && !b.is_empty(), "samples must be non-empty");
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut stat: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        stat = stat.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    let p_value = kolmogorov_survival((ne + 0.12 + 0.11 / ne) * stat);
    KsTest {
        statistic: stat,
        p_value,
    }
}

/// `P(K > λ)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
