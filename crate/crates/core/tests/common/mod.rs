//! Independent oracles and random generators shared by the integration tests.
//!
//! Nothing here calls into the code under test except to build inputs.

#![allow(dead_code)]

use std::collections::BTreeSet;

use diarkit::{Annotation, Segment};
use itertools::Itertools;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Minimum of `sum_i cost[i][p(i)]` over all permutations, by enumeration.
pub fn brute_force_assignment(cost: &Array2<f64>) -> (Vec<usize>, f64) {
    let n = cost.nrows();
    (0..n)
        .permutations(n)
        .map(|p| {
            let total: f64 = p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
            (p, total)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one permutation")
}

/// `sum_{i <= o} C(k, i)` via Pascal's triangle.
pub fn binomial_sum(k: usize, o: usize) -> usize {
    let mut row = vec![1usize];
    for _ in 0..k {
        let mut next = vec![1usize; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    row.iter().take(o + 1).sum()
}

/// All subsets of `0..k` with at most `o` members, ranked by cardinality then
/// lexicographically on their sorted members.
pub fn ranked_subsets(k: usize, o: usize) -> Vec<Vec<usize>> {
    let mut subsets: Vec<Vec<usize>> = (0u32..(1 << k))
        .filter(|mask| mask.count_ones() as usize <= o)
        .map(|mask| (0..k).filter(|&s| mask & (1 << s) != 0).collect())
        .collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    subsets
}

pub fn subset_rank(k: usize, o: usize, subset: &[usize]) -> usize {
    let mut sorted = subset.to_vec();
    sorted.sort_unstable();
    ranked_subsets(k, o)
        .iter()
        .position(|s| *s == sorted)
        .expect("subset within the maximum overlap")
}

/// Elementwise binary cross-entropy with a clamp, summed in a plain loop.
pub fn bce_oracle(target: &Array2<f64>, pred: &Array2<f64>) -> f64 {
    let eps = 1e-7;
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..target.nrows() {
        for j in 0..target.ncols() {
            let p = pred[[i, j]].clamp(eps, 1.0 - eps);
            let y = target[[i, j]];
            total += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            count += 1.0;
        }
    }
    total / count
}

/// Minimum BCE over all column permutations of `target`, by enumeration.
pub fn brute_force_pit(target: &Array2<f64>, pred: &Array2<f64>) -> f64 {
    let k = target.ncols();
    (0..k)
        .permutations(k)
        .map(|p| {
            // Column i of the target moves to column p[i].
            let mut permuted = Array2::zeros(target.raw_dim());
            for (i, &j) in p.iter().enumerate() {
                permuted.column_mut(j).assign(&target.column(i));
            }
            bce_oracle(&permuted, pred)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Central finite differences of `f` at `x`; `None` entries mark coordinates
/// the caller rejected (e.g. where `f` changes branch).
pub fn central_differences<F>(x: &Array2<f64>, h: f64, mut f: F) -> Array2<Option<f64>>
where
    F: FnMut(&Array2<f64>) -> Option<f64>,
{
    let mut out = Array2::from_elem(x.raw_dim(), None);
    let mut probe = x.clone();
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let v = x[[i, j]];
            probe[[i, j]] = v + h;
            let plus = f(&probe);
            probe[[i, j]] = v - h;
            let minus = f(&probe);
            probe[[i, j]] = v;
            out[[i, j]] = plus.zip(minus).map(|(p, m)| (p - m) / (2.0 * h));
        }
    }
    out
}

/// Largest relative error between an analytic gradient and the accepted
/// finite differences, with the number of accepted coordinates.
pub fn max_relative_error(analytic: &Array2<f64>, numeric: &Array2<Option<f64>>) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        if let Some(n) = n {
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-8));
            checked += 1;
        }
    }
    (worst, checked)
}

pub fn random_binary(rng: &mut impl Rng, t: usize, k: usize, p: f64) -> Array2<f64> {
    Array2::from_shape_fn((t, k), |_| if rng.random_bool(p) { 1.0 } else { 0.0 })
}

pub fn random_probabilities(rng: &mut impl Rng, t: usize, k: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, k), |_| rng.random_range(0.02..0.98))
}

/// Random annotation over `[0, duration)` whose boundaries are multiples of
/// `grid` seconds.
pub fn random_annotation(
    rng: &mut impl Rng,
    uri: &str,
    labels: &[&str],
    duration_steps: u32,
    grid: f64,
    max_segments: usize,
) -> Annotation {
    let mut a = Annotation::new(uri);
    for label in labels {
        for _ in 0..rng.random_range(0..=max_segments) {
            let s = rng.random_range(0..duration_steps);
            let e = rng.random_range(s + 1..=duration_steps);
            a.insert(Segment::new(s as f64 * grid, e as f64 * grid).unwrap(), *label);
        }
    }
    a
}

/// Random annotation with arbitrary (off-grid) boundaries.
pub fn random_annotation_continuous(rng: &mut impl Rng, uri: &str, labels: &[&str], duration: f64) -> Annotation {
    let mut a = Annotation::new(uri);
    for label in labels {
        for _ in 0..rng.random_range(0..4) {
            let s = rng.random_range(0.0..duration - 0.05);
            let e = rng.random_range(s + 0.01..=duration);
            a.insert(Segment::new(s, e).unwrap(), *label);
        }
    }
    a
}

pub fn random_unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// Textbook centroid-linkage agglomerative clustering: recomputes every
/// pairwise cosine distance at each step. Returns a partition of input
/// indices (each block sorted, blocks sorted).
pub fn naive_agglomerative(embeddings: &[Vec<f64>], threshold: f64) -> BTreeSet<Vec<usize>> {
    let unit = |v: &[f64]| -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    };
    let mut clusters: Vec<(Vec<usize>, Vec<f64>)> =
        embeddings.iter().enumerate().map(|(i, e)| (vec![i], unit(e))).collect();
    let units: Vec<Vec<f64>> = embeddings.iter().map(|e| unit(e)).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let d = 1.0 - clusters[a].1.iter().zip(&clusters[b].1).map(|(x, y)| x * y).sum::<f64>();
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, a, b));
                }
            }
        }
        match best {
            Some((d, a, b)) if d <= threshold => {
                let (members, _) = clusters.remove(b);
                clusters[a].0.extend(members);
                let dim = units[0].len();
                let mut mean = vec![0.0; dim];
                for &m in &clusters[a].0 {
                    for (acc, x) in mean.iter_mut().zip(&units[m]) {
                        *acc += x;
                    }
                }
                clusters[a].1 = unit(&mean);
            }
            _ => break,
        }
    }
    clusters
        .into_iter()
        .map(|(mut m, _)| {
            m.sort_unstable();
            m
        })
        .collect()
}

/// Partition induced by a label vector.
pub fn partition(labels: &[usize]) -> BTreeSet<Vec<usize>> {
    labels
        .iter()
        .enumerate()
        .into_group_map_by(|(_, &l)| l)
        .into_values()
        .map(|v| v.into_iter().map(|(i, _)| i).sorted().collect())
        .collect()
}

/// Seconds during which exactly `k` labels are active, by sweeping over all
/// segment boundaries.
pub fn duration_with_count(annotation: &Annotation, k: usize) -> f64 {
    let segs = annotation.segments();
    let mut cuts: Vec<f64> = segs.iter().flat_map(|(s, _)| [s.start(), s.end()]).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts.windows(2)
        .filter(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            segs.iter().filter(|(s, _)| s.start() <= mid && mid < s.end()).count() == k
        })
        .map(|w| w[1] - w[0])
        .sum()
}
