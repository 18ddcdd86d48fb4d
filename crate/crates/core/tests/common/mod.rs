//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use clipgcd::augment::{AugmentOptions, FuseOptions};
use clipgcd::embedstore::{DatasetSplit, EmbeddingMatrix, LabelMap};
use clipgcd::harness::{run_on_inputs, Corpus, PipelineInputs, PipelineParams};
use clipgcd::synth::{self, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_rows(rows: usize, dims: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    (0..rows)
        .map(|_| {
            (0..dims)
                .map(|_| Distribution::<f64>::sample(&StandardNormal, rng) as f32)
                .collect()
        })
        .collect()
}

pub fn matrix(rows: &[Vec<f32>], prefix: &str) -> EmbeddingMatrix {
    let ids = (0..rows.len()).map(|i| format!("{prefix}{i}")).collect();
    EmbeddingMatrix::from_rows(ids, rows).unwrap()
}

pub fn gaussian_f64(rows: usize, dims: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..dims).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

pub fn unit_f64(rows: usize, dims: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    gaussian_f64(rows, dims, rng)
        .into_iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

// ---------------------------------------------------------------- retrieval

/// Exhaustive cosine scan: every row scored serially, full sort.
pub fn brute_topk(corpus: &[Vec<f32>], query: &[f32], k: usize) -> Vec<(usize, f64)> {
    let qn = query.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    let mut scored: Vec<(usize, f64)> = corpus
        .iter()
        .enumerate()
        .map(|(j, row)| {
            let rn = row.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            let dot: f64 = row
                .iter()
                .zip(query)
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            (j, dot / (rn * qn))
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

// ---------------------------------------------------------------- losses

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Contrastive loss typed straight from the definition, no max shift.
pub fn naive_unsup(anchors: &[Vec<f64>], views: &[Vec<f64>], tau: f64) -> f64 {
    let n = anchors.len();
    let mut total = 0.0;
    for i in 0..n {
        let num = (dot(&anchors[i], &views[i]) / tau).exp();
        let mut den = 0.0;
        for m in 0..n {
            if m != i {
                den += (dot(&anchors[i], &views[m]) / tau).exp();
            }
        }
        total += -(num / den).ln();
    }
    total / n as f64
}

pub fn naive_sup(anchors: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let n = anchors.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut den = 0.0;
        for m in 0..n {
            if m != i {
                den += (dot(&anchors[i], &anchors[m]) / tau).exp();
            }
        }
        let pos: Vec<usize> = (0..n).filter(|&q| q != i && labels[q] == labels[i]).collect();
        let mut term = 0.0;
        for &q in &pos {
            term += ((dot(&anchors[i], &anchors[q]) / tau).exp() / den).ln();
        }
        total += -term / pos.len() as f64;
    }
    total / n as f64
}

/// Labels over `n` items where every label occurs at least twice.
pub fn paired_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(n >= 2 * classes);
    let mut labels: Vec<usize> = (0..classes).flat_map(|c| [c, c]).collect();
    while labels.len() < n {
        labels.push(rng.random_range(0..classes));
    }
    use rand::seq::SliceRandom;
    labels.shuffle(rng);
    labels
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest entrywise `|a - b| / max(|a|, |b|, 1e-3)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

pub fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

pub fn unflatten(flat: &[f64], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks(cols).map(<[f64]>::to_vec).collect()
}

// ---------------------------------------------------------------- accuracy

/// Best matched count over every assignment of clusters to padded classes,
/// visiting permutations in lexicographic order so the first optimum is the
/// smallest. Returns `(count, class column per cluster)`.
pub fn brute_acc(pred: &[usize], truth: &[usize]) -> (usize, Vec<usize>) {
    let k = pred.iter().max().map_or(0, |m| m + 1);
    let c = truth.iter().max().map_or(0, |m| m + 1);
    let n = k.max(c);
    let mut counts = vec![vec![0usize; n]; n];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p][t] += 1;
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (0, perm.clone());
    let mut first = true;
    loop {
        let score: usize = (0..n).map(|r| counts[r][perm[r]]).sum();
        if first || score > best.0 {
            best = (score, perm.clone());
            first = false;
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    best.1.truncate(k);
    best
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

// ---------------------------------------------------------------- k-means

/// Squared distance in the library's documented reduction order: eight
/// interleaved partial sums folded pairwise, then the serial tail.
pub fn lane_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let full = a.len() / 8 * 8;
    let mut lanes = [0.0f64; 8];
    let mut i = 0;
    while i < full {
        for l in 0..8 {
            let d = a[i + l] - b[i + l];
            lanes[l] += d * d;
        }
        i += 8;
    }
    let mut tail = 0.0;
    for j in full..a.len() {
        let d = a[j] - b[j];
        tail += d * d;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

pub struct KMeansTrajectory {
    pub assignments: Vec<Vec<usize>>,
    pub centroids: Vec<Vec<Vec<f64>>>,
    pub objectives: Vec<f64>,
}

/// Textbook k-means++ followed by Lloyd iterations, with the library's RNG
/// protocol, tie rules, empty-cluster repair and stopping rule.
pub fn plain_kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize, tol: f64) -> KMeansTrajectory {
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cents: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    while cents.len() < k {
        let w: Vec<f64> = points
            .iter()
            .map(|p| cents.iter().map(|c| lane_sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = w.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut run = 0.0;
            let mut pick = None;
            for (i, &wi) in w.iter().enumerate() {
                run += wi;
                if run > u && wi > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| w.iter().rposition(|&x| x > 0.0).unwrap())
        } else {
            rng.random_range(0..n)
        };
        cents.push(points[pick].clone());
    }

    let mut out = KMeansTrajectory {
        assignments: vec![],
        centroids: vec![],
        objectives: vec![],
    };
    for _ in 0..max_iters {
        let mut assign = vec![0usize; n];
        let mut dist = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (j, c) in cents.iter().enumerate() {
                let d = lane_sq_dist(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            assign[i] = best.0;
            dist[i] = best.1;
        }
        let mut sizes = vec![0usize; k];
        for &a in &assign {
            sizes[a] += 1;
        }
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let donor = (0..n)
                .filter(|&i| sizes[assign[i]] >= 2)
                .fold(None, |b: Option<usize>, i| match b {
                    Some(b) if dist[b] >= dist[i] => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = donor {
                sizes[assign[i]] -= 1;
                sizes[c] += 1;
                assign[i] = c;
                dist[i] = 0.0;
                cents[c] = points[i].clone();
            }
        }
        let dims = points[0].len();
        let mut next = vec![vec![0.0; dims]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, x) in next[assign[i]].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                next[c] = cents[c].clone();
            } else {
                next[c].iter_mut().for_each(|v| *v /= counts[c] as f64);
            }
        }
        let shift = (0..k)
            .map(|c| lane_sq_dist(&next[c], &cents[c]).sqrt())
            .fold(0.0, f64::max);
        cents = next;
        let obj: f64 = (0..n).map(|i| lane_sq_dist(&points[i], &cents[assign[i]])).sum();
        out.assignments.push(assign);
        out.centroids.push(cents.clone());
        out.objectives.push(obj);
        if shift < tol {
            break;
        }
    }
    out
}

/// Split with every item unlabeled and no seen classes.
pub fn unlabeled_split(ids: &[String]) -> DatasetSplit {
    DatasetSplit::from_entries(ids.iter().map(|id| (id.as_str(), "u", false))).unwrap()
}

// ---------------------------------------------------------------- pipeline

pub fn synth_inputs(cfg: &SynthConfig) -> (PipelineInputs, synth::SynthData) {
    let data = synth::generate(cfg).unwrap();
    let inputs = PipelineInputs {
        images: data.images.clone(),
        labels: data.labels.clone(),
        corpus: Some(Corpus {
            texts: data.corpus_texts.clone(),
            embeddings: data.corpus.clone(),
        }),
    };
    (inputs, data)
}

/// `(fused acc_all, image-only acc_all)` on one synthetic dataset.
pub fn fused_vs_image(inputs: &PipelineInputs, params: &PipelineParams) -> (f64, f64) {
    let fused = run_on_inputs(inputs, params, None).unwrap().report.acc_all;
    let mut image_only = params.clone();
    image_only.use_text = false;
    let base = run_on_inputs(inputs, &image_only, None).unwrap().report.acc_all;
    (fused, base)
}

pub fn fuse_defaults() -> AugmentOptions<'static> {
    AugmentOptions {
        k: 4,
        fuse: FuseOptions::default(),
        head: None,
        query_with_head: false,
    }
}

pub fn label_map(pairs: &[(String, String)]) -> LabelMap {
    LabelMap::from_pairs(pairs.iter().cloned()).unwrap()
}
