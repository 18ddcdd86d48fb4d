//! Semi-supervised k-means with labeled-instance constraints.
//!
//! Cluster `j < |Y_L|` belongs to the `j`-th seen class (sorted by name).
//! Labeled items are pinned to their class cluster at every step regardless
//! of distance; unlabeled items go to the nearest centroid, ties to the
//! lowest index. Centroids are means of all assigned items, labeled ones
//! included.
//!
//! Seeding protocol, with `rng = ChaCha8Rng::seed_from_u64(seed)` and
//! candidates the unlabeled rows in matrix order:
//!
//! 1. the first `|Y_L|` centroids are the labeled class means;
//! 2. if no centroid exists yet, the next one is candidate
//!    `rng.random_range(0..n)`;
//! 3. otherwise every candidate is weighted by its squared distance to the
//!    nearest centroid chosen so far (class means included). With total
//!    weight `W > 0`, `u = rng.random::<f64>() * W` selects the first
//!    candidate whose running weight sum exceeds `u`; with `W = 0` the pick
//!    falls back to step 2.
//!
//! A cluster that empties during assignment is reseeded with the unlabeled
//! item farthest from its centroid among clusters that can spare one.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedstore::{DatasetSplit, EmbeddingMatrix};
use crate::linalg;
use crate::{Error, Result};

pub const DEFAULT_MAX_ITERS: usize = 200;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SSKMeansConfig {
    /// `|Y_U|`, assumed known.
    pub k_total: usize,
    pub max_iters: usize,
    /// Stop once the largest centroid shift falls below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl SSKMeansConfig {
    pub fn new(k_total: usize, seed: u64) -> Self {
        Self {
            k_total,
            max_iters: DEFAULT_MAX_ITERS,
            tolerance: DEFAULT_TOLERANCE,
            seed,
        }
    }

    fn validate(&self, seen: usize) -> Result<()> {
        if self.k_total == 0 {
            return Err(Error::invalid("k_total must be at least 1"));
        }
        if self.k_total < seen {
            return Err(Error::invalid(format!(
                "k_total = {} is below the {seen} seen classes",
                self.k_total
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::invalid("tolerance must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringResult {
    /// Row ids of the clustered matrix.
    pub ids: Vec<String>,
    /// Cluster per row, aligned with `ids`.
    pub assignment: Vec<usize>,
    /// `k_total x dims`, row-major.
    pub centroids: Vec<f64>,
    pub dims: usize,
    /// Objective after each iteration's centroid update.
    pub objective_trace: Vec<f64>,
    pub iterations_run: usize,
}

impl ClusteringResult {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dims
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dims..(c + 1) * self.dims]
    }

    pub fn cluster_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id).map(|p| self.assignment[p])
    }

    pub fn centroid_matrix(&self) -> Result<EmbeddingMatrix> {
        let ids = (0..self.k()).map(|c| format!("c{c}")).collect();
        EmbeddingMatrix::new(
            ids,
            self.dims,
            self.centroids.iter().map(|&v| v as f32).collect(),
        )
    }
}

/// State handed to an observer after each iteration's update step.
#[derive(Debug)]
pub struct IterationState<'a> {
    pub iteration: usize,
    pub assignment: &'a [usize],
    pub centroids: &'a [f64],
    pub objective: f64,
}

/// Clustering problem resolved against a split: 64-bit rows plus the pinned
/// cluster of each labeled row.
struct Problem {
    points: Vec<f64>,
    dims: usize,
    pinned: Vec<Option<usize>>,
    unlabeled: Vec<usize>,
    seen: usize,
}

impl Problem {
    fn new(fused: &EmbeddingMatrix, split: &DatasetSplit) -> Result<Self> {
        for (id, _) in split.iter() {
            if fused.position(id).is_none() {
                return Err(Error::UnknownId(id.to_owned()));
            }
        }
        let mut pinned = Vec::with_capacity(fused.rows());
        let mut unlabeled = Vec::new();
        for (row, id) in fused.ids().iter().enumerate() {
            let entry = split
                .get(id)
                .ok_or_else(|| Error::invalid(format!("row {id:?} is not in the split")))?;
            if entry.labeled {
                pinned.push(split.seen_class_index(&entry.class));
            } else {
                pinned.push(None);
                unlabeled.push(row);
            }
        }
        Ok(Self {
            points: linalg::to_f64(fused.data()),
            dims: fused.dims(),
            pinned,
            unlabeled,
            seen: split.num_seen_classes(),
        })
    }

    fn n(&self) -> usize {
        self.pinned.len()
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dims..(i + 1) * self.dims]
    }
}

fn centroid(c: &[f64], dims: usize, j: usize) -> &[f64] {
    &c[j * dims..(j + 1) * dims]
}

fn seed_problem(p: &Problem, config: &SSKMeansConfig) -> Result<Vec<f64>> {
    config.validate(p.seen)?;
    let d = p.dims;
    let mut centroids = vec![0.0; config.k_total * d];
    let mut counts = vec![0usize; p.seen];
    for i in 0..p.n() {
        if let Some(c) = p.pinned[i] {
            counts[c] += 1;
            for (s, x) in centroids[c * d..(c + 1) * d].iter_mut().zip(p.point(i)) {
                *s += x;
            }
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("seen class {c} has no labeled items")));
    }
    for (c, &n) in counts.iter().enumerate() {
        centroids[c * d..(c + 1) * d]
            .iter_mut()
            .for_each(|v| *v /= n as f64);
    }

    let extra = config.k_total - p.seen;
    if extra == 0 {
        return Ok(centroids);
    }
    let cand = &p.unlabeled;
    if cand.is_empty() {
        return Err(Error::invalid(
            "unseen-class centroids requested but there are no unlabeled items",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut chosen = p.seen;
    let mut nearest = vec![f64::INFINITY; cand.len()];
    for j in 0..chosen {
        let c = centroid(&centroids, d, j);
        for (w, &i) in nearest.iter_mut().zip(cand) {
            *w = w.min(linalg::sq_dist(p.point(i), c));
        }
    }
    while chosen < config.k_total {
        let total: f64 = if chosen == 0 { 0.0 } else { nearest.iter().sum() };
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (k, &w) in nearest.iter().enumerate() {
                acc += w;
                if acc > u && w > 0.0 {
                    pick = Some(k);
                    break;
                }
            }
            pick.unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            rng.random_range(0..cand.len())
        };
        let x = p.point(cand[pick]).to_vec();
        centroids[chosen * d..(chosen + 1) * d].copy_from_slice(&x);
        for (w, &i) in nearest.iter_mut().zip(cand) {
            *w = w.min(linalg::sq_dist(p.point(i), &x));
        }
        chosen += 1;
    }
    Ok(centroids)
}

/// Initial centroids: labeled class means, then constrained k-means++.
pub fn seed_centroids(
    fused: &EmbeddingMatrix,
    split: &DatasetSplit,
    config: &SSKMeansConfig,
) -> Result<Vec<f64>> {
    seed_problem(&Problem::new(fused, split)?, config)
}

fn assign(p: &Problem, centroids: &[f64], k: usize, assignment: &mut [usize], dist: &mut [f64]) {
    let d = p.dims;
    for i in 0..p.n() {
        let x = p.point(i);
        match p.pinned[i] {
            Some(c) => {
                assignment[i] = c;
                dist[i] = linalg::sq_dist(x, centroid(centroids, d, c));
            }
            None => {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for j in 0..k {
                    let dj = linalg::sq_dist(x, centroid(centroids, d, j));
                    if dj < best_d {
                        best_d = dj;
                        best = j;
                    }
                }
                assignment[i] = best;
                dist[i] = best_d;
            }
        }
    }
}

fn repair_empty(
    p: &Problem,
    centroids: &mut [f64],
    k: usize,
    assignment: &mut [usize],
    dist: &mut [f64],
) {
    let d = p.dims;
    let mut sizes = vec![0usize; k];
    for &a in assignment.iter() {
        sizes[a] += 1;
    }
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let mut best: Option<usize> = None;
        for &i in &p.unlabeled {
            if sizes[assignment[i]] < 2 {
                continue;
            }
            if best.is_none_or(|b| dist[i] > dist[b]) {
                best = Some(i);
            }
        }
        let Some(i) = best else { continue };
        sizes[assignment[i]] -= 1;
        sizes[c] += 1;
        assignment[i] = c;
        dist[i] = 0.0;
        centroids[c * d..(c + 1) * d].copy_from_slice(p.point(i));
    }
}

fn update(p: &Problem, k: usize, assignment: &[usize], previous: &[f64]) -> Vec<f64> {
    let d = p.dims;
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (i, &c) in assignment.iter().enumerate() {
        counts[c] += 1;
        for (s, x) in sums[c * d..(c + 1) * d].iter_mut().zip(p.point(i)) {
            *s += x;
        }
    }
    for c in 0..k {
        let slot = &mut sums[c * d..(c + 1) * d];
        if counts[c] == 0 {
            slot.copy_from_slice(centroid(previous, d, c));
        } else {
            let n = counts[c] as f64;
            slot.iter_mut().for_each(|v| *v /= n);
        }
    }
    sums
}

fn objective_of(p: &Problem, centroids: &[f64], assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| linalg::sq_dist(p.point(i), centroid(centroids, p.dims, c)))
        .sum()
}

/// Runs semi-supervised k-means, calling `observer` after every iteration.
pub fn run_observed(
    fused: &EmbeddingMatrix,
    split: &DatasetSplit,
    config: &SSKMeansConfig,
    mut observer: impl FnMut(&IterationState<'_>),
) -> Result<ClusteringResult> {
    let p = Problem::new(fused, split)?;
    let k = config.k_total;
    let d = p.dims;
    let mut centroids = seed_problem(&p, config)?;
    let mut assignment = vec![0usize; p.n()];
    let mut dist = vec![0.0; p.n()];
    let mut trace = Vec::new();
    let mut iterations = 0;

    for it in 0..config.max_iters {
        assign(&p, &centroids, k, &mut assignment, &mut dist);
        repair_empty(&p, &mut centroids, k, &mut assignment, &mut dist);
        let next = update(&p, k, &assignment, &centroids);
        let shift = (0..k)
            .map(|c| linalg::sq_dist(centroid(&next, d, c), centroid(&centroids, d, c)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        let obj = objective_of(&p, &centroids, &assignment);
        if !obj.is_finite() {
            return Err(Error::invalid("clustering objective became non-finite"));
        }
        trace.push(obj);
        iterations = it + 1;
        observer(&IterationState {
            iteration: it,
            assignment: &assignment,
            centroids: &centroids,
            objective: obj,
        });
        if shift < config.tolerance {
            break;
        }
    }
    Ok(ClusteringResult {
        ids: fused.ids().to_vec(),
        assignment,
        centroids,
        dims: d,
        objective_trace: trace,
        iterations_run: iterations,
    })
}

pub fn run(
    fused: &EmbeddingMatrix,
    split: &DatasetSplit,
    config: &SSKMeansConfig,
) -> Result<ClusteringResult> {
    run_observed(fused, split, config, |_| {})
}

/// Sum of squared distances from each row to its assigned centroid.
pub fn objective(fused: &EmbeddingMatrix, result: &ClusteringResult) -> Result<f64> {
    if result.assignment.len() != fused.rows() {
        return Err(Error::Shape(format!(
            "{} assignments for {} rows",
            result.assignment.len(),
            fused.rows()
        )));
    }
    if result.dims != fused.dims() {
        return Err(Error::DimensionMismatch {
            expected: fused.dims(),
            got: result.dims,
        });
    }
    let k = result.k();
    let mut total = 0.0;
    for (i, &c) in result.assignment.iter().enumerate() {
        if c >= k {
            return Err(Error::invalid(format!(
                "row {i} assigned to cluster {c}, but only {k} centroids exist"
            )));
        }
        let x = linalg::to_f64(fused.row(i));
        total += linalg::sq_dist(&x, result.centroid(c));
    }
    Ok(total)
}

/// Writes CSV `id,cluster`.
pub fn write_assignments(result: &ClusteringResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "cluster"])?;
    for (id, c) in result.ids.iter().zip(&result.assignment) {
        w.write_record([id.clone(), c.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes CSV `iteration,objective`.
pub fn write_objective_trace(result: &ClusteringResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "objective"])?;
    for (i, v) in result.objective_trace.iter().enumerate() {
        w.write_record([(i + 1).to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(points: &[[f32; 2]]) -> EmbeddingMatrix {
        let ids = (0..points.len()).map(|i| format!("p{i}")).collect();
        let rows: Vec<Vec<f32>> = points.iter().map(|p| p.to_vec()).collect();
        EmbeddingMatrix::from_rows(ids, &rows).unwrap()
    }

    fn split(entries: &[(&str, bool)]) -> DatasetSplit {
        DatasetSplit::from_entries(
            entries
                .iter()
                .enumerate()
                .map(|(i, (c, l))| (format!("p{i}"), c.to_string(), *l)),
        )
        .unwrap()
    }

    #[test]
    fn one_iteration_hand_example() {
        let m = matrix(&[[0.0, 0.0], [10.0, 0.0], [1.0, 0.0], [9.0, 0.0]]);
        let s = split(&[("A", true), ("B", true), ("A", false), ("B", false)]);
        let r = run(&m, &s, &SSKMeansConfig::new(2, 0)).unwrap();
        assert_eq!(r.assignment, vec![0, 1, 0, 1]);
        assert_eq!(r.centroid(0), &[0.5, 0.0]);
        assert_eq!(r.centroid(1), &[9.5, 0.0]);
    }

    #[test]
    fn labeled_items_stay_in_their_cluster_even_when_far() {
        // p1 is labeled A but sits on top of the B cluster.
        let m = matrix(&[[0.0, 0.0], [10.0, 0.0], [10.0, 0.1], [9.9, 0.0]]);
        let s = split(&[("A", true), ("A", true), ("B", true), ("B", false)]);
        let r = run(&m, &s, &SSKMeansConfig::new(2, 0)).unwrap();
        assert_eq!(&r.assignment[..3], &[0, 0, 1]);
    }

    #[test]
    fn fully_labeled_converges_to_class_means() {
        let m = matrix(&[[0.0, 0.0], [2.0, 0.0], [5.0, 5.0], [7.0, 5.0]]);
        let s = split(&[("A", true), ("A", true), ("B", true), ("B", true)]);
        let seeds = seed_centroids(&m, &s, &SSKMeansConfig::new(2, 9)).unwrap();
        assert_eq!(seeds, vec![1.0, 0.0, 6.0, 5.0]);
        let r = run(&m, &s, &SSKMeansConfig::new(2, 9)).unwrap();
        assert_eq!(r.centroids, seeds);
        assert_eq!(r.iterations_run, 1);
    }

    #[test]
    fn far_unlabeled_duplicate_is_always_seeded() {
        let m = matrix(&[[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0], [50.0, 50.0], [50.0, 50.0]]);
        let s = split(&[
            ("A", true),
            ("A", false),
            ("B", true),
            ("B", false),
            ("C", false),
            ("C", false),
        ]);
        for seed in 0..20 {
            let c = seed_centroids(&m, &s, &SSKMeansConfig::new(3, seed)).unwrap();
            assert_eq!(&c[4..], &[50.0, 50.0]);
        }
    }

    #[test]
    fn k_below_seen_classes_is_rejected() {
        let m = matrix(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]);
        let s = split(&[("A", true), ("B", true), ("B", false)]);
        assert!(run(&m, &s, &SSKMeansConfig::new(1, 0)).is_err());
    }

    #[test]
    fn objective_examples() {
        let m = matrix(&[[0.0, 0.0], [2.0, 0.0]]);
        let at_centroids = ClusteringResult {
            ids: vec!["p0".into(), "p1".into()],
            assignment: vec![0, 1],
            centroids: vec![0.0, 0.0, 2.0, 0.0],
            dims: 2,
            objective_trace: vec![],
            iterations_run: 0,
        };
        assert_eq!(objective(&m, &at_centroids).unwrap(), 0.0);
        let single = ClusteringResult {
            assignment: vec![0, 0],
            centroids: vec![0.0, 0.0],
            ..at_centroids.clone()
        };
        assert_eq!(objective(&m, &single).unwrap(), 4.0);
        let dangling = ClusteringResult {
            assignment: vec![0, 3],
            ..at_centroids
        };
        assert!(objective(&m, &dangling).is_err());
    }

    #[test]
    fn empty_cluster_is_repaired() {
        // Three identical unlabeled points and k = 2: both k-means++ picks
        // coincide, so one cluster empties on the first assignment.
        let m = matrix(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [4.0, 4.0]]);
        let s = split(&[("X", false), ("X", false), ("X", false), ("Y", false)]);
        let r = run(&m, &s, &SSKMeansConfig::new(3, 1)).unwrap();
        let mut sizes = [0; 3];
        for &a in &r.assignment {
            sizes[a] += 1;
        }
        assert!(sizes.iter().all(|&n| n > 0), "sizes {sizes:?}");
    }
}
