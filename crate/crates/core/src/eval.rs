//! Clustering accuracy under the best one-to-one cluster-to-class matching.
//!
//! The contingency table (clusters x classes, both sorted) is zero-padded to
//! square and solved as a min-cost assignment on `max - count`. Among equally
//! good matchings the lexicographically smallest one (by cluster order) is
//! returned: after the solve, every optimal matching uses only edges that are
//! tight under the optimal dual potentials, so the smallest one is found by
//! fixing rows greedily inside that tight subgraph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::embedstore::{csv_reader, expect_header, DatasetSplit, LabelMap};
use crate::{Error, Result};

/// Cluster id per item.
pub type Predictions = IndexMap<String, usize>;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub acc_all: f64,
    /// `None` when the subset is empty.
    pub acc_old: Option<f64>,
    pub acc_new: Option<f64>,
    /// Matched class per cluster; `None` for clusters left on a padding column.
    pub permutation: BTreeMap<usize, Option<String>>,
    pub clusters: Vec<usize>,
    pub classes: Vec<String>,
    /// `clusters.len() x classes.len()` counts.
    pub contingency: Vec<Vec<u64>>,
    pub n: usize,
}

impl EvalReport {
    /// `All/Old/New = 96.6/97.2/96.4`.
    pub fn summary_line(&self) -> String {
        format!(
            "All/Old/New = {}/{}/{}",
            pct(Some(self.acc_all)),
            pct(self.acc_old),
            pct(self.acc_new)
        )
    }

    /// CSV report: one accuracy row in percent, then the matching table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("acc_all,acc_old,acc_new\n");
        let _ = writeln!(
            out,
            "{},{},{}",
            pct(Some(self.acc_all)),
            pct(self.acc_old),
            pct(self.acc_new)
        );
        out.push_str("\ncluster,class\n");
        for (c, class) in &self.permutation {
            let _ = writeln!(out, "{c},{}", csv_field(class.as_deref().unwrap_or("")));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Percentage with one decimal; `-` for an empty subset.
pub fn pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.1}", v * 100.0),
        None => "-".into(),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Minimum-cost perfect matching on a square integer matrix.
///
/// Returns `(row -> column, row potentials, column potentials)` with
/// `u[i] + v[j] <= cost[i][j]` everywhere and equality on matched edges.
fn hungarian(cost: &[Vec<i64>]) -> (Vec<usize>, Vec<i64>, Vec<i64>) {
    let n = cost.len();
    let inf = i64::MAX / 4;
    // 1-based with a virtual column 0.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Searches an alternating path from `row` to `target` column through
/// unfixed rows and tight edges, flipping it when found.
fn reroute(
    row: usize,
    target: usize,
    tight: &[Vec<usize>],
    row_to_col: &mut [usize],
    col_to_row: &mut [usize],
    fixed: &[bool],
    seen: &mut [bool],
) -> bool {
    for &c in &tight[row] {
        if seen[c] {
            continue;
        }
        seen[c] = true;
        let owner = col_to_row[c];
        let free = c == target;
        if free || (!fixed[owner] && reroute(owner, target, tight, row_to_col, col_to_row, fixed, seen))
        {
            row_to_col[row] = c;
            col_to_row[c] = row;
            return true;
        }
    }
    false
}

/// Maximum-weight matching on square `counts`, lexicographically smallest
/// among optima. Returns `(row -> column, matched total)`.
pub(crate) fn max_matching(counts: &[Vec<u64>]) -> (Vec<usize>, u64) {
    let n = counts.len();
    if n == 0 {
        return (Vec::new(), 0);
    }
    let max = counts.iter().flatten().copied().max().unwrap_or(0) as i64;
    let cost: Vec<Vec<i64>> = counts
        .iter()
        .map(|r| r.iter().map(|&c| max - c as i64).collect())
        .collect();
    let (mut row_to_col, u, v) = hungarian(&cost);
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| cost[i][j] - u[i] - v[j] == 0).collect())
        .collect();
    let mut col_to_row = vec![0usize; n];
    for (r, &c) in row_to_col.iter().enumerate() {
        col_to_row[c] = r;
    }
    let mut fixed = vec![false; n];
    for i in 0..n {
        for &j in &tight[i] {
            if j == row_to_col[i] {
                break;
            }
            // Move i onto j; j's owner must reach i's old column.
            let old = row_to_col[i];
            let owner = col_to_row[j];
            if fixed[owner] {
                continue;
            }
            let mut r2c = row_to_col.clone();
            let mut c2r = col_to_row.clone();
            r2c[i] = j;
            c2r[j] = i;
            let mut fx = fixed.clone();
            fx[i] = true;
            let mut seen = vec![false; n];
            seen[j] = true;
            if reroute(owner, old, &tight, &mut r2c, &mut c2r, &fx, &mut seen) {
                row_to_col = r2c;
                col_to_row = c2r;
                break;
            }
        }
        fixed[i] = true;
    }
    let total = row_to_col
        .iter()
        .enumerate()
        .map(|(r, &c)| counts[r][c])
        .sum();
    (row_to_col, total)
}

struct Table {
    clusters: Vec<usize>,
    classes: Vec<String>,
    counts: Vec<Vec<u64>>,
    n: usize,
}

fn contingency<'a>(items: impl Iterator<Item = (usize, &'a str)>) -> Table {
    let pairs: Vec<(usize, &str)> = items.collect();
    let clusters: Vec<usize> = pairs
        .iter()
        .map(|p| p.0)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let classes: Vec<String> = pairs
        .iter()
        .map(|p| p.1)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(str::to_owned)
        .collect();
    let mut counts = vec![vec![0u64; classes.len()]; clusters.len()];
    for (c, y) in &pairs {
        let r = clusters.binary_search(c).unwrap();
        let k = classes.binary_search_by(|x| x.as_str().cmp(y)).unwrap();
        counts[r][k] += 1;
    }
    Table {
        clusters,
        classes,
        counts,
        n: pairs.len(),
    }
}

/// Optimal cluster -> class map for a table (`None` = padding column).
fn fit(table: &Table) -> BTreeMap<usize, Option<String>> {
    let n = table.clusters.len().max(table.classes.len());
    let mut square = vec![vec![0u64; n]; n];
    for (r, row) in table.counts.iter().enumerate() {
        square[r][..row.len()].copy_from_slice(row);
    }
    let (row_to_col, _) = max_matching(&square);
    table
        .clusters
        .iter()
        .enumerate()
        .map(|(r, &c)| (c, table.classes.get(row_to_col[r]).cloned()))
        .collect()
}

fn score<'a>(
    perm: &BTreeMap<usize, Option<String>>,
    items: impl Iterator<Item = (usize, &'a str)>,
) -> Option<f64> {
    let mut n = 0usize;
    let mut hit = 0usize;
    for (c, y) in items {
        n += 1;
        if perm.get(&c).and_then(|m| m.as_deref()) == Some(y) {
            hit += 1;
        }
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

fn paired<'a>(pred: &'a Predictions, truth: &'a LabelMap) -> Result<Vec<(&'a str, usize, &'a str)>> {
    if pred.is_empty() {
        return Err(Error::invalid("no predictions to evaluate"));
    }
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth items",
            pred.len(),
            truth.len()
        )));
    }
    pred.iter()
        .map(|(id, &c)| {
            truth
                .get(id)
                .map(|y| (id.as_str(), c, y))
                .ok_or_else(|| Error::UnknownId(id.clone()))
        })
        .collect()
}

/// Accuracy over all items in `pred` under the optimal matching.
pub fn hungarian_acc(pred: &Predictions, truth: &LabelMap) -> Result<EvalReport> {
    let items = paired(pred, truth)?;
    let table = contingency(items.iter().map(|&(_, c, y)| (c, y)));
    let perm = fit(&table);
    let acc_all = score(&perm, items.iter().map(|&(_, c, y)| (c, y))).unwrap();
    Ok(EvalReport {
        acc_all,
        acc_old: None,
        acc_new: None,
        permutation: perm,
        clusters: table.clusters,
        classes: table.classes,
        contingency: table.counts,
        n: table.n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SubsetProtocol {
    /// One matching fit on All, reused for Old and New.
    #[default]
    SharedFit,
    /// Separate matchings per subset.
    PerSubset,
}

/// All/Old/New accuracy over the unlabeled items of `split`.
///
/// `pred` and `truth` may cover more items than `D_U`; only unlabeled ids
/// are scored, and each must be present in both.
pub fn subset_report(
    pred: &Predictions,
    truth: &LabelMap,
    split: &DatasetSplit,
    protocol: SubsetProtocol,
) -> Result<EvalReport> {
    let mut upred = Predictions::new();
    let mut utruth = Vec::new();
    for (id, entry) in split.iter().filter(|(_, e)| !e.labeled) {
        let c = *pred.get(id).ok_or_else(|| Error::UnknownId(id.to_owned()))?;
        let y = truth.get(id).ok_or_else(|| Error::UnknownId(id.to_owned()))?;
        if y != entry.class {
            return Err(Error::invalid(format!(
                "split says {id:?} is {:?} but ground truth says {y:?}",
                entry.class
            )));
        }
        upred.insert(id.to_owned(), c);
        utruth.push((id.to_owned(), y.to_owned()));
    }
    let utruth = LabelMap::from_pairs(utruth)?;
    let mut report = hungarian_acc(&upred, &utruth)?;
    let items = paired(&upred, &utruth)?;
    let old = items.iter().filter(|&&(_, _, y)| split.is_seen(y));
    let new = items.iter().filter(|&&(_, _, y)| !split.is_seen(y));
    match protocol {
        SubsetProtocol::SharedFit => {
            report.acc_old = score(&report.permutation, old.map(|&(_, c, y)| (c, y)));
            report.acc_new = score(&report.permutation, new.map(|&(_, c, y)| (c, y)));
        }
        SubsetProtocol::PerSubset => {
            let per = |sub: Vec<(usize, &str)>| {
                if sub.is_empty() {
                    return None;
                }
                let perm = fit(&contingency(sub.iter().copied()));
                score(&perm, sub.into_iter())
            };
            report.acc_old = per(old.map(|&(_, c, y)| (c, y)).collect());
            report.acc_new = per(new.map(|&(_, c, y)| (c, y)).collect());
        }
    }
    Ok(report)
}

/// Reads CSV `id,cluster`.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<Predictions> {
    let path = path.as_ref();
    let mut reader = csv_reader(path)?;
    expect_header(&mut reader, &["id", "cluster"], "prediction file")?;
    let mut out = Predictions::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Format {
                what: "prediction file",
                detail: format!("expected 2 fields, found {}", rec.len()),
            });
        }
        let c: usize = rec[1].trim().parse().map_err(|_| Error::Format {
            what: "prediction file",
            detail: format!("bad cluster index {:?}", &rec[1]),
        })?;
        if out.insert(rec[0].to_owned(), c).is_some() {
            return Err(Error::DuplicateId(rec[0].to_owned()));
        }
    }
    Ok(out)
}
