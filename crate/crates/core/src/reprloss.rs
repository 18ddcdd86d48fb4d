//! Contrastive objectives and a linear projection head trained on them.
//!
//! For a batch of anchors `z_i` and paired views `z'_i` (unit rows) with
//! temperature `tau`:
//!
//! ```text
//! unsup_i = -log( exp(z_i.z'_i / tau) / sum_{n != i} exp(z_i.z'_n / tau) )
//! sup_i   = -1/|N(i)| sum_{q in N(i)} log( exp(z_i.z_q / tau) / sum_{n != i} exp(z_i.z_n / tau) )
//! total   = (1 - lambda) * sum_{i in B_L u B_U} unsup_i + lambda * sum_{i in B_L} sup_i
//! ```
//!
//! `N(i)` holds the other anchors sharing `i`'s label. The unsupervised
//! denominator runs over the other-view batch, the supervised one over the
//! anchor batch. [`unsup_loss`] and [`sup_loss`] report batch means;
//! [`total_loss`] combines per-item sums.
//!
//! All gradients are analytic and taken with respect to the rows of `z` and
//! `z'` as free variables. [`ProjectionHead::backward`] pulls them back
//! through the output normalization and the affine map.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedstore::{load_matrix, DatasetSplit, EmbeddingMatrix};
use crate::linalg;
use crate::{Error, Result};

/// Dense row-major 64-bit matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch {
                expected: cols,
                got: r.len(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Rows `idx`, in that order.
    pub fn gather(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    fn vstack(&self, other: &Self) -> Self {
        debug_assert_eq!(self.cols, other.cols);
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        }
    }

    fn split_rows(&self, at: usize) -> (Self, Self) {
        let (a, b) = self.data.split_at(at * self.cols);
        (
            Self {
                rows: at,
                cols: self.cols,
                data: a.to_vec(),
            },
            Self {
                rows: self.rows - at,
                cols: self.cols,
                data: b.to_vec(),
            },
        )
    }

    fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    fn add_scaled(&mut self, other: &Self, s: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 0.25,
        }
    }
}

impl LossConfig {
    pub fn new(tau: f64, lambda: f64) -> Result<Self> {
        let c = Self { tau, lambda };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

/// Anchors and their paired views; `labels` only on labeled sub-batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub anchors: Mat,
    pub views: Mat,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn new(anchors: Mat, views: Mat, labels: Option<Vec<usize>>) -> Result<Self> {
        if anchors.rows != views.rows || anchors.cols != views.cols {
            return Err(Error::Shape(format!(
                "anchors {}x{} vs views {}x{}",
                anchors.rows, anchors.cols, views.rows, views.cols
            )));
        }
        if let Some(l) = &labels {
            if l.len() != anchors.rows {
                return Err(Error::Shape(format!(
                    "{} labels for {} anchors",
                    l.len(),
                    anchors.rows
                )));
            }
        }
        Ok(Self {
            anchors,
            views,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.rows
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.rows == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_anchors: Mat,
    pub grad_views: Mat,
}

/// `(logsumexp over n != i, softmax weights with p[i] = 0)`.
fn masked_softmax(logits: &[f64], skip: usize) -> (f64, Vec<f64>) {
    let m = logits
        .iter()
        .enumerate()
        .filter(|&(n, _)| n != skip)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(n, _)| n != skip)
        .map(|(_, &s)| (s - m).exp())
        .sum();
    let lse = m + sum.ln();
    let p = logits
        .iter()
        .enumerate()
        .map(|(n, &s)| if n == skip { 0.0 } else { (s - lse).exp() })
        .collect();
    (lse, p)
}

fn logits_row(anchor: &[f64], others: &Mat, tau: f64) -> Result<Vec<f64>> {
    let row: Vec<f64> = (0..others.rows)
        .map(|n| linalg::dot(anchor, others.row(n)) / tau)
        .collect();
    if row.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteLoss("non-finite logits".into()));
    }
    Ok(row)
}

/// Mean unsupervised contrastive loss over the batch.
pub fn unsup_loss(batch: &Batch, tau: f64) -> Result<LossOutput> {
    check_tau(tau)?;
    let n = batch.len();
    if n < 2 {
        return Err(Error::invalid(
            "unsupervised loss needs at least 2 items (empty denominator)",
        ));
    }
    let (a, v) = (&batch.anchors, &batch.views);
    let mut ga = Mat::zeros(n, a.cols);
    let mut gv = Mat::zeros(n, a.cols);
    let mut total = 0.0;
    let w = 1.0 / (tau * n as f64);
    for i in 0..n {
        let logits = logits_row(a.row(i), v, tau)?;
        let (lse, p) = masked_softmax(&logits, i);
        total += lse - logits[i];

        let gai = ga.row_mut(i);
        for (g, x) in gai.iter_mut().zip(v.row(i)) {
            *g -= w * x;
        }
        for (m, &pm) in p.iter().enumerate() {
            if pm == 0.0 {
                continue;
            }
            for (g, x) in ga.row_mut(i).iter_mut().zip(v.row(m)) {
                *g += w * pm * x;
            }
            for (g, x) in gv.row_mut(m).iter_mut().zip(a.row(i)) {
                *g += w * pm * x;
            }
        }
        for (g, x) in gv.row_mut(i).iter_mut().zip(a.row(i)) {
            *g -= w * x;
        }
    }
    finish(total / n as f64, ga, gv)
}

/// Mean supervised contrastive loss over the anchors; views are unused.
pub fn sup_loss(batch: &Batch, tau: f64) -> Result<LossOutput> {
    check_tau(tau)?;
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("supervised loss needs labels"))?;
    let n = batch.len();
    let a = &batch.anchors;
    let positives: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&q| q != i && labels[q] == labels[i]).collect())
        .collect();
    if let Some(anchor) = positives.iter().position(Vec::is_empty) {
        return Err(Error::EmptyPositives { anchor });
    }
    let mut ga = Mat::zeros(n, a.cols);
    let mut total = 0.0;
    let w = 1.0 / (tau * n as f64);
    for i in 0..n {
        let logits = logits_row(a.row(i), a, tau)?;
        let (lse, p) = masked_softmax(&logits, i);
        let pos = &positives[i];
        let inv = 1.0 / pos.len() as f64;
        total += lse - inv * pos.iter().map(|&q| logits[q]).sum::<f64>();

        // d/dz_i, then the contributions of z_i appearing on the other side.
        let mut gi = vec![0.0; a.cols];
        for &q in pos {
            for (g, x) in gi.iter_mut().zip(a.row(q)) {
                *g -= w * inv * x;
            }
        }
        for (m, &pm) in p.iter().enumerate() {
            if pm != 0.0 {
                for (g, x) in gi.iter_mut().zip(a.row(m)) {
                    *g += w * pm * x;
                }
            }
        }
        for (g, x) in ga.row_mut(i).iter_mut().zip(&gi) {
            *g += x;
        }
        let ai = a.row(i).to_vec();
        for &q in pos {
            for (g, x) in ga.row_mut(q).iter_mut().zip(&ai) {
                *g -= w * inv * x;
            }
        }
        for (m, &pm) in p.iter().enumerate() {
            if pm != 0.0 {
                for (g, x) in ga.row_mut(m).iter_mut().zip(&ai) {
                    *g += w * pm * x;
                }
            }
        }
    }
    finish(total / n as f64, ga, Mat::zeros(n, a.cols))
}

fn finish(value: f64, grad_anchors: Mat, grad_views: Mat) -> Result<LossOutput> {
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(format!("loss = {value}")));
    }
    Ok(LossOutput {
        value,
        grad_anchors,
        grad_views,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLossOutput {
    pub value: f64,
    /// `sum_i unsup_i` over the union of both sub-batches.
    pub unsup_sum: f64,
    /// `sum_i sup_i` over the labeled sub-batch.
    pub sup_sum: f64,
    pub unlab_grad_anchors: Mat,
    pub unlab_grad_views: Mat,
    pub lab_grad_anchors: Mat,
    pub lab_grad_views: Mat,
}

/// Weighted combination of the two objectives. A term whose weight is zero
/// is not evaluated.
pub fn total_loss(unlab: &Batch, lab: &Batch, config: &LossConfig) -> Result<TotalLossOutput> {
    config.validate()?;
    let dims = if lab.is_empty() {
        unlab.anchors.cols
    } else {
        lab.anchors.cols
    };
    if !unlab.is_empty() && !lab.is_empty() && unlab.anchors.cols != lab.anchors.cols {
        return Err(Error::DimensionMismatch {
            expected: lab.anchors.cols,
            got: unlab.anchors.cols,
        });
    }
    let (nl, nu) = (lab.len(), unlab.len());
    let mut lab_ga = Mat::zeros(nl, dims);
    let mut lab_gv = Mat::zeros(nl, dims);
    let mut unlab_ga = Mat::zeros(nu, dims);
    let mut unlab_gv = Mat::zeros(nu, dims);

    let mut unsup_sum = 0.0;
    let wu = 1.0 - config.lambda;
    if wu > 0.0 {
        let union = Batch {
            anchors: lab.anchors.vstack(&unlab.anchors),
            views: lab.views.vstack(&unlab.views),
            labels: None,
        };
        let out = unsup_loss(&union, config.tau)?;
        let n = union.len() as f64;
        unsup_sum = out.value * n;
        let (mut la, mut ua) = out.grad_anchors.split_rows(nl);
        let (mut lv, mut uv) = out.grad_views.split_rows(nl);
        for m in [&mut la, &mut ua, &mut lv, &mut uv] {
            m.scale(wu * n);
        }
        lab_ga.add_scaled(&la, 1.0);
        lab_gv.add_scaled(&lv, 1.0);
        unlab_ga.add_scaled(&ua, 1.0);
        unlab_gv.add_scaled(&uv, 1.0);
    }

    let mut sup_sum = 0.0;
    if config.lambda > 0.0 && nl > 0 {
        let out = sup_loss(lab, config.tau)?;
        sup_sum = out.value * nl as f64;
        lab_ga.add_scaled(&out.grad_anchors, config.lambda * nl as f64);
    }

    let value = wu * unsup_sum + config.lambda * sup_sum;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(format!("total loss = {value}")));
    }
    Ok(TotalLossOutput {
        value,
        unsup_sum,
        sup_sum,
        unlab_grad_anchors: unlab_ga,
        unlab_grad_views: unlab_gv,
        lab_grad_anchors: lab_ga,
        lab_grad_views: lab_gv,
    })
}

/// `h(x) = normalize(W^T x + b)` with `W` stored `in_dims x out_dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    in_dims: usize,
    out_dims: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl HeadGrad {
    fn zeros(head: &ProjectionHead) -> Self {
        Self {
            weight: vec![0.0; head.weight.len()],
            bias: vec![0.0; head.bias.len()],
        }
    }

    fn add(&mut self, other: &Self) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

/// Pre-normalization outputs and their unit rows.
#[derive(Debug, Clone)]
pub struct HeadForward {
    pub pre: Mat,
    pub z: Mat,
}

impl ProjectionHead {
    pub fn new(in_dims: usize, out_dims: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_dims == 0 || out_dims < 2 {
            return Err(Error::invalid(format!(
                "head needs in_dims >= 1 and out_dims >= 2, got {in_dims}x{out_dims}"
            )));
        }
        if weight.len() != in_dims * out_dims || bias.len() != out_dims {
            return Err(Error::Shape(format!(
                "head {in_dims}x{out_dims} with {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::invalid("head parameters must be finite"));
        }
        Ok(Self {
            in_dims,
            out_dims,
            weight,
            bias,
        })
    }

    /// Gaussian weights with standard deviation `1/sqrt(in_dims)`, zero bias.
    pub fn init(in_dims: usize, out_dims: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        let std = 1.0 / (in_dims.max(1) as f64).sqrt();
        let weight = (0..in_dims * out_dims)
            .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        Self::new(in_dims, out_dims, weight, vec![0.0; out_dims])
    }

    pub fn in_dims(&self) -> usize {
        self.in_dims
    }

    pub fn out_dims(&self) -> usize {
        self.out_dims
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn affine(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (i, &xi) in x.iter().enumerate() {
            let w = &self.weight[i * self.out_dims..(i + 1) * self.out_dims];
            for (o, wv) in out.iter_mut().zip(w) {
                *o += xi * wv;
            }
        }
    }

    pub fn forward(&self, inputs: &Mat) -> Result<HeadForward> {
        if inputs.cols != self.in_dims {
            return Err(Error::DimensionMismatch {
                expected: self.in_dims,
                got: inputs.cols,
            });
        }
        let mut pre = Mat::zeros(inputs.rows, self.out_dims);
        let mut z = Mat::zeros(inputs.rows, self.out_dims);
        for r in 0..inputs.rows {
            self.affine(inputs.row(r), pre.row_mut(r));
            let n = linalg::norm(pre.row(r));
            if n == 0.0 || !n.is_finite() {
                return Err(Error::ZeroNorm {
                    id: format!("<head output row {r}>"),
                });
            }
            for (zo, p) in z.row_mut(r).iter_mut().zip(pre.row(r)) {
                *zo = p / n;
            }
        }
        Ok(HeadForward { pre, z })
    }

    /// Unit-norm head output for one input row.
    pub fn apply(&self, x: &[f32]) -> Result<Vec<f64>> {
        let inputs = Mat::new(1, x.len(), linalg::to_f64(x))?;
        Ok(self.forward(&inputs)?.z.data)
    }

    /// Parameter gradient given `dL/dz` for the rows produced by `forward`.
    pub fn backward(&self, inputs: &Mat, fwd: &HeadForward, grad_z: &Mat) -> HeadGrad {
        let mut g = HeadGrad::zeros(self);
        let mut gu = vec![0.0; self.out_dims];
        for r in 0..inputs.rows {
            let z = fwd.z.row(r);
            let gz = grad_z.row(r);
            let n = linalg::norm(fwd.pre.row(r));
            let proj: f64 = z.iter().zip(gz).map(|(a, b)| a * b).sum();
            for ((u, &zi), &gzi) in gu.iter_mut().zip(z).zip(gz) {
                *u = (gzi - zi * proj) / n;
            }
            for (b, u) in g.bias.iter_mut().zip(&gu) {
                *b += u;
            }
            for (i, &xi) in inputs.row(r).iter().enumerate() {
                let w = &mut g.weight[i * self.out_dims..(i + 1) * self.out_dims];
                for (wv, u) in w.iter_mut().zip(&gu) {
                    *wv += xi * u;
                }
            }
        }
        g
    }

    /// `params -= lr * grad`.
    pub fn sgd_step(&mut self, grad: &HeadGrad, lr: f64) {
        for (p, g) in self.weight.iter_mut().zip(&grad.weight) {
            *p -= lr * g;
        }
        for (p, g) in self.bias.iter_mut().zip(&grad.bias) {
            *p -= lr * g;
        }
    }

    /// `EMB1` layout: `in_dims` weight rows (`w0..`) then one `bias` row.
    pub fn to_matrix(&self) -> EmbeddingMatrix {
        let mut ids: Vec<String> = (0..self.in_dims).map(|i| format!("w{i}")).collect();
        ids.push("bias".into());
        let data = self
            .weight
            .iter()
            .chain(&self.bias)
            .map(|&v| v as f32)
            .collect();
        EmbeddingMatrix::new(ids, self.out_dims, data).expect("head parameters are finite")
    }

    pub fn from_matrix(m: &EmbeddingMatrix) -> Result<Self> {
        if m.rows() < 2 || m.id(m.rows() - 1) != "bias" {
            return Err(Error::Format {
                what: "head file",
                detail: "last row must be the bias vector".into(),
            });
        }
        let in_dims = m.rows() - 1;
        let all = linalg::to_f64(m.data());
        let (w, b) = all.split_at(in_dims * m.dims());
        Self::new(in_dims, m.dims(), w.to_vec(), b.to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_matrix().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_matrix(&load_matrix(path)?)
    }
}

/// Total loss of a head on one batch of paired inputs and its parameter
/// gradient. `labels[r]` is the seen-class index for labeled rows.
///
/// Labeled rows without a same-label partner in the batch are scored as
/// unlabeled, since their supervised term is undefined.
pub fn head_objective(
    head: &ProjectionHead,
    first: &Mat,
    second: &Mat,
    labels: &[Option<usize>],
    config: &LossConfig,
) -> Result<(TotalLossOutput, HeadGrad)> {
    if labels.len() != first.rows || first.rows != second.rows {
        return Err(Error::Shape("inputs and labels disagree in length".into()));
    }
    let f1 = head.forward(first)?;
    let f2 = head.forward(second)?;

    let mut lab_rows = Vec::new();
    let mut unlab_rows = Vec::new();
    for (r, l) in labels.iter().enumerate() {
        match l {
            Some(c) if labels.iter().filter(|&&o| o == Some(*c)).count() >= 2 => lab_rows.push(r),
            _ => unlab_rows.push(r),
        }
    }
    let lab = Batch::new(
        f1.z.gather(&lab_rows),
        f2.z.gather(&lab_rows),
        Some(lab_rows.iter().map(|&r| labels[r].unwrap()).collect()),
    )?;
    let unlab = Batch::new(f1.z.gather(&unlab_rows), f2.z.gather(&unlab_rows), None)?;
    let out = total_loss(&unlab, &lab, config)?;

    let cols = head.out_dims;
    let mut g1 = Mat::zeros(first.rows, cols);
    let mut g2 = Mat::zeros(first.rows, cols);
    for (k, &r) in lab_rows.iter().enumerate() {
        g1.row_mut(r).copy_from_slice(out.lab_grad_anchors.row(k));
        g2.row_mut(r).copy_from_slice(out.lab_grad_views.row(k));
    }
    for (k, &r) in unlab_rows.iter().enumerate() {
        g1.row_mut(r).copy_from_slice(out.unlab_grad_anchors.row(k));
        g2.row_mut(r).copy_from_slice(out.unlab_grad_views.row(k));
    }
    let mut grad = head.backward(first, &f1, &g1);
    grad.add(&head.backward(second, &f2, &g2));
    Ok((out, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Initial learning rate, cosine-annealed per epoch towards zero.
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Standard deviation of the additive view noise.
    pub noise_sigma: f64,
    /// Output width; defaults to the input width.
    pub out_dims: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 5e-5,
            seed: 0,
            batch_size: 128,
            noise_sigma: 0.05,
            out_dims: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedHead {
    pub head: ProjectionHead,
    /// Mean batch total loss per epoch.
    pub trace: Vec<f64>,
}

pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    base * 0.5 * (1.0 + (PI * epoch as f64 / epochs as f64).cos())
}

fn noisy_view(x: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return x.to_vec();
    }
    let mut v: Vec<f64> = x
        .iter()
        .map(|&xi| {
            let g: f64 = StandardNormal.sample(rng);
            xi + sigma * g
        })
        .collect();
    let n = linalg::norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|e| *e /= n);
    }
    v
}

/// Trains a projection head on the split's items with SGD.
///
/// Each epoch shuffles all split items into batches of `batch_size` (a
/// trailing single item joins the previous batch). Both views of an item are
/// its unit embedding plus independent Gaussian noise, renormalized.
pub fn train_head(
    images: &EmbeddingMatrix,
    split: &DatasetSplit,
    loss: &LossConfig,
    train: &TrainConfig,
) -> Result<TrainedHead> {
    loss.validate()?;
    if train.epochs == 0 {
        return Err(Error::invalid("epochs must be at least 1"));
    }
    if train.batch_size < 2 {
        return Err(Error::invalid("batch size must be at least 2"));
    }
    if train.noise_sigma.is_nan() || train.noise_sigma < 0.0 || train.lr.is_nan() || train.lr < 0.0 {
        return Err(Error::invalid("noise sigma and lr must be non-negative"));
    }
    let mut inputs = Vec::with_capacity(split.len());
    let mut labels = Vec::with_capacity(split.len());
    for (id, entry) in split.iter() {
        let pos = images
            .position(id)
            .ok_or_else(|| Error::UnknownId(id.to_owned()))?;
        let row = images.row(pos);
        let n = linalg::norm_f32(row);
        if n == 0.0 {
            return Err(Error::ZeroNorm { id: id.to_owned() });
        }
        inputs.push(row.iter().map(|&v| f64::from(v) / n).collect::<Vec<_>>());
        labels.push(if entry.labeled {
            split.seen_class_index(&entry.class)
        } else {
            None
        });
    }
    if inputs.len() < 2 {
        return Err(Error::invalid("need at least 2 items to train"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let dims = images.dims();
    let mut head = ProjectionHead::init(dims, train.out_dims.unwrap_or(dims), &mut rng)?;
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut trace = Vec::with_capacity(train.epochs);

    for epoch in 0..train.epochs {
        let lr = cosine_lr(train.lr, epoch, train.epochs);
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(train.batch_size).collect();
        if batches.len() > 1 && batches.last().unwrap().len() == 1 {
            batches.pop();
            let k = batches.len() - 1;
            batches[k] = &order[k * train.batch_size..];
        }
        let mut sum = 0.0;
        for batch in &batches {
            let first: Vec<Vec<f64>> = batch
                .iter()
                .map(|&i| noisy_view(&inputs[i], train.noise_sigma, &mut rng))
                .collect();
            let second: Vec<Vec<f64>> = batch
                .iter()
                .map(|&i| noisy_view(&inputs[i], train.noise_sigma, &mut rng))
                .collect();
            let batch_labels: Vec<Option<usize>> = batch.iter().map(|&i| labels[i]).collect();
            let step = head_objective(
                &head,
                &Mat::from_rows(&first)?,
                &Mat::from_rows(&second)?,
                &batch_labels,
                loss,
            );
            let (out, grad) = match step {
                Ok(s) => s,
                Err(Error::NonFiniteLoss(_)) | Err(Error::ZeroNorm { .. }) => {
                    return Err(Error::Diverged { epoch, trace })
                }
                Err(e) => return Err(e),
            };
            if grad.weight.iter().chain(&grad.bias).any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, trace });
            }
            sum += out.value;
            head.sgd_step(&grad, lr);
        }
        trace.push(sum / batches.len() as f64);
    }
    Ok(TrainedHead { head, trace })
}

/// Writes CSV `epoch,loss`.
pub fn write_trace(trace: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for (e, v) in trace.iter().enumerate() {
        w.write_record([e.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
