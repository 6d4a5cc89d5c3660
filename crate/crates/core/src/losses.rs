//! Additive-margin softmax losses (AM and AAM) over sub-center class weights.
//!
//! Each class owns `K` weight vectors; the class cosine is the largest cosine
//! between the embedding and any of its sub-centers. Gradients flow only
//! through that selected sub-center.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Consolidated sums with a norm below this are reported as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-8;

/// `J x K x D` class sub-center weights, stored un-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct SubCenterBank {
    pub weights: Array3<f64>,
}

impl SubCenterBank {
    pub fn new(weights: Array3<f64>) -> Result<Self> {
        let (j, k, d) = weights.dim();
        if j == 0 || k == 0 || d == 0 {
            return Err(Error::InvalidConfig(format!("empty sub-center bank {:?}", (j, k, d))));
        }
        Ok(Self { weights })
    }

    /// Gaussian rows rescaled to unit norm.
    pub fn random<R: Rng + ?Sized>(n_classes: usize, k: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let mut weights = Array3::zeros((n_classes, k, dim));
        for mut row in weights.lanes_mut(Axis(2)) {
            fill_unit_gaussian(row.view_mut(), rng);
        }
        Self::new(weights)
    }

    pub fn n_classes(&self) -> usize {
        self.weights.dim().0
    }

    pub fn k(&self) -> usize {
        self.weights.dim().1
    }

    pub fn dim(&self) -> usize {
        self.weights.dim().2
    }

    /// Raw Euclidean norm of every sub-center, `J x K`.
    pub fn norms(&self) -> Array2<f64> {
        self.weights.map_axis(Axis(2), |w| w.dot(&w).sqrt())
    }

    fn normalized(&self) -> Result<(Array3<f64>, Array2<f64>)> {
        let norms = self.norms();
        if let Some(((j, k), _)) = norms.indexed_iter().find(|(_, &n)| !(n > 0.0) || !n.is_finite()) {
            return Err(Error::DegenerateEmbedding(format!("sub-center ({j}, {k}) has zero or non-finite norm")));
        }
        let mut unit = self.weights.clone();
        for ((j, k), &n) in norms.indexed_iter() {
            unit.slice_mut(ndarray::s![j, k, ..]).mapv_inplace(|v| v / n);
        }
        Ok((unit, norms))
    }

    /// Keeps only the listed classes, in the given order.
    pub fn select_classes(&self, classes: &[usize]) -> Result<Self> {
        for &c in classes {
            if c >= self.n_classes() {
                return Err(Error::BadLabel { label: c, n_classes: self.n_classes() });
            }
        }
        Self::new(self.weights.select(Axis(0), classes))
    }
}

pub(crate) fn fill_unit_gaussian<R: Rng + ?Sized>(mut row: ndarray::ArrayViewMut1<f64>, rng: &mut R) {
    loop {
        for v in row.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let n = row.dot(&row).sqrt();
        if n > 1e-12 {
            row.mapv_inplace(|v| v / n);
            return;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginKind {
    /// Additive cosine margin, `s * (cos - m)`.
    Am,
    /// Additive angular margin, `s * cos(theta + m)`.
    Aam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginLossConfig {
    pub kind: MarginKind,
    pub scale: f64,
    pub margin: f64,
}

impl Default for MarginLossConfig {
    fn default() -> Self {
        Self { kind: MarginKind::Am, scale: 32.0, margin: 0.2 }
    }
}

impl MarginLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::InvalidConfig(format!("scale must be positive, got {}", self.scale)));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::InvalidConfig(format!("margin must lie in [0, 1), got {}", self.margin)));
        }
        Ok(())
    }

    /// Margin-adjusted target cosine and its derivative with respect to the cosine.
    pub fn target_term(&self, cos: f64) -> (f64, f64) {
        let m = self.margin;
        match self.kind {
            MarginKind::Am => (cos - m, 1.0),
            MarginKind::Aam => {
                // past theta + m = pi, cos(theta + m) stops being monotone; use cos - m sin m
                if cos > (std::f64::consts::PI - m).cos() {
                    let sin = (1.0 - cos * cos).max(0.0).sqrt();
                    // derivative blows up at theta = 0; guard the denominator only
                    (cos * m.cos() - sin * m.sin(), m.cos() + cos * m.sin() / sin.max(1e-6))
                } else {
                    (cos - m * m.sin(), 1.0)
                }
            }
        }
    }
}

fn unit(x: ArrayView1<f64>) -> Result<(Array1<f64>, f64)> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding contains NaN or infinity".into()));
    }
    let n = x.dot(&x).sqrt();
    if !(n > 0.0) {
        return Err(Error::DegenerateEmbedding("embedding has zero norm".into()));
    }
    Ok((x.mapv(|v| v / n), n))
}

/// Index and cosine of the nearest sub-center of class `j`; ties keep the lowest index.
fn nearest(x_unit: ArrayView1<f64>, unit_bank: &Array3<f64>, j: usize) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, w) in unit_bank.index_axis(Axis(0), j).outer_iter().enumerate() {
        let c = x_unit.dot(&w);
        if c > best.1 {
            best = (k, c);
        }
    }
    (best.0, best.1.clamp(-1.0, 1.0))
}

/// Largest cosine between `x` and any sub-center of class `j`.
pub fn subcenter_cosine(x: ArrayView1<f64>, bank: &SubCenterBank, j: usize) -> Result<f64> {
    if j >= bank.n_classes() {
        return Err(Error::BadLabel { label: j, n_classes: bank.n_classes() });
    }
    check_dim(x.len(), bank)?;
    let (xu, _) = unit(x)?;
    let (unit_bank, _) = bank.normalized()?;
    Ok(nearest(xu.view(), &unit_bank, j).1)
}

fn check_dim(len: usize, bank: &SubCenterBank) -> Result<()> {
    if len != bank.dim() {
        return Err(Error::DimMismatch { expected: bank.dim(), found: len });
    }
    Ok(())
}

/// Class cosines of `x` against every class.
pub fn class_cosines(x: ArrayView1<f64>, bank: &SubCenterBank) -> Result<Array1<f64>> {
    check_dim(x.len(), bank)?;
    let (xu, _) = unit(x)?;
    let (unit_bank, _) = bank.normalized()?;
    Ok((0..bank.n_classes()).map(|j| nearest(xu.view(), &unit_bank, j).1).collect())
}

pub fn margin_logits(
    x: ArrayView1<f64>,
    bank: &SubCenterBank,
    label: usize,
    cfg: &MarginLossConfig,
) -> Result<Array1<f64>> {
    cfg.validate()?;
    if label >= bank.n_classes() {
        return Err(Error::BadLabel { label, n_classes: bank.n_classes() });
    }
    let mut logits = class_cosines(x, bank)?;
    logits[label] = cfg.target_term(logits[label]).0;
    logits *= cfg.scale;
    Ok(logits)
}

/// Mean cross-entropy over a batch with gradients for embeddings and the bank.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    /// `B x D`, same layout as the input embeddings.
    pub embeddings: Array2<f64>,
    /// `J x K x D`; only the selected sub-center of each class receives gradient.
    pub bank: Array3<f64>,
    /// Per-sample cross-entropy, before averaging.
    pub per_sample: Vec<f64>,
}

pub fn loss_and_grad(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    bank: &SubCenterBank,
    cfg: &MarginLossConfig,
) -> Result<LossGrad> {
    cfg.validate()?;
    let b = embeddings.nrows();
    if b == 0 {
        return Err(Error::NoData("empty batch".into()));
    }
    if labels.len() != b {
        return Err(Error::InvalidLength(format!("{} embeddings but {} labels", b, labels.len())));
    }
    check_dim(embeddings.ncols(), bank)?;
    if bank.weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sub-center bank contains NaN or infinity".into()));
    }
    let (unit_bank, norms) = bank.normalized()?;
    let n_classes = bank.n_classes();
    let s = cfg.scale;

    let mut grad_x = Array2::zeros(embeddings.dim());
    let mut grad_bank = Array3::zeros(bank.weights.dim());
    let mut per_sample = Vec::with_capacity(b);
    for (i, (x, &y)) in embeddings.outer_iter().zip(labels).enumerate() {
        if y >= n_classes {
            return Err(Error::BadLabel { label: y, n_classes });
        }
        let (xu, xnorm) = unit(x)?;
        let picks: Vec<(usize, f64)> = (0..n_classes).map(|j| nearest(xu.view(), &unit_bank, j)).collect();
        let (target, dtarget) = cfg.target_term(picks[y].1);
        let logits: Array1<f64> =
            picks.iter().enumerate().map(|(j, &(_, c))| s * if j == y { target } else { c }).collect();
        let max = logits.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let sum_exp: f64 = logits.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        per_sample.push(lse - logits[y]);

        let mut gx = grad_x.row_mut(i);
        for (j, &(k, c)) in picks.iter().enumerate() {
            let p = (logits[j] - lse).exp();
            let mut gz = (p - if j == y { 1.0 } else { 0.0 }) / b as f64;
            if gz == 0.0 {
                continue;
            }
            gz *= s * if j == y { dtarget } else { 1.0 };
            let wu = unit_bank.slice(ndarray::s![j, k, ..]);
            // d cos / d x = (w_hat - c x_hat) / |x|, d cos / d w = (x_hat - c w_hat) / |w|
            gx.scaled_add(gz / xnorm, &wu);
            gx.scaled_add(-gz * c / xnorm, &xu);
            let mut gw = grad_bank.slice_mut(ndarray::s![j, k, ..]);
            let wn = norms[[j, k]];
            gw.scaled_add(gz / wn, &xu);
            gw.scaled_add(-gz * c / wn, &wu);
        }
    }
    let loss = per_sample.iter().sum::<f64>() / b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {loss}")));
    }
    Ok(LossGrad { loss, embeddings: grad_x, bank: grad_bank, per_sample })
}

/// Keeps, per class, the sub-center with the largest raw norm.
pub fn consolidate_dominated(bank: &SubCenterBank) -> SubCenterBank {
    let norms = bank.norms();
    let (j, _, d) = bank.weights.dim();
    let mut out = Array3::zeros((j, 1, d));
    for (c, row) in norms.outer_iter().enumerate() {
        let mut best = 0;
        for (k, &n) in row.iter().enumerate() {
            if n > row[best] {
                best = k;
            }
        }
        out.slice_mut(ndarray::s![c, 0, ..]).assign(&bank.weights.slice(ndarray::s![c, best, ..]));
    }
    SubCenterBank { weights: out }
}

/// Replaces each class's sub-centers by their vector sum.
///
/// Returns the new bank and the classes whose summed center has a norm below
/// [`DEGENERATE_NORM`]; those are logged and left as-is.
pub fn consolidate_sum(bank: &SubCenterBank) -> (SubCenterBank, Vec<usize>) {
    let summed = bank.weights.sum_axis(Axis(1)).insert_axis(Axis(1));
    let out = SubCenterBank { weights: summed };
    let degenerate: Vec<usize> = out
        .norms()
        .outer_iter()
        .enumerate()
        .filter(|(_, n)| n[0] < DEGENERATE_NORM)
        .map(|(j, _)| j)
        .collect();
    if !degenerate.is_empty() {
        log::warn!("summed sub-centers are degenerate for {} classes: {:?}", degenerate.len(), degenerate);
    }
    (out, degenerate)
}
