//! Confusion counts, precision/recall/F1 and the ODS/OIS threshold sweeps.
//!
//! ODS picks one threshold for the whole dataset by pooling confusion counts
//! across images. OIS picks the best threshold per image and pools the counts
//! each image produces at its own threshold. Ties go to the smallest threshold.

use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::numkit::ensure_binary;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Precision, recall and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

/// Pixelwise counts of a binary prediction against a binary mask.
pub fn confusion(pred: &Tensor, mask: &Tensor) -> Result<ConfusionCounts> {
    pred.check_same_shape(mask)?;
    ensure_binary(pred)?;
    ensure_binary(mask)?;
    let mut c = ConfusionCounts::default();
    for (&p, &y) in pred.data().iter().zip(mask.data()) {
        match (p == 1.0, y == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Precision/recall/F1. An empty ground truth predicted empty scores
/// `(1, 1, 1)`; a `0/0` precision or recall is taken as 1; no true positives
/// with any error gives `f1 = 0`.
pub fn prf1(c: &ConfusionCounts) -> Prf1 {
    if c.tp + c.fp + c.fn_ == 0 {
        return Prf1 { p: 1.0, r: 1.0, f1: 1.0 };
    }
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    // One rounding from exact integers, so F1 ties between thresholds compare
    // equal and the smallest threshold wins.
    let f1 = if c.tp == 0 {
        0.0
    } else {
        (2 * c.tp) as f64 / (2 * c.tp + c.fp + c.fn_) as f64
    };
    Prf1 { p, r, f1 }
}

/// `1` where `prob > t`, else `0`.
pub fn threshold(probs: &Tensor, t: f64) -> Tensor {
    probs.map(|p| if p > t { 1.0 } else { 0.0 })
}

/// 99 evenly spaced thresholds `0.01, 0.02, ..., 0.99`.
pub fn default_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdsScore {
    pub threshold: f64,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub best_threshold: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OisScore {
    pub mean_threshold: f64,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
    pub per_image: Vec<ImageScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ods: OdsScore,
    pub ois: OisScore,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "method,beta,gamma,epoch,ods_p,ods_r,ods_f1,ois_p,ois_r,ois_f1";

    /// One fixed-column CSV row; missing fields are left empty.
    pub fn csv_row(
        &self,
        method: &str,
        beta: Option<f64>,
        gamma: Option<f64>,
        epoch: Option<usize>,
    ) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{method},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            opt(beta),
            opt(gamma),
            epoch.map(|e| e.to_string()).unwrap_or_default(),
            self.ods.p,
            self.ods.r,
            self.ods.f1,
            self.ois.p,
            self.ois.r,
            self.ois.f1,
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Validation("threshold grid is empty".into()));
    }
    if let Some(&t) = grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Validation(format!("threshold {t} outside [0, 1]")));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Validation("threshold grid must be sorted ascending".into()));
    }
    Ok(())
}

/// Confusion counts of one image at every grid threshold.
fn sweep_image(probs: &Tensor, mask: &Tensor, grid: &[f64]) -> Result<Vec<ConfusionCounts>> {
    probs.check_same_shape(mask)?;
    ensure_binary(mask)?;
    // hist[k] counts pixels exceeding exactly the first k thresholds.
    let mut pos_hist = vec![0u64; grid.len() + 1];
    let mut neg_hist = vec![0u64; grid.len() + 1];
    for (&p, &y) in probs.data().iter().zip(mask.data()) {
        let k = grid.partition_point(|&t| t < p);
        if y == 1.0 {
            pos_hist[k] += 1;
        } else {
            neg_hist[k] += 1;
        }
    }
    let total_pos: u64 = pos_hist.iter().sum();
    let total_neg: u64 = neg_hist.iter().sum();
    let mut out = vec![ConfusionCounts::default(); grid.len()];
    let (mut tp, mut fp) = (0u64, 0u64);
    for i in (0..grid.len()).rev() {
        tp += pos_hist[i + 1];
        fp += neg_hist[i + 1];
        out[i] = ConfusionCounts {
            tp,
            fp,
            fn_: total_pos - tp,
            tn: total_neg - fp,
        };
    }
    Ok(out)
}

fn sweep_all(probs: &[Tensor], masks: &[Tensor], grid: &[f64]) -> Result<Vec<Vec<ConfusionCounts>>> {
    if probs.is_empty() {
        return Err(Error::Validation("no images to evaluate".into()));
    }
    if probs.len() != masks.len() {
        return Err(Error::Validation(format!(
            "{} probability maps but {} masks",
            probs.len(),
            masks.len()
        )));
    }
    check_grid(grid)?;
    probs
        .iter()
        .zip(masks)
        .map(|(p, m)| sweep_image(p, m, grid))
        .collect()
}

/// Index of the highest F1, first on ties.
fn best_index(counts: impl Iterator<Item = ConfusionCounts>) -> (usize, Prf1, ConfusionCounts) {
    let mut best: Option<(usize, Prf1, ConfusionCounts)> = None;
    for (i, c) in counts.enumerate() {
        let s = prf1(&c);
        if best.as_ref().is_none_or(|(_, b, _)| s.f1 > b.f1) {
            best = Some((i, s, c));
        }
    }
    best.expect("grid is non-empty")
}

fn ods_from_sweeps(sweeps: &[Vec<ConfusionCounts>], grid: &[f64]) -> OdsScore {
    let pooled = (0..grid.len()).map(|i| sweeps.iter().map(|s| s[i]).sum::<ConfusionCounts>());
    let (i, s, counts) = best_index(pooled);
    OdsScore {
        threshold: grid[i],
        p: s.p,
        r: s.r,
        f1: s.f1,
        counts,
    }
}

fn ois_from_sweeps(sweeps: &[Vec<ConfusionCounts>], grid: &[f64]) -> OisScore {
    let per_image: Vec<ImageScore> = sweeps
        .iter()
        .map(|s| {
            let (i, score, counts) = best_index(s.iter().copied());
            ImageScore {
                best_threshold: grid[i],
                f1: score.f1,
                counts,
            }
        })
        .collect();
    let counts: ConfusionCounts = per_image.iter().map(|s| s.counts).sum();
    let s = prf1(&counts);
    let mean_threshold =
        per_image.iter().fold(0.0, |acc, s| acc + s.best_threshold) / per_image.len() as f64;
    OisScore {
        mean_threshold,
        p: s.p,
        r: s.r,
        f1: s.f1,
        counts,
        per_image,
    }
}

/// Best single threshold over the whole dataset.
pub fn evaluate_ods(probs: &[Tensor], masks: &[Tensor], grid: &[f64]) -> Result<OdsScore> {
    let sweeps = sweep_all(probs, masks, grid)?;
    Ok(ods_from_sweeps(&sweeps, grid))
}

/// Best threshold per image, counts pooled across images.
pub fn evaluate_ois(probs: &[Tensor], masks: &[Tensor], grid: &[f64]) -> Result<OisScore> {
    let sweeps = sweep_all(probs, masks, grid)?;
    Ok(ois_from_sweeps(&sweeps, grid))
}

/// ODS and OIS from a single sweep of the data.
pub fn evaluate(probs: &[Tensor], masks: &[Tensor], grid: &[f64]) -> Result<EvalReport> {
    let sweeps = sweep_all(probs, masks, grid)?;
    Ok(EvalReport {
        ods: ods_from_sweeps(&sweeps, grid),
        ois: ois_from_sweeps(&sweeps, grid),
    })
}
