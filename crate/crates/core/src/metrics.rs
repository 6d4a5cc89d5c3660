//! Detection metrics (EER, minDCF) and retrieval mAP.

use std::cmp::Ordering;

use crate::backend::ScoreSet;
use crate::error::{Error, Result};

/// One operating point: accept when `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Operating points at every distinct score, ascending threshold, closed by
/// a reject-all point at `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetCurve {
    pub points: Vec<OperatingPoint>,
    pub n_target: usize,
    pub n_nontarget: usize,
}

pub fn det_curve(scores: &ScoreSet) -> Result<DetCurve> {
    let mut values = Vec::with_capacity(scores.trials.len());
    let mut labels = Vec::with_capacity(scores.trials.len());
    for t in &scores.trials {
        let label = t.label.ok_or_else(|| {
            Error::UnlabeledTrials(format!("trial {} {} has no label", t.enroll, t.test))
        })?;
        values.push(t.score);
        labels.push(label);
    }
    det_curve_from(&values, &labels)
}

pub fn det_curve_from(scores: &[f64], is_target: &[bool]) -> Result<DetCurve> {
    if scores.len() != is_target.len() {
        return Err(Error::InvalidLength(format!("{} scores but {} labels", scores.len(), is_target.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let n_target = is_target.iter().filter(|&&t| t).count();
    let n_nontarget = is_target.len() - n_target;
    if n_target == 0 || n_nontarget == 0 {
        return Err(Error::DegenerateScoreSet(format!(
            "need both classes, got {n_target} targets and {n_nontarget} nontargets"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut points = Vec::new();
    // running counts of trials strictly below the current threshold
    let (mut tgt_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        points.push(OperatingPoint {
            threshold,
            p_miss: tgt_below as f64 / n_target as f64,
            p_fa: (n_nontarget - non_below) as f64 / n_nontarget as f64,
        });
        while i < order.len() && scores[order[i]] == threshold {
            if is_target[order[i]] {
                tgt_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint { threshold: f64::INFINITY, p_miss: 1.0, p_fa: 0.0 });
    Ok(DetCurve { points, n_target, n_nontarget })
}

/// Equal error rate, linearly interpolated between the two operating points
/// that straddle the miss/false-alarm crossing.
pub fn eer(curve: &DetCurve) -> f64 {
    let pts = &curve.points;
    let Some(i) = pts.iter().position(|p| p.p_miss >= p.p_fa) else {
        return 0.0;
    };
    if i == 0 {
        return pts[0].p_miss.max(pts[0].p_fa).min(1.0);
    }
    let (a, b) = (pts[i - 1], pts[i]);
    let gap0 = a.p_fa - a.p_miss;
    let denom = gap0 - (b.p_fa - b.p_miss);
    let frac = if denom > 0.0 { gap0 / denom } else { 0.0 };
    (a.p_miss + frac * (b.p_miss - a.p_miss)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self { p_target: 0.01, c_miss: 1.0, c_fa: 1.0 }
    }
}

/// Normalized minimum detection cost over all operating points.
pub fn min_dcf(curve: &DetCurve, params: &DcfParams) -> Result<f64> {
    let DcfParams { p_target, c_miss, c_fa } = *params;
    if !(p_target > 0.0 && p_target < 1.0) || !(c_miss > 0.0) || !(c_fa > 0.0) {
        return Err(Error::InvalidConfig(format!("invalid DCF parameters {params:?}")));
    }
    let w_miss = c_miss * p_target;
    let w_fa = c_fa * (1.0 - p_target);
    let norm = w_miss.min(w_fa);
    let best = curve
        .points
        .iter()
        .map(|p| w_miss * p.p_miss + w_fa * p.p_fa)
        .fold(f64::INFINITY, f64::min);
    Ok(best / norm)
}

/// EER and minDCF at the default operating prior.
pub fn eer_and_min_dcf(scores: &ScoreSet) -> Result<(f64, f64)> {
    let curve = det_curve(scores)?;
    Ok((eer(&curve), min_dcf(&curve, &DcfParams::default())?))
}

/// One candidate in a retrieval ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub score: f64,
    pub relevant: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalQuery {
    pub target: String,
    pub candidates: Vec<Candidate>,
}

impl RetrievalQuery {
    /// Candidates by descending score, ties by ascending id.
    pub fn ranked(&self) -> Vec<&Candidate> {
        let mut r: Vec<&Candidate> = self.candidates.iter().collect();
        r.sort_by(|a, b| match b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal) {
            Ordering::Equal => a.id.cmp(&b.id),
            o => o,
        });
        r
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalRun {
    pub queries: Vec<RetrievalQuery>,
}

pub fn average_precision(query: &RetrievalQuery) -> Result<f64> {
    if let Some(c) = query.candidates.iter().find(|c| !c.score.is_finite()) {
        return Err(Error::NonFinite(format!("score {} for {}", c.score, c.id)));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, c) in query.ranked().into_iter().enumerate() {
        if c.relevant {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::UndefinedAp(query.target.clone()));
    }
    Ok(sum / hits as f64)
}

/// Per-target AP, in query order, and their mean.
pub fn mean_average_precision(run: &RetrievalRun) -> Result<(Vec<f64>, f64)> {
    if run.queries.is_empty() {
        return Err(Error::NoData("retrieval run has no targets".into()));
    }
    let aps = run.queries.iter().map(average_precision).collect::<Result<Vec<_>>>()?;
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    Ok((aps, map))
}
