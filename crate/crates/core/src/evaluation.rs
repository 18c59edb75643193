//! Provenance AP/AUC, depth error and sparsification curves.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{PinholeCamera, Vec3};
use crate::provenance::{empirical_provenance, sq_dist4, ProvenanceSource};
use crate::scene::DensityField;

/// Squared-distance thresholds, log-linear and strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSchedule {
    pub values: Vec<f64>,
}

impl ThresholdSchedule {
    pub const COUNT: usize = 500;
    pub const LOG_LO: f64 = -20.0;

    pub fn log_linear(count: usize, log_lo: f64, log_hi: f64) -> Self {
        let values = (0..count)
            .map(|i| {
                if i + 1 == count {
                    log_hi.exp()
                } else {
                    (log_lo + (log_hi - log_lo) * i as f64 / (count - 1) as f64).exp()
                }
            })
            .collect();
        Self { values }
    }

    pub fn lo(&self) -> f64 {
        self.values[0]
    }

    pub fn hi(&self) -> f64 {
        *self.values.last().expect("non-empty schedule")
    }
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        Self::log_linear(Self::COUNT, Self::LOG_LO, 0.0)
    }
}

/// Ground-truth and predicted 4-vectors at one point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSet {
    pub gt: Vec<[f64; 4]>,
    pub pred: Vec<[f64; 4]>,
}

fn nearest(from: &[[f64; 4]], to: &[[f64; 4]]) -> Vec<f64> {
    from.iter()
        .map(|a| to.iter().map(|b| sq_dist4(a, b)).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Coverage precision (ground truth within `delta` of some prediction) and
/// proximity recall (predictions within `delta` of some ground truth).
/// A point without predictions scores `(0, 0)`.
pub fn precision_recall_at(gt: &[[f64; 4]], pred: &[[f64; 4]], delta: f64) -> (f64, f64) {
    if gt.is_empty() || pred.is_empty() {
        return (0.0, 0.0);
    }
    let frac = |d: Vec<f64>| d.iter().filter(|&&v| v < delta).count() as f64 / d.len() as f64;
    (frac(nearest(gt, pred)), frac(nearest(pred, gt)))
}

/// Mean precision and recall per threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl PrCurve {
    /// `Σ_k [R(k) - R(k+1)] P(k)` over thresholds in decreasing order, with
    /// `R(N) = 0`.
    pub fn ap(&self) -> f64 {
        let n = self.thresholds.len();
        (0..n)
            .map(|k| {
                let i = n - 1 - k;
                let r_next = if i == 0 { 0.0 } else { self.recall[i - 1] };
                (self.recall[i] - r_next) * self.precision[i]
            })
            .sum()
    }

    /// Trapezoid area under precision over recall, starting from `(0, 1)`.
    pub fn auc(&self) -> f64 {
        let mut pts: Vec<(f64, f64)> = std::iter::once((0.0, 1.0))
            .chain(self.recall.iter().copied().zip(self.precision.iter().copied()))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts.windows(2)
            .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall\n");
        for i in 0..self.thresholds.len() {
            s.push_str(&format!(
                "{:e},{},{}\n",
                self.thresholds[i], self.precision[i], self.recall[i]
            ));
        }
        s
    }
}

pub fn pr_curve(points: &[PointSet], schedule: &ThresholdSchedule) -> PrCurve {
    let mins: Vec<(Vec<f64>, Vec<f64>)> = points
        .par_iter()
        .map(|p| {
            if p.gt.is_empty() || p.pred.is_empty() {
                (Vec::new(), Vec::new())
            } else {
                (nearest(&p.gt, &p.pred), nearest(&p.pred, &p.gt))
            }
        })
        .collect();
    let n = points.len().max(1) as f64;
    let mut precision = Vec::with_capacity(schedule.values.len());
    let mut recall = Vec::with_capacity(schedule.values.len());
    for &delta in &schedule.values {
        let mut p_sum = 0.0;
        let mut r_sum = 0.0;
        for (g, q) in &mins {
            if g.is_empty() {
                continue;
            }
            p_sum += g.iter().filter(|&&v| v < delta).count() as f64 / g.len() as f64;
            r_sum += q.iter().filter(|&&v| v < delta).count() as f64 / q.len() as f64;
        }
        precision.push(p_sum / n);
        recall.push(r_sum / n);
    }
    PrCurve {
        thresholds: schedule.values.clone(),
        precision,
        recall,
    }
}

/// `(AP, AUC)` of the mean precision-recall curve over `points`.
pub fn ap_auc(points: &[PointSet], schedule: &ThresholdSchedule) -> (f64, f64) {
    let c = pr_curve(points, schedule);
    (c.ap(), c.auc())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Cells per axis of the evaluation lattice over the bounds.
    pub lattice_res: usize,
    /// Predicted draws per point.
    pub n_pred: usize,
    /// Visibility filter on ground-truth tuples.
    pub gt_visibility: f64,
    /// Visibility filter on predicted tuples.
    pub pred_visibility: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lattice_res: 8,
            n_pred: 128,
            gt_visibility: 0.9,
            pred_visibility: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInfo {
    pub count: usize,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ap: f64,
    pub auc: f64,
    pub n_points: usize,
    pub schedule: ScheduleInfo,
    /// Thresholds apply to this distance.
    pub distance: String,
}

/// Lattice points with visible ground truth, paired with predictions from `source`.
pub fn provenance_point_sets<F: DensityField + ?Sized, S: ProvenanceSource + ?Sized>(
    source: &S,
    scene: &F,
    cams: &[PinholeCamera],
    config: &EvalConfig,
    seed: u64,
) -> Result<Vec<PointSet>> {
    let scale = source.distance_scale();
    let mut xs: Vec<Vec3> = Vec::new();
    let mut gts = Vec::new();
    for x in scene.bounds().lattice(config.lattice_res) {
        let set = empirical_provenance(scene, cams, &x)?;
        let gt: Vec<[f64; 4]> = set
            .nonzero()
            .filter(|s| s.visibility() >= config.gt_visibility)
            .map(|s| s.to_vec4(scale))
            .collect();
        if !gt.is_empty() {
            xs.push(x);
            gts.push(gt);
        }
    }
    let preds = source.sample_batch(&xs, config.n_pred, seed)?;
    Ok(gts
        .into_iter()
        .zip(preds)
        .map(|(gt, pred)| PointSet {
            gt,
            pred: pred
                .iter()
                .filter(|s| s.visibility() >= config.pred_visibility && !s.is_zero())
                .map(|s| s.to_vec4(scale))
                .collect(),
        })
        .collect())
}

pub fn evaluate_provenance<F: DensityField + ?Sized, S: ProvenanceSource + ?Sized>(
    source: &S,
    scene: &F,
    cams: &[PinholeCamera],
    config: &EvalConfig,
    seed: u64,
) -> Result<(MetricReport, PrCurve)> {
    let points = provenance_point_sets(source, scene, cams, config, seed)?;
    let schedule = ThresholdSchedule::default();
    let curve = pr_curve(&points, &schedule);
    Ok((
        MetricReport {
            ap: curve.ap(),
            auc: curve.auc(),
            n_points: points.len(),
            schedule: ScheduleInfo {
                count: schedule.values.len(),
                lo: schedule.lo(),
                hi: schedule.hi(),
            },
            distance: "squared_4d".into(),
        },
        curve,
    ))
}

pub fn mean_absolute_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sparsification {
    /// Mean remaining error after removing the `k` largest errors.
    pub oracle: Vec<f64>,
    /// Mean remaining error after removing the `k` most uncertain pixels.
    pub by_score: Vec<f64>,
    pub ause: f64,
}

fn removal_curve(errors: &[f64], order: &[usize]) -> Vec<f64> {
    let n = errors.len();
    let mut remaining: f64 = errors.iter().sum();
    let mut out = Vec::with_capacity(n);
    for (k, &i) in order.iter().enumerate() {
        out.push(remaining / (n - k) as f64);
        remaining -= errors[i];
    }
    out
}

/// Removal curves by error (oracle) and by score, and the mean gap between them.
pub fn sparsification_curve(errors: &[f64], scores: &[f64]) -> Sparsification {
    assert_eq!(errors.len(), scores.len(), "errors and scores differ in length");
    let mut by_err: Vec<usize> = (0..errors.len()).collect();
    by_err.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
    let mut by_score: Vec<usize> = (0..errors.len()).collect();
    by_score.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let oracle = removal_curve(errors, &by_err);
    let scored = removal_curve(errors, &by_score);
    let n = errors.len().max(1) as f64;
    let ause = scored.iter().zip(&oracle).map(|(b, a)| b - a).sum::<f64>() / n;
    Sparsification {
        oracle,
        by_score: scored,
        ause,
    }
}
