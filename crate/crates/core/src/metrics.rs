//! Pose error metrics: MPJPE, similarity-aligned MPJPE, PCK and AUC.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom;
use crate::skeleton::{Pose3D, JOINT_NAMES, NUM_JOINTS};

pub const PCK_THRESHOLD_MM: f64 = 150.0;
pub const AUC_STEPS: usize = 31;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("degenerate point set: singular values {0:?}")]
    Degenerate([f64; 3]),
    #[error("no poses to evaluate")]
    Empty,
    #[error("{preds} predictions for {gts} ground-truth poses")]
    CountMismatch { preds: usize, gts: usize },
}

/// Per-joint Euclidean errors after root-centering both poses.
pub fn joint_errors(pred: &Pose3D, gt: &Pose3D) -> [f64; NUM_JOINTS] {
    let (p, g) = (pred.root_centered(), gt.root_centered());
    std::array::from_fn(|j| geom::norm(geom::sub(p.0[j], g.0[j])))
}

pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> f64 {
    joint_errors(pred, gt).iter().sum::<f64>() / NUM_JOINTS as f64
}

fn to_vectors(p: &Pose3D) -> Vec<Vector3<f64>> {
    p.0.iter().map(|j| Vector3::new(j[0], j[1], j[2])).collect()
}

/// Similarity transform `s R pred + t` closest to `gt` in summed squared
/// distance, with `R` a proper rotation.
pub fn procrustes_align(pred: &Pose3D, gt: &Pose3D) -> Result<Pose3D, MetricsError> {
    let (x, y) = (to_vectors(pred), to_vectors(gt));
    let n = x.len() as f64;
    let mx = x.iter().sum::<Vector3<f64>>() / n;
    let my = y.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (xi, yi) in x.iter().zip(&y) {
        let (a, b) = (xi - mx, yi - my);
        cov += b * a.transpose();
        var_x += a.norm_squared();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let sv = svd.singular_values;
    let sorted = {
        let mut s = [sv[0], sv[1], sv[2]];
        s.sort_by(|a, b| b.total_cmp(a));
        s
    };
    // A similarity is only pinned down when the cross-covariance has rank
    // at least two.
    if var_x <= f64::EPSILON || sorted[1] <= 1e-12 * sorted[0].max(f64::MIN_POSITIVE) {
        return Err(MetricsError::Degenerate(sorted));
    }
    // Reflection fix: negate the direction of the smallest singular value.
    // nalgebra does not promise sorted singular values.
    let mut diag = Vector3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        let smallest = (0..3).min_by(|&a, &b| sv[a].total_cmp(&sv[b])).expect("three values");
        diag[smallest] = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&diag) * v_t;
    let trace: f64 = (0..3).map(|k| sv[k] * diag[k]).sum();
    let s = trace / var_x;
    let t = my - r * mx * s;
    let joints = std::array::from_fn(|j| {
        let p = r * x[j] * s + t;
        [p[0], p[1], p[2]]
    });
    Ok(Pose3D(joints))
}

pub fn pa_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64, MetricsError> {
    Ok(mpjpe(&procrustes_align(pred, gt)?, gt))
}

/// `0, 5, ..., 150` mm.
pub fn default_thresholds() -> Vec<f64> {
    (0..AUC_STEPS)
        .map(|k| PCK_THRESHOLD_MM * k as f64 / (AUC_STEPS - 1) as f64)
        .collect()
}

/// Fraction of errors strictly below `threshold`.
pub fn pck(errors: &[f64], threshold: f64) -> f64 {
    errors.iter().filter(|&&e| e < threshold).count() as f64 / errors.len() as f64
}

/// PCK at 150mm and the mean PCK over `thresholds`, pooled over every
/// (sample, joint) error.
pub fn pck_auc(errors: &[f64], thresholds: &[f64]) -> Result<(f64, f64), MetricsError> {
    if errors.is_empty() || thresholds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let auc = thresholds.iter().map(|&t| pck(errors, t)).sum::<f64>() / thresholds.len() as f64;
    Ok((pck(errors, PCK_THRESHOLD_MM), auc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: String,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pck150: f64,
    pub auc: f64,
    pub per_joint: [f64; NUM_JOINTS],
}

impl EvalReport {
    pub fn from_pairs(
        condition: impl Into<String>,
        preds: &[Pose3D],
        gts: &[Pose3D],
    ) -> Result<Self, MetricsError> {
        if preds.len() != gts.len() {
            return Err(MetricsError::CountMismatch {
                preds: preds.len(),
                gts: gts.len(),
            });
        }
        if preds.is_empty() {
            return Err(MetricsError::Empty);
        }
        let n = preds.len() as f64;
        let mut per_joint = [0.0; NUM_JOINTS];
        let mut pooled = Vec::with_capacity(preds.len() * NUM_JOINTS);
        let mut pa = 0.0;
        for (p, g) in preds.iter().zip(gts) {
            let e = joint_errors(p, g);
            for j in 0..NUM_JOINTS {
                per_joint[j] += e[j] / n;
            }
            pooled.extend_from_slice(&e);
            // A fully collapsed prediction has no defined alignment; fall
            // back to its unaligned error.
            pa += pa_mpjpe(p, g).unwrap_or_else(|_| mpjpe(p, g)) / n;
        }
        let (pck150, auc) = pck_auc(&pooled, &default_thresholds())?;
        Ok(Self {
            condition: condition.into(),
            mpjpe: per_joint.iter().sum::<f64>() / NUM_JOINTS as f64,
            pa_mpjpe: pa,
            pck150,
            auc,
            per_joint,
        })
    }

    /// Field-wise mean of reports for the same condition.
    pub fn mean(reports: &[EvalReport]) -> Result<Self, MetricsError> {
        let first = reports.first().ok_or(MetricsError::Empty)?;
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            condition: first.condition.clone(),
            mpjpe: avg(&|r| r.mpjpe),
            pa_mpjpe: avg(&|r| r.pa_mpjpe),
            pck150: avg(&|r| r.pck150),
            auc: avg(&|r| r.auc),
            per_joint: std::array::from_fn(|j| avg(&|r| r.per_joint[j])),
        })
    }
}

/// One row per report: condition, headline metrics, then per-joint errors.
pub fn write_reports_csv<W: Write>(reports: &[EvalReport], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["condition", "mpjpe", "pa_mpjpe", "pck150", "auc"];
    header.extend(JOINT_NAMES);
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![
            r.condition.clone(),
            format!("{:.6}", r.mpjpe),
            format!("{:.6}", r.pa_mpjpe),
            format!("{:.6}", r.pck150),
            format!("{:.6}", r.auc),
        ];
        row.extend(r.per_joint.iter().map(|e| format!("{e:.6}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn format_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.condition.len()).max().unwrap_or(0).max(9);
    let mut s = format!(
        "{:<width$}  {:>8}  {:>8}  {:>7}  {:>7}\n",
        "condition", "MPJPE", "PA-MPJPE", "PCK150", "AUC"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<width$}  {:>8.2}  {:>8.2}  {:>7.3}  {:>7.3}",
            r.condition, r.mpjpe, r.pa_mpjpe, r.pck150, r.auc
        );
    }
    s
}
