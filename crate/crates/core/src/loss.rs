//! Training objectives: per-stage map losses, the 3D pose loss, the
//! complemented-pose loss and their weighted sum.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::grad::{GradError, Tensor, Var, BCE_CLAMP};
use crate::mapcodec::MapSet;
use crate::skeleton::{Pose3D, NUM_LIMBS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Confidence-map weight.
    pub lambda1: f64,
    /// 2D orientation-map weight.
    pub lambda2: f64,
    /// 3D orientation-map weight.
    pub lambda3: f64,
    pub stages: usize,
    /// Include the initial-pose L1 term; off for the map-only ablation.
    pub pose_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 1.0,
            lambda3: 1.0,
            stages: 2,
            pose_loss: true,
        }
    }
}

/// One stage's prediction on a tape: `conf` `[16, HW]` after the sigmoid,
/// `orient2d` `[16, 2, HW]`, `orient3d` `[16, 3, HW]`.
#[derive(Clone, Copy, Debug)]
pub struct MapVars<'t> {
    pub conf: Var<'t>,
    pub orient2d: Var<'t>,
    pub orient3d: Var<'t>,
}

impl MapVars<'_> {
    /// Copies the values out into a [`MapSet`] of the given size.
    pub fn to_maps(&self, width: usize, height: usize) -> MapSet {
        let narrow = |v: &Var<'_>| v.value().data().iter().map(|&x| x as f32).collect();
        MapSet {
            width,
            height,
            conf: narrow(&self.conf),
            orient2d: narrow(&self.orient2d),
            orient3d: narrow(&self.orient3d),
        }
    }
}

/// Ground-truth maps as tensors shaped like [`MapVars`].
#[derive(Clone, Debug)]
pub struct MapTargets {
    pub conf: Tensor,
    pub orient2d: Tensor,
    pub orient3d: Tensor,
}

impl MapTargets {
    pub fn from_maps(maps: &MapSet) -> Self {
        let p = maps.plane();
        let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect();
        Self {
            conf: Tensor::new(&[NUM_LIMBS, p], widen(&maps.conf)).expect("conf shape"),
            orient2d: Tensor::new(&[NUM_LIMBS, 2, p], widen(&maps.orient2d)).expect("o2d shape"),
            orient3d: Tensor::new(&[NUM_LIMBS, 3, p], widen(&maps.orient3d)).expect("o3d shape"),
        }
    }
}

/// Targets for one sample. Without a 3D pose the 3D map, pose and
/// complemented-pose terms are left out.
#[derive(Clone, Debug)]
pub struct Supervision {
    pub maps: MapTargets,
    pub pose: Option<Pose3D>,
}

impl Supervision {
    pub fn has_3d(&self) -> bool {
        self.pose.is_some()
    }
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<(), GradError> {
    if a != b {
        return Err(GradError::shape(op, &[a], &[b]));
    }
    Ok(())
}

/// Mean binary cross-entropy with predictions clamped to
/// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub fn bce_map_loss(pred: &[f64], gt: &[f64]) -> Result<f64, GradError> {
    check_len("bce_map_loss", pred.len(), gt.len())?;
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Mean squared difference over every element.
pub fn mse_map_loss(pred: &[f64], gt: &[f64]) -> Result<f64, GradError> {
    check_len("mse_map_loss", pred.len(), gt.len())?;
    Ok(pred.iter().zip(gt).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / pred.len() as f64)
}

/// Mean absolute coordinate difference over all joints.
pub fn l1_pose_loss(pred: &Pose3D, gt: &Pose3D) -> f64 {
    let (p, g) = (pred.flat(), gt.flat());
    p.iter().zip(&g).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64
}

pub fn mse_on_tape<'t>(pred: Var<'t>, gt: &Tensor) -> Result<Var<'t>, GradError> {
    Ok(pred.sub(pred.tape().constant(gt.clone()))?.square().mean())
}

/// `pred` is `[17, 3]`.
pub fn l1_on_tape<'t>(pred: Var<'t>, gt: &Pose3D) -> Result<Var<'t>, GradError> {
    let gt = Tensor::new(&[gt.0.len(), 3], gt.flat())?;
    Ok(pred.sub(pred.tape().constant(gt))?.abs().mean())
}

/// A named loss value; `stage` is set for per-stage map terms.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossTerm {
    pub stage: Option<usize>,
    pub term: &'static str,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub terms: Vec<LossTerm>,
}

impl LossBreakdown {
    fn push(&mut self, stage: Option<usize>, term: &'static str, v: Var<'_>) {
        self.terms.push(LossTerm {
            stage,
            term,
            value: v.value().item(),
        });
    }

    pub fn get(&self, stage: Option<usize>, term: &str) -> Option<f64> {
        self.terms
            .iter()
            .find(|t| t.stage == stage && t.term == term)
            .map(|t| t.value)
    }

    pub fn total(&self) -> f64 {
        self.get(None, "total").unwrap_or(0.0)
    }

    /// Adds another breakdown term by term; terms missing here are appended.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        for t in &other.terms {
            match self
                .terms
                .iter_mut()
                .find(|s| s.stage == t.stage && s.term == t.term)
            {
                Some(s) => s.value += t.value,
                None => self.terms.push(t.clone()),
            }
        }
    }

    pub fn scaled(mut self, k: f64) -> Self {
        self.terms.iter_mut().for_each(|t| t.value *= k);
        self
    }

    /// Writes `step,epoch,stage,term,value` rows; the stage column is empty
    /// for pose terms and the total.
    pub fn write_csv<W: Write>(
        &self,
        out: &mut csv::Writer<W>,
        step: usize,
        epoch: usize,
    ) -> csv::Result<()> {
        for t in &self.terms {
            let stage = t.stage.map(|s| s.to_string()).unwrap_or_default();
            out.write_record([
                step.to_string(),
                epoch.to_string(),
                stage,
                t.term.to_string(),
                format!("{:.9}", t.value),
            ])?;
        }
        Ok(())
    }
}

pub const CSV_HEADER: [&str; 5] = ["step", "epoch", "stage", "term", "value"];

/// The combined objective for one sample:
/// `sum_t (l1 L_cm + l2 L_om2d + [3d] l3 L_om3d) + [3d] (L_p3d + L_cp3d)`.
///
/// `init_pose` and `comp_pose` are `[17, 3]`; either may be absent (no pose
/// head trained yet, or the complement network not in play). Without 3D
/// supervision the 3D terms are never built, so they carry no gradient.
pub fn total_loss<'t>(
    stage_preds: &[MapVars<'t>],
    init_pose: Option<Var<'t>>,
    comp_pose: Option<Var<'t>>,
    sup: &Supervision,
    cfg: &LossConfig,
) -> Result<(Var<'t>, LossBreakdown), GradError> {
    if stage_preds.len() != cfg.stages || stage_preds.is_empty() {
        return Err(GradError::InvalidArgument {
            op: "total_loss",
            msg: format!("{} stage predictions for {} stages", stage_preds.len(), cfg.stages),
        });
    }
    let mut parts = Vec::new();
    let mut breakdown = LossBreakdown::default();
    for (t, pred) in stage_preds.iter().enumerate() {
        let cm = pred.conf.bce(&sup.maps.conf)?;
        let om2d = mse_on_tape(pred.orient2d, &sup.maps.orient2d)?;
        breakdown.push(Some(t), "cm", cm);
        breakdown.push(Some(t), "om2d", om2d);
        parts.push(cm.scale(cfg.lambda1));
        parts.push(om2d.scale(cfg.lambda2));
        if sup.has_3d() {
            let om3d = mse_on_tape(pred.orient3d, &sup.maps.orient3d)?;
            breakdown.push(Some(t), "om3d", om3d);
            parts.push(om3d.scale(cfg.lambda3));
        }
    }
    if let Some(gt) = &sup.pose {
        if let (Some(p), true) = (init_pose, cfg.pose_loss) {
            let l = l1_on_tape(p, gt)?;
            breakdown.push(None, "p3d", l);
            parts.push(l);
        }
        if let Some(p) = comp_pose {
            let l = l1_on_tape(p, gt)?;
            breakdown.push(None, "cp3d", l);
            parts.push(l);
        }
    }
    let mut total = parts[0];
    for p in &parts[1..] {
        total = total.add(*p)?;
    }
    breakdown.push(None, "total", total);
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        let v = bce_map_loss(&[0.9, 0.1, 0.8, 0.2], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        let expect = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((v - expect).abs() < 1e-15);
        assert!((v - 0.1643).abs() < 1e-4);
        let half = bce_map_loss(&[0.5; 8], &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-15);
        let perfect = bce_map_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((0.0..1.2e-7).contains(&perfect));
    }

    #[test]
    fn mse_and_l1_examples() {
        let gt = [0.3, -0.2, 0.0, 1.0];
        assert_eq!(mse_map_loss(&gt, &gt).unwrap(), 0.0);
        let shifted: Vec<f64> = gt.iter().map(|v| v + 0.1).collect();
        assert!((mse_map_loss(&shifted, &gt).unwrap() - 0.01).abs() < 1e-12);
        assert!(mse_map_loss(&gt, &gt[..3]).is_err());

        let pose = Pose3D([[1.0, 2.0, 3.0]; 17]);
        assert_eq!(l1_pose_loss(&pose, &pose), 0.0);
        let moved = Pose3D(pose.0.map(|j| [j[0] + 1.0, j[1], j[2]]));
        assert!((l1_pose_loss(&moved, &pose) - 1.0 / 3.0).abs() < 1e-15);
    }
}
