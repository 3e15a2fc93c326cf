//! From maps to a pose: confidence-weighted voting over each limb's 3D
//! orientation map, normalisation, a per-limb confidence score, and forward
//! kinematics.
//!
//! Every step exists twice: on plain slices for inference and on the
//! [`grad`](crate::grad) tape for training. Both compute the same numbers.

use thiserror::Error;

use crate::geom::{self, Vec3};
use crate::grad::{GradError, Tensor, Var};
use crate::mapcodec::MapSet;
use crate::skeleton::{
    fk_integrate, LimbLengths, LimbTopology, OrientationSet, Pose3D, SkeletonError, NUM_JOINTS,
    NUM_LIMBS,
};

/// Votes with norm at or below this are treated as missing limbs.
pub const ORIENT_EPS: f64 = 1e-6;
/// Keeps the confidence score finite on all-zero maps.
pub const SCORE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("map size mismatch: confidence has {conf} pixels, orientation expects {orient}")]
    DimMismatch { conf: usize, orient: usize },
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Mean over all pixels of `conf(p) * orient3d(p)`; `orient3d` holds three
/// planes (x, y, z) of `conf.len()` pixels each.
pub fn vote<T: Copy + Into<f64>>(conf: &[T], orient3d: &[T]) -> Result<Vec3, ExtractError> {
    let n = conf.len();
    if orient3d.len() != 3 * n || n == 0 {
        return Err(ExtractError::DimMismatch {
            conf: n,
            orient: orient3d.len() / 3,
        });
    }
    let mut out = [0.0; 3];
    for (k, plane) in orient3d.chunks_exact(n).enumerate() {
        out[k] = conf
            .iter()
            .zip(plane)
            .map(|(&c, &o)| c.into() * o.into())
            .sum::<f64>()
            / n as f64;
    }
    Ok(out)
}

/// `raw / |raw|`, or zero when `|raw| <= eps`.
pub fn normalize_orientation(raw: Vec3, eps: f64) -> Vec3 {
    let n = geom::norm(raw);
    if n > eps {
        geom::scale(raw, 1.0 / n)
    } else {
        [0.0; 3]
    }
}

/// `sum(c^2) / (sum(c) + eps)`: 1 on a binary region of any size, 0 on an
/// empty map, and the confidence level itself on a flat region.
pub fn confidence_score<T: Copy + Into<f64>>(conf: &[T]) -> f64 {
    let (sq, s) = conf.iter().fold((0.0, 0.0), |(sq, s), &c| {
        let c: f64 = c.into();
        (sq + c * c, s + c)
    });
    sq / (s + SCORE_EPS)
}

/// Per-limb readout of a map set and the pose it implies.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialEstimate {
    pub orients: OrientationSet,
    pub raw_votes: [Vec3; NUM_LIMBS],
    pub scores: [f64; NUM_LIMBS],
    pub pose: Pose3D,
}

pub fn decode_pose(
    maps: &MapSet,
    lengths: &LimbLengths,
    topo: &LimbTopology,
) -> Result<InitialEstimate, ExtractError> {
    let mut raw_votes = [[0.0; 3]; NUM_LIMBS];
    let mut orients = [[0.0; 3]; NUM_LIMBS];
    let mut scores = [0.0; NUM_LIMBS];
    for limb in 0..NUM_LIMBS {
        raw_votes[limb] = vote(maps.conf(limb), maps.orient3d(limb))?;
        orients[limb] = normalize_orientation(raw_votes[limb], ORIENT_EPS);
        scores[limb] = confidence_score(maps.conf(limb));
    }
    let orients = OrientationSet(orients);
    let pose = fk_integrate(&orients, lengths, topo)?;
    Ok(InitialEstimate {
        orients,
        raw_votes,
        scores,
        pose,
    })
}

/// [`InitialEstimate`] on a tape: `raw` and `orients` are `[16, 3]`,
/// `scores` is `[16]`, `pose` is `[17, 3]`.
#[derive(Clone, Copy, Debug)]
pub struct TapeEstimate<'t> {
    pub raw: Var<'t>,
    pub orients: Var<'t>,
    pub scores: Var<'t>,
    pub pose: Var<'t>,
}

impl TapeEstimate<'_> {
    pub fn to_estimate(&self) -> InitialEstimate {
        let rows = |v: &Tensor| -> [Vec3; NUM_LIMBS] {
            std::array::from_fn(|i| [v.data()[3 * i], v.data()[3 * i + 1], v.data()[3 * i + 2]])
        };
        InitialEstimate {
            orients: OrientationSet(rows(&self.orients.value())),
            raw_votes: rows(&self.raw.value()),
            scores: self.scores.value().data().try_into().expect("16 scores"),
            pose: Pose3D::from_flat(self.pose.value().data()),
        }
    }
}

/// Forward kinematics as a linear map: `pose = A (L * v)` with the
/// ancestor matrix `A`. `orients` is `[16, 3]`.
pub fn fk_on_tape<'t>(
    orients: Var<'t>,
    lengths: &LimbLengths,
    topo: &LimbTopology,
) -> Result<Var<'t>, GradError> {
    let tape = orients.tape();
    let scaled = Tensor::new(
        &[NUM_LIMBS, 3],
        lengths.0.iter().flat_map(|&l| [l; 3]).collect(),
    )?;
    let ancestors = Tensor::new(
        &[NUM_JOINTS, NUM_LIMBS],
        topo.ancestor_matrix().into_iter().flatten().collect(),
    )?;
    let limb_vectors = orients.mul(tape.constant(scaled))?;
    tape.constant(ancestors).matmul(limb_vectors)
}

/// Tape version of [`decode_pose`] on last-stage maps: `conf` is
/// `[16, HW]`, `orient3d` is `[16, 3, HW]`.
pub fn decode_on_tape<'t>(
    conf: Var<'t>,
    orient3d: Var<'t>,
    lengths: &LimbLengths,
    topo: &LimbTopology,
) -> Result<TapeEstimate<'t>, GradError> {
    let cs = conf.shape();
    let os = orient3d.shape();
    if cs.len() != 2 || cs[0] != NUM_LIMBS || os != [NUM_LIMBS, 3, cs[1]] {
        return Err(GradError::shape("decode_on_tape", &cs, &os));
    }
    let plane = cs[1];
    let weights = conf.reshape(&[NUM_LIMBS, 1, plane])?.broadcast_to(&os)?;
    let raw = weights.mul(orient3d)?.sum_last().scale(1.0 / plane as f64);
    let orients = raw.normalize_rows(ORIENT_EPS)?;
    let scores = conf
        .square()
        .sum_last()
        .div(conf.sum_last().add_scalar(SCORE_EPS))?;
    let pose = fk_on_tape(orients, lengths, topo)?;
    Ok(TapeEstimate {
        raw,
        orients,
        scores,
        pose,
    })
}
