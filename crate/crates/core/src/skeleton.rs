//! Joint layout, limb lengths and forward kinematics.
//!
//! The skeleton is the 17-joint Human3.6M layout rooted at the pelvis. A limb
//! is a (parent, child) joint pair; limbs are stored root-outward so a single
//! forward sweep places every joint.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Vec3};

pub const NUM_JOINTS: usize = 17;
pub const NUM_LIMBS: usize = 16;
pub const ROOT: usize = 0;

/// Norm below which a limb is considered degenerate, in millimetres.
pub const DEGENERATE_LIMB_MM: f64 = 1e-9;

/// Tolerance on the unit norm of orientation vectors.
pub const UNIT_TOLERANCE: f64 = 1e-6;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
];

/// (parent, child) joint indices, root-outward.
pub const LIMBS: [(usize, usize); NUM_LIMBS] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (0, 4),
    (4, 5),
    (5, 6),
    (0, 7),
    (7, 8),
    (8, 9),
    (9, 10),
    (8, 11),
    (11, 12),
    (12, 13),
    (8, 14),
    (14, 15),
    (15, 16),
];

/// Adult limb lengths in mm, in [`LIMBS`] order.
pub const DEFAULT_LENGTHS_MM: [f64; NUM_LIMBS] = [
    132.0, 442.0, 454.0, 132.0, 442.0, 454.0, 233.0, 257.0, 121.0, 115.0, 151.0, 278.0, 251.0,
    151.0, 278.0, 251.0,
];

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("expected {expected} {what}, got {got}")]
    Count {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("limb {limb}: {msg}")]
    Topology { limb: usize, msg: String },
    #[error("limb {limb}: length {length} is not positive and finite")]
    BadLength { limb: usize, length: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("limb {limb}: orientation norm {norm} is neither 1 nor 0")]
    NotUnit { limb: usize, norm: f64 },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Tree of joints connected by limbs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimbTopology {
    pub joints: Vec<String>,
    pub limbs: Vec<(usize, usize)>,
    pub root: usize,
}

impl LimbTopology {
    pub fn canonical() -> Self {
        Self {
            joints: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            limbs: LIMBS.to_vec(),
            root: ROOT,
        }
    }

    /// Checks joint/limb counts, the tree property and root-outward order.
    pub fn validate(&self) -> Result<(), SkeletonError> {
        if self.joints.len() != NUM_JOINTS {
            return Err(SkeletonError::Count {
                what: "joints",
                expected: NUM_JOINTS,
                got: self.joints.len(),
            });
        }
        if self.limbs.len() != NUM_LIMBS {
            return Err(SkeletonError::Count {
                what: "limbs",
                expected: NUM_LIMBS,
                got: self.limbs.len(),
            });
        }
        let mut placed = [false; NUM_JOINTS];
        if self.root >= NUM_JOINTS {
            return Err(SkeletonError::Topology {
                limb: 0,
                msg: format!("root {} out of range", self.root),
            });
        }
        placed[self.root] = true;
        for (i, &(p, c)) in self.limbs.iter().enumerate() {
            let err = |msg: String| SkeletonError::Topology { limb: i, msg };
            if p >= NUM_JOINTS || c >= NUM_JOINTS {
                return Err(err(format!("joint index out of range in ({p}, {c})")));
            }
            if !placed[p] {
                return Err(err(format!("parent {p} is not placed by an earlier limb")));
            }
            if placed[c] {
                return Err(err(format!("child {c} already has a parent")));
            }
            placed[c] = true;
        }
        Ok(())
    }

    pub fn parent_limb_of(&self, joint: usize) -> Option<usize> {
        self.limbs.iter().position(|&(_, c)| c == joint)
    }

    /// Limb indices on the path from the root to `joint`, root first.
    pub fn limb_path(&self, joint: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut j = joint;
        while let Some(limb) = self.parent_limb_of(j) {
            path.push(limb);
            j = self.limbs[limb].0;
        }
        path.reverse();
        path
    }

    /// `A[j][i] = 1` iff limb `i` lies on the root path of joint `j`; a pose
    /// is then `A * (L * v)`.
    pub fn ancestor_matrix(&self) -> Vec<[f64; NUM_LIMBS]> {
        (0..NUM_JOINTS)
            .map(|j| {
                let mut row = [0.0; NUM_LIMBS];
                for limb in self.limb_path(j) {
                    row[limb] = 1.0;
                }
                row
            })
            .collect()
    }

    /// Joint permutation swapping left and right body sides.
    pub fn mirror_joints(&self) -> [usize; NUM_JOINTS] {
        let mut perm = [0; NUM_JOINTS];
        for (j, name) in self.joints.iter().enumerate() {
            let twin = if let Some(rest) = name.strip_prefix("l_") {
                format!("r_{rest}")
            } else if let Some(rest) = name.strip_prefix("r_") {
                format!("l_{rest}")
            } else {
                name.clone()
            };
            perm[j] = self.joints.iter().position(|n| *n == twin).unwrap_or(j);
        }
        perm
    }

    /// Limb permutation induced by [`Self::mirror_joints`].
    pub fn mirror_limbs(&self) -> [usize; NUM_LIMBS] {
        let joints = self.mirror_joints();
        let mut perm = [0; NUM_LIMBS];
        for (i, &(p, c)) in self.limbs.iter().enumerate() {
            let twin = (joints[p], joints[c]);
            perm[i] = self.limbs.iter().position(|&l| l == twin).unwrap_or(i);
        }
        perm
    }
}

/// Fixed limb lengths in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimbLengths(pub [f64; NUM_LIMBS]);

impl Default for LimbLengths {
    fn default() -> Self {
        Self(DEFAULT_LENGTHS_MM)
    }
}

impl LimbLengths {
    pub fn new(lengths: [f64; NUM_LIMBS]) -> Result<Self, SkeletonError> {
        let out = Self(lengths);
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), SkeletonError> {
        for (limb, &length) in self.0.iter().enumerate() {
            if !(length.is_finite() && length > 0.0) {
                return Err(SkeletonError::BadLength { limb, length });
            }
        }
        Ok(())
    }
}

/// 17 joints in camera-space millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose3D(pub [Vec3; NUM_JOINTS]);

impl Pose3D {
    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    /// Translates so the root joint sits at the origin.
    pub fn root_centered(&self) -> Self {
        let root = self.0[ROOT];
        Self(self.0.map(|j| geom::sub(j, root)))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    pub fn from_flat(data: &[f64]) -> Self {
        let mut joints = [[0.0; 3]; NUM_JOINTS];
        for (j, chunk) in joints.iter_mut().zip(data.chunks_exact(3)) {
            j.copy_from_slice(chunk);
        }
        Self(joints)
    }
}

/// 17 joints in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2D(pub [[f64; 2]; NUM_JOINTS]);

impl Pose2D {
    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        Self(self.0.map(f))
    }
}

/// One direction per limb, parent to child; the zero vector marks a limb
/// with no usable estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationSet(pub [Vec3; NUM_LIMBS]);

impl OrientationSet {
    pub fn validate(&self) -> Result<(), SkeletonError> {
        for (limb, v) in self.0.iter().enumerate() {
            if !v.iter().all(|x| x.is_finite()) {
                return Err(SkeletonError::NonFinite("orientation"));
            }
            let norm = geom::norm(*v);
            if *v != [0.0; 3] && (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(SkeletonError::NotUnit { limb, norm });
            }
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    pub fn from_flat(data: &[f64]) -> Self {
        let mut vs = [[0.0; 3]; NUM_LIMBS];
        for (v, chunk) in vs.iter_mut().zip(data.chunks_exact(3)) {
            v.copy_from_slice(chunk);
        }
        Self(vs)
    }
}

/// Places the root at the origin and every child at `parent + L_i * v_i`,
/// sweeping limbs root-outward. A zero orientation puts the child on its
/// parent.
pub fn fk_integrate(
    orients: &OrientationSet,
    lengths: &LimbLengths,
    topo: &LimbTopology,
) -> Result<Pose3D, SkeletonError> {
    if !orients.0.iter().flatten().all(|v| v.is_finite()) {
        return Err(SkeletonError::NonFinite("orientations"));
    }
    if !lengths.0.iter().all(|v| v.is_finite()) {
        return Err(SkeletonError::NonFinite("limb lengths"));
    }
    let mut joints = [[0.0; 3]; NUM_JOINTS];
    for (i, &(parent, child)) in topo.limbs.iter().enumerate() {
        joints[child] = geom::add(joints[parent], geom::scale(orients.0[i], lengths.0[i]));
    }
    Ok(Pose3D(joints))
}

/// Per-limb directions and lengths measured from a pose.
#[derive(Clone, Debug, PartialEq)]
pub struct LimbDecomposition {
    pub orients: OrientationSet,
    /// Raw lengths in mm; zero for degenerate limbs.
    pub lengths: [f64; NUM_LIMBS],
    /// Limbs shorter than [`DEGENERATE_LIMB_MM`].
    pub degenerate: Vec<usize>,
}

impl LimbDecomposition {
    /// The lengths as a validated [`LimbLengths`]; fails on degenerate limbs.
    pub fn limb_lengths(&self) -> Result<LimbLengths, SkeletonError> {
        LimbLengths::new(self.lengths)
    }
}

/// Inverse of [`fk_integrate`]: unit directions and lengths of each limb.
pub fn orientations_from_pose(
    pose: &Pose3D,
    topo: &LimbTopology,
) -> Result<LimbDecomposition, SkeletonError> {
    if !pose.is_finite() {
        return Err(SkeletonError::NonFinite("pose"));
    }
    let mut orients = [[0.0; 3]; NUM_LIMBS];
    let mut lengths = [0.0; NUM_LIMBS];
    let mut degenerate = Vec::new();
    for (i, &(parent, child)) in topo.limbs.iter().enumerate() {
        let d = geom::sub(pose.0[child], pose.0[parent]);
        let n = geom::norm(d);
        if n < DEGENERATE_LIMB_MM {
            degenerate.push(i);
        } else {
            orients[i] = geom::scale(d, 1.0 / n);
            lengths[i] = n;
        }
    }
    Ok(LimbDecomposition {
        orients: OrientationSet(orients),
        lengths,
        degenerate,
    })
}

/// Human-readable skeleton description: joint names, limbs, lengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonConfig {
    pub joints: Vec<String>,
    pub limbs: Vec<(usize, usize)>,
    pub root: usize,
    pub lengths_mm: Vec<f64>,
}

impl Default for SkeletonConfig {
    fn default() -> Self {
        let topo = LimbTopology::canonical();
        Self {
            joints: topo.joints,
            limbs: topo.limbs,
            root: topo.root,
            lengths_mm: DEFAULT_LENGTHS_MM.to_vec(),
        }
    }
}

impl SkeletonConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("skeleton config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, SkeletonError> {
        toml::from_str(text).map_err(|e| SkeletonError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SkeletonError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn topology(&self) -> Result<LimbTopology, SkeletonError> {
        let topo = LimbTopology {
            joints: self.joints.clone(),
            limbs: self.limbs.clone(),
            root: self.root,
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn lengths(&self) -> Result<LimbLengths, SkeletonError> {
        let lengths: [f64; NUM_LIMBS] =
            self.lengths_mm
                .as_slice()
                .try_into()
                .map_err(|_| SkeletonError::Count {
                    what: "limb lengths",
                    expected: NUM_LIMBS,
                    got: self.lengths_mm.len(),
                })?;
        LimbLengths::new(lengths)
    }
}
