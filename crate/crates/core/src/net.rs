//! The map-predicting network and the pose-complementation MLP.
//!
//! The FCNN is a small multi-stage design: a shared convolutional backbone
//! and one head per stage. Later stages see the backbone features together
//! with the previous stage's 96-channel prediction. Output channels are
//! branch-major: 16 confidence channels (through a sigmoid), then 32 for 2D
//! orientation, then 48 for 3D orientation, limb-major within each branch.
//!
//! The complement network maps a 200-value summary of the initial estimate
//! (scores, orientations, masked pairwise correlations) to one correction
//! vector per limb.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::extract::{fk_on_tape, InitialEstimate};
use crate::grad::{BoundParams, GradError, ParamSet, Tape, Tensor, Var};
use crate::loss::MapVars;
use crate::mapcodec::NUM_CHANNELS;
use crate::skeleton::{
    fk_integrate, LimbLengths, LimbTopology, OrientationSet, Pose3D, SkeletonError, NUM_LIMBS,
};

/// Row-normalisation threshold of the orientation update.
pub const APPLY_EPS: f64 = 1e-6;
pub const PC_INPUT: usize = NUM_LIMBS + 3 * NUM_LIMBS + NUM_LIMBS * (NUM_LIMBS + 1) / 2;
pub const PC_HIDDEN: usize = 512;
/// Scale applied to the He init of each stage's output layer so training
/// starts near conf 0.5 and zero orientation.
const OUTPUT_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FcnnConfig {
    pub stages: usize,
    /// Square input side in pixels.
    pub image_size: usize,
    /// Output channels of each 3x3 backbone convolution.
    pub backbone_widths: Vec<usize>,
    /// Stride of each backbone convolution; their product is the map stride.
    pub backbone_strides: Vec<usize>,
    pub head_width: usize,
}

impl Default for FcnnConfig {
    fn default() -> Self {
        Self {
            stages: 2,
            image_size: 64,
            backbone_widths: vec![12, 16, 24, 24],
            backbone_strides: vec![2, 1, 2, 1],
            head_width: 32,
        }
    }
}

impl FcnnConfig {
    pub fn stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    pub fn map_size(&self) -> usize {
        self.image_size / self.stride()
    }

    pub fn validate(&self) -> Result<(), GradError> {
        let bad = |msg: String| Err(GradError::InvalidArgument { op: "fcnn config", msg });
        if self.stages == 0 {
            return bad("at least one stage is required".into());
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.len() != self.backbone_strides.len() {
            return bad("backbone widths and strides must be non-empty and of equal length".into());
        }
        if self.backbone_strides.iter().any(|&s| s == 0) || self.image_size % self.stride() != 0 {
            return bad(format!(
                "image size {} is not divisible by stride {}",
                self.image_size,
                self.stride()
            ));
        }
        if self.head_width == 0 || self.backbone_widths.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }

    fn feature_width(&self) -> usize {
        *self.backbone_widths.last().expect("validated")
    }

    /// `(name, in, out, kernel)` of every stage-head convolution.
    fn head_layers(&self, stage: usize) -> [(String, usize, usize, usize); 3] {
        let (f, h) = (self.feature_width(), self.head_width);
        let name = |j: usize| format!("s{stage}.c{j}");
        if stage == 0 {
            [(name(0), f, h, 3), (name(1), h, h, 3), (name(2), h, NUM_CHANNELS, 1)]
        } else {
            [
                (name(0), f + NUM_CHANNELS, h, 1),
                (name(1), h, h, 3),
                (name(2), h, NUM_CHANNELS, 1),
            ]
        }
    }
}

/// Planar `[3, H, W]` tensor of an RGB image scaled to `[0, 1]`.
pub fn image_tensor(img: &image::RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * w * h + y as usize * w + x as usize] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("image tensor shape")
}

/// He-initialised FCNN parameters with zero biases.
pub fn fcnn_init(cfg: &FcnnConfig, rng: &mut impl Rng) -> Result<ParamSet, GradError> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    let mut input = 3;
    for (i, &w) in cfg.backbone_widths.iter().enumerate() {
        params.insert_he(&format!("bb{i}.w"), &[w, input, 3, 3], input * 9, rng);
        params.insert(format!("bb{i}.b"), Tensor::zeros(&[w]));
        input = w;
    }
    for stage in 0..cfg.stages {
        for (j, (name, cin, cout, k)) in cfg.head_layers(stage).into_iter().enumerate() {
            let wname = format!("{name}.w");
            params.insert_he(&wname, &[cout, cin, k, k], cin * k * k, rng);
            if j == 2 {
                params.get_mut(&wname)?.scale_assign(OUTPUT_INIT_SCALE);
            }
            params.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
        }
    }
    Ok(params)
}

/// Splits a `[96, h, w]` stage output into its three branches.
fn split_branches<'t>(raw: Var<'t>, plane: usize) -> Result<MapVars<'t>, GradError> {
    Ok(MapVars {
        conf: raw.slice(0..NUM_LIMBS)?.sigmoid().reshape(&[NUM_LIMBS, plane])?,
        orient2d: raw
            .slice(NUM_LIMBS..3 * NUM_LIMBS)?
            .reshape(&[NUM_LIMBS, 2, plane])?,
        orient3d: raw
            .slice(3 * NUM_LIMBS..NUM_CHANNELS)?
            .reshape(&[NUM_LIMBS, 3, plane])?,
    })
}

/// Runs the FCNN on a `[3, H, W]` image, returning one prediction per
/// stage.
pub fn fcnn_forward<'t>(
    image: Var<'t>,
    params: &BoundParams<'t>,
    cfg: &FcnnConfig,
) -> Result<Vec<MapVars<'t>>, GradError> {
    cfg.validate()?;
    let expect = [3, cfg.image_size, cfg.image_size];
    if image.shape() != expect {
        return Err(GradError::shape("fcnn_forward", &image.shape(), &expect));
    }
    let conv = |x: Var<'t>, name: &str, stride: usize, k: usize| -> Result<Var<'t>, GradError> {
        x.conv2d(
            params.get(&format!("{name}.w"))?,
            Some(params.get(&format!("{name}.b"))?),
            stride,
            k / 2,
        )
    };
    let mut features = image;
    for (i, &s) in cfg.backbone_strides.iter().enumerate() {
        features = conv(features, &format!("bb{i}"), s, 3)?.relu();
    }
    let m = cfg.map_size();
    let plane = m * m;
    let mut outputs = Vec::with_capacity(cfg.stages);
    let mut prev: Option<Var<'t>> = None;
    for stage in 0..cfg.stages {
        let mut x = match prev {
            None => features,
            Some(p) => Var::concat(&[features, p])?,
        };
        let layers = cfg.head_layers(stage);
        for (j, (name, _, _, k)) in layers.iter().enumerate() {
            x = conv(x, name, 1, *k)?;
            if j + 1 < layers.len() {
                x = x.relu();
            }
        }
        let maps = split_branches(x, plane)?;
        // The next stage sees confidences after the sigmoid.
        let activated = Var::concat(&[
            maps.conf.reshape(&[NUM_LIMBS, m, m])?,
            x.slice(NUM_LIMBS..NUM_CHANNELS)?,
        ])?;
        prev = Some(activated);
        outputs.push(maps);
    }
    Ok(outputs)
}

/// The 200 values the complement network sees.
#[derive(Clone, Debug, PartialEq)]
pub struct PcInput {
    pub scores: [f64; NUM_LIMBS],
    pub orients: [f64; 3 * NUM_LIMBS],
    /// `(v_i . v_j) s_i s_j` for `i <= j`, row-major over the upper triangle.
    pub corr: Vec<f64>,
}

impl PcInput {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(PC_INPUT);
        out.extend_from_slice(&self.scores);
        out.extend_from_slice(&self.orients);
        out.extend_from_slice(&self.corr);
        out
    }
}

/// Flat indices of the upper triangle (diagonal included) of a 16x16
/// matrix, row-major.
pub fn upper_triangle_indices() -> Vec<usize> {
    (0..NUM_LIMBS)
        .flat_map(|i| (i..NUM_LIMBS).map(move |j| i * NUM_LIMBS + j))
        .collect()
}

pub fn pc_features(est: &InitialEstimate) -> PcInput {
    let (v, s) = (&est.orients.0, &est.scores);
    let corr = upper_triangle_indices()
        .into_iter()
        .map(|k| {
            let (i, j) = (k / NUM_LIMBS, k % NUM_LIMBS);
            crate::geom::dot(v[i], v[j]) * s[i] * s[j]
        })
        .collect();
    PcInput {
        scores: est.scores,
        orients: std::array::from_fn(|k| v[k / 3][k % 3]),
        corr,
    }
}

/// Tape version of [`pc_features`]: `orients` `[16, 3]`, `scores` `[16]`,
/// result `[200]`.
pub fn pc_features_on_tape<'t>(orients: Var<'t>, scores: Var<'t>) -> Result<Var<'t>, GradError> {
    let gram = orients.matmul(orients.transpose()?)?;
    let column = scores.reshape(&[NUM_LIMBS, 1])?;
    let mask = column.matmul(column.transpose()?)?;
    let corr = gram.mul(mask)?.gather(&upper_triangle_indices())?;
    Var::concat(&[scores, orients.reshape(&[3 * NUM_LIMBS])?, corr])
}

/// Complement-network weights: `W_in` 200x512, `W1`, `W2` 512x512 and
/// `W_out` 512x48, stored input-major so a row vector multiplies on the
/// left. `W_out` starts at zero, so an untrained network leaves the
/// estimate unchanged.
pub fn pc_init(rng: &mut impl Rng) -> ParamSet {
    let mut params = ParamSet::new();
    params.insert_he("pc.w_in", &[PC_INPUT, PC_HIDDEN], PC_INPUT, rng);
    params.insert_he("pc.w1", &[PC_HIDDEN, PC_HIDDEN], PC_HIDDEN, rng);
    params.insert_he("pc.w2", &[PC_HIDDEN, PC_HIDDEN], PC_HIDDEN, rng);
    params.insert("pc.w_out", Tensor::zeros(&[PC_HIDDEN, 3 * NUM_LIMBS]));
    params
}

pub fn pc_zero() -> ParamSet {
    let mut params = ParamSet::new();
    params.insert("pc.w_in", Tensor::zeros(&[PC_INPUT, PC_HIDDEN]));
    params.insert("pc.w1", Tensor::zeros(&[PC_HIDDEN, PC_HIDDEN]));
    params.insert("pc.w2", Tensor::zeros(&[PC_HIDDEN, PC_HIDDEN]));
    params.insert("pc.w_out", Tensor::zeros(&[PC_HIDDEN, 3 * NUM_LIMBS]));
    params
}

/// `x` is `[n, 200]`; returns `[n, 48]` correction vectors:
/// `h1 = relu(x W_in W1)`, `h2 = relu(h1 W2) + h1`, `out = h2 W_out`.
pub fn pc_forward<'t>(x: Var<'t>, params: &BoundParams<'t>) -> Result<Var<'t>, GradError> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != PC_INPUT {
        return Err(GradError::shape("pc_forward", &shape, &[1, PC_INPUT]));
    }
    let h0 = x.matmul(params.get("pc.w_in")?)?;
    let h1 = h0.matmul(params.get("pc.w1")?)?.relu();
    let h2 = h1.matmul(params.get("pc.w2")?)?.relu().add(h1)?;
    h2.matmul(params.get("pc.w_out")?)
}

/// `(v + dv) / |v + dv|` per limb, zero below [`APPLY_EPS`].
pub fn pc_apply(v: &OrientationSet, dv: &[[f64; 3]; NUM_LIMBS]) -> OrientationSet {
    OrientationSet(std::array::from_fn(|i| {
        crate::extract::normalize_orientation(crate::geom::add(v.0[i], dv[i]), APPLY_EPS)
    }))
}

pub fn pc_apply_on_tape<'t>(v: Var<'t>, dv: Var<'t>) -> Result<Var<'t>, GradError> {
    v.add(dv.reshape(&[NUM_LIMBS, 3])?)?.normalize_rows(APPLY_EPS)
}

/// Complement path on a tape. The estimate's orientations and scores
/// enter as constants, so nothing here reaches the FCNN. Returns the
/// complemented orientations `[16, 3]` and pose `[17, 3]`.
pub fn pc_complement_on_tape<'t>(
    tape: &'t Tape,
    est: &InitialEstimate,
    params: &BoundParams<'t>,
    lengths: &LimbLengths,
    topo: &LimbTopology,
) -> Result<(Var<'t>, Var<'t>), GradError> {
    let x = tape.constant(Tensor::new(&[1, PC_INPUT], pc_features(est).to_vec())?);
    let v = tape.constant(Tensor::new(&[NUM_LIMBS, 3], est.orients.flat())?);
    let dv = pc_forward(x, params)?;
    let orients = pc_apply_on_tape(v, dv)?;
    let pose = fk_on_tape(orients, lengths, topo)?;
    Ok((orients, pose))
}

/// Complemented pose of an estimate, without gradients.
pub fn pc_complement(
    est: &InitialEstimate,
    params: &ParamSet,
    lengths: &LimbLengths,
    topo: &LimbTopology,
) -> Result<Pose3D, PcError> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let x = tape.constant(Tensor::new(&[1, PC_INPUT], pc_features(est).to_vec())?);
    let dv = pc_forward(x, &bound)?.value();
    let dv: [[f64; 3]; NUM_LIMBS] =
        std::array::from_fn(|i| [dv.data()[3 * i], dv.data()[3 * i + 1], dv.data()[3 * i + 2]]);
    Ok(fk_integrate(&pc_apply(&est.orients, &dv), lengths, topo)?)
}

#[derive(Debug, thiserror::Error)]
pub enum PcError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pc_input_is_two_hundred_long() {
        assert_eq!(PC_INPUT, 200);
        assert_eq!(upper_triangle_indices().len(), 136);
    }

    #[test]
    fn apply_examples() {
        let mut v = OrientationSet([[1.0, 0.0, 0.0]; NUM_LIMBS]);
        v.0[1] = [0.0; 3];
        let mut dv = [[0.0; 3]; NUM_LIMBS];
        dv[0] = [0.0, 1.0, 0.0];
        dv[1] = [0.0, 2.0, 0.0];
        let out = pc_apply(&v, &dv);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out.0[0][0] - h).abs() < 1e-15 && (out.0[0][1] - h).abs() < 1e-15);
        assert_eq!(out.0[1], [0.0, 1.0, 0.0]);
        assert_eq!(out.0[2], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = FcnnConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.map_size(), 16);
    }
}
