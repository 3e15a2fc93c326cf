//! Synthetic training data: random skeletons in plausible ranges, an
//! orthographic camera, a flat-shaded limb renderer, and a fixed-stride
//! binary dataset format.
//!
//! Camera coordinates have x to the right, y down and z away from the
//! camera, all in millimetres. Images are RGB; `pose2d` is stored in
//! map-pixel coordinates.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::geom::{self, Mat3, Vec2, Vec3};
use crate::mapcodec::{encode_maps, LimbRegion, MapConfig, MapSet};
use crate::perturb::{item_seed, rng_for};
use crate::skeleton::{
    fk_integrate, orientations_from_pose, LimbLengths, LimbTopology, OrientationSet, Pose2D, Pose3D,
    SkeletonError, NUM_JOINTS, NUM_LIMBS,
};

/// Direction of each limb in the rest pose: legs and arms hang down, the
/// spine points up, hips and shoulders point sideways.
pub const REST_DIRECTIONS: [Vec3; NUM_LIMBS] = [
    [-1.0, 0.0, 0.0], // pelvis -> r_hip
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [1.0, 0.0, 0.0], // pelvis -> l_hip
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0], // spine
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
    [1.0, 0.0, 0.0], // thorax -> l_shoulder
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [-1.0, 0.0, 0.0], // thorax -> r_shoulder
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
];

/// Per-limb cone half-angle around the rest direction, degrees.
pub const CONE_HALF_ANGLES_DEG: [f64; NUM_LIMBS] = [
    20.0, 45.0, 45.0, 20.0, 45.0, 45.0, 20.0, 20.0, 25.0, 30.0, 20.0, 75.0, 90.0, 20.0, 75.0, 90.0,
];

/// Fixed limb colours, one distinct hue per limb.
pub const PALETTE: [[u8; 3]; NUM_LIMBS] = [
    [255, 0, 0],
    [255, 96, 0],
    [255, 192, 0],
    [224, 255, 0],
    [128, 255, 0],
    [32, 255, 0],
    [0, 255, 64],
    [0, 255, 160],
    [0, 255, 255],
    [0, 160, 255],
    [0, 64, 255],
    [32, 0, 255],
    [128, 0, 255],
    [224, 0, 255],
    [255, 0, 192],
    [255, 0, 96],
];

const MAGIC: [u8; 4] = *b"OPK1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;
const POSE_BYTES: usize = NUM_JOINTS * 3 * 4 + NUM_JOINTS * 2 * 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("not a dataset file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported dataset version {found}, expected {FORMAT_VERSION}")]
    Version { found: u32 },
    #[error("dataset truncated at byte offset {offset}: expected {expected} bytes in total")]
    Truncated { offset: usize, expected: usize },
    #[error("invalid dataset header: {0}")]
    Header(String),
    #[error("sample {index} has a {got}x{got_h} image, dataset images are {want}x{want_h}")]
    ImageSize {
        index: usize,
        got: u32,
        got_h: u32,
        want: u32,
        want_h: u32,
    },
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Orthographic camera: `(x, y) * scale + principal`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Pixels per millimetre.
    pub scale: f64,
    pub principal: Vec2,
}

impl Camera {
    /// Fits an ~1.8m person into 80% of a square image, root at the centre.
    pub fn for_image(size: usize) -> Self {
        let c = (size as f64 - 1.0) / 2.0;
        Self {
            scale: 0.8 * size as f64 / 1800.0,
            principal: [c, c],
        }
    }

    /// The camera that shows the square box `[C - S/2, C + S/2]` of this
    /// camera's image as a full `size x size` image.
    pub fn crop(&self, center: Vec2, box_size: f64, size: usize) -> Self {
        let k = size as f64 / box_size;
        let origin = [center[0] - box_size / 2.0, center[1] - box_size / 2.0];
        // The box edge lands on the image edge at -0.5.
        let map = |p: f64, o: f64| (p - o) * k - 0.5;
        Self {
            scale: self.scale * k,
            principal: [map(self.principal[0], origin[0]), map(self.principal[1], origin[1])],
        }
    }
}

pub fn project(pose: &Pose3D, cam: &Camera) -> Pose2D {
    Pose2D(pose.0.map(|j| {
        [
            j[0] * cam.scale + cam.principal[0],
            j[1] * cam.scale + cam.principal[1],
        ]
    }))
}

/// Image pixel coordinates to map pixel coordinates for a map `stride`
/// times smaller.
pub fn image_to_map(p: Vec2, stride: usize) -> Vec2 {
    let s = stride as f64;
    [(p[0] + 0.5) / s - 0.5, (p[1] + 0.5) / s - 0.5]
}

pub fn map_to_image(p: Vec2, stride: usize) -> Vec2 {
    let s = stride as f64;
    [(p[0] + 0.5) * s - 0.5, (p[1] + 0.5) * s - 0.5]
}

/// Rotation taking `+z` onto the unit vector `axis`.
fn frame_for(axis: Vec3) -> Mat3 {
    let helper = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = geom::normalize(geom::cross(helper, axis));
    let v = geom::cross(axis, u);
    [[u[0], v[0], axis[0]], [u[1], v[1], axis[1]], [u[2], v[2], axis[2]]]
}

/// Uniform direction within `half_angle` radians of `axis`.
pub fn sample_cone(axis: Vec3, half_angle: f64, rng: &mut impl Rng) -> Vec3 {
    if half_angle <= 0.0 {
        return axis;
    }
    let cos_t = rng.gen_range(half_angle.cos()..=1.0);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    let local = [sin_t * phi.cos(), sin_t * phi.sin(), cos_t];
    geom::normalize(geom::mat_vec(&frame_for(axis), local))
}

/// Random pose: each limb direction uniform in its cone (angles scaled by
/// `cone_scale`), placed with the default limb lengths.
pub fn sample_pose_with(cone_scale: f64, lengths: &LimbLengths, topo: &LimbTopology, rng: &mut impl Rng) -> Pose3D {
    let orients = OrientationSet(std::array::from_fn(|i| {
        sample_cone(REST_DIRECTIONS[i], CONE_HALF_ANGLES_DEG[i].to_radians() * cone_scale, rng)
    }));
    fk_integrate(&orients, lengths, topo).expect("finite unit orientations")
}

pub fn sample_pose(rng: &mut impl Rng) -> Pose3D {
    sample_pose_with(1.0, &LimbLengths::default(), &LimbTopology::canonical(), rng)
}

/// Rounds every coordinate to `f32`, the precision of the dataset file.
pub fn quantize_pose(p: &Pose3D) -> Pose3D {
    Pose3D(p.0.map(|j| j.map(|v| v as f32 as f64)))
}

fn quantize_2d(p: &Pose2D) -> Pose2D {
    p.map(|j| j.map(|v| v as f32 as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderStyle {
    /// Limb width in image pixels.
    pub limb_width: f64,
    /// Background noise is uniform per channel on `[0, background_max]`.
    pub background_max: u8,
    /// Multiplier on every limb colour.
    pub brightness: f64,
    /// Darken limbs pointing away from the camera, brighten those pointing
    /// towards it, so the sign of depth is visible.
    pub depth_shading: bool,
    /// Bitmask of limbs left undrawn.
    pub hidden: u16,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            limb_width: 4.0,
            background_max: 60,
            brightness: 1.0,
            depth_shading: true,
            hidden: 0,
        }
    }
}

/// Limb shade factor for a limb whose direction has depth component `z`.
pub fn depth_shade(z: f64) -> f64 {
    0.7 - 0.3 * z
}

/// Draws limbs as filled regions over uniform noise, far limbs first.
/// Returns the image and, per pixel, the limb drawn last there.
pub fn render_with_ids(
    pose2d: &Pose2D,
    pose3d: &Pose3D,
    topo: &LimbTopology,
    style: &RenderStyle,
    size: usize,
    rng: &mut impl Rng,
) -> (RgbImage, Vec<Option<usize>>) {
    let mut img = RgbImage::from_fn(size as u32, size as u32, |_, _| {
        Rgb([
            rng.gen_range(0..=style.background_max),
            rng.gen_range(0..=style.background_max),
            rng.gen_range(0..=style.background_max),
        ])
    });
    let mut ids = vec![None; size * size];
    let depth = |i: usize| {
        let (p, c) = topo.limbs[i];
        pose3d.0[p][2] + pose3d.0[c][2]
    };
    let mut order: Vec<usize> = (0..NUM_LIMBS).collect();
    order.sort_by(|&a, &b| depth(b).total_cmp(&depth(a)));
    for limb in order.into_iter().filter(|&l| style.hidden & (1 << l) == 0) {
        let (p, c) = topo.limbs[limb];
        let dir = geom::normalize(geom::sub(pose3d.0[c], pose3d.0[p]));
        let shade = if style.depth_shading { depth_shade(dir[2]) } else { 1.0 } * style.brightness;
        let color = PALETTE[limb].map(|v| (v as f64 * shade).round().clamp(0.0, 255.0) as u8);
        LimbRegion::new(pose2d.0[p], pose2d.0[c], style.limb_width).for_each_pixel(size, size, |x, y| {
            img.put_pixel(x as u32, y as u32, Rgb(color));
            ids[y * size + x] = Some(limb);
        });
    }
    (img, ids)
}

pub fn render(
    pose2d: &Pose2D,
    pose3d: &Pose3D,
    topo: &LimbTopology,
    style: &RenderStyle,
    size: usize,
    rng: &mut impl Rng,
) -> RgbImage {
    render_with_ids(pose2d, pose3d, topo, style, size, rng).0
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    /// Root-centred, millimetres.
    pub pose3d: Pose3D,
    /// Map-pixel coordinates.
    pub pose2d: Pose2D,
    pub has_3d: bool,
    /// Bit `i` set when limb `i` covers at least one map pixel.
    pub visibility: u16,
}

impl Sample {
    pub fn limb_visible(&self, limb: usize) -> bool {
        self.visibility & (1 << limb) != 0
    }

    pub fn orientations(&self, topo: &LimbTopology) -> Result<OrientationSet, SkeletonError> {
        Ok(orientations_from_pose(&self.pose3d, topo)?.orients)
    }

    /// Ground-truth maps of this sample.
    pub fn maps(&self, topo: &LimbTopology, map: &MapConfig) -> Result<MapSet, SkeletonError> {
        Ok(encode_maps(&self.pose2d, &self.orientations(topo)?, topo, map.limb_width, map.dims()))
    }
}

pub fn visibility_bits(maps: &MapSet) -> u16 {
    (0..NUM_LIMBS)
        .filter(|&i| maps.conf(i).iter().any(|&c| c > 0.0))
        .fold(0u16, |acc, i| acc | (1 << i))
}

/// Geometry shared by every sample of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub map: MapConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            map: MapConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn stride(&self) -> usize {
        self.image_size / self.map.width
    }

    pub fn style(&self) -> RenderStyle {
        RenderStyle {
            limb_width: self.map.limb_width * self.stride() as f64,
            ..RenderStyle::default()
        }
    }

    /// Renders a posed skeleton seen through `cam` into a sample.
    pub fn make_sample(
        &self,
        pose3d: &Pose3D,
        cam: &Camera,
        style: &RenderStyle,
        has_3d: bool,
        topo: &LimbTopology,
        rng: &mut impl Rng,
    ) -> Result<Sample, SkeletonError> {
        let pose3d = quantize_pose(&pose3d.root_centered());
        let img2d = project(&pose3d, cam);
        let pose2d = quantize_2d(&img2d.map(|p| image_to_map(p, self.stride())));
        let draw2d = pose2d.map(|p| map_to_image(p, self.stride()));
        let image = render(&draw2d, &pose3d, topo, style, self.image_size, rng);
        let mut sample = Sample {
            image,
            pose3d,
            pose2d,
            has_3d,
            visibility: 0,
        };
        sample.visibility = visibility_bits(&sample.maps(topo, &self.map)?);
        Ok(sample)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub count: usize,
    pub seed: u64,
    /// Fraction of samples that carry 3D supervision.
    pub frac_3d: f64,
    pub cone_scale: f64,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            seed: 1,
            frac_3d: 0.5,
            cone_scale: 1.0,
            scene: SceneConfig::default(),
        }
    }
}

/// Generates `cfg.count` samples; sample `i` depends only on
/// `(cfg.seed, i)`.
pub fn generate(cfg: &DataConfig, exec: Exec) -> Result<Vec<Sample>, SkeletonError> {
    let topo = LimbTopology::canonical();
    let lengths = LimbLengths::default();
    let cam = Camera::for_image(cfg.scene.image_size);
    let style = cfg.scene.style();
    exec.map_range(cfg.count, |i| {
        let mut rng = rng_for(item_seed(cfg.seed, i));
        let pose = sample_pose_with(cfg.cone_scale, &lengths, &topo, &mut rng);
        let has_3d = rng.gen_bool(cfg.frac_3d.clamp(0.0, 1.0));
        cfg.scene.make_sample(&pose, &cam, &style, has_3d, &topo, &mut rng)
    })
    .into_iter()
    .collect()
}

pub fn record_len(image_w: usize, image_h: usize) -> usize {
    3 * image_w * image_h + POSE_BYTES + 1 + 2
}

/// Exact file size of a dataset with the given layout.
pub fn file_len(count: usize, image_w: usize, image_h: usize) -> usize {
    HEADER_LEN + count * record_len(image_w, image_h)
}

/// Writes samples in the fixed-stride little-endian format: a 28-byte
/// header (magic `OPK1`, version, count, image w/h, map w/h as u32) then per
/// sample the RGB bytes, 17x3 f32 pose3d, 17x2 f32 pose2d, a flags byte
/// (bit 0: has 3D) and a u16 limb-visibility mask.
pub fn write_dataset(samples: &[Sample], scene: &SceneConfig, path: &Path) -> Result<(), DataError> {
    let (w, h) = (scene.image_size as u32, scene.image_size as u32);
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&MAGIC)?;
    for v in [
        FORMAT_VERSION,
        samples.len() as u32,
        w,
        h,
        scene.map.width as u32,
        scene.map.height as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for (index, s) in samples.iter().enumerate() {
        if s.image.dimensions() != (w, h) {
            return Err(DataError::ImageSize {
                index,
                got: s.image.width(),
                got_h: s.image.height(),
                want: w,
                want_h: h,
            });
        }
        out.write_all(s.image.as_raw())?;
        for v in s.pose3d.flat() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        for j in &s.pose2d.0 {
            for v in j {
                out.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        out.write_all(&[s.has_3d as u8])?;
        out.write_all(&s.visibility.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Header fields of a dataset file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub count: usize,
    pub image_w: usize,
    pub image_h: usize,
    pub map_w: usize,
    pub map_h: usize,
}

pub fn parse_header(bytes: &[u8]) -> Result<DatasetHeader, DataError> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            offset: bytes.len(),
            expected: HEADER_LEN,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated {
            offset: bytes.len(),
            expected: HEADER_LEN,
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
    let version = word(1) as u32;
    if version != FORMAT_VERSION {
        return Err(DataError::Version { found: version });
    }
    let header = DatasetHeader {
        count: word(2),
        image_w: word(3),
        image_h: word(4),
        map_w: word(5),
        map_h: word(6),
    };
    if header.image_w == 0 || header.image_h == 0 || header.map_w == 0 || header.map_h == 0 {
        return Err(DataError::Header(format!("zero dimension in {header:?}")));
    }
    Ok(header)
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Sample>), DataError> {
    let bytes = fs::read(path)?;
    let header = parse_header(&bytes)?;
    let expected = file_len(header.count, header.image_w, header.image_h);
    let stride = record_len(header.image_w, header.image_h);
    if bytes.len() < expected {
        // Offset of the first record that does not fit.
        let complete = (bytes.len() - HEADER_LEN) / stride;
        return Err(DataError::Truncated {
            offset: HEADER_LEN + complete * stride,
            expected,
        });
    }
    let img_len = 3 * header.image_w * header.image_h;
    let f32_at = |b: &[u8], k: usize| f32::from_le_bytes(b[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
    let samples = bytes[HEADER_LEN..expected]
        .chunks_exact(stride)
        .map(|rec| {
            let image = RgbImage::from_raw(header.image_w as u32, header.image_h as u32, rec[..img_len].to_vec())
                .expect("length checked");
            let poses = &rec[img_len..img_len + POSE_BYTES];
            let pose3d = Pose3D(std::array::from_fn(|j| std::array::from_fn(|k| f32_at(poses, 3 * j + k))));
            let off = NUM_JOINTS * 3;
            let pose2d = Pose2D(std::array::from_fn(|j| std::array::from_fn(|k| f32_at(poses, off + 2 * j + k))));
            let tail = &rec[img_len + POSE_BYTES..];
            Sample {
                image,
                pose3d,
                pose2d,
                has_3d: tail[0] & 1 != 0,
                visibility: u16::from_le_bytes([tail[1], tail[2]]),
            }
        })
        .collect();
    Ok((header, samples))
}
