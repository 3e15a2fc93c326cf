//! Seeded image corruptions for robustness training and evaluation:
//! translation, pasted occluders, rectangle/circle/edge erasing, and noise
//! on the person bounding box.
//!
//! Every generator returns the parameters it sampled so callers (and tests)
//! can check them against their supports exactly.

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geom::{self, Disc, OrientedRect, Vec2};
use crate::skeleton::Pose2D;

/// Per-item seed for dataset-wide application.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSpec {
    /// Inclusive range of occluder counts.
    pub count: (usize, usize),
    /// Range of occluder side lengths as a fraction of the image side.
    pub size: (f64, f64),
}

impl Default for OcclusionSpec {
    fn default() -> Self {
        Self {
            count: (1, 8),
            size: (0.1, 0.3),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbKind {
    None,
    Translate { tau: f64 },
    Occlude(OcclusionSpec),
    EraseRect,
    EraseCircle,
    EraseEdge,
    BboxNoise { sigma_c: f64, sigma_s: f64 },
}

impl PerturbKind {
    /// Short label used for report rows.
    pub fn label(&self) -> String {
        match self {
            PerturbKind::None => "None".into(),
            PerturbKind::Translate { tau } => format!("Trans{:.0}", tau * 100.0),
            PerturbKind::Occlude(_) => "Occl".into(),
            PerturbKind::EraseRect => "Rect".into(),
            PerturbKind::EraseCircle => "Circle".into(),
            PerturbKind::EraseEdge => "Edge".into(),
            PerturbKind::BboxNoise { sigma_c, sigma_s } => format!("BBox({sigma_c},{sigma_s})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    #[serde(flatten)]
    pub kind: PerturbKind,
    pub seed: u64,
    /// Value written into translated-in and erased pixels.
    #[serde(default)]
    pub fill: u8,
}

impl PerturbSpec {
    pub fn new(kind: PerturbKind, seed: u64) -> Self {
        Self { kind, seed, fill: 0 }
    }
}

/// A uniform point over the image area, `[-0.5, a - 0.5]` on both axes.
fn uniform_point(rng: &mut impl Rng, a: usize) -> Vec2 {
    [rng.gen_range(-0.5..a as f64 - 0.5), rng.gen_range(-0.5..a as f64 - 0.5)]
}

fn fill_where(img: &mut RgbImage, fill: u8, bounds: Option<(usize, usize, usize, usize)>, inside: impl Fn(Vec2) -> bool) -> usize {
    let mut count = 0;
    geom::for_each_pixel(bounds, inside, |c, r| {
        img.put_pixel(c as u32, r as u32, Rgb([fill; 3]));
        count += 1;
    });
    count
}

/// What [`translate`] did: the crop centre moved by `offset` pixels and
/// the content by `shift`, the negated offset rounded to whole pixels and
/// kept within `tau * a`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Translation {
    pub offset: Vec2,
    pub shift: [i64; 2],
}

impl Translation {
    pub fn apply_to_pose(&self, pose: &Pose2D) -> Pose2D {
        pose.map(|p| [p[0] + self.shift[0] as f64, p[1] + self.shift[1] as f64])
    }
}

/// Shifts the crop window of a square image by `(x, y) * a` with `x, y`
/// uniform on `[-tau, tau]`; exposed pixels take `fill`.
pub fn translate(img: &RgbImage, tau: f64, fill: u8, rng: &mut impl Rng) -> (RgbImage, Translation) {
    let a = img.width() as f64;
    let mut draw = || if tau > 0.0 { rng.gen_range(-tau..=tau) * a } else { 0.0 };
    let offset = [draw(), draw()];
    let limit = (tau * a).floor();
    let shift = offset.map(|o| -o.round().clamp(-limit, limit) as i64);
    let (w, h) = (img.width() as i64, img.height() as i64);
    let out = RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let (sx, sy) = (x as i64 - shift[0], y as i64 - shift[1]);
        if (0..w).contains(&sx) && (0..h).contains(&sy) {
            *img.get_pixel(sx as u32, sy as u32)
        } else {
            Rgb([fill; 3])
        }
    });
    (out, Translation { offset, shift })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OccluderShape {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Occluder {
    pub shape: OccluderShape,
    pub center: Vec2,
    /// Full side lengths (or diameters) along x and y.
    pub size: Vec2,
    pub color: [u8; 3],
}

impl Occluder {
    pub fn contains(&self, p: Vec2) -> bool {
        let (dx, dy) = (
            (p[0] - self.center[0]) / (self.size[0] / 2.0),
            (p[1] - self.center[1]) / (self.size[1] / 2.0),
        );
        match self.shape {
            OccluderShape::Rect => dx.abs() < 1.0 && dy.abs() < 1.0,
            OccluderShape::Ellipse => dx * dx + dy * dy < 1.0,
        }
    }

    fn bounds(&self, w: usize, h: usize) -> Option<(usize, usize, usize, usize)> {
        let (hx, hy) = (self.size[0] / 2.0, self.size[1] / 2.0);
        geom::clip_bounds(
            self.center[0] - hx,
            self.center[0] + hx,
            self.center[1] - hy,
            self.center[1] + hy,
            w,
            h,
        )
    }
}

/// Pastes a random number of flat-coloured, noise-textured rectangles and
/// ellipses at random positions. Returns the occluders and the number of
/// covered pixels.
pub fn occlude(img: &RgbImage, spec: &OcclusionSpec, rng: &mut impl Rng) -> (RgbImage, Vec<Occluder>, usize) {
    let mut out = img.clone();
    let a = img.width() as usize;
    let count = rng.gen_range(spec.count.0..=spec.count.1);
    let mut covered = vec![false; a * img.height() as usize];
    let mut occluders = Vec::with_capacity(count);
    for _ in 0..count {
        let mut side = || a as f64 * rng.gen_range(spec.size.0..=spec.size.1);
        let size = [side(), side()];
        let occ = Occluder {
            shape: if rng.gen_bool(0.5) { OccluderShape::Rect } else { OccluderShape::Ellipse },
            center: uniform_point(rng, a),
            size,
            color: [rng.gen(), rng.gen(), rng.gen()],
        };
        geom::for_each_pixel(occ.bounds(a, img.height() as usize), |p| occ.contains(p), |c, r| {
            let px = occ.color.map(|v| (v as i32 + rng.gen_range(-24..=24)).clamp(0, 255) as u8);
            out.put_pixel(c as u32, r as u32, Rgb(px));
            covered[r * a + c] = true;
        });
        occluders.push(occ);
    }
    let n = covered.iter().filter(|&&c| c).count();
    (out, occluders, n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RectErase {
    /// Mid-points of the rectangle's two short sides.
    pub ends: [Vec2; 2],
    pub width: f64,
    pub erased: usize,
}

impl RectErase {
    pub fn region(&self) -> OrientedRect {
        OrientedRect {
            a: self.ends[0],
            b: self.ends[1],
            half_width: self.width / 2.0,
        }
    }
}

/// Zeroes an oriented rectangle whose short-side mid-points are two
/// uniform points in the image; the width is uniform on `[0, a]`.
pub fn erase_rect(img: &RgbImage, fill: u8, rng: &mut impl Rng) -> (RgbImage, RectErase) {
    let a = img.width() as usize;
    let ends = [uniform_point(rng, a), uniform_point(rng, a)];
    let width = rng.gen_range(0.0..=a as f64);
    let mut out = img.clone();
    let mut info = RectErase { ends, width, erased: 0 };
    let region = info.region();
    info.erased = fill_where(&mut out, fill, region.pixel_bounds(a, img.height() as usize), |p| region.contains(p));
    (out, info)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CircleErase {
    pub disc: Disc,
    pub erased: usize,
}

/// Zeroes a disc with a uniform centre and radius uniform on
/// `[a/5, 2a/5]`.
pub fn erase_circle(img: &RgbImage, fill: u8, rng: &mut impl Rng) -> (RgbImage, CircleErase) {
    let a = img.width() as usize;
    let center = uniform_point(rng, a);
    let radius = rng.gen_range(a as f64 / 5.0..=2.0 * a as f64 / 5.0);
    let disc = Disc { center, radius };
    let mut out = img.clone();
    let erased = fill_where(&mut out, fill, disc.pixel_bounds(a, img.height() as usize), |p| disc.contains(p));
    (out, CircleErase { disc, erased })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Edge {
    Left,
    Right,
    Top,
    Bottom,
}

pub const EDGES: [Edge; 4] = [Edge::Left, Edge::Right, Edge::Top, Edge::Bottom];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeErase {
    pub edge: Edge,
    pub width: f64,
}

impl EdgeErase {
    /// Whether the band covers the centre `p` of an `a x a` image. The band
    /// spans `width` pixels inward from the image border at `-0.5` or
    /// `a - 0.5`.
    pub fn contains(&self, p: Vec2, a: usize) -> bool {
        let far = a as f64 - 0.5;
        match self.edge {
            Edge::Left => p[0] < -0.5 + self.width,
            Edge::Right => p[0] > far - self.width,
            Edge::Top => p[1] < -0.5 + self.width,
            Edge::Bottom => p[1] > far - self.width,
        }
    }
}

/// Zeroes a band along a uniformly chosen edge, width uniform on
/// `[0, a/2]`.
pub fn erase_edge(img: &RgbImage, fill: u8, rng: &mut impl Rng) -> (RgbImage, EdgeErase) {
    let a = img.width() as usize;
    let edge = EDGES[rng.gen_range(0..4)];
    let width = rng.gen_range(0.0..=a as f64 / 2.0);
    let info = EdgeErase { edge, width };
    let mut out = img.clone();
    let bounds = Some((0, 0, a - 1, img.height() as usize - 1));
    fill_where(&mut out, fill, bounds, |p| info.contains(p, a));
    (out, info)
}

/// Square person box in image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub center: Vec2,
    pub size: f64,
}

/// `C + S N(0, sigma_c^2 I)` and `S + S N(0, sigma_s^2)`, size clamped to at
/// least one pixel.
pub fn bbox_noise(b: BBox, sigma_c: f64, sigma_s: f64, rng: &mut impl Rng) -> BBox {
    let mut gauss = |sigma: f64| -> f64 {
        if sigma == 0.0 {
            0.0
        } else {
            Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
        }
    };
    let dx = gauss(sigma_c);
    let dy = gauss(sigma_c);
    let ds = gauss(sigma_s);
    BBox {
        center: [b.center[0] + b.size * dx, b.center[1] + b.size * dy],
        size: (b.size + b.size * ds).max(1.0),
    }
}

/// Applies an image-space perturbation and moves the 2D pose along with
/// translations. Box noise is not an image operation (it changes the crop,
/// see the renderer) and passes through unchanged here.
pub fn apply(img: &RgbImage, pose: &Pose2D, spec: &PerturbSpec, rng: &mut impl Rng) -> (RgbImage, Pose2D) {
    let fill = spec.fill;
    match spec.kind {
        PerturbKind::None | PerturbKind::BboxNoise { .. } => (img.clone(), *pose),
        PerturbKind::Translate { tau } => {
            let (out, t) = translate(img, tau, fill, rng);
            (out, t.apply_to_pose(pose))
        }
        PerturbKind::Occlude(o) => (occlude(img, &o, rng).0, *pose),
        PerturbKind::EraseRect => (erase_rect(img, fill, rng).0, *pose),
        PerturbKind::EraseCircle => (erase_circle(img, fill, rng).0, *pose),
        PerturbKind::EraseEdge => (erase_edge(img, fill, rng).0, *pose),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(a: u32, seed: u64) -> RgbImage {
        let mut rng = rng_for(seed);
        RgbImage::from_fn(a, a, |_, _| Rgb([rng.gen_range(1..=255), rng.gen_range(1..=255), rng.gen_range(1..=255)]))
    }

    #[test]
    fn zero_tau_is_identity() {
        let img = noise_image(16, 1);
        let (out, t) = translate(&img, 0.0, 0, &mut rng_for(2));
        assert_eq!(out, img);
        assert_eq!(t.shift, [0, 0]);
    }

    #[test]
    fn translation_moves_content() {
        let img = noise_image(16, 1);
        let (out, t) = translate(&img, 0.3, 0, &mut rng_for(3));
        let [sx, sy] = t.shift;
        for y in 0..16i64 {
            for x in 0..16i64 {
                let src = (x - sx, y - sy);
                let expect = if (0..16).contains(&src.0) && (0..16).contains(&src.1) {
                    *img.get_pixel(src.0 as u32, src.1 as u32)
                } else {
                    Rgb([0; 3])
                };
                assert_eq!(*out.get_pixel(x as u32, y as u32), expect);
            }
        }
    }

    #[test]
    fn left_half_edge_erase() {
        let img = noise_image(16, 4);
        let info = EdgeErase { edge: Edge::Left, width: 8.0 };
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(info.contains([x as f64, y as f64], 16), x < 8);
            }
        }
        let none = EdgeErase { edge: Edge::Bottom, width: 0.0 };
        assert!((0..16).all(|x| !none.contains([x as f64, 15.0], 16)));
        let _ = img;
    }

    #[test]
    fn zero_sigma_leaves_box() {
        let b = BBox { center: [10.0, 20.0], size: 30.0 };
        assert_eq!(bbox_noise(b, 0.0, 0.0, &mut rng_for(5)), b);
    }

    #[test]
    fn empty_occlusion_is_identity() {
        let img = noise_image(16, 6);
        let spec = OcclusionSpec { count: (0, 0), size: (0.1, 0.2) };
        let (out, occ, n) = occlude(&img, &spec, &mut rng_for(7));
        assert_eq!((out, occ.len(), n), (img, 0, 0));
    }
}
