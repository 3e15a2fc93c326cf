//! Ground-truth limb maps: per limb a binary confidence map plus 2D and 3D
//! orientation maps that hold the limb's unit direction inside its region
//! and zero elsewhere.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use thiserror::Error;

use crate::geom::{self, OrientedRect, Square, Vec2};
use crate::skeleton::{LimbTopology, OrientationSet, Pose2D, NUM_LIMBS};

/// Channels per limb: confidence, 2D orientation, 3D orientation.
pub const CHANNELS_PER_LIMB: usize = 1 + 2 + 3;
pub const NUM_CHANNELS: usize = NUM_LIMBS * CHANNELS_PER_LIMB;

/// 2D limbs shorter than this get a zero 2D orientation.
pub const MIN_2D_LENGTH: f64 = 1e-6;

const MAGIC: [u8; 4] = *b"OPMS";
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("not a map file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("map file truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("map file has {0} limbs, expected {NUM_LIMBS}")]
    LimbCount(u32),
    #[error("map dimensions must be positive, got {0}x{1}")]
    BadDims(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Boolean pixel mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }
}

/// Region a limb occupies: an oriented rectangle of width `d` along the limb,
/// or, when the limb's 2D length is below `d`, an axis-aligned `d x d`
/// square on its midpoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LimbRegion {
    Rect(OrientedRect),
    Square(Square),
}

impl LimbRegion {
    pub fn new(parent: Vec2, child: Vec2, d: f64) -> Self {
        let len = geom::norm2([child[0] - parent[0], child[1] - parent[1]]);
        if len >= d {
            LimbRegion::Rect(OrientedRect {
                a: parent,
                b: child,
                half_width: d / 2.0,
            })
        } else {
            LimbRegion::Square(Square {
                center: [(parent[0] + child[0]) / 2.0, (parent[1] + child[1]) / 2.0],
                side: d,
            })
        }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        match self {
            LimbRegion::Rect(r) => r.contains(p),
            LimbRegion::Square(s) => s.contains(p),
        }
    }

    /// Visits the in-image pixels of the region.
    pub fn for_each_pixel(&self, width: usize, height: usize, f: impl FnMut(usize, usize)) {
        let bounds = match self {
            LimbRegion::Rect(r) => r.pixel_bounds(width, height),
            LimbRegion::Square(s) => s.pixel_bounds(width, height),
        };
        geom::for_each_pixel(bounds, |p| self.contains(p), f);
    }
}

pub fn limb_region(parent: Vec2, child: Vec2, d: f64, dims: (usize, usize)) -> Mask {
    let (width, height) = dims;
    let mut mask = Mask::empty(width, height);
    LimbRegion::new(parent, child, d).for_each_pixel(width, height, |c, r| {
        mask.bits[r * width + c] = true;
    });
    mask
}

/// Per-limb confidence, 2D and 3D orientation maps, stored planar:
/// `conf[limb][pixel]`, `orient2d[limb][axis][pixel]`,
/// `orient3d[limb][axis][pixel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MapSet {
    pub width: usize,
    pub height: usize,
    pub conf: Vec<f32>,
    pub orient2d: Vec<f32>,
    pub orient3d: Vec<f32>,
}

impl MapSet {
    pub fn zeros(width: usize, height: usize) -> Self {
        let plane = width * height;
        Self {
            width,
            height,
            conf: vec![0.0; NUM_LIMBS * plane],
            orient2d: vec![0.0; NUM_LIMBS * 2 * plane],
            orient3d: vec![0.0; NUM_LIMBS * 3 * plane],
        }
    }

    pub fn plane(&self) -> usize {
        self.width * self.height
    }

    pub fn num_channels(&self) -> usize {
        (self.conf.len() + self.orient2d.len() + self.orient3d.len()) / self.plane()
    }

    pub fn conf(&self, limb: usize) -> &[f32] {
        let p = self.plane();
        &self.conf[limb * p..(limb + 1) * p]
    }

    /// The two planes of a limb's 2D orientation, x then y.
    pub fn orient2d(&self, limb: usize) -> &[f32] {
        let p = self.plane();
        &self.orient2d[limb * 2 * p..(limb + 1) * 2 * p]
    }

    /// The three planes of a limb's 3D orientation, x, y, z.
    pub fn orient3d(&self, limb: usize) -> &[f32] {
        let p = self.plane();
        &self.orient3d[limb * 3 * p..(limb + 1) * 3 * p]
    }

    /// Channel `c` of a limb in (conf, o2d.x, o2d.y, o3d.x, o3d.y, o3d.z)
    /// order.
    pub fn channel(&self, limb: usize, c: usize) -> &[f32] {
        let p = self.plane();
        match c {
            0 => self.conf(limb),
            1 | 2 => &self.orient2d(limb)[(c - 1) * p..c * p],
            _ => &self.orient3d(limb)[(c - 3) * p..(c - 2) * p],
        }
    }

    fn channel_mut(&mut self, limb: usize, c: usize) -> &mut [f32] {
        let p = self.plane();
        match c {
            0 => &mut self.conf[limb * p..(limb + 1) * p],
            1 | 2 => {
                let base = limb * 2 * p + (c - 1) * p;
                &mut self.orient2d[base..base + p]
            }
            _ => {
                let base = limb * 3 * p + (c - 3) * p;
                &mut self.orient3d[base..base + p]
            }
        }
    }

    /// Flat little-endian blob: 16-byte header (magic, width, height, limb
    /// count as u32) then `f32` values in (limb, channel, row, col) order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + NUM_CHANNELS * self.plane() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(NUM_LIMBS as u32).to_le_bytes());
        for limb in 0..NUM_LIMBS {
            for c in 0..CHANNELS_PER_LIMB {
                for v in self.channel(limb, c) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MapError> {
        if bytes.len() < HEADER_LEN {
            return Err(MapError::Truncated {
                needed: HEADER_LEN,
                have: bytes.len(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(MapError::BadMagic(magic));
        }
        let (width, height, limbs) = (word(4) as usize, word(8) as usize, word(12));
        if limbs as usize != NUM_LIMBS {
            return Err(MapError::LimbCount(limbs));
        }
        if width == 0 || height == 0 {
            return Err(MapError::BadDims(width, height));
        }
        let needed = HEADER_LEN + NUM_CHANNELS * width * height * 4;
        if bytes.len() < needed {
            return Err(MapError::Truncated {
                needed,
                have: bytes.len(),
            });
        }
        let mut maps = MapSet::zeros(width, height);
        let mut values = bytes[HEADER_LEN..needed]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        for limb in 0..NUM_LIMBS {
            for c in 0..CHANNELS_PER_LIMB {
                for v in maps.channel_mut(limb, c) {
                    *v = values.next().expect("length checked");
                }
            }
        }
        Ok(maps)
    }

    pub fn save(&self, path: &Path) -> Result<(), MapError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MapError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Writes one grayscale PNG per channel into `dir`. Confidence maps map
    /// `[0, 1]` to black..white; orientation maps map `[-1, 1]` with mid-gray
    /// at zero.
    pub fn dump_images(&self, dir: &Path) -> Result<(), MapError> {
        const NAMES: [&str; CHANNELS_PER_LIMB] = ["conf", "o2d_x", "o2d_y", "o3d_x", "o3d_y", "o3d_z"];
        fs::create_dir_all(dir)?;
        for limb in 0..NUM_LIMBS {
            for (c, name) in NAMES.iter().enumerate() {
                let data = self.channel(limb, c);
                let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
                    let v = data[y as usize * self.width + x as usize];
                    let unit = if c == 0 { v } else { (v + 1.0) / 2.0 };
                    Luma([(unit.clamp(0.0, 1.0) * 255.0).round() as u8])
                });
                img.save(dir.join(format!("limb{limb:02}_{name}.png")))?;
            }
        }
        Ok(())
    }
}

/// Rasterises the ground-truth maps of a pose given in map-pixel
/// coordinates.
pub fn encode_maps(
    pose2d: &Pose2D,
    orients3d: &OrientationSet,
    topo: &LimbTopology,
    d: f64,
    dims: (usize, usize),
) -> MapSet {
    let (width, height) = dims;
    let mut maps = MapSet::zeros(width, height);
    let plane = width * height;
    for (limb, &(p, c)) in topo.limbs.iter().enumerate() {
        let (a, b) = (pose2d.0[p], pose2d.0[c]);
        let delta = [b[0] - a[0], b[1] - a[1]];
        let len = geom::norm2(delta);
        let dir2 = if len < MIN_2D_LENGTH {
            [0.0, 0.0]
        } else {
            [delta[0] / len, delta[1] / len]
        };
        let dir3 = orients3d.0[limb];
        let region = LimbRegion::new(a, b, d);
        let MapSet {
            conf,
            orient2d,
            orient3d,
            ..
        } = &mut maps;
        region.for_each_pixel(width, height, |col, row| {
            let px = row * width + col;
            conf[limb * plane + px] = 1.0;
            for k in 0..2 {
                orient2d[(limb * 2 + k) * plane + px] = dir2[k] as f32;
            }
            for k in 0..3 {
                orient3d[(limb * 3 + k) * plane + px] = dir3[k] as f32;
            }
        });
    }
    maps
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MapConfig {
    pub width: usize,
    pub height: usize,
    /// Limb region width in map pixels.
    pub limb_width: f64,
}

impl MapConfig {
    /// Limb width defaults to a sixteenth of the map width.
    pub fn square(size: usize) -> Self {
        Self {
            width: size,
            height: size,
            limb_width: size as f64 / 16.0,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// 16x16 maps with 1.5-pixel limbs, matching the default 64-pixel scene.
impl Default for MapConfig {
    fn default() -> Self {
        Self {
            width: 16,
            height: 16,
            limb_width: 1.5,
        }
    }
}
