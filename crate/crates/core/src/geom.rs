//! Small fixed-size vector helpers and the pixel-membership rules shared by
//! map encoding, rendering and erasing.
//!
//! Pixel `(col, row)` has its centre at integer coordinates `(col, row)` and
//! covers `[col - 0.5, col + 0.5] x [row - 0.5, row + 0.5]`; an `a x a` image
//! spans `[-0.5, a - 0.5]` on both axes. A pixel belongs to a region when its
//! centre does.

pub type Vec3 = [f64; 3];
pub type Vec2 = [f64; 2];
pub type Mat3 = [[f64; 3]; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, k: f64) -> Vec3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Unit vector along `a`; the zero vector stays zero.
pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    if n > 0.0 {
        scale(a, 1.0 / n)
    } else {
        [0.0; 3]
    }
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

/// Rotation by `angle` radians about unit `axis` (Rodrigues).
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let [x, y, z] = normalize(axis);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Angle between two non-zero vectors, radians.
pub fn angle_between(a: Vec3, b: Vec3) -> f64 {
    let c = dot(a, b) / (norm(a) * norm(b));
    c.clamp(-1.0, 1.0).acos()
}

pub fn norm2(a: Vec2) -> f64 {
    (a[0] * a[0] + a[1] * a[1]).sqrt()
}

/// Centre of pixel `(col, row)`.
pub fn pixel_center(col: usize, row: usize) -> Vec2 {
    [col as f64, row as f64]
}

/// Rectangle swept by a segment `a -> b`: closed along the axis, open across
/// it (distance to the axis strictly below `half_width`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedRect {
    pub a: Vec2,
    pub b: Vec2,
    pub half_width: f64,
}

impl OrientedRect {
    /// A zero-length axis contains nothing.
    pub fn contains(&self, p: Vec2) -> bool {
        let axis = [self.b[0] - self.a[0], self.b[1] - self.a[1]];
        let len = norm2(axis);
        let rel = [p[0] - self.a[0], p[1] - self.a[1]];
        if len == 0.0 {
            return false;
        }
        let u = [axis[0] / len, axis[1] / len];
        let along = rel[0] * u[0] + rel[1] * u[1];
        let across = (rel[0] * u[1] - rel[1] * u[0]).abs();
        (0.0..=len).contains(&along) && across < self.half_width
    }

    /// Pixel-index bounding box `(col0, row0, col1, row1)`, inclusive, clipped
    /// to `width x height`; `None` when it misses the image entirely.
    pub fn pixel_bounds(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let h = self.half_width;
        let lo_x = self.a[0].min(self.b[0]) - h;
        let hi_x = self.a[0].max(self.b[0]) + h;
        let lo_y = self.a[1].min(self.b[1]) - h;
        let hi_y = self.a[1].max(self.b[1]) + h;
        clip_bounds(lo_x, hi_x, lo_y, hi_y, width, height)
    }
}

/// Pixels whose centres could lie within `[lo, hi]` on each axis.
pub(crate) fn clip_bounds(
    lo_x: f64,
    hi_x: f64,
    lo_y: f64,
    hi_y: f64,
    width: usize,
    height: usize,
) -> Option<(usize, usize, usize, usize)> {
    let c0 = lo_x.ceil().max(0.0);
    let c1 = hi_x.floor().min(width as f64 - 1.0);
    let r0 = lo_y.ceil().max(0.0);
    let r1 = hi_y.floor().min(height as f64 - 1.0);
    if !(c0 <= c1 && r0 <= r1) || !c0.is_finite() || !r0.is_finite() {
        return None;
    }
    Some((c0 as usize, r0 as usize, c1 as usize, r1 as usize))
}

/// Axis-aligned open square of side `side` centred on `center`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Square {
    pub center: Vec2,
    pub side: f64,
}

impl Square {
    pub fn contains(&self, p: Vec2) -> bool {
        let h = self.side / 2.0;
        (p[0] - self.center[0]).abs() < h && (p[1] - self.center[1]).abs() < h
    }

    pub fn pixel_bounds(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let h = self.side / 2.0;
        clip_bounds(
            self.center[0] - h,
            self.center[0] + h,
            self.center[1] - h,
            self.center[1] + h,
            width,
            height,
        )
    }
}

/// Open disc.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disc {
    pub center: Vec2,
    pub radius: f64,
}

impl Disc {
    pub fn contains(&self, p: Vec2) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        d[0] * d[0] + d[1] * d[1] < self.radius * self.radius
    }

    pub fn pixel_bounds(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let r = self.radius;
        clip_bounds(
            self.center[0] - r,
            self.center[0] + r,
            self.center[1] - r,
            self.center[1] + r,
            width,
            height,
        )
    }
}

/// Calls `f(col, row)` for every pixel whose centre satisfies `inside`
/// within the given inclusive bounds.
pub(crate) fn for_each_pixel(
    bounds: Option<(usize, usize, usize, usize)>,
    inside: impl Fn(Vec2) -> bool,
    mut f: impl FnMut(usize, usize),
) {
    let Some((c0, r0, c1, r1)) = bounds else {
        return;
    };
    for row in r0..=r1 {
        for col in c0..=c1 {
            if inside(pixel_center(col, row)) {
                f(col, row);
            }
        }
    }
}
