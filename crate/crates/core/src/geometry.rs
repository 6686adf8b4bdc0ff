//! Vector, plane and pose math for equirectangular panoramas.
//!
//! World frame is right-handed with `+z` up. Headings are compass angles in
//! degrees: heading 0 looks along `+y`, heading 90 along `+x`.
//!
//! Panorama pixel convention (continuous coordinates, pixel `i` covers
//! `[i, i+1)`):
//!
//! * azimuth `theta = 2*pi*x/width - pi`, measured clockwise (seen from above)
//!   from the heading direction, so `x = width/2` looks along the heading;
//! * elevation `phi = pi/2 - pi*y/height`, so `y = 0` is the zenith.
//!
//! The camera rotation is composed heading, then pitch, then roll: about `z`,
//! the rotated `x'` and the twice rotated `y''` axes respectively.

use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("ray is parallel to the plane")]
    ParallelRay,
    #[error("plane lies behind the ray origin (t = {0})")]
    BehindCamera(f64),
    #[error("point coincides with the camera center")]
    DegenerateRay,
    #[error("degenerate reference triangle: side {side} has length {length}")]
    DegenerateTriangle { side: usize, length: f64 },
    #[error("vector cannot be normalized (norm {0})")]
    ZeroVector(f64),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Point or displacement in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        [v.x, v.y, v.z]
    }
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn horizontal_distance(self, o: Vec3) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn normalize(self) -> Result<UnitVec3> {
        let n = self.norm();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(GeometryError::ZeroVector(n));
        }
        Ok(UnitVec3(self * (1.0 / n)))
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Direction of unit length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct UnitVec3(Vec3);

impl TryFrom<[f64; 3]> for UnitVec3 {
    type Error = GeometryError;
    fn try_from(a: [f64; 3]) -> Result<Self> {
        let v = Vec3::from(a);
        if (v.norm() - 1.0).abs() > 1e-6 {
            return Err(GeometryError::Domain(format!(
                "expected a unit vector, got norm {}",
                v.norm()
            )));
        }
        // Values already unit length are kept bit-exact so serialization
        // round-trips; looser ones are renormalized.
        if (v.norm() - 1.0).abs() <= 1e-12 {
            Ok(UnitVec3(v))
        } else {
            v.normalize()
        }
    }
}

impl From<UnitVec3> for [f64; 3] {
    fn from(v: UnitVec3) -> Self {
        v.0.into()
    }
}

impl UnitVec3 {
    pub const X: UnitVec3 = UnitVec3(Vec3::new(1.0, 0.0, 0.0));
    pub const Y: UnitVec3 = UnitVec3(Vec3::new(0.0, 1.0, 0.0));
    pub const Z: UnitVec3 = UnitVec3(Vec3::new(0.0, 0.0, 1.0));

    pub fn vec(self) -> Vec3 {
        self.0
    }

    pub fn x(self) -> f64 {
        self.0.x
    }

    pub fn y(self) -> f64 {
        self.0.y
    }

    pub fn z(self) -> f64 {
        self.0.z
    }

    pub fn dot(self, o: UnitVec3) -> f64 {
        self.0.dot(o.0)
    }

    pub fn flipped(self) -> UnitVec3 {
        UnitVec3(-self.0)
    }
}

/// Oriented plane `normal . p = d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: UnitVec3,
    pub d: f64,
}

impl Plane {
    pub fn new(normal: UnitVec3, d: f64) -> Self {
        Self { normal, d }
    }

    /// Normalizes a raw `[a, b, c, d]` plane so that `(a, b, c)` has unit length.
    pub fn from_abcd(abcd: [f64; 4]) -> Result<Self> {
        let n = Vec3::new(abcd[0], abcd[1], abcd[2]);
        let len = n.norm();
        let normal = n.normalize()?;
        Ok(Self { normal, d: abcd[3] / len })
    }

    pub fn signed_distance(&self, p: Vec3) -> f64 {
        self.normal.vec().dot(p) - self.d
    }

    /// Point of the plane closest to the coordinate origin.
    pub fn anchor(&self) -> Vec3 {
        self.normal.vec() * self.d
    }

    pub fn flipped(&self) -> Plane {
        Plane { normal: self.normal.flipped(), d: -self.d }
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn from_cols(a: Vec3, b: Vec3, c: Vec3) -> Self {
        Mat3([[a.x, b.x, c.x], [a.y, b.y, c.y], [a.z, b.z, c.z]])
    }

    pub fn rot_x(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Mat3([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    }

    pub fn rot_y(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Mat3([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }

    pub fn rot_z(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(r)
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Orthonormal with determinant +1, within `tol`.
    pub fn is_rotation(&self, tol: f64) -> bool {
        let p = self.mul_mat(&self.transpose());
        let ortho = (0..3).all(|i| {
            (0..3).all(|j| (p.0[i][j] - if i == j { 1.0 } else { 0.0 }).abs() <= tol)
        });
        ortho && (self.determinant() - 1.0).abs() <= tol
    }
}

/// Camera pose of a panorama in the dataset's local Cartesian frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPose", into = "RawPose")]
pub struct PanoPose {
    pub position: Vec3,
    pub heading: f64,
    pub pitch: f64,
    pub roll: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPose {
    position: Vec3,
    heading: f64,
    pitch: f64,
    roll: f64,
}

impl TryFrom<RawPose> for PanoPose {
    type Error = GeometryError;
    fn try_from(r: RawPose) -> Result<Self> {
        PanoPose::new(r.position, r.heading, r.pitch, r.roll)
    }
}

impl From<PanoPose> for RawPose {
    fn from(p: PanoPose) -> Self {
        RawPose { position: p.position, heading: p.heading, pitch: p.pitch, roll: p.roll }
    }
}

impl PanoPose {
    pub fn new(position: Vec3, heading: f64, pitch: f64, roll: f64) -> Result<Self> {
        if !position.is_finite() {
            return Err(GeometryError::Domain("pose position must be finite".into()));
        }
        if !(0.0..360.0).contains(&heading) {
            return Err(GeometryError::Domain(format!("heading {heading} outside [0, 360)")));
        }
        if !(-90.0..=90.0).contains(&pitch) {
            return Err(GeometryError::Domain(format!("pitch {pitch} outside [-90, 90]")));
        }
        if !(-180.0..=180.0).contains(&roll) {
            return Err(GeometryError::Domain(format!("roll {roll} outside [-180, 180]")));
        }
        Ok(Self { position, heading, pitch, roll })
    }

    /// Pose at `position` looking along `+y` with no tilt.
    pub fn at(position: Vec3) -> Self {
        Self { position, heading: 0.0, pitch: 0.0, roll: 0.0 }
    }

    /// Camera-to-world rotation.
    pub fn rotation(&self) -> Mat3 {
        Mat3::rot_z(-self.heading.to_radians())
            .mul_mat(&Mat3::rot_x(self.pitch.to_radians()))
            .mul_mat(&Mat3::rot_y(self.roll.to_radians()))
    }

    /// Rigid transform from the camera-local frame to the world frame.
    pub fn to_world(&self) -> RigidTransform {
        RigidTransform { rotation: self.rotation(), translation: self.position }
    }
}

/// `p_world = rotation * p_local + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform =
        RigidTransform { rotation: Mat3::IDENTITY, translation: Vec3::ZERO };

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        if !rotation.is_rotation(1e-9) {
            return Err(GeometryError::Domain("transform rotation is not a proper rotation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -rt.mul_vec(self.translation) }
    }
}

/// In-plane axes `u`, `v` and normal `n` of a plane, anchored at `origin3d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneBasis {
    pub u: UnitVec3,
    pub v: UnitVec3,
    pub n: UnitVec3,
    pub origin3d: Vec3,
}

impl PlaneBasis {
    pub fn to_world(&self, uv: (f64, f64)) -> Vec3 {
        self.origin3d + self.u.vec() * uv.0 + self.v.vec() * uv.1
    }

    /// In-plane coordinates of `p` (its orthogonal projection).
    pub fn to_plane(&self, p: Vec3) -> (f64, f64) {
        let r = p - self.origin3d;
        (r.dot(self.u.vec()), r.dot(self.v.vec()))
    }

    /// World-to-plane rotation, rows `u`, `v`, `n`.
    pub fn world_to_plane(&self) -> Mat3 {
        Mat3::from_cols(self.u.vec(), self.v.vec(), self.n.vec()).transpose()
    }
}

/// World direction of the ray through panorama pixel `(x, y)`.
pub fn pixel_to_dir(x: f64, y: f64, width: u32, height: u32, pose: &PanoPose) -> Result<UnitVec3> {
    let (w, h) = (f64::from(width), f64::from(height));
    if width == 0 || height == 0 || !(0.0..w).contains(&x) || !(0.0..h).contains(&y) {
        return Err(GeometryError::Domain(format!(
            "pixel ({x}, {y}) outside {width}x{height} panorama"
        )));
    }
    let theta = 2.0 * PI * x / w - PI;
    let phi = FRAC_PI_2 - PI * y / h;
    let local = Vec3::new(phi.cos() * theta.sin(), phi.cos() * theta.cos(), phi.sin());
    pose.rotation().mul_vec(local).normalize()
}

/// Forward intersection of a ray with a plane.
pub fn ray_plane_intersect(origin: Vec3, dir: UnitVec3, plane: &Plane) -> Result<Vec3> {
    let denom = plane.normal.dot(dir);
    if denom.abs() < 1e-9 {
        return Err(GeometryError::ParallelRay);
    }
    let t = (plane.d - plane.normal.vec().dot(origin)) / denom;
    if t <= 0.0 {
        return Err(GeometryError::BehindCamera(t));
    }
    Ok(origin + dir.vec() * t)
}

/// Panorama pixel `(u, v)` where world point `p` is seen from `pose`.
///
/// Points straight up or down map to `u = width/2`.
pub fn project_world_to_pano(p: Vec3, pose: &PanoPose, width: u32, height: u32) -> Result<(f64, f64)> {
    let ray = p - pose.position;
    let len = ray.norm();
    if len < 1e-12 {
        return Err(GeometryError::DegenerateRay);
    }
    let local = pose.rotation().transpose().mul_vec(ray * (1.0 / len));
    let (w, h) = (f64::from(width), f64::from(height));
    let horiz = local.x.hypot(local.y);
    let phi = local.z.atan2(horiz);
    let v = (FRAC_PI_2 - phi) / PI * h;
    let u = if horiz < 1e-12 {
        w / 2.0
    } else {
        let theta = local.x.atan2(local.y);
        let u = (theta + PI) / (2.0 * PI) * w;
        if u >= w {
            u - w
        } else {
            u
        }
    };
    Ok((u, v))
}

/// Re-expresses a plane given in a local frame in the frame `t` maps into.
pub fn transform_plane(local: &Plane, t: &RigidTransform) -> Plane {
    let n = t.rotation.mul_vec(local.normal.vec());
    // Rotation preserves length; renormalize to shed rounding drift.
    let n = n.normalize().unwrap_or(local.normal);
    Plane { normal: n, d: local.d + n.vec().dot(t.translation) }
}

/// Right-handed in-plane basis with `v` pointing up for non-horizontal planes.
pub fn plane_basis(plane: &Plane) -> PlaneBasis {
    let n = plane.normal;
    let (u, v) = if n.z().abs() < 0.99 {
        let u = n.vec().cross(Vec3::new(0.0, 0.0, 1.0));
        let u = u.normalize().expect("non-vertical normal has a horizontal cross product");
        let v = n.vec().cross(u.vec());
        if v.z < 0.0 {
            // Flip both axes so u x v = n still holds.
            (u.flipped(), UnitVec3(-v))
        } else {
            (u, UnitVec3(v))
        }
    } else {
        let u = Vec3::new(1.0, 0.0, 0.0);
        // Gram-Schmidt against the normal so the basis stays orthogonal for
        // nearly horizontal planes.
        let u = (u - n.vec() * u.dot(n.vec())).normalize().unwrap_or(UnitVec3::X);
        let v = n.vec().cross(u.vec());
        (u, UnitVec3(v))
    };
    let v = v.vec().normalize().unwrap_or(v);
    PlaneBasis { u, v, n, origin3d: plane.anchor() }
}

/// Metric scale of a reconstruction from a measured reference triangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleEstimate {
    /// Mean of per-side measured/reconstructed ratios.
    pub scale: f64,
    pub ratios: [f64; 3],
    /// `(max - min) / mean` over the three ratios.
    pub spread: f64,
}

impl ScaleEstimate {
    /// Spread above this is reported as a warning.
    pub const SPREAD_WARNING: f64 = 0.05;

    pub fn has_warning(&self) -> bool {
        self.spread > Self::SPREAD_WARNING
    }
}

/// `measured_lengths[i]` is the side opposite vertex `i`.
pub fn estimate_scale_from_triangle(
    recon_positions: [Vec3; 3],
    measured_lengths: [f64; 3],
) -> Result<ScaleEstimate> {
    let mut ratios = [0.0; 3];
    for i in 0..3 {
        let a = recon_positions[(i + 1) % 3];
        let b = recon_positions[(i + 2) % 3];
        let side = a.distance(b);
        if !(side >= 1e-9) {
            return Err(GeometryError::DegenerateTriangle { side: i, length: side });
        }
        if !(measured_lengths[i] > 0.0) {
            return Err(GeometryError::Domain(format!(
                "measured length {i} must be positive, got {}",
                measured_lengths[i]
            )));
        }
        ratios[i] = measured_lengths[i] / side;
    }
    let scale = ratios.iter().sum::<f64>() / 3.0;
    let max = ratios.iter().cloned().fold(f64::MIN, f64::max);
    let min = ratios.iter().cloned().fold(f64::MAX, f64::min);
    Ok(ScaleEstimate { scale, ratios, spread: (max - min) / scale })
}
