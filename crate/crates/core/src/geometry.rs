//! Rigid transforms, pinhole cameras and per-pixel lines of sight.
//!
//! Every ray and object pose is expressed in the frame of the reference
//! camera (view 1). A camera's extrinsics map points from its own frame into
//! that reference frame.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating rotation matrices and unit vectors.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// A rigid transform `x -> rotation * x + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose after checking that `rotation` is a proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite translation".into()));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Returns the same pose with the translation multiplied by `factor`
    /// (used for meter/millimeter conversion).
    pub fn scale_translation(&self, factor: f64) -> Pose {
        Pose {
            rotation: self.rotation,
            translation: self.translation * factor,
        }
    }
}

/// Checks `RᵀR = I` and `det R = +1` elementwise within [`ROTATION_TOLERANCE`].
pub fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::NotRotation("non-finite entries".into()));
    }
    let residual = (r.transpose() * r - Matrix3::identity()).abs().max();
    if residual > ROTATION_TOLERANCE {
        return Err(Error::NotRotation(format!("|RᵀR - I| = {residual:e}")));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(Error::NotRotation(format!("det = {det}")));
    }
    Ok(())
}

/// Applies `b` then `a`.
pub fn compose_pose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn invert_pose(p: &Pose) -> Pose {
    p.inverse()
}

/// Rotation of `angle` radians about `axis` (need not be normalized).
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let unit = nalgebra::Unit::new_normalize(*axis);
    *nalgebra::Rotation3::from_axis_angle(&unit, angle).matrix()
}

/// Interior orientation of a pinhole camera with zero skew and no distortion.
///
/// Pixel coordinates are continuous: integer pixel `(u, v)` covers
/// `[u, u + 1) × [v, v + 1)`, so its center sits at `(u + 0.5, v + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal: Vector2<f64>,
    pub principal_point: Vector2<f64>,
    pub image_size: Vector2<f64>,
}

impl CameraIntrinsics {
    pub fn new(
        focal: Vector2<f64>,
        principal_point: Vector2<f64>,
        image_size: Vector2<f64>,
    ) -> Result<Self> {
        if !(focal.x > 0.0 && focal.y > 0.0) {
            return Err(Error::InvalidCamera(format!("focal must be positive, got {focal:?}")));
        }
        if !(image_size.x >= 1.0 && image_size.y >= 1.0) {
            return Err(Error::InvalidCamera(format!(
                "image size must be at least 1x1, got {image_size:?}"
            )));
        }
        Ok(CameraIntrinsics {
            focal,
            principal_point,
            image_size,
        })
    }

    /// Square-pixel camera with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            Vector2::new(focal, focal),
            Vector2::new(width as f64 / 2.0, height as f64 / 2.0),
            Vector2::new(width as f64, height as f64),
        )
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.focal.x,
            0.0,
            self.principal_point.x,
            0.0,
            self.focal.y,
            self.principal_point.y,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn width(&self) -> usize {
        self.image_size.x as usize
    }

    pub fn height(&self) -> usize {
        self.image_size.y as usize
    }

    /// Projects a point given in this camera's own frame.
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        if p.z <= 0.0 {
            return Err(Error::BehindCamera(p.z));
        }
        Ok(Vector2::new(
            self.focal.x * p.x / p.z + self.principal_point.x,
            self.focal.y * p.y / p.z + self.principal_point.y,
        ))
    }

    /// Unit direction, in this camera's frame, through an image-space pixel
    /// coordinate.
    pub fn unproject(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.principal_point.x) / self.focal.x,
            (pixel.y - self.principal_point.y) / self.focal.y,
            1.0,
        )
        .normalize()
    }
}

/// Relative orientation: the pose of a camera in the reference-camera frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraExtrinsics {
    pub camera_to_reference: Pose,
}

impl CameraExtrinsics {
    pub fn reference() -> Self {
        CameraExtrinsics {
            camera_to_reference: Pose::identity(),
        }
    }

    pub fn new(camera_to_reference: Pose) -> Result<Self> {
        check_rotation(&camera_to_reference.rotation)?;
        Ok(CameraExtrinsics {
            camera_to_reference,
        })
    }

    pub fn center(&self) -> Vector3<f64> {
        self.camera_to_reference.translation
    }
}

/// A line of sight in the reference-camera frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Result<Self> {
        let n = direction.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::InvalidCamera("zero ray direction".into()));
        }
        Ok(Ray {
            origin,
            direction: direction / n,
        })
    }

    pub fn at(&self, s: f64) -> Vector3<f64> {
        self.origin + self.direction * s
    }

    /// Distance from `p` to the ray's supporting line.
    pub fn distance_to(&self, p: &Vector3<f64>) -> f64 {
        let d = p - self.origin;
        (d - self.direction * d.dot(&self.direction)).norm()
    }
}

/// Line-of-sight encodings compared in the ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LosMode {
    DirOnly,
    #[default]
    DirOrigin,
    Pluecker,
    PlueckerOrigin,
}

impl LosMode {
    pub const ALL: [LosMode; 4] = [
        LosMode::DirOrigin,
        LosMode::DirOnly,
        LosMode::Pluecker,
        LosMode::PlueckerOrigin,
    ];

    pub fn ray_dim(self) -> usize {
        match self {
            LosMode::DirOnly => 3,
            LosMode::DirOrigin | LosMode::Pluecker => 6,
            LosMode::PlueckerOrigin => 9,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LosMode::DirOnly => "dir_only",
            LosMode::DirOrigin => "dir_origin",
            LosMode::Pluecker => "pluecker",
            LosMode::PlueckerOrigin => "pluecker_origin",
        }
    }
}

impl std::str::FromStr for LosMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LosMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown line-of-sight mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LosCode {
    pub mode: LosMode,
    pub values: Vec<f64>,
}

impl LosCode {
    pub fn direction(&self) -> Vector3<f64> {
        Vector3::new(self.values[0], self.values[1], self.values[2])
    }

    /// The moment block for the Plücker modes.
    pub fn moment(&self) -> Option<Vector3<f64>> {
        match self.mode {
            LosMode::Pluecker | LosMode::PlueckerOrigin => {
                Some(Vector3::new(self.values[3], self.values[4], self.values[5]))
            }
            _ => None,
        }
    }
}

/// Ray through a continuous feature-map coordinate `pixel` of a map whose
/// cells are `scale` image pixels wide. Cell `(i, j)` is sampled at its center
/// `(i + 0.5, j + 0.5)`, i.e. at image position `(i + 0.5) * scale`.
pub fn pixel_ray(
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
    pixel: &Vector2<f64>,
    scale: f64,
) -> Result<Ray> {
    if !(scale > 0.0) {
        return Err(Error::InvalidCamera(format!("scale must be positive, got {scale}")));
    }
    let width = intr.image_size.x / scale;
    let height = intr.image_size.y / scale;
    if !(pixel.x >= 0.0 && pixel.x <= width && pixel.y >= 0.0 && pixel.y <= height) {
        return Err(Error::OutOfBounds {
            x: pixel.x,
            y: pixel.y,
            width,
            height,
        });
    }
    let dir_cam = intr.unproject(&(pixel * scale));
    let pose = &extr.camera_to_reference;
    Ray::new(pose.translation, pose.rotation * dir_cam)
}

/// Encodes a ray. Plücker moments use the ray origin as the point on the
/// line: `m = direction × origin`.
pub fn encode_los(ray: &Ray, mode: LosMode) -> LosCode {
    let mut values = Vec::with_capacity(mode.ray_dim());
    values.extend_from_slice(ray.direction.as_slice());
    match mode {
        LosMode::DirOnly => {}
        LosMode::DirOrigin => values.extend_from_slice(ray.origin.as_slice()),
        LosMode::Pluecker => values.extend_from_slice(ray.direction.cross(&ray.origin).as_slice()),
        LosMode::PlueckerOrigin => {
            values.extend_from_slice(ray.direction.cross(&ray.origin).as_slice());
            values.extend_from_slice(ray.origin.as_slice());
        }
    }
    LosCode { mode, values }
}

/// Pinhole projection of a reference-frame point into the given camera.
pub fn project_point(
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
    point: &Vector3<f64>,
) -> Result<Vector2<f64>> {
    let p_cam = extr.camera_to_reference.inverse().transform_point(point);
    intr.project_camera_point(&p_cam)
}

/// Row-major `h*w × ray_dim` table of line-of-sight codes for every cell of a
/// `w × h` feature map with the given downsampling `scale`.
pub fn los_map(
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
    width: usize,
    height: usize,
    scale: f64,
    mode: LosMode,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(width * height * mode.ray_dim());
    for j in 0..height {
        for i in 0..width {
            let px = Vector2::new(i as f64 + 0.5, j as f64 + 0.5);
            let ray = pixel_ray(intr, extr, &px, scale)?;
            out.extend(encode_los(&ray, mode).values);
        }
    }
    Ok(out)
}

/// Camera parameters in the BOP JSON convention (translation in millimeters,
/// world-to-camera transform).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraJson {
    #[serde(rename = "cam_K")]
    pub cam_k: [f64; 9],
    #[serde(rename = "cam_R_w2c")]
    pub cam_r_w2c: [f64; 9],
    #[serde(rename = "cam_t_w2c")]
    pub cam_t_w2c: [f64; 3],
}

impl CameraJson {
    /// `world_to_camera` translation is in meters.
    pub fn new(intr: &CameraIntrinsics, world_to_camera: &Pose) -> Self {
        CameraJson {
            cam_k: matrix_to_row_major(&intr.matrix()),
            cam_r_w2c: matrix_to_row_major(&world_to_camera.rotation),
            cam_t_w2c: (world_to_camera.translation * 1000.0).into(),
        }
    }

    pub fn intrinsics(&self, width: usize, height: usize) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            Vector2::new(self.cam_k[0], self.cam_k[4]),
            Vector2::new(self.cam_k[2], self.cam_k[5]),
            Vector2::new(width as f64, height as f64),
        )
    }

    /// World-to-camera pose in meters.
    pub fn world_to_camera(&self) -> Result<Pose> {
        Pose::new(
            matrix_from_row_major(&self.cam_r_w2c),
            Vector3::from(self.cam_t_w2c) / 1000.0,
        )
    }
}

pub fn matrix_to_row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

pub fn matrix_from_row_major(v: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::from_row_slice(v)
}

/// Look-at camera-to-world pose with the camera z axis toward `target` and
/// image y pointing as close to `-up` as possible.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Result<Pose> {
    let z = (target - eye).normalize();
    let mut x = z.cross(up);
    if x.norm() < 1e-9 {
        x = z.cross(&Vector3::new(1.0, 0.0, 0.0));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    Pose::new(Matrix3::from_columns(&[x, y, z]), *eye)
}
