//! Procedural MV-ball scenes: a gray sphere with two extruded hemispherical
//! caps whose axes are 90° apart, dropped onto a floor among distractors and
//! viewed by cameras chosen so that each view shows exactly one cap.

pub mod dataset;
pub mod raster;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_angle, look_at, CameraExtrinsics, CameraIntrinsics, Pose};
pub use raster::{Frame, PixelLabel, Primitive, Shape};

/// Original 640×480 image size and its visibility thresholds in pixels.
pub const BASE_IMAGE_SIZE: (usize, usize) = (640, 480);
pub const BASE_EASY_PIXELS: usize = 300;
pub const BASE_HARD_PIXELS: usize = 10;

/// Rescales a pixel-count threshold from 640×480 images to
/// `width × height`, rounding up.
pub fn scaled_threshold(base_pixels: usize, width: usize, height: usize) -> usize {
    let full = BASE_IMAGE_SIZE.0 * BASE_IMAGE_SIZE.1;
    (base_pixels * width * height).div_ceil(full).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MVBallSpec {
    /// Meters.
    pub sphere_radius: f64,
    pub cap_angular_radius_deg: f64,
    pub cap_axis_separation_deg: f64,
    pub cap_colors: [[u8; 3]; 2],
    pub sphere_color: [u8; 3],
    pub floor_color: [u8; 3],
    pub background_color: [u8; 3],
    pub image_size: [usize; 2],
    /// Pixels; defaults to the image width when absent.
    pub focal_length: Option<f64>,
    pub max_distractors: usize,
    /// Camera distance to the look-at point, meters.
    pub camera_distance: [f64; 2],
    /// Camera elevation above the floor plane, degrees.
    pub camera_elevation_deg: [f64; 2],
    /// Uniform jitter of the look-at point around the ball center, meters.
    pub look_at_jitter: f64,
    pub attempt_cap: usize,
    /// Largest tolerated fraction of the object silhouette hidden by
    /// distractors.
    pub max_occlusion: f64,
}

impl Default for MVBallSpec {
    fn default() -> Self {
        MVBallSpec {
            sphere_radius: 0.1,
            cap_angular_radius_deg: 25.0,
            cap_axis_separation_deg: 90.0,
            cap_colors: [[220, 50, 40], [40, 80, 230]],
            sphere_color: [128, 128, 128],
            floor_color: [96, 112, 88],
            background_color: [24, 24, 32],
            image_size: [64, 64],
            focal_length: None,
            max_distractors: 4,
            camera_distance: [0.5, 0.8],
            camera_elevation_deg: [15.0, 75.0],
            look_at_jitter: 0.02,
            attempt_cap: 512,
            max_occlusion: 0.5,
        }
    }
}

impl MVBallSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.sphere_radius > 0.0 && self.sphere_radius.is_finite()) {
            return bad("sphere_radius must be positive");
        }
        if !(self.cap_angular_radius_deg > 0.0 && self.cap_angular_radius_deg < 90.0) {
            return bad("cap_angular_radius_deg must lie in (0, 90)");
        }
        if !(self.cap_axis_separation_deg > 0.0 && self.cap_axis_separation_deg <= 180.0) {
            return bad("cap_axis_separation_deg must lie in (0, 180]");
        }
        if self.cap_colors[0] == self.cap_colors[1] {
            return bad("cap colors must differ");
        }
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return bad("image_size must be positive");
        }
        if self.focal_length.is_some_and(|f| !(f > 0.0)) {
            return bad("focal_length must be positive");
        }
        let [d0, d1] = self.camera_distance;
        if !(d0 > self.outer_radius() && d0 <= d1) {
            return bad("camera_distance must be ordered and clear the object");
        }
        let [e0, e1] = self.camera_elevation_deg;
        if !(0.0 < e0 && e0 <= e1 && e1 < 90.0) {
            return bad("camera_elevation_deg must be ordered within (0, 90)");
        }
        if self.attempt_cap == 0 {
            return bad("attempt_cap must be positive");
        }
        if !(0.0..=1.0).contains(&self.max_occlusion) {
            return bad("max_occlusion must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let [w, h] = self.image_size;
        CameraIntrinsics::centered(self.focal_length.unwrap_or(w as f64), w, h)
            .expect("validated spec")
    }

    /// Cap axes in the object frame: cap A along +x, cap B rotated from it
    /// about +z by the axis separation.
    pub fn cap_axes(&self) -> [Vector3<f64>; 2] {
        let s = self.cap_axis_separation_deg.to_radians();
        [Vector3::x(), Vector3::new(s.cos(), s.sin(), 0.0)]
    }

    /// Each cap is a sphere of radius `r sin α` centered at `r cos α` along
    /// its axis, so it meets the main sphere exactly on its own equator.
    fn cap_sphere(&self) -> (f64, f64) {
        let a = self.cap_angular_radius_deg.to_radians();
        (self.sphere_radius * a.cos(), self.sphere_radius * a.sin())
    }

    /// Radius of a ball around the object center containing both caps.
    pub fn outer_radius(&self) -> f64 {
        let (off, r) = self.cap_sphere();
        (off + r).max(self.sphere_radius)
    }

    /// Surface samples in the object frame (meters) used for ADD metrics.
    pub fn model_points(&self, per_part: usize) -> Vec<Vector3<f64>> {
        let mut pts = fibonacci_sphere(per_part)
            .into_iter()
            .map(|v| v * self.sphere_radius)
            .filter(|p| self.cap_axes().iter().all(|a| p.dot(a) < self.cap_sphere().0))
            .collect::<Vec<_>>();
        let (off, r) = self.cap_sphere();
        for axis in self.cap_axes() {
            for v in fibonacci_sphere(per_part) {
                if v.dot(&axis) > 0.0 {
                    pts.push(axis * off + v * r);
                }
            }
        }
        pts
    }

    /// Distance from the object center to the lowest point of the object in
    /// the given orientation, i.e. the resting height above the floor.
    fn resting_height(&self, rotation: &Matrix3<f64>) -> f64 {
        let (off, r) = self.cap_sphere();
        let mut lowest = -self.sphere_radius;
        for axis in self.cap_axes() {
            let a = rotation * axis;
            let c = a.z * off;
            let drop = if a.z <= 0.0 {
                r
            } else {
                r * (1.0 - a.z * a.z).max(0.0).sqrt()
            };
            lowest = lowest.min(c - drop);
        }
        -lowest
    }
}

fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let rho = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vector3::new(rho * phi.cos(), rho * phi.sin(), z)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorKind {
    Cuboid,
    Cone,
    Sphere,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub kind: DistractorKind,
    pub pose: Pose,
    /// Half extents for cuboids, `(radius, height, _)` for cones and
    /// `(radius, _, _)` for spheres.
    pub size: Vector3<f64>,
    pub color: [u8; 3],
}

impl Distractor {
    fn primitive(&self) -> Primitive {
        let shape = match self.kind {
            DistractorKind::Cuboid => Shape::Cuboid {
                pose: self.pose,
                half_extents: self.size,
            },
            DistractorKind::Cone => Shape::Cone {
                pose: self.pose,
                radius: self.size.x,
                height: self.size.y,
            },
            DistractorKind::Sphere => Shape::Sphere {
                center: self.pose.translation,
                radius: self.size.x,
            },
        };
        Primitive {
            shape,
            color: self.color,
            label: PixelLabel::Distractor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub object_pose_world: Pose,
    pub distractors: Vec<Distractor>,
    pub floor_height: f64,
}

pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    // Shoemake's method: uniform unit quaternion.
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let q = nalgebra::Quaternion::new(
        u1.sqrt() * (tau * u3).cos(),
        (1.0 - u1).sqrt() * (tau * u2).sin(),
        (1.0 - u1).sqrt() * (tau * u2).cos(),
        u1.sqrt() * (tau * u3).sin(),
    );
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

fn distractor_palette(rng: &mut impl Rng) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 6] = [
        [200, 180, 60],
        [70, 170, 90],
        [150, 90, 170],
        [210, 130, 60],
        [60, 170, 180],
        [180, 180, 170],
    ];
    PALETTE[rng.random_range(0..PALETTE.len())]
}

pub fn sample_scene(rng_seed: u64, spec: &MVBallSpec) -> Result<SceneSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let rotation = random_rotation(&mut rng);
    let floor_height = 0.0;
    let lateral = 0.2 * spec.sphere_radius;
    let center = Vector3::new(
        rng.random_range(-lateral..=lateral),
        rng.random_range(-lateral..=lateral),
        floor_height + spec.resting_height(&rotation),
    );
    let object_pose_world = Pose::new(rotation, center)?;

    let count = rng.random_range(0..=spec.max_distractors);
    let mut distractors = Vec::with_capacity(count);
    let clearance = spec.outer_radius();
    let scale = spec.sphere_radius;
    for _ in 0..count {
        let kind = match rng.random_range(0..3) {
            0 => DistractorKind::Cuboid,
            1 => DistractorKind::Cone,
            _ => DistractorKind::Sphere,
        };
        let (size, height, footprint) = match kind {
            DistractorKind::Cuboid => {
                let h = Vector3::new(
                    rng.random_range(0.2..0.6) * scale,
                    rng.random_range(0.2..0.6) * scale,
                    rng.random_range(0.2..0.8) * scale,
                );
                (h, h.z, h.x.hypot(h.y))
            }
            DistractorKind::Cone => {
                let r = rng.random_range(0.2..0.5) * scale;
                let h = rng.random_range(0.5..1.5) * scale;
                (Vector3::new(r, h, 0.0), 0.0, r)
            }
            DistractorKind::Sphere => {
                let r = rng.random_range(0.2..0.6) * scale;
                (Vector3::new(r, 0.0, 0.0), r, r)
            }
        };
        let dist = clearance + footprint + rng.random_range(0.2..2.0) * scale;
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let yaw = axis_angle(&Vector3::z(), rng.random_range(0.0..std::f64::consts::TAU));
        let pos = Vector3::new(
            center.x + dist * phi.cos(),
            center.y + dist * phi.sin(),
            floor_height + height,
        );
        distractors.push(Distractor {
            kind,
            pose: Pose::new(yaw, pos)?,
            size,
            color: distractor_palette(&mut rng),
        });
    }
    Ok(SceneSample {
        object_pose_world,
        distractors,
        floor_height,
    })
}

impl SceneSample {
    fn object_primitives(&self, spec: &MVBallSpec) -> Vec<Primitive> {
        let pose = &self.object_pose_world;
        let (off, r) = spec.cap_sphere();
        let [a, b] = spec.cap_axes();
        let labels = [PixelLabel::CapA, PixelLabel::CapB];
        let mut prims = vec![Primitive {
            shape: Shape::Sphere {
                center: pose.translation,
                radius: spec.sphere_radius,
            },
            color: spec.sphere_color,
            label: PixelLabel::Sphere,
        }];
        for (i, axis) in [a, b].iter().enumerate() {
            prims.push(Primitive {
                shape: Shape::Sphere {
                    center: pose.transform_point(&(axis * off)),
                    radius: r,
                },
                color: spec.cap_colors[i],
                label: labels[i],
            });
        }
        prims
    }

    pub fn primitives(&self, spec: &MVBallSpec) -> Vec<Primitive> {
        let mut prims = vec![Primitive {
            shape: Shape::Floor {
                height: self.floor_height,
            },
            color: spec.floor_color,
            label: PixelLabel::Floor,
        }];
        prims.extend(self.object_primitives(spec));
        prims.extend(self.distractors.iter().map(Distractor::primitive));
        prims
    }

    /// The same scene with the object rotated about one of its own cap axes.
    pub fn rotated_about_cap(&self, spec: &MVBallSpec, cap: usize, angle: f64) -> SceneSample {
        let axis = spec.cap_axes()[cap];
        let rot = self.object_pose_world.rotation * axis_angle(&axis, angle);
        SceneSample {
            object_pose_world: Pose {
                rotation: rot,
                translation: self.object_pose_world.translation,
            },
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
        )
    }

    pub fn to_array(&self) -> [usize; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Tight box around the pixels where `mask` holds.
pub fn tight_bbox(mask: impl Fn(usize) -> bool, width: usize, height: usize) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..height {
        for x in 0..width {
            if mask(y * width + x) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0 != usize::MAX).then(|| BBox {
        x: x0,
        y: y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB8.
    pub image: Vec<u8>,
    pub labels: Vec<PixelLabel>,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
    pub camera_to_world: Pose,
    pub object_pose_cam: Pose,
    /// Box of the visible object pixels.
    pub bbox: BBox,
    pub cap_visibility: [usize; 2],
    pub visible_pixels: usize,
    /// Object pixels ignoring distractors.
    pub silhouette_pixels: usize,
}

impl RenderedView {
    pub fn occlusion(&self) -> f64 {
        1.0 - self.visible_pixels as f64 / self.silhouette_pixels as f64
    }

    pub fn object_region_equal(&self, other: &RenderedView) -> bool {
        self.labels.len() == other.labels.len()
            && (0..self.labels.len()).all(|i| {
                let obj = self.labels[i].is_object() || other.labels[i].is_object();
                !obj || (self.labels[i] == other.labels[i]
                    && self.image[i * 3..i * 3 + 3] == other.image[i * 3..i * 3 + 3])
            })
    }
}

/// Renders the scene through a camera placed at `camera_to_world`; the
/// returned extrinsics are relative to `reference_to_world` (pass the same
/// pose for a reference view).
pub fn render_view(
    scene: &SceneSample,
    spec: &MVBallSpec,
    intrinsics: &CameraIntrinsics,
    camera_to_world: &Pose,
    reference_to_world: &Pose,
) -> Result<RenderedView> {
    let frame = raster::rasterize(
        &scene.primitives(spec),
        intrinsics,
        camera_to_world,
        spec.background_color,
    );
    let (w, h) = (frame.width, frame.height);
    let silhouette_pixels = frame.object_mask.iter().filter(|&&m| m).count();
    if silhouette_pixels == 0 {
        return Err(Error::EmptyRender);
    }
    let count = |l: PixelLabel| frame.labels.iter().filter(|&&x| x == l).count();
    let cap_visibility = [count(PixelLabel::CapA), count(PixelLabel::CapB)];
    let visible_pixels = frame.labels.iter().filter(|l| l.is_object()).count();
    let bbox = tight_bbox(|i| frame.labels[i].is_object(), w, h).ok_or(Error::EmptyRender)?;
    let world_to_cam = camera_to_world.inverse();
    Ok(RenderedView {
        width: w,
        height: h,
        image: frame.rgb,
        labels: frame.labels,
        intrinsics: *intrinsics,
        extrinsics: if camera_to_world == reference_to_world {
            CameraExtrinsics::reference()
        } else {
            CameraExtrinsics::new(reference_to_world.inverse().compose(camera_to_world))?
        },
        camera_to_world: *camera_to_world,
        object_pose_cam: world_to_cam.compose(&scene.object_pose_world),
        bbox,
        cap_visibility,
        visible_pixels,
        silhouette_pixels,
    })
}

/// Counts of cap pixels when only the object is rendered.
pub fn self_visibility(
    scene: &SceneSample,
    spec: &MVBallSpec,
    intrinsics: &CameraIntrinsics,
    camera_to_world: &Pose,
) -> [usize; 2] {
    let frame = raster::rasterize(
        &scene.object_primitives(spec),
        intrinsics,
        camera_to_world,
        spec.background_color,
    );
    let count = |l: PixelLabel| frame.labels.iter().filter(|&&x| x == l).count();
    [count(PixelLabel::CapA), count(PixelLabel::CapB)]
}

/// Draws a camera-to-world pose looking at the object from the configured
/// distance and elevation band.
pub fn sample_camera(scene: &SceneSample, spec: &MVBallSpec, rng: &mut impl Rng) -> Pose {
    let [e0, e1] = spec.camera_elevation_deg.map(f64::to_radians);
    // Uniform in area on the spherical band.
    let z = rng.random_range(e0.sin()..=e1.sin());
    let az = rng.random_range(0.0..std::f64::consts::TAU);
    let rho = (1.0 - z * z).sqrt();
    let dir = Vector3::new(rho * az.cos(), rho * az.sin(), z);
    let [d0, d1] = spec.camera_distance;
    let dist = rng.random_range(d0..=d1);
    let j = spec.look_at_jitter;
    let target = scene.object_pose_world.translation
        + Vector3::new(
            rng.random_range(-j..=j),
            rng.random_range(-j..=j),
            rng.random_range(-j..=j),
        );
    look_at(&(target + dir * dist), &target, &Vector3::z()).expect("camera above floor")
}

fn view_shows_only(
    scene: &SceneSample,
    spec: &MVBallSpec,
    cam: &Pose,
    reference: &Pose,
    cap: usize,
    min_pixels: usize,
) -> Option<RenderedView> {
    let intr = spec.intrinsics();
    let view = render_view(scene, spec, &intr, cam, reference).ok()?;
    let other = 1 - cap;
    if view.cap_visibility[cap] < min_pixels
        || view.cap_visibility[other] != 0
        || view.occlusion() > spec.max_occlusion
    {
        return None;
    }
    // The hidden cap must be hidden by the object itself.
    (self_visibility(scene, spec, &intr, cam)[other] == 0).then_some(view)
}

/// Rejection-samples two cameras: the first shows at least `min_pixels` of
/// cap A and none of cap B, the second the reverse. View 2's extrinsics are
/// relative to view 1.
pub fn find_ambiguous_pair(
    scene: &SceneSample,
    spec: &MVBallSpec,
    rng_seed: u64,
    min_pixels: usize,
) -> Result<(RenderedView, RenderedView)> {
    spec.validate()?;
    if min_pixels == 0 {
        return Err(Error::Config("min_pixels must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut first: Option<RenderedView> = None;
    let mut second_cam: Option<Pose> = None;
    for _ in 0..spec.attempt_cap {
        let cam = sample_camera(scene, spec, &mut rng);
        if first.is_none() {
            first = view_shows_only(scene, spec, &cam, &cam, 0, min_pixels);
            if first.is_some() {
                continue;
            }
        }
        if second_cam.is_none() && view_shows_only(scene, spec, &cam, &cam, 1, min_pixels).is_some()
        {
            second_cam = Some(cam);
        }
        if let (Some(v1), Some(c2)) = (&first, &second_cam) {
            let v2 = render_view(scene, spec, &spec.intrinsics(), c2, &v1.camera_to_world)?;
            return Ok((v1.clone(), v2));
        }
    }
    Err(Error::NoValidPair(spec.attempt_cap))
}

/// Contiguous range of rotation angles (radians, sampled every `step`) about
/// the visible cap's axis over which the hidden cap stays invisible in the
/// view. Returns `(lo, hi)` with `lo ≤ 0 ≤ hi`.
pub fn hidden_cap_arc(
    scene: &SceneSample,
    spec: &MVBallSpec,
    view: &RenderedView,
    visible_cap: usize,
    step: f64,
) -> (f64, f64) {
    let hidden = 1 - visible_cap;
    let stays_hidden = |angle: f64| {
        let s = scene.rotated_about_cap(spec, visible_cap, angle);
        self_visibility(&s, spec, &view.intrinsics, &view.camera_to_world)[hidden] == 0
    };
    let limit = (std::f64::consts::PI / step).floor() as i64;
    let mut hi = 0;
    while hi < limit && stays_hidden((hi + 1) as f64 * step) {
        hi += 1;
    }
    let mut lo = 0;
    while lo > -limit && stays_hidden((lo - 1) as f64 * step) {
        lo -= 1;
    }
    (lo as f64 * step, hi as f64 * step)
}

/// Angle of a rotation matrix in `[0, π]`.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    Rotation3::from_matrix_unchecked(*r).angle()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> MVBallSpec {
        MVBallSpec::default()
    }

    #[test]
    fn thresholds_scale_with_area() {
        assert_eq!(scaled_threshold(BASE_EASY_PIXELS, 64, 64), 4);
        assert_eq!(scaled_threshold(BASE_HARD_PIXELS, 64, 64), 1);
        assert_eq!(scaled_threshold(BASE_EASY_PIXELS, 640, 480), 300);
        assert_eq!(scaled_threshold(BASE_HARD_PIXELS, 640, 480), 10);
        assert_eq!(scaled_threshold(BASE_EASY_PIXELS, 128, 128), 16);
    }

    #[test]
    fn spec_validation() {
        assert!(spec().validate().is_ok());
        let mut s = spec();
        s.cap_angular_radius_deg = 90.0;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.cap_colors = [[1, 2, 3]; 2];
        assert!(s.validate().is_err());
        let [a, b] = spec().cap_axes();
        assert!((a.dot(&b).acos().to_degrees() - 90.0).abs() < 1e-12);
    }

    #[test]
    fn scene_is_deterministic_and_rests_on_floor() {
        let s = spec();
        for seed in 0..50 {
            let a = sample_scene(seed, &s).unwrap();
            assert_eq!(a, sample_scene(seed, &s).unwrap());
            assert!(a.distractors.len() <= s.max_distractors);
            // Lowest model point touches the floor.
            let low = s
                .model_points(4000)
                .iter()
                .map(|p| a.object_pose_world.transform_point(p).z)
                .fold(f64::INFINITY, f64::min);
            assert!(low > -1e-9 && low < 2e-3, "seed {seed}: lowest point {low}");
        }
        let mut none = spec();
        none.max_distractors = 0;
        assert!(sample_scene(3, &none).unwrap().distractors.is_empty());
    }

    #[test]
    fn cap_axes_are_uniform_on_the_sphere() {
        let s = spec();
        let n = 10_000;
        let zs: Vec<f64> = (0..n)
            .map(|i| {
                let sc = sample_scene(i as u64, &s).unwrap();
                (sc.object_pose_world.rotation * s.cap_axes()[0]).z
            })
            .collect();
        let mean = zs.iter().sum::<f64>() / n as f64;
        // Uniform on the sphere: z ~ U(-1, 1), variance 1/3.
        let se = (1.0 / 3.0 / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
        let var = zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 1.0 / 3.0).abs() < 0.02);
    }

    fn bare_scene(rotation: Matrix3<f64>) -> SceneSample {
        SceneSample {
            object_pose_world: Pose::new(rotation, Vector3::new(0.0, 0.0, 0.2)).unwrap(),
            distractors: vec![],
            floor_height: -10.0,
        }
    }

    #[test]
    fn camera_opposite_one_cap_sees_only_the_other() {
        let s = spec();
        let scene = bare_scene(Matrix3::identity());
        let intr = s.intrinsics();
        let [a, b] = s.cap_axes();
        let c = scene.object_pose_world.translation;
        for (visible, hidden_axis) in [(0, b), (1, a)] {
            let eye = c - hidden_axis * 0.6;
            let cam = look_at(&eye, &c, &Vector3::z()).unwrap();
            let v = render_view(&scene, &s, &intr, &cam, &cam).unwrap();
            assert!(v.cap_visibility[visible] > 0);
            assert_eq!(v.cap_visibility[1 - visible], 0);
        }
        // Looking down a cap axis shows that cap and the rim of the other.
        let cam = look_at(&(c + a * 0.6), &c, &Vector3::z()).unwrap();
        let v = render_view(&scene, &s, &intr, &cam, &cam).unwrap();
        assert!(v.cap_visibility[0] > v.cap_visibility[1]);
    }

    #[test]
    fn wall_in_front_occludes_everything() {
        let s = spec();
        let mut scene = bare_scene(Matrix3::identity());
        let c = scene.object_pose_world.translation;
        let eye = c - Vector3::y() * 0.6;
        let cam = look_at(&eye, &c, &Vector3::z()).unwrap();
        let clear = render_view(&scene, &s, &s.intrinsics(), &cam, &cam).unwrap();
        scene.distractors.push(Distractor {
            kind: DistractorKind::Cuboid,
            pose: Pose::new(Matrix3::identity(), c - Vector3::y() * 0.3).unwrap(),
            size: Vector3::new(1.0, 0.01, 1.0),
            color: [1, 2, 3],
        });
        let v = render_view(&scene, &s, &s.intrinsics(), &cam, &cam);
        // The object is fully hidden, so no visible box exists.
        assert!(matches!(v, Err(Error::EmptyRender)));
        let f = raster::rasterize(&scene.primitives(&s), &s.intrinsics(), &cam, [0; 3]);
        assert!(f.object_mask.iter().any(|&m| m));
        assert!(!f.labels.iter().any(|l| l.is_object()));
        assert!(clear.visible_pixels > 0);
    }

    #[test]
    fn camera_facing_away_is_an_empty_render() {
        let s = spec();
        let scene = bare_scene(Matrix3::identity());
        let c = scene.object_pose_world.translation;
        let eye = c + Vector3::new(0.0, -0.6, 0.0);
        let cam = look_at(&eye, &(eye - Vector3::y()), &Vector3::z()).unwrap();
        assert!(matches!(
            render_view(&scene, &s, &s.intrinsics(), &cam, &cam),
            Err(Error::EmptyRender)
        ));
    }

    /// Per-pixel ray casting against the three object spheres, written
    /// independently of the rasterizer.
    fn brute_force_caps(scene: &SceneSample, s: &MVBallSpec, cam: &Pose) -> [usize; 2] {
        let intr = s.intrinsics();
        let a = s.cap_angular_radius_deg.to_radians();
        let spheres: Vec<(Vector3<f64>, f64, usize)> = std::iter::once((
            scene.object_pose_world.translation,
            s.sphere_radius,
            2,
        ))
        .chain(s.cap_axes().iter().enumerate().map(|(i, ax)| {
            (
                scene
                    .object_pose_world
                    .transform_point(&(ax * s.sphere_radius * a.cos())),
                s.sphere_radius * a.sin(),
                i,
            )
        }))
        .collect();
        let mut counts = [0; 2];
        for y in 0..intr.height() {
            for x in 0..intr.width() {
                let d_cam = Vector3::new(
                    (x as f64 + 0.5 - intr.principal_point.x) / intr.focal.x,
                    (y as f64 + 0.5 - intr.principal_point.y) / intr.focal.y,
                    1.0,
                )
                .normalize();
                let d = cam.rotation * d_cam;
                let o = cam.translation;
                let mut best = (f64::INFINITY, 3);
                for (c, r, id) in &spheres {
                    let oc = o - c;
                    let b = oc.dot(&d);
                    let disc = b * b - (oc.dot(&oc) - r * r);
                    if disc >= 0.0 {
                        let t = -b - disc.sqrt();
                        if t > 0.0 && t < best.0 {
                            best = (t, *id);
                        }
                    }
                }
                if best.1 < 2 {
                    counts[best.1] += 1;
                }
            }
        }
        counts
    }

    #[test]
    fn cap_counts_match_ray_casting_oracle() {
        let mut s = spec();
        s.max_distractors = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..30 {
            let scene = sample_scene(seed, &s).unwrap();
            let cam = sample_camera(&scene, &s, &mut rng);
            let v = render_view(&scene, &s, &s.intrinsics(), &cam, &cam).unwrap();
            assert_eq!(v.cap_visibility, brute_force_caps(&scene, &s, &cam), "seed {seed}");
        }
    }

    #[test]
    fn bbox_is_tight() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..20 {
            let scene = sample_scene(seed, &s).unwrap();
            let cam = sample_camera(&scene, &s, &mut rng);
            let Ok(v) = render_view(&scene, &s, &s.intrinsics(), &cam, &cam) else {
                continue;
            };
            let b = v.bbox;
            let obj = |x: usize, y: usize| v.labels[y * v.width + x].is_object();
            for y in 0..v.height {
                for x in 0..v.width {
                    if obj(x, y) {
                        assert!(x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h);
                    }
                }
            }
            assert!((b.y..b.y + b.h).any(|y| obj(b.x, y)));
            assert!((b.y..b.y + b.h).any(|y| obj(b.x + b.w - 1, y)));
            assert!((b.x..b.x + b.w).any(|x| obj(x, b.y)));
            assert!((b.x..b.x + b.w).any(|x| obj(x, b.y + b.h - 1)));
        }
    }

    #[test]
    fn occluders_never_increase_cap_visibility() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for seed in 0..30 {
            let scene = sample_scene(seed, &s).unwrap();
            let cam = sample_camera(&scene, &s, &mut rng);
            let mut prev = self_visibility(&scene, &s, &s.intrinsics(), &cam);
            for k in 1..=scene.distractors.len() {
                let partial = SceneSample {
                    distractors: scene.distractors[..k].to_vec(),
                    ..scene.clone()
                };
                let f = raster::rasterize(&partial.primitives(&s), &s.intrinsics(), &cam, [0; 3]);
                let caps = [PixelLabel::CapA, PixelLabel::CapB]
                    .map(|l| f.labels.iter().filter(|&&x| x == l).count());
                assert!(caps[0] <= prev[0] && caps[1] <= prev[1]);
                prev = caps;
            }
        }
    }

    #[test]
    fn ambiguous_pair_satisfies_thresholds_on_rerender() {
        let s = spec();
        let easy = scaled_threshold(BASE_EASY_PIXELS, 64, 64);
        let mut found = 0;
        for seed in 0..40 {
            let scene = sample_scene(seed, &s).unwrap();
            let Ok((v1, v2)) = find_ambiguous_pair(&scene, &s, seed + 1000, easy) else {
                continue;
            };
            found += 1;
            assert_eq!(v1.extrinsics, CameraExtrinsics::reference());
            let r1 = render_view(&scene, &s, &s.intrinsics(), &v1.camera_to_world, &v1.camera_to_world)
                .unwrap();
            let r2 = render_view(&scene, &s, &s.intrinsics(), &v2.camera_to_world, &v1.camera_to_world)
                .unwrap();
            assert_eq!(r1, v1);
            assert_eq!(r2, v2);
            assert!(v1.cap_visibility[0] >= easy && v1.cap_visibility[1] == 0);
            assert!(v2.cap_visibility[1] >= easy && v2.cap_visibility[0] == 0);
            // View 2's pose relative to view 1 maps its camera frame to view 1's.
            let rel = v2.extrinsics.camera_to_reference;
            let via = rel.compose(&v2.object_pose_cam);
            assert!((via.translation - v1.object_pose_cam.translation).norm() < 1e-9);
            assert!((via.rotation - v1.object_pose_cam.rotation).norm() < 1e-9);
        }
        assert!(found >= 10, "only {found} of 40 scenes produced a pair");
    }

    #[test]
    fn impossible_threshold_exhausts_budget() {
        let mut s = spec();
        s.attempt_cap = 8;
        let scene = sample_scene(1, &s).unwrap();
        assert!(matches!(
            find_ambiguous_pair(&scene, &s, 1, 100_000),
            Err(Error::NoValidPair(8))
        ));
        assert!(find_ambiguous_pair(&scene, &s, 1, 0).is_err());
    }

    #[test]
    fn model_points_cover_the_object() {
        let s = spec();
        let pts = s.model_points(500);
        let max_r = pts.iter().map(|p| p.norm()).fold(0.0, f64::max);
        assert!((max_r - s.outer_radius()).abs() < 2e-3);
        assert!(pts.iter().all(|p| p.norm() >= s.sphere_radius - 1e-12));
    }

    #[test]
    fn random_rotation_is_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            crate::geometry::check_rotation(&r).unwrap();
            assert!(rotation_angle(&r) <= std::f64::consts::PI + 1e-12);
        }
    }
}
