//! Object-order z-buffer rasterizer for analytic primitives.
//!
//! Each primitive is rasterized over the screen rectangle covered by its
//! projected bounding box; per pixel the primitive is intersected with the
//! pixel-center ray and the nearest hit wins the depth test. Shading is flat.

use nalgebra::{Vector2, Vector3};

use crate::geometry::{CameraIntrinsics, Pose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PixelLabel {
    Background = 0,
    Floor = 1,
    Distractor = 2,
    Sphere = 3,
    CapA = 4,
    CapB = 5,
}

impl PixelLabel {
    pub fn is_object(self) -> bool {
        matches!(self, PixelLabel::Sphere | PixelLabel::CapA | PixelLabel::CapB)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere {
        center: Vector3<f64>,
        radius: f64,
    },
    /// Oriented box; `pose` maps box coordinates to world.
    Cuboid {
        pose: Pose,
        half_extents: Vector3<f64>,
    },
    /// Upright cone with its base disk on the local `z = 0` plane and apex at
    /// `z = height`; `pose` maps local coordinates to world.
    Cone {
        pose: Pose,
        radius: f64,
        height: f64,
    },
    /// Infinite horizontal plane `z = height` seen from above.
    Floor {
        height: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub color: [u8; 3],
    pub label: PixelLabel,
}

/// Nearest positive intersection distance along a unit-direction ray.
pub fn intersect(shape: &Shape, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    const EPS: f64 = 1e-9;
    match shape {
        Shape::Sphere { center, radius } => {
            let oc = origin - center;
            let b = oc.dot(dir);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t0 = -b - s;
            if t0 > EPS {
                return Some(t0);
            }
            let t1 = -b + s;
            (t1 > EPS).then_some(t1)
        }
        Shape::Cuboid { pose, half_extents } => {
            let inv = pose.inverse();
            let o = inv.transform_point(origin);
            let d = inv.transform_vector(dir);
            let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
            for a in 0..3 {
                if d[a].abs() < 1e-15 {
                    if o[a].abs() > half_extents[a] {
                        return None;
                    }
                    continue;
                }
                let t1 = (-half_extents[a] - o[a]) / d[a];
                let t2 = (half_extents[a] - o[a]) / d[a];
                tmin = tmin.max(t1.min(t2));
                tmax = tmax.min(t1.max(t2));
            }
            if tmax < tmin || tmax <= EPS {
                return None;
            }
            Some(if tmin > EPS { tmin } else { tmax })
        }
        Shape::Cone {
            pose,
            radius,
            height,
        } => {
            let inv = pose.inverse();
            let o = inv.transform_point(origin);
            let d = inv.transform_vector(dir);
            let k = radius / height;
            // x² + y² = k² (h - z)²
            let hz = height - o.z;
            let a = d.x * d.x + d.y * d.y - k * k * d.z * d.z;
            let b = 2.0 * (o.x * d.x + o.y * d.y + k * k * hz * d.z);
            let c = o.x * o.x + o.y * o.y - k * k * hz * hz;
            let mut best: Option<f64> = None;
            let mut consider = |t: f64| {
                if t > EPS && best.is_none_or(|b| t < b) {
                    best = Some(t);
                }
            };
            if a.abs() > 1e-15 {
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    let s = disc.sqrt();
                    for t in [(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)] {
                        let z = o.z + t * d.z;
                        if (0.0..=*height).contains(&z) {
                            consider(t);
                        }
                    }
                }
            } else if b.abs() > 1e-15 {
                let t = -c / b;
                let z = o.z + t * d.z;
                if (0.0..=*height).contains(&z) {
                    consider(t);
                }
            }
            if d.z.abs() > 1e-15 {
                let t = -o.z / d.z;
                let p = o + d * t;
                if p.x * p.x + p.y * p.y <= radius * radius {
                    consider(t);
                }
            }
            best
        }
        Shape::Floor { height } => {
            if dir.z.abs() < 1e-15 {
                return None;
            }
            let t = (height - origin.z) / dir.z;
            (t > EPS).then_some(t)
        }
    }
}

fn bounding_corners(shape: &Shape) -> Option<Vec<Vector3<f64>>> {
    let cube = |pose: &Pose, lo: Vector3<f64>, hi: Vector3<f64>| {
        let mut out = Vec::with_capacity(8);
        for i in 0..8 {
            let p = Vector3::new(
                if i & 1 == 0 { lo.x } else { hi.x },
                if i & 2 == 0 { lo.y } else { hi.y },
                if i & 4 == 0 { lo.z } else { hi.z },
            );
            out.push(pose.transform_point(&p));
        }
        out
    };
    match shape {
        Shape::Sphere { center, radius } => {
            let r = Vector3::repeat(*radius);
            Some(cube(&Pose::identity(), center - r, center + r))
        }
        Shape::Cuboid { pose, half_extents } => Some(cube(pose, -half_extents, *half_extents)),
        Shape::Cone {
            pose,
            radius,
            height,
        } => Some(cube(
            pose,
            Vector3::new(-radius, -radius, 0.0),
            Vector3::new(*radius, *radius, *height),
        )),
        Shape::Floor { .. } => None,
    }
}

/// Integer pixel rectangle `[x0, x1) × [y0, y1)` that covers the primitive.
fn screen_rect(
    shape: &Shape,
    intr: &CameraIntrinsics,
    world_to_cam: &Pose,
) -> Option<(usize, usize, usize, usize)> {
    let (w, h) = (intr.width(), intr.height());
    let Some(corners) = bounding_corners(shape) else {
        return Some((0, w, 0, h));
    };
    let cam: Vec<Vector3<f64>> = corners.iter().map(|c| world_to_cam.transform_point(c)).collect();
    if cam.iter().all(|c| c.z <= 0.0) {
        return None;
    }
    if cam.iter().any(|c| c.z <= 1e-6) {
        return Some((0, w, 0, h));
    }
    let mut lo = Vector2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for c in &cam {
        let uv = intr.project_camera_point(c).ok()?;
        lo = lo.inf(&uv);
        hi = hi.sup(&uv);
    }
    let x0 = lo.x.floor().max(0.0) as usize;
    let y0 = lo.y.floor().max(0.0) as usize;
    let x1 = (hi.x.ceil().max(0.0) as usize + 1).min(w);
    let y1 = (hi.y.ceil().max(0.0) as usize + 1).min(h);
    (x0 < x1 && y0 < y1).then_some((x0, x1, y0, y1))
}

/// Output buffers of one rasterization pass.
#[derive(Clone, Debug)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    pub labels: Vec<PixelLabel>,
    pub depth: Vec<f64>,
    /// Object coverage ignoring every occluder.
    pub object_mask: Vec<bool>,
}

/// Renders `primitives` through a camera whose pose in the world is
/// `camera_to_world`.
pub fn rasterize(
    primitives: &[Primitive],
    intr: &CameraIntrinsics,
    camera_to_world: &Pose,
    background: [u8; 3],
) -> Frame {
    let (w, h) = (intr.width(), intr.height());
    let mut frame = Frame {
        width: w,
        height: h,
        rgb: background.repeat(w * h),
        labels: vec![PixelLabel::Background; w * h],
        depth: vec![f64::INFINITY; w * h],
        object_mask: vec![false; w * h],
    };
    let world_to_cam = camera_to_world.inverse();
    let origin = camera_to_world.translation;
    for prim in primitives {
        let Some((x0, x1, y0, y1)) = screen_rect(&prim.shape, intr, &world_to_cam) else {
            continue;
        };
        for y in y0..y1 {
            for x in x0..x1 {
                let dir_cam = intr.unproject(&Vector2::new(x as f64 + 0.5, y as f64 + 0.5));
                let dir = camera_to_world.rotation * dir_cam;
                let Some(t) = intersect(&prim.shape, &origin, &dir) else {
                    continue;
                };
                let idx = y * w + x;
                if prim.label.is_object() {
                    frame.object_mask[idx] = true;
                }
                if t < frame.depth[idx] {
                    frame.depth[idx] = t;
                    frame.labels[idx] = prim.label;
                    frame.rgb[idx * 3..idx * 3 + 3].copy_from_slice(&prim.color);
                }
            }
        }
    }
    frame
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, look_at};

    #[test]
    fn sphere_hit_distance() {
        let s = Shape::Sphere {
            center: Vector3::new(0.0, 0.0, 5.0),
            radius: 1.0,
        };
        let t = intersect(&s, &Vector3::zeros(), &Vector3::z()).unwrap();
        assert!((t - 4.0).abs() < 1e-12);
        assert!(intersect(&s, &Vector3::zeros(), &-Vector3::z()).is_none());
    }

    #[test]
    fn cuboid_and_cone_hits() {
        let pose = Pose::new(axis_angle(&Vector3::z(), 0.3), Vector3::new(0.0, 0.0, 3.0)).unwrap();
        let b = Shape::Cuboid {
            pose,
            half_extents: Vector3::new(0.5, 0.5, 0.5),
        };
        let t = intersect(&b, &Vector3::zeros(), &Vector3::z()).unwrap();
        assert!((t - 2.5).abs() < 1e-12);
        let cone = Shape::Cone {
            pose: Pose::new(nalgebra::Matrix3::identity(), Vector3::zeros()).unwrap(),
            radius: 1.0,
            height: 2.0,
        };
        // From above straight down onto the apex region.
        let t = intersect(&cone, &Vector3::new(0.0, 0.0, 5.0), &-Vector3::z()).unwrap();
        assert!((t - 3.0).abs() < 1e-9);
        // Horizontal ray at z = 1 hits the slanted side at radius 0.5.
        let t = intersect(&cone, &Vector3::new(-5.0, 0.0, 1.0), &Vector3::x()).unwrap();
        assert!((t - 4.5).abs() < 1e-9);
    }

    #[test]
    fn nearer_primitive_wins() {
        let intr = CameraIntrinsics::centered(32.0, 32, 32).unwrap();
        let cam = look_at(&Vector3::new(0.0, 0.0, 5.0), &Vector3::zeros(), &Vector3::y()).unwrap();
        let prims = [
            Primitive {
                shape: Shape::Sphere {
                    center: Vector3::zeros(),
                    radius: 1.0,
                },
                color: [1, 1, 1],
                label: PixelLabel::Sphere,
            },
            Primitive {
                shape: Shape::Sphere {
                    center: Vector3::new(0.0, 0.0, 2.0),
                    radius: 0.5,
                },
                color: [2, 2, 2],
                label: PixelLabel::Distractor,
            },
        ];
        let f = rasterize(&prims, &intr, &cam, [0, 0, 0]);
        let c = 16 * 32 + 16;
        assert_eq!(f.labels[c], PixelLabel::Distractor);
        assert!(f.object_mask[c]);
        assert_eq!(f.labels[0], PixelLabel::Background);
    }
}
