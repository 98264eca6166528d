//! Analytic capsule humanoid: exact SDF, sphere-traced reference renders,
//! surface distances and surface sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::geometry::{quat_to_rotmat, Camera, UnitQuat, Vec3};
use crate::image::{GrayImage, RgbImage};

/// Joint positions and parent indices; joint 0 is the root and its own parent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joints: Vec<Vec3>,
    pub parents: Vec<usize>,
}

/// 17-joint layout: pelvis, right leg (hip, knee, ankle), left leg, spine,
/// thorax, neck, head, left arm (shoulder, elbow, wrist), right arm.
pub const JOINT_NAMES: [&str; 17] = [
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

pub const PARENTS_17: [usize; 17] = [0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15];

impl Skeleton {
    /// A-pose, facing +z, feet near y = -0.85, about 1.8 units tall once
    /// fleshed out by [`default_humanoid`]. Left is +x.
    pub fn rest_pose() -> Self {
        let j = |x, y, z| Vec3::new(x, y, z);
        let joints = vec![
            j(0.0, 0.0, 0.0),
            j(-0.1, -0.02, 0.0),
            j(-0.11, -0.44, 0.02),
            j(-0.12, -0.85, 0.0),
            j(0.1, -0.02, 0.0),
            j(0.11, -0.44, 0.02),
            j(0.12, -0.85, 0.0),
            j(0.0, 0.22, 0.0),
            j(0.0, 0.45, 0.0),
            j(0.0, 0.58, 0.0),
            j(0.0, 0.76, 0.02),
            j(0.19, 0.46, 0.0),
            j(0.34, 0.22, 0.0),
            j(0.46, 0.0, 0.04),
            j(-0.19, 0.46, 0.0),
            j(-0.34, 0.22, 0.0),
            j(-0.46, 0.0, 0.04),
        ];
        Skeleton {
            joints,
            parents: PARENTS_17.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.joints.len();
        if n == 0 || self.parents.len() != n {
            return Err(Error::MalformedSkeleton(format!(
                "{} joints but {} parents",
                n,
                self.parents.len()
            )));
        }
        if self.parents[0] != 0 {
            return Err(Error::MalformedSkeleton("joint 0 must be the root".into()));
        }
        for j in 1..n {
            let mut cur = j;
            for _ in 0..=n {
                let p = self.parents[cur];
                if p >= n {
                    return Err(Error::MalformedSkeleton(format!("parent {p} out of range")));
                }
                if p == cur {
                    break;
                }
                cur = p;
            }
            if cur != 0 {
                return Err(Error::MalformedSkeleton(format!("joint {j} does not reach the root")));
            }
            if (self.joints[j] - self.joints[self.parents[j]]).norm() <= 0.0 {
                return Err(Error::MalformedSkeleton(format!("bone to joint {j} has zero length")));
            }
            if !self.joints[j].iter().all(|v| v.is_finite()) {
                return Err(Error::MalformedSkeleton(format!("joint {j} is not finite")));
            }
        }
        Ok(())
    }

    /// Whether `j` lies in the subtree rooted at `root` (inclusive).
    pub fn is_descendant(&self, j: usize, root: usize) -> bool {
        let mut cur = j;
        loop {
            if cur == root {
                return true;
            }
            if cur == 0 {
                return false;
            }
            cur = self.parents[cur];
        }
    }

    /// Rotates every strict descendant of `joint` about it.
    pub fn rotate_subtree(&self, joint: usize, axis: Vec3, angle_deg: f64) -> Skeleton {
        let r = quat_to_rotmat(UnitQuat::from_axis_angle(axis, angle_deg.to_radians()));
        let pivot = self.joints[joint];
        let joints = self
            .joints
            .iter()
            .enumerate()
            .map(|(j, p)| {
                if j != joint && self.is_descendant(j, joint) {
                    pivot + r * (p - pivot)
                } else {
                    *p
                }
            })
            .collect();
        Skeleton {
            joints,
            parents: self.parents.clone(),
        }
    }

    pub fn centroid(&self) -> Vec3 {
        self.joints.iter().sum::<Vec3>() / self.joints.len() as f64
    }

    /// `(parent, child)` joint pairs, one per non-root joint.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        (1..self.joints.len()).map(|j| (self.parents[j], j)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CapsuleScene {
    pub bones: Vec<Capsule>,
}

/// Closest point parameter on segment `ab`.
fn segment_param(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        0.0
    } else {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    }
}

/// Exact signed distance to a capsule (negative inside).
pub fn capsule_sdf(p: &Vec3, a: &Vec3, b: &Vec3, r: f64) -> f64 {
    let t = segment_param(p, a, b);
    (p - (a + (b - a) * t)).norm() - r
}

impl Capsule {
    pub fn sdf(&self, p: &Vec3) -> f64 {
        capsule_sdf(p, &self.a, &self.b, self.radius)
    }

    /// Outward unit normal of the nearest surface point.
    pub fn normal(&self, p: &Vec3) -> Vec3 {
        let t = segment_param(p, &self.a, &self.b);
        (p - (self.a + (self.b - self.a) * t)).normalize()
    }

    pub fn area(&self) -> f64 {
        let l = (self.b - self.a).norm();
        2.0 * std::f64::consts::PI * self.radius * l + 4.0 * std::f64::consts::PI * self.radius * self.radius
    }
}

impl CapsuleScene {
    pub fn is_empty(&self) -> bool {
        self.bones.is_empty()
    }

    /// Union SDF and the index of the nearest capsule (ties go to the lowest index).
    pub fn sdf(&self, p: &Vec3) -> Result<(f64, usize)> {
        if self.bones.is_empty() {
            return Err(Error::EmptyScene);
        }
        Ok(self.sdf_unchecked(p))
    }

    fn sdf_unchecked(&self, p: &Vec3) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, c) in self.bones.iter().enumerate() {
            let d = c.sdf(p);
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }

    /// Unsigned distance to the union surface.
    pub fn surface_distance(&self, p: &Vec3) -> Result<f64> {
        Ok(self.sdf(p)?.0.abs())
    }

    /// Normalized central-difference gradient of the union SDF.
    pub fn sdf_gradient(&self, p: &Vec3, h: f64) -> Vec3 {
        let f = |q: Vec3| self.sdf_unchecked(&q).0;
        let g = Vec3::new(
            f(p + Vec3::x() * h) - f(p - Vec3::x() * h),
            f(p + Vec3::y() * h) - f(p - Vec3::y() * h),
            f(p + Vec3::z() * h) - f(p - Vec3::z() * h),
        );
        g.normalize()
    }

    /// Center and radius of a sphere containing every capsule.
    pub fn bounding_sphere(&self) -> (Vec3, f64) {
        let n = (2 * self.bones.len()).max(1) as f64;
        let c = self.bones.iter().map(|b| b.a + b.b).sum::<Vec3>() / n;
        let r = self
            .bones
            .iter()
            .map(|b| ((b.a - c).norm().max((b.b - c).norm())) + b.radius)
            .fold(0.0, f64::max);
        (c, r)
    }

    /// `n` points on the union surface with outward normals.
    ///
    /// Capsules are chosen by area, points are drawn uniformly on the chosen
    /// capsule (cylinder or hemispherical cap), and points buried inside
    /// another capsule are rejected.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
        if self.bones.is_empty() {
            return Err(Error::EmptyScene);
        }
        if n == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let areas: Vec<f64> = self.bones.iter().map(Capsule::area).collect();
        let total: f64 = areas.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(n);
        let mut normals = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while points.len() < n {
            attempts += 1;
            if attempts > 1000 * n + 10_000 {
                return Err(Error::invalid("surface sampling rejected too many points"));
            }
            let mut pick = rng.random::<f64>() * total;
            let mut i = 0;
            while i + 1 < areas.len() && pick >= areas[i] {
                pick -= areas[i];
                i += 1;
            }
            let c = &self.bones[i];
            let p = sample_on_capsule(c, &mut rng);
            let buried = self
                .bones
                .iter()
                .enumerate()
                .any(|(j, o)| j != i && o.sdf(&p) < 0.0);
            if buried {
                continue;
            }
            normals.push(c.normal(&p));
            points.push(p);
        }
        Ok((points, normals))
    }
}

fn unit_vector(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn sample_on_capsule(c: &Capsule, rng: &mut impl Rng) -> Vec3 {
    let axis = c.b - c.a;
    let len = axis.norm();
    let cyl = 2.0 * std::f64::consts::PI * c.radius * len;
    let sph = 4.0 * std::f64::consts::PI * c.radius * c.radius;
    if len > 0.0 && rng.random::<f64>() * (cyl + sph) < cyl {
        let d = axis / len;
        let helper = if d.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let e1 = d.cross(&helper).normalize();
        let e2 = d.cross(&e1);
        let t = rng.random::<f64>();
        let phi = rng.random::<f64>() * std::f64::consts::TAU;
        c.a + axis * t + (e1 * phi.cos() + e2 * phi.sin()) * c.radius
    } else {
        let u = unit_vector(rng);
        let end = if len > 0.0 && u.dot(&axis) > 0.0 { c.b } else { c.a };
        end + u * c.radius
    }
}

/// Per-bone radii, indexed by child joint.
const BONE_RADII: [f64; 17] = [
    0.0, 0.075, 0.07, 0.055, 0.075, 0.07, 0.055, 0.11, 0.12, 0.05, 0.1, 0.06, 0.048, 0.04, 0.06,
    0.048, 0.04,
];

/// One capsule per bone with fixed radii and distinct colors.
pub fn default_humanoid(pose: &Skeleton) -> Result<CapsuleScene> {
    pose.validate()?;
    if pose.len() != 17 {
        return Err(Error::MalformedSkeleton(format!(
            "humanoid needs the 17-joint layout, got {} joints",
            pose.len()
        )));
    }
    let bones = pose
        .bones()
        .into_iter()
        .enumerate()
        .map(|(k, (p, c))| Capsule {
            a: pose.joints[p],
            b: pose.joints[c],
            radius: BONE_RADII[c],
            color: bone_color(k),
        })
        .collect();
    Ok(CapsuleScene { bones })
}

/// Distinct, well-saturated colors spread around the hue circle.
pub fn bone_color(k: usize) -> [f64; 3] {
    let hue = (k as f64 * 0.381_966) % 1.0;
    let (s, v) = (0.55, 0.9);
    let h6 = hue * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6 as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Direction towards the light: above, slightly right and in front.
pub const DEFAULT_LIGHT: [f64; 3] = [0.4, 0.7, 0.6];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum Shading {
    /// Lambert under a fixed world-space directional light, plus an ambient
    /// floor. The light does not follow the camera, so shading is the same
    /// from every viewpoint.
    Lambert { ambient: f64, light: [f64; 3] },
    Flat,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaymarchConfig {
    pub max_steps: usize,
    pub hit_eps: f64,
    pub max_dist: f64,
    pub shading: Shading,
    pub background: [f64; 3],
    #[serde(skip)]
    pub exec: ExecMode,
}

impl Default for RaymarchConfig {
    fn default() -> Self {
        RaymarchConfig {
            max_steps: 256,
            hit_eps: 1e-4,
            max_dist: 2.0 * 2.7,
            shading: Shading::Lambert {
                ambient: 0.25,
                light: DEFAULT_LIGHT,
            },
            background: [0.0; 3],
            exec: ExecMode::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceRender {
    pub rgb: RgbImage,
    pub alpha: GrayImage,
    /// Camera-frame depth of the hit, 0 for misses.
    pub depth: GrayImage,
    pub normal: RgbImage,
}

struct PixelHit {
    rgb: [f64; 3],
    alpha: f64,
    depth: f64,
    normal: [f64; 3],
}

/// Sphere-traces every pixel center of `cam`.
pub fn raymarch_render(scene: &CapsuleScene, cam: &Camera, cfg: &RaymarchConfig) -> ReferenceRender {
    let (w, h) = (cam.width(), cam.height());
    let rows = cfg.exec.map_range(h, |y| {
        (0..w)
            .map(|x| trace_pixel(scene, cam, cfg, x, y))
            .collect::<Vec<_>>()
    });
    let mut out = ReferenceRender {
        rgb: RgbImage::new(w, h),
        alpha: GrayImage::new(w, h),
        depth: GrayImage::new(w, h),
        normal: RgbImage::new(w, h),
    };
    for (y, row) in rows.into_iter().enumerate() {
        for (x, px) in row.into_iter().enumerate() {
            out.rgb.set(x, y, px.rgb);
            out.alpha.set(x, y, px.alpha);
            out.depth.set(x, y, px.depth);
            out.normal.set(x, y, px.normal);
        }
    }
    out
}

fn trace_pixel(scene: &CapsuleScene, cam: &Camera, cfg: &RaymarchConfig, x: usize, y: usize) -> PixelHit {
    let miss = PixelHit {
        rgb: cfg.background,
        alpha: 0.0,
        depth: 0.0,
        normal: [0.0; 3],
    };
    if scene.is_empty() {
        return miss;
    }
    let ray = cam.ray_through(x as f64 + 0.5, y as f64 + 0.5);
    let mut t = 0.0;
    for _ in 0..cfg.max_steps {
        let p = ray.at(t);
        let (d, idx) = scene.sdf_unchecked(&p);
        if d < cfg.hit_eps {
            let n = scene.sdf_gradient(&p, 1e-6);
            let base = scene.bones[idx].color;
            let rgb = match cfg.shading {
                Shading::Flat => base,
                Shading::Lambert { ambient, light } => {
                    let lambert = n.dot(&Vec3::from(light).normalize()).max(0.0);
                    base.map(|c| c * (ambient + (1.0 - ambient) * lambert))
                }
            };
            return PixelHit {
                rgb,
                alpha: 1.0,
                depth: cam.world_to_camera(&p).z,
                normal: [n.x, n.y, n.z],
            };
        }
        t += d;
        if t > cfg.max_dist {
            break;
        }
    }
    miss
}
