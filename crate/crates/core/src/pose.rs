//! Weak-perspective skeleton projection and 2D pose control images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::image::RgbImage;
use crate::scene::{bone_color, Skeleton};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    /// `(u, v)` pixel coordinates per joint.
    pub joints: Vec<[f64; 2]>,
    pub visibility: Vec<bool>,
}

/// Projects every joint with the single scale `f / z` taken at the
/// skeleton centroid's depth.
pub fn weak_perspective_project(skel: &Skeleton, cam: &Camera) -> Result<Pose2D> {
    let z = cam.world_to_camera(&skel.centroid()).z;
    if !(z > 0.0) {
        return Err(Error::BehindCamera { depth: z });
    }
    let k = &cam.intrinsics;
    let (sx, sy) = (k.fx / z, k.fy / z);
    let (w, h) = (cam.width() as f64, cam.height() as f64);
    let mut joints = Vec::with_capacity(skel.len());
    let mut visibility = Vec::with_capacity(skel.len());
    for p in &skel.joints {
        let c = cam.world_to_camera(p);
        let uv = [sx * c.x + k.cx, sy * c.y + k.cy];
        visibility.push((0.0..w).contains(&uv[0]) && (0.0..h).contains(&uv[1]));
        joints.push(uv);
    }
    Ok(Pose2D { joints, visibility })
}

pub fn poses_for_canonical_views(skel: &Skeleton, targets: &[Camera]) -> Result<Vec<Pose2D>> {
    targets.iter().map(|c| weak_perspective_project(skel, c)).collect()
}

/// Style of the control image, scaled with the image height.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseStyle {
    pub bone_half_width: f64,
    pub joint_radius: f64,
}

impl PoseStyle {
    pub fn for_height(h: usize) -> Self {
        let s = (h as f64 / 128.0).max(0.5);
        PoseStyle {
            bone_half_width: 1.5 * s,
            joint_radius: 2.5 * s,
        }
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let (apx, apy) = (p[0] - a[0], p[1] - a[1]);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 { ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((apx - t * abx).powi(2) + (apy - t * aby).powi(2)).sqrt()
}

/// Anti-aliased pose control image on black: one color per bone, white
/// joint discs. Bones with an invisible endpoint are skipped.
pub fn render_pose_image(pose: &Pose2D, bones: &[(usize, usize)], width: usize, height: usize) -> RgbImage {
    let style = PoseStyle::for_height(height);
    let mut img = RgbImage::new(width, height);
    let visible_bones: Vec<(usize, [f64; 3])> = bones
        .iter()
        .enumerate()
        .filter(|(_, (a, b))| pose.visibility[*a] && pose.visibility[*b])
        .map(|(k, _)| (k, bone_color(k)))
        .collect();
    for y in 0..height {
        for x in 0..width {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let mut c = [0.0; 3];
            for &(k, color) in &visible_bones {
                let (a, b) = bones[k];
                let d = segment_distance(p, pose.joints[a], pose.joints[b]);
                let cov = (style.bone_half_width + 0.5 - d).clamp(0.0, 1.0);
                if cov > 0.0 {
                    for ch in 0..3 {
                        c[ch] = c[ch] * (1.0 - cov) + color[ch] * cov;
                    }
                }
            }
            for (j, uv) in pose.joints.iter().enumerate() {
                if !pose.visibility[j] {
                    continue;
                }
                let d = ((p[0] - uv[0]).powi(2) + (p[1] - uv[1]).powi(2)).sqrt();
                let cov = (style.joint_radius + 0.5 - d).clamp(0.0, 1.0);
                if cov > 0.0 {
                    for v in c.iter_mut() {
                        *v = *v * (1.0 - cov) + cov;
                    }
                }
            }
            img.set(x, y, c);
        }
    }
    img
}
