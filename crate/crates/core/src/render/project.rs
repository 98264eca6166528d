use nalgebra::Matrix2x3;

use crate::gaussian::{param, Gaussian3D};
use crate::geometry::{quat_to_rotmat, rotmat_backward, Camera, Mat3, Vec3};

use super::RenderConfig;

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub mean2d: [f64; 2],
    /// `[xx, xy, yy]` including the `cov2d_eps` dilation.
    pub cov2d: [f64; 3],
    /// `[xx, xy, yy]` before dilation.
    pub cov2d_raw: [f64; 3],
    pub depth: f64,
}

pub(super) fn covariance3d(g: &Gaussian3D) -> (Mat3, Mat3) {
    let r = quat_to_rotmat(g.rotation);
    let m = r * Mat3::from_diagonal(&g.scale);
    (r, m * m.transpose())
}

fn jacobian(cam: &Camera, t: &Vec3) -> Matrix2x3<f64> {
    let k = &cam.intrinsics;
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * t.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * t.y * iz * iz,
    )
}

/// EWA projection `J W Σ Wᵀ Jᵀ + εI`, or `None` when the mean is outside
/// the `(near, far]` depth range.
pub fn project_gaussian(cam: &Camera, g: &Gaussian3D, cfg: &RenderConfig) -> Option<Projection> {
    let t = cam.world_to_camera(&g.mean);
    if !(t.z > cfg.near && t.z <= cfg.far) {
        return None;
    }
    let k = &cam.intrinsics;
    let (_, sigma) = covariance3d(g);
    let tw = jacobian(cam, &t) * cam.rotation;
    let c = tw * sigma * tw.transpose();
    let raw = [c[(0, 0)], 0.5 * (c[(0, 1)] + c[(1, 0)]), c[(1, 1)]];
    Some(Projection {
        mean2d: [k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy],
        cov2d: [raw[0] + cfg.cov2d_eps, raw[1], raw[2] + cfg.cov2d_eps],
        cov2d_raw: raw,
        depth: t.z,
    })
}

/// Pulls screen-space gradients (`mean2d`, symmetric `cov2d` given as
/// `[xx, xy, yy]` of the full matrix gradient) back to the Gaussian's mean,
/// scale and rotation. Writes into `out` in `to_params` layout.
pub(super) fn project_backward(
    cam: &Camera,
    g: &Gaussian3D,
    d_mean2d: [f64; 2],
    d_cov2d: [f64; 3],
    out: &mut [f64; 14],
) {
    let k = &cam.intrinsics;
    let w = cam.rotation;
    let t = cam.world_to_camera(&g.mean);
    let j = jacobian(cam, &t);
    let tw = j * w;
    let (r, sigma) = covariance3d(g);

    let gc = nalgebra::Matrix2::new(d_cov2d[0], d_cov2d[1], d_cov2d[1], d_cov2d[2]);
    // Σ2 = T Σ Tᵀ
    let g_sigma: Mat3 = tw.transpose() * gc * tw;
    let g_t: Matrix2x3<f64> = 2.0 * gc * tw * sigma;
    let g_j: Matrix2x3<f64> = g_t * w.transpose();

    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let mut g_cam = Vec3::new(
        -g_j[(0, 2)] * k.fx * iz2,
        -g_j[(1, 2)] * k.fy * iz2,
        -g_j[(0, 0)] * k.fx * iz2 + g_j[(0, 2)] * 2.0 * k.fx * t.x * iz2 * iz
            - g_j[(1, 1)] * k.fy * iz2
            + g_j[(1, 2)] * 2.0 * k.fy * t.y * iz2 * iz,
    );
    g_cam.x += d_mean2d[0] * k.fx * iz;
    g_cam.y += d_mean2d[1] * k.fy * iz;
    g_cam.z += -d_mean2d[0] * k.fx * t.x * iz2 - d_mean2d[1] * k.fy * t.y * iz2;
    let g_mean = w.transpose() * g_cam;

    // Σ = M Mᵀ with M = R S.
    let m = r * Mat3::from_diagonal(&g.scale);
    let g_m = 2.0 * g_sigma * m;
    let mut g_r = Mat3::zeros();
    for col in 0..3 {
        out[param::SCALE + col] += (0..3).map(|row| g_m[(row, col)] * r[(row, col)]).sum::<f64>();
        for row in 0..3 {
            g_r[(row, col)] = g_m[(row, col)] * g.scale[col];
        }
    }
    let g_q = rotmat_backward(g.rotation, &g_r);
    for i in 0..3 {
        out[param::MEAN + i] += g_mean[i];
    }
    for i in 0..4 {
        out[param::ROTATION + i] += g_q[i];
    }
}
