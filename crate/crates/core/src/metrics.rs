//! Image metrics (PSNR, SSIM, the perceptual proxy) and point-cloud metrics
//! (Chamfer, point-to-surface, normal consistency).

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::gaussian::GaussianSet;
use crate::geometry::{Mat3, Vec3};
use crate::image::{GrayImage, RgbImage};
use crate::kdtree::KdTree;
use crate::loss::perceptual_proxy;
use crate::scene::CapsuleScene;

/// PSNR values written to JSON are capped here; identical images give +inf.
pub const PSNR_CAP: f64 = 99.0;

pub fn psnr(pred: &RgbImage, gt: &RgbImage, max_val: f64) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!("{:?}", gt.shape()), format!("{:?}", pred.shape())));
    }
    let mse = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

fn gaussian_window() -> [f64; 11] {
    let mut w = [0.0; 11];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable 11x11 filter over valid positions only.
fn filter_valid(img: &GrayImage, w: &[f64; 11]) -> GrayImage {
    let (ow, oh) = (img.width - 10, img.height - 10);
    let rows = GrayImage::from_fn(ow, img.height, |x, y| (0..11).map(|k| w[k] * img.get(x + k, y)).sum());
    GrayImage::from_fn(ow, oh, |x, y| (0..11).map(|k| w[k] * rows.get(x, y + k)).sum())
}

/// Mean SSIM on BT.601 luma with an 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03 and dynamic range 1.
pub fn ssim(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!("{:?}", gt.shape()), format!("{:?}", pred.shape())));
    }
    if pred.width < 11 || pred.height < 11 {
        return Err(Error::invalid(format!("SSIM needs images of at least 11x11, got {:?}", pred.shape())));
    }
    let (x, y) = (pred.luma(), gt.luma());
    let w = gaussian_window();
    let prod = |a: &GrayImage, b: &GrayImage| GrayImage {
        width: a.width,
        height: a.height,
        data: a.data.iter().zip(&b.data).map(|(p, q)| p * q).collect(),
    };
    let mx = filter_valid(&x, &w);
    let my = filter_valid(&y, &w);
    let sxx = filter_valid(&prod(&x, &x), &w);
    let syy = filter_valid(&prod(&y, &y), &w);
    let sxy = filter_valid(&prod(&x, &y), &w);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for i in 0..mx.data.len() {
        let (a, b) = (mx.data[i], my.data[i]);
        let va = sxx.data[i] - a * a;
        let vb = syy.data[i] - b * b;
        let cov = sxy.data[i] - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (va + vb + c2));
    }
    Ok(total / mx.data.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, normals: Option<Vec<Vec3>>) -> Result<Self> {
        let pc = PointCloud { points, normals };
        pc.validate()?;
        Ok(pc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("point cloud coordinate".into()));
        }
        if let Some(n) = &self.normals {
            if n.len() != self.points.len() {
                return Err(Error::shape(self.points.len(), n.len()));
            }
            if n.iter().any(|v| (v.norm() - 1.0).abs() > 1e-6) {
                return Err(Error::invalid("point cloud normals must be unit length"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// PCA normals from the `k` nearest neighbours (the point included),
/// oriented away from the cloud centroid.
pub fn estimate_normals(points: &[Vec3], k: usize, exec: ExecMode) -> Vec<Vec3> {
    if points.is_empty() {
        return Vec::new();
    }
    let tree = KdTree::new(points);
    let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
    exec.map_range(points.len(), |i| {
        let p = points[i];
        let nb = tree.knn(&p, k);
        let mean = nb.iter().map(|&(j, _)| points[j]).sum::<Vec3>() / nb.len() as f64;
        let mut cov = Mat3::zeros();
        for &(j, _) in &nb {
            let d = points[j] - mean;
            cov += d * d.transpose();
        }
        let eig = SymmetricEigen::new(cov);
        let n = if nb.len() >= 3 {
            eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned()
        } else {
            p - centroid
        };
        let n = if n.norm() > 0.0 { n.normalize() } else { Vec3::y() };
        if n.dot(&(p - centroid)) < 0.0 {
            -n
        } else {
            n
        }
    })
}

pub const NORMAL_NEIGHBOURS: usize = 16;

/// Means of the Gaussians with opacity at or above `threshold`, with PCA
/// normals. May be empty; callers flag that case.
pub fn gaussians_to_points(set: &GaussianSet, threshold: f64) -> Result<PointCloud> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("opacity threshold {threshold} outside (0, 1)")));
    }
    let points: Vec<Vec3> = set
        .gaussians
        .iter()
        .filter(|g| g.opacity >= threshold)
        .map(|g| g.mean)
        .collect();
    let normals = estimate_normals(&points, NORMAL_NEIGHBOURS, ExecMode::default());
    PointCloud::new(points, Some(normals))
}

fn nearest_distances(from: &[Vec3], to: &KdTree, exec: ExecMode) -> Vec<f64> {
    exec.map_range(from.len(), |i| to.nearest(&from[i]).map(|(_, d2)| d2.sqrt()).unwrap_or(f64::NAN))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn require_nonempty(pc: &PointCloud) -> Result<()> {
    if pc.is_empty() {
        Err(Error::EmptyCloud)
    } else {
        Ok(())
    }
}

/// Symmetric Chamfer distance in centimetres (scene units x 100).
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    require_nonempty(a)?;
    require_nonempty(b)?;
    let exec = ExecMode::default();
    let ab = mean(&nearest_distances(&a.points, &KdTree::new(&b.points), exec));
    let ba = mean(&nearest_distances(&b.points, &KdTree::new(&a.points), exec));
    Ok((ab + ba) / 2.0 * 100.0)
}

/// Mean unsigned distance from the points to the scene surface, in cm.
pub fn p2s(pred: &PointCloud, scene: &CapsuleScene) -> Result<f64> {
    require_nonempty(pred)?;
    let d = pred
        .points
        .iter()
        .map(|p| scene.surface_distance(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&d) * 100.0)
}

/// Mean `|n_pred . n_ref|` over nearest-neighbour correspondences.
pub fn normal_consistency(pred: &PointCloud, reference: &PointCloud) -> Result<f64> {
    require_nonempty(pred)?;
    require_nonempty(reference)?;
    let (Some(np), Some(nr)) = (&pred.normals, &reference.normals) else {
        return Err(Error::MissingNormals);
    };
    let tree = KdTree::new(&reference.points);
    let dots = ExecMode::default().map_range(pred.len(), |i| {
        let (j, _) = tree.nearest(&pred.points[i]).expect("non-empty reference");
        np[i].dot(&nr[j]).abs()
    });
    Ok(mean(&dots))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub azimuth: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

impl ViewMetrics {
    pub fn compute(view: usize, azimuth: f64, pred: &RgbImage, gt: &RgbImage, levels: usize) -> Result<Self> {
        Ok(ViewMetrics {
            view,
            azimuth,
            psnr: psnr(pred, gt, 1.0)?.min(PSNR_CAP),
            ssim: ssim(pred, gt)?,
            perceptual: perceptual_proxy(pred, gt, levels)?.0,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryMetrics {
    pub cd_cm: f64,
    pub p2s_cm: f64,
    pub nc: f64,
    pub n_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_view: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_perceptual: f64,
    /// Name of the perceptual column; never a learned metric.
    pub perceptual_metric: String,
    /// `None` when no Gaussian passed the opacity threshold.
    pub geometry: Option<GeometryMetrics>,
    pub opacity_threshold: f64,
    pub provenance: crate::provider::Provenance,
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn aggregate(per_view: &[ViewMetrics]) -> (f64, f64, f64) {
        let n = per_view.len().max(1) as f64;
        (
            per_view.iter().map(|v| v.psnr).sum::<f64>() / n,
            per_view.iter().map(|v| v.ssim).sum::<f64>() / n,
            per_view.iter().map(|v| v.perceptual).sum::<f64>() / n,
        )
    }
}

/// Chamfer, P2S and NC of a fitted set against the analytic scene, using
/// `n_ref` seeded surface samples as the reference cloud.
pub fn geometry_metrics(
    set: &GaussianSet,
    scene: &CapsuleScene,
    threshold: f64,
    n_ref: usize,
    seed: u64,
) -> Result<Option<GeometryMetrics>> {
    let pred = gaussians_to_points(set, threshold)?;
    if pred.is_empty() {
        return Ok(None);
    }
    let (pts, nrm) = scene.sample_surface(n_ref, seed)?;
    let reference = PointCloud::new(pts, Some(nrm))?;
    Ok(Some(GeometryMetrics {
        cd_cm: chamfer(&pred, &reference)?,
        p2s_cm: p2s(&pred, scene)?,
        nc: normal_consistency(&pred, &reference)?,
        n_points: pred.len(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian3D;
    use crate::scene::{default_humanoid, Skeleton};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn psnr_cases() {
        let a = RgbImage::filled(16, 16, [0.3, 0.5, 0.7]);
        let b = RgbImage::filled(16, 16, [0.4, 0.6, 0.8]);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-6);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &RgbImage::new(8, 16), 1.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, y) = (random_image(&mut rng, 20, 13), random_image(&mut rng, 20, 13));
        let mut se = 0.0;
        for i in 0..x.data.len() {
            se += (x.data[i] - y.data[i]).powi(2);
        }
        let direct = -10.0 * (se / 780.0).log10();
        assert!((psnr(&x, &y, 1.0).unwrap() - direct).abs() < 1e-9);
    }

    #[test]
    fn psnr_falls_with_noise_amplitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = random_image(&mut rng, 32, 32);
        let noise: Vec<f64> = (0..base.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vals: Vec<f64> = [0.01, 0.05, 0.2]
            .iter()
            .map(|a| {
                let mut n = base.clone();
                n.data.iter_mut().zip(&noise).for_each(|(v, e)| *v += a * e);
                psnr(&n, &base, 1.0).unwrap()
            })
            .collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2]);
    }

    #[test]
    fn ssim_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, 24, 20);
        let y = random_image(&mut rng, 24, 20);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        assert!(ssim(&RgbImage::new(10, 30), &RgbImage::new(10, 30)).is_err());

        let checker = RgbImage::from_fn(32, 32, |x, y| {
            let v = if (x / 4 + y / 4) % 2 == 0 { 0.3 } else { 0.7 };
            [v; 3]
        });
        let neg = RgbImage {
            data: checker.data.iter().map(|v| 1.0 - v).collect(),
            ..checker.clone()
        };
        assert!(ssim(&checker, &neg).unwrap() < 0.0);

        // Constant images: only the luminance term survives.
        let (p, q) = (0.3, 0.45);
        let a = RgbImage::filled(16, 16, [p; 3]);
        let b = RgbImage::filled(16, 16, [q; 3]);
        let c1 = 1e-4;
        let expect = (2.0 * p * q + c1) / (p * p + q * q + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    fn sphere_cloud(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z: f64 = rng.random_range(-1.0..1.0);
                let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let r = (1.0 - z * z).sqrt();
                Vec3::new(r * t.cos(), r * t.sin(), z)
            })
            .collect()
    }

    #[test]
    fn pca_normals_on_sphere() {
        let pts = sphere_cloud(4096, 4);
        let normals = estimate_normals(&pts, 16, ExecMode::default());
        let worst = pts
            .iter()
            .zip(&normals)
            .map(|(p, n)| n.dot(&p.normalize()).clamp(-1.0, 1.0).acos().to_degrees())
            .fold(0.0, f64::max);
        assert!(worst < 5.0, "{worst}");
        let pc = PointCloud::new(pts, Some(normals)).unwrap();
        assert!(normal_consistency(&pc, &pc).unwrap() >= 0.995);
    }

    #[test]
    fn point_extraction() {
        let g = |o: f64| Gaussian3D::isotropic(Vec3::new(o, 0.0, 0.0), 0.1, o, [1.0; 3]);
        let set = GaussianSet::new(vec![g(1.0), g(1.0), g(1.0)]);
        assert_eq!(gaussians_to_points(&set, 0.05).unwrap().len(), 3);
        let half = GaussianSet::new(vec![g(0.5); 4]);
        assert!(gaussians_to_points(&half, 1.0 - 1e-9).unwrap().is_empty());
        assert!(gaussians_to_points(&half, 1.0).is_err());
    }

    fn brute_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
        let one = |x: &[Vec3], y: &[Vec3]| {
            x.iter()
                .map(|p| y.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
                .sum::<f64>()
                / x.len() as f64
        };
        (one(a, b) + one(b, a)) / 2.0 * 100.0
    }

    #[test]
    fn chamfer_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cloud = |n| -> Vec<Vec3> {
            (0..n)
                .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
                .collect()
        };
        let (a, b) = (cloud(1000), cloud(1000));
        let (pa, pb) = (PointCloud::new(a.clone(), None).unwrap(), PointCloud::new(b.clone(), None).unwrap());
        assert_eq!(chamfer(&pa, &pb).unwrap(), brute_chamfer(&a, &b));
        assert_eq!(chamfer(&pa, &pb).unwrap(), chamfer(&pb, &pa).unwrap());
        assert_eq!(chamfer(&pa, &pa).unwrap(), 0.0);
        let one = PointCloud::new(vec![Vec3::zeros()], None).unwrap();
        let two = PointCloud::new(vec![Vec3::new(0.05, 0.0, 0.0)], None).unwrap();
        assert!((chamfer(&one, &two).unwrap() - 5.0).abs() < 1e-12);
        assert!(chamfer(&one, &PointCloud::default()).is_err());
    }

    #[test]
    fn p2s_cases() {
        let scene = default_humanoid(&Skeleton::rest_pose()).unwrap();
        let (pts, nrm) = scene.sample_surface(2000, 6).unwrap();
        let on = PointCloud::new(pts.clone(), Some(nrm.clone())).unwrap();
        assert!(p2s(&on, &scene).unwrap() < 1e-3);
        // Push one sample 0.02 outward along its normal; pick one whose
        // outward neighbourhood is clear of other capsules.
        let i = (0..pts.len())
            .find(|&i| {
                let p = pts[i] + nrm[i] * 0.02;
                (scene.surface_distance(&p).unwrap() - 0.02).abs() < 1e-9
            })
            .unwrap();
        let single = PointCloud::new(vec![pts[i] + nrm[i] * 0.02], None).unwrap();
        assert!((p2s(&single, &scene).unwrap() - 2.0).abs() < 1e-6);

        // Independent straight-line evaluation of mean |sdf|.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cloud: Vec<Vec3> = (0..300)
            .map(|_| Vec3::new(rng.random_range(-0.8..0.8), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)))
            .collect();
        let direct = cloud
            .iter()
            .map(|p| {
                scene
                    .bones
                    .iter()
                    .map(|c| crate::scene::capsule_sdf(p, &c.a, &c.b, c.radius))
                    .fold(f64::INFINITY, f64::min)
                    .abs()
            })
            .sum::<f64>()
            / 300.0
            * 100.0;
        let pc = PointCloud::new(cloud, None).unwrap();
        assert!((p2s(&pc, &scene).unwrap() - direct).abs() < 1e-9);
    }

    #[test]
    fn normal_consistency_cases() {
        let pts = sphere_cloud(500, 8);
        let radial: Vec<Vec3> = pts.iter().map(|p| p.normalize()).collect();
        let pc = PointCloud::new(pts.clone(), Some(radial.clone())).unwrap();
        assert!((normal_consistency(&pc, &pc).unwrap() - 1.0).abs() < 1e-12);
        let perp: Vec<Vec3> = radial
            .iter()
            .map(|n| {
                let t = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
                n.cross(&t).normalize()
            })
            .collect();
        let rotated = PointCloud::new(pts, Some(perp)).unwrap();
        assert!(normal_consistency(&rotated, &pc).unwrap().abs() < 1e-12);
        let bare = PointCloud::new(vec![Vec3::zeros()], None).unwrap();
        assert!(matches!(normal_consistency(&bare, &pc), Err(Error::MissingNormals)));
    }
}
