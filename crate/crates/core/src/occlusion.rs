//! Synthetic occluders sized to cover a requested fraction of the subject
//! silhouette.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OccluderShape {
    Rectangles,
    Ellipses,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcclusionSpec {
    /// Fraction of silhouette pixels to cover, in `[0, 1)`.
    pub fraction: f64,
    pub shape: OccluderShape,
    pub max_pieces: usize,
    pub fill: [f64; 3],
    pub seed: u64,
}

impl Default for OcclusionSpec {
    fn default() -> Self {
        OcclusionSpec {
            fraction: 0.5,
            shape: OccluderShape::Rectangles,
            max_pieces: 3,
            fill: [0.5; 3],
            seed: 0,
        }
    }
}

impl OcclusionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.fraction) {
            return Err(Error::invalid(format!("occlusion fraction {} outside [0, 1)", self.fraction)));
        }
        if self.max_pieces == 0 {
            return Err(Error::invalid("occlusion needs max_pieces >= 1"));
        }
        Ok(())
    }
}

/// A generated mask and the silhouette coverage it actually achieves.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMask {
    pub mask: GrayImage,
    pub coverage: f64,
}

const TOLERANCE: f64 = 0.02;
const MAX_BISECTIONS: usize = 60;
/// Fresh piece layouts tried when coverage jumps across the tolerance band.
const MAX_LAYOUTS: usize = 16;

struct Piece {
    cx: f64,
    cy: f64,
    /// Half extents per unit of the global size parameter.
    ax: f64,
    ay: f64,
}

fn rasterize(pieces: &[Piece], shape: OccluderShape, size: f64, w: usize, h: usize) -> GrayImage {
    GrayImage::from_fn(w, h, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let hit = pieces.iter().any(|p| {
            let u = (px - p.cx) / (p.ax * size);
            let v = (py - p.cy) / (p.ay * size);
            match shape {
                OccluderShape::Rectangles => u.abs() <= 1.0 && v.abs() <= 1.0,
                OccluderShape::Ellipses => u * u + v * v <= 1.0,
            }
        });
        hit as u8 as f64
    })
}

/// Fraction of silhouette pixels (`> 0.5`) also set in `mask`.
pub fn silhouette_coverage(silhouette: &GrayImage, mask: &GrayImage) -> Result<f64> {
    if silhouette.shape() != mask.shape() {
        return Err(Error::shape(format!("{:?}", silhouette.shape()), format!("{:?}", mask.shape())));
    }
    let total = silhouette.count_on();
    if total == 0 {
        return Ok(0.0);
    }
    let covered = silhouette
        .data
        .iter()
        .zip(&mask.data)
        .filter(|(s, m)| **s > 0.5 && **m > 0.5)
        .count();
    Ok(covered as f64 / total as f64)
}

fn generate_with(silhouette: &GrayImage, spec: &OcclusionSpec, rng: &mut ChaCha8Rng) -> Result<OcclusionMask> {
    spec.validate()?;
    let (w, h) = silhouette.shape();
    if spec.fraction == 0.0 {
        return Ok(OcclusionMask {
            mask: GrayImage::new(w, h),
            coverage: 0.0,
        });
    }
    let mut bbox = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if silhouette.get(x, y) > 0.5 {
                bbox = (bbox.0.min(x), bbox.1.min(y), bbox.2.max(x), bbox.3.max(y));
            }
        }
    }
    if bbox.0 == usize::MAX {
        return Err(Error::invalid("cannot occlude an empty silhouette"));
    }
    let mut best = OcclusionMask {
        mask: GrayImage::new(w, h),
        coverage: 0.0,
    };
    for _ in 0..MAX_LAYOUTS {
        let n = rng.random_range(1..=spec.max_pieces);
        let pieces: Vec<Piece> = (0..n)
            .map(|_| Piece {
                cx: rng.random_range(bbox.0 as f64..=bbox.2 as f64 + 1.0),
                cy: rng.random_range(bbox.1 as f64..=bbox.3 as f64 + 1.0),
                ax: rng.random_range(0.5..1.5),
                ay: rng.random_range(0.5..1.5),
            })
            .collect();

        // Coverage is monotone in the size parameter, so bisect on it.
        let (mut lo, mut hi) = (0.0, 2.0 * (w + h) as f64);
        for _ in 0..MAX_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            let mask = rasterize(&pieces, spec.shape, mid, w, h);
            let coverage = silhouette_coverage(silhouette, &mask)?;
            if (coverage - spec.fraction).abs() <= TOLERANCE {
                return Ok(OcclusionMask { mask, coverage });
            }
            if (coverage - spec.fraction).abs() < (best.coverage - spec.fraction).abs() {
                best = OcclusionMask { mask, coverage };
            }
            if coverage < spec.fraction {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    Err(Error::OcclusionUnreachable {
        requested: spec.fraction,
        achieved: best.coverage,
    })
}

/// Union of up to `max_pieces` random primitives centered inside the
/// silhouette's bounding box, scaled until the covered share of the
/// silhouette is within 0.02 of `spec.fraction`.
pub fn generate_mask(silhouette: &GrayImage, spec: &OcclusionSpec) -> Result<OcclusionMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    generate_with(silhouette, spec, &mut rng)
}

/// Replaces masked pixels with `fill`.
pub fn apply_occlusion(image: &RgbImage, mask: &GrayImage, fill: [f64; 3]) -> Result<RgbImage> {
    if image.shape() != mask.shape() {
        return Err(Error::shape(format!("{:?}", image.shape()), format!("{:?}", mask.shape())));
    }
    let mut out = image.clone();
    for (px, &m) in out.data.chunks_mut(3).zip(&mask.data) {
        if m > 0.5 {
            px.copy_from_slice(&fill);
        }
    }
    Ok(out)
}

/// One mask per fraction, each drawn from its own stream of the base seed.
pub fn occlusion_suite(
    silhouette: &GrayImage,
    base: &OcclusionSpec,
    fractions: &[f64],
) -> Result<Vec<(f64, OcclusionMask)>> {
    fractions
        .iter()
        .enumerate()
        .map(|(i, &fraction)| {
            let spec = OcclusionSpec { fraction, ..*base };
            let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
            rng.set_stream(i as u64 + 1);
            Ok((fraction, generate_with(silhouette, &spec, &mut rng)?))
        })
        .collect()
}
