//! Stochastic photometric and geometric augmentation, including the
//! differentiable, invertible affine warp with validity-masked bilinear
//! sampling.
//!
//! Conventions: images are `[C, H, W]` (or `[B, C, H, W]`) `f32` in `[0, 1]`;
//! transforms act on the normalized `[-1, 1]` grid with the inverse-mapping
//! convention, so composition and inversion are pure matrix algebra and
//! warping is resolution independent. Photometric operations always precede
//! the affine warp.

pub mod affine;
pub mod photometric;
pub mod warp;

pub use affine::{compose, AffinePolicy, AffineTransform, SampledComponents};
pub use photometric::{apply_photometric, apply_photometric_batch, PhotometricPolicy};
pub use warp::{warp, warp_batch, WarpResult};

use crate::stream::Stream;
use ndarray::Array3;
use rand::RngExt;

/// Two independently augmented views of one image with the affine transforms
/// that produced them (identity when `affine` is `None`, e.g. classification
/// mode).
///
/// Draw order per view: photometric first, then the affine sample, then the
/// warp; replaying the same stream reproduces each stage bitwise.
pub fn make_view_pair(
    x: &Array3<f32>,
    photometric: &PhotometricPolicy,
    affine: Option<&AffinePolicy>,
    rng: &mut Stream,
) -> (Array3<f32>, Array3<f32>, AffineTransform, AffineTransform) {
    make_view_pair_asym(x, photometric, photometric, affine, rng)
}

/// Same as [`make_view_pair`] with per-view photometric policies (BYOL blurs
/// the second view less often).
pub fn make_view_pair_asym(
    x: &Array3<f32>,
    photo1: &PhotometricPolicy,
    photo2: &PhotometricPolicy,
    affine: Option<&AffinePolicy>,
    rng: &mut Stream,
) -> (Array3<f32>, Array3<f32>, AffineTransform, AffineTransform) {
    let (v1, t1) = make_view(x, photo1, affine, rng);
    let (v2, t2) = make_view(x, photo2, affine, rng);
    (v1, v2, t1, t2)
}

fn make_view(
    x: &Array3<f32>,
    photo: &PhotometricPolicy,
    affine: Option<&AffinePolicy>,
    rng: &mut Stream,
) -> (Array3<f32>, AffineTransform) {
    let p = apply_photometric(x, photo, rng);
    match affine {
        None => (p, AffineTransform::identity()),
        Some(policy) => {
            let t = policy.sample(rng);
            (warp_one(&p, &t), t)
        }
    }
}

fn warp_one(x: &Array3<f32>, t: &AffineTransform) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let batched = x.clone().into_shape_with_order((1, c, h, w)).unwrap();
    let res = warp(&batched, t, 0.0).expect("warp of a valid view");
    res.image.into_shape_with_order((c, h, w)).unwrap()
}

/// FixMatch weak augmentation: flip with probability 0.5 plus a small random
/// translation (up to 10% of the frame).
pub fn weak_augment(x: &Array3<f32>, rng: &mut Stream) -> Array3<f32> {
    let mut img = x.clone();
    if rng.random_bool(0.5) {
        img.invert_axis(ndarray::Axis(2));
        img = img.as_standard_layout().into_owned();
    }
    let tx = rng.random_range(-0.1..0.1);
    let ty = rng.random_range(-0.1..0.1);
    warp_one(&img, &AffineTransform::translation(2.0 * tx, 2.0 * ty))
}

/// FixMatch strong augmentation: weak geometry plus the full photometric
/// jitter and a sampled affine transform.
pub fn strong_augment(x: &Array3<f32>, affine: &AffinePolicy, rng: &mut Stream) -> Array3<f32> {
    let p = apply_photometric(x, &PhotometricPolicy::default(), rng);
    let t = affine.sample(rng);
    warp_one(&p, &t)
}
