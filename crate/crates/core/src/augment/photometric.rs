use crate::error::{Error, Result};
use crate::stream::Stream;
use ndarray::{Array3, Array4};
use rand::RngExt;

/// Stochastic color-space augmentation, BYOL-style. Strengths of zero and
/// probabilities of zero make the corresponding component a no-op.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricPolicy {
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift range in turns (0.1 = +-36 degrees).
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
}

impl Default for PhotometricPolicy {
    fn default() -> Self {
        PhotometricPolicy {
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
        }
    }
}

impl PhotometricPolicy {
    /// BYOL uses a weaker blur on the second view.
    pub fn second_view(&self) -> Self {
        PhotometricPolicy { blur_prob: 0.1, ..*self }
    }

    pub fn no_op() -> Self {
        PhotometricPolicy {
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
        }
    }

    /// Flip only; FixMatch weak augmentation combines this with a small
    /// translation.
    pub fn flip_only() -> Self {
        PhotometricPolicy { flip_prob: 0.5, ..Self::no_op() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if s < 0.0 {
                return Err(Error::Config(format!("{name} must be nonnegative, got {s}")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Config(format!("hue must be in [0, 0.5], got {}", self.hue)));
        }
        Ok(())
    }
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Apply the policy to one `[3, H, W]` image in `[0, 1]`. Values stay clamped
/// to `[0, 1]`; the draw sequence is fixed so results are deterministic given
/// the stream state.
pub fn apply_photometric(x: &Array3<f32>, policy: &PhotometricPolicy, rng: &mut Stream) -> Array3<f32> {
    debug_assert_eq!(x.shape()[0], 3, "photometric ops expect RGB");
    let mut img = x.clone();
    if policy.flip_prob > 0.0 && rng.random_bool(policy.flip_prob) {
        flip_horizontal(&mut img);
    }
    if policy.brightness > 0.0 {
        let f = 1.0 + rng.random_range(-policy.brightness..policy.brightness) as f32;
        img.mapv_inplace(|v| (v * f).clamp(0.0, 1.0));
    }
    if policy.contrast > 0.0 {
        let f = 1.0 + rng.random_range(-policy.contrast..policy.contrast) as f32;
        let mean = luma_mean(&img);
        img.mapv_inplace(|v| (mean + f * (v - mean)).clamp(0.0, 1.0));
    }
    if policy.saturation > 0.0 {
        let f = 1.0 + rng.random_range(-policy.saturation..policy.saturation) as f32;
        saturate(&mut img, f);
    }
    if policy.hue > 0.0 {
        let turns = rng.random_range(-policy.hue..policy.hue);
        rotate_hue(&mut img, turns);
    }
    if policy.grayscale_prob > 0.0 && rng.random_bool(policy.grayscale_prob) {
        grayscale(&mut img);
    }
    if policy.blur_prob > 0.0 && rng.random_bool(policy.blur_prob) {
        let sigma = rng.random_range(0.1..1.5);
        gaussian_blur(&mut img, sigma);
    }
    img
}

/// Batch helper: each sample gets independent draws from the same stream.
pub fn apply_photometric_batch(
    x: &Array4<f32>,
    policy: &PhotometricPolicy,
    rng: &mut Stream,
) -> Array4<f32> {
    let mut out = x.clone();
    for (i, sample) in x.outer_iter().enumerate() {
        let img = apply_photometric(&sample.to_owned(), policy, rng);
        out.index_axis_mut(ndarray::Axis(0), i).assign(&img);
    }
    out
}

fn flip_horizontal(img: &mut Array3<f32>) {
    let (_, h, w) = img.dim();
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w / 2 {
                let a = img[[c, i, j]];
                img[[c, i, j]] = img[[c, i, w - 1 - j]];
                img[[c, i, w - 1 - j]] = a;
            }
        }
    }
}

fn luma_mean(img: &Array3<f32>) -> f32 {
    let (_, h, w) = img.dim();
    let mut s = 0.0f64;
    for i in 0..h {
        for j in 0..w {
            s += (LUMA[0] * img[[0, i, j]] + LUMA[1] * img[[1, i, j]] + LUMA[2] * img[[2, i, j]])
                as f64;
        }
    }
    (s / (h * w) as f64) as f32
}

fn saturate(img: &mut Array3<f32>, f: f32) {
    let (_, h, w) = img.dim();
    for i in 0..h {
        for j in 0..w {
            let l = LUMA[0] * img[[0, i, j]] + LUMA[1] * img[[1, i, j]] + LUMA[2] * img[[2, i, j]];
            for c in 0..3 {
                img[[c, i, j]] = (l + f * (img[[c, i, j]] - l)).clamp(0.0, 1.0);
            }
        }
    }
}

fn grayscale(img: &mut Array3<f32>) {
    let (_, h, w) = img.dim();
    for i in 0..h {
        for j in 0..w {
            let l = LUMA[0] * img[[0, i, j]] + LUMA[1] * img[[1, i, j]] + LUMA[2] * img[[2, i, j]];
            for c in 0..3 {
                img[[c, i, j]] = l;
            }
        }
    }
}

/// Hue rotation in YIQ space.
fn rotate_hue(img: &mut Array3<f32>, turns: f64) {
    let a = (turns * std::f64::consts::TAU) as f32;
    let (cs, sn) = (a.cos(), a.sin());
    let (_, h, w) = img.dim();
    for i in 0..h {
        for j in 0..w {
            let (r, g, b) = (img[[0, i, j]], img[[1, i, j]], img[[2, i, j]]);
            let y = 0.299 * r + 0.587 * g + 0.114 * b;
            let iq_i = 0.596 * r - 0.274 * g - 0.322 * b;
            let iq_q = 0.211 * r - 0.523 * g + 0.312 * b;
            let (ri, rq) = (cs * iq_i - sn * iq_q, sn * iq_i + cs * iq_q);
            img[[0, i, j]] = (y + 0.956 * ri + 0.621 * rq).clamp(0.0, 1.0);
            img[[1, i, j]] = (y - 0.272 * ri - 0.647 * rq).clamp(0.0, 1.0);
            img[[2, i, j]] = (y - 1.106 * ri + 1.703 * rq).clamp(0.0, 1.0);
        }
    }
}

fn gaussian_blur(img: &mut Array3<f32>, sigma: f64) {
    const R: isize = 2;
    let mut kernel = [0.0f64; (2 * R + 1) as usize];
    let mut z = 0.0;
    for (k, item) in kernel.iter_mut().enumerate() {
        let d = k as f64 - R as f64;
        *item = (-d * d / (2.0 * sigma * sigma)).exp();
        z += *item;
    }
    for item in kernel.iter_mut() {
        *item /= z;
    }
    let (_, h, w) = img.dim();
    let mut tmp = img.clone();
    // horizontal pass with edge clamp
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0f64;
                for (k, &kv) in kernel.iter().enumerate() {
                    let jj = (j as isize + k as isize - R).clamp(0, w as isize - 1) as usize;
                    acc += kv * img[[c, i, jj]] as f64;
                }
                tmp[[c, i, j]] = acc as f32;
            }
        }
    }
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0f64;
                for (k, &kv) in kernel.iter().enumerate() {
                    let ii = (i as isize + k as isize - R).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[[c, ii, j]] as f64;
                }
                img[[c, i, j]] = (acc as f32).clamp(0.0, 1.0);
            }
        }
    }
}
