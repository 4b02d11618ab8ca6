use crate::error::{Error, Result};
use crate::stream::Stream;
use rand::RngExt;

const DET_EPS: f64 = 1e-8;

/// Invertible planar transform as a 2x3 row-major matrix mapping normalized
/// *output* coordinates `(x, y)` in `[-1, 1]` to normalized *input*
/// coordinates (inverse-mapping convention, align-corners-off grid).
///
/// One pixel corresponds to `2/W` (resp. `2/H`) normalized units, so the same
/// transform warps any resolution consistently.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub matrix: [[f64; 3]; 2],
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform { matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] }
    }

    /// Shift image content by `(dx, dy)` in normalized units (+x right, +y down).
    pub fn translation(dx: f64, dy: f64) -> Self {
        AffineTransform { matrix: [[1.0, 0.0, -dx], [0.0, 1.0, -dy]] }
    }

    /// Rotate image content by `degrees` about the center.
    pub fn rotation_degrees(degrees: f64) -> Self {
        let a = degrees.to_radians();
        let (s, c) = a.sin_cos();
        // inverse map rotates sample coordinates the other way
        AffineTransform { matrix: [[c, s, 0.0], [-s, c, 0.0]] }
    }

    /// Magnify image content by `s` about the center.
    pub fn scaling(s: f64) -> Self {
        AffineTransform { matrix: [[1.0 / s, 0.0, 0.0], [0.0, 1.0 / s, 0.0]] }
    }

    /// Shear image content by the given per-axis angles.
    pub fn shear_degrees(x_degrees: f64, y_degrees: f64) -> Self {
        let kx = x_degrees.to_radians().tan();
        let ky = y_degrees.to_radians().tan();
        // forward linear part is [[1, kx], [ky, 1]]; store its inverse
        let det = 1.0 - kx * ky;
        AffineTransform {
            matrix: [[1.0 / det, -kx / det, 0.0], [-ky / det, 1.0 / det, 0.0]],
        }
    }

    fn hom(&self) -> [[f64; 3]; 3] {
        [self.matrix[0], self.matrix[1], [0.0, 0.0, 1.0]]
    }

    /// Map a normalized output coordinate to its source coordinate.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.matrix;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    /// Transform equivalent to warping by `other` first, then by `self`.
    pub fn after(&self, other: &AffineTransform) -> AffineTransform {
        // warp(self, warp(other, x)) samples through other's matrix first
        let a = other.hom();
        let b = self.hom();
        let mut m = [[0.0; 3]; 2];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        AffineTransform { matrix: m }
    }

    pub fn det(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    /// Inverse transform. Fails when the linear 2x2 block is singular.
    pub fn invert(&self) -> Result<AffineTransform> {
        let det = self.det();
        if det.abs() <= DET_EPS {
            return Err(Error::SingularTransform { det });
        }
        let m = &self.matrix;
        let l = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        let tx = -(l[0][0] * m[0][2] + l[0][1] * m[1][2]);
        let ty = -(l[1][0] * m[0][2] + l[1][1] * m[1][2]);
        Ok(AffineTransform { matrix: [[l[0][0], l[0][1], tx], [l[1][0], l[1][1], ty]] })
    }

    pub fn is_identity(&self) -> bool {
        self.fro_dist(&AffineTransform::identity()) == 0.0
    }

    /// Frobenius distance between the 2x3 matrices.
    pub fn fro_dist(&self, other: &AffineTransform) -> f64 {
        let mut s = 0.0;
        for i in 0..2 {
            for j in 0..3 {
                let d = self.matrix[i][j] - other.matrix[i][j];
                s += d * d;
            }
        }
        s.sqrt()
    }
}

/// Transform equivalent to applying `b` to the image and then `a`
/// (matrix product in homogeneous form).
pub fn compose(a: &AffineTransform, b: &AffineTransform) -> AffineTransform {
    a.after(b)
}

/// Ranges for the stochastic affine augmentation. Each component is included
/// independently with probability `include_prob` (fixed at 0.5).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffinePolicy {
    pub include_prob: f64,
    /// Log-uniform magnification range.
    pub scale: (f64, f64),
    pub rotation_degrees: (f64, f64),
    /// Per-axis shear angle range.
    pub shear_degrees: (f64, f64),
    /// Translation range as a fraction of image size (1.0 = full frame).
    pub translation: (f64, f64),
}

impl Default for AffinePolicy {
    fn default() -> Self {
        AffinePolicy {
            include_prob: 0.5,
            scale: (0.75, 4.0 / 3.0),
            rotation_degrees: (-30.0, 30.0),
            shear_degrees: (-10.0, 10.0),
            translation: (-0.1, 0.1),
        }
    }
}

/// Which components a draw included, with the sampled parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampledComponents {
    pub scale: Option<f64>,
    pub rotation: Option<f64>,
    pub shear: Option<(f64, f64)>,
    pub translation: Option<(f64, f64)>,
}

impl AffinePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.include_prob != 0.5 {
            return Err(Error::Config(format!(
                "affine include_prob must be 0.5, got {}",
                self.include_prob
            )));
        }
        let ordered = |r: (f64, f64)| r.0 <= r.1;
        if !ordered(self.scale) || self.scale.0 <= 0.0 {
            return Err(Error::Config(format!("bad affine scale range {:?}", self.scale)));
        }
        if !ordered(self.rotation_degrees) || !ordered(self.shear_degrees) || !ordered(self.translation) {
            return Err(Error::Config("affine ranges must be ordered".into()));
        }
        if self.shear_degrees.0 <= -45.0 || self.shear_degrees.1 >= 45.0 {
            return Err(Error::Config("shear range must stay within (-45, 45) degrees".into()));
        }
        Ok(())
    }

    /// Draw one transform; the composition order is scale, rotation, shear,
    /// translation (applied to the image in that order). Deterministic given
    /// the stream state.
    pub fn sample(&self, rng: &mut Stream) -> AffineTransform {
        self.sample_parts(rng).0
    }

    pub fn sample_parts(&self, rng: &mut Stream) -> (AffineTransform, SampledComponents) {
        let mut parts = SampledComponents::default();
        let mut t = AffineTransform::identity();
        if rng.random_bool(self.include_prob) {
            let (lo, hi) = self.scale;
            let s = if lo == hi { lo } else { (rng.random_range(lo.ln()..hi.ln())).exp() };
            parts.scale = Some(s);
            t = AffineTransform::scaling(s).after(&t);
        }
        if rng.random_bool(self.include_prob) {
            let deg = sample_range(rng, self.rotation_degrees);
            parts.rotation = Some(deg);
            t = AffineTransform::rotation_degrees(deg).after(&t);
        }
        if rng.random_bool(self.include_prob) {
            let ax = sample_range(rng, self.shear_degrees);
            let ay = sample_range(rng, self.shear_degrees);
            parts.shear = Some((ax, ay));
            t = AffineTransform::shear_degrees(ax, ay).after(&t);
        }
        if rng.random_bool(self.include_prob) {
            let fx = sample_range(rng, self.translation);
            let fy = sample_range(rng, self.translation);
            parts.translation = Some((fx, fy));
            // fraction of image size -> normalized [-1, 1] units
            t = AffineTransform::translation(2.0 * fx, 2.0 * fy).after(&t);
        }
        (t, parts)
    }
}

fn sample_range(rng: &mut Stream, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi { lo } else { rng.random_range(lo..hi) }
}
