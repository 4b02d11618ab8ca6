use super::affine::AffineTransform;
use crate::error::{Error, Result};
use crate::tensor::Elem;
use ndarray::Array4;

/// Warped tensor plus the per-pixel validity mask: 1 where the sample
/// location fell inside the input frame (all bilinear taps on real pixels),
/// 0 where the output pixel carries the fill value.
#[derive(Debug, Clone)]
pub struct WarpResult {
    pub image: Array4<f32>,
    /// `[B, 1, H, W]`, values exactly 0.0 or 1.0.
    pub validity: Array4<f32>,
}

const MISSING: u32 = u32::MAX;
const SNAP: f64 = 1e-6;

/// Bilinear taps for one output pixel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub valid: bool,
    pub idx: [u32; 4],
    pub wgt: [f64; 4],
}

/// Precomputed sampling pattern for one transform at one resolution.
pub(crate) struct WarpPlan {
    pub h: usize,
    pub w: usize,
    pub taps: Vec<Tap>,
}

/// Build the bilinear sampling plan. Output pixel centers are mapped through
/// the transform on the normalized [-1, 1] grid (align-corners-off). A pixel
/// is valid iff its source point lies inside the pixel-center hull, so every
/// valid pixel is a true interpolation with all taps in frame; everything
/// else takes the fill value. Source coordinates within `SNAP` of a pixel
/// center collapse to a single tap, making identity and integer translations
/// exact.
pub(crate) fn plan(t: &AffineTransform, h: usize, w: usize) -> WarpPlan {
    let mut taps = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = (2.0 * i as f64 + 1.0) / h as f64 - 1.0;
        for j in 0..w {
            let x = (2.0 * j as f64 + 1.0) / w as f64 - 1.0;
            let (xs, ys) = t.apply(x, y);
            let mut px = ((xs + 1.0) * w as f64 - 1.0) / 2.0;
            let mut py = ((ys + 1.0) * h as f64 - 1.0) / 2.0;
            if (px - px.round()).abs() < SNAP {
                px = px.round();
            }
            if (py - py.round()).abs() < SNAP {
                py = py.round();
            }
            let valid = px >= 0.0 && px <= (w - 1) as f64 && py >= 0.0 && py <= (h - 1) as f64;
            if !valid {
                taps.push(Tap { valid, idx: [MISSING; 4], wgt: [0.0; 4] });
                continue;
            }
            let j0 = px.floor() as i64;
            let i0 = py.floor() as i64;
            let fx = px - j0 as f64;
            let fy = py - i0 as f64;
            let corners = [
                (i0, j0, (1.0 - fy) * (1.0 - fx)),
                (i0, j0 + 1, (1.0 - fy) * fx),
                (i0 + 1, j0, fy * (1.0 - fx)),
                (i0 + 1, j0 + 1, fy * fx),
            ];
            let mut idx = [MISSING; 4];
            let mut wgt = [0.0; 4];
            for (slot, (ii, jj, wv)) in corners.into_iter().enumerate() {
                if wv > 0.0 {
                    debug_assert!(ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w);
                    idx[slot] = (ii as usize * w + jj as usize) as u32;
                    wgt[slot] = wv;
                }
            }
            taps.push(Tap { valid, idx, wgt });
        }
    }
    WarpPlan { h, w, taps }
}

/// Sample `channels` planes of `h*w` values through the plan. Missing taps
/// contribute the fill value.
pub(crate) fn warp_channels<F: Elem>(
    plan: &WarpPlan,
    src: &[F],
    channels: usize,
    fill: F,
    dst: &mut [F],
) {
    let hw = plan.h * plan.w;
    debug_assert_eq!(src.len(), channels * hw);
    debug_assert_eq!(dst.len(), channels * hw);
    for c in 0..channels {
        let sp = &src[c * hw..(c + 1) * hw];
        let dp = &mut dst[c * hw..(c + 1) * hw];
        for (o, tap) in plan.taps.iter().enumerate() {
            if !tap.valid {
                dp[o] = fill;
                continue;
            }
            let mut acc = 0.0f64;
            let mut wsum = 0.0f64;
            for k in 0..4 {
                if tap.idx[k] != MISSING {
                    acc += tap.wgt[k] * sp[tap.idx[k] as usize].to_f64().unwrap();
                    wsum += tap.wgt[k];
                }
            }
            acc += (1.0 - wsum) * fill.to_f64().unwrap();
            dp[o] = F::from_f64(acc).unwrap();
        }
    }
}

/// Scatter output gradients back to the source planes (accumulating).
pub(crate) fn warp_backward_channels<F: Elem>(
    plan: &WarpPlan,
    grad_out: &[F],
    channels: usize,
    grad_src: &mut [F],
) {
    let hw = plan.h * plan.w;
    for c in 0..channels {
        let go = &grad_out[c * hw..(c + 1) * hw];
        let gs = &mut grad_src[c * hw..(c + 1) * hw];
        for (o, tap) in plan.taps.iter().enumerate() {
            if !tap.valid {
                continue;
            }
            let g = go[o];
            for k in 0..4 {
                if tap.idx[k] != MISSING {
                    gs[tap.idx[k] as usize] += F::from_f64(tap.wgt[k]).unwrap() * g;
                }
            }
        }
    }
}

pub(crate) fn validity_from_plan(plan: &WarpPlan) -> Vec<f32> {
    plan.taps.iter().map(|t| if t.valid { 1.0 } else { 0.0 }).collect()
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h < 2 || w < 2 {
        return Err(Error::DegenerateInput(format!("warp needs H, W >= 2, got {h}x{w}")));
    }
    Ok(())
}

/// Warp a `[B, C, H, W]` tensor by a single transform.
pub fn warp(x: &Array4<f32>, t: &AffineTransform, fill: f32) -> Result<WarpResult> {
    let b = x.shape()[0];
    warp_batch(x, &vec![*t; b.max(1)], fill)
}

/// Warp each sample by its own transform (`ts.len()` must be `B`, or 1 to
/// share one transform across the batch).
pub fn warp_batch(x: &Array4<f32>, ts: &[AffineTransform], fill: f32) -> Result<WarpResult> {
    let (b, c, h, w) = x.dim();
    check_dims(h, w)?;
    if ts.len() != b && ts.len() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "got {} transforms for batch of {b}",
            ts.len()
        )));
    }
    let mut image = Array4::<f32>::zeros((b, c, h, w));
    let mut validity = Array4::<f32>::zeros((b, 1, h, w));
    let src_all = x.as_slice().expect("contiguous input");
    {
        let img_all = image.as_slice_mut().unwrap();
        let val_all = validity.as_slice_mut().unwrap();
        let shared = if ts.len() == 1 { Some(plan(&ts[0], h, w)) } else { None };
        for bi in 0..b {
            let owned;
            let p = match &shared {
                Some(p) => p,
                None => {
                    owned = plan(&ts[bi], h, w);
                    &owned
                }
            };
            warp_channels(
                p,
                &src_all[bi * c * h * w..(bi + 1) * c * h * w],
                c,
                fill,
                &mut img_all[bi * c * h * w..(bi + 1) * c * h * w],
            );
            val_all[bi * h * w..(bi + 1) * h * w].copy_from_slice(&validity_from_plan(p));
        }
    }
    Ok(WarpResult { image, validity })
}
