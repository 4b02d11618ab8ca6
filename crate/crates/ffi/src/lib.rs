//! C ABI for the targetpre pipeline.
//!
//! Conventions: images are row-major `float` buffers in `[0, 1]` with layout
//! `[N, C, H, W]`; every fallible call returns a [`TpStatus`] and reports
//! detail through `tp_last_error()`. Handles returned by `tp_model_load`
//! must be released with `tp_model_free`.

use ndarray::{Array2, Array4};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use targetpre::augment::{compose, warp_batch, AffinePolicy, AffineTransform};
use targetpre::contrastive::info_nce;
use targetpre::error::Error;
use targetpre::eval::{cluster_accuracy, ClusterAssignment};
use targetpre::harness::checkpoint;
use targetpre::model::{infer_class_logits, infer_embeddings, ModelState, EMBED_DIM};
use targetpre::stream::stream;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TpStatus {
    TpOk = 0,
    TpErrInvalidArg = 1,
    TpErrConfig = 2,
    TpErrData = 3,
    TpErrIo = 4,
    TpErrCorrupt = 5,
    TpErrNumeric = 6,
    TpErrPanic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(cleaned).unwrap());
}

fn status_of(err: &Error) -> TpStatus {
    match err {
        Error::Config(_) => TpStatus::TpErrConfig,
        Error::Data(_) => TpStatus::TpErrData,
        Error::Io { .. } | Error::Json { .. } => TpStatus::TpErrIo,
        Error::Corrupt(_) => TpStatus::TpErrCorrupt,
        Error::SingularTransform { .. }
        | Error::DegenerateInput(_)
        | Error::ShapeMismatch(_)
        | Error::NoCorrespondence => TpStatus::TpErrNumeric,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (TpStatus, String)>) -> TpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TpStatus::TpOk,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic in targetpre-ffi call");
            TpStatus::TpErrPanic
        }
    }
}

fn from_crate(err: Error) -> (TpStatus, String) {
    (status_of(&err), err.to_string())
}

fn invalid(msg: &str) -> (TpStatus, String) {
    (TpStatus::TpErrInvalidArg, msg.to_string())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent error on this thread (empty when none).
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// 2x3 row-major affine matrix mapping normalized output coordinates in
/// [-1, 1] to input coordinates (inverse-mapping convention).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TpAffine {
    pub m: [f64; 6],
}

fn to_transform(a: &TpAffine) -> AffineTransform {
    AffineTransform { matrix: [[a.m[0], a.m[1], a.m[2]], [a.m[3], a.m[4], a.m[5]]] }
}

fn from_transform(t: &AffineTransform) -> TpAffine {
    TpAffine {
        m: [
            t.matrix[0][0],
            t.matrix[0][1],
            t.matrix[0][2],
            t.matrix[1][0],
            t.matrix[1][1],
            t.matrix[1][2],
        ],
    }
}

/// Sampling ranges for `tp_affine_sample`; `include_prob` must be 0.5.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TpAffinePolicy {
    pub include_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub rotation_min_deg: f64,
    pub rotation_max_deg: f64,
    pub shear_min_deg: f64,
    pub shear_max_deg: f64,
    pub translation_min: f64,
    pub translation_max: f64,
}

#[no_mangle]
pub extern "C" fn tp_affine_identity() -> TpAffine {
    from_transform(&AffineTransform::identity())
}

/// Default augmentation policy (scale 0.75..4/3 log-uniform, rotation +-30
/// degrees, shear +-10 degrees, translation +-10%).
#[no_mangle]
pub extern "C" fn tp_affine_default_policy() -> TpAffinePolicy {
    let p = AffinePolicy::default();
    TpAffinePolicy {
        include_prob: p.include_prob,
        scale_min: p.scale.0,
        scale_max: p.scale.1,
        rotation_min_deg: p.rotation_degrees.0,
        rotation_max_deg: p.rotation_degrees.1,
        shear_min_deg: p.shear_degrees.0,
        shear_max_deg: p.shear_degrees.1,
        translation_min: p.translation.0,
        translation_max: p.translation.1,
    }
}

/// Transform equivalent to warping by `b` first, then by `a`.
///
/// # Safety
/// All pointers must be valid for the duration of the call.
#[no_mangle]
pub unsafe extern "C" fn tp_affine_compose(
    a: *const TpAffine,
    b: *const TpAffine,
    out: *mut TpAffine,
) -> TpStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(invalid("null pointer"));
        }
        let r = compose(&to_transform(&*a), &to_transform(&*b));
        *out = from_transform(&r);
        Ok(())
    })
}

/// Inverse transform; fails on a singular linear block.
///
/// # Safety
/// All pointers must be valid for the duration of the call.
#[no_mangle]
pub unsafe extern "C" fn tp_affine_invert(a: *const TpAffine, out: *mut TpAffine) -> TpStatus {
    guard(|| {
        if a.is_null() || out.is_null() {
            return Err(invalid("null pointer"));
        }
        let inv = to_transform(&*a).invert().map_err(from_crate)?;
        *out = from_transform(&inv);
        Ok(())
    })
}

/// Draw a random transform from the policy, deterministic given `seed`.
///
/// # Safety
/// All pointers must be valid for the duration of the call.
#[no_mangle]
pub unsafe extern "C" fn tp_affine_sample(
    policy: *const TpAffinePolicy,
    seed: u64,
    out: *mut TpAffine,
) -> TpStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("null out pointer"));
        }
        let p = if policy.is_null() {
            AffinePolicy::default()
        } else {
            let p = &*policy;
            AffinePolicy {
                include_prob: p.include_prob,
                scale: (p.scale_min, p.scale_max),
                rotation_degrees: (p.rotation_min_deg, p.rotation_max_deg),
                shear_degrees: (p.shear_min_deg, p.shear_max_deg),
                translation: (p.translation_min, p.translation_max),
            }
        };
        p.validate().map_err(from_crate)?;
        let mut rng = stream(seed, "ffi-affine");
        *out = from_transform(&p.sample(&mut rng));
        Ok(())
    })
}

/// Bilinear warp of one `[C, H, W]` image (validity-masked; out-of-frame
/// pixels take `fill`). `out_image` holds `C*H*W` floats; `out_mask`, when
/// non-null, receives `H*W` values in {0, 1}.
///
/// # Safety
/// Buffers must match the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn tp_warp(
    image: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    transform: *const TpAffine,
    fill: f32,
    out_image: *mut f32,
    out_mask: *mut f32,
) -> TpStatus {
    guard(|| {
        if image.is_null() || transform.is_null() || out_image.is_null() {
            return Err(invalid("null pointer"));
        }
        if channels == 0 || height < 2 || width < 2 {
            return Err(invalid("warp needs C >= 1 and H, W >= 2"));
        }
        let src = std::slice::from_raw_parts(image, channels * height * width);
        let x = Array4::from_shape_vec((1, channels, height, width), src.to_vec())
            .map_err(|e| (TpStatus::TpErrInvalidArg, e.to_string()))?;
        let res = warp_batch(&x, &[to_transform(&*transform)], fill).map_err(from_crate)?;
        let dst = std::slice::from_raw_parts_mut(out_image, channels * height * width);
        dst.copy_from_slice(res.image.as_slice().unwrap());
        if !out_mask.is_null() {
            let m = std::slice::from_raw_parts_mut(out_mask, height * width);
            m.copy_from_slice(res.validity.as_slice().unwrap());
        }
        Ok(())
    })
}

/// InfoNCE over `n` embeddings of dimension `d`; `positives[i]` names the
/// positive partner of anchor `i`.
///
/// # Safety
/// Buffers must match the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn tp_info_nce(
    embeddings: *const f32,
    n: usize,
    d: usize,
    positives: *const usize,
    temperature: f32,
    out: *mut f32,
) -> TpStatus {
    guard(|| {
        if embeddings.is_null() || positives.is_null() || out.is_null() {
            return Err(invalid("null pointer"));
        }
        let e = std::slice::from_raw_parts(embeddings, n * d);
        let p = std::slice::from_raw_parts(positives, n);
        let z = Array2::from_shape_vec((n, d), e.to_vec())
            .map_err(|err| (TpStatus::TpErrInvalidArg, err.to_string()))?;
        *out = info_nce(&z, p, temperature).map_err(from_crate)?;
        Ok(())
    })
}

/// Accuracy of a cluster assignment under its best label permutation
/// (Hungarian matching on the contingency matrix).
///
/// # Safety
/// Buffers must match the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn tp_cluster_accuracy(
    assignments: *const usize,
    labels: *const usize,
    n: usize,
    k: usize,
    out: *mut f64,
) -> TpStatus {
    guard(|| {
        if assignments.is_null() || labels.is_null() || out.is_null() {
            return Err(invalid("null pointer"));
        }
        let a = std::slice::from_raw_parts(assignments, n);
        let l = std::slice::from_raw_parts(labels, n);
        let yc = ClusterAssignment::new(a.to_vec(), k).map_err(from_crate)?;
        *out = cluster_accuracy(&yc, l).map_err(from_crate)?;
        Ok(())
    })
}

/// Opaque handle to a loaded checkpoint.
pub struct TpModel {
    state: ModelState,
}

/// Load a checkpoint directory (digest-verified).
///
/// # Safety
/// `ckpt_dir` must be a NUL-terminated path; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tp_model_load(ckpt_dir: *const c_char, out: *mut *mut TpModel) -> TpStatus {
    guard(|| {
        if ckpt_dir.is_null() || out.is_null() {
            return Err(invalid("null pointer"));
        }
        let path = CStr::from_ptr(ckpt_dir)
            .to_str()
            .map_err(|_| invalid("checkpoint path is not valid UTF-8"))?;
        let manifest = checkpoint::load_manifest(Path::new(path)).map_err(from_crate)?;
        let classes = manifest
            .blobs
            .get("classifier.clf.w")
            .map(|b| b.shape[0])
            .ok_or_else(|| (TpStatus::TpErrCorrupt, "checkpoint has no classifier".into()))?;
        let (_, state) = checkpoint::load_model(Path::new(path), classes, 0).map_err(from_crate)?;
        *out = Box::into_raw(Box::new(TpModel { state }));
        Ok(())
    })
}

/// Release a model handle (accepts null).
///
/// # Safety
/// `model` must come from `tp_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tp_model_free(model: *mut TpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Width of the pooled embedding produced by `tp_model_embed`.
#[no_mangle]
pub extern "C" fn tp_model_embed_dim() -> usize {
    EMBED_DIM
}

/// Number of classifier outputs of a loaded model.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tp_model_classes(model: *const TpModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).state.classes()
}

fn images_from_raw(
    images: *const f32,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Result<Array4<f32>, (TpStatus, String)> {
    if c != 3 {
        return Err(invalid("models expect 3-channel images"));
    }
    let src = unsafe { std::slice::from_raw_parts(images, n * c * h * w) };
    Array4::from_shape_vec((n, c, h, w), src.to_vec())
        .map_err(|e| (TpStatus::TpErrInvalidArg, e.to_string()))
}

/// Pooled encoder embeddings for `n` images; `out` holds
/// `n * tp_model_embed_dim()` floats.
///
/// # Safety
/// Buffers must match the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn tp_model_embed(
    model: *const TpModel,
    images: *const f32,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out: *mut f32,
) -> TpStatus {
    guard(|| {
        if model.is_null() || images.is_null() || out.is_null() {
            return Err(invalid("null pointer"));
        }
        let x = images_from_raw(images, n, c, h, w)?;
        let emb = infer_embeddings(&(*model).state, &x, 256);
        let dst = std::slice::from_raw_parts_mut(out, n * EMBED_DIM);
        dst.copy_from_slice(emb.as_slice().unwrap());
        Ok(())
    })
}

/// Argmax class predictions for `n` images; `out_labels` holds `n` entries.
///
/// # Safety
/// Buffers must match the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn tp_model_classify(
    model: *const TpModel,
    images: *const f32,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out_labels: *mut usize,
) -> TpStatus {
    guard(|| {
        if model.is_null() || images.is_null() || out_labels.is_null() {
            return Err(invalid("null pointer"));
        }
        let x = images_from_raw(images, n, c, h, w)?;
        let logits = infer_class_logits(&(*model).state, &x, 256);
        let dst = std::slice::from_raw_parts_mut(out_labels, n);
        for (i, row) in logits.outer_iter().enumerate() {
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            dst[i] = best;
        }
        Ok(())
    })
}
