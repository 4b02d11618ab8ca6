//! Exercise the C ABI end to end: affine algebra, warping, losses, cluster
//! metrics, and model handles over a real checkpoint.

use std::ffi::CString;
use targetpre::harness::checkpoint;
use targetpre::model::ModelState;
use targetpre_ffi::*;

fn fro(a: &TpAffine, b: &TpAffine) -> f64 {
    a.m.iter().zip(b.m.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[test]
fn affine_compose_invert_sample() {
    unsafe {
        let id = tp_affine_identity();
        let mut sampled = tp_affine_identity();
        let policy = tp_affine_default_policy();
        assert_eq!(tp_affine_sample(&policy, 42, &mut sampled), TpStatus::TpOk);
        // same seed, same transform
        let mut again = tp_affine_identity();
        assert_eq!(tp_affine_sample(&policy, 42, &mut again), TpStatus::TpOk);
        assert_eq!(sampled.m, again.m);

        let mut inv = tp_affine_identity();
        assert_eq!(tp_affine_invert(&sampled, &mut inv), TpStatus::TpOk);
        let mut round = tp_affine_identity();
        assert_eq!(tp_affine_compose(&inv, &sampled, &mut round), TpStatus::TpOk);
        assert!(fro(&round, &id) < 1e-6);

        // singular transform is rejected with a numeric status
        let singular = TpAffine { m: [1.0, 0.0, 0.0, 1.0, 0.0, 0.0] };
        assert_eq!(tp_affine_invert(&singular, &mut inv), TpStatus::TpErrNumeric);
        let msg = std::ffi::CStr::from_ptr(tp_last_error());
        assert!(!msg.to_str().unwrap().is_empty());

        // bad policy: include_prob is pinned at 0.5
        let mut bad = policy;
        bad.include_prob = 0.75;
        assert_eq!(tp_affine_sample(&bad, 1, &mut sampled), TpStatus::TpErrConfig);
    }
}

#[test]
fn warp_identity_round_trip() {
    let (c, h, w) = (3usize, 8usize, 8usize);
    let img: Vec<f32> = (0..c * h * w).map(|i| (i % 97) as f32 / 96.0).collect();
    let mut out = vec![0.0f32; c * h * w];
    let mut mask = vec![0.0f32; h * w];
    unsafe {
        let id = tp_affine_identity();
        assert_eq!(
            tp_warp(img.as_ptr(), c, h, w, &id, 0.0, out.as_mut_ptr(), mask.as_mut_ptr()),
            TpStatus::TpOk
        );
    }
    assert_eq!(img, out);
    assert!(mask.iter().all(|&v| v == 1.0));
    // null image pointer is an invalid-argument error
    unsafe {
        let id = tp_affine_identity();
        assert_eq!(
            tp_warp(std::ptr::null(), c, h, w, &id, 0.0, out.as_mut_ptr(), std::ptr::null_mut()),
            TpStatus::TpErrInvalidArg
        );
    }
}

#[test]
fn info_nce_and_cluster_accuracy() {
    // orthonormal embeddings: uniform similarities, loss = ln(n - 1)
    let n = 5usize;
    let mut emb = vec![0.0f32; n * n];
    for i in 0..n {
        emb[i * n + i] = 1.0;
    }
    let positives: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
    let mut loss = 0.0f32;
    unsafe {
        assert_eq!(
            tp_info_nce(emb.as_ptr(), n, n, positives.as_ptr(), 0.5, &mut loss),
            TpStatus::TpOk
        );
    }
    assert!((loss - (n as f32 - 1.0).ln()).abs() < 1e-6);

    let assignments = [0usize, 0, 1, 1, 2, 2];
    let labels = [2usize, 2, 0, 0, 1, 1];
    let mut acc = 0.0f64;
    unsafe {
        assert_eq!(
            tp_cluster_accuracy(assignments.as_ptr(), labels.as_ptr(), 6, 3, &mut acc),
            TpStatus::TpOk
        );
    }
    assert_eq!(acc, 1.0);
}

#[test]
fn model_handle_embeds_and_classifies() {
    let dir = std::env::temp_dir().join(format!("tp-ffi-ckpt-{}", std::process::id()));
    let state = ModelState::init(4, 9);
    checkpoint::save_model(&dir, "ffi-run", "finetune", None, "hash", 1, &state).unwrap();

    let (n, c, h, w) = (2usize, 3usize, 32usize, 32usize);
    let images: Vec<f32> = (0..n * c * h * w).map(|i| (i % 251) as f32 / 250.0).collect();
    unsafe {
        let path = CString::new(dir.display().to_string()).unwrap();
        let mut handle: *mut TpModel = std::ptr::null_mut();
        assert_eq!(tp_model_load(path.as_ptr(), &mut handle), TpStatus::TpOk);
        assert_eq!(tp_model_classes(handle), 4);

        let dim = tp_model_embed_dim();
        let mut emb = vec![0.0f32; n * dim];
        assert_eq!(
            tp_model_embed(handle, images.as_ptr(), n, c, h, w, emb.as_mut_ptr()),
            TpStatus::TpOk
        );
        // matches the in-process forward pass
        let x = ndarray::Array4::from_shape_vec((n, c, h, w), images.clone()).unwrap();
        let direct = targetpre::model::infer_embeddings(&state, &x, 8);
        for i in 0..n {
            for e in 0..dim {
                assert_eq!(emb[i * dim + e], direct[[i, e]]);
            }
        }

        let mut labels = vec![0usize; n];
        assert_eq!(
            tp_model_classify(handle, images.as_ptr(), n, c, h, w, labels.as_mut_ptr()),
            TpStatus::TpOk
        );
        assert!(labels.iter().all(|&l| l < 4));
        tp_model_free(handle);

        // missing checkpoint surfaces an io error
        let missing = CString::new("/nonexistent/ckpt").unwrap();
        let mut h2: *mut TpModel = std::ptr::null_mut();
        assert_eq!(tp_model_load(missing.as_ptr(), &mut h2), TpStatus::TpErrIo);
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn generated_header_covers_the_surface() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/targetpre.h");
    let text = std::fs::read_to_string(&header).expect("cbindgen header exists");
    for symbol in [
        "tp_version",
        "tp_last_error",
        "tp_affine_identity",
        "tp_affine_compose",
        "tp_affine_invert",
        "tp_affine_sample",
        "tp_warp",
        "tp_info_nce",
        "tp_cluster_accuracy",
        "tp_model_load",
        "tp_model_free",
        "tp_model_embed",
        "tp_model_classify",
        "TpStatus",
        "TpAffine",
        "TpModel",
    ] {
        assert!(text.contains(symbol), "header lacks {symbol}");
    }
}
