//! Semi-supervised finetuning: supervised cross-entropy plus a pluggable
//! consistency loss on unlabeled data, instantiated as FixMatch-style
//! pseudo-labeling, Mean Teacher consistency, or CutMix mixing for
//! segmentation.

use crate::augment::{strong_augment, weak_augment, AffinePolicy};
use crate::error::{Error, Result};
use crate::eval::MetricRecord;
use crate::model::{
    class_logits_of, classify, infer_class_logits, infer_seg_predictions, pooled_embedding,
    push_params, seg_logits, seg_logits_of, ModelState, ParamSet, Sgd, Vars,
};
use crate::stream::{stream, Stream};
use crate::tensor::{Tape, Var};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::RngExt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Learner {
    FixMatch,
    MeanTeacher,
    CutMix,
}

impl Learner {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixmatch" => Ok(Learner::FixMatch),
            "mean_teacher" => Ok(Learner::MeanTeacher),
            "cutmix" => Ok(Learner::CutMix),
            other => Err(Error::Config(format!("unknown learner '{other}'"))),
        }
    }
}

/// Finetuning hyperparameters. Defaults are the reference FixMatch recipe:
/// confidence threshold 0.95, unlabeled weight 1, unlabeled ratio 7, batch
/// size 64, lr 0.1, SGD momentum 0.9.
#[derive(Debug, Clone)]
pub struct SslConfig {
    pub learner: Learner,
    pub confidence_threshold: f32,
    pub unlabeled_weight: f32,
    pub unlabeled_ratio: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub sgd_momentum: f32,
    /// Teacher EMA momentum (Mean Teacher / CutMix learners).
    pub ema_momentum: f32,
    /// Affine policy for the strong FixMatch augmentation.
    pub strong_affine: AffinePolicy,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            learner: Learner::FixMatch,
            confidence_threshold: 0.95,
            unlabeled_weight: 1.0,
            unlabeled_ratio: 7,
            batch_size: 64,
            epochs: 30,
            learning_rate: 0.1,
            sgd_momentum: 0.9,
            ema_momentum: 0.99,
            strong_affine: AffinePolicy::default(),
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Config(format!(
                "confidence_threshold must be in [0,1], got {}",
                self.confidence_threshold
            )));
        }
        if self.unlabeled_weight < 0.0 {
            return Err(Error::Config(format!(
                "unlabeled_weight must be >= 0, got {}",
                self.unlabeled_weight
            )));
        }
        if self.unlabeled_ratio == 0 {
            return Err(Error::Config("unlabeled_ratio must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.strong_affine.validate()
    }
}

/// Pseudo-labels for one unlabeled batch: argmax class, confidence, and the
/// confident mask (`mask[i]` iff `confidence[i] >= threshold`).
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelBatch {
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
    pub confidence: Vec<f32>,
}

impl PseudoLabelBatch {
    pub fn confident_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn softmax_row_f64(row: &[f32]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| ((v as f64) - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Mean cross-entropy between `softmax(logits)` and integer labels.
pub fn supervised_ce(logits: &Array2<f32>, labels: &[usize]) -> Result<f32> {
    let (n, k) = logits.dim();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} logit rows vs {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::DegenerateInput("cross-entropy of empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    let mut total = 0.0f64;
    for (row, &label) in logits.outer_iter().zip(labels) {
        let p = softmax_row_f64(row.as_slice().unwrap());
        total -= p[label].max(f64::MIN_POSITIVE).ln();
    }
    Ok((total / n as f64) as f32)
}

/// Argmax pseudo-labels from weak-view logits; ties break toward the lowest
/// class index.
pub fn fixmatch_pseudo_labels(weak_logits: &Array2<f32>, confidence_threshold: f32) -> PseudoLabelBatch {
    let mut labels = Vec::with_capacity(weak_logits.nrows());
    let mut mask = Vec::with_capacity(weak_logits.nrows());
    let mut confidence = Vec::with_capacity(weak_logits.nrows());
    for row in weak_logits.outer_iter() {
        let p = softmax_row_f64(row.as_slice().unwrap());
        let mut best = 0usize;
        for (k, &v) in p.iter().enumerate().skip(1) {
            if v > p[best] {
                best = k;
            }
        }
        let conf = p[best] as f32;
        labels.push(best);
        confidence.push(conf);
        mask.push(conf >= confidence_threshold);
    }
    PseudoLabelBatch { labels, mask, confidence }
}

/// Cross-entropy of strong-view logits against confident pseudo-labels,
/// divided by the total unlabeled count (not the confident count).
pub fn fixmatch_unlabeled_loss(strong_logits: &Array2<f32>, pseudo: &PseudoLabelBatch) -> Result<f32> {
    let (m, k) = strong_logits.dim();
    if pseudo.labels.len() != m || pseudo.mask.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "{m} strong rows vs {} pseudo-labels",
            pseudo.labels.len()
        )));
    }
    if m == 0 {
        return Ok(0.0);
    }
    if let Some(&bad) = pseudo.labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("pseudo-label {bad} out of range for {k} classes")));
    }
    let mut total = 0.0f64;
    for ((row, &label), &keep) in strong_logits.outer_iter().zip(&pseudo.labels).zip(&pseudo.mask) {
        if !keep {
            continue;
        }
        let p = softmax_row_f64(row.as_slice().unwrap());
        total -= p[label].max(f64::MIN_POSITIVE).ln();
    }
    Ok((total / m as f64) as f32)
}

/// MSE between student and teacher softmax distributions, averaged over
/// samples and classes. The teacher side is a constant (no gradients).
pub fn mean_teacher_consistency(student_logits: &Array2<f32>, teacher_logits: &Array2<f32>) -> Result<f32> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::ShapeMismatch(format!(
            "student {:?} vs teacher {:?}",
            student_logits.shape(),
            teacher_logits.shape()
        )));
    }
    let (n, k) = student_logits.dim();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0f64;
    for (s, t) in student_logits.outer_iter().zip(teacher_logits.outer_iter()) {
        let ps = softmax_row_f64(s.as_slice().unwrap());
        let pt = softmax_row_f64(t.as_slice().unwrap());
        for (a, b) in ps.iter().zip(&pt) {
            total += (a - b) * (a - b);
        }
    }
    Ok((total / (n * k) as f64) as f32)
}

/// Axis-aligned mixing rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        j >= self.x0 && j < self.x0 + self.w && i >= self.y0 && i < self.y0 + self.h
    }
}

/// `mixed = mask * x1 + (1 - mask) * x2` where the mask is 1 inside the
/// rectangle. A zero-area rectangle returns `x2` with an all-zero mask.
pub fn cutmix_mix(x1: &Array3<f32>, x2: &Array3<f32>, rect: &Rect) -> Result<(Array3<f32>, Array2<f32>)> {
    if x1.shape() != x2.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", x1.shape(), x2.shape())));
    }
    let (_, h, w) = x1.dim();
    if rect.x0 + rect.w > w || rect.y0 + rect.h > h {
        return Err(Error::Config(format!("rect {rect:?} exceeds {h}x{w} frame")));
    }
    let mut mask = Array2::<f32>::zeros((h, w));
    if rect.area() == 0 {
        return Ok((x2.clone(), mask));
    }
    let mut mixed = x2.clone();
    for i in rect.y0..rect.y0 + rect.h {
        for j in rect.x0..rect.x0 + rect.w {
            mask[[i, j]] = 1.0;
            for c in 0..x1.shape()[0] {
                mixed[[c, i, j]] = x1[[c, i, j]];
            }
        }
    }
    Ok((mixed, mask))
}

/// Per-pixel squared error between the rectangle-mixed teacher softmax maps
/// and the student softmax map, confidence-masked, divided by `K * H * W`.
pub fn cutmix_consistency(
    teacher_pred1: &Array3<f32>,
    teacher_pred2: &Array3<f32>,
    student_pred_mixed: &Array3<f32>,
    rect: &Rect,
    confidence_threshold: f32,
) -> Result<f32> {
    if teacher_pred1.shape() != teacher_pred2.shape()
        || teacher_pred1.shape() != student_pred_mixed.shape()
    {
        return Err(Error::ShapeMismatch("cutmix prediction maps differ in shape".into()));
    }
    let (k, h, w) = teacher_pred1.dim();
    if rect.x0 + rect.w > w || rect.y0 + rect.h > h {
        return Err(Error::Config(format!("rect {rect:?} exceeds {h}x{w} frame")));
    }
    let mut total = 0.0f64;
    let mut logit_s = vec![0.0f32; k];
    let mut logit_t = vec![0.0f32; k];
    for i in 0..h {
        for j in 0..w {
            let teacher = if rect.contains(i, j) { teacher_pred1 } else { teacher_pred2 };
            for c in 0..k {
                logit_t[c] = teacher[[c, i, j]];
                logit_s[c] = student_pred_mixed[[c, i, j]];
            }
            let pt = softmax_row_f64(&logit_t);
            let conf = pt.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if (conf as f32) < confidence_threshold {
                continue;
            }
            let ps = softmax_row_f64(&logit_s);
            for (a, b) in ps.iter().zip(&pt) {
                total += (a - b) * (a - b);
            }
        }
    }
    Ok((total / (k * h * w) as f64) as f32)
}

/// Labels for a labeled batch: per-image classes or per-pixel masks.
#[derive(Debug, Clone)]
pub enum LabeledTargets {
    Classes(Vec<usize>),
    Masks(Array3<u8>),
}

#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub images: Array4<f32>,
    pub targets: LabeledTargets,
}

/// Pre-augmented unlabeled views, one variant per learner.
#[derive(Debug, Clone)]
pub enum UnlabeledBatch {
    FixMatch { weak: Array4<f32>, strong: Array4<f32> },
    MeanTeacher { student: Array4<f32>, teacher: Array4<f32> },
    CutMix { view1: Array4<f32>, view2: Array4<f32>, rects: Vec<Rect> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    Segmentation,
}

/// EMA teacher used by the Mean Teacher and CutMix learners.
#[derive(Debug, Clone)]
pub struct TeacherCopy {
    pub encoder: ParamSet,
    pub classifier: ParamSet,
}

/// Finetuning state: the model (encoder + classifier train; projector and
/// predictor stay dormant) and, for consistency learners, the EMA teacher.
#[derive(Debug, Clone)]
pub struct FinetuneState {
    pub model: ModelState,
    pub teacher: Option<TeacherCopy>,
    pub task: Task,
}

impl FinetuneState {
    pub fn new(model: ModelState, task: Task, cfg: &SslConfig) -> Self {
        let teacher = match cfg.learner {
            Learner::FixMatch => None,
            Learner::MeanTeacher | Learner::CutMix => Some(TeacherCopy {
                encoder: model.encoder.clone(),
                classifier: model.classifier.clone(),
            }),
        };
        FinetuneState { model, teacher, task }
    }
}

struct LossParts {
    total: f64,
    sup: f64,
    unsup: f64,
    mask_rate: f64,
}

/// Forward-only total loss: `supervised_ce + unlabeled_weight * consistency`.
/// With `unlabeled_weight = 0` or no unlabeled batch this equals
/// `supervised_ce` exactly.
pub fn ssl_total_loss(
    state: &FinetuneState,
    labeled: &LabeledBatch,
    unlabeled: Option<&UnlabeledBatch>,
    cfg: &SslConfig,
) -> Result<(f32, MetricRecord)> {
    cfg.validate()?;
    let parts = total_loss_parts(state, labeled, unlabeled, cfg)?;
    let record = MetricRecord::new(0)
        .set("sup_loss", parts.sup)
        .set("unsup_loss", parts.unsup)
        .set("mask_rate", parts.mask_rate)
        .set("total_loss", parts.total);
    Ok((parts.total as f32, record))
}

fn total_loss_parts(
    state: &FinetuneState,
    labeled: &LabeledBatch,
    unlabeled: Option<&UnlabeledBatch>,
    cfg: &SslConfig,
) -> Result<LossParts> {
    let sup = match (&labeled.targets, state.task) {
        (LabeledTargets::Classes(labels), Task::Classification) => {
            let logits = infer_class_logits(&state.model, &labeled.images, 512);
            supervised_ce(&logits, labels)? as f64
        }
        (LabeledTargets::Masks(masks), Task::Segmentation) => {
            let logits =
                seg_logits_of(&state.model.encoder, &state.model.classifier, &labeled.images, 512);
            supervised_ce(&seg_logits_to_rows(&logits), &masks_to_labels(masks))? as f64
        }
        _ => return Err(Error::Config("labeled targets do not match the task".into())),
    };
    let mut unsup = 0.0f64;
    let mut mask_rate = 0.0f64;
    if cfg.unlabeled_weight > 0.0 {
        if let Some(unlabeled) = unlabeled {
            let (u, mr) = consistency_value(state, unlabeled, cfg)?;
            unsup = u as f64;
            mask_rate = mr;
        }
    }
    let total = if cfg.unlabeled_weight > 0.0 && unlabeled.is_some() {
        sup + cfg.unlabeled_weight as f64 * unsup
    } else {
        sup
    };
    Ok(LossParts { total, sup, unsup, mask_rate })
}

fn consistency_value(
    state: &FinetuneState,
    unlabeled: &UnlabeledBatch,
    cfg: &SslConfig,
) -> Result<(f32, f64)> {
    match (cfg.learner, unlabeled) {
        (Learner::FixMatch, UnlabeledBatch::FixMatch { weak, strong }) => {
            let weak_logits = infer_class_logits(&state.model, weak, 512);
            let pseudo = fixmatch_pseudo_labels(&weak_logits, cfg.confidence_threshold);
            let strong_logits = infer_class_logits(&state.model, strong, 512);
            let loss = fixmatch_unlabeled_loss(&strong_logits, &pseudo)?;
            let m = pseudo.mask.len().max(1);
            Ok((loss, pseudo.confident_count() as f64 / m as f64))
        }
        (Learner::MeanTeacher, UnlabeledBatch::MeanTeacher { student, teacher }) => {
            let tc = state
                .teacher
                .as_ref()
                .ok_or_else(|| Error::Config("mean_teacher learner without teacher state".into()))?;
            let student_logits = infer_class_logits(&state.model, student, 512);
            let teacher_logits = class_logits_of(&tc.encoder, &tc.classifier, teacher, 512);
            Ok((mean_teacher_consistency(&student_logits, &teacher_logits)?, 1.0))
        }
        (Learner::CutMix, UnlabeledBatch::CutMix { view1, view2, rects }) => {
            if state.task != Task::Segmentation {
                return Err(Error::Config("cutmix learner requires the segmentation task".into()));
            }
            let tc = state
                .teacher
                .as_ref()
                .ok_or_else(|| Error::Config("cutmix learner without teacher state".into()))?;
            let b = view1.shape()[0];
            if view2.shape() != view1.shape() || rects.len() != b {
                return Err(Error::ShapeMismatch("cutmix views/rects disagree".into()));
            }
            let t1 = seg_logits_of(&tc.encoder, &tc.classifier, view1, 512);
            let t2 = seg_logits_of(&tc.encoder, &tc.classifier, view2, 512);
            let mixed = mix_batch(view1, view2, rects)?;
            let s = seg_logits_of(&state.model.encoder, &state.model.classifier, &mixed, 512);
            let mut total = 0.0f64;
            let mut masked = 0usize;
            let mut pixels = 0usize;
            for i in 0..b {
                let loss = cutmix_consistency(
                    &t1.index_axis(Axis(0), i).to_owned(),
                    &t2.index_axis(Axis(0), i).to_owned(),
                    &s.index_axis(Axis(0), i).to_owned(),
                    &rects[i],
                    cfg.confidence_threshold,
                )?;
                total += loss as f64;
                let (mr, px) = confident_pixels(
                    &t1.index_axis(Axis(0), i).to_owned(),
                    &t2.index_axis(Axis(0), i).to_owned(),
                    &rects[i],
                    cfg.confidence_threshold,
                );
                masked += mr;
                pixels += px;
            }
            Ok(((total / b as f64) as f32, masked as f64 / pixels.max(1) as f64))
        }
        _ => Err(Error::Config("unlabeled batch variant does not match the learner".into())),
    }
}

fn confident_pixels(
    t1: &Array3<f32>,
    t2: &Array3<f32>,
    rect: &Rect,
    threshold: f32,
) -> (usize, usize) {
    let (k, h, w) = t1.dim();
    let mut logit = vec![0.0f32; k];
    let mut confident = 0usize;
    for i in 0..h {
        for j in 0..w {
            let teacher = if rect.contains(i, j) { t1 } else { t2 };
            for c in 0..k {
                logit[c] = teacher[[c, i, j]];
            }
            let p = softmax_row_f64(&logit);
            let conf = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if conf as f32 >= threshold {
                confident += 1;
            }
        }
    }
    (confident, h * w)
}

fn mix_batch(view1: &Array4<f32>, view2: &Array4<f32>, rects: &[Rect]) -> Result<Array4<f32>> {
    let mut out = view2.clone();
    for i in 0..view1.shape()[0] {
        let (mixed, _) = cutmix_mix(
            &view1.index_axis(Axis(0), i).to_owned(),
            &view2.index_axis(Axis(0), i).to_owned(),
            &rects[i],
        )?;
        out.index_axis_mut(Axis(0), i).assign(&mixed);
    }
    Ok(out)
}

fn masks_to_labels(masks: &Array3<u8>) -> Vec<usize> {
    masks.iter().map(|&v| v as usize).collect()
}

fn seg_logits_to_rows(logits: &Array4<f32>) -> Array2<f32> {
    let (b, k, h, w) = logits.dim();
    let mut rows = Array2::<f32>::zeros((b * h * w, k));
    for bi in 0..b {
        for c in 0..k {
            for i in 0..h {
                for j in 0..w {
                    rows[[(bi * h + i) * w + j, c]] = logits[[bi, c, i, j]];
                }
            }
        }
    }
    rows
}

/// One SGD step on the total loss, updating encoder and classifier; for the
/// Mean Teacher / CutMix learners the teacher then moves by EMA.
pub fn finetune_step(
    state: &mut FinetuneState,
    labeled: &LabeledBatch,
    unlabeled: Option<&UnlabeledBatch>,
    cfg: &SslConfig,
    opt: &mut Sgd,
) -> Result<MetricRecord> {
    let (built, record) = build_training_tape(state, labeled, unlabeled, cfg)?;
    let BuiltTape { tape, total, enc, clf } = built;
    let mut grads_store = tape.backward(total);
    let mut grads = enc.grads(&mut grads_store);
    grads.extend(clf.grads(&mut grads_store));
    drop(tape);
    opt.step(&mut state.model.encoder, &grads);
    opt.step(&mut state.model.classifier, &grads);
    if let Some(teacher) = &mut state.teacher {
        crate::contrastive::ema_update(&mut teacher.encoder, &state.model.encoder, cfg.ema_momentum)?;
        crate::contrastive::ema_update(
            &mut teacher.classifier,
            &state.model.classifier,
            cfg.ema_momentum,
        )?;
    }
    Ok(record)
}

struct BuiltTape {
    tape: Tape<f32>,
    total: Var,
    enc: Vars,
    clf: Vars,
}

fn build_training_tape(
    state: &FinetuneState,
    labeled: &LabeledBatch,
    unlabeled: Option<&UnlabeledBatch>,
    cfg: &SslConfig,
) -> Result<(BuiltTape, MetricRecord)> {
    cfg.validate()?;
    let mut tape = Tape::<f32>::new();
    let enc = push_params(&mut tape, &state.model.encoder);
    let clf = push_params(&mut tape, &state.model.classifier);

    let sup = match (&labeled.targets, state.task) {
        (LabeledTargets::Classes(labels), Task::Classification) => {
            let k = state.model.classes();
            if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
            }
            let x = tape.input(labeled.images.clone().into_dyn());
            let z = pooled_embedding(&mut tape, &enc, x);
            let logits = classify(&mut tape, &clf, z);
            let n = labels.len();
            tape.softmax_ce(logits, labels.clone(), None, n as f32)
        }
        (LabeledTargets::Masks(masks), Task::Segmentation) => {
            let k = state.model.classes();
            if let Some(&bad) = masks.iter().find(|&&v| v as usize >= k) {
                return Err(Error::Data(format!("mask value {bad} out of range for {k} classes")));
            }
            let (b, h, w) = masks.dim();
            let x = tape.input(labeled.images.clone().into_dyn());
            let logits = seg_logits(&mut tape, &enc, &clf, x, (h, w));
            let rows = tape.nchw_to_rows(logits);
            let labels = masks_to_labels(masks);
            tape.softmax_ce(rows, labels, None, (b * h * w) as f32)
        }
        _ => return Err(Error::Config("labeled targets do not match the task".into())),
    };
    let sup_value = tape.scalar(sup) as f64;

    let mut unsup_value = 0.0f64;
    let mut mask_rate = 0.0f64;
    let total = if cfg.unlabeled_weight > 0.0 && unlabeled.is_some() {
        let (uvar, mr) =
            build_consistency(&mut tape, state, &enc, &clf, unlabeled.unwrap(), cfg)?;
        unsup_value = tape.scalar(uvar) as f64;
        mask_rate = mr;
        let weighted = tape.scale(uvar, cfg.unlabeled_weight);
        tape.add(sup, weighted)
    } else {
        sup
    };
    let total_value = tape.scalar(total) as f64;

    let record = MetricRecord::new(0)
        .set("sup_loss", sup_value)
        .set("unsup_loss", unsup_value)
        .set("mask_rate", mask_rate)
        .set("total_loss", total_value);
    Ok((BuiltTape { tape, total, enc, clf }, record))
}

fn build_consistency(
    tape: &mut Tape<f32>,
    state: &FinetuneState,
    enc: &Vars,
    clf: &Vars,
    unlabeled: &UnlabeledBatch,
    cfg: &SslConfig,
) -> Result<(Var, f64)> {
    match (cfg.learner, unlabeled) {
        (Learner::FixMatch, UnlabeledBatch::FixMatch { weak, strong }) => {
            // pseudo-labels come from a no-gradient forward of the same model
            let weak_logits = infer_class_logits(&state.model, weak, 512);
            let pseudo = fixmatch_pseudo_labels(&weak_logits, cfg.confidence_threshold);
            let m = pseudo.mask.len().max(1);
            let x = tape.input(strong.clone().into_dyn());
            let z = pooled_embedding(tape, enc, x);
            let logits = classify(tape, clf, z);
            let loss =
                tape.softmax_ce(logits, pseudo.labels.clone(), Some(pseudo.mask.clone()), m as f32);
            Ok((loss, pseudo.confident_count() as f64 / m as f64))
        }
        (Learner::MeanTeacher, UnlabeledBatch::MeanTeacher { student, teacher }) => {
            let tc = state
                .teacher
                .as_ref()
                .ok_or_else(|| Error::Config("mean_teacher learner without teacher state".into()))?;
            let teacher_logits = class_logits_of(&tc.encoder, &tc.classifier, teacher, 512);
            let teacher_probs = Array2::from_shape_vec(
                teacher_logits.dim(),
                teacher_logits
                    .outer_iter()
                    .flat_map(|r| {
                        softmax_row_f64(r.as_slice().unwrap()).into_iter().map(|v| v as f32)
                    })
                    .collect(),
            )
            .unwrap();
            let (n, k) = teacher_probs.dim();
            let x = tape.input(student.clone().into_dyn());
            let z = pooled_embedding(tape, enc, x);
            let logits = classify(tape, clf, z);
            let probs = tape.softmax_rows(logits);
            let loss = tape.sq_diff_sum(probs, teacher_probs.into_dyn(), (n * k) as f32);
            Ok((loss, 1.0))
        }
        (Learner::CutMix, UnlabeledBatch::CutMix { view1, view2, rects }) => {
            if state.task != Task::Segmentation {
                return Err(Error::Config("cutmix learner requires the segmentation task".into()));
            }
            let tc = state
                .teacher
                .as_ref()
                .ok_or_else(|| Error::Config("cutmix learner without teacher state".into()))?;
            let b = view1.shape()[0];
            if view2.shape() != view1.shape() || rects.len() != b {
                return Err(Error::ShapeMismatch("cutmix views/rects disagree".into()));
            }
            let (_, _, h, w) = view1.dim();
            let k = state.model.classes();
            let t1 = seg_logits_of(&tc.encoder, &tc.classifier, view1, 512);
            let t2 = seg_logits_of(&tc.encoder, &tc.classifier, view2, 512);
            // mixed teacher probabilities + per-pixel confidence mask
            let mut target = Array2::<f32>::zeros((b * h * w, k));
            let mut mask = vec![false; b * h * w];
            let mut logit = vec![0.0f32; k];
            let mut confident = 0usize;
            for bi in 0..b {
                for i in 0..h {
                    for j in 0..w {
                        let teacher = if rects[bi].contains(i, j) { &t1 } else { &t2 };
                        for c in 0..k {
                            logit[c] = teacher[[bi, c, i, j]];
                        }
                        let p = softmax_row_f64(&logit);
                        let conf = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let row = (bi * h + i) * w + j;
                        for (c, &v) in p.iter().enumerate() {
                            target[[row, c]] = v as f32;
                        }
                        if conf as f32 >= cfg.confidence_threshold {
                            mask[row] = true;
                            confident += 1;
                        }
                    }
                }
            }
            let mixed = mix_batch(view1, view2, rects)?;
            let x = tape.input(mixed.into_dyn());
            let logits = seg_logits(tape, enc, clf, x, (h, w));
            let rows = tape.nchw_to_rows(logits);
            let probs = tape.softmax_rows(rows);
            let loss =
                tape.masked_row_sq_err(probs, target.into_dyn(), mask, (k * b * h * w) as f32);
            Ok((loss, confident as f64 / (b * h * w) as f64))
        }
        _ => Err(Error::Config("unlabeled batch variant does not match the learner".into())),
    }
}

/// Unlabeled image pool with a read counter (labels are not present in this
/// type at all, so no unlabeled computation can see them).
pub struct UnlabeledPool<'a> {
    images: &'a Array4<f32>,
    reads: std::cell::Cell<u64>,
}

impl<'a> UnlabeledPool<'a> {
    pub fn new(images: &'a Array4<f32>) -> Self {
        UnlabeledPool { images, reads: std::cell::Cell::new(0) }
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, idx: usize) -> Array3<f32> {
        self.reads.set(self.reads.get() + 1);
        self.images.index_axis(Axis(0), idx).to_owned()
    }

    pub fn reads(&self) -> u64 {
        self.reads.get()
    }
}

/// Run semi-supervised finetuning. Epochs iterate over the unlabeled pool
/// (or the labeled set when `unlabeled_weight = 0`); the labeled sampler
/// cycles with reshuffling. Per-epoch records carry train losses plus test
/// accuracy (classification) or test mIoU (segmentation).
#[allow(clippy::too_many_arguments)]
pub fn run_finetune(
    labeled_images: &Array4<f32>,
    labeled_targets: &LabeledTargets,
    unlabeled: &UnlabeledPool,
    test_images: &Array4<f32>,
    test_targets: &LabeledTargets,
    init: FinetuneState,
    cfg: &SslConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &FinetuneState, &MetricRecord) -> Result<()>,
) -> Result<FinetuneState> {
    cfg.validate()?;
    let n_labeled = labeled_images.shape()[0];
    if n_labeled == 0 {
        return Err(Error::Config("finetuning needs at least one labeled sample".into()));
    }
    let use_unlabeled = cfg.unlabeled_weight > 0.0 && !unlabeled.is_empty();
    let mut state = init;
    let mut opt = Sgd::new(cfg.learning_rate, cfg.sgd_momentum);
    let mut shuffle_rng = stream(seed, "finetune-shuffle");
    let mut aug_rng = stream(seed, "finetune-augment");

    let mut labeled_order: Vec<usize> = (0..n_labeled).collect();
    labeled_order.shuffle(&mut shuffle_rng);
    let mut labeled_cursor = 0usize;

    for epoch in 1..=cfg.epochs {
        let steps = if use_unlabeled {
            unlabeled.len().div_ceil(cfg.unlabeled_ratio * cfg.batch_size)
        } else {
            n_labeled.div_ceil(cfg.batch_size)
        };
        let mut unlabeled_order: Vec<usize> = (0..unlabeled.len()).collect();
        if use_unlabeled {
            unlabeled_order.shuffle(&mut shuffle_rng);
        }
        let mut unlabeled_cursor = 0usize;

        let mut sums: std::collections::BTreeMap<String, f64> = Default::default();
        for _ in 0..steps.max(1) {
            // labeled batch: cycle through a reshuffled order
            let mut idx = Vec::with_capacity(cfg.batch_size.min(n_labeled));
            for _ in 0..cfg.batch_size.min(n_labeled) {
                if labeled_cursor == n_labeled {
                    labeled_order.shuffle(&mut shuffle_rng);
                    labeled_cursor = 0;
                }
                idx.push(labeled_order[labeled_cursor]);
                labeled_cursor += 1;
            }
            let labeled_batch = make_labeled_batch(
                labeled_images,
                labeled_targets,
                &idx,
                state.task,
                &mut aug_rng,
            )?;

            let unlabeled_batch = if use_unlabeled {
                let mut uidx = Vec::with_capacity(cfg.unlabeled_ratio * cfg.batch_size);
                for _ in 0..cfg.unlabeled_ratio * cfg.batch_size {
                    if unlabeled_cursor == unlabeled.len() {
                        unlabeled_order.shuffle(&mut shuffle_rng);
                        unlabeled_cursor = 0;
                    }
                    uidx.push(unlabeled_order[unlabeled_cursor]);
                    unlabeled_cursor += 1;
                }
                Some(make_unlabeled_batch(unlabeled, &uidx, cfg, &mut aug_rng)?)
            } else {
                None
            };

            let rec = finetune_step(&mut state, &labeled_batch, unlabeled_batch.as_ref(), cfg, &mut opt)?;
            for (kk, v) in rec.metrics {
                *sums.entry(kk).or_insert(0.0) += v;
            }
        }

        let mut record = MetricRecord::new(epoch as u64);
        for (kk, v) in sums {
            record.metrics.insert(kk, v / steps.max(1) as f64);
        }
        match (test_targets, state.task) {
            (LabeledTargets::Classes(labels), Task::Classification) if !labels.is_empty() => {
                let logits = infer_class_logits(&state.model, test_images, 512);
                let preds: Vec<usize> = logits
                    .outer_iter()
                    .map(|r| {
                        let mut best = 0usize;
                        for (k, &v) in r.iter().enumerate().skip(1) {
                            if v > r[best] {
                                best = k;
                            }
                        }
                        best
                    })
                    .collect();
                let acc = crate::eval::classification_accuracy(&preds, labels)?;
                record.metrics.insert("test_accuracy".into(), acc);
            }
            (LabeledTargets::Masks(masks), Task::Segmentation) if masks.shape()[0] > 0 => {
                let preds = infer_seg_predictions(&state.model, test_images, 256);
                let m = crate::eval::miou(&preds, masks, state.model.classes())?;
                record.metrics.insert("test_miou".into(), m);
            }
            _ => {}
        }
        on_epoch(epoch, &state, &record)?;
    }
    Ok(state)
}

fn make_labeled_batch(
    images: &Array4<f32>,
    targets: &LabeledTargets,
    idx: &[usize],
    task: Task,
    rng: &mut Stream,
) -> Result<LabeledBatch> {
    let (_, c, h, w) = images.dim();
    let mut out = Array4::<f32>::zeros((idx.len(), c, h, w));
    for (row, &i) in idx.iter().enumerate() {
        let img = images.index_axis(Axis(0), i).to_owned();
        let img = match task {
            // geometric label correspondence: segmentation labels stay aligned
            // only under the identity, so labeled seg batches are unaugmented
            Task::Classification => weak_augment(&img, rng),
            Task::Segmentation => img,
        };
        out.index_axis_mut(Axis(0), row).assign(&img);
    }
    let targets = match targets {
        LabeledTargets::Classes(all) => {
            LabeledTargets::Classes(idx.iter().map(|&i| all[i]).collect())
        }
        LabeledTargets::Masks(all) => {
            let (_, mh, mw) = all.dim();
            let mut m = Array3::<u8>::zeros((idx.len(), mh, mw));
            for (row, &i) in idx.iter().enumerate() {
                m.index_axis_mut(Axis(0), row).assign(&all.index_axis(Axis(0), i));
            }
            LabeledTargets::Masks(m)
        }
    };
    Ok(LabeledBatch { images: out, targets })
}

fn make_unlabeled_batch(
    pool: &UnlabeledPool,
    idx: &[usize],
    cfg: &SslConfig,
    rng: &mut Stream,
) -> Result<UnlabeledBatch> {
    let first = pool.image(idx[0]);
    let (c, h, w) = first.dim();
    let stack = |imgs: Vec<Array3<f32>>| {
        let mut out = Array4::<f32>::zeros((imgs.len(), c, h, w));
        for (row, img) in imgs.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), row).assign(&img);
        }
        out
    };
    match cfg.learner {
        Learner::FixMatch => {
            let mut weak = Vec::with_capacity(idx.len());
            let mut strong = Vec::with_capacity(idx.len());
            for (pos, &i) in idx.iter().enumerate() {
                let img = if pos == 0 { first.clone() } else { pool.image(i) };
                weak.push(weak_augment(&img, rng));
                strong.push(strong_augment(&img, &cfg.strong_affine, rng));
            }
            Ok(UnlabeledBatch::FixMatch { weak: stack(weak), strong: stack(strong) })
        }
        Learner::MeanTeacher => {
            let mut student = Vec::with_capacity(idx.len());
            let mut teacher = Vec::with_capacity(idx.len());
            for (pos, &i) in idx.iter().enumerate() {
                let img = if pos == 0 { first.clone() } else { pool.image(i) };
                student.push(weak_augment(&img, rng));
                teacher.push(weak_augment(&img, rng));
            }
            Ok(UnlabeledBatch::MeanTeacher { student: stack(student), teacher: stack(teacher) })
        }
        Learner::CutMix => {
            let mut v1 = Vec::with_capacity(idx.len());
            for (pos, &i) in idx.iter().enumerate() {
                let img = if pos == 0 { first.clone() } else { pool.image(i) };
                v1.push(img);
            }
            // pair each image with its neighbor in the shuffled batch
            let v2: Vec<Array3<f32>> =
                (0..v1.len()).map(|i| v1[(i + 1) % v1.len()].clone()).collect();
            let rects: Vec<Rect> = (0..v1.len())
                .map(|_| {
                    let rw = (rng.random_range(0.3..0.7) * w as f64) as usize;
                    let rh = (rng.random_range(0.3..0.7) * h as f64) as usize;
                    let x0 = rng.random_range(0..=(w - rw));
                    let y0 = rng.random_range(0..=(h - rh));
                    Rect { x0, y0, w: rw, h: rh }
                })
                .collect();
            Ok(UnlabeledBatch::CutMix { view1: stack(v1), view2: stack(v2), rects })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::stream;
    use ndarray::{Array2, Array3, Array4};
    use rand::RngExt;

    fn rand_logits(n: usize, k: usize, seed: u64) -> Array2<f32> {
        let mut rng = stream(seed, "ssl-test");
        Array2::from_shape_simple_fn((n, k), || rng.random_range(-2.0..2.0f32))
    }

    #[test]
    fn supervised_ce_examples() {
        // saturated correct class
        let mut logits = Array2::<f32>::zeros((2, 4));
        logits[[0, 1]] = 100.0;
        logits[[1, 3]] = 100.0;
        assert!(supervised_ce(&logits, &[1, 3]).unwrap() < 1e-6);
        // uniform over 10 classes
        let logits = Array2::<f32>::zeros((3, 10));
        let got = supervised_ce(&logits, &[0, 5, 9]).unwrap();
        assert!((got - 10f32.ln()).abs() < 1e-6);
        // random case against a log-softmax oracle
        let logits = rand_logits(3, 4, 1);
        let labels = [2usize, 0, 3];
        let mut want = 0.0f64;
        for (row, &l) in logits.outer_iter().zip(&labels) {
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = row.iter().map(|&v| ((v as f64) - mx).exp()).sum::<f64>().ln() + mx;
            want += lse - row[l] as f64;
        }
        want /= 3.0;
        assert!((supervised_ce(&logits, &labels).unwrap() as f64 - want).abs() < 1e-6);
        // out-of-range label
        assert!(matches!(supervised_ce(&logits, &[4, 0, 0]), Err(Error::Data(_))));
    }

    #[test]
    fn pseudo_label_examples() {
        // uniform logits over 10 classes: max softmax = 0.1
        let logits = Array2::<f32>::zeros((2, 10));
        let p = fixmatch_pseudo_labels(&logits, 0.95);
        assert!(p.mask.iter().all(|&m| !m));
        assert!(p.confidence.iter().all(|&c| (c - 0.1).abs() < 1e-6));
        let p = fixmatch_pseudo_labels(&logits, 0.0);
        assert!(p.mask.iter().all(|&m| m));
        // [3, 0, 0]: max softmax ~ 0.9095
        let mut logits = Array2::<f32>::zeros((1, 3));
        logits[[0, 0]] = 3.0;
        let p = fixmatch_pseudo_labels(&logits, 0.95);
        assert_eq!(p.labels, vec![0]);
        assert!(!p.mask[0]);
        assert!((p.confidence[0] - 0.909_52).abs() < 1e-4);
        let p = fixmatch_pseudo_labels(&logits, 0.9);
        assert!(p.mask[0]);
        // argmax ties break toward the lowest class index
        let mut logits = Array2::<f32>::zeros((1, 3));
        logits[[0, 0]] = 1.0;
        logits[[0, 1]] = 1.0;
        assert_eq!(fixmatch_pseudo_labels(&logits, 0.0).labels, vec![0]);
    }

    #[test]
    fn mask_rate_monotone_in_threshold() {
        let logits = rand_logits(64, 10, 2);
        let mut prev = usize::MAX;
        for t in [0.0f32, 0.5, 0.9, 0.95, 0.99] {
            let n = fixmatch_pseudo_labels(&logits, t).confident_count();
            assert!(n <= prev, "threshold {t}: {n} > {prev}");
            prev = n;
        }
    }

    #[test]
    fn pseudo_labels_invariant_to_per_sample_shift() {
        let logits = rand_logits(16, 6, 3);
        let base = fixmatch_pseudo_labels(&logits, 0.8);
        let mut shifted = logits.clone();
        for (i, mut row) in shifted.outer_iter_mut().enumerate() {
            let c = (i as f32 - 8.0) * 1.5;
            row.mapv_inplace(|v| v + c);
        }
        let got = fixmatch_pseudo_labels(&shifted, 0.8);
        assert_eq!(base.labels, got.labels);
        assert_eq!(base.mask, got.mask);
        for (a, b) in base.confidence.iter().zip(&got.confidence) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fixmatch_unlabeled_loss_examples() {
        let logits = rand_logits(4, 5, 4);
        // all-zero mask -> 0
        let pseudo = PseudoLabelBatch {
            labels: vec![0; 4],
            mask: vec![false; 4],
            confidence: vec![0.0; 4],
        };
        assert_eq!(fixmatch_unlabeled_loss(&logits, &pseudo).unwrap(), 0.0);
        // saturated agreement -> ~0
        let mut sat = Array2::<f32>::zeros((4, 5));
        for i in 0..4 {
            sat[[i, i % 5]] = 80.0;
        }
        let pseudo = PseudoLabelBatch {
            labels: (0..4).map(|i| i % 5).collect(),
            mask: vec![true; 4],
            confidence: vec![1.0; 4],
        };
        assert!(fixmatch_unlabeled_loss(&sat, &pseudo).unwrap() < 1e-6);
        // m = 2, one masked uniform row over 10 classes -> ln(10)/2
        let logits = Array2::<f32>::zeros((2, 10));
        let pseudo = PseudoLabelBatch {
            labels: vec![3, 7],
            mask: vec![true, false],
            confidence: vec![1.0, 0.0],
        };
        let got = fixmatch_unlabeled_loss(&logits, &pseudo).unwrap();
        assert!((got - 10f32.ln() / 2.0).abs() < 1e-6);
        assert!(got >= 0.0);
    }

    #[test]
    fn mean_teacher_examples() {
        let a = rand_logits(5, 4, 5);
        assert_eq!(mean_teacher_consistency(&a, &a).unwrap(), 0.0);
        // two saturated one-hot distributions on different classes -> 2/K
        let k = 5;
        let mut s = Array2::<f32>::zeros((1, k));
        let mut t = Array2::<f32>::zeros((1, k));
        s[[0, 0]] = 60.0;
        t[[0, 3]] = 60.0;
        let got = mean_teacher_consistency(&s, &t).unwrap();
        assert!((got - 2.0 / k as f32).abs() < 1e-6);
        // random pair against the softmax + mse oracle
        let s = rand_logits(3, 4, 6);
        let t = rand_logits(3, 4, 7);
        let mut want = 0.0f64;
        for (sr, tr) in s.outer_iter().zip(t.outer_iter()) {
            let ps = softmax_row_f64(sr.as_slice().unwrap());
            let pt = softmax_row_f64(tr.as_slice().unwrap());
            for (a, b) in ps.iter().zip(&pt) {
                want += (a - b) * (a - b);
            }
        }
        want /= 12.0;
        assert!((mean_teacher_consistency(&s, &t).unwrap() as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn cutmix_mix_examples() {
        let mut rng = stream(8, "cutmix");
        let x1 = Array3::from_shape_simple_fn((3, 6, 6), || rng.random_range(0.0..1.0f32));
        let x2 = Array3::from_shape_simple_fn((3, 6, 6), || rng.random_range(0.0..1.0f32));
        // full frame
        let (m, mask) = cutmix_mix(&x1, &x2, &Rect { x0: 0, y0: 0, w: 6, h: 6 }).unwrap();
        assert_eq!(m, x1);
        assert!(mask.iter().all(|&v| v == 1.0));
        // empty
        let (m, mask) = cutmix_mix(&x1, &x2, &Rect { x0: 2, y0: 2, w: 0, h: 0 }).unwrap();
        assert_eq!(m, x2);
        assert!(mask.iter().all(|&v| v == 0.0));
        // half frame against a direct compositing oracle
        let rect = Rect { x0: 0, y0: 0, w: 3, h: 6 };
        let (m, mask) = cutmix_mix(&x1, &x2, &rect).unwrap();
        for c in 0..3 {
            for i in 0..6 {
                for j in 0..6 {
                    let want = if j < 3 { x1[[c, i, j]] } else { x2[[c, i, j]] };
                    assert_eq!(m[[c, i, j]], want);
                    assert_eq!(mask[[i, j]], if j < 3 { 1.0 } else { 0.0 });
                }
            }
        }
        // out-of-frame rect is rejected
        assert!(cutmix_mix(&x1, &x2, &Rect { x0: 4, y0: 0, w: 3, h: 3 }).is_err());
    }

    #[test]
    fn cutmix_consistency_examples() {
        let mut rng = stream(9, "cutmix-cons");
        let k = 3;
        let t1 = Array3::from_shape_simple_fn((k, 4, 4), || rng.random_range(-1.0..1.0f32));
        let t2 = Array3::from_shape_simple_fn((k, 4, 4), || rng.random_range(-1.0..1.0f32));
        let rect = Rect { x0: 1, y0: 1, w: 2, h: 2 };
        // student softmax equal to the mixed teacher -> 0 (threshold 0)
        let mut student = Array3::<f32>::zeros((k, 4, 4));
        for i in 0..4 {
            for j in 0..4 {
                let teacher = if rect.contains(i, j) { &t1 } else { &t2 };
                let logit: Vec<f32> = (0..k).map(|c| teacher[[c, i, j]]).collect();
                let p = softmax_row_f64(&logit);
                for c in 0..k {
                    student[[c, i, j]] = p[c].ln() as f32;
                }
            }
        }
        let got = cutmix_consistency(&t1, &t2, &student, &rect, 0.0).unwrap();
        assert!(got < 1e-10, "got {got}");
        // full-frame rect reduces to plain teacher-student consistency on t1
        let student = Array3::from_shape_simple_fn((k, 4, 4), || rng.random_range(-1.0..1.0f32));
        let full = Rect { x0: 0, y0: 0, w: 4, h: 4 };
        let got = cutmix_consistency(&t1, &t2, &student, &full, 0.0).unwrap();
        let wanted = mean_teacher_consistency(
            &flatten_map(&student),
            &flatten_map(&t1),
        )
        .unwrap();
        assert!((got - wanted).abs() < 1e-6);
        // hand-built 2x2 two-class maps against a direct per-pixel oracle
        let t1 = Array3::from_shape_vec((2, 2, 2), vec![2.0, 0.0, 0.0, 1.0, -2.0, 0.0, 0.0, -1.0])
            .unwrap();
        let t2 = t1.mapv(|v| -v);
        let s = Array3::<f32>::zeros((2, 2, 2));
        let rect = Rect { x0: 0, y0: 0, w: 1, h: 2 };
        let got = cutmix_consistency(&t1, &t2, &s, &rect, 0.0).unwrap();
        let mut want = 0.0f64;
        for i in 0..2 {
            for j in 0..2 {
                let teacher = if rect.contains(i, j) { &t1 } else { &t2 };
                let p = softmax_row_f64(&[teacher[[0, i, j]], teacher[[1, i, j]]]);
                let q = softmax_row_f64(&[0.0, 0.0]);
                for c in 0..2 {
                    want += (p[c] - q[c]).powi(2);
                }
            }
        }
        want /= 8.0;
        assert!((got as f64 - want).abs() < 1e-6);
    }

    fn flatten_map(m: &Array3<f32>) -> Array2<f32> {
        let (k, h, w) = m.dim();
        Array2::from_shape_fn((h * w, k), |(px, c)| m[[c, px / w, px % w]])
    }

    fn tiny_images(n: usize, seed: u64) -> Array4<f32> {
        let mut rng = stream(seed, "ssl-img");
        Array4::from_shape_simple_fn((n, 3, 16, 16), || rng.random_range(0.0..1.0f32))
    }

    fn small_cfg() -> SslConfig {
        SslConfig { batch_size: 4, unlabeled_ratio: 2, epochs: 1, learning_rate: 0.05, ..Default::default() }
    }

    #[test]
    fn total_loss_reduces_to_supervised_ce() {
        let cfg = SslConfig { unlabeled_weight: 0.0, ..small_cfg() };
        let model = ModelState::init(3, 20);
        let state = FinetuneState::new(model, Task::Classification, &cfg);
        let images = tiny_images(4, 21);
        let labels = vec![0usize, 1, 2, 0];
        let batch = LabeledBatch {
            images: images.clone(),
            targets: LabeledTargets::Classes(labels.clone()),
        };
        let (total, rec) = ssl_total_loss(&state, &batch, None, &cfg).unwrap();
        let logits = infer_class_logits(&state.model, &images, 64);
        let ce = supervised_ce(&logits, &labels).unwrap();
        assert_eq!(total, ce);
        assert_eq!(rec.get("unsup_loss").unwrap(), 0.0);

        // FixMatch with no confident entries also reduces to plain CE
        let cfg = SslConfig { confidence_threshold: 1.0, ..small_cfg() };
        let state = FinetuneState::new(ModelState::init(3, 22), Task::Classification, &cfg);
        let unl = UnlabeledBatch::FixMatch { weak: tiny_images(8, 23), strong: tiny_images(8, 24) };
        let (total, rec) = ssl_total_loss(&state, &batch, Some(&unl), &cfg).unwrap();
        let logits = infer_class_logits(&state.model, &images, 64);
        let ce = supervised_ce(&logits, &labels).unwrap();
        assert_eq!(total, ce);
        assert_eq!(rec.get("mask_rate").unwrap(), 0.0);
    }

    #[test]
    fn total_loss_matches_componentwise_oracle() {
        let cfg = SslConfig { confidence_threshold: 0.0, ..small_cfg() };
        let state = FinetuneState::new(ModelState::init(3, 25), Task::Classification, &cfg);
        let images = tiny_images(2, 26);
        let labels = vec![0usize, 2];
        let batch = LabeledBatch { images: images.clone(), targets: LabeledTargets::Classes(labels.clone()) };
        let weak = tiny_images(2, 27);
        let strong = tiny_images(2, 28);
        let unl = UnlabeledBatch::FixMatch { weak: weak.clone(), strong: strong.clone() };
        let (total, _) = ssl_total_loss(&state, &batch, Some(&unl), &cfg).unwrap();

        let sup = supervised_ce(&infer_class_logits(&state.model, &images, 64), &labels).unwrap();
        let pseudo =
            fixmatch_pseudo_labels(&infer_class_logits(&state.model, &weak, 64), 0.0);
        let unsup =
            fixmatch_unlabeled_loss(&infer_class_logits(&state.model, &strong, 64), &pseudo)
                .unwrap();
        assert!((total as f64 - (sup as f64 + unsup as f64)).abs() < 1e-6);
    }

    #[test]
    fn training_tape_agrees_with_forward_loss() {
        // the tape used for gradients and the plain forward path must agree
        let cfg = SslConfig { confidence_threshold: 0.5, ..small_cfg() };
        let state = FinetuneState::new(ModelState::init(3, 29), Task::Classification, &cfg);
        let batch = LabeledBatch {
            images: tiny_images(3, 30),
            targets: LabeledTargets::Classes(vec![0, 1, 2]),
        };
        let unl = UnlabeledBatch::FixMatch { weak: tiny_images(6, 31), strong: tiny_images(6, 32) };
        let (plain, _) = ssl_total_loss(&state, &batch, Some(&unl), &cfg).unwrap();
        let (built, rec) = build_training_tape(&state, &batch, Some(&unl), &cfg).unwrap();
        let tape_total = built.tape.scalar(built.total);
        assert!((plain - tape_total).abs() < 1e-5, "{plain} vs {tape_total}");
        assert!((rec.get("total_loss").unwrap() - plain as f64).abs() < 1e-5);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let cfg = SslConfig { learning_rate: 0.0, ..small_cfg() };
        let mut state = FinetuneState::new(ModelState::init(3, 33), Task::Classification, &cfg);
        let before = state.model.named_tensors().iter().map(|(n, t)| (n.clone(), (*t).clone())).collect::<Vec<_>>();
        let batch = LabeledBatch {
            images: tiny_images(4, 34),
            targets: LabeledTargets::Classes(vec![0, 1, 2, 0]),
        };
        let unl = UnlabeledBatch::FixMatch { weak: tiny_images(8, 35), strong: tiny_images(8, 36) };
        let mut opt = Sgd::new(0.0, 0.9);
        finetune_step(&mut state, &batch, Some(&unl), &cfg, &mut opt).unwrap();
        for ((n, t), (n2, t2)) in state.model.named_tensors().iter().zip(before.iter()) {
            assert_eq!(n, n2);
            assert_eq!(*t, t2);
        }
    }

    #[test]
    fn supervised_overfit_reaches_full_train_accuracy() {
        let cfg = SslConfig {
            unlabeled_weight: 0.0,
            learning_rate: 0.05,
            ..small_cfg()
        };
        let mut state = FinetuneState::new(ModelState::init(2, 37), Task::Classification, &cfg);
        // two visually distinct classes: bright vs dark images
        let mut images = tiny_images(8, 38);
        let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
        for (i, &l) in labels.iter().enumerate() {
            let shift = if l == 0 { 0.35 } else { -0.35 };
            images
                .index_axis_mut(Axis(0), i)
                .mapv_inplace(|v| (v * 0.3 + 0.5 + shift).clamp(0.0, 1.0));
        }
        let batch =
            LabeledBatch { images: images.clone(), targets: LabeledTargets::Classes(labels.clone()) };
        let mut opt = Sgd::new(cfg.learning_rate, cfg.sgd_momentum);
        for _ in 0..100 {
            finetune_step(&mut state, &batch, None, &cfg, &mut opt).unwrap();
        }
        let logits = infer_class_logits(&state.model, &images, 64);
        let preds: Vec<usize> = logits
            .outer_iter()
            .map(|r| if r[0] >= r[1] { 0 } else { 1 })
            .collect();
        let acc = crate::eval::classification_accuracy(&preds, &labels).unwrap();
        assert_eq!(acc, 1.0, "train accuracy {acc}");
    }

    #[test]
    fn teacher_moves_only_by_ema() {
        let cfg = SslConfig { learner: Learner::MeanTeacher, ema_momentum: 1.0, ..small_cfg() };
        let mut state = FinetuneState::new(ModelState::init(3, 39), Task::Classification, &cfg);
        let teacher_before = state.teacher.clone().unwrap();
        let batch = LabeledBatch {
            images: tiny_images(4, 40),
            targets: LabeledTargets::Classes(vec![0, 1, 2, 0]),
        };
        let unl =
            UnlabeledBatch::MeanTeacher { student: tiny_images(8, 41), teacher: tiny_images(8, 42) };
        let mut opt = Sgd::new(0.05, 0.9);
        finetune_step(&mut state, &batch, Some(&unl), &cfg, &mut opt).unwrap();
        // gradients moved the student...
        let mut student_moved = false;
        for ((_, a), (_, b)) in state.model.encoder.iter().zip(teacher_before.encoder.iter()) {
            if a != b {
                student_moved = true;
            }
        }
        assert!(student_moved);
        // ...but with m = 1 the teacher is bit-identical
        let teacher_after = state.teacher.unwrap();
        for ((_, a), (_, b)) in teacher_after.encoder.iter().zip(teacher_before.encoder.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_on_toy_model() {
        // linear-relu-linear classifier; CE + masked pseudo-label CE, f64 tape
        use crate::tensor::Tape;
        let mut rng = stream(43, "ssl-toy");
        let (n, din, dh, k) = (6usize, 5usize, 7usize, 3usize);
        let x = ndarray::ArrayD::from_shape_simple_fn(ndarray::IxDyn(&[n, din]), || {
            crate::stream::normal(&mut rng)
        });
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let mask: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let w1 = ndarray::ArrayD::from_shape_simple_fn(ndarray::IxDyn(&[dh, din]), || {
            crate::stream::normal(&mut rng) * 0.5
        });
        let b1 = ndarray::ArrayD::zeros(ndarray::IxDyn(&[dh]));
        let w2 = ndarray::ArrayD::from_shape_simple_fn(ndarray::IxDyn(&[k, dh]), || {
            crate::stream::normal(&mut rng) * 0.5
        });
        let b2 = ndarray::ArrayD::zeros(ndarray::IxDyn(&[k]));
        let build = |t: &mut Tape<f64>, p: &[crate::tensor::Var]| {
            let xv = t.input(x.clone());
            let h = t.linear(xv, p[0], p[1]);
            let h = t.relu(h);
            let logits = t.linear(h, p[2], p[3]);
            let sup = t.softmax_ce(logits, labels.clone(), None, n as f64);
            let unsup = t.softmax_ce(logits, labels.clone(), Some(mask.clone()), n as f64);
            let w = t.scale(unsup, 1.0);
            t.add(sup, w)
        };
        let inputs = [w1, b1, w2, b2];
        let mut tape = Tape::<f64>::new();
        let vars: Vec<_> = inputs.iter().map(|p| tape.input(p.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);
        let h = 1e-5;
        for (pi, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).unwrap().clone();
            let mut num = 0.0;
            let mut den = 0.0;
            for kk in 0..inputs[pi].len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[pi].as_slice_mut().unwrap()[kk] += h;
                minus[pi].as_slice_mut().unwrap()[kk] -= h;
                let eval = |ps: &[ndarray::ArrayD<f64>]| {
                    let mut t = Tape::<f64>::new();
                    let vs: Vec<_> = ps.iter().map(|p| t.input(p.clone())).collect();
                    let l = build(&mut t, &vs);
                    t.scalar(l)
                };
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[kk];
                num += (a - fd) * (a - fd);
                den += fd * fd;
            }
            assert!(num.sqrt() / den.sqrt().max(1e-10) < 1e-3, "param {pi}");
        }
    }

    #[test]
    fn run_finetune_is_deterministic_and_counts_unlabeled_reads() {
        let labeled = tiny_images(6, 44);
        let labels = LabeledTargets::Classes(vec![0, 1, 2, 0, 1, 2]);
        let unl_images = tiny_images(12, 45);
        let test = tiny_images(6, 46);
        let test_labels = LabeledTargets::Classes(vec![0, 1, 2, 0, 1, 2]);
        let cfg = SslConfig { epochs: 2, ..small_cfg() };

        let run = |seed: u64, cfg: &SslConfig| -> (Vec<MetricRecord>, u64) {
            let pool = UnlabeledPool::new(&unl_images);
            let mut recs = Vec::new();
            let state = FinetuneState::new(ModelState::init(3, 47), Task::Classification, cfg);
            run_finetune(&labeled, &labels, &pool, &test, &test_labels, state, cfg, seed, |_, _, r| {
                recs.push(r.clone());
                Ok(())
            })
            .unwrap();
            (recs, pool.reads())
        };
        let (a, reads_a) = run(7, &cfg);
        let (b, reads_b) = run(7, &cfg);
        assert_eq!(a, b);
        assert_eq!(reads_a, reads_b);
        assert!(reads_a > 0);
        assert!(a[0].get("test_accuracy").is_some());

        // supervised-only run never touches the unlabeled pool
        let cfg0 = SslConfig { unlabeled_weight: 0.0, epochs: 2, ..small_cfg() };
        let (_, reads0) = run(7, &cfg0);
        assert_eq!(reads0, 0);
    }

    #[test]
    fn cutmix_segmentation_step_runs() {
        let cfg = SslConfig {
            learner: Learner::CutMix,
            batch_size: 2,
            unlabeled_ratio: 2,
            epochs: 1,
            learning_rate: 0.01,
            confidence_threshold: 0.0,
            ..Default::default()
        };
        let mut rng = stream(48, "cutmix-run");
        let images = Array4::from_shape_simple_fn((4, 3, 32, 32), || rng.random_range(0.0..1.0f32));
        let masks = Array3::from_shape_fn((4, 32, 32), |(_, i, j)| u8::from(i + j > 32));
        let mut state = FinetuneState::new(ModelState::init(2, 49), Task::Segmentation, &cfg);
        let batch = LabeledBatch {
            images: images.clone(),
            targets: LabeledTargets::Masks(masks),
        };
        let pool = UnlabeledPool::new(&images);
        let mut aug = stream(50, "cutmix-aug");
        let unl = make_unlabeled_batch(&pool, &[0, 1, 2, 3], &cfg, &mut aug).unwrap();
        let mut opt = Sgd::new(cfg.learning_rate, cfg.sgd_momentum);
        let rec = finetune_step(&mut state, &batch, Some(&unl), &cfg, &mut opt).unwrap();
        assert!(rec.get("total_loss").unwrap().is_finite());
        assert!(rec.get("mask_rate").unwrap() > 0.0);
    }
}
