//! Contrastive target pretraining: BYOL and InfoNCE objectives, the EMA
//! target network, the L2 anchor regularizer toward the pretrained weights,
//! and the dense per-pixel variant with inverse-warped feature alignment.

use crate::augment::{
    make_view_pair_asym, warp_batch, AffinePolicy, AffineTransform, PhotometricPolicy,
};
use crate::error::{Error, Result};
use crate::eval::MetricRecord;
use crate::model::{
    dense_features, mlp2, pooled_embedding, push_params, ModelState, ParamSet, Sgd,
};
use crate::stream::{stream, Stream};
use crate::tensor::{cast_from_f32, Tape, Var};
use ndarray::{Array2, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;

/// Frozen copy of pretrained encoder weights used by the anchor regularizer,
/// tagged with the epoch it was taken at.
#[derive(Debug, Clone)]
pub struct AnchorSnapshot {
    params: ParamSet,
    pub epoch_tag: usize,
}

impl AnchorSnapshot {
    pub fn new(encoder: &ParamSet, epoch_tag: usize) -> Self {
        AnchorSnapshot { params: encoder.clone(), epoch_tag }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastiveObjective {
    Byol,
    /// In-batch InfoNCE over the two views (no memory queue).
    InfoNce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastiveMode {
    /// Image-level features via global pooling.
    Global,
    /// Per-pixel features from the stride-8 trunk.
    Dense,
}

/// Hyperparameters for target pretraining. Defaults record the reference
/// recipe (batch 256, base lr 0.3, 300 epochs, anchor weight 1e-2, SGD
/// momentum 0.9); desk-scale runs override via config files.
#[derive(Debug, Clone)]
pub struct ContrastiveConfig {
    pub objective: ContrastiveObjective,
    pub mode: ContrastiveMode,
    pub temperature: f32,
    pub ema_momentum: f32,
    pub anchor_weight: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub sgd_momentum: f32,
    /// Use the one-sided BYOL loss instead of the symmetrized average.
    pub one_sided: bool,
    /// Affine augmentation for view pairs; `None` disables geometric
    /// augmentation (classification mode, or the dense ablation).
    pub affine: Option<AffinePolicy>,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            objective: ContrastiveObjective::Byol,
            mode: ContrastiveMode::Global,
            temperature: 0.2,
            ema_momentum: 0.99,
            anchor_weight: 1e-2,
            epochs: 300,
            batch_size: 256,
            learning_rate: 0.3,
            sgd_momentum: 0.9,
            one_sided: false,
            affine: None,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!(
                "ema_momentum must be in [0,1], got {}",
                self.ema_momentum
            )));
        }
        if self.anchor_weight < 0.0 {
            return Err(Error::Config(format!(
                "anchor_weight must be >= 0, got {}",
                self.anchor_weight
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(a) = &self.affine {
            a.validate()?;
        }
        Ok(())
    }
}

fn check_rows_nonzero(rows: &Array2<f32>, what: &str) -> Result<()> {
    for (i, r) in rows.outer_iter().enumerate() {
        let n2: f32 = r.iter().map(|&v| v * v).sum();
        if n2 < 1e-24 {
            return Err(Error::DegenerateInput(format!("{what}: row {i} has zero norm")));
        }
    }
    Ok(())
}

fn cosine_rows_f64(a: &Array2<f32>, b: &Array2<f32>) -> Vec<f64> {
    a.outer_iter()
        .zip(b.outer_iter())
        .map(|(x, y)| {
            let (mut dot, mut nx, mut ny) = (0.0f64, 0.0f64, 0.0f64);
            for (&xv, &yv) in x.iter().zip(y.iter()) {
                dot += xv as f64 * yv as f64;
                nx += (xv as f64) * (xv as f64);
                ny += (yv as f64) * (yv as f64);
            }
            dot / (nx.sqrt() * ny.sqrt())
        })
        .collect()
}

/// InfoNCE over cosine similarities: mean over anchors of
/// `-log(exp(s_ij/t) / sum_{k != i} exp(s_ik/t))`. `positive[i]` names the
/// positive partner of anchor `i`.
pub fn info_nce(embeddings: &Array2<f32>, positive: &[usize], temperature: f32) -> Result<f32> {
    let n = embeddings.nrows();
    if n < 2 {
        return Err(Error::DegenerateInput(format!("info_nce needs N >= 2, got {n}")));
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    if positive.len() != n {
        return Err(Error::ShapeMismatch(format!("{} positives for N={n}", positive.len())));
    }
    for (i, &j) in positive.iter().enumerate() {
        if j >= n || j == i {
            return Err(Error::Config(format!("positive index {j} invalid for anchor {i}")));
        }
    }
    check_rows_nonzero(embeddings, "info_nce embeddings")?;
    let normed: Vec<Vec<f64>> = embeddings
        .outer_iter()
        .map(|r| {
            let norm = r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            r.iter().map(|&v| v as f64 / norm).collect()
        })
        .collect();
    let tau = temperature as f64;
    let mut total = 0.0f64;
    for i in 0..n {
        let sims: Vec<f64> = (0..n)
            .filter(|&k| k != i)
            .map(|k| normed[i].iter().zip(&normed[k]).map(|(a, b)| a * b).sum::<f64>() / tau)
            .collect();
        let mx = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = sims.iter().map(|s| (s - mx).exp()).sum::<f64>().ln() + mx;
        let s_pos: f64 =
            normed[i].iter().zip(&normed[positive[i]]).map(|(a, b)| a * b).sum::<f64>() / tau;
        total += lse - s_pos;
    }
    Ok((total / n as f64) as f32)
}

fn apply_predictor(rows: &Array2<f32>, predictor: Option<&ParamSet>) -> Array2<f32> {
    match predictor {
        None => rows.clone(),
        Some(p) => {
            let mut tape = Tape::<f32>::new();
            let vars = push_params(&mut tape, p);
            let x = tape.input(rows.clone().into_dyn());
            let q = mlp2(&mut tape, &vars, "pred", x);
            tape.value(q).clone().into_dimensionality::<ndarray::Ix2>().unwrap()
        }
    }
}

/// Mean negative cosine between predicted online projections and target
/// projections; in `[-1, 1]`. `predictor: None` is the identity.
pub fn byol_loss(
    online: &Array2<f32>,
    target: &Array2<f32>,
    predictor: Option<&ParamSet>,
) -> Result<f32> {
    if online.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "online {:?} vs target {:?}",
            online.shape(),
            target.shape()
        )));
    }
    if online.nrows() == 0 {
        return Err(Error::DegenerateInput("byol_loss on empty batch".into()));
    }
    let q = apply_predictor(online, predictor);
    check_rows_nonzero(&q, "byol_loss predictions")?;
    check_rows_nonzero(target, "byol_loss targets")?;
    let cos = cosine_rows_f64(&q, target);
    Ok((-cos.iter().sum::<f64>() / cos.len() as f64) as f32)
}

/// Dense BYOL: inverse-warp both feature maps to the original frame,
/// intersect validity, and average the per-pixel negative cosine between
/// predicted online features and target features over valid pixels.
pub fn dense_byol_loss(
    online_map: &Array4<f32>,
    target_map: &Array4<f32>,
    t1: &AffineTransform,
    t2: &AffineTransform,
    predictor: Option<&ParamSet>,
) -> Result<f32> {
    if online_map.shape() != target_map.shape() {
        return Err(Error::ShapeMismatch(format!(
            "online {:?} vs target {:?}",
            online_map.shape(),
            target_map.shape()
        )));
    }
    let (b, c, h, w) = online_map.dim();
    // predictor acts per pixel, in the view frame, before inverse warping
    let rows = map_to_rows(online_map);
    let q_rows = apply_predictor(&rows, predictor);
    let q_map = rows_to_map(&q_rows, b, c, h, w);
    let back1 = warp_batch(&q_map, &[t1.invert()?], 0.0)?;
    let back2 = warp_batch(target_map, &[t2.invert()?], 0.0)?;
    let joint = &back1.validity * &back2.validity;
    let r1 = map_to_rows(&back1.image);
    let r2 = map_to_rows(&back2.image);
    let mut cos_sum = 0.0f64;
    let mut count = 0usize;
    for (px, &m) in joint.iter().enumerate() {
        if m != 1.0 {
            continue;
        }
        let (mut dot, mut nx, mut ny) = (0.0f64, 0.0f64, 0.0f64);
        for k in 0..c {
            let xv = r1[[px, k]] as f64;
            let yv = r2[[px, k]] as f64;
            dot += xv * yv;
            nx += xv * xv;
            ny += yv * yv;
        }
        if nx < 1e-24 || ny < 1e-24 {
            return Err(Error::DegenerateInput(format!(
                "dense_byol_loss: zero feature vector at valid pixel {px}"
            )));
        }
        cos_sum += dot / (nx.sqrt() * ny.sqrt());
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoCorrespondence);
    }
    Ok((-cos_sum / count as f64) as f32)
}

fn map_to_rows(map: &Array4<f32>) -> Array2<f32> {
    let (b, c, h, w) = map.dim();
    let mut rows = Array2::<f32>::zeros((b * h * w, c));
    let ms = map.as_slice().unwrap();
    for bi in 0..b {
        for ch in 0..c {
            for k in 0..h * w {
                rows[[bi * h * w + k, ch]] = ms[(bi * c + ch) * h * w + k];
            }
        }
    }
    rows
}

fn rows_to_map(rows: &Array2<f32>, b: usize, c: usize, h: usize, w: usize) -> Array4<f32> {
    let mut map = Array4::<f32>::zeros((b, c, h, w));
    for bi in 0..b {
        for ch in 0..c {
            for k in 0..h * w {
                map[[bi, ch, k / w, k % w]] = rows[[bi * h * w + k, ch]];
            }
        }
    }
    map
}

/// EMA update: `target <- m * target + (1 - m) * online`, elementwise.
/// The recurrence is evaluated in f64 so it is reproducible to rounding.
pub fn ema_update(target: &mut ParamSet, online: &ParamSet, m: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("ema momentum must be in [0,1], got {m}")));
    }
    target.check_compatible(online)?;
    let mf = m as f64;
    for ((_, t), (_, o)) in target.iter_mut().zip(online.iter()).map(|(a, b)| (a, b)) {
        t.zip_mut_with(o, |tv, &ov| *tv = (mf * *tv as f64 + (1.0 - mf) * ov as f64) as f32);
    }
    Ok(())
}

/// `weight * sum((phi - phi_pre)^2)` over all encoder tensors.
pub fn anchor_regularizer(phi: &ParamSet, anchor: &AnchorSnapshot, weight: f32) -> Result<f32> {
    phi.check_compatible(anchor.params())?;
    let mut s = 0.0f64;
    for ((_, p), (_, a)) in phi.iter().zip(anchor.params().iter()) {
        for (&pv, &av) in p.iter().zip(a.iter()) {
            let d = pv as f64 - av as f64;
            s += d * d;
        }
    }
    Ok((weight as f64 * s) as f32)
}

/// Gradient of the anchor term: `2 * weight * (phi - phi_pre)` per tensor.
pub fn anchor_gradient(
    phi: &ParamSet,
    anchor: &AnchorSnapshot,
    weight: f32,
) -> Result<Vec<(String, ArrayD<f32>)>> {
    phi.check_compatible(anchor.params())?;
    Ok(phi
        .iter()
        .zip(anchor.params().iter())
        .map(|((n, p), (_, a))| (n.to_string(), 2.0 * weight * (p - a)))
        .collect())
}

/// One-owner training state for target pretraining.
pub struct TargetPretrainer {
    pub state: ModelState,
    pub cfg: ContrastiveConfig,
    anchor: Option<AnchorSnapshot>,
    opt: Sgd,
    step_idx: u64,
}

impl TargetPretrainer {
    pub fn new(
        state: ModelState,
        anchor: Option<AnchorSnapshot>,
        cfg: ContrastiveConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if let Some(a) = &anchor {
            state.encoder.check_compatible(a.params())?;
        }
        let opt = Sgd::new(cfg.learning_rate, cfg.sgd_momentum);
        Ok(TargetPretrainer { state, cfg, anchor, opt, step_idx: 0 })
    }

    /// One gradient step on (contrastive loss + anchor term) for the online
    /// encoder/projector/predictor, followed by the EMA update of the target
    /// copy. The classifier is untouched.
    pub fn pretrain_step(&mut self, images: &Array4<f32>, rng: &mut Stream) -> Result<MetricRecord> {
        let mut attempts = 0;
        let (record, grads) = loop {
            match self.build_step(images, rng) {
                Ok(out) => break out,
                Err(Error::NoCorrespondence) if attempts < 3 => attempts += 1,
                Err(e) => return Err(e),
            }
        };
        self.opt.step(&mut self.state.encoder, &grads);
        self.opt.step(&mut self.state.projector, &grads);
        self.opt.step(&mut self.state.predictor, &grads);
        ema_update(&mut self.state.target_encoder, &self.state.encoder, self.cfg.ema_momentum)?;
        ema_update(&mut self.state.target_projector, &self.state.projector, self.cfg.ema_momentum)?;
        self.step_idx += 1;
        Ok(record)
    }

    fn build_step(
        &self,
        images: &Array4<f32>,
        rng: &mut Stream,
    ) -> Result<(MetricRecord, Vec<(String, ArrayD<f32>)>)> {
        let (b, _, h, w) = images.dim();
        if b == 0 {
            return Err(Error::DegenerateInput("empty batch".into()));
        }
        let photo1 = PhotometricPolicy::default();
        let photo2 = photo1.second_view();
        let mut v1 = Array4::<f32>::zeros((b, 3, h, w));
        let mut v2 = Array4::<f32>::zeros((b, 3, h, w));
        let mut t1s = Vec::with_capacity(b);
        let mut t2s = Vec::with_capacity(b);
        for i in 0..b {
            let img = images.index_axis(Axis(0), i).to_owned();
            let (a, bb, t1, t2) =
                make_view_pair_asym(&img, &photo1, &photo2, self.cfg.affine.as_ref(), rng);
            v1.index_axis_mut(Axis(0), i).assign(&a);
            v2.index_axis_mut(Axis(0), i).assign(&bb);
            t1s.push(t1);
            t2s.push(t2);
        }

        let mut tape = Tape::<f32>::new();
        let enc = push_params(&mut tape, &self.state.encoder);
        let proj = push_params(&mut tape, &self.state.projector);
        let pred = push_params(&mut tape, &self.state.predictor);

        let (loss_contrastive, tape) = match (self.cfg.objective, self.cfg.mode) {
            (ContrastiveObjective::Byol, ContrastiveMode::Global) => {
                let y1t = self.target_global(&v1);
                let y2t = self.target_global(&v2);
                let mut t = tape;
                let l12 = Self::byol_direction_global(&mut t, &enc, &proj, &pred, &v1, y2t);
                let loss = if self.cfg.one_sided {
                    l12
                } else {
                    let l21 = Self::byol_direction_global(&mut t, &enc, &proj, &pred, &v2, y1t);
                    let s = t.add(l12, l21);
                    t.scale(s, 0.5)
                };
                (loss, t)
            }
            (ContrastiveObjective::Byol, ContrastiveMode::Dense) => {
                let f1t = self.target_dense(&v1, &t1s)?;
                let f2t = self.target_dense(&v2, &t2s)?;
                let mut t = tape;
                let l12 =
                    Self::byol_direction_dense(&mut t, &enc, &proj, &pred, &v1, &t1s, &f2t)?;
                let loss = if self.cfg.one_sided {
                    l12
                } else {
                    let l21 =
                        Self::byol_direction_dense(&mut t, &enc, &proj, &pred, &v2, &t2s, &f1t)?;
                    let s = t.add(l12, l21);
                    t.scale(s, 0.5)
                };
                (loss, t)
            }
            (ContrastiveObjective::InfoNce, _) => {
                let mut t = tape;
                let x1 = t.input(v1.clone().into_dyn());
                let x2 = t.input(v2.clone().into_dyn());
                let z1 = pooled_embedding(&mut t, &enc, x1);
                let z2 = pooled_embedding(&mut t, &enc, x2);
                let y1 = mlp2(&mut t, &proj, "proj", z1);
                let y2 = mlp2(&mut t, &proj, "proj", z2);
                let z = t.concat_rows(y1, y2);
                let zn = t.l2_normalize_rows(z);
                let sims = t.matmul_nt(zn, zn);
                let positives: Vec<usize> =
                    (0..2 * b).map(|i| if i < b { i + b } else { i - b }).collect();
                let loss = t.nce_from_sims(sims, positives, self.cfg.temperature);
                (loss, t)
            }
        };
        let mut tape = tape;

        let contrastive_value = tape.scalar(loss_contrastive) as f64;
        let (total, anchor_value) = match (&self.anchor, self.cfg.anchor_weight) {
            (Some(snapshot), weight) if weight > 0.0 => {
                let mut term: Option<Var> = None;
                for (name, tensor) in snapshot.params().iter() {
                    let var = enc.get(name);
                    let sq = tape.sq_diff_sum(var, cast_from_f32::<f32>(tensor), 1.0);
                    term = Some(match term {
                        None => sq,
                        Some(acc) => tape.add(acc, sq),
                    });
                }
                let term = tape.scale(term.expect("encoder has parameters"), weight);
                let anchor_value = tape.scalar(term) as f64;
                (tape.add(loss_contrastive, term), anchor_value)
            }
            _ => (loss_contrastive, 0.0),
        };

        let total_value = tape.scalar(total) as f64;
        let mut grads_store = tape.backward(total);
        let mut grads = enc.grads(&mut grads_store);
        grads.extend(proj.grads(&mut grads_store));
        grads.extend(pred.grads(&mut grads_store));

        let record = MetricRecord::new(self.step_idx)
            .set("contrastive_loss", contrastive_value)
            .set("anchor_loss", anchor_value)
            .set("total_loss", total_value);
        Ok((record, grads))
    }

    fn byol_direction_global(
        tape: &mut Tape<f32>,
        enc: &crate::model::Vars,
        proj: &crate::model::Vars,
        pred: &crate::model::Vars,
        view: &Array4<f32>,
        target_proj: Array2<f32>,
    ) -> Var {
        let x = tape.input(view.clone().into_dyn());
        let z = pooled_embedding(tape, enc, x);
        let y = mlp2(tape, proj, "proj", z);
        let q = mlp2(tape, pred, "pred", y);
        let qn = tape.l2_normalize_rows(q);
        let tgt = tape.input(target_proj.into_dyn());
        let tn = tape.l2_normalize_rows(tgt);
        let cos = tape.dot_rows(qn, tn);
        let mean = tape.mean_all(cos);
        tape.scale(mean, -1.0)
    }

    #[allow(clippy::too_many_arguments)]
    fn byol_direction_dense(
        tape: &mut Tape<f32>,
        enc: &crate::model::Vars,
        proj: &crate::model::Vars,
        pred: &crate::model::Vars,
        view: &Array4<f32>,
        ts: &[AffineTransform],
        target_backwarped: &(Array4<f32>, Array4<f32>),
    ) -> Result<Var> {
        let (b, _, _, _) = view.dim();
        let inv: Result<Vec<AffineTransform>> = ts.iter().map(|t| t.invert()).collect();
        let inv = inv?;
        let x = tape.input(view.clone().into_dyn());
        let f = dense_features(tape, enc, x);
        let shape = tape.value(f).shape().to_vec();
        let (hh, ww) = (shape[2], shape[3]);
        let rows = tape.nchw_to_rows(f);
        let y = mlp2(tape, proj, "proj", rows);
        let q = mlp2(tape, pred, "pred", y);
        let qmap = tape.rows_to_nchw(q, b, hh, ww);
        let (back, mask1) = tape.warp_affine(qmap, &inv, 0.0);

        let (tgt_map, mask2) = target_backwarped;
        let joint: Vec<usize> = mask1
            .iter()
            .zip(mask2.iter())
            .enumerate()
            .filter(|(_, (&a, &b))| a == 1.0 && b == 1.0)
            .map(|(i, _)| i)
            .collect();
        if joint.is_empty() {
            return Err(Error::NoCorrespondence);
        }
        let online_rows = tape.nchw_to_rows(back);
        let online_sel = tape.select_rows(online_rows, joint.clone());
        let tgt_rows = map_to_rows(tgt_map);
        let tgt_sel = ndarray::Array2::from_shape_fn((joint.len(), tgt_rows.ncols()), |(r, c)| {
            tgt_rows[[joint[r], c]]
        });
        let tvar = tape.input(tgt_sel.into_dyn());
        let on = tape.l2_normalize_rows(online_sel);
        let tn = tape.l2_normalize_rows(tvar);
        let cos = tape.dot_rows(on, tn);
        let mean = tape.mean_all(cos);
        Ok(tape.scale(mean, -1.0))
    }

    /// Forward the target network on a batch (no gradients).
    fn target_global(&self, view: &Array4<f32>) -> Array2<f32> {
        let mut tape = Tape::<f32>::new();
        let enc = push_params(&mut tape, &self.state.target_encoder);
        let proj = push_params(&mut tape, &self.state.target_projector);
        let x = tape.input(view.clone().into_dyn());
        let z = pooled_embedding(&mut tape, &enc, x);
        let y = mlp2(&mut tape, &proj, "proj", z);
        tape.value(y).clone().into_dimensionality::<ndarray::Ix2>().unwrap()
    }

    /// Target dense projections, inverse-warped into the original frame.
    fn target_dense(
        &self,
        view: &Array4<f32>,
        ts: &[AffineTransform],
    ) -> Result<(Array4<f32>, Array4<f32>)> {
        let inv: Result<Vec<AffineTransform>> = ts.iter().map(|t| t.invert()).collect();
        let inv = inv?;
        let b = view.shape()[0];
        let mut tape = Tape::<f32>::new();
        let enc = push_params(&mut tape, &self.state.target_encoder);
        let proj = push_params(&mut tape, &self.state.target_projector);
        let x = tape.input(view.clone().into_dyn());
        let f = dense_features(&mut tape, &enc, x);
        let shape = tape.value(f).shape().to_vec();
        let rows = tape.nchw_to_rows(f);
        let y = mlp2(&mut tape, &proj, "proj", rows);
        let ymap = tape.rows_to_nchw(y, b, shape[2], shape[3]);
        let (back, mask) = tape.warp_affine(ymap, &inv, 0.0);
        let img = tape.value(back).clone().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mask = mask.into_dimensionality::<ndarray::Ix4>().unwrap();
        Ok((img, mask))
    }
}

/// Run `cfg.epochs` epochs of target pretraining over the image pool (labels
/// ignored). `on_epoch` observes the state after every epoch, e.g. for
/// checkpoint snapshots; with `epochs = 0` the initialization is returned
/// untouched.
pub fn run_target_pretrain(
    images: &Array4<f32>,
    init: ModelState,
    anchor: Option<AnchorSnapshot>,
    cfg: &ContrastiveConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &ModelState, &MetricRecord) -> Result<()>,
) -> Result<ModelState> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::Config("target pretraining needs a nonempty dataset".into()));
    }
    let mut trainer = TargetPretrainer::new(init, anchor, cfg.clone())?;
    let mut shuffle_rng = stream(seed, "target-pretrain-shuffle");
    let mut aug_rng = stream(seed, "target-pretrain-augment");
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);
        let mut sums: std::collections::BTreeMap<String, f64> = Default::default();
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = gather(images, chunk);
            let rec = trainer.pretrain_step(&batch, &mut aug_rng)?;
            for (k, v) in rec.metrics {
                *sums.entry(k).or_insert(0.0) += v;
            }
            steps += 1;
        }
        let mut record = MetricRecord::new(epoch as u64);
        for (k, v) in sums {
            record.metrics.insert(k, v / steps as f64);
        }
        on_epoch(epoch, &trainer.state, &record)?;
    }
    Ok(trainer.state)
}

pub(crate) fn gather(images: &Array4<f32>, idx: &[usize]) -> Array4<f32> {
    let (_, c, h, w) = images.dim();
    let mut out = Array4::<f32>::zeros((idx.len(), c, h, w));
    for (row, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), row).assign(&images.index_axis(Axis(0), i));
    }
    out
}
