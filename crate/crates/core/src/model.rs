//! Desk-scale network: a 4-block strided conv encoder with group
//! normalization, an MLP projector/predictor pair and a linear classifier
//! head (used as a 1x1 conv for segmentation). Parameter sets are ordered,
//! named tensors so checkpoints, EMA updates and the anchor regularizer all
//! address parameters uniformly.

use crate::error::{Error, Result};
use crate::stream::{normal, stream, Stream};
use crate::tensor::{cast_from_f32, Elem, Grads, Tape, Var};
use ndarray::{ArrayD, IxDyn};

pub const ENC_WIDTHS: [usize; 4] = [32, 64, 128, 128];
pub const GN_GROUPS: usize = 8;
/// Pooled embedding width (block 4).
pub const EMBED_DIM: usize = 128;
/// Dense feature width (block 3, stride 8).
pub const DENSE_DIM: usize = 128;
pub const PROJ_HIDDEN: usize = 256;
pub const PROJ_DIM: usize = 64;
pub const PRED_HIDDEN: usize = 256;

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, ArrayD<f32>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: ArrayD<f32>) {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f32>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Check that `other` has the same names and shapes, in order.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter sets differ in size: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(Error::ShapeMismatch(format!("parameter name {na} vs {nb}")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "{na}: shape {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

fn he_conv(rng: &mut Stream, oc: usize, ic: usize, k: usize) -> ArrayD<f32> {
    let std = (2.0 / (ic * k * k) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(&[oc, ic, k, k]), || (normal(rng) * std) as f32)
}

fn he_linear(rng: &mut Stream, out: usize, inp: usize) -> ArrayD<f32> {
    let std = (2.0 / inp as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(&[out, inp]), || (normal(rng) * std) as f32)
}

fn zeros(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::zeros(IxDyn(shape))
}

fn ones(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::ones(IxDyn(shape))
}

pub fn init_encoder(seed: u64) -> ParamSet {
    let mut rng = stream(seed, "init-encoder");
    let mut p = ParamSet::new();
    let mut ic = 3;
    for (b, &oc) in ENC_WIDTHS.iter().enumerate() {
        let b = b + 1;
        p.push(format!("enc.b{b}.conv.w"), he_conv(&mut rng, oc, ic, 3));
        p.push(format!("enc.b{b}.conv.b"), zeros(&[oc]));
        p.push(format!("enc.b{b}.gn.g"), ones(&[oc]));
        p.push(format!("enc.b{b}.gn.b"), zeros(&[oc]));
        ic = oc;
    }
    p
}

pub fn init_projector(seed: u64) -> ParamSet {
    let mut rng = stream(seed, "init-projector");
    let mut p = ParamSet::new();
    p.push("proj.w1", he_linear(&mut rng, PROJ_HIDDEN, EMBED_DIM));
    p.push("proj.b1", zeros(&[PROJ_HIDDEN]));
    p.push("proj.bn.g", ones(&[PROJ_HIDDEN]));
    p.push("proj.bn.b", zeros(&[PROJ_HIDDEN]));
    p.push("proj.w2", he_linear(&mut rng, PROJ_DIM, PROJ_HIDDEN));
    p.push("proj.b2", zeros(&[PROJ_DIM]));
    p
}

pub fn init_predictor(seed: u64) -> ParamSet {
    let mut rng = stream(seed, "init-predictor");
    let mut p = ParamSet::new();
    p.push("pred.w1", he_linear(&mut rng, PRED_HIDDEN, PROJ_DIM));
    p.push("pred.b1", zeros(&[PRED_HIDDEN]));
    p.push("pred.bn.g", ones(&[PRED_HIDDEN]));
    p.push("pred.bn.b", zeros(&[PRED_HIDDEN]));
    p.push("pred.w2", he_linear(&mut rng, PROJ_DIM, PRED_HIDDEN));
    p.push("pred.b2", zeros(&[PROJ_DIM]));
    p
}

/// Linear head over the pooled embedding (classification) or, with the same
/// weights treated as a 1x1 conv, over dense features (segmentation).
pub fn init_classifier(classes: usize, seed: u64) -> ParamSet {
    let mut rng = stream(seed, "init-classifier");
    let mut p = ParamSet::new();
    p.push("clf.w", he_linear(&mut rng, classes, EMBED_DIM));
    p.push("clf.b", zeros(&[classes]));
    p
}

/// Online networks, the classifier, and the EMA target copy of
/// (encoder, projector). The target copy receives no gradient updates.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub encoder: ParamSet,
    pub projector: ParamSet,
    pub predictor: ParamSet,
    pub classifier: ParamSet,
    pub target_encoder: ParamSet,
    pub target_projector: ParamSet,
}

impl ModelState {
    pub fn init(classes: usize, seed: u64) -> Self {
        let encoder = init_encoder(crate::stream::subseed(seed, "enc"));
        let projector = init_projector(crate::stream::subseed(seed, "proj"));
        ModelState {
            target_encoder: encoder.clone(),
            target_projector: projector.clone(),
            encoder,
            projector,
            predictor: init_predictor(crate::stream::subseed(seed, "pred")),
            classifier: init_classifier(classes, crate::stream::subseed(seed, "clf")),
        }
    }

    /// Reset the EMA target to the current online weights.
    pub fn sync_target(&mut self) {
        self.target_encoder = self.encoder.clone();
        self.target_projector = self.projector.clone();
    }

    pub fn classes(&self) -> usize {
        self.classifier.get("clf.w").map(|w| w.shape()[0]).unwrap_or(0)
    }

    /// All tensors under stable prefixed names (checkpoint order).
    pub fn named_tensors(&self) -> Vec<(String, &ArrayD<f32>)> {
        let mut out = Vec::new();
        for (prefix, set) in [
            ("encoder", &self.encoder),
            ("projector", &self.projector),
            ("predictor", &self.predictor),
            ("classifier", &self.classifier),
            ("target_encoder", &self.target_encoder),
            ("target_projector", &self.target_projector),
        ] {
            for (n, t) in set.iter() {
                out.push((format!("{prefix}.{n}"), t));
            }
        }
        out
    }

    pub fn from_named(tensors: &[(String, ArrayD<f32>)], classes: usize, seed: u64) -> Result<Self> {
        let mut state = ModelState::init(classes, seed);
        for (prefix, set) in [
            ("encoder", &mut state.encoder),
            ("projector", &mut state.projector),
            ("predictor", &mut state.predictor),
            ("classifier", &mut state.classifier),
            ("target_encoder", &mut state.target_encoder),
            ("target_projector", &mut state.target_projector),
        ] {
            for (name, tensor) in set.iter_mut() {
                let full = format!("{prefix}.{name}");
                let found = tensors
                    .iter()
                    .find(|(n, _)| *n == full)
                    .ok_or_else(|| Error::Corrupt(format!("missing tensor {full}")))?;
                if found.1.shape() != tensor.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "{full}: expected {:?}, got {:?}",
                        tensor.shape(),
                        found.1.shape()
                    )));
                }
                *tensor = found.1.clone();
            }
        }
        Ok(state)
    }
}

/// Parameters pushed onto a tape, addressable by name.
pub struct Vars {
    entries: Vec<(String, Var)>,
}

impl Vars {
    pub fn get(&self, name: &str) -> Var {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("parameter {name} not on tape"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.entries.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Collect `(name, grad)` pairs for every parameter that received one.
    pub fn grads<F: Elem>(&self, grads: &mut Grads<F>) -> Vec<(String, ArrayD<F>)> {
        self.entries
            .iter()
            .filter_map(|(n, v)| grads.take(*v).map(|g| (n.clone(), g)))
            .collect()
    }
}

/// Push a parameter set onto the tape (casting to the tape element type).
pub fn push_params<F: Elem>(tape: &mut Tape<F>, set: &ParamSet) -> Vars {
    let entries = set
        .iter()
        .map(|(n, t)| (n.to_string(), tape.input(cast_from_f32::<F>(t))))
        .collect();
    Vars { entries }
}

/// Encoder trunk: `blocks` strided conv blocks (conv 3x3 s2 p1, group norm,
/// relu). `blocks = 4` is the classification trunk, `blocks = 3` the dense
/// (stride 8) trunk.
pub fn encoder_trunk<F: Elem>(tape: &mut Tape<F>, vars: &Vars, x: Var, blocks: usize) -> Var {
    let mut h = x;
    for b in 1..=blocks {
        let w = vars.get(&format!("enc.b{b}.conv.w"));
        let bb = vars.get(&format!("enc.b{b}.conv.b"));
        let g = vars.get(&format!("enc.b{b}.gn.g"));
        let gb = vars.get(&format!("enc.b{b}.gn.b"));
        h = tape.conv2d(h, w, bb, 2, 1);
        h = tape.group_norm(h, g, gb, GN_GROUPS, 1e-5);
        h = tape.relu(h);
    }
    h
}

/// Pooled embedding `[B, EMBED_DIM]`.
pub fn pooled_embedding<F: Elem>(tape: &mut Tape<F>, vars: &Vars, x: Var) -> Var {
    let h = encoder_trunk(tape, vars, x, 4);
    tape.mean_pool_hw(h)
}

/// Dense feature map `[B, DENSE_DIM, H/8, W/8]`.
pub fn dense_features<F: Elem>(tape: &mut Tape<F>, vars: &Vars, x: Var) -> Var {
    encoder_trunk(tape, vars, x, 3)
}

/// Two-layer MLP applied row-wise: linear, batch norm, relu, linear.
/// The hidden batch normalization is what keeps the BYOL online/target
/// dynamic from collapsing to constant features; these heads only ever run
/// in training mode, so no running statistics exist and results stay
/// deterministic given the batch. Parameter names are
/// `{prefix}.w1 / b1 / bn.g / bn.b / w2 / b2`.
pub fn mlp2<F: Elem>(tape: &mut Tape<F>, vars: &Vars, prefix: &str, rows: Var) -> Var {
    let h = tape.linear(rows, vars.get(&format!("{prefix}.w1")), vars.get(&format!("{prefix}.b1")));
    let h = tape.batch_norm_rows(
        h,
        vars.get(&format!("{prefix}.bn.g")),
        vars.get(&format!("{prefix}.bn.b")),
        1e-5,
    );
    let h = tape.relu(h);
    tape.linear(h, vars.get(&format!("{prefix}.w2")), vars.get(&format!("{prefix}.b2")))
}

/// Classifier logits over pooled embeddings.
pub fn classify<F: Elem>(tape: &mut Tape<F>, vars: &Vars, z: Var) -> Var {
    tape.linear(z, vars.get("clf.w"), vars.get("clf.b"))
}

/// Segmentation logits `[B, K, H, W]`: 1x1 conv over dense features,
/// bilinearly upsampled to the input resolution.
pub fn seg_logits<F: Elem>(
    tape: &mut Tape<F>,
    enc_vars: &Vars,
    clf_vars: &Vars,
    x: Var,
    out_hw: (usize, usize),
) -> Var {
    let f = dense_features(tape, enc_vars, x);
    let shape = tape.value(f).shape().to_vec();
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    let rows = tape.nchw_to_rows(f);
    let logits = tape.linear(rows, clf_vars.get("clf.w"), clf_vars.get("clf.b"));
    let maps = tape.rows_to_nchw(logits, b, h, w);
    tape.upsample_bilinear(maps, out_hw.0, out_hw.1)
}

fn batched_forward<Out>(
    images: &ndarray::Array4<f32>,
    batch: usize,
    mut f: impl FnMut(&ndarray::Array4<f32>) -> Out,
) -> Vec<Out> {
    let n = images.shape()[0];
    let mut outs = Vec::new();
    let mut i = 0;
    while i < n {
        let j = (i + batch).min(n);
        let chunk = images.slice(ndarray::s![i..j, .., .., ..]).to_owned();
        outs.push(f(&chunk));
        i = j;
    }
    outs
}

/// Forward-only pooled embeddings `[N, EMBED_DIM]`.
pub fn infer_embeddings(state: &ModelState, images: &ndarray::Array4<f32>, batch: usize) -> ndarray::Array2<f32> {
    let n = images.shape()[0];
    let mut out = ndarray::Array2::<f32>::zeros((n, EMBED_DIM));
    let chunks = batched_forward(images, batch, |chunk| {
        let mut tape = Tape::<f32>::new();
        let enc = push_params(&mut tape, &state.encoder);
        let x = tape.input(chunk.clone().into_dyn());
        let z = pooled_embedding(&mut tape, &enc, x);
        tape.value(z).clone()
    });
    let mut row = 0;
    for c in chunks {
        let c2 = c.into_dimensionality::<ndarray::Ix2>().unwrap();
        out.slice_mut(ndarray::s![row..row + c2.nrows(), ..]).assign(&c2);
        row += c2.nrows();
    }
    out
}

/// Forward-only class logits `[N, K]` from explicit parameter sets.
pub fn class_logits_of(
    encoder: &ParamSet,
    classifier: &ParamSet,
    images: &ndarray::Array4<f32>,
    batch: usize,
) -> ndarray::Array2<f32> {
    let n = images.shape()[0];
    let k = classifier.get("clf.w").map(|w| w.shape()[0]).unwrap_or(0);
    let mut out = ndarray::Array2::<f32>::zeros((n, k));
    let chunks = batched_forward(images, batch, |chunk| {
        let mut tape = Tape::<f32>::new();
        let enc = push_params(&mut tape, encoder);
        let clf = push_params(&mut tape, classifier);
        let x = tape.input(chunk.clone().into_dyn());
        let z = pooled_embedding(&mut tape, &enc, x);
        let logits = classify(&mut tape, &clf, z);
        tape.value(logits).clone()
    });
    let mut row = 0;
    for c in chunks {
        let c2 = c.into_dimensionality::<ndarray::Ix2>().unwrap();
        out.slice_mut(ndarray::s![row..row + c2.nrows(), ..]).assign(&c2);
        row += c2.nrows();
    }
    out
}

/// Forward-only class logits `[N, K]`.
pub fn infer_class_logits(state: &ModelState, images: &ndarray::Array4<f32>, batch: usize) -> ndarray::Array2<f32> {
    class_logits_of(&state.encoder, &state.classifier, images, batch)
}

/// Forward-only segmentation logits `[N, K, H, W]` from explicit parameter
/// sets.
pub fn seg_logits_of(
    encoder: &ParamSet,
    classifier: &ParamSet,
    images: &ndarray::Array4<f32>,
    batch: usize,
) -> ndarray::Array4<f32> {
    let (n, _, h, w) = images.dim();
    let k = classifier.get("clf.w").map(|wt| wt.shape()[0]).unwrap_or(0);
    let mut out = ndarray::Array4::<f32>::zeros((n, k, h, w));
    let mut row = 0;
    for chunk in batched_forward(images, batch, |chunk| {
        let mut tape = Tape::<f32>::new();
        let enc = push_params(&mut tape, encoder);
        let clf = push_params(&mut tape, classifier);
        let x = tape.input(chunk.clone().into_dyn());
        let logits = seg_logits(&mut tape, &enc, &clf, x, (h, w));
        tape.value(logits).clone()
    }) {
        let l = chunk.into_dimensionality::<ndarray::Ix4>().unwrap();
        let b = l.shape()[0];
        out.slice_mut(ndarray::s![row..row + b, .., .., ..]).assign(&l);
        row += b;
    }
    out
}

/// Forward-only per-pixel class predictions `[N, H, W]`.
pub fn infer_seg_predictions(state: &ModelState, images: &ndarray::Array4<f32>, batch: usize) -> ndarray::Array3<u8> {
    let logits = seg_logits_of(&state.encoder, &state.classifier, images, batch);
    let (n, k, h, w) = logits.dim();
    let mut out = ndarray::Array3::<u8>::zeros((n, h, w));
    for bi in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut best = 0usize;
                for c in 1..k {
                    if logits[[bi, c, i, j]] > logits[[bi, best, i, j]] {
                        best = c;
                    }
                }
                out[[bi, i, j]] = best as u8;
            }
        }
    }
    out
}

/// SGD with classical momentum: `v = beta v + g; p -= lr v`.
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<(String, ArrayD<f32>)>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    fn velocity_mut(&mut self, name: &str, shape: &[usize]) -> &mut ArrayD<f32> {
        if let Some(pos) = self.velocity.iter().position(|(n, _)| n == name) {
            &mut self.velocity[pos].1
        } else {
            self.velocity.push((name.to_string(), ArrayD::zeros(IxDyn(shape))));
            &mut self.velocity.last_mut().unwrap().1
        }
    }

    /// Apply gradients (matched by name) to a parameter set. Parameter names
    /// carry their own prefixes (`enc.*`, `proj.*`, ...) so one optimizer can
    /// serve several sets without key collisions.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[(String, ArrayD<f32>)]) {
        let lr = self.lr;
        let beta = self.momentum;
        for (name, g) in grads {
            let Some(pos) = params.entries.iter().position(|(n, _)| n == name) else {
                continue;
            };
            let v = self.velocity_mut(name, g.shape());
            v.zip_mut_with(g, |vv, &gv| *vv = beta * *vv + gv);
            params.entries[pos].1.zip_mut_with(&*v, |p, &vv| *p -= lr * vv);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn init_is_deterministic_and_target_matches_online() {
        let a = ModelState::init(4, 7);
        let b = ModelState::init(4, 7);
        for ((_, ta), (_, tb)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
            assert_eq!(ta, tb);
        }
        a.encoder.check_compatible(&a.target_encoder).unwrap();
        a.projector.check_compatible(&a.target_projector).unwrap();
        assert_eq!(a.encoder, a.target_encoder);
    }

    #[test]
    fn forward_shapes() {
        let state = ModelState::init(5, 3);
        let mut tape = Tape::<f32>::new();
        let enc = push_params(&mut tape, &state.encoder);
        let proj = push_params(&mut tape, &state.projector);
        let clf = push_params(&mut tape, &state.classifier);
        let x = tape.input(Array4::<f32>::zeros((2, 3, 32, 32)).into_dyn());
        let z = pooled_embedding(&mut tape, &enc, x);
        assert_eq!(tape.value(z).shape(), &[2, EMBED_DIM]);
        let y = mlp2(&mut tape, &proj, "proj", z);
        assert_eq!(tape.value(y).shape(), &[2, PROJ_DIM]);
        let logits = classify(&mut tape, &clf, z);
        assert_eq!(tape.value(logits).shape(), &[2, 5]);
        let d = dense_features(&mut tape, &enc, x);
        assert_eq!(tape.value(d).shape(), &[2, DENSE_DIM, 4, 4]);
        let seg = seg_logits(&mut tape, &enc, &clf, x, (32, 32));
        assert_eq!(tape.value(seg).shape(), &[2, 5, 32, 32]);
    }

    #[test]
    fn sgd_momentum_matches_recurrence() {
        let mut p = ParamSet::new();
        p.push("w", ArrayD::from_elem(IxDyn(&[1]), 1.0f32));
        let mut opt = Sgd::new(0.1, 0.9);
        let g = vec![("w".to_string(), ArrayD::from_elem(IxDyn(&[1]), 1.0f32))];
        opt.step(&mut p, &g);
        // v = 1, p = 1 - 0.1
        assert!((p.get("w").unwrap()[[0]] - 0.9).abs() < 1e-7);
        opt.step(&mut p, &g);
        // v = 1.9, p = 0.9 - 0.19
        assert!((p.get("w").unwrap()[[0]] - 0.71).abs() < 1e-6);
    }
}
