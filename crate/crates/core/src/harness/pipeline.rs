//! Stage orchestration: generic pretrain, target pretrain, semi-supervised
//! finetune, evaluation, cross-dataset transfer matrices and
//! pretraining-steps sweeps. Each stage writes a checkpoint directory plus a
//! `metrics.jsonl`, chained by manifest parent ids.

use crate::contrastive::{run_target_pretrain, AnchorSnapshot, ContrastiveConfig};
use crate::error::{Error, Result};
use crate::eval::{
    classification_accuracy, cluster_accuracy, kmeans_cluster, miou, MetricRecord,
};
use crate::harness::checkpoint;
use crate::harness::config::ExperimentConfig;
use crate::harness::dataset::{self, Dataset, DatasetSplit};
use crate::harness::metrics::MetricWriter;
use crate::model::{infer_class_logits, infer_embeddings, infer_seg_predictions, ModelState, ParamSet};
use crate::ssl::{run_finetune, FinetuneState, SslConfig, Task, UnlabeledPool};
use crate::stream::subseed;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct StageResult {
    pub run_id: String,
    pub ckpt_dir: PathBuf,
}

fn run_id(stage: &str, cfg: &ExperimentConfig, seed: u64) -> String {
    format!("{stage}-{}-s{seed}", cfg.hash8())
}

fn resolve_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        Some(path) => dataset::load(path),
        None => dataset::generate(&cfg.dataset),
    }
}

fn label_classes(ds: &Dataset) -> usize {
    if ds.is_segmentation() {
        ds.spec.classes - 1
    } else {
        ds.spec.classes
    }
}

/// Generate the configured dataset and persist it under `<out>/dataset`.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let ds = dataset::generate(&cfg.dataset)?;
    let dir = cfg.out.join("dataset");
    dataset::save(&ds, &dir)?;
    Ok(dir)
}

/// Produce the labeled/unlabeled split file under `<out>/split.json`.
pub fn cmd_split(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let ds = resolve_dataset(cfg)?;
    let split = dataset::split_dataset(&ds, cfg.split_n_labeled, cfg.split_seed)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let path = cfg.out.join("split.json");
    dataset::save_split(&split, &path)?;
    Ok(path)
}

/// Contrastive pretraining from random initialization (the desk-scale
/// stand-in for a generic pretrained checkpoint). No anchor term.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<StageResult> {
    let ds = resolve_dataset(cfg)?;
    let rid = run_id("pretrain", cfg, cfg.seed);
    let dir = cfg.out.join(&rid);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let init = ModelState::init(ds.spec.classes, subseed(cfg.seed, "pretrain-init"));
    let mut writer = MetricWriter::create(&dir.join("metrics.jsonl"))?;
    let state = run_target_pretrain(
        &ds.train_images,
        init,
        None,
        &cfg.contrastive,
        subseed(cfg.seed, "pretrain"),
        |_, _, rec| writer.append(rec),
    )?;
    writer.finish()?;
    checkpoint::save_model(
        &dir,
        &rid,
        "generic_pretrain",
        None,
        &cfg.config_hash,
        cfg.contrastive.epochs,
        &state,
    )?;
    Ok(StageResult { run_id: rid, ckpt_dir: dir })
}

fn require_init(cfg: &ExperimentConfig) -> Result<PathBuf> {
    match &cfg.init {
        Some(p) if p != "random" => Ok(PathBuf::from(p)),
        _ => Err(Error::Config("this stage requires run.init pointing at a checkpoint".into())),
    }
}

/// Target pretraining: anchored contrastive adaptation of a parent
/// checkpoint to the target dataset. Optionally snapshots the weights at the
/// listed epochs (0 = the initialization).
pub fn cmd_target_pretrain(cfg: &ExperimentConfig, snapshots: &[usize]) -> Result<StageResult> {
    let ds = resolve_dataset(cfg)?;
    let init_path = require_init(cfg)?;
    let (parent, encoder) = checkpoint::load_encoder(&init_path)?;
    if let Some(&bad) = snapshots.iter().find(|&&e| e > cfg.contrastive.epochs) {
        return Err(Error::Config(format!(
            "snapshot epoch {bad} beyond configured epochs {}",
            cfg.contrastive.epochs
        )));
    }
    let rid = run_id("target-pretrain", cfg, cfg.seed);
    let dir = cfg.out.join(&rid);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let mut state = ModelState::init(ds.spec.classes, subseed(cfg.seed, "target-init"));
    state.encoder = encoder;
    state.sync_target();
    let anchor = AnchorSnapshot::new(&state.encoder, 0);

    let save_snapshot = |epoch: usize, st: &ModelState| -> Result<()> {
        let sdir = dir.join(format!("snapshot-{epoch}"));
        checkpoint::save_model(
            &sdir,
            &format!("{rid}-e{epoch}"),
            "target_pretrain",
            Some(&parent.run_id),
            &cfg.config_hash,
            epoch,
            st,
        )
    };
    if snapshots.contains(&0) {
        save_snapshot(0, &state)?;
    }
    let mut writer = MetricWriter::create(&dir.join("metrics.jsonl"))?;
    let state = run_target_pretrain(
        &ds.train_images,
        state,
        Some(anchor),
        &cfg.contrastive,
        subseed(cfg.seed, "target-pretrain"),
        |epoch, st, rec| {
            writer.append(rec)?;
            if snapshots.contains(&epoch) {
                save_snapshot(epoch, st)?;
            }
            Ok(())
        },
    )?;
    writer.finish()?;
    checkpoint::save_model(
        &dir,
        &rid,
        "target_pretrain",
        Some(&parent.run_id),
        &cfg.config_hash,
        cfg.contrastive.epochs,
        &state,
    )?;
    Ok(StageResult { run_id: rid, ckpt_dir: dir })
}

fn resolve_split(cfg: &ExperimentConfig, ds: &Dataset) -> Result<DatasetSplit> {
    match &cfg.split_file {
        Some(p) => dataset::load_split(p),
        None => dataset::split_dataset(ds, cfg.split_n_labeled, cfg.split_seed),
    }
}

/// In-memory finetune used by the staged command, transfer and sweep paths.
/// Returns the final state and one record per epoch.
pub fn finetune_in_memory(
    ds: &Dataset,
    split: &DatasetSplit,
    init_encoder: Option<&ParamSet>,
    ssl_cfg: &SslConfig,
    seed: u64,
) -> Result<(FinetuneState, Vec<MetricRecord>)> {
    let task = if ds.is_segmentation() { Task::Segmentation } else { Task::Classification };
    let mut model = ModelState::init(ds.spec.classes, subseed(seed, "finetune-init"));
    if let Some(enc) = init_encoder {
        model.encoder = enc.clone();
        model.sync_target();
    }
    let state = FinetuneState::new(model, task, ssl_cfg);
    let (lab_images, lab_targets) = dataset::labeled_subset(ds, split);
    let pool = UnlabeledPool::new(&ds.train_images);
    let mut records = Vec::new();
    let final_state = run_finetune(
        &lab_images,
        &lab_targets,
        &pool,
        &ds.test_images,
        &dataset::test_targets(ds),
        state,
        ssl_cfg,
        subseed(seed, "finetune"),
        |_, _, rec| {
            records.push(rec.clone());
            Ok(())
        },
    )?;
    Ok((final_state, records))
}

/// Semi-supervised finetuning stage; initial weights come from `run.init`
/// (`random` or a checkpoint path).
pub fn cmd_finetune(cfg: &ExperimentConfig) -> Result<StageResult> {
    let ds = resolve_dataset(cfg)?;
    let split = resolve_split(cfg, &ds)?;
    let (parent_id, encoder) = match &cfg.init {
        None => (None, None),
        Some(p) if p == "random" => (None, None),
        Some(p) => {
            let (manifest, enc) = checkpoint::load_encoder(Path::new(p))?;
            (Some(manifest.run_id), Some(enc))
        }
    };
    let rid = run_id("finetune", cfg, cfg.seed);
    let dir = cfg.out.join(&rid);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut writer = MetricWriter::create(&dir.join("metrics.jsonl"))?;
    let (state, records) =
        finetune_in_memory(&ds, &split, encoder.as_ref(), &cfg.ssl, cfg.seed)?;
    for rec in &records {
        writer.append(rec)?;
    }
    writer.finish()?;
    checkpoint::save_model(
        &dir,
        &rid,
        "finetune",
        parent_id.as_deref(),
        &cfg.config_hash,
        cfg.ssl.epochs,
        &state.model,
    )?;
    Ok(StageResult { run_id: rid, ckpt_dir: dir })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub metrics: BTreeMap<String, f64>,
}

/// Evaluate a checkpoint on the configured dataset. Requested metrics:
/// `accuracy`, `miou`, `cluster` (clustering runs on the train and test
/// splits separately).
pub fn cmd_eval(cfg: &ExperimentConfig, ckpt: &Path) -> Result<(PathBuf, EvalReport)> {
    let ds = resolve_dataset(cfg)?;
    let (manifest, state) =
        checkpoint::load_model(ckpt, ds.spec.classes, subseed(cfg.seed, "eval-init"))?;
    let mut metrics = BTreeMap::new();
    for metric in &cfg.eval_metrics {
        match metric.as_str() {
            "accuracy" => {
                if ds.test_images.shape()[0] == 0 {
                    return Err(Error::Config("accuracy needs a test split".into()));
                }
                let logits = infer_class_logits(&state, &ds.test_images, 512);
                let preds: Vec<usize> = logits.outer_iter().map(argmax_row).collect();
                metrics.insert(
                    "accuracy".into(),
                    classification_accuracy(&preds, &ds.test_labels)?,
                );
            }
            "miou" => {
                let gt = ds
                    .test_masks
                    .as_ref()
                    .ok_or_else(|| Error::Config("miou needs a segmentation dataset".into()))?;
                let preds = infer_seg_predictions(&state, &ds.test_images, 256);
                metrics.insert("miou".into(), miou(&preds, gt, ds.spec.classes)?);
            }
            "cluster" => {
                let k = label_classes(&ds);
                for (split_name, images, labels) in [
                    ("train", &ds.train_images, &ds.train_labels),
                    ("test", &ds.test_images, &ds.test_labels),
                ] {
                    if images.shape()[0] == 0 {
                        continue;
                    }
                    let emb = infer_embeddings(&state, images, 512);
                    let assign =
                        kmeans_cluster(&emb, k, subseed(cfg.seed, &format!("cluster-{split_name}")))?;
                    metrics.insert(
                        format!("cluster_accuracy_{split_name}"),
                        cluster_accuracy(&assign, labels)?,
                    );
                }
            }
            other => return Err(Error::Config(format!("unknown eval metric '{other}'"))),
        }
    }
    let report = EvalReport { checkpoint: manifest.run_id.clone(), metrics };
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let path = cfg.out.join("report.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok((path, report))
}

fn argmax_row(row: ndarray::ArrayView1<'_, f32>) -> usize {
    let mut best = 0usize;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Last-epoch test metric of a finetune record list.
pub fn final_test_metric(records: &[MetricRecord], key: &str) -> Result<f64> {
    records
        .last()
        .and_then(|r| r.get(key))
        .ok_or_else(|| Error::Data(format!("no {key} in finetune records")))
}

/// Run independent jobs on up to `threads` workers, preserving job order in
/// the results. Each job owns its seeds and output paths, so results do not
/// depend on scheduling.
pub fn run_jobs<T: Send, F: FnOnce() -> Result<T> + Send>(
    jobs: Vec<F>,
    threads: usize,
) -> Result<Vec<T>> {
    let n = jobs.len();
    if threads <= 1 || n <= 1 {
        let mut out = Vec::with_capacity(n);
        for job in jobs {
            out.push(job()?);
        }
        return Ok(out);
    }
    let queue = std::sync::Mutex::new(jobs.into_iter().enumerate().collect::<Vec<_>>());
    let results = std::sync::Mutex::new((0..n).map(|_| None).collect::<Vec<Option<Result<T>>>>());
    std::thread::scope(|scope| {
        for _ in 0..threads.min(n) {
            scope.spawn(|| loop {
                let job = { queue.lock().unwrap().pop() };
                let Some((idx, job)) = job else { break };
                let out = job();
                results.lock().unwrap()[idx] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("job ran"))
        .collect()
}

/// Target pretraining in memory with optional epoch snapshots of the full
/// state. Returns `(final_state, snapshots, per_epoch_records)`.
pub fn target_pretrain_in_memory(
    images: &ndarray::Array4<f32>,
    init: ModelState,
    anchored: bool,
    ccfg: &ContrastiveConfig,
    seed: u64,
    snapshot_epochs: &[usize],
) -> Result<(ModelState, Vec<(usize, ModelState)>, Vec<MetricRecord>)> {
    let anchor = anchored.then(|| AnchorSnapshot::new(&init.encoder, 0));
    let mut snapshots = Vec::new();
    if snapshot_epochs.contains(&0) {
        snapshots.push((0, init.clone()));
    }
    let mut records = Vec::new();
    let state = run_target_pretrain(images, init, anchor, ccfg, seed, |epoch, st, rec| {
        records.push(rec.clone());
        if snapshot_epochs.contains(&epoch) {
            snapshots.push((epoch, st.clone()));
        }
        Ok(())
    })?;
    Ok((state, snapshots, records))
}

/// Cross-dataset transfer: target-pretrain on every dataset, then finetune
/// every (pretrain source x finetune target) pair; one row per pair with the
/// per-seed accuracies and their mean. Writes `transfer.csv` under the first
/// config's output directory.
pub fn cmd_transfer(cfgs: &[ExperimentConfig]) -> Result<PathBuf> {
    if cfgs.is_empty() {
        return Err(Error::Config("transfer needs at least one dataset config".into()));
    }
    let threads = cfgs[0].threads;
    let seeds = cfgs[0].seeds.clone();
    let datasets: Vec<Dataset> = cfgs.iter().map(resolve_dataset).collect::<Result<_>>()?;

    // phase 1: target-pretrain per (dataset, seed)
    let mut init_encoders = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        init_encoders.push(match &cfg.init {
            Some(p) if p != "random" => Some(checkpoint::load_encoder(Path::new(p))?.1),
            _ => None,
        });
    }
    let mut pretrain_jobs = Vec::new();
    for (i, cfg) in cfgs.iter().enumerate() {
        for &seed in &seeds {
            let ds = &datasets[i];
            let ccfg = cfg.contrastive.clone();
            let classes = ds.spec.classes;
            let init_encoder = init_encoders[i].clone();
            pretrain_jobs.push(move || {
                let mut init = ModelState::init(classes, subseed(seed, "target-init"));
                let anchored = init_encoder.is_some();
                if let Some(enc) = init_encoder {
                    init.encoder = enc;
                    init.sync_target();
                }
                let (state, _, _) = target_pretrain_in_memory(
                    &ds.train_images,
                    init,
                    anchored,
                    &ccfg,
                    subseed(seed, "target-pretrain"),
                    &[],
                )?;
                Ok(state.encoder)
            });
        }
    }
    let pretrained = run_jobs(pretrain_jobs, threads)?;

    // phase 2: finetune every (source, target, seed)
    let mut ft_jobs = Vec::new();
    let pretrained_ref = &pretrained;
    let datasets_ref = &datasets;
    for i in 0..cfgs.len() {
        for (j, cfg_j) in cfgs.iter().enumerate() {
            for (si, &seed) in seeds.iter().enumerate() {
                let encoder = &pretrained_ref[i * seeds.len() + si];
                let ds = &datasets_ref[j];
                let ssl_cfg = cfg_j.ssl.clone();
                let n_labeled = cfg_j.split_n_labeled;
                let split_seed = cfg_j.split_seed;
                ft_jobs.push(move || {
                    let split = dataset::split_dataset(ds, n_labeled, split_seed)?;
                    let (_, records) =
                        finetune_in_memory(ds, &split, Some(encoder), &ssl_cfg, seed)?;
                    final_test_metric(
                        &records,
                        if ds.is_segmentation() { "test_miou" } else { "test_accuracy" },
                    )
                });
            }
        }
    }
    let accs = run_jobs(ft_jobs, threads)?;

    let out_dir = &cfgs[0].out;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("transfer.csv");
    let mut text = String::from("pretrain_source,finetune_target,mean");
    for &s in &seeds {
        text.push_str(&format!(",seed{s}"));
    }
    text.push('\n');
    let mut row = 0;
    for i in 0..cfgs.len() {
        for j in 0..cfgs.len() {
            let vals = &accs[row * seeds.len()..(row + 1) * seeds.len()];
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            text.push_str(&format!("d{i},d{j},{mean:.6}"));
            for v in vals {
                text.push_str(&format!(",{v:.6}"));
            }
            text.push('\n');
            row += 1;
        }
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Pretraining-steps sweep: snapshot the target-pretrained weights at the
/// listed epochs, finetune from every snapshot at every label budget, and
/// emit one row per (snapshot, budget) with per-seed accuracies and means.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let snapshots = cfg.sweep_snapshots.clone();
    if snapshots.is_empty() || snapshots[0] != 0 {
        return Err(Error::Config("sweep.snapshots must start at 0".into()));
    }
    if snapshots.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("sweep.snapshots must be sorted ascending".into()));
    }
    if *snapshots.last().unwrap() > cfg.contrastive.epochs {
        return Err(Error::Config(format!(
            "snapshot epoch {} beyond configured epochs {}",
            snapshots.last().unwrap(),
            cfg.contrastive.epochs
        )));
    }
    let ds = resolve_dataset(cfg)?;
    let init_encoder = match &cfg.init {
        Some(p) if p != "random" => Some(checkpoint::load_encoder(Path::new(p))?.1),
        _ => None,
    };
    let seeds = cfg.seeds.clone();

    // phase 1: one target pretrain per seed, capturing the snapshots
    let mut tp_jobs = Vec::new();
    for &seed in &seeds {
        let ds_ref = &ds;
        let ccfg = cfg.contrastive.clone();
        let snaps = snapshots.clone();
        let init_encoder = init_encoder.clone();
        let classes = ds.spec.classes;
        tp_jobs.push(move || -> Result<Vec<(usize, ParamSet)>> {
            let mut init = ModelState::init(classes, subseed(seed, "target-init"));
            let anchored = init_encoder.is_some();
            if let Some(enc) = init_encoder {
                init.encoder = enc;
                init.sync_target();
            }
            let (_, snapshots, _) = target_pretrain_in_memory(
                &ds_ref.train_images,
                init,
                anchored,
                &ccfg,
                subseed(seed, "target-pretrain"),
                &snaps,
            )?;
            Ok(snapshots.into_iter().map(|(e, st)| (e, st.encoder)).collect())
        });
    }
    let per_seed_snapshots = run_jobs(tp_jobs, cfg.threads)?;

    // phase 2: finetune from each snapshot at each budget
    let mut ft_jobs = Vec::new();
    let metric_key = if ds.is_segmentation() { "test_miou" } else { "test_accuracy" };
    for &epoch in &snapshots {
        for &budget in &cfg.sweep_labels {
            for (si, &seed) in seeds.iter().enumerate() {
                let ds_ref = &ds;
                let ssl_cfg = cfg.ssl.clone();
                let split_seed = cfg.split_seed;
                let snaps = &per_seed_snapshots[si];
                ft_jobs.push(move || {
                    let encoder = snaps
                        .iter()
                        .find(|(e, _)| *e == epoch)
                        .map(|(_, enc)| enc)
                        .ok_or_else(|| Error::Data(format!("snapshot {epoch} missing")))?;
                    let split = dataset::split_dataset(ds_ref, budget, split_seed)?;
                    let (_, records) =
                        finetune_in_memory(ds_ref, &split, Some(encoder), &ssl_cfg, seed)?;
                    final_test_metric(&records, metric_key)
                });
            }
        }
    }
    let accs = run_jobs(ft_jobs, cfg.threads)?;

    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let path = cfg.out.join("sweep.csv");
    let mut text = String::from("target_epochs,n_labeled,mean");
    for &s in &seeds {
        text.push_str(&format!(",seed{s}"));
    }
    text.push('\n');
    let mut row = 0;
    for &epoch in &snapshots {
        for &budget in &cfg.sweep_labels {
            let vals = &accs[row * seeds.len()..(row + 1) * seeds.len()];
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            text.push_str(&format!("{epoch},{budget},{mean:.6}"));
            for v in vals {
                text.push_str(&format!(",{v:.6}"));
            }
            text.push('\n');
            row += 1;
        }
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
