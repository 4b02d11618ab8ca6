//! End-to-end CLI coverage: stage wiring, file formats, provenance, exit
//! codes and error lines. Numeric behavior is covered by the unit suites and
//! the acceptance tests.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_targetpre")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tp-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Tiny config: 2-class shapes, 64 train images, 2-epoch stages.
fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.ini");
    std::fs::write(
        &path,
        "dataset.classes = 2\n\
         dataset.train_count = 64\n\
         dataset.test_count = 16\n\
         dataset.seed = 3\n\
         split.n_labeled = 8\n\
         split.seed = 1\n\
         contrastive.epochs = 2\n\
         contrastive.batch_size = 16\n\
         contrastive.learning_rate = 0.05\n\
         ssl.epochs = 2\n\
         ssl.batch_size = 4\n\
         ssl.unlabeled_ratio = 2\n\
         ssl.learning_rate = 0.02\n\
         run.seed = 5\n",
    )
    .unwrap();
    path
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn gen_data_and_split_are_deterministic_files() {
    let root = tmp("gendata");
    let cfg = tiny_config(&root);
    let (out_a, out_b) = (root.join("a"), root.join("b"));
    for out in [&out_a, &out_b] {
        let res = run(&[
            "gen-data",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_ok(&res);
        let res = run(&[
            "split",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--data",
            out.join("dataset").to_str().unwrap(),
        ]);
        assert_ok(&res);
    }
    assert_eq!(dir_bytes(&out_a), dir_bytes(&out_b));
    let split: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("split.json")).unwrap()).unwrap();
    assert_eq!(split["n_labeled"], 8);
    assert_eq!(split["per_class"].as_array().unwrap().len(), 2);
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn staged_pipeline_chains_checkpoints_and_t0_preserves_weights() {
    let root = tmp("stages");
    let cfg = tiny_config(&root);
    let out = root.join("out");
    let outs = out.to_str().unwrap();
    let cfgs = cfg.to_str().unwrap();

    assert_ok(&run(&["gen-data", "--config", cfgs, "--out", outs]));
    let data = out.join("dataset");
    let datas = data.to_str().unwrap();

    assert_ok(&run(&["pretrain", "--config", cfgs, "--out", outs, "--data", datas]));
    let pretrain_dir = find_ckpt(&out, "pretrain-");

    // T = 0 target pretraining: encoder blobs must equal the parent's
    let cfg0 = root.join("t0.ini");
    let mut text = std::fs::read_to_string(&cfg).unwrap();
    text = text.replace("contrastive.epochs = 2", "contrastive.epochs = 0");
    std::fs::write(&cfg0, text).unwrap();
    assert_ok(&run(&[
        "target-pretrain",
        "--config",
        cfg0.to_str().unwrap(),
        "--out",
        outs,
        "--data",
        datas,
        "--init",
        pretrain_dir.to_str().unwrap(),
    ]));
    let t0_dir = find_ckpt(&out, "target-pretrain-");
    for blob in ["encoder.enc.b1.conv.w.bin", "encoder.enc.b4.gn.g.bin"] {
        let a = std::fs::read(pretrain_dir.join("blobs").join(blob)).unwrap();
        let b = std::fs::read(t0_dir.join("blobs").join(blob)).unwrap();
        assert_eq!(a, b, "blob {blob} changed across a T=0 stage");
    }
    // manifest parent chain records the generic pretrain id
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(t0_dir.join("manifest.json")).unwrap())
            .unwrap();
    let parent = manifest["parent"].as_str().unwrap();
    assert!(parent.starts_with("pretrain-"));

    // finetune from the T=0 checkpoint == finetune from the parent directly
    let ft = |init: &Path, sub: &str| -> Vec<u8> {
        let o = root.join(sub);
        assert_ok(&run(&[
            "finetune",
            "--config",
            cfgs,
            "--out",
            o.to_str().unwrap(),
            "--data",
            datas,
            "--init",
            init.to_str().unwrap(),
        ]));
        let dir = find_ckpt(&o, "finetune-");
        std::fs::read(dir.join("metrics.jsonl")).unwrap()
    };
    let from_t0 = ft(&t0_dir, "ft-a");
    let from_parent = ft(&pretrain_dir, "ft-b");
    assert_eq!(from_t0, from_parent, "T=0 stage changed downstream finetuning");

    // eval: no metrics -> empty report, exit 0
    let ft_dir = find_ckpt(&root.join("ft-a"), "finetune-");
    let res = run(&[
        "eval",
        "--config",
        cfgs,
        "--out",
        outs,
        "--data",
        datas,
        "--ckpt",
        ft_dir.to_str().unwrap(),
    ]);
    assert_ok(&res);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["metrics"].as_object().unwrap().is_empty());

    // eval with metrics matches direct library calls
    let res = run(&[
        "eval",
        "--config",
        cfgs,
        "--out",
        outs,
        "--data",
        datas,
        "--ckpt",
        ft_dir.to_str().unwrap(),
        "--metrics",
        "accuracy,cluster",
    ]);
    assert_ok(&res);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let acc = report["metrics"]["accuracy"].as_f64().unwrap();
    {
        use targetpre::harness::{checkpoint, dataset};
        let ds = dataset::load(&data).unwrap();
        let (_, state) = checkpoint::load_model(&ft_dir, 2, 0).unwrap();
        let logits = targetpre::model::infer_class_logits(&state, &ds.test_images, 64);
        let preds: Vec<usize> = logits
            .outer_iter()
            .map(|r| if r[0] >= r[1] { 0 } else { 1 })
            .collect();
        let direct =
            targetpre::eval::classification_accuracy(&preds, &ds.test_labels).unwrap();
        assert!((acc - direct).abs() < 1e-9);
    }

    // plot from the finetune metrics round-trips
    let metrics = find_ckpt(&root.join("ft-a"), "finetune-").join("metrics.jsonl");
    let prefix = out.join("curves");
    assert_ok(&run(&[
        "plot",
        "--kind",
        "convergence",
        "--prefix",
        prefix.to_str().unwrap(),
        metrics.to_str().unwrap(),
    ]));
    assert!(out.join("curves.csv").exists());
    assert!(out.join("curves.png").exists());
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn transfer_with_one_dataset_equals_the_plain_pipeline() {
    let root = tmp("transfer");
    let cfg = tiny_config(&root);
    let out = root.join("out");
    let outs = out.to_str().unwrap();
    let cfgs = cfg.to_str().unwrap();
    assert_ok(&run(&["gen-data", "--config", cfgs, "--out", outs]));
    let data = out.join("dataset");
    assert_ok(&run(&["pretrain", "--config", cfgs, "--out", outs, "--data", data.to_str().unwrap()]));
    let pretrain_dir = find_ckpt(&out, "pretrain-");

    // transfer over a single dataset config
    let tcfg = root.join("transfer.ini");
    let mut text = std::fs::read_to_string(&cfg).unwrap();
    text.push_str(&format!("run.data = {}\n", data.display()));
    std::fs::write(&tcfg, text).unwrap();
    let res = run(&[
        "transfer",
        "--out",
        outs,
        "--init",
        pretrain_dir.to_str().unwrap(),
        tcfg.to_str().unwrap(),
    ]);
    assert_ok(&res);
    let table = std::fs::read_to_string(out.join("transfer.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2, "1 dataset -> 1x1 matrix: {table}");
    let matrix_acc: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();

    // plain pipeline: target-pretrain then finetune with the same seed
    assert_ok(&run(&[
        "target-pretrain",
        "--config",
        cfgs,
        "--out",
        outs,
        "--data",
        data.to_str().unwrap(),
        "--init",
        pretrain_dir.to_str().unwrap(),
    ]));
    let tp_dir = find_ckpt(&out, "target-pretrain-");
    assert_ok(&run(&[
        "finetune",
        "--config",
        cfgs,
        "--out",
        outs,
        "--data",
        data.to_str().unwrap(),
        "--init",
        tp_dir.to_str().unwrap(),
    ]));
    let ft_dir = find_ckpt(&out, "finetune-");
    let records =
        targetpre::harness::metrics::read_metrics(&ft_dir.join("metrics.jsonl")).unwrap();
    let plain_acc = records.last().unwrap().get("test_accuracy").unwrap();
    assert!(
        (matrix_acc - plain_acc).abs() < 1e-9,
        "transfer {matrix_acc} vs plain {plain_acc}"
    );
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn sweep_rows_cover_snapshots_times_budgets() {
    let root = tmp("sweep");
    let cfg_path = root.join("sweep.ini");
    std::fs::write(
        &cfg_path,
        "dataset.classes = 2\n\
         dataset.train_count = 48\n\
         dataset.test_count = 12\n\
         dataset.seed = 3\n\
         contrastive.epochs = 2\n\
         contrastive.batch_size = 16\n\
         ssl.epochs = 1\n\
         ssl.batch_size = 4\n\
         ssl.unlabeled_ratio = 2\n\
         sweep.snapshots = 0,1,2\n\
         sweep.labels = 4,8\n\
         run.seed = 2\n",
    )
    .unwrap();
    let out = root.join("out");
    assert_ok(&run(&[
        "sweep",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    let table = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    // header + 3 snapshots x 2 budgets
    assert_eq!(table.lines().count(), 7, "{table}");
    // snapshots beyond T are a configuration error
    let bad = root.join("bad.ini");
    std::fs::write(
        &bad,
        std::fs::read_to_string(&cfg_path)
            .unwrap()
            .replace("sweep.snapshots = 0,1,2", "sweep.snapshots = 0,5"),
    )
    .unwrap();
    let res = run(&["sweep", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("error[config]"));
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn error_lines_are_categorized_with_nonzero_exit() {
    let root = tmp("errors");
    // unknown config key
    let bad = root.join("bad.ini");
    std::fs::write(&bad, "no.such.key = 1\n").unwrap();
    let res = run(&["gen-data", "--config", bad.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).starts_with("error[config]:"));

    // missing dataset directory
    let res = run(&[
        "pretrain",
        "--out",
        root.join("out").to_str().unwrap(),
        "--data",
        root.join("nope").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).starts_with("error[io]:"));

    // corrupt checkpoint digest
    let cfg = tiny_config(&root);
    let out = root.join("out2");
    assert_ok(&run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    let data = out.join("dataset");
    assert_ok(&run(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]));
    let ckpt = find_ckpt(&out, "pretrain-");
    let blob = ckpt.join("blobs").join("encoder.enc.b1.conv.w.bin");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&blob, bytes).unwrap();
    let res = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).starts_with("error[corrupt]:"));

    // labeled budget beyond the dataset
    let res = run(&[
        "split",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--labeled",
        "10000",
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).starts_with("error[config]:"));
    std::fs::remove_dir_all(&root).ok();
}

fn find_ckpt(out: &Path, prefix: &str) -> PathBuf {
    std::fs::read_dir(out)
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .find(|p| {
            p.is_dir()
                && p.file_name()
                    .map(|n| n.to_string_lossy().starts_with(prefix))
                    .unwrap_or(false)
                && p.join("manifest.json").exists()
        })
        .unwrap_or_else(|| panic!("no {prefix} checkpoint under {}", out.display()))
}
