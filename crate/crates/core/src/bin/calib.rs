// temporary calibration harness (not part of the deliverable)
use std::time::Instant;
use targetpre::contrastive::{ContrastiveConfig, ContrastiveMode, ContrastiveObjective};
use targetpre::harness::dataset::{self, Appearance, DatasetKind, DatasetSpec};
use targetpre::harness::pipeline::{finetune_in_memory, target_pretrain_in_memory, final_test_metric};
use targetpre::model::ModelState;
use targetpre::ssl::{Learner, SslConfig};
use targetpre::stream::subseed;

fn broad() -> Appearance { Appearance::default() }

fn warm_dark() -> Appearance {
    Appearance {
        fg_hue: (0.0, 60.0), fg_sat: (0.7, 1.0), fg_val: (0.7, 1.0),
        bg_hue: (200.0, 260.0), bg_sat: (0.2, 0.5), bg_val: (0.1, 0.35),
        noise: 0.08, scale: (0.4, 0.7),
    }
}

fn warm_dark_narrow() -> Appearance {
    Appearance {
        fg_hue: (20.0, 45.0), fg_sat: (0.85, 1.0), fg_val: (0.8, 0.95),
        bg_hue: (215.0, 245.0), bg_sat: (0.3, 0.45), bg_val: (0.12, 0.3),
        noise: 0.04, scale: (0.4, 0.7),
    }
}

fn cool_bright() -> Appearance {
    Appearance {
        fg_hue: (180.0, 260.0), fg_sat: (0.7, 1.0), fg_val: (0.3, 0.7),
        bg_hue: (20.0, 60.0), bg_sat: (0.1, 0.4), bg_val: (0.75, 0.98),
        noise: 0.08, scale: (0.4, 0.7),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("time");

    let gen_spec = DatasetSpec {
        kind: DatasetKind::ShapesClassification,
        classes: 8, train_count: 2000, test_count: 100, seed: 100,
        appearance: broad(), ..Default::default()
    };
    let a_spec = DatasetSpec {
        classes: 4, train_count: 2000, test_count: 500, seed: 7,
        appearance: warm_dark(), ..Default::default()
    };

    let tp_cfg = |epochs: usize, lr: f32| ContrastiveConfig {
        objective: ContrastiveObjective::Byol,
        mode: ContrastiveMode::Global,
        epochs, batch_size: 64, learning_rate: lr,
        ema_momentum: 0.99, anchor_weight: 1e-2,
        ..Default::default()
    };
    let fm_cfg = |epochs: usize, lr: f32| SslConfig {
        learner: Learner::FixMatch,
        batch_size: 8, unlabeled_ratio: 7, epochs, learning_rate: lr,
        ..Default::default()
    };

    match mode {
        "time" => {
            let t0 = Instant::now();
            let gen_ds = dataset::generate(&gen_spec).unwrap();
            println!("gen-data 2000 imgs: {:.1}s", t0.elapsed().as_secs_f64());
            // one epoch of generic BYOL
            let init = ModelState::init(8, 1);
            let t0 = Instant::now();
            let (_s, _snap, recs) = target_pretrain_in_memory(
                &gen_ds.train_images, init, false, &tp_cfg(1, 0.06), 1, &[]).unwrap();
            println!("BYOL epoch (2000 imgs, B=64): {:.1}s  loss={:.4}", t0.elapsed().as_secs_f64(), recs[0].get("total_loss").unwrap());
            // one epoch of fixmatch
            let a = dataset::generate(&a_spec).unwrap();
            let split = dataset::split_dataset(&a, 16, 1).unwrap();
            let t0 = Instant::now();
            let (_st, recs) = finetune_in_memory(&a, &split, None, &fm_cfg(1, 0.03), 1).unwrap();
            println!("FixMatch epoch (2000 unl, B=8 mu=7): {:.1}s acc={:.3}", t0.elapsed().as_secs_f64(), final_test_metric(&recs, "test_accuracy").unwrap());
        }
        "arms" => {
            let gen_epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(15);
            let tp_epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(15);
            let ft_epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(10);
            let gen_lr: f32 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.06);
            let tp_lr: f32 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.05);
            let ft_lr: f32 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.03);
            let seed: u64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(0);
            eprintln!("gen {gen_epochs}ep/{gen_lr}  tp {tp_epochs}ep/{tp_lr}  ft {ft_epochs}ep/{ft_lr} seed {seed}");

            let t_all = Instant::now();
            let gen_ds = dataset::generate(&gen_spec).unwrap();
            let a = dataset::generate(&a_spec).unwrap();
            let split16 = dataset::split_dataset(&a, 16, 1).unwrap();

            // generic pretrain (shared)
            let t0 = Instant::now();
            let init = ModelState::init(8, 424242);
            let (gen_state, _, _) = target_pretrain_in_memory(
                &gen_ds.train_images, init, false, &tp_cfg(gen_epochs, gen_lr), 4242, &[]).unwrap();
            eprintln!("generic pretrain: {:.0}s", t0.elapsed().as_secs_f64());

            // arm 1: random -> fixmatch
            let t0 = Instant::now();
            let (_, recs) = finetune_in_memory(&a, &split16, None, &fm_cfg(ft_epochs, ft_lr), subseed(seed, "rand-ft")).unwrap();
            let acc_rand = final_test_metric(&recs, "test_accuracy").unwrap();
            eprintln!("rand->FM: {:.3} ({:.0}s)", acc_rand, t0.elapsed().as_secs_f64());

            // arm 2: generic -> fixmatch
            let t0 = Instant::now();
            let (_, recs) = finetune_in_memory(&a, &split16, Some(&gen_state.encoder), &fm_cfg(ft_epochs, ft_lr), subseed(seed, "gen-ft")).unwrap();
            let acc_gen = final_test_metric(&recs, "test_accuracy").unwrap();
            eprintln!("gen->FM: {:.3} ({:.0}s)", acc_gen, t0.elapsed().as_secs_f64());

            // arm 3: generic -> target pretrain -> fixmatch
            let t0 = Instant::now();
            let mut init = ModelState::init(4, subseed(seed, "tp-init"));
            init.encoder = gen_state.encoder.clone();
            init.sync_target();
            let (tp_state, _, _) = target_pretrain_in_memory(
                &a.train_images, init, true, &tp_cfg(tp_epochs, tp_lr), subseed(seed, "tp"), &[]).unwrap();
            eprintln!("target pretrain: {:.0}s", t0.elapsed().as_secs_f64());
            let t0 = Instant::now();
            let (_, recs) = finetune_in_memory(&a, &split16, Some(&tp_state.encoder), &fm_cfg(ft_epochs, ft_lr), subseed(seed, "tgt-ft")).unwrap();
            let acc_tgt = final_test_metric(&recs, "test_accuracy").unwrap();
            eprintln!("gen->TP->FM: {:.3} ({:.0}s)", acc_tgt, t0.elapsed().as_secs_f64());

            // cluster accuracy of embeddings
            let emb_gen = targetpre::model::infer_embeddings(&gen_state, &a.test_images, 512);
            let emb_tgt = targetpre::model::infer_embeddings(&tp_state, &a.test_images, 512);
            let ca_gen = targetpre::eval::cluster_accuracy(&targetpre::eval::kmeans_cluster(&emb_gen, 4, 3).unwrap(), &a.test_labels).unwrap();
            let ca_tgt = targetpre::eval::cluster_accuracy(&targetpre::eval::kmeans_cluster(&emb_tgt, 4, 3).unwrap(), &a.test_labels).unwrap();
            eprintln!("cluster acc: gen {:.3} tgt {:.3}", ca_gen, ca_tgt);

            // B distribution check (criterion 12)
            let b_spec = DatasetSpec { classes: 4, train_count: 2000, test_count: 200, seed: 11, appearance: cool_bright(), ..Default::default() };
            let b = dataset::generate(&b_spec).unwrap();
            let t0 = Instant::now();
            let mut initb = ModelState::init(4, subseed(seed, "tpb-init"));
            initb.encoder = gen_state.encoder.clone();
            initb.sync_target();
            let (tpb_state, _, _) = target_pretrain_in_memory(
                &b.train_images, initb, true, &tp_cfg(tp_epochs, tp_lr), subseed(seed, "tpb"), &[]).unwrap();
            let (_, recs) = finetune_in_memory(&a, &split16, Some(&tpb_state.encoder), &fm_cfg(ft_epochs, ft_lr), subseed(seed, "tgtb-ft")).unwrap();
            let acc_cross = final_test_metric(&recs, "test_accuracy").unwrap();
            eprintln!("gen->TP(B)->FM(A): {:.3} ({:.0}s)", acc_cross, t0.elapsed().as_secs_f64());

            // 256-label budget (criterion 11)
            let split256 = dataset::split_dataset(&a, 256, 1).unwrap();
            let (_, recs) = finetune_in_memory(&a, &split256, Some(&gen_state.encoder), &fm_cfg(ft_epochs, ft_lr), subseed(seed, "gen-ft256")).unwrap();
            let acc_gen256 = final_test_metric(&recs, "test_accuracy").unwrap();
            let (_, recs) = finetune_in_memory(&a, &split256, Some(&tp_state.encoder), &fm_cfg(ft_epochs, ft_lr), subseed(seed, "tgt-ft256")).unwrap();
            let acc_tgt256 = final_test_metric(&recs, "test_accuracy").unwrap();
            eprintln!("256 labels: gen {:.3} tgt {:.3} (gain {:.3} vs gain16 {:.3})", acc_gen256, acc_tgt256, acc_tgt256-acc_gen256, acc_tgt-acc_gen);
            eprintln!("TOTAL {:.0}s", t_all.elapsed().as_secs_f64());
            println!("SUMMARY rand={acc_rand:.3} gen={acc_gen:.3} tgt={acc_tgt:.3} cross={acc_cross:.3} ca_gen={ca_gen:.3} ca_tgt={ca_tgt:.3} gain16={:.3} gain256={:.3}", acc_tgt-acc_gen, acc_tgt256-acc_gen256);
        }
        "probe" => probe(&args[2..]),
        "ft" => ft_diag(&args[2..]),
        _ => eprintln!("unknown mode"),
    }
}

// train a logistic head on frozen embeddings; returns test accuracy
pub fn linear_probe(
    train_emb: &ndarray::Array2<f32>, train_labels: &[usize],
    test_emb: &ndarray::Array2<f32>, test_labels: &[usize], k: usize,
) -> f64 {
    use targetpre::tensor::Tape;
    let d = train_emb.ncols();
    let mut w = ndarray::ArrayD::<f32>::zeros(ndarray::IxDyn(&[k, d]));
    let mut b = ndarray::ArrayD::<f32>::zeros(ndarray::IxDyn(&[k]));
    let n = train_emb.nrows();
    let (mut vw, mut vb) = (w.clone(), b.clone());
    for _ in 0..300 {
        let mut t = Tape::<f32>::new();
        let x = t.input(train_emb.clone().into_dyn());
        let wv = t.input(w.clone());
        let bv = t.input(b.clone());
        let logits = t.linear(x, wv, bv);
        let loss = t.softmax_ce(logits, train_labels.to_vec(), None, n as f32);
        let mut g = t.backward(loss);
        let gw = g.take(wv).unwrap();
        let gb = g.take(bv).unwrap();
        vw.zip_mut_with(&gw, |v, &gr| *v = 0.9 * *v + gr);
        vb.zip_mut_with(&gb, |v, &gr| *v = 0.9 * *v + gr);
        w.zip_mut_with(&vw, |p, &v| *p -= 0.5 * v);
        b.zip_mut_with(&vb, |p, &v| *p -= 0.5 * v);
    }
    let w2 = w.into_dimensionality::<ndarray::Ix2>().unwrap();
    let preds: Vec<usize> = test_emb.outer_iter().map(|r| {
        let scores: Vec<f32> = (0..k).map(|c| {
            r.dot(&w2.row(c)) + b[[c]]
        }).collect();
        let mut best = 0; for c in 1..k { if scores[c] > scores[best] { best = c; } }
        best
    }).collect();
    targetpre::eval::classification_accuracy(&preds, test_labels).unwrap()
}

// representation probe: track embedding quality during pretraining
pub fn probe(args: &[String]) {
    use targetpre::eval::{cluster_accuracy, kmeans_cluster};
    use targetpre::model::infer_embeddings;

    let affine_on = args.first().map(|s| s == "affine" || s == "crop").unwrap_or(false);
    let crop_style = args.first().map(|s| s == "crop").unwrap_or(false);
    let objective = if args.get(1).map(|s| s == "nce").unwrap_or(false) {
        ContrastiveObjective::InfoNce
    } else {
        ContrastiveObjective::Byol
    };
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let lr: f32 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let ema: f32 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.99);
    eprintln!("probe affine={affine_on} obj={objective:?} epochs={epochs} lr={lr} ema={ema}");

    let narrow = args.get(5).map(|s| s == "narrow").unwrap_or(false);
    let a_spec = DatasetSpec {
        classes: 4, train_count: 2000, test_count: 400, seed: 7,
        appearance: if narrow { warm_dark_narrow() } else { warm_dark() }, ..Default::default()
    };
    let a = dataset::generate(&a_spec).unwrap();
    let cfg = ContrastiveConfig {
        objective,
        mode: ContrastiveMode::Global,
        epochs, batch_size: 64, learning_rate: lr,
        ema_momentum: ema, anchor_weight: 0.0,
        affine: affine_on.then(|| {
            if crop_style {
                targetpre::augment::AffinePolicy {
                    scale: (1.0, 2.4),
                    translation: (-0.25, 0.25),
                    ..Default::default()
                }
            } else {
                targetpre::augment::AffinePolicy::default()
            }
        }),
        ..Default::default()
    };
    let t0 = Instant::now();
    let init = ModelState::init(4, 55);
    let mut last = None;
    let _final = targetpre::contrastive::run_target_pretrain(
        &a.train_images, init, None, &cfg, 99,
        |epoch, st, rec| {
            if epoch % 10 == 0 || epoch == 1 {
                let emb = infer_embeddings(st, &a.test_images, 512);
                let tremb = infer_embeddings(st, &a.train_images, 512);
                let ca = cluster_accuracy(&kmeans_cluster(&emb, 4, 3).unwrap(), &a.test_labels).unwrap();
                let split16 = dataset::split_dataset(&a, 16, 1).unwrap();
                let emb16 = ndarray::Array2::from_shape_fn((16, tremb.ncols()), |(i, j)| tremb[[split16.labeled_indices[i], j]]);
                let lab16: Vec<usize> = split16.labeled_indices.iter().map(|&i| a.train_labels[i]).collect();
                let probe16 = linear_probe(&emb16, &lab16, &emb, &a.test_labels, 4);
                let probe_full = linear_probe(&tremb, &a.train_labels, &emb, &a.test_labels, 4);
                eprintln!("epoch {epoch}: loss={:.4} cluster={ca:.3} probe16={probe16:.3} probeFull={probe_full:.3} ({:.0}s)", rec.get("total_loss").unwrap(), t0.elapsed().as_secs_f64());
                last = Some(ca);
            }
            Ok(())
        },
    ).unwrap();
    println!("PROBE_RESULT cluster_acc={:.3}", last.unwrap_or(0.0));
}


// finetune trajectory diagnostic
pub fn ft_diag(args: &[String]) {
    let gen_epochs: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(20);
    let ft_epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let ft_lr: f32 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let n_labeled: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(16);
    let use_target: bool = args.get(4).map(|s| s == "target").unwrap_or(false);

    let gen_spec = DatasetSpec {
        kind: DatasetKind::ShapesClassification,
        classes: 8, train_count: 2000, test_count: 100, seed: 100,
        appearance: broad(), ..Default::default()
    };
    let a_spec = DatasetSpec {
        classes: 4, train_count: 2000, test_count: 500, seed: 7,
        appearance: warm_dark(), ..Default::default()
    };
    let tp = |epochs: usize, lr: f32, affine: bool| ContrastiveConfig {
        objective: ContrastiveObjective::Byol,
        mode: ContrastiveMode::Global,
        epochs, batch_size: 64, learning_rate: lr,
        ema_momentum: 0.99, anchor_weight: 1e-2,
        affine: affine.then(targetpre::augment::AffinePolicy::default),
        ..Default::default()
    };
    let gen_ds = dataset::generate(&gen_spec).unwrap();
    let a = dataset::generate(&a_spec).unwrap();
    let split = dataset::split_dataset(&a, n_labeled, 1).unwrap();
    let t0 = Instant::now();
    let init = ModelState::init(8, 424242);
    let (gen_state, _, _) = target_pretrain_in_memory(
        &gen_ds.train_images, init, false, &tp(gen_epochs, 0.05, true), 4242, &[]).unwrap();
    eprintln!("generic pretrain done ({:.0}s)", t0.elapsed().as_secs_f64());
    let enc = if use_target {
        let mut init = ModelState::init(4, 1111);
        init.encoder = gen_state.encoder.clone();
        init.sync_target();
        let (st, _, _) = target_pretrain_in_memory(&a.train_images, init, true, &tp(15, 0.05, true), 2222, &[]).unwrap();
        eprintln!("target pretrain done ({:.0}s)", t0.elapsed().as_secs_f64());
        st.encoder
    } else {
        gen_state.encoder.clone()
    };
    let cfg = SslConfig {
        learner: Learner::FixMatch,
        batch_size: 8, unlabeled_ratio: 7, epochs: ft_epochs, learning_rate: ft_lr,
        ..Default::default()
    };
    let task = targetpre::ssl::Task::Classification;
    let mut model = ModelState::init(4, subseed(0, "finetune-init"));
    model.encoder = enc;
    let state = targetpre::ssl::FinetuneState::new(model, task, &cfg);
    let (lab_images, lab_targets) = dataset::labeled_subset(&a, &split);
    let pool = targetpre::ssl::UnlabeledPool::new(&a.train_images);
    let tgt = dataset::test_targets(&a);
    targetpre::ssl::run_finetune(
        &lab_images, &lab_targets, &pool, &a.test_images, &tgt, state, &cfg, subseed(0, "finetune"),
        |e, _, rec| {
            eprintln!("ft epoch {e}: sup={:.3} unsup={:.4} mask={:.3} acc={:.3}",
                rec.get("sup_loss").unwrap(), rec.get("unsup_loss").unwrap(),
                rec.get("mask_rate").unwrap(), rec.get("test_accuracy").unwrap());
            Ok(())
        },
    ).unwrap();
}
