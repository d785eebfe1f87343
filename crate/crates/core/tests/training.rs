use adrec::autodiff::{Graph, Tensor};
use adrec::data::{make_batches, InteractionDataset, Split};
use adrec::diffusion::sample_train_grid;
use adrec::eval::Scorer;
use adrec::model::{AdRec, LossMode, LossScale, ModelConfig};
use adrec::nn::ParamStore;
use adrec::train::*;
use adrec::{derive_seed, Error, SeededRng};
use rand::{Rng, SeedableRng};

fn micro_cfg(dim: usize, max_len: usize, steps: usize) -> ModelConfig {
    ModelConfig {
        dim,
        ffn_dim: 2 * dim,
        max_len,
        diffusion_steps: steps,
        ..ModelConfig::default()
    }
}

/// Users walk a noisy cycle over the catalog so there is something to learn.
fn toy(users: usize, items: usize, len: usize, max_len: usize, seed: u64) -> InteractionDataset {
    let mut r = SeededRng::seed_from_u64(seed);
    let sequences = (0..users)
        .map(|_| {
            let mut cur = r.random_range(1..=items as u32);
            (0..len)
                .map(|_| {
                    let v = cur;
                    cur = if r.random_bool(0.9) { cur % items as u32 + 1 } else { r.random_range(1..=items as u32) };
                    v
                })
                .collect()
        })
        .collect();
    let split = (0..users)
        .map(|u| match u % 10 {
            8 => Split::Val,
            9 => Split::Test,
            _ => Split::Train,
        })
        .collect();
    InteractionDataset {
        items: (1..=items).map(|i| format!("i{i}")).collect(),
        users: (0..users).map(|u| format!("u{u}")).collect(),
        sequences,
        split,
        max_len,
    }
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        lr: 5e-3,
        batch_size: 16,
        micro_batch: 8,
        stage1_epochs: 4,
        stage2_epochs: 2,
        stage3_epochs: 4,
        validate_every: 2,
        patience: 2,
        ..TrainConfig::default()
    }
}

fn embedding_bits(store: &ParamStore) -> Vec<u64> {
    store.get(store.find("embedding").unwrap()).data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn repeated_sequence_overfits() {
    let mut ds = toy(1, 12, 8, 8, 1);
    ds.sequences = vec![ds.sequences[0].clone(); 8];
    ds.users = (0..8).map(|u| u.to_string()).collect();
    ds.split = vec![Split::Train; 8];
    let (model, mut store) = AdRec::new(&micro_cfg(16, 8, 4), 12, 3).unwrap();
    let batch = make_batches(&ds, Split::Train, 8, None).0.remove(0);
    let trainable = vec![true; store.len()];
    let opts = StepOptions {
        micro_batch: 8,
        pcgrad: false,
        dropout: false,
    };
    let mut adam = Adam::new(&store, AdamConfig::default());
    let mut prev = f64::INFINITY;
    for step in 0..50 {
        let out = compute_gradients(&model, &store, &batch, &model.schedule(), Objective::CamCe, &trainable, opts, 0).unwrap();
        assert_eq!(out.loss.mse, 0.0);
        assert!(out.loss.ce < prev, "step {step}: {} >= {prev}", out.loss.ce);
        prev = out.loss.ce;
        adam.update(&mut store, &out.grads, 1e-3).unwrap();
    }
}

#[test]
fn micro_batches_match_single_pass() {
    let ds = toy(12, 9, 7, 6, 2);
    let (model, store) = AdRec::new(&micro_cfg(8, 6, 4), 9, 5).unwrap();
    let batch = make_batches(&ds, Split::Train, 64, None).0.remove(0);
    let trainable = vec![true; store.len()];
    let opts = |micro| StepOptions {
        micro_batch: micro,
        pcgrad: false,
        dropout: false,
    };
    let whole = compute_gradients(&model, &store, &batch, &model.schedule(), Objective::CamCe, &trainable, opts(100), 1).unwrap();
    let parts = compute_gradients(&model, &store, &batch, &model.schedule(), Objective::CamCe, &trainable, opts(3), 1).unwrap();
    assert!((whole.loss.ce - parts.loss.ce).abs() < 1e-10);
    for (a, b) in whole.grads.iter().zip(&parts.grads) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }
}

/// Reference: one graph, one backward pass of ce + mse with the same noise.
fn reference_grads(model: &AdRec, store: &ParamStore, batch: &adrec::data::SequenceBatch, seed: u64) -> Vec<Vec<f64>> {
    let schedule = model.schedule();
    let mut rng = SeededRng::seed_from_u64(derive_seed(seed, &[0]));
    let grid = sample_train_grid(&batch.valid, schedule.steps, &mut rng);
    let eps = Tensor::randn(&[batch.size(), batch.len, model.cfg.dim], 1.0, &mut rng);
    let scale = LossScale::mean_over(batch.valid_tokens(), model.cfg.dim).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| true);
    let (_, lv) = model
        .diffusion_forward_with(&mut g, &p, batch, &schedule, &grid, eps, scale, LossMode::Joint, None)
        .unwrap();
    let ce = lv.ce;
    let mse = lv.mse.unwrap();
    let total = g.add(ce, mse).unwrap();
    g.backward(total).unwrap();
    p.grads(&g, store)
}

#[test]
fn applied_gradient_is_joint_gradient_without_pcgrad() {
    let ds = toy(10, 7, 5, 4, 4);
    let (model, store) = AdRec::new(&micro_cfg(8, 4, 4), 7, 6).unwrap();
    let batch = make_batches(&ds, Split::Train, 64, None).0.remove(0);
    let trainable = vec![true; store.len()];
    let opts = StepOptions {
        micro_batch: 1000,
        pcgrad: false,
        dropout: false,
    };
    let out = compute_gradients(&model, &store, &batch, &model.schedule(), Objective::Diffusion(LossMode::Joint), &trainable, opts, 9).unwrap();
    let want = reference_grads(&model, &store, &batch, 9);
    for (a, b) in out.grads.iter().zip(&want) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }
}

#[test]
fn pcgrad_flag_routes_through_projection() {
    let ds = toy(10, 7, 5, 4, 4);
    let (model, store) = AdRec::new(&micro_cfg(8, 4, 4), 7, 6).unwrap();
    let batch = make_batches(&ds, Split::Train, 64, None).0.remove(0);
    let trainable = vec![true; store.len()];
    let run = |pcgrad| {
        let opts = StepOptions {
            micro_batch: 1000,
            pcgrad,
            dropout: false,
        };
        compute_gradients(&model, &store, &batch, &model.schedule(), Objective::Diffusion(LossMode::Joint), &trainable, opts, 9).unwrap()
    };
    let plain = run(false);
    let proj = run(true);
    assert_eq!(plain.loss, proj.loss);
    let flat = |g: &[Vec<f64>]| g.iter().flatten().copied().collect::<Vec<_>>();
    let (a, b) = (flat(&plain.grads), flat(&proj.grads));
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    if proj.conflict {
        assert!(diff > 0.0);
    } else {
        assert!(diff < 1e-10);
    }
}

#[test]
fn stage1_learns_on_toy_users() {
    let ds = toy(50, 20, 12, 10, 7);
    let cfg = micro_cfg(16, 10, 4);
    let (model, store) = AdRec::new(&cfg, 20, 1).unwrap();
    let train = TrainConfig {
        stage1_epochs: 30,
        validate_every: 10,
        patience: 10,
        ..quick_train()
    };
    let out = run_stage(&StagePlan::new(Stage::Pretrain, &train), &train, &model, store, &ds, 3).unwrap();
    assert_eq!(out.epochs_run, 30);
    let ce = |e: usize| out.log.epochs.iter().find(|r| r.epoch == e).unwrap().ce;
    assert!(ce(30) < ce(1), "{} vs {}", ce(30), ce(1));
    assert_eq!(out.log.validations.len(), 3);
}

#[test]
fn warmup_runs_five_epochs_with_frozen_embedding() {
    let ds = toy(30, 25, 10, 8, 8);
    let (model, store) = AdRec::new(&micro_cfg(8, 8, 4), 25, 2).unwrap();
    let train = TrainConfig {
        stage2_epochs: 5,
        validate_every: 5,
        patience: 4,
        ..quick_train()
    };
    let before = embedding_bits(&store);
    let plan = StagePlan::new(Stage::Warmup, &train);
    let out = run_stage(&plan, &train, &model, store.clone(), &ds, 4).unwrap();
    assert_eq!(out.epochs_run, 5);
    assert!(!out.stopped_early);
    assert_eq!(out.best_epoch, 5);
    assert_eq!(embedding_bits(&out.store), before);
    let changed = store.iter().zip(out.store.iter()).filter(|(a, b)| a.value != b.value).count();
    assert_eq!(changed, store.len() - 1);
}

#[test]
fn toy_world_predicts_next_in_chain() {
    // items a=1, b=2, c=3 plus distractors; every user walks a→b→c
    let users = 24;
    let ds = InteractionDataset {
        items: (1..=6).map(|i| i.to_string()).collect(),
        users: (0..users).map(|u| u.to_string()).collect(),
        sequences: vec![vec![1, 2, 3]; users],
        split: vec![Split::Train; users],
        max_len: 2,
    };
    let cfg = micro_cfg(16, 2, 4);
    let (model, mut store) = AdRec::new(&cfg, 6, 11).unwrap();
    let trainable = vec![true; store.len()];
    let schedule = model.schedule();
    let batch = make_batches(&ds, Split::Train, 64, None).0.remove(0);
    let opts = StepOptions {
        micro_batch: 64,
        pcgrad: false,
        dropout: false,
    };
    let mut adam = Adam::new(&store, AdamConfig::default());
    for step in 0..300 {
        let out = compute_gradients(&model, &store, &batch, &schedule, Objective::Diffusion(LossMode::Joint), &trainable, opts, step).unwrap();
        adam.update(&mut store, &out.grads, 5e-3).unwrap();
    }
    let query = batch.rows(0..1);
    let hits = (0..100u64)
        .filter(|&s| {
            let scores = model.infer_scores(&store, &query, &schedule, &[s], 1).unwrap();
            adrec::model::rank_items(&scores[0], 1).unwrap()[0] == 3
        })
        .count();
    assert!(hits >= 95, "{hits}/100");
}

fn spec(dir: &std::path::Path, model: ModelConfig, train: TrainConfig) -> RunSpec {
    RunSpec {
        model,
        train,
        seed: 17,
        out_dir: dir.to_path_buf(),
        dataset_hash: "toy".into(),
        force: false,
        stages: Stage::ALL.to_vec(),
    }
}

#[test]
fn pipeline_resumes_and_guards_fingerprints() {
    let ds = toy(30, 25, 9, 6, 5);
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_cfg(8, 6, 4);
    let s = spec(dir.path(), cfg.clone(), quick_train());
    let first = run_pipeline(&s, &ds).unwrap();
    let status = |m: &RunManifest| m.stages.iter().map(|r| r.status).collect::<Vec<_>>();
    assert_eq!(status(&first.manifest), vec![StageStatus::Trained; 3]);
    for f in ["init.ckpt", "stage1-best.ckpt", "stage2-best.ckpt", "stage3-best.ckpt", "train_log.csv", "val_log.csv", "run.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let logged = TrainLog::read(&dir.path().join("train_log.csv"), &dir.path().join("val_log.csv")).unwrap();
    assert_eq!(logged.epochs.len(), first.log.epochs.len());
    assert_eq!(RunManifest::read(dir.path()).unwrap(), first.manifest);

    let again = run_pipeline(&s, &ds).unwrap();
    assert_eq!(status(&again.manifest), vec![StageStatus::Resumed; 3]);
    assert_eq!(again.store, first.store);
    assert_eq!(again.log.epochs.len(), first.log.epochs.len());

    // a different T leaves the pre-trained stage reusable
    let t8 = ModelConfig { diffusion_steps: 8, ..cfg.clone() };
    let changed = spec(dir.path(), t8.clone(), quick_train());
    assert!(matches!(run_pipeline(&changed, &ds), Err(Error::Orchestration(_))));
    let forced = RunSpec { force: true, ..changed };
    let out = run_pipeline(&forced, &ds).unwrap();
    assert_eq!(
        status(&out.manifest),
        vec![StageStatus::Resumed, StageStatus::Trained, StageStatus::Trained]
    );
}

#[test]
fn ablation_paths() {
    let ds = toy(30, 25, 9, 6, 5);
    let cfg = micro_cfg(8, 6, 4);
    let dir = tempfile::tempdir().unwrap();
    let scratch = TrainConfig { pretrain: false, ..quick_train() };
    let out = run_pipeline(&spec(dir.path(), cfg.clone(), scratch), &ds).unwrap();
    let st: Vec<_> = out.manifest.stages.iter().map(|r| r.status).collect();
    assert_eq!(st, vec![StageStatus::Skipped, StageStatus::Skipped, StageStatus::Trained]);
    assert!(!dir.path().join("stage1-best.ckpt").exists());

    let dir = tempfile::tempdir().unwrap();
    let nowarm = TrainConfig { warmup: false, loss: LossMode::CeOnly, ..quick_train() };
    let out = run_pipeline(&spec(dir.path(), cfg, nowarm), &ds).unwrap();
    let st: Vec<_> = out.manifest.stages.iter().map(|r| r.status).collect();
    assert_eq!(st, vec![StageStatus::Trained, StageStatus::Skipped, StageStatus::Trained]);
    assert!(out.log.epochs.iter().filter(|r| r.stage == 3).all(|r| r.mse == 0.0));
}

#[test]
fn single_stage_needs_its_prerequisite() {
    let ds = toy(30, 25, 9, 6, 5);
    let dir = tempfile::tempdir().unwrap();
    let s = RunSpec {
        stages: vec![Stage::Warmup],
        ..spec(dir.path(), micro_cfg(8, 6, 4), quick_train())
    };
    assert!(matches!(run_pipeline(&s, &ds), Err(Error::Orchestration(_))));
    let first = RunSpec { stages: vec![Stage::Pretrain], ..s.clone() };
    run_pipeline(&first, &ds).unwrap();
    let out = run_pipeline(&s, &ds).unwrap();
    assert_eq!(out.manifest.stage(Stage::Warmup).unwrap().status, StageStatus::Trained);
    assert_eq!(out.manifest.stage(Stage::Finetune).unwrap().status, StageStatus::NotRun);
}

#[test]
fn validation_uses_cam_then_diffusion() {
    let cfg = TrainConfig::default();
    assert_eq!(StagePlan::new(Stage::Pretrain, &cfg).scorer, Scorer::Cam);
    assert_eq!(StagePlan::new(Stage::Finetune, &cfg).scorer, Scorer::Diffusion { repeats: 1 });
}
