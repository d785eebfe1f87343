use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use adrec::checkpoint::{load_model, CheckpointManifest};
use adrec::config::RunConfig;
use adrec::data::{prepare_into, Split};
use adrec::diagnostics::{comparison_table, diagnose, item_embeddings, linear_probe, read_genre_labels, export_embeddings, normalize_rows};
use adrec::diffusion::build_schedule;
use adrec::eval::{eval_split, Scorer};
use adrec::model::LossMode;
use adrec::train::{run_pipeline, Stage};
use adrec::{Error, Result};

use crate::{Command, Common, DiagnoseArgs, EvalArgs, ExportArgs, LossArg, PrepareArgs, ProbeArgs, ScheduleArgs, ScorerArg, TrainArgs};

pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.set(o)?;
    }
    Ok(cfg)
}

fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Diagnose(a) => match a.sub {
            Some(crate::DiagnoseSub::Schedule(s)) => schedule(s),
            None => diagnose_cmd(a),
        },
        Command::Probe(a) => probe(a),
        Command::Export(a) => export(a),
        Command::Config(a) => {
            print!("{}", load_config(&a.common)?.to_json());
            Ok(())
        }
    }
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(r) = a.raw {
        cfg.data.raw = r;
    }
    if let Some(o) = a.out {
        cfg.data.dir = o;
    }
    let (_, manifest) = prepare_into(&cfg.data, &cfg.data.dir, cfg.model.max_len, cfg.seed, a.force)?;
    println!("{}", manifest.stats);
    let c = &manifest.split_counts;
    println!(
        "Split         {} train / {} val / {} test",
        c.get("train").unwrap_or(&0),
        c.get("val").unwrap_or(&0),
        c.get("test").unwrap_or(&0)
    );
    println!("Dataset hash  {}", adrec::data::dataset_hash(&cfg.data.dir)?);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(o) = a.out {
        cfg.out_dir = o;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.no_pretrain {
        cfg.train.pretrain = false;
    }
    if a.no_warmup {
        cfg.train.warmup = false;
    }
    if a.pcgrad {
        cfg.train.pcgrad = true;
    }
    match a.loss {
        Some(LossArg::CeOnly) => cfg.train.loss = LossMode::CeOnly,
        Some(LossArg::Joint) => cfg.train.loss = LossMode::Joint,
        None => {}
    }
    cfg.validate()?;
    let stages = a
        .stages
        .iter()
        .map(|&n| Stage::from_number(n).ok_or_else(|| Error::Config(format!("no stage {n}"))))
        .collect::<Result<Vec<_>>>()?;
    let (ds, _, hash) = cfg.load_dataset()?;
    let spec = adrec::train::RunSpec {
        stages,
        ..cfg.run_spec(&hash, a.force)
    };
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(format!("creating {}", cfg.out_dir.display()), e))?;
    std::fs::write(cfg.out_dir.join("config.json"), cfg.to_json())
        .map_err(|e| Error::io(format!("writing {}", cfg.out_dir.display()), e))?;
    let out = run_pipeline(&spec, &ds)?;
    for r in &out.manifest.stages {
        let metric = r.best_metric.map_or("-".to_string(), |m| format!("{:.4}", m));
        println!("stage {}  {:?}  best val {metric}  epoch {}", r.stage, r.status, r.best_epoch.map_or("-".into(), |e| e.to_string()));
    }
    if let Some(f) = &out.manifest.final_checkpoint {
        println!("final checkpoint {}", cfg.out_dir.join(f).display());
    }
    Ok(())
}

fn default_scorer(m: &CheckpointManifest, repeats: usize) -> Scorer {
    if m.stage == "stage1" {
        Scorer::Cam
    } else {
        Scorer::Diffusion { repeats }
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let split: Split = a.split.parse()?;
    let (ds, _, _) = cfg.load_dataset()?;
    let (model, store, manifest) = load_model(&a.checkpoint)?;
    let repeats = a.repeats.unwrap_or(cfg.eval.repeats);
    let scorer = match a.scorer {
        Some(ScorerArg::Cam) => Scorer::Cam,
        Some(ScorerArg::Diffusion) => Scorer::Diffusion { repeats },
        None => default_scorer(&manifest, repeats),
    };
    let ks = a.k.unwrap_or_else(|| cfg.eval.ks.clone());
    let report = eval_split(&model, &store, &ds, split, &ks, a.seed.unwrap_or(cfg.seed), scorer)?;
    println!("{}", report.summary());
    let path = a
        .report
        .unwrap_or_else(|| PathBuf::from(format!("{}.{}.json", a.checkpoint.display(), a.split)));
    report.write_json(&path)?;
    if let Some(p) = a.per_user {
        report.write_per_user_csv(&p, &ds)?;
    }
    Ok(())
}

fn tag(path: &Path, m: &CheckpointManifest) -> String {
    format!("{} ({})", m.stage, path.display())
}

fn diagnose_cmd(a: DiagnoseArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    if a.checkpoints.is_empty() {
        return Err(Error::Config("diagnose needs at least one --checkpoint".into()));
    }
    let normalize = a.normalize || cfg.normalize_export;
    let mut reports = Vec::new();
    for p in &a.checkpoints {
        let (_, store, m) = load_model(p)?;
        reports.push(diagnose(&tag(p, &m), &item_embeddings(&store)?, normalize)?);
    }
    print!("{}", comparison_table(&reports));
    if let Some(p) = a.report {
        write_json(&p, &reports)?;
    }
    Ok(())
}

fn schedule(a: ScheduleArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let s = build_schedule(a.steps.unwrap_or(cfg.model.diffusion_steps), cfg.model.schedule)?;
    let mut out = String::from("t,beta,alpha_bar,posterior_var\n");
    for t in 0..=s.steps {
        let _ = writeln!(out, "{t},{:?},{:?},{:?}", s.beta[t], s.alpha_bar[t], s.posterior_var[t]);
    }
    match a.out {
        Some(p) => std::fs::write(&p, out).map_err(|e| Error::io(format!("writing {}", p.display()), e)),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn probe(a: ProbeArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let path = a
        .labels
        .or(cfg.data.genres.clone())
        .ok_or_else(|| Error::Config("no label file: pass --labels or set data.genres".into()))?;
    let labels = read_genre_labels(&path)?;
    let (ds, _, _) = cfg.load_dataset()?;
    let mut reports = Vec::new();
    for p in &a.checkpoints {
        let (_, store, m) = load_model(p)?;
        let e = item_embeddings(&store)?;
        let r = linear_probe(&e, &ds.items, &labels, &cfg.probe)?;
        println!(
            "{}  precision {:.4}  recall {:.4}  f1 {:.4}  ({} classes, {} test items)",
            tag(p, &m),
            r.precision,
            r.recall,
            r.f1,
            r.classes,
            r.test_items
        );
        reports.push(serde_json::json!({ "source": tag(p, &m), "report": r }));
    }
    if let Some(p) = a.report {
        write_json(&p, &reports)?;
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let (_, store, _) = load_model(&a.checkpoint)?;
    let mut e = item_embeddings(&store)?;
    if a.normalize || cfg.normalize_export {
        e = normalize_rows(&e);
    }
    let ids = adrec::data::read_dataset(&cfg.data.dir).ok().map(|(ds, _)| ds.items);
    let ids = ids.filter(|v| v.len() == e.shape()[0]);
    export_embeddings(&a.out, &e, ids.as_deref())?;
    println!("wrote {} rows to {}", e.shape()[0], a.out.display());
    Ok(())
}
