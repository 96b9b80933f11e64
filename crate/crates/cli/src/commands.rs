use std::path::PathBuf;

use anyhow::{Context, Result};
use serde_json::json;
use trajdiff_core::config::RunConfig;
use trajdiff_core::data::{generate_synthetic, leave_one_out_splits, load_ethucy, read_scenes, write_scenes, Scene};
use trajdiff_core::data::ethucy::resolve_files;
use trajdiff_core::metrics::format_table;
use trajdiff_core::networks::Model;
use trajdiff_core::pipeline::{
    evaluate, format_bench, predict, read_predictions, run_bench, scorer_examples, train_denoiser, train_scorer,
    write_predictions, PredictOptions,
};
use trajdiff_core::selection::SelectMethod;
use trajdiff_core::Error;

use crate::run_dir::RunDir;
use crate::{Cli, Command, DataArgs, Global, SamplingArgs, SelectArg, SelectionArgs, TrainArgs};

pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(core) => core.exit_code() as u8,
        None => 3,
    }
}

// Debug keeps floats in exponent form (`1e300`), which TOML parses back
fn push<T: std::fmt::Debug>(o: &mut Vec<String>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        o.push(format!("{key}={v:?}"));
    }
}

fn push_list(o: &mut Vec<String>, key: &str, v: &Option<Vec<usize>>) {
    if let Some(v) = v {
        let items: Vec<String> = v.iter().map(usize::to_string).collect();
        o.push(format!("{key}=[{}]", items.join(",")));
    }
}

impl SamplingArgs {
    fn overrides(&self, o: &mut Vec<String>) {
        if let Some(m) = &self.method {
            o.push(format!("diffusion.method=\"{m}\""));
        }
        push(o, "diffusion.steps", &self.steps);
        push(o, "diffusion.skip", &self.skip);
        push(o, "diffusion.samples", &self.samples);
    }
}

impl SelectionArgs {
    fn overrides(&self, o: &mut Vec<String>) {
        push(o, "selection.k", &self.k);
        push(o, "selection.omega", &self.omega);
        push(o, "selection.radius", &self.radius);
        push(o, "selection.lambda", &self.lambda);
    }
}

impl TrainArgs {
    fn overrides(&self, o: &mut Vec<String>, epochs_key: &str) {
        push(o, epochs_key, &self.epochs);
        push(o, "train.lr", &self.lr);
        push(o, "train.batch_size", &self.batch_size);
    }
}

/// Config file (explicit, else the run's snapshot, else defaults), then
/// `--set` assignments, then dedicated flags.
fn resolve(g: &Global, flags: Vec<String>) -> Result<RunConfig> {
    let snapshot = g.run_dir.join("config.toml");
    let path = g.config.clone().or_else(|| snapshot.exists().then_some(snapshot));
    let mut o = g.set.clone();
    push(&mut o, "seed", &g.seed);
    o.extend(flags);
    Ok(RunConfig::load(path.as_deref(), &o)?)
}

#[derive(Clone, Copy, PartialEq)]
enum Role {
    Train,
    Test,
}

fn load_data(args: &DataArgs, cfg: &RunConfig, role: Role) -> Result<Vec<Scene>> {
    let scenes = match (&args.data, &args.ethucy) {
        (Some(p), None) => read_scenes(p)?,
        (None, Some(root)) => {
            let held = args.leave_out.as_deref().unwrap_or_default();
            let split = leave_one_out_splits(held)?;
            let names = if role == Role::Train { split.train } else { split.test };
            let mut all = Vec::new();
            for f in resolve_files(root, &names)? {
                all.extend(load_ethucy(&f, &cfg.window_spec())?);
            }
            all
        }
        (Some(_), Some(_)) => return Err(Error::Config("give either --data or --ethucy, not both".into()).into()),
        (None, None) => return Err(Error::Config("no input scenes: pass --data or --ethucy with --leave-out".into()).into()),
    };
    if scenes.is_empty() {
        return Err(Error::Data("input contains no scenes".into()).into());
    }
    Ok(scenes)
}

fn or_default(p: &Option<PathBuf>, run: &RunDir, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| run.path(name))
}

fn methods(select: SelectArg) -> Vec<SelectMethod> {
    match select {
        SelectArg::Nms => vec![SelectMethod::Nms],
        SelectArg::Coverage => vec![SelectMethod::Coverage],
        SelectArg::Random => vec![SelectMethod::Random],
        SelectArg::All => SelectMethod::ALL.to_vec(),
    }
}

/// Stage-1 weights, plus scorer weights when NMS needs them or a path was given.
fn load_model(cfg: &RunConfig, run: &RunDir, stage1: &Option<PathBuf>, scorer: &Option<PathBuf>, need_scorer: bool) -> Result<Model> {
    let s1 = or_default(stage1, run, "stage1.ckpt");
    let sc = or_default(scorer, run, "scorer.ckpt");
    let use_scorer = need_scorer || scorer.is_some();
    if use_scorer && !sc.exists() {
        return Err(Error::Config(format!(
            "scorer checkpoint {} does not exist; train one or choose --select random/coverage",
            sc.display()
        ))
        .into());
    }
    Ok(Model::load(&cfg.model, &s1, use_scorer.then_some(sc.as_path()))?)
}

fn finite(loss: f64, what: &str) -> trajdiff_core::Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} loss became {loss}")))
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let g = cli.global;
    rayon::ThreadPoolBuilder::new()
        .num_threads(g.threads)
        .build_global()
        .context("configuring the thread pool")?;
    match cli.command {
        Command::SynthData { out, scenes } => {
            let mut o = Vec::new();
            push(&mut o, "synthetic.scenes", &scenes);
            let cfg = resolve(&g, o)?;
            let data = generate_synthetic(&cfg.synthetic_spec())?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_scenes(&out, &data)?;
            if !g.quiet {
                eprintln!("wrote {} scenes to {}", data.len(), out.display());
            }
            Ok(())
        }
        Command::TrainDenoiser { data, train, resume } => {
            let mut o = Vec::new();
            train.overrides(&mut o, "train.denoiser_epochs");
            let cfg = resolve(&g, o)?;
            let run = RunDir::create(&g.run_dir)?;
            run.write("config.toml", &cfg.to_toml())?;
            let scenes = load_data(&data, &cfg, Role::Train)?;
            let mut log = run.log("train-denoiser", g.quiet)?;
            let (mut model, start) = match &resume {
                Some(p) => {
                    let extra = Model::checkpoint_extra(p)?;
                    let done = extra.get("epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
                    (Model::load(&cfg.model, p, None)?, done)
                }
                None => (Model::new(cfg.model.clone(), cfg.seed)?, 0),
            };
            let total = cfg.train.denoiser_epochs;
            log.event("start", json!({"scenes": scenes.len(), "start_epoch": start, "epochs": total}))?;
            log.progress(format!("{} scenes, epochs {start}..{total}", scenes.len()));
            let ckpt = run.path("stage1.ckpt");
            train_denoiser(&mut model, &scenes, &cfg, start, total.saturating_sub(start), &mut |e, m| {
                finite(e.loss, "denoiser")?;
                m.save_stage1(&ckpt, json!({"epoch": e.epoch + 1, "seed": cfg.seed}))?;
                log.event("epoch", serde_json::to_value(e).expect("serializable"))
                    .map_err(|err| Error::Io(std::io::Error::other(err.to_string())))?;
                log.progress(format!("epoch {:>3}  loss {:.5}  ({:.1}s)", e.epoch + 1, e.loss, e.seconds));
                Ok(())
            })?;
            if start >= total {
                model.save_stage1(&ckpt, json!({"epoch": start, "seed": cfg.seed}))?;
            }
            log.event("done", json!({"checkpoint": ckpt, "fingerprint": model.stage1_fingerprint()}))?;
            Ok(())
        }
        Command::TrainScorer {
            data,
            train,
            sampling,
            selection,
            stage1,
        } => {
            let mut o = Vec::new();
            train.overrides(&mut o, "train.scorer_epochs");
            sampling.overrides(&mut o);
            selection.overrides(&mut o);
            let cfg = resolve(&g, o)?;
            let run = RunDir::create(&g.run_dir)?;
            run.write("config.toml", &cfg.to_toml())?;
            let scenes = load_data(&data, &cfg, Role::Train)?;
            let mut log = run.log("train-scorer", g.quiet)?;
            let mut model = load_model(&cfg, &run, &stage1, &None, false)?;
            let frozen = model.stage1_fingerprint();
            log.progress(format!("sampling {} candidates for {} scenes", cfg.diffusion.samples, scenes.len()));
            let examples = scorer_examples(&model, &scenes, &cfg, cfg.diffusion.samples)?;
            log.event(
                "candidates",
                json!({"scenes": scenes.len(), "examples": examples.len(), "skipped": scenes.len() - examples.len()}),
            )?;
            let ckpt = run.path("scorer.ckpt");
            train_scorer(&mut model, &examples, &cfg, cfg.train.scorer_epochs, &mut |e, m| {
                finite(e.loss, "scorer")?;
                m.save_scorer(&ckpt, json!({"epoch": e.epoch + 1, "seed": cfg.seed}))?;
                log.event("epoch", serde_json::to_value(e).expect("serializable"))
                    .map_err(|err| Error::Io(std::io::Error::other(err.to_string())))?;
                log.progress(format!("epoch {:>3}  loss {:.5}  ({:.1}s)", e.epoch + 1, e.loss, e.seconds));
                Ok(())
            })?;
            log.event("done", json!({"checkpoint": ckpt, "stage1_fingerprint": frozen}))?;
            Ok(())
        }
        Command::Predict {
            data,
            sampling,
            selection,
            select,
            stage1,
            scorer,
            out,
        } => {
            let mut o = Vec::new();
            sampling.overrides(&mut o);
            selection.overrides(&mut o);
            let cfg = resolve(&g, o)?;
            let run = RunDir::create(&g.run_dir)?;
            run.write("config.predict.toml", &cfg.to_toml())?;
            let methods = methods(select);
            let model = load_model(&cfg, &run, &stage1, &scorer, methods.contains(&SelectMethod::Nms))?;
            let scenes = load_data(&data, &cfg, Role::Test)?;
            let mut log = run.log("predict", g.quiet)?;
            let opts = PredictOptions {
                sampler: cfg.sampler(cfg.seed),
                selection: cfg.selection.clone(),
                methods,
            };
            let preds = predict(&model, &scenes, &opts, &cfg.schedule()?)?;
            let out = or_default(&out, &run, "predictions.jsonl");
            write_predictions(&out, &preds)?;
            for m in &opts.methods {
                let mine: Vec<_> = preds.iter().filter(|p| p.method == m.name()).collect();
                let fills: usize = mine.iter().map(|p| p.fills).sum();
                let failed: usize = mine.iter().map(|p| p.failed_samples).sum();
                let lat = mine.iter().map(|p| p.timing.latency_ms).sum::<f64>() / mine.len().max(1) as f64;
                log.event(
                    "summary",
                    json!({"method": m.name(), "scenes": mine.len(), "fills": fills, "failed_samples": failed, "mean_latency_ms": lat}),
                )?;
                println!(
                    "{:<8} scenes {:>5}  fills {:>5}  failed samples {:>4}  mean latency {:.2} ms",
                    m.name(),
                    mine.len(),
                    fills,
                    failed,
                    lat
                );
            }
            log.progress(format!("wrote {}", out.display()));
            Ok(())
        }
        Command::Evaluate {
            data,
            predictions,
            k_values,
        } => {
            let mut o = Vec::new();
            push_list(&mut o, "eval.k_values", &k_values);
            let cfg = resolve(&g, o)?;
            let run = RunDir::create(&g.run_dir)?;
            let preds = read_predictions(&or_default(&predictions, &run, "predictions.jsonl"))?;
            let scenes = load_data(&data, &cfg, Role::Test)?;
            let (reports, records) = evaluate(&preds, &scenes, &cfg.eval.k_values, cfg.eval.miss_threshold)?;
            let table = format_table(&reports);
            run.write("report.txt", &table)?;
            run.write("report.json", &serde_json::to_string_pretty(&reports)?)?;
            let lines: Vec<String> = records.iter().map(|r| serde_json::to_string(r).expect("serializable")).collect();
            run.write("report_scenes.jsonl", &(lines.join("\n") + "\n"))?;
            let mut log = run.log("evaluate", g.quiet)?;
            log.event("report", json!({"reports": reports}))?;
            print!("{table}");
            Ok(())
        }
        Command::Bench {
            data,
            selection,
            select,
            steps_grid,
            samples_grid,
            repeats,
            warmup,
            max_scenes,
            stage1,
            scorer,
        } => {
            let mut o = Vec::new();
            selection.overrides(&mut o);
            push_list(&mut o, "bench.steps", &steps_grid);
            push_list(&mut o, "bench.samples", &samples_grid);
            push(&mut o, "bench.repeats", &repeats);
            push(&mut o, "bench.warmup", &warmup);
            push(&mut o, "bench.max_scenes", &max_scenes);
            let cfg = resolve(&g, o)?;
            cfg.validate_bench()?;
            let method = match select {
                SelectArg::All => return Err(Error::Config("bench times one selection method at a time".into()).into()),
                s => methods(s)[0],
            };
            let run = RunDir::create(&g.run_dir)?;
            run.write("config.bench.toml", &cfg.to_toml())?;
            let model = load_model(&cfg, &run, &stage1, &scorer, method == SelectMethod::Nms)?;
            let scenes = load_data(&data, &cfg, Role::Test)?;
            let mut log = run.log("bench", g.quiet)?;
            let mut cells = Vec::new();
            let report = run_bench(&model, &scenes, &cfg, method, &mut |panel, c| {
                eprintln_unless(g.quiet, format!("{panel}: steps {} M {} -> {:.2} ms", c.steps, c.samples, c.latency_ms));
                cells.push(json!({"panel": panel, "cell": c}));
            })?;
            for c in cells {
                log.event("cell", c)?;
            }
            let table = format_bench(&report);
            run.write("bench.txt", &table)?;
            run.write("bench.json", &serde_json::to_string_pretty(&report)?)?;
            print!("{table}");
            Ok(())
        }
    }
}

fn eprintln_unless(quiet: bool, msg: String) {
    if !quiet {
        eprintln!("[bench] {msg}");
    }
}
