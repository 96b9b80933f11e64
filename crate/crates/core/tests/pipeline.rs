use trajdiff_core::config::RunConfig;
use trajdiff_core::data::{generate_synthetic, Scene};
use trajdiff_core::diffusion::Method;
use trajdiff_core::metrics::spearman;
use trajdiff_core::networks::{ArchConfig, Model};
use trajdiff_core::pipeline::{
    evaluate, predict, read_predictions, run_bench, score_examples, scorer_examples, train_denoiser, train_scorer,
    write_predictions, PredictOptions, Prediction,
};
use trajdiff_core::selection::SelectMethod;
use trajdiff_core::Error;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 11;
    cfg.model = ArchConfig {
        t_p: 4,
        t_f: 4,
        d_model: 16,
        heads: 2,
        ffn_mult: 2,
        dropout: 0.0,
        d_c: 16,
        encoder_layers: 1,
        lane_dim: None,
        denoiser_layers: 2,
        scorer_heads: 2,
        scorer_d_head: 8,
        scorer_d: 16,
        scorer_mlp: 16,
    };
    cfg.diffusion.steps = 20;
    cfg.diffusion.skip = 4;
    cfg.diffusion.samples = 12;
    cfg.selection.k = 4;
    cfg.selection.omega = 0.3;
    cfg.selection.radius = 0.3;
    cfg.eval.k_values = vec![1, 4];
    cfg.train.batch_size = 4;
    cfg.train.lr = 3e-3;
    cfg.train.weight_decay = 0.0;
    cfg.synthetic.scenes = 10;
    cfg.synthetic.agents_per_scene = 2;
    cfg.bench.steps = vec![20, 5];
    cfg.bench.samples = vec![4, 8];
    cfg.bench.warmup = 0;
    cfg.bench.repeats = 2;
    cfg.bench.max_scenes = 3;
    cfg.validate().unwrap();
    cfg
}

fn scenes(cfg: &RunConfig) -> Vec<Scene> {
    generate_synthetic(&cfg.synthetic_spec()).unwrap()
}

fn options(cfg: &RunConfig, methods: Vec<SelectMethod>) -> PredictOptions {
    PredictOptions {
        sampler: cfg.sampler(cfg.seed),
        selection: cfg.selection.clone(),
        methods,
    }
}

#[test]
fn overfit_halves_the_denoiser_loss() {
    let mut cfg = small_config();
    cfg.train.batch_size = 2;
    let data = scenes(&cfg);
    let mut model = Model::new(cfg.model.clone(), 1).unwrap();
    let logs = train_denoiser(&mut model, &data, &cfg, 0, 20, &mut |_, _| Ok(())).unwrap();
    assert_eq!(logs.len(), 20);
    let first = logs[0].loss;
    let best = logs.iter().map(|l| l.loss).fold(f64::INFINITY, f64::min);
    assert!(best <= 0.5 * first, "loss went from {first} to at best {best}");
}

#[test]
fn resume_reproduces_the_next_epoch() {
    let cfg = small_config();
    let data = scenes(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("stage1.ckpt");
    let mut full = Model::new(cfg.model.clone(), 2).unwrap();
    let logs = train_denoiser(&mut full, &data, &cfg, 0, 3, &mut |_, _| Ok(())).unwrap();

    let mut first = Model::new(cfg.model.clone(), 2).unwrap();
    train_denoiser(&mut first, &data, &cfg, 0, 2, &mut |_, _| Ok(())).unwrap();
    first.save_stage1(&ckpt, serde_json::json!({"epoch": 2})).unwrap();
    let mut resumed = Model::load(&cfg.model, &ckpt, None).unwrap();
    let next = train_denoiser(&mut resumed, &data, &cfg, 2, 1, &mut |_, _| Ok(())).unwrap();
    assert_eq!(next[0].loss, logs[2].loss);
    assert_eq!(resumed.stage1_fingerprint(), full.stage1_fingerprint());
}

#[test]
fn training_without_futures_is_rejected() {
    let cfg = small_config();
    let mut data = scenes(&cfg);
    for s in &mut data {
        for a in &mut s.agents {
            a.future.clear();
        }
    }
    let mut model = Model::new(cfg.model.clone(), 3).unwrap();
    let err = train_denoiser(&mut model, &data, &cfg, 0, 1, &mut |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
}

#[test]
fn scorer_training_keeps_stage1_and_improves_rank_correlation() {
    let mut cfg = small_config();
    cfg.synthetic.scenes = 24;
    cfg.diffusion.samples = 16;
    let data = scenes(&cfg);
    let mut model = Model::new(cfg.model.clone(), 4).unwrap();
    train_denoiser(&mut model, &data, &cfg, 0, 5, &mut |_, _| Ok(())).unwrap();
    let frozen = model.stage1_fingerprint();
    let examples = scorer_examples(&model, &data, &cfg, cfg.diffusion.samples).unwrap();
    assert_eq!(examples.len(), data.len());

    let corr = |m: &Model| {
        let scores = score_examples(m, &examples).unwrap();
        let total: f64 = examples
            .iter()
            .zip(&scores)
            .map(|(e, s)| {
                let neg: Vec<f64> = e.psi.iter().map(|p| -p).collect();
                spearman(&neg, s).unwrap()
            })
            .sum();
        total / examples.len() as f64
    };
    let before = corr(&model);
    train_scorer(&mut model, &examples, &cfg, 30, &mut |_, _| Ok(())).unwrap();
    let after = corr(&model);
    assert_eq!(model.stage1_fingerprint(), frozen);
    assert!(after > before, "correlation {before} -> {after}");
    assert!(after > 0.5, "correlation after training {after}");
}

#[test]
fn predict_shape_contract_and_random_reproducibility() {
    let cfg = small_config();
    let data = scenes(&cfg);
    let model = Model::new(cfg.model.clone(), 5).unwrap();
    let schedule = cfg.schedule().unwrap();
    let opts = options(&cfg, SelectMethod::ALL.to_vec());
    let preds = predict(&model, &data[..1], &opts, &schedule).unwrap();
    assert_eq!(preds.len(), 3);
    for p in &preds {
        assert_eq!(p.trajectories.len(), cfg.selection.k);
        for t in &p.trajectories {
            assert_eq!(t.len(), cfg.model.t_f);
            assert!(t.iter().flatten().all(|v| v.is_finite()));
        }
        assert!(p.timing.latency_ms >= p.timing.sample_ms);
    }

    let random = options(&cfg, vec![SelectMethod::Random]);
    let a = predict(&model, &data, &random, &schedule).unwrap();
    let b = predict(&model, &data, &random, &schedule).unwrap();
    let strip = |v: &[Prediction]| v.iter().map(|p| (p.indices.clone(), p.trajectories.clone())).collect::<Vec<_>>();
    assert_eq!(strip(&a), strip(&b));
    let mut other = random.clone();
    other.sampler.seed += 1;
    let c = predict(&model, &data, &other, &schedule).unwrap();
    assert_ne!(strip(&a), strip(&c));
}

#[test]
fn nms_reports_fills_when_candidates_run_out() {
    let mut cfg = small_config();
    cfg.selection.omega = 1e6;
    let data = scenes(&cfg);
    let model = Model::new(cfg.model.clone(), 6).unwrap();
    let preds = predict(&model, &data[..2], &options(&cfg, vec![SelectMethod::Nms]), &cfg.schedule().unwrap()).unwrap();
    for p in preds {
        assert_eq!(p.fills, cfg.selection.k - 1);
        assert_eq!(p.trajectories.len(), cfg.selection.k);
    }
}

#[test]
fn evaluation_of_ground_truth_is_zero_and_round_trips() {
    let cfg = small_config();
    let data = scenes(&cfg);
    let preds: Vec<Prediction> = data
        .iter()
        .map(|s| {
            let t = s.focal_track();
            Prediction {
                scene_id: s.id.clone(),
                agent_id: t.agent_id,
                method: "oracle".into(),
                trajectories: vec![t.future.clone(); 4],
                indices: vec![0, 1, 2, 3],
                scores: vec![0.0; 4],
                fills: 0,
                failed_samples: 0,
                timing: Default::default(),
            }
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.jsonl");
    write_predictions(&path, &preds).unwrap();
    let back = read_predictions(&path).unwrap();
    assert_eq!(back, preds);
    let (reports, records) = evaluate(&back, &data, &[1, 4], 2.0).unwrap();
    assert_eq!(records.len(), data.len());
    for m in &reports[0].metrics {
        assert_eq!((m.min_ade, m.min_fde, m.miss), (0.0, 0.0, 0.0));
    }
}

#[test]
fn evaluation_rejects_mismatched_ids() {
    let cfg = small_config();
    let data = scenes(&cfg);
    let model = Model::new(cfg.model.clone(), 7).unwrap();
    let mut preds = predict(&model, &data, &options(&cfg, vec![SelectMethod::Random]), &cfg.schedule().unwrap()).unwrap();
    let dropped = preds.remove(3).scene_id;
    let err = evaluate(&preds, &data, &[1, 4], 2.0).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains(&dropped), "{err}");

    preds[0].scene_id = "nowhere:0".into();
    let err = evaluate(&preds, &data, &[1, 4], 2.0).unwrap_err();
    assert!(err.to_string().contains("nowhere:0"), "{err}");
}

#[test]
fn bench_grid_layout_and_validation() {
    let cfg = small_config();
    let data = scenes(&cfg);
    let model = Model::new(cfg.model.clone(), 8).unwrap();
    let mut cells = 0;
    let report = run_bench(&model, &data, &cfg, SelectMethod::Coverage, &mut |_, _| cells += 1).unwrap();
    assert_eq!(cells, 4);
    assert_eq!(report.steps_panel.len(), 2);
    assert_eq!(report.samples_panel.len(), 2);
    assert_eq!(report.steps_panel[0].method, Method::Ddpm);
    assert_eq!(report.steps_panel[1].method, Method::Ddim);
    assert_eq!(report.steps_panel[0].denoiser_calls, 20 * 3);
    assert_eq!(report.steps_panel[1].denoiser_calls, 5 * 3);
    assert!(report.samples_panel.iter().all(|c| c.steps == 5 && c.deterministic));

    let mut bad = cfg.clone();
    bad.bench.steps = vec![20, 3];
    let err = run_bench(&model, &data, &bad, SelectMethod::Coverage, &mut |_, _| {}).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
