//! Two-stage training: encoder and denoiser on the noise-regression loss,
//! then the scorer on frozen candidates.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use trajdiff_tensor::{Array, Bound, Tape, Var};

use super::features::{derive_seed, flatten, group_by_key, EncoderGroup, SceneInputs};
use crate::config::RunConfig;
use crate::data::Scene;
use crate::diffusion::{forward_noise, sample, Method, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::geometry::cumulative;
use crate::networks::{denoiser, scorer, ArchConfig, Dropout, Model};
use crate::selection::{gt_scores, score_targets};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub batches: usize,
    pub examples: usize,
    pub seconds: f64,
}

/// One stage-1 minibatch: encoder groups plus the noised futures of every
/// agent that has one.
#[derive(Clone, Debug)]
pub struct Stage1Batch {
    pub groups: Vec<EncoderGroup>,
    /// Row of each example in the `[S·N, d_c]` output of its group.
    pub rows: Vec<Vec<usize>>,
    pub noisy: Array,
    pub noise: Array,
    pub steps: Vec<usize>,
}

impl Stage1Batch {
    /// Noises every known future with `η ~ U[1, H]` and `ε ~ N(0, I)` from `rng`.
    pub fn build(
        inputs: &[&SceneInputs],
        arch: &ArchConfig,
        schedule: &NoiseSchedule,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Self>> {
        let width = 2 * arch.t_f;
        let mut groups = Vec::new();
        let mut rows = Vec::new();
        let (mut noisy, mut noise, mut steps) = (Vec::new(), Vec::new(), Vec::new());
        for g in group_by_key(inputs) {
            let members: Vec<&SceneInputs> = g.iter().map(|&i| inputs[i]).collect();
            let n = members[0].agents();
            let mut r = Vec::new();
            for (s, inp) in members.iter().enumerate() {
                for (a, fut) in inp.futures.iter().enumerate() {
                    let Some(fut) = fut else { continue };
                    let y0: Vec<f64> = fut.iter().flatten().copied().collect();
                    let eta = rng.random_range(1..=schedule.steps());
                    let eps: Vec<f64> = (0..width).map(|_| rng.sample(StandardNormal)).collect();
                    noisy.extend(forward_noise(&y0, eta, &eps, schedule)?);
                    noise.extend(eps);
                    steps.push(eta);
                    r.push(s * n + a);
                }
            }
            if !r.is_empty() {
                groups.push(EncoderGroup::stack(&members, arch)?);
                rows.push(r);
            }
        }
        if steps.is_empty() {
            return Ok(None);
        }
        let b = steps.len();
        Ok(Some(Stage1Batch {
            groups,
            rows,
            noisy: Array::new(vec![b, arch.t_f, 2], noisy)?,
            noise: Array::new(vec![b, arch.t_f, 2], noise)?,
            steps,
        }))
    }

    pub fn examples(&self) -> usize {
        self.steps.len()
    }
}

/// Mean squared error between predicted and true noise over the batch.
pub fn stage1_loss(t: &mut Tape, p: &Bound, arch: &ArchConfig, batch: &Stage1Batch, drop: &mut Dropout) -> Result<Var> {
    let mut ctx = Vec::with_capacity(batch.groups.len());
    for (g, rows) in batch.groups.iter().zip(&batch.rows) {
        let c = g.encode(t, p, arch, drop)?;
        ctx.push(t.gather_rows(c, rows)?);
    }
    let ctx = if ctx.len() == 1 { ctx[0] } else { t.concat_first(&ctx)? };
    let y = t.constant(batch.noisy.clone());
    let eps_hat = denoiser::denoise(t, p, arch, y, &batch.steps, ctx, drop)?;
    let eps = t.constant(batch.noise.clone());
    Ok(t.mse(eps_hat, eps)?)
}

fn epoch_rng(seed: u64, stage: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stage));
    rng.set_stream(epoch as u64);
    rng
}

fn prepare(scenes: &[Scene], arch: &ArchConfig) -> Result<Vec<SceneInputs>> {
    let inputs = scenes
        .iter()
        .map(|s| SceneInputs::new(s, arch))
        .collect::<Result<Vec<_>>>()?;
    if !inputs.iter().any(|i| i.futures.iter().any(Option::is_some)) {
        return Err(Error::Data("dataset has no future trajectories to train on".into()));
    }
    Ok(inputs)
}

/// Runs stage-1 epochs `start..start + epochs`. Epoch `e` draws its shuffle,
/// noise and dropout masks from a stream fixed by `(seed, e)`, so resuming
/// from a checkpoint written after epoch `e - 1` reproduces epoch `e`.
pub fn train_denoiser(
    model: &mut Model,
    scenes: &[Scene],
    cfg: &RunConfig,
    start: usize,
    epochs: usize,
    on_epoch: &mut dyn FnMut(&EpochLog, &Model) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    let arch = model.arch.clone();
    let inputs = prepare(scenes, &arch)?;
    let schedule = cfg.schedule()?;
    let opt = cfg.train.optimizer();
    let mut logs = Vec::new();
    for epoch in start..start + epochs {
        let clock = Instant::now();
        let mut rng = epoch_rng(cfg.seed, 1, epoch);
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut rng);
        let (mut total, mut batches, mut examples) = (0.0, 0, 0);
        for chunk in order.chunks(cfg.train.batch_size) {
            let members: Vec<&SceneInputs> = chunk.iter().map(|&i| &inputs[i]).collect();
            let Some(batch) = Stage1Batch::build(&members, &arch, &schedule, &mut rng)? else {
                continue;
            };
            let mut drop = Dropout::new(arch.dropout, rng.next_u64());
            let mut tape = Tape::new();
            let p = model.stage1.bind(&mut tape, true);
            let loss = stage1_loss(&mut tape, &p, &arch, &batch, &mut drop)?;
            let value = tape.value(loss).data()[0];
            let grads = tape.backward(loss)?.params();
            model.stage1.adamw_step(&grads, &opt)?;
            total += value;
            batches += 1;
            examples += batch.examples();
        }
        let log = EpochLog {
            stage: "denoiser".into(),
            epoch,
            loss: total / batches.max(1) as f64,
            batches,
            examples,
            seconds: clock.elapsed().as_secs_f64(),
        };
        on_epoch(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Frozen candidates of one scene with their score targets.
#[derive(Clone, Debug)]
pub struct ScorerExample {
    pub scene: usize,
    /// `[M·2·T_f]` agent-frame positions.
    pub candidates: Vec<f64>,
    pub context: Vec<f64>,
    pub psi: Vec<f64>,
    pub targets: Vec<f64>,
}

/// Samples `samples` DDIM candidates for each focal agent with the frozen
/// stage-1 weights and computes `Ψ` against the ground truth. Scenes whose
/// focal agent has no future, or where any chain failed, are skipped.
pub fn scorer_examples(model: &Model, scenes: &[Scene], cfg: &RunConfig, samples: usize) -> Result<Vec<ScorerExample>> {
    let arch = &model.arch;
    let schedule = cfg.schedule()?;
    let sampler = SamplerConfig {
        method: Method::Ddim,
        skip: cfg.diffusion.skip,
        samples,
        seed: 0,
    };
    sampler.validate(&schedule)?;
    let out: Vec<Option<ScorerExample>> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| -> Result<Option<ScorerExample>> {
            let inputs = SceneInputs::new(scene, arch)?;
            let Some(truth) = inputs.relative_future(scene.focal) else {
                return Ok(None);
            };
            let group = EncoderGroup::stack(&[&inputs], arch)?;
            let ctx = model.encode(&group.hist, group.lanes.as_ref())?;
            let d = arch.d_c;
            let context = ctx.data()[scene.focal * d..(scene.focal + 1) * d].to_vec();
            let cfg_i = SamplerConfig {
                seed: derive_seed(cfg.seed ^ 0x5C0E, i as u64),
                ..sampler
            };
            let out = sample(&model.predictor(&context)?, arch.t_f, &cfg_i, &schedule)?;
            if !out.failed.is_empty() {
                return Ok(None);
            }
            let cands: Vec<_> = out.samples.iter().map(|y| cumulative(y)).collect();
            let psi = gt_scores(&truth, &cands, cfg.selection.lambda)?;
            let targets = score_targets(&psi, cfg.selection.temperature);
            Ok(Some(ScorerExample {
                scene: i,
                candidates: flatten(&cands),
                context,
                psi,
                targets,
            }))
        })
        .collect::<Result<_>>()?;
    Ok(out.into_iter().flatten().collect())
}

fn stack_examples(batch: &[&ScorerExample], arch: &ArchConfig) -> Result<(Array, Array, Array)> {
    let b = batch.len();
    let m = batch[0].psi.len();
    let c = Array::new(vec![b, m, 2 * arch.t_f], batch.iter().flat_map(|e| e.candidates.clone()).collect())?;
    let x = Array::new(vec![b, arch.d_c], batch.iter().flat_map(|e| e.context.clone()).collect())?;
    let t = Array::new(vec![b, m], batch.iter().flat_map(|e| e.targets.clone()).collect())?;
    Ok((c, x, t))
}

/// Cross-entropy of the scorer on a batch of examples.
pub fn scorer_batch_loss(
    t: &mut Tape,
    p: &Bound,
    arch: &ArchConfig,
    batch: &[&ScorerExample],
    drop: &mut Dropout,
) -> Result<Var> {
    let (c, x, targets) = stack_examples(batch, arch)?;
    let cv = t.constant(c);
    let xv = t.constant(x);
    let s = scorer::score(t, p, arch, cv, xv, drop)?;
    Ok(t.cross_entropy_soft(s, &targets)?)
}

/// Raw scores for each example in evaluation mode.
pub fn score_examples(model: &Model, examples: &[ScorerExample]) -> Result<Vec<Vec<f64>>> {
    examples
        .iter()
        .map(|e| {
            let (c, x, _) = stack_examples(&[e], &model.arch)?;
            Ok(model.score(&c, &x)?.into_vec())
        })
        .collect()
}

/// Trains the scorer only. The stage-1 weights are hashed before and after;
/// any change is an error.
pub fn train_scorer(
    model: &mut Model,
    examples: &[ScorerExample],
    cfg: &RunConfig,
    epochs: usize,
    on_epoch: &mut dyn FnMut(&EpochLog, &Model) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if examples.is_empty() {
        return Err(Error::Data("no scorer training examples".into()));
    }
    let m = examples[0].psi.len();
    if examples.iter().any(|e| e.psi.len() != m) {
        return Err(Error::Invalid("scorer examples differ in candidate count".into()));
    }
    let before = model.stage1_fingerprint();
    let arch = model.arch.clone();
    let opt = cfg.train.optimizer();
    let mut logs = Vec::new();
    for epoch in 0..epochs {
        let clock = Instant::now();
        let mut rng = epoch_rng(cfg.seed, 2, epoch);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch: Vec<&ScorerExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut drop = Dropout::new(arch.dropout, rng.next_u64());
            let mut tape = Tape::new();
            let p = model.scorer.bind(&mut tape, true);
            let loss = scorer_batch_loss(&mut tape, &p, &arch, &batch, &mut drop)?;
            total += tape.value(loss).data()[0];
            let grads = tape.backward(loss)?.params();
            model.scorer.adamw_step(&grads, &opt)?;
            batches += 1;
        }
        let log = EpochLog {
            stage: "scorer".into(),
            epoch,
            loss: total / batches as f64,
            batches,
            examples: examples.len(),
            seconds: clock.elapsed().as_secs_f64(),
        };
        on_epoch(&log, model)?;
        logs.push(log);
    }
    if model.stage1_fingerprint() != before {
        return Err(Error::Numeric("stage-1 weights changed during scorer training".into()));
    }
    Ok(logs)
}
