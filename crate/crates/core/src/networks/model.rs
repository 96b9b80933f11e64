//! Parameter stores for the two training stages and inference entry points.

use std::path::Path;

use serde_json::json;
use sha2::{Digest, Sha256};
use trajdiff_tensor::checkpoint::{load_store, save_store};
use trajdiff_tensor::{Array, ParamSpec, ParameterStore, Tape};

use super::config::ArchConfig;
use super::layers::Dropout;
use super::{denoiser, encoder, scorer};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};

pub const STAGE1_KIND: &str = "trajdiff.stage1";
pub const SCORER_KIND: &str = "trajdiff.scorer";

pub fn stage1_specs(a: &ArchConfig) -> Vec<ParamSpec> {
    let mut v = encoder::encoder_specs(a);
    v.extend(denoiser::denoiser_specs(a));
    v
}

/// Encoder and denoiser weights (`stage1`) and scorer weights (`scorer`).
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: ArchConfig,
    pub stage1: ParameterStore,
    pub scorer: ParameterStore,
}

impl Model {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let stage1 = ParameterStore::initialize(&stage1_specs(&arch), seed)?;
        let scorer = ParameterStore::initialize(&scorer::scorer_specs(&arch), seed.wrapping_add(0x5c0e))?;
        Ok(Model { arch, stage1, scorer })
    }

    /// Context vectors `[S, N, d_c]` for histories `[S, N, T_p, 2]`.
    pub fn encode(&self, hist: &Array, lanes: Option<&Array>) -> Result<Array> {
        let mut t = Tape::inference();
        let p = self.stage1.bind(&mut t, false);
        let h = t.constant(hist.clone());
        let l = lanes.map(|l| t.constant(l.clone()));
        let out = encoder::encode(&mut t, &p, &self.arch, h, l, &mut Dropout::off())?;
        Ok(t.value(out).clone())
    }

    /// ε̂ for `y` `[B, T_f, 2]` with one step per row and contexts `[B, d_c]`.
    pub fn denoise(&self, y: &Array, steps: &[usize], ctx: &Array) -> Result<Array> {
        let mut t = Tape::inference();
        let p = self.stage1.bind(&mut t, false);
        let yv = t.constant(y.clone());
        let cv = t.constant(ctx.clone());
        let out = denoiser::denoise(&mut t, &p, &self.arch, yv, steps, cv, &mut Dropout::off())?;
        Ok(t.value(out).clone())
    }

    /// The denoiser conditioned on one agent's context, for the samplers.
    pub fn predictor<'a>(&'a self, ctx: &[f64]) -> Result<Conditioned<'a>> {
        if ctx.len() != self.arch.d_c {
            return Err(Error::Length {
                expected: self.arch.d_c,
                got: ctx.len(),
            });
        }
        Ok(Conditioned {
            model: self,
            ctx: ctx.to_vec(),
        })
    }

    /// Raw scores `[B, M]` for candidates `[B, M, 2·T_f]` and contexts `[B, d_c]`.
    pub fn score(&self, cands: &Array, ctx: &Array) -> Result<Array> {
        let mut t = Tape::inference();
        let p = self.scorer.bind(&mut t, false);
        let c = t.constant(cands.clone());
        let x = t.constant(ctx.clone());
        let out = scorer::score(&mut t, &p, &self.arch, c, x, &mut Dropout::off())?;
        Ok(t.value(out).clone())
    }

    /// SHA-256 over the names, shapes and values of the stage-1 weights.
    pub fn stage1_fingerprint(&self) -> String {
        fingerprint(&self.stage1)
    }

    pub fn save_stage1(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let manifest = json!({"kind": STAGE1_KIND, "arch": self.arch, "extra": extra});
        Ok(save_store(path, &self.stage1, manifest)?)
    }

    pub fn save_scorer(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let manifest = json!({
            "kind": SCORER_KIND,
            "arch": self.arch,
            "stage1_fingerprint": self.stage1_fingerprint(),
            "extra": extra,
        });
        Ok(save_store(path, &self.scorer, manifest)?)
    }

    /// Loads stage-1 weights and, if given, scorer weights, checking both
    /// against `arch`. Without a scorer path the scorer keeps seeded
    /// initial weights.
    pub fn load(arch: &ArchConfig, stage1: &Path, scorer_path: Option<&Path>) -> Result<Self> {
        let mut model = Model::new(arch.clone(), 0)?;
        model.stage1 = load_checked(stage1, STAGE1_KIND, arch, &stage1_specs(arch))?.0;
        if let Some(sp) = scorer_path {
            let (store, manifest) = load_checked(sp, SCORER_KIND, arch, &scorer::scorer_specs(arch))?;
            let expected = manifest.get("stage1_fingerprint").and_then(|v| v.as_str());
            if let Some(fp) = expected {
                if fp != model.stage1_fingerprint() {
                    return Err(Error::Config(format!(
                        "scorer checkpoint {} was trained against different stage-1 weights",
                        sp.display()
                    )));
                }
            }
            model.scorer = store;
        }
        Ok(model)
    }

    /// The caller-supplied `extra` object of a checkpoint manifest.
    pub fn checkpoint_extra(path: &Path) -> Result<serde_json::Value> {
        let (_, manifest) = load_store(path)?;
        Ok(manifest.get("extra").cloned().unwrap_or(serde_json::Value::Null))
    }

    /// Reads the architecture recorded in a checkpoint manifest.
    pub fn checkpoint_arch(path: &Path) -> Result<ArchConfig> {
        let (_, manifest) = load_store(path)?;
        serde_json::from_value(manifest["arch"].clone())
            .map_err(|e| Error::Config(format!("{}: unreadable architecture: {e}", path.display())))
    }
}

fn load_checked(
    path: &Path,
    kind: &str,
    arch: &ArchConfig,
    specs: &[ParamSpec],
) -> Result<(ParameterStore, serde_json::Value)> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let (store, manifest) = load_store(path)?;
    if manifest.get("kind").and_then(|v| v.as_str()) != Some(kind) {
        return Err(Error::Config(format!("{} is not a {kind} checkpoint", path.display())));
    }
    let saved: ArchConfig = serde_json::from_value(manifest["arch"].clone())
        .map_err(|e| Error::Config(format!("{}: unreadable architecture: {e}", path.display())))?;
    // dropout does not affect shapes or inference
    if (ArchConfig { dropout: arch.dropout, ..saved.clone() }) != *arch {
        return Err(Error::Config(format!(
            "checkpoint {} architecture {saved:?} does not match configured {arch:?}",
            path.display()
        )));
    }
    store
        .validate(specs)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((store, manifest))
}

pub fn fingerprint(store: &ParameterStore) -> String {
    let mut h = Sha256::new();
    for (name, value) in store.iter() {
        h.update(name.as_bytes());
        for d in value.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Denoiser bound to a fixed context vector.
pub struct Conditioned<'a> {
    model: &'a Model,
    ctx: Vec<f64>,
}

impl NoisePredictor for Conditioned<'_> {
    fn predict(&self, y: &Array, eta: usize) -> Result<Array> {
        let b = y.shape()[0];
        let ctx = Array::new(vec![b, self.ctx.len()], self.ctx.repeat(b))?;
        self.model.denoise(y, &vec![eta; b], &ctx)
    }
}
