//! Denoiser training: noise-prediction objective (optionally with physics
//! penalties on the clean-signal estimate), condition dropout, Adam, and
//! versioned checkpoints (JSON manifest + little-endian f32 blob).

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    build_schedule, forward_sample, ConditionVector, ScheduleKind, WindowState,
};
use crate::error::{ArtifactKind, Error, Result};
use crate::ingest::Dataset;
use crate::neural::autodiff::{Graph, Tensor};
use crate::neural::layers::{NetBuilder, ParamStore};
use crate::neural::losses::{loss_csdi, loss_simple, PhysicsWeights};
use crate::neural::optim::{adam_step, AdamConfig, AdamState};
use crate::neural::{condition_tensor, window_to_tensor, ArchConfig, NeuralDenoiser};
use crate::rng::stream_rng;
use crate::trip::{pad_or_truncate, WINDOW_LEN};
use crate::util::sha256_hex;

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"MTCKPT01";

/// Training hyperparameters. Defaults follow the reference setup: Adam at
/// 1e-4 with betas (0.9, 0.999), batches of 32, condition dropout 0.1,
/// physics weights 0.1/0.03/0.02/0.05 with 4/5 m/s^2 acceleration caps,
/// 2 m/s^3 jerk cap, and a 0.5 m/s^2 acceleration-spread target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub cond_dropout: f64,
    pub lambda_smooth: f64,
    pub lambda_accel: f64,
    pub lambda_jerk: f64,
    pub lambda_accel_dist: f64,
    pub accel_cap_pos: f64,
    pub accel_cap_neg: f64,
    pub jerk_cap: f64,
    pub sigma_a_target: f64,
    pub schedule: ScheduleKind,
    pub t_diff: usize,
    /// Speeds are divided by this before entering the diffusion space.
    pub value_scale: f64,
    /// Train with the physics-augmented objective (single-channel mode).
    pub physics: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            cond_dropout: 0.1,
            lambda_smooth: 0.1,
            lambda_accel: 0.03,
            lambda_jerk: 0.02,
            lambda_accel_dist: 0.05,
            accel_cap_pos: 4.0,
            accel_cap_neg: 5.0,
            jerk_cap: 2.0,
            sigma_a_target: 0.5,
            schedule: ScheduleKind::Linear,
            t_diff: 1000,
            value_scale: 30.0,
            physics: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn physics_weights(&self) -> PhysicsWeights {
        PhysicsWeights {
            lambda_smooth: self.lambda_smooth,
            lambda_accel: self.lambda_accel,
            lambda_jerk: self.lambda_jerk,
            lambda_accel_dist: self.lambda_accel_dist,
            accel_cap_pos: self.accel_cap_pos,
            accel_cap_neg: self.accel_cap_neg,
            jerk_cap: self.jerk_cap,
            sigma_a_target: self.sigma_a_target,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: 1e-8,
        }
    }
}

/// One training window: normalized state, condition, and valid prefix.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x0: WindowState,
    pub cond: ConditionVector,
    pub valid_len: usize,
}

/// Converts a dataset into normalized training windows matching the
/// architecture's channel count and condition mode.
pub fn build_training_set(
    ds: &Dataset,
    arch: &ArchConfig,
    value_scale: f64,
) -> Result<Vec<TrainSample>> {
    if ds.is_empty() {
        return Err(Error::EmptyInput("training dataset is empty".into()));
    }
    let channels = arch.channels();
    let mode = arch.cond_mode();
    let mut out = Vec::with_capacity(ds.len());
    for trip in ds.trips() {
        let window = pad_or_truncate(trip.trajectory(), channels)?;
        let values: Vec<f64> = window.values().iter().map(|v| v / value_scale).collect();
        let x0 = WindowState::from_values(channels, values)?;
        out.push(TrainSample {
            x0,
            cond: ConditionVector::from_stats(trip.stats(), mode),
            valid_len: window.valid_len().min(WINDOW_LEN),
        });
    }
    Ok(out)
}

/// Mean per-epoch loss values (raw component magnitudes, unweighted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub mse: f64,
    pub smooth: f64,
    pub accel: f64,
    pub jerk: f64,
    pub accel_dist: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub epochs: Vec<EpochLoss>,
    pub steps: usize,
    pub null_condition_samples: usize,
    pub samples_seen: usize,
}

impl LossHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,total,mse,smooth,accel,jerk,accel_dist\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.epoch, e.total, e.mse, e.smooth, e.accel, e.jerk, e.accel_dist
            ));
        }
        s
    }
}

/// Per-sample stochastic draws; shared by the training loop and its tests.
pub(crate) fn draw_step<R: Rng>(rng: &mut R, t_diff: usize, dropout: f64) -> (usize, bool) {
    let t = rng.random_range(1..=t_diff);
    let dropped = rng.random::<f64>() < dropout;
    (t, dropped)
}

pub struct TrainOutcome {
    pub denoiser: NeuralDenoiser,
    pub history: LossHistory,
}

/// Trains a denoiser: per sample, draw a step and a noise realization,
/// corrupt the window, predict the noise, and descend the (optionally
/// physics-augmented) objective. Conditions are replaced by the null token
/// with probability `cond_dropout`. Deterministic given the config seed.
pub fn train(samples: &[TrainSample], arch: &ArchConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("no training samples".into()));
    }
    arch.validate()?;
    let channels = arch.channels();
    if cfg.physics && channels != 1 {
        return Err(Error::InvalidValue(
            "physics objective applies to single-channel windows".into(),
        ));
    }
    let sched = build_schedule(cfg.schedule, cfg.t_diff)?;
    let weights = cfg.physics_weights();
    let store = ParamStore::new(cfg.seed);
    let mut adam = AdamState::new();
    let adam_cfg = cfg.adam();
    let mut rng = stream_rng(cfg.seed, 1);
    let null = ConditionVector::null_token(arch.cond_mode());

    let mut history = LossHistory::default();
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        for i in (1..indices.len()).rev() {
            let j = rng.random_range(0..=i);
            indices.swap(i, j);
        }
        let mut sums = [0.0f64; 6]; // total, mse, smooth, accel, jerk, accel_dist
        let mut n_epoch = 0usize;
        for batch in indices.chunks(cfg.batch_size.max(1)) {
            let mut grad_acc: HashMap<usize, Tensor> = HashMap::new();
            for (bi, &si) in batch.iter().enumerate() {
                let sample = &samples[si];
                let (t, dropped) = draw_step(&mut rng, cfg.t_diff, cfg.cond_dropout);
                let eps = WindowState::noise(channels, &mut rng);
                let x_t = forward_sample(&sample.x0, t, &eps, &sched)?;
                let cond = if dropped { &null } else { &sample.cond };
                if dropped {
                    history.null_condition_samples += 1;
                }

                let g = Graph::new();
                let b = NetBuilder::new(&g, &store);
                let x_leaf = g.leaf(window_to_tensor(&x_t));
                let eps_leaf = g.leaf(window_to_tensor(&eps));
                let cond_leaf = g.leaf(condition_tensor(cond));
                let eps_hat = arch.forward(&b, x_leaf, t, cond_leaf)?;

                let (loss, parts_vals) = if cfg.physics {
                    // closed-form clean estimate, speed channel, valid
                    // region, physical units
                    let ab = sched.alpha_bar[t];
                    let scaled_eps = g.scale(eps_hat, (1.0 - ab).sqrt());
                    let x0_hat = g.scale(g.sub(x_leaf, scaled_eps), 1.0 / ab.sqrt());
                    let speed = g.slice_rows(x0_hat, 0, 1);
                    let valid = g.slice_cols(speed, 0, sample.valid_len);
                    let physical = g.scale(valid, cfg.value_scale);
                    let parts = loss_csdi(&g, eps_leaf, eps_hat, physical, &weights);
                    let vals = [
                        g.value(parts.total).item(),
                        g.value(parts.mse).item(),
                        g.value(parts.smooth).item(),
                        g.value(parts.accel).item(),
                        g.value(parts.jerk).item(),
                        g.value(parts.accel_dist).item(),
                    ];
                    (parts.total, vals)
                } else {
                    let mse = loss_simple(&g, eps_leaf, eps_hat);
                    let v = g.value(mse).item();
                    (mse, [v, v, 0.0, 0.0, 0.0, 0.0])
                };
                if !parts_vals[0].is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at epoch {epoch}, batch index {bi}"
                    )));
                }
                for (s, v) in sums.iter_mut().zip(parts_vals) {
                    *s += v;
                }
                n_epoch += 1;
                history.samples_seen += 1;

                let grads = g.backward(loss)?;
                for (slot, vid) in b.bound_params() {
                    if let Some(grad) = grads.get(vid) {
                        match grad_acc.get_mut(&slot) {
                            Some(acc) => {
                                for (a, d) in acc.data.iter_mut().zip(&grad.data) {
                                    *a += d;
                                }
                            }
                            None => {
                                grad_acc.insert(slot, grad.clone());
                            }
                        }
                    }
                }
            }

            let scale = 1.0 / batch.len() as f64;
            let n_params = store.len();
            let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(n_params);
            for slot in 0..n_params {
                grads.push(grad_acc.remove(&slot).map(|mut t| {
                    for v in t.data.iter_mut() {
                        *v *= scale;
                    }
                    t
                }));
            }
            store.with_tensors_mut(|tensors| {
                adam_step(tensors, &grads, &mut adam, &adam_cfg);
            });
            history.steps += 1;
        }
        let n = n_epoch.max(1) as f64;
        history.epochs.push(EpochLoss {
            epoch,
            total: sums[0] / n,
            mse: sums[1] / n,
            smooth: sums[2] / n,
            accel: sums[3] / n,
            jerk: sums[4] / n,
            accel_dist: sums[5] / n,
        });
    }

    Ok(TrainOutcome {
        denoiser: NeuralDenoiser::new(arch.clone(), store),
        history,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the blob, in f32 units.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    version: u32,
    arch: ArchConfig,
    train_config: TrainConfig,
    param_count: usize,
    tensors: Vec<TensorMeta>,
    blob_f32_len: usize,
    blob_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
}

/// Serializes a checkpoint: magic, manifest length, JSON manifest, then the
/// f32 little-endian parameter blob at the manifest's per-tensor offsets.
pub fn checkpoint_to_bytes(
    denoiser: &NeuralDenoiser,
    cfg: &TrainConfig,
    config_digest: Option<String>,
) -> Result<Vec<u8>> {
    let snapshot = denoiser.store.snapshot();
    let mut tensors = Vec::with_capacity(snapshot.len());
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, t) in &snapshot {
        tensors.push(TensorMeta {
            name: name.clone(),
            rows: t.rows,
            cols: t.cols,
            offset,
        });
        for &v in &t.data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += t.len();
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        arch: denoiser.arch.clone(),
        train_config: cfg.clone(),
        param_count: denoiser.param_count(),
        tensors,
        blob_f32_len: offset,
        blob_sha256: sha256_hex(&blob),
        config_digest,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parses checkpoint bytes, validating magic, version, shape metadata, and
/// the blob checksum.
pub fn checkpoint_from_bytes(
    bytes: &[u8],
) -> Result<(NeuralDenoiser, TrainConfig, Option<String>)> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Parse {
            line: 1,
            msg: "not a checkpoint file (bad magic)".into(),
        });
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let blob_start = 16usize.checked_add(json_len).ok_or_else(|| Error::Parse {
        line: 1,
        msg: "manifest length overflows".into(),
    })?;
    if bytes.len() < blob_start {
        return Err(Error::Parse {
            line: 1,
            msg: "truncated checkpoint manifest".into(),
        });
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[16..blob_start])?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    manifest.arch.validate()?;
    let blob = &bytes[blob_start..];
    if blob.len() != manifest.blob_f32_len * 4 {
        return Err(Error::ChecksumMismatch(format!(
            "blob holds {} bytes, manifest declares {} floats",
            blob.len(),
            manifest.blob_f32_len
        )));
    }
    let got = sha256_hex(blob);
    if got != manifest.blob_sha256 {
        return Err(Error::ChecksumMismatch(format!(
            "checkpoint blob: expected {}, got {got}",
            manifest.blob_sha256
        )));
    }
    let store = ParamStore::new(manifest.train_config.seed);
    for meta in &manifest.tensors {
        let n = meta.rows * meta.cols;
        let end = meta
            .offset
            .checked_add(n)
            .filter(|&e| e <= manifest.blob_f32_len)
            .ok_or_else(|| Error::ShapeMismatch(format!("tensor `{}` out of blob", meta.name)))?;
        let mut data = Vec::with_capacity(n);
        for i in meta.offset..end {
            let b = &blob[i * 4..i * 4 + 4];
            let v = f32::from_le_bytes(b.try_into().unwrap()) as f64;
            if !v.is_finite() {
                return Err(Error::InvalidValue(format!(
                    "non-finite parameter in `{}`",
                    meta.name
                )));
            }
            data.push(v);
        }
        store.insert(&meta.name, Tensor::from_vec(meta.rows, meta.cols, data)?);
    }
    Ok((
        NeuralDenoiser::new(manifest.arch, store),
        manifest.train_config,
        manifest.config_digest,
    ))
}

pub fn save_checkpoint(
    denoiser: &NeuralDenoiser,
    cfg: &TrainConfig,
    path: &Path,
    config_digest: Option<String>,
) -> Result<()> {
    let bytes = checkpoint_to_bytes(denoiser, cfg, config_digest)?;
    let mut f =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(NeuralDenoiser, TrainConfig, Option<String>)> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.display().to_string(),
                kind: ArtifactKind::Checkpoint,
            }
        } else {
            Error::io(path.display().to_string(), e)
        }
    })?;
    checkpoint_from_bytes(&bytes)
}
