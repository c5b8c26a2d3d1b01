//! Momentum-contrast self-supervised pre-training.
//!
//! Each step augments a tile batch into two views, encodes the query view
//! with gradients and the key view through the momentum encoder (batch-stat
//! batch norm, no running-stat update, no gradient), scores the queries
//! against the positive keys and a FIFO queue of past keys, and then applies
//! a LARS update to the query encoder, an EMA update to the key encoder, and
//! enqueues the new keys.

mod lars;
mod queue;

pub use lars::{lars_step, LarsConfig, LarsState};
pub use queue::NegativeQueue;

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::augment::{two_views, AugmentationConfig, TileF};
use crate::encoder::{tiles_to_tensor, Encoder};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::slide::TileImage;
use crate::tensor::{BnMode, Graph, ParamSet, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct MoCoConfig {
    /// EMA momentum m for the key encoder.
    pub momentum: f64,
    /// InfoNCE temperature.
    pub temperature: f64,
    /// Negative queue length K; must be a positive multiple of batch_size.
    pub queue_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lars: LarsConfig,
}

impl Default for MoCoConfig {
    fn default() -> Self {
        MoCoConfig {
            momentum: 0.999,
            temperature: 0.2,
            queue_size: 4096,
            batch_size: 32,
            epochs: 5,
            lars: LarsConfig::default(),
        }
    }
}

impl MoCoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("EMA momentum {} outside [0, 1]", self.momentum)));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.batch_size == 0
            || self.queue_size < self.batch_size
            || self.queue_size % self.batch_size != 0
        {
            return Err(Error::Config(format!(
                "queue size {} must be a positive multiple of batch size {}",
                self.queue_size, self.batch_size
            )));
        }
        Ok(())
    }
}

/// EMA update: every key tensor becomes `m*key + (1-m)*query`, elementwise,
/// over parameters and buffers alike.
pub fn ema_update<S: Scalar>(key: &mut ParamSet<S>, query: &ParamSet<S>, m: f64) -> Result<()> {
    let m_s = S::from_f64(m);
    let one_minus = S::from_f64(1.0 - m);
    let names: Vec<String> = key.names().map(str::to_string).collect();
    for name in names {
        let q = query
            .get(&name)
            .ok_or_else(|| Error::Data(format!("query parameter '{name}' missing")))?;
        let k = key.get(&name).unwrap();
        if q.shape() != k.shape() {
            return Err(Error::shape(format!(
                "ema '{name}': key {:?} vs query {:?}",
                k.shape(),
                q.shape()
            )));
        }
        let data: Vec<S> =
            k.data().iter().zip(q.data()).map(|(&kv, &qv)| m_s * kv + one_minus * qv).collect();
        let t = Tensor::new(k.shape().to_vec(), data)?;
        key.set(&name, t)?;
    }
    Ok(())
}

/// Standalone InfoNCE evaluation (value only); used for monitoring and tests.
pub fn info_nce_loss(
    q: &Tensor<f64>,
    k_pos: &Tensor<f64>,
    queue: &Tensor<f64>,
    tau: f64,
) -> Result<f64> {
    let mut g: Graph<f64> = Graph::new();
    let qn = g.input("q", q.shape());
    let loss = g.info_nce(qn, k_pos.clone(), queue.clone(), tau)?;
    g.forward(&[("q", q)], BnMode::Eval)?;
    Ok(g.value(loss)?.item())
}

/// One loss-history row.
#[derive(Debug, Clone, Copy)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Write loss history as `step,epoch,loss,lr` CSV.
pub fn write_loss_history(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,epoch,loss,lr")?;
    for r in records {
        writeln!(f, "{},{},{:.6},{:.8}", r.step, r.epoch, r.loss, r.lr)?;
    }
    Ok(())
}

/// Append new records to an existing loss CSV (creating it with a header);
/// used by resumable training so earlier history survives.
pub fn append_loss_history(path: &Path, records: &[LossRecord]) -> Result<()> {
    use std::io::Write as _;
    if records.is_empty() {
        return Ok(());
    }
    let exists = path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if !exists {
        writeln!(f, "step,epoch,loss,lr")?;
    }
    for r in records {
        writeln!(f, "{},{},{:.6},{:.8}", r.step, r.epoch, r.loss, r.lr)?;
    }
    Ok(())
}

/// Full training state; checkpointable for bit-exact resume.
pub struct MoCoState {
    pub query: ParamSet<f32>,
    pub key: ParamSet<f32>,
    pub queue: NegativeQueue,
    pub step: u64,
    /// Batches already enqueued by the pre-step queue warm-up.
    pub queue_warm_batches: usize,
    pub lars: LarsState<f32>,
    pub history: Vec<LossRecord>,
}

const MOCO_MAGIC: &[u8; 4] = b"MOCO";
const MOCO_VERSION: u32 = 1;

impl MoCoState {
    /// Fresh state: key encoder starts as a copy of the query encoder and
    /// the queue is filled with random unit vectors.
    pub fn init(encoder: &Encoder, moco: &MoCoConfig, seed: u64) -> Result<MoCoState> {
        moco.validate()?;
        let query: ParamSet<f32> = encoder.init(crate::rng::derive_seed(seed, "moco.init"));
        let key = query.clone();
        let queue =
            NegativeQueue::random(moco.queue_size, encoder.cfg.projection_dim, seed)?;
        let lars = LarsState::zeros_like(&query);
        Ok(MoCoState { query, key, queue, step: 0, queue_warm_batches: 0, lars, history: Vec::new() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MOCO_MAGIC);
        out.extend_from_slice(&MOCO_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.queue_warm_batches as u64).to_le_bytes());
        for blob in [self.query.to_bytes(), self.key.to_bytes(), self.queue.to_bytes(), self.lars.to_bytes()] {
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MoCoState> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 16 || &bytes[0..4] != MOCO_MAGIC {
            return Err(Error::Format { offset: Some(0), msg: "bad magic, expected MOCO".into() });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != MOCO_VERSION {
            return Err(Error::Format { offset: Some(4), msg: format!("unsupported version {version}") });
        }
        if bytes.len() < 24 {
            return Err(Error::Format { offset: Some(16), msg: "truncated header".into() });
        }
        let step = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let queue_warm_batches = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let mut pos = 24usize;
        let mut blobs: Vec<&[u8]> = Vec::with_capacity(4);
        for _ in 0..4 {
            if pos + 8 > bytes.len() {
                return Err(Error::Format { offset: Some(pos as u64), msg: "truncated".into() });
            }
            let len = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
            pos += 8;
            if pos + len > bytes.len() {
                return Err(Error::Format { offset: Some(pos as u64), msg: "truncated blob".into() });
            }
            blobs.push(&bytes[pos..pos + len]);
            pos += len;
        }
        Ok(MoCoState {
            query: ParamSet::from_bytes(blobs[0])?,
            key: ParamSet::from_bytes(blobs[1])?,
            queue: NegativeQueue::from_bytes(blobs[2])?,
            step,
            queue_warm_batches,
            lars: LarsState::from_bytes(blobs[3])?,
            history: Vec::new(),
        })
    }
}

/// Cosine decay to zero over `total` steps, no warmup.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Pre-train from scratch for `moco.epochs` epochs over `tiles`.
pub fn pretrain(
    tiles: &[TileImage],
    encoder: &Encoder,
    aug: &AugmentationConfig,
    moco: &MoCoConfig,
    seed: u64,
) -> Result<MoCoState> {
    let mut state = MoCoState::init(encoder, moco, seed)?;
    let total = total_steps(tiles.len(), moco)?;
    train_until(&mut state, tiles, encoder, aug, moco, seed, total)?;
    Ok(state)
}

/// Total optimizer steps for a corpus under a config.
pub fn total_steps(n_tiles: usize, moco: &MoCoConfig) -> Result<u64> {
    if n_tiles == 0 {
        return Err(Error::Data("empty tile corpus".into()));
    }
    if n_tiles < 2 * moco.batch_size {
        return Err(Error::Data(format!(
            "corpus of {n_tiles} tiles is smaller than twice the batch size {}",
            moco.batch_size
        )));
    }
    Ok((moco.epochs as u64) * (n_tiles / moco.batch_size) as u64)
}

/// Advance training to `target_step`. Stateless stream derivation makes a
/// resumed run reproduce an uninterrupted one bit-exactly.
pub fn train_until(
    state: &mut MoCoState,
    tiles: &[TileImage],
    encoder: &Encoder,
    aug: &AugmentationConfig,
    moco: &MoCoConfig,
    seed: u64,
    target_step: u64,
) -> Result<()> {
    moco.validate()?;
    aug.validate()?;
    let total = total_steps(tiles.len(), moco)?;
    let steps_per_epoch = (tiles.len() / moco.batch_size) as u64;
    if aug.output_size != encoder.cfg.input_size {
        return Err(Error::Config(format!(
            "augmentation output {} does not match encoder input {}",
            aug.output_size, encoder.cfg.input_size
        )));
    }

    // fill the queue with real key embeddings before the first step, so
    // early losses are not measured against easy random negatives
    if state.step == 0 && state.queue_warm_batches < moco.queue_size / moco.batch_size {
        let mut warm_rng = Rng::stream(seed, "moco.queue_warmup");
        while state.queue_warm_batches < moco.queue_size / moco.batch_size {
            let views: Vec<TileF> = (0..moco.batch_size)
                .map(|slot| {
                    let tile = TileF::from_u8(&tiles[warm_rng.below(tiles.len())]);
                    let id = u64::MAX - (state.queue_warm_batches * moco.batch_size + slot) as u64;
                    two_views(&tile, aug, seed, id).key_view
                })
                .collect();
            let (_, k_emb) = encoder.encode_mode(&state.key, &views, BnMode::TrainNoUpdate)?;
            state.queue.enqueue(&k_emb)?;
            state.queue_warm_batches += 1;
        }
    }

    while state.step < target_step.min(total) {
        let step = state.step;
        let epoch = step / steps_per_epoch;
        let pos_in_epoch = (step % steps_per_epoch) as usize;

        // epoch-local shuffled order, derived statelessly
        let mut order: Vec<usize> = (0..tiles.len()).collect();
        let mut epoch_rng = Rng::stream_indexed(seed, "moco.epoch", epoch);
        epoch_rng.shuffle(&mut order);
        let batch_ids = &order[pos_in_epoch * moco.batch_size..(pos_in_epoch + 1) * moco.batch_size];

        // two views per tile; augmentation streams are unique per step slot
        let pairs: Vec<_> = batch_ids
            .par_iter()
            .enumerate()
            .map(|(slot, &ti)| {
                let tile = TileF::from_u8(&tiles[ti]);
                two_views(&tile, aug, seed, step * moco.batch_size as u64 + slot as u64)
            })
            .collect();
        let mut query_views: Vec<TileF> = Vec::with_capacity(moco.batch_size);
        let mut key_views: Vec<TileF> = Vec::with_capacity(moco.batch_size);
        for pair in pairs {
            query_views.push(pair.query_view);
            key_views.push(pair.key_view);
        }

        // key path: momentum encoder, batch stats, no update, no gradient
        let (_, k_emb) = encoder.encode_mode(&state.key, &key_views, BnMode::TrainNoUpdate)?;

        // query path with the contrastive loss
        let batch = tiles_to_tensor(&query_views, encoder.cfg.input_size)?;
        let mut g: Graph<f32> = Graph::new();
        let input = g.input("views", batch.shape());
        let (_, q_emb) = encoder.build(&mut g, &state.query, input)?;
        let loss_node = g.info_nce(q_emb, k_emb.clone(), state.queue.as_tensor(), moco.temperature)?;
        g.forward(&[("views", &batch)], BnMode::Train)?;
        let loss = g.value(loss_node)?.item() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        let grads = g.backward(loss_node)?;
        let buffer_updates = g.buffer_updates().to_vec();

        let lr = cosine_lr(moco.lars.lr, step, total);
        lars_step(&mut state.query, &grads, &mut state.lars, &moco.lars, lr)?;
        state.query.apply_updates(&buffer_updates)?;

        ema_update(&mut state.key, &state.query, moco.momentum)?;
        state.queue.enqueue(&k_emb)?;

        state.history.push(LossRecord { step, epoch, loss, lr });
        state.step += 1;
    }
    Ok(())
}
