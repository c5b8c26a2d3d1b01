//! Weakly-supervised heads over frozen per-slide feature matrices.
//!
//! Three architectures share one training loop:
//! - Weldon: per-tile linear scorer (fc-128, fc-1), average of the R top and
//!   R bottom scores, sigmoid.
//! - Chowder: per-tile fc-1 scorer, the 2R extreme scores feed an MLP with
//!   200 and 100 sigmoid units.
//! - DeepMIL: fc-128 embedding, gated attention (tanh/sigmoid, 128 hidden),
//!   attention-weighted pooling, then a 128/64 ReLU classifier.
//!
//! Binary tasks use a scalar sigmoid output with BCE; multiclass widens the
//! final layer to C outputs under softmax cross-entropy, with per-class
//! extreme-score selection for Weldon and Chowder.

mod adam;

pub use adam::{adam_step, AdamConfig, AdamState};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::rng::Rng;
use crate::tensor::{bottomk, topk, xavier_normal, he_normal, BnMode, Graph, NodeId, ParamSet, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Weldon,
    Chowder,
    DeepMil,
}

impl HeadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Weldon => "weldon",
            HeadKind::Chowder => "chowder",
            HeadKind::DeepMil => "deepmil",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "weldon" => Ok(HeadKind::Weldon),
            "chowder" => Ok(HeadKind::Chowder),
            "deepmil" => Ok(HeadKind::DeepMil),
            other => Err(Error::Config(format!("unknown head kind '{other}'"))),
        }
    }

    fn code(self) -> u8 {
        match self {
            HeadKind::Weldon => 0,
            HeadKind::Chowder => 1,
            HeadKind::DeepMil => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(HeadKind::Weldon),
            1 => Some(HeadKind::Chowder),
            2 => Some(HeadKind::DeepMil),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MilTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// 2 selects the binary scalar head; larger values the softmax head.
    pub num_classes: usize,
    /// Extreme-score count R.
    pub r: usize,
}

impl Default for MilTrainConfig {
    fn default() -> Self {
        MilTrainConfig {
            epochs: 15,
            batch_size: 16,
            adam: AdamConfig::default(),
            num_classes: 2,
            r: 5,
        }
    }
}

impl MilTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes {} must be at least 2", self.num_classes)));
        }
        if self.r == 0 || self.batch_size == 0 {
            return Err(Error::Config("r and batch_size must be positive".into()));
        }
        Ok(())
    }

    fn binary(&self) -> bool {
        self.num_classes == 2
    }

    fn out_classes(&self) -> usize {
        if self.binary() {
            1
        } else {
            self.num_classes
        }
    }
}

/// One training bag: a slide's frozen features plus its label.
#[derive(Clone, Copy)]
pub struct Bag<'a> {
    pub features: &'a FeatureMatrix,
    pub label: u32,
}

/// A trained head.
#[derive(Debug, Clone)]
pub struct MilModel {
    pub kind: HeadKind,
    pub num_classes: usize,
    pub r: usize,
    pub feature_dim: usize,
    pub params: ParamSet<f32>,
    pub config: MilTrainConfig,
}

/// Head output: class probabilities plus an R-shrink warning for tiny bags.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// `[p]` for binary heads, per-class probabilities otherwise.
    pub probs: Vec<f32>,
    /// Set when the bag was smaller than 2R and R was shrunk at inference.
    pub shrunk_r: Option<usize>,
}

impl Prediction {
    /// Probability of the positive class (binary heads).
    pub fn positive(&self) -> f32 {
        self.probs[0]
    }
}

// ---------------------------------------------------------------------------
// extreme scores
// ---------------------------------------------------------------------------

/// The R largest scores (descending) followed by the R smallest of the
/// remaining scores (ascending). Index sets are disjoint; ties break toward
/// the lower index.
pub fn extreme_scores<S: Scalar>(scores: &[S], r: usize) -> Result<(Vec<S>, Vec<usize>)> {
    if scores.len() < 2 * r {
        return Err(Error::Data(format!(
            "bag of {} scores cannot supply {r} top and {r} bottom",
            scores.len()
        )));
    }
    let (top_vals, top_idx) = topk(scores, r);
    let taken: std::collections::HashSet<usize> = top_idx.iter().copied().collect();
    let remaining: Vec<usize> = (0..scores.len()).filter(|i| !taken.contains(i)).collect();
    let rem_scores: Vec<S> = remaining.iter().map(|&i| scores[i]).collect();
    let (bot_vals, bot_local) = bottomk(&rem_scores, r);
    let bot_idx: Vec<usize> = bot_local.iter().map(|&i| remaining[i]).collect();
    let mut values = top_vals;
    values.extend(bot_vals);
    let mut indices = top_idx;
    indices.extend(bot_idx);
    Ok((values, indices))
}

// ---------------------------------------------------------------------------
// parameter initialization
// ---------------------------------------------------------------------------

/// Initialize head parameters: He fan-in ahead of ReLU, Xavier elsewhere.
pub fn init_head<S: Scalar>(
    kind: HeadKind,
    feature_dim: usize,
    cfg: &MilTrainConfig,
    seed: u64,
) -> ParamSet<S> {
    fn xavier<S: Scalar>(ps: &mut ParamSet<S>, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) {
        ps.insert_param(&format!("{name}.w"), xavier_normal(&[fan_in, fan_out], fan_in, fan_out, rng))
            .unwrap();
        ps.insert_param(&format!("{name}.b"), Tensor::zeros(&[fan_out])).unwrap();
    }
    fn he<S: Scalar>(ps: &mut ParamSet<S>, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) {
        ps.insert_param(&format!("{name}.w"), he_normal(&[fan_in, fan_out], fan_in, rng)).unwrap();
        ps.insert_param(&format!("{name}.b"), Tensor::zeros(&[fan_out])).unwrap();
    }
    let mut rng = Rng::stream(seed, "mil.init");
    let mut ps = ParamSet::new();
    let out_c = cfg.out_classes();
    match kind {
        HeadKind::Weldon => {
            xavier(&mut ps, &mut rng, "scorer.fc1", feature_dim, 128);
            xavier(&mut ps, &mut rng, "scorer.fc2", 128, out_c);
        }
        HeadKind::Chowder => {
            xavier(&mut ps, &mut rng, "scorer.fc", feature_dim, out_c);
            xavier(&mut ps, &mut rng, "mlp.fc1", 2 * cfg.r, 200);
            xavier(&mut ps, &mut rng, "mlp.fc2", 200, 100);
            xavier(&mut ps, &mut rng, "mlp.fc3", 100, out_c);
        }
        HeadKind::DeepMil => {
            xavier(&mut ps, &mut rng, "embed", feature_dim, 128);
            xavier(&mut ps, &mut rng, "att.v", 128, 128);
            xavier(&mut ps, &mut rng, "att.u", 128, 128);
            xavier(&mut ps, &mut rng, "att.w", 128, 1);
            he(&mut ps, &mut rng, "clf.fc1", 128, 128);
            he(&mut ps, &mut rng, "clf.fc2", 128, 64);
            xavier(&mut ps, &mut rng, "clf.fc3", 64, out_c);
        }
    }
    ps
}

// ---------------------------------------------------------------------------
// forward graphs
// ---------------------------------------------------------------------------

pub(crate) struct HeadForward<S: Scalar> {
    pub graph: Graph<S>,
    /// `[1]` sigmoid probability or `[1, C]` softmax probabilities.
    pub prob: NodeId,
    /// DeepMIL attention weights `[N]`.
    pub attention: Option<NodeId>,
    pub loss: Option<NodeId>,
    pub shrunk_r: Option<usize>,
}

fn linear<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParamSet<S>,
    x: NodeId,
    name: &str,
) -> Result<NodeId> {
    let fetch = |key: &str| -> Result<Tensor<S>> {
        ps.get(key).cloned().ok_or_else(|| Error::Data(format!("missing parameter '{key}'")))
    };
    let w = fetch(&format!("{name}.w"))?;
    let b = fetch(&format!("{name}.b"))?;
    let w = g.param(&format!("{name}.w"), &w);
    let b = g.param(&format!("{name}.b"), &b);
    let h = g.matmul(x, w)?;
    g.add(h, b)
}

/// Extreme selection for one score column, with optional inference-time
/// R shrinking and Chowder-style padding back to 2R.
fn select_extremes<S: Scalar>(
    scores: &[S],
    r: usize,
    allow_shrink: bool,
    pad_to_2r: bool,
) -> Result<(Vec<usize>, Vec<usize>, Option<usize>)> {
    let n = scores.len();
    let (r_eff, shrunk) = if n >= 2 * r {
        (r, None)
    } else if allow_shrink && n >= 2 {
        (n / 2, Some(n / 2))
    } else {
        return Err(Error::Data(format!("bag of {n} tiles cannot supply {r} top and {r} bottom scores")));
    };
    let (_, idx) = extreme_scores(scores, r_eff)?;
    let (mut top, mut bottom): (Vec<usize>, Vec<usize>) =
        (idx[..r_eff].to_vec(), idx[r_eff..].to_vec());
    if pad_to_2r {
        while top.len() < r {
            top.push(*top.last().unwrap());
        }
        while bottom.len() < r {
            bottom.push(*bottom.last().unwrap());
        }
    }
    Ok((top, bottom, shrunk))
}

/// Build and run a head graph over one bag. For Weldon/Chowder the graph is
/// executed once to obtain tile scores, extended with the value-dependent
/// extreme-score selection, and executed again.
pub(crate) fn forward_head<S: Scalar>(
    kind: HeadKind,
    params: &ParamSet<S>,
    feats: &Tensor<S>,
    cfg: &MilTrainConfig,
    target: Option<u32>,
    allow_shrink: bool,
) -> Result<HeadForward<S>> {
    let n = feats.shape()[0];
    if n == 0 {
        return Err(Error::Data("empty bag".into()));
    }
    let binary = cfg.binary();
    let out_c = cfg.out_classes();
    let mut g: Graph<S> = Graph::new();
    let x = g.constant(feats.clone());
    let mut shrunk_all: Option<usize> = None;

    let (logit, attention) = match kind {
        HeadKind::DeepMil => {
            let h = linear(&mut g, params, x, "embed")?;
            let a1 = linear(&mut g, params, h, "att.v")?;
            let a1 = g.tanh(a1);
            let a2 = linear(&mut g, params, h, "att.u")?;
            let a2 = g.sigmoid(a2);
            let gated = g.mul(a1, a2)?;
            let att_logits = linear(&mut g, params, gated, "att.w")?;
            let att_flat = g.reshape(att_logits, &[n])?;
            let weights = g.bag_softmax(att_flat)?;
            let pooled = g.attn_pool(weights, h)?;
            let z1 = linear(&mut g, params, pooled, "clf.fc1")?;
            let z1 = g.relu(z1);
            let z2 = linear(&mut g, params, z1, "clf.fc2")?;
            let z2 = g.relu(z2);
            let logits = linear(&mut g, params, z2, "clf.fc3")?;
            (logits, Some(weights))
        }
        HeadKind::Weldon => {
            let s1 = linear(&mut g, params, x, "scorer.fc1")?;
            let scores = linear(&mut g, params, s1, "scorer.fc2")?; // [N, out_c]
            g.forward(&[], BnMode::Eval)?;
            let score_vals = g.value(scores)?.clone();
            let mut class_logits = Vec::with_capacity(out_c);
            for c in 0..out_c {
                let col: Vec<S> = (0..n).map(|i| score_vals.data()[i * out_c + c]).collect();
                let (top, bottom, shrunk) = select_extremes(&col, cfg.r, allow_shrink, false)?;
                shrunk_all = shrunk_all.or(shrunk);
                let col_node = g.col(scores, c)?;
                let picked: Vec<usize> = top.iter().chain(bottom.iter()).copied().collect();
                let sel = g.gather(col_node, &picked)?;
                class_logits.push(g.mean_all(sel));
            }
            let logits = if out_c == 1 {
                class_logits[0]
            } else {
                let cat = g.concat(&class_logits, 0)?;
                g.reshape(cat, &[1, out_c])?
            };
            (logits, None)
        }
        HeadKind::Chowder => {

            let scores = linear(&mut g, params, x, "scorer.fc")?; // [N, out_c]
            g.forward(&[], BnMode::Eval)?;
            let score_vals = g.value(scores)?.clone();
            let mut rows = Vec::with_capacity(out_c);
            for c in 0..out_c {
                let col: Vec<S> = (0..n).map(|i| score_vals.data()[i * out_c + c]).collect();
                let (top, bottom, shrunk) = select_extremes(&col, cfg.r, allow_shrink, true)?;
                shrunk_all = shrunk_all.or(shrunk);
                let col_node = g.col(scores, c)?;
                let picked: Vec<usize> = top.iter().chain(bottom.iter()).copied().collect();
                let sel = g.gather(col_node, &picked)?;
                rows.push(g.reshape(sel, &[1, 2 * cfg.r])?);
            }
            let stacked = if out_c == 1 { rows[0] } else { g.concat(&rows, 0)? }; // [out_c, 2R]
            let h1 = linear(&mut g, params, stacked, "mlp.fc1")?;
            let h1 = g.sigmoid(h1);
            let h2 = linear(&mut g, params, h1, "mlp.fc2")?;
            let h2 = g.sigmoid(h2);
            let logits = if out_c == 1 {
                let z = linear(&mut g, params, h2, "mlp.fc3")?; // [1,1]
                g.reshape(z, &[1])?
            } else {
                // per-class final row: diag(H W) + b
                let w = params.get("mlp.fc3.w").cloned().unwrap();
                let b = params.get("mlp.fc3.b").cloned().unwrap();
                let w = g.param("mlp.fc3.w", &w);
                let b = g.param("mlp.fc3.b", &b);
                let hw = g.matmul(h2, w)?; // [C, C]
                let mut eye = Tensor::zeros(&[out_c, out_c]);
                for c in 0..out_c {
                    eye.data_mut()[c * out_c + c] = S::ONE;
                }
                let eye = g.constant(eye);
                let masked = g.mul(hw, eye)?;
                let diag = g.sum_axis(masked, 1)?; // [C]
                let z = g.add(diag, b)?;
                g.reshape(z, &[1, out_c])?
            };
            (logits, None)
        }
    };

    // binary heads produce a [N?]=[1] logit; make shapes uniform
    let (prob, loss) = if binary {
        let flat = if g.shape_of(logit) == [1] { logit } else { g.reshape(logit, &[1])? };
        let prob = g.sigmoid(flat);
        let loss = match target {
            Some(t) => Some(g.sigmoid_bce(flat, Tensor::new(vec![1], vec![S::from_f64(t as f64)])?)?),
            None => None,
        };
        (prob, loss)
    } else {
        let prob = g.softmax(logit, 1)?;
        let loss = match target {
            Some(t) => {
                if t as usize >= cfg.num_classes {
                    return Err(Error::Data(format!(
                        "label {t} out of range for {} classes",
                        cfg.num_classes
                    )));
                }
                Some(g.softmax_ce(logit, vec![t as usize])?)
            }
            None => None,
        };
        (prob, loss)
    };

    if kind == HeadKind::DeepMil {
        g.forward(&[], BnMode::Eval)?;
    } else {
        g.forward_extend(BnMode::Eval)?;
    }
    Ok(HeadForward { graph: g, prob, attention, loss, shrunk_r: shrunk_all })
}

/// Head graph with its training-loss node, for external gradient checking.
pub fn head_loss_graph<S: Scalar>(
    kind: HeadKind,
    params: &ParamSet<S>,
    feats: &Tensor<S>,
    cfg: &MilTrainConfig,
    target: u32,
) -> Result<(Graph<S>, NodeId)> {
    let hf = forward_head(kind, params, feats, cfg, Some(target), false)?;
    let loss = hf.loss.unwrap();
    Ok((hf.graph, loss))
}

fn feats_tensor(fm: &FeatureMatrix) -> Result<Tensor<f32>> {
    Tensor::new(vec![fm.tile_count(), fm.dim], fm.data.clone())
}

/// Class probabilities for one bag.
pub fn predict(model: &MilModel, fm: &FeatureMatrix) -> Result<Prediction> {
    if fm.dim != model.feature_dim {
        return Err(Error::shape(format!(
            "bag feature dim {} does not match model dim {}",
            fm.dim, model.feature_dim
        )));
    }
    let cfg = MilTrainConfig {
        num_classes: model.num_classes,
        r: model.r,
        ..model.config.clone()
    };
    let feats = feats_tensor(fm)?;
    let hf = forward_head(model.kind, &model.params, &feats, &cfg, None, true)?;
    let probs = hf.graph.value(hf.prob)?.data().to_vec();
    Ok(Prediction { probs, shrunk_r: hf.shrunk_r })
}

/// DeepMIL attention weights for one bag (per retained tile).
pub fn attention_weights(model: &MilModel, fm: &FeatureMatrix) -> Result<Vec<f32>> {
    if model.kind != HeadKind::DeepMil {
        return Err(Error::Config("attention weights exist only for the DeepMIL head".into()));
    }
    let cfg = MilTrainConfig { num_classes: model.num_classes, r: model.r, ..model.config.clone() };
    let feats = feats_tensor(fm)?;
    let hf = forward_head(model.kind, &model.params, &feats, &cfg, None, true)?;
    Ok(hf.graph.value(hf.attention.unwrap())?.data().to_vec())
}

/// Train a head on labeled bags. Features stay frozen; gradients accumulate
/// across the bags of each batch and one Adam step applies per batch.
pub fn train_mil(
    kind: HeadKind,
    bags: &[Bag<'_>],
    cfg: &MilTrainConfig,
    seed: u64,
) -> Result<(MilModel, Vec<f64>)> {
    cfg.validate()?;
    if bags.is_empty() {
        return Err(Error::Data("no training bags".into()));
    }
    let feature_dim = bags[0].features.dim;
    // every class must appear in the training set
    let mut seen = vec![false; cfg.num_classes];
    for bag in bags {
        if bag.label as usize >= cfg.num_classes {
            return Err(Error::Data(format!(
                "label {} out of range for {} classes",
                bag.label, cfg.num_classes
            )));
        }
        seen[bag.label as usize] = true;
        if bag.features.dim != feature_dim {
            return Err(Error::shape(format!(
                "bag {} has dim {}, expected {feature_dim}",
                bag.features.slide_id, bag.features.dim
            )));
        }
        let n = bag.features.tile_count();
        if n == 0 {
            return Err(Error::Data(format!("bag {} is empty", bag.features.slide_id)));
        }
        if kind != HeadKind::DeepMil && n < 2 * cfg.r {
            return Err(Error::Data(format!(
                "bag {} has {n} tiles, need at least {} for training",
                bag.features.slide_id,
                2 * cfg.r
            )));
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Data(format!("class {missing} absent from the training set")));
    }

    let mut params: ParamSet<f32> = init_head(kind, feature_dim, cfg, seed);
    let mut adam = AdamState::zeros_like(&params);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..bags.len()).collect();
        let mut rng = Rng::stream_indexed(seed, "mil.epoch", epoch as u64);
        rng.shuffle(&mut order);

        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad_acc: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            let scale = 1.0 / batch.len() as f64;
            for &bi in batch {
                let bag = &bags[bi];
                let feats = feats_tensor(bag.features)?;
                let mut hf = forward_head(kind, &params, &feats, cfg, Some(bag.label), false)?;
                let loss_node = hf.loss.unwrap();
                let loss = hf.graph.value(loss_node)?.item() as f64;
                epoch_loss += loss;
                let grads = hf.graph.backward(loss_node)?;
                for (name, gt) in grads {
                    let scaled = gt.map(|v| v * scale as f32);
                    match grad_acc.get_mut(&name) {
                        Some(acc) => {
                            let sum: Vec<f32> =
                                acc.data().iter().zip(scaled.data()).map(|(a, b)| a + b).collect();
                            *acc = Tensor::new(acc.shape().to_vec(), sum)?;
                        }
                        None => {
                            grad_acc.insert(name, scaled);
                        }
                    }
                }
            }
            adam_step(&mut params, &grad_acc, &mut adam, &cfg.adam)?;
        }
        epoch_losses.push(epoch_loss / bags.len() as f64);
    }

    Ok((
        MilModel {
            kind,
            num_classes: cfg.num_classes,
            r: cfg.r,
            feature_dim,
            params,
            config: cfg.clone(),
        },
        epoch_losses,
    ))
}

/// Write per-epoch training losses as `epoch,loss` CSV.
pub fn write_training_log(path: &Path, losses: &[f64]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,loss")?;
    for (e, l) in losses.iter().enumerate() {
        writeln!(f, "{e},{l:.6}")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

const MIL_MAGIC: &[u8; 4] = b"MILM";
const MIL_VERSION: u32 = 1;

impl MilModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MIL_MAGIC);
        out.extend_from_slice(&MIL_VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.r as u32).to_le_bytes());
        out.extend_from_slice(&(self.feature_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.config.epochs as u32).to_le_bytes());
        out.extend_from_slice(&(self.config.batch_size as u32).to_le_bytes());
        for v in [
            self.config.adam.lr,
            self.config.adam.beta1,
            self.config.adam.beta2,
            self.config.adam.eps,
            self.config.adam.weight_decay,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.params.to_bytes());
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 69 || &bytes[0..4] != MIL_MAGIC {
            return Err(Error::Format { offset: Some(0), msg: "bad magic, expected MILM".into() });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != MIL_VERSION {
            return Err(Error::Format { offset: Some(4), msg: format!("unsupported version {version}") });
        }
        let kind = HeadKind::from_code(bytes[8])
            .ok_or_else(|| Error::Format { offset: Some(8), msg: format!("unknown head code {}", bytes[8]) })?;
        let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let num_classes = u(9);
        let r = u(13);
        let feature_dim = u(17);
        let epochs = u(21);
        let batch_size = u(25);
        let f = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let adam = AdamConfig {
            lr: f(29),
            beta1: f(37),
            beta2: f(45),
            eps: f(53),
            weight_decay: f(61),
        };
        let params = ParamSet::from_bytes(&bytes[69..])?;
        Ok(MilModel {
            kind,
            num_classes,
            r,
            feature_dim,
            params,
            config: MilTrainConfig { epochs, batch_size, adam, num_classes, r },
        })
    }
}

#[cfg(test)]
mod tests;
