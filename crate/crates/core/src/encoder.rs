//! The tile feature extractor: a small residual CNN with a projection head.
//!
//! Layout: 5x5/stride-4 stem with batch norm and a 2x2 max pool, then
//! residual stages (two 3x3 conv blocks each, stride-2 entry from the second
//! stage on), global average pooling, and a linear+ReLU head to the feature
//! dimension D. The projection MLP (D -> D -> d, L2-normalized) exists only
//! for contrastive pre-training; downstream consumers take the D-dim
//! features.

use crate::augment::TileF;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{he_normal, BnMode, Graph, NodeId, ParamSet, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub feature_dim: usize,
    pub projection_dim: usize,
    pub use_residual: bool,
    pub input_size: usize,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 2,
            feature_dim: 128,
            projection_dim: 64,
            use_residual: true,
            input_size: 224,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 8 || self.projection_dim < 8 {
            return Err(Error::Config(format!(
                "feature dim {} and projection dim {} must both be at least 8",
                self.feature_dim, self.projection_dim
            )));
        }
        if self.stage_channels.is_empty() || self.blocks_per_stage == 0 {
            return Err(Error::Config("encoder needs at least one stage and one block".into()));
        }
        if self.input_size < 4 {
            return Err(Error::Config(format!("input size {} too small", self.input_size)));
        }
        Ok(())
    }
}

pub struct Encoder {
    pub cfg: EncoderConfig,
}

struct ConvSpec {
    name: String,
    out_c: usize,
    in_c: usize,
    k: usize,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Encoder { cfg })
    }

    fn conv_specs(&self) -> Vec<ConvSpec> {
        let mut specs = Vec::new();
        let c0 = self.cfg.stage_channels[0];
        specs.push(ConvSpec { name: "stem.conv".into(), out_c: c0, in_c: 3, k: 5 });
        let mut prev = c0;
        for (si, &ch) in self.cfg.stage_channels.iter().enumerate() {
            for bi in 0..self.cfg.blocks_per_stage {
                let in_c = if bi == 0 { prev } else { ch };
                let base = format!("stage{si}.block{bi}");
                specs.push(ConvSpec { name: format!("{base}.conv1"), out_c: ch, in_c, k: 3 });
                specs.push(ConvSpec { name: format!("{base}.conv2"), out_c: ch, in_c: ch, k: 3 });
                let downsample = bi == 0 && si > 0;
                if self.cfg.use_residual && (downsample || in_c != ch) {
                    specs.push(ConvSpec { name: format!("{base}.short"), out_c: ch, in_c, k: 1 });
                }
            }
            prev = ch;
        }
        specs
    }

    /// Deterministic He-style initialization; batch-norm scale 1 / bias 0.
    pub fn init<S: Scalar>(&self, seed: u64) -> ParamSet<S> {
        let mut rng = Rng::stream(seed, "encoder.init");
        let mut ps = ParamSet::new();
        for spec in self.conv_specs() {
            let fan_in = spec.in_c * spec.k * spec.k;
            let w = he_normal(&[spec.out_c, spec.in_c, spec.k, spec.k], fan_in, &mut rng);
            ps.insert_param(&format!("{}.w", spec.name), w).unwrap();
            let bn = bn_name(&spec.name);
            ps.insert_param(&format!("{bn}.gamma"), Tensor::full(&[spec.out_c], S::ONE)).unwrap();
            ps.insert_param(&format!("{bn}.beta"), Tensor::zeros(&[spec.out_c])).unwrap();
            ps.insert_buffer(&format!("{bn}.running_mean"), Tensor::zeros(&[spec.out_c])).unwrap();
            ps.insert_buffer(&format!("{bn}.running_var"), Tensor::full(&[spec.out_c], S::ONE))
                .unwrap();
        }
        let last = *self.cfg.stage_channels.last().unwrap();
        let d = self.cfg.feature_dim;
        let p = self.cfg.projection_dim;
        ps.insert_param("head.fc.w", he_normal(&[last, d], last, &mut rng)).unwrap();
        ps.insert_param("head.fc.b", Tensor::zeros(&[d])).unwrap();
        ps.insert_param("proj.fc1.w", he_normal(&[d, d], d, &mut rng)).unwrap();
        ps.insert_param("proj.fc1.b", Tensor::zeros(&[d])).unwrap();
        ps.insert_param("proj.fc2.w", he_normal(&[d, p], d, &mut rng)).unwrap();
        ps.insert_param("proj.fc2.b", Tensor::zeros(&[p])).unwrap();
        ps
    }

    fn bind_bn<S: Scalar>(
        g: &mut Graph<S>,
        ps: &ParamSet<S>,
        conv_name: &str,
    ) -> Result<(NodeId, NodeId, NodeId, NodeId)> {
        let bn = bn_name(conv_name);
        let fetch = |ps: &ParamSet<S>, key: &str| -> Result<Tensor<S>> {
            ps.get(key).cloned().ok_or_else(|| Error::Data(format!("missing parameter '{key}'")))
        };
        let gamma = fetch(ps, &format!("{bn}.gamma"))?;
        let beta = fetch(ps, &format!("{bn}.beta"))?;
        let rm = fetch(ps, &format!("{bn}.running_mean"))?;
        let rv = fetch(ps, &format!("{bn}.running_var"))?;
        Ok((
            g.param(&format!("{bn}.gamma"), &gamma),
            g.param(&format!("{bn}.beta"), &beta),
            g.buffer(&format!("{bn}.running_mean"), &rm),
            g.buffer(&format!("{bn}.running_var"), &rv),
        ))
    }

    fn conv_bn<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamSet<S>,
        x: NodeId,
        conv_name: &str,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let w = ps
            .get(&format!("{conv_name}.w"))
            .cloned()
            .ok_or_else(|| Error::Data(format!("missing parameter '{conv_name}.w'")))?;
        let w = g.param(&format!("{conv_name}.w"), &w);
        let h = g.conv2d(x, w, stride, pad)?;
        let (gamma, beta, rm, rv) = Self::bind_bn(g, ps, conv_name)?;
        g.batch_norm(h, gamma, beta, rm, rv, self.cfg.bn_epsilon, self.cfg.bn_momentum)
    }

    /// Append the backbone and projection head to `g`, reading weights from
    /// `ps`. Returns (feature node `[B,D]`, embedding node `[B,d]`).
    pub fn build<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamSet<S>,
        input: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let mut h = self.conv_bn(g, ps, input, "stem.conv", 4, 2)?;
        h = g.relu(h);
        if g.shape_of(h)[2] >= 2 && g.shape_of(h)[3] >= 2 {
            h = g.max_pool(h, 2, 2)?;
        }

        for (si, &ch) in self.cfg.stage_channels.iter().enumerate() {
            for bi in 0..self.cfg.blocks_per_stage {
                let base = format!("stage{si}.block{bi}");
                let stride = if bi == 0 && si > 0 { 2 } else { 1 };
                let in_shape = g.shape_of(h).to_vec();
                let mut out = self.conv_bn(g, ps, h, &format!("{base}.conv1"), stride, 1)?;
                out = g.relu(out);
                out = self.conv_bn(g, ps, out, &format!("{base}.conv2"), 1, 1)?;
                if self.cfg.use_residual {
                    let shortcut = if stride == 1 && in_shape[1] == ch {
                        h
                    } else {
                        self.conv_bn(g, ps, h, &format!("{base}.short"), stride, 0)?
                    };
                    out = g.add(out, shortcut)?;
                }
                h = g.relu(out);
            }
        }

        let pooled = g.global_avg_pool(h)?;
        let feats = self.linear(g, ps, pooled, "head.fc")?;
        let feats = g.relu(feats);

        let z = self.linear(g, ps, feats, "proj.fc1")?;
        let z = g.relu(z);
        let z = self.linear(g, ps, z, "proj.fc2")?;
        let emb = g.l2_normalize(z, 1)?;
        Ok((feats, emb))
    }

    fn linear<S: Scalar>(
        &self,
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

    /// Eval-mode feature extraction for a batch of tiles: `[B, D]`.
    pub fn encode(&self, ps: &ParamSet<f32>, tiles: &[TileF]) -> Result<Tensor<f32>> {
        self.encode_mode(ps, tiles, BnMode::Eval).map(|(f, _)| f)
    }

    /// Forward in an explicit batch-norm mode; returns (features, embeddings).
    pub fn encode_mode(
        &self,
        ps: &ParamSet<f32>,
        tiles: &[TileF],
        bn: BnMode,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if tiles.is_empty() {
            return Err(Error::Data("empty tile batch".into()));
        }
        let batch = tiles_to_tensor(tiles, self.cfg.input_size)?;
        let mut g: Graph<f32> = Graph::new();
        let input = g.input("tiles", batch.shape());
        let (feats, emb) = self.build(&mut g, ps, input)?;
        g.forward(&[("tiles", &batch)], bn)?;
        Ok((g.value(feats)?.clone(), g.value(emb)?.clone()))
    }

    /// Run just the projection head on feature rows; rows are L2-normalized.
    /// Returns the embeddings plus the count of zero feature rows (flagged,
    /// mapped to zero embeddings).
    pub fn project(&self, ps: &ParamSet<f32>, features: &Tensor<f32>) -> Result<(Tensor<f32>, usize)> {
        if features.rank() != 2 || features.shape()[1] != self.cfg.feature_dim {
            return Err(Error::shape(format!(
                "expected [B, {}] features, got {:?}",
                self.cfg.feature_dim,
                features.shape()
            )));
        }
        let mut g: Graph<f32> = Graph::new();
        let input = g.input("features", features.shape());
        let z = self.linear(&mut g, ps, input, "proj.fc1")?;
        let z = g.relu(z);
        let z = self.linear(&mut g, ps, z, "proj.fc2")?;
        let emb = g.l2_normalize(z, 1)?;
        g.forward(&[("features", features)], BnMode::Eval)?;
        Ok((g.value(emb)?.clone(), g.zero_norm_count()))
    }
}

fn bn_name(conv_name: &str) -> String {
    match conv_name.strip_suffix(".conv") {
        Some(prefix) => format!("{prefix}.bn"),
        None => format!("{conv_name}.bn"),
    }
}

/// Pack HWC tiles into a `[B, 3, S, S]` tensor (CHW planes).
pub fn tiles_to_tensor(tiles: &[TileF], expect_size: usize) -> Result<Tensor<f32>> {
    let b = tiles.len();
    let s = expect_size;
    let mut data = vec![0.0f32; b * 3 * s * s];
    for (bi, tile) in tiles.iter().enumerate() {
        if tile.size != s {
            return Err(Error::shape(format!("tile {bi} has size {}, expected {s}", tile.size)));
        }
        let base = bi * 3 * s * s;
        for y in 0..s {
            for x in 0..s {
                let src = (y * s + x) * 3;
                for c in 0..3 {
                    data[base + c * s * s + y * s + x] = tile.data[src + c];
                }
            }
        }
    }
    Tensor::new(vec![b, 3, s, s], data)
}
