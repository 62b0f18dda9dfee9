//! Siamese embedder: a config-driven conv backbone whose tapped blocks feed
//! style heads (batch norm, gram matrix, dense projection).
//!
//! One [`Model`] holds a single parameter set. Every branch of a triplet is
//! run through the same bound parameter leaves on a shared [`Graph`], so the
//! gradients of all branches sum into the same tensors.

mod checkpoint;
mod config;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{BlockConfig, BlockShape, BnPosition, ModelConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BnMode, Graph, RunningStats, Tensor, Var, BN_EPS, BN_MOMENTUM};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Auxiliary output of one style head for one image.
#[derive(Clone, Debug)]
pub struct AuxOutput {
    pub style_vector: Var,
    /// The gram-stage representation entering the dense projection.
    pub raw_gram: Var,
    /// Channel count of the tapped layer.
    pub n_l: usize,
    /// Spatial size (height * width) of the tapped layer.
    pub m_l: usize,
}

/// Per-image outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub embedding: Var,
    pub aux: Vec<AuxOutput>,
}

/// Whether a forward pass evaluates the style heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StyleHeads {
    Compute,
    Skip,
}

/// Parameter leaves recorded on a particular graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Substitutes the leaf used for parameter `index`, e.g. to probe one
    /// parameter's gradient in isolation.
    pub fn set(&mut self, index: usize, var: Var) {
        self.vars[index] = var;
    }
}

// Indices into the parameter list for one block / tap.
#[derive(Clone, Copy, Debug)]
struct BlockParams {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct TapParams {
    block: usize,
    gamma: usize,
    beta: usize,
    style_weight: usize,
    style_bias: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    running: Vec<RunningStats>,
    blocks: Vec<BlockParams>,
    embed_weight: usize,
    embed_bias: usize,
    taps: Vec<TapParams>,
}

impl Model {
    /// Builds a model with He-uniform conv/dense weights, zero biases and
    /// betas, unit gammas. Each parameter draws from its own seeded stream,
    /// and backbone plus embedding head come first, so two configs that
    /// differ only in their style heads share backbone initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        for (stream, p) in model.params.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream as u64);
            let name = p.name.as_str();
            if name.ends_with(".weight") {
                let fan_in: usize = p.tensor.shape()[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                for x in p.tensor.data_mut() {
                    *x = rng.gen_range(-bound..bound);
                }
            } else if name.ends_with(".gamma") {
                p.tensor.data_mut().fill(1.0);
            }
        }
        Ok(model)
    }

    /// Parameter structure for `config`, all values zero (gammas too).
    pub(crate) fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let shapes = config.block_shapes();
        let mut params = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            params.push(Param {
                name,
                tensor: Tensor::zeros(shape).with_requires_grad(true),
            });
            params.len() - 1
        };
        let mut blocks = Vec::new();
        for (i, (b, s)) in config.blocks.iter().zip(&shapes).enumerate() {
            let weight = add(
                format!("block{i}.conv.weight"),
                vec![b.out_channels, s.in_channels, b.kernel, b.kernel],
            );
            let bias = add(format!("block{i}.conv.bias"), vec![b.out_channels]);
            blocks.push(BlockParams { weight, bias });
        }
        let embed_weight = add(
            "embed.weight".into(),
            vec![config.embedding_dim, config.flat_dim()],
        );
        let embed_bias = add("embed.bias".into(), vec![config.embedding_dim]);
        let mut taps = Vec::new();
        let mut running = Vec::new();
        for (j, &block) in config.tap_indices.iter().enumerate() {
            let c = shapes[block].channels;
            let gamma = add(format!("tap{j}.bn.gamma"), vec![c]);
            let beta = add(format!("tap{j}.bn.beta"), vec![c]);
            let style_weight = add(format!("tap{j}.style.weight"), vec![config.style_out_dim, c * c]);
            let style_bias = add(format!("tap{j}.style.bias"), vec![config.style_out_dim]);
            taps.push(TapParams {
                block,
                gamma,
                beta,
                style_weight,
                style_bias,
            });
            running.push(RunningStats::new(c));
        }
        Ok(Self {
            config,
            params,
            running,
            blocks,
            embed_weight,
            embed_bias,
            taps,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    #[cfg(test)]
    pub(crate) fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.tensor.clone().with_requires_grad(requires_grad)))
            .collect();
        Bound { vars }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Adds the gradients that reached the bound leaves into the parameter
    /// gradient buffers.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound) -> Result<()> {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            match g.grad(*v) {
                Some(grad) => p.tensor.accumulate_grad(grad)?,
                None => {
                    if p.tensor.grad().is_none() {
                        p.tensor.zero_grad();
                    }
                }
            }
        }
        Ok(())
    }

    /// Full forward pass. In train mode the style-head batch norms use batch
    /// statistics and update the running stats.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        bound: &Bound,
        images: Var,
        mode: BnMode,
        heads: StyleHeads,
    ) -> Result<Vec<ForwardOutput>> {
        let mut running = self.running.clone();
        let out = self.forward_with_stats(g, bound, images, mode, heads, &mut running)?;
        if mode == BnMode::Train {
            self.running = running;
        }
        Ok(out)
    }

    /// Eval-mode forward pass over a frozen model.
    pub fn forward_eval(
        &self,
        g: &mut Graph,
        bound: &Bound,
        images: Var,
        heads: StyleHeads,
    ) -> Result<Vec<ForwardOutput>> {
        let mut running = self.running.clone();
        self.forward_with_stats(g, bound, images, BnMode::Eval, heads, &mut running)
    }

    fn forward_with_stats(
        &self,
        g: &mut Graph,
        bound: &Bound,
        images: Var,
        mode: BnMode,
        heads: StyleHeads,
        running: &mut [RunningStats],
    ) -> Result<Vec<ForwardOutput>> {
        if bound.vars.len() != self.params.len() {
            return Err(Error::Contract("parameters bound from a different model".into()));
        }
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1..] != self.config.input_shape {
            return Err(Error::dim(format!(
                "image batch {shape:?} does not match [B, {:?}]",
                self.config.input_shape
            )));
        }
        let batch = shape[0];
        let p = |i: usize| bound.vars[i];
        let mut x = images;
        let mut tapped = Vec::new();
        for (i, (b, bp)) in self.config.blocks.iter().zip(&self.blocks).enumerate() {
            x = g.conv2d(x, p(bp.weight), p(bp.bias), 1, b.kernel / 2)?;
            x = g.relu(x)?;
            if self.config.tap_indices.contains(&i) {
                tapped.push(x);
            }
            if b.pool_after {
                x = g.maxpool2(x)?;
            }
        }
        let flat = g.reshape(x, [batch, self.config.flat_dim()])?;
        let emb = g.dense(flat, p(self.embed_weight), p(self.embed_bias))?;

        let mut heads_out = Vec::new();
        if heads == StyleHeads::Compute {
            for ((tp, &feat), stats) in self.taps.iter().zip(&tapped).zip(running.iter_mut()) {
                let s = g.shape(feat).to_vec();
                let (c, m) = (s[1], s[2] * s[3]);
                let mut bn = |g: &mut Graph, v: Var| {
                    g.batchnorm(v, p(tp.gamma), p(tp.beta), stats, mode, BN_EPS, BN_MOMENTUM)
                };
                let gram = match self.config.bn_position {
                    BnPosition::BeforeGram => {
                        let y = bn(g, feat)?;
                        g.gram_matrix(y)?
                    }
                    BnPosition::AfterGram => {
                        let gm = g.gram_matrix(feat)?;
                        bn(g, gm)?
                    }
                    BnPosition::None => g.gram_matrix(feat)?,
                };
                let flat = g.reshape(gram, [batch, c * c])?;
                let style = g.dense(flat, p(tp.style_weight), p(tp.style_bias))?;
                debug_assert_eq!(self.config.blocks[tp.block].out_channels, c);
                heads_out.push((style, gram, c, m));
            }
        }

        let mut outputs = Vec::with_capacity(batch);
        for b in 0..batch {
            let embedding = g.row(emb, b)?;
            let mut aux = Vec::with_capacity(heads_out.len());
            for &(style, gram, n_l, m_l) in &heads_out {
                aux.push(AuxOutput {
                    style_vector: g.row(style, b)?,
                    raw_gram: g.row(gram, b)?,
                    n_l,
                    m_l,
                });
            }
            outputs.push(ForwardOutput { embedding, aux });
        }
        Ok(outputs)
    }

    /// Eval-mode embeddings `[B, embedding_dim]` for a batch `[B, C, H, W]`.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.leaf(images.clone());
        let outs = self.forward_eval(&mut g, &bound, x, StyleHeads::Skip)?;
        let dim = self.config.embedding_dim;
        let mut data = Vec::with_capacity(outs.len() * dim);
        for o in &outs {
            data.extend_from_slice(g.value(o.embedding).data());
        }
        Tensor::new([outs.len(), dim], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            blocks: vec![BlockConfig::new(3, 3, true), BlockConfig::new(4, 3, false)],
            tap_indices: vec![0, 1],
            embedding_dim: 5,
            style_out_dim: 6,
            input_shape: [2, 8, 8],
            bn_position: BnPosition::BeforeGram,
        }
    }

    fn images(b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([b, 2, 8, 8], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(tiny(), 9).unwrap();
        let b = Model::new(tiny(), 9).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Model::new(tiny(), 10).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = ModelConfig {
            tap_indices: vec![2],
            ..tiny()
        };
        assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn init_conventions() {
        let m = Model::new(tiny(), 1).unwrap();
        assert!(m.param("tap0.bn.gamma").unwrap().data().iter().all(|x| *x == 1.0));
        assert!(m.param("tap1.bn.beta").unwrap().data().iter().all(|x| *x == 0.0));
        assert!(m.param("block0.conv.bias").unwrap().data().iter().all(|x| *x == 0.0));
        let w = m.param("block1.conv.weight").unwrap();
        let bound = (6.0f32 / 27.0).sqrt();
        assert!(w.data().iter().all(|x| x.abs() <= bound));
        assert!(w.data().iter().any(|x| *x != 0.0));
    }

    #[test]
    fn style_heads_do_not_shift_backbone_init() {
        let mut cfg = tiny();
        let a = Model::new(cfg.clone(), 3).unwrap();
        cfg.style_out_dim = 11;
        let b = Model::new(cfg, 3).unwrap();
        for name in ["block0.conv.weight", "block1.conv.weight", "embed.weight"] {
            assert_eq!(a.param(name), b.param(name));
        }
    }

    #[test]
    fn output_shapes_follow_config() {
        let mut m = Model::new(tiny(), 2).unwrap();
        let mut g = Graph::new();
        let bound = m.bind(&mut g, true);
        let x = g.leaf(images(3, 0));
        let outs = m.forward(&mut g, &bound, x, BnMode::Train, StyleHeads::Compute).unwrap();
        assert_eq!(outs.len(), 3);
        for o in &outs {
            assert_eq!(g.shape(o.embedding), [5]);
            assert_eq!(o.aux.len(), 2);
            assert_eq!(g.shape(o.aux[0].style_vector), [6]);
            assert_eq!(g.shape(o.aux[0].raw_gram), [3, 3]);
            assert_eq!((o.aux[0].n_l, o.aux[0].m_l), (3, 64));
            assert_eq!(g.shape(o.aux[1].raw_gram), [4, 4]);
            assert_eq!((o.aux[1].n_l, o.aux[1].m_l), (4, 16));
        }
    }

    #[test]
    fn train_forward_updates_running_stats_eval_does_not() {
        let mut m = Model::new(tiny(), 2).unwrap();
        let before = m.running_stats().to_vec();
        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let x = g.leaf(images(2, 1));
        m.forward(&mut g, &bound, x, BnMode::Eval, StyleHeads::Compute).unwrap();
        assert_eq!(m.running_stats(), before.as_slice());
        m.forward(&mut g, &bound, x, BnMode::Train, StyleHeads::Compute).unwrap();
        assert_ne!(m.running_stats(), before.as_slice());
    }

    #[test]
    fn wrong_image_shape_is_a_dimension_error() {
        let m = Model::new(tiny(), 2).unwrap();
        let bad = Tensor::zeros([1, 3, 8, 8]);
        assert!(matches!(m.embed(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn embed_is_row_aligned() {
        let m = Model::new(tiny(), 4).unwrap();
        let batch = images(3, 5);
        let e = m.embed(&batch).unwrap();
        assert_eq!(e.shape(), [3, 5]);
        let single = Tensor::new([1, 2, 8, 8], batch.data()[128..256].to_vec()).unwrap();
        assert_eq!(m.embed(&single).unwrap().data(), &e.data()[5..10]);
    }
}
