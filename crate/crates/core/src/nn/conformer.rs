//! Conformer blocks: half-step FFN, self-attention, convolution module,
//! half-step FFN, final layer norm.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{sinusoidal_positions, DepthwiseConv1d, LayerNorm, Linear};
use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub kernel: usize,
}

impl ConformerConfig {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            heads: 4,
            ff_mult: 4,
            kernel: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("width {} not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("kernel", format!("kernel width {} must be odd", self.kernel)));
        }
        if self.ff_mult == 0 {
            return Err(Error::config("ff_mult", "must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(ps: &mut ParamStore, name: &str, cfg: &ConformerConfig, rng: &mut impl Rng) -> Self {
        let hidden = cfg.d_model * cfg.ff_mult;
        Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), cfg.d_model),
            up: Linear::new(ps, &format!("{name}.up"), cfg.d_model, hidden, rng),
            down: Linear::new(ps, &format!("{name}.down"), hidden, cfg.d_model, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, ps, x)?;
        let h = self.up.forward(tape, ps, h)?;
        let h = tape.silu(h);
        self.down.forward(tape, ps, h)
    }
}

#[derive(Clone, Debug)]
struct SelfAttention {
    norm: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

impl SelfAttention {
    fn new(ps: &mut ParamStore, name: &str, cfg: &ConformerConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), d),
            query: Linear::new(ps, &format!("{name}.query"), d, d, rng),
            key: Linear::new(ps, &format!("{name}.key"), d, d, rng),
            value: Linear::new(ps, &format!("{name}.value"), d, d, rng),
            out: Linear::new(ps, &format!("{name}.out"), d, d, rng),
            heads: cfg.heads,
            head_dim: cfg.head_dim(),
        }
    }

    fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, ps, x)?;
        let q = self.query.forward(tape, ps, h)?;
        let k = self.key.forward(tape, ps, h)?;
        let v = self.value.forward(tape, ps, h)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let start = i * self.head_dim;
            let qh = tape.slice_cols(q, start, self.head_dim)?;
            let kh = tape.slice_cols(k, start, self.head_dim)?;
            let vh = tape.slice_cols(v, start, self.head_dim)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let attn = tape.scaled_softmax_rows(scores, scale)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let joined = tape.concat_cols(&heads)?;
        self.out.forward(tape, ps, joined)
    }
}

/// Pointwise → GLU → depthwise → norm → Swish → pointwise.
#[derive(Clone, Debug)]
struct ConvModule {
    norm: LayerNorm,
    pointwise_in: Linear,
    depthwise: DepthwiseConv1d,
    mid_norm: LayerNorm,
    pointwise_out: Linear,
}

impl ConvModule {
    fn new(ps: &mut ParamStore, name: &str, cfg: &ConformerConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), d),
            pointwise_in: Linear::new(ps, &format!("{name}.pointwise_in"), d, 2 * d, rng),
            depthwise: DepthwiseConv1d::new(ps, &format!("{name}.depthwise"), d, cfg.kernel, rng),
            mid_norm: LayerNorm::new(ps, &format!("{name}.mid_norm"), d),
            pointwise_out: Linear::new(ps, &format!("{name}.pointwise_out"), d, d, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, ps, x)?;
        let h = self.pointwise_in.forward(tape, ps, h)?;
        let h = tape.glu(h)?;
        let h = self.depthwise.forward(tape, ps, h)?;
        let h = self.mid_norm.forward(tape, ps, h)?;
        let h = tape.silu(h);
        self.pointwise_out.forward(tape, ps, h)
    }
}

/// Parameter handles of one Conformer block.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    cfg: ConformerConfig,
    ff1: FeedForward,
    attn: SelfAttention,
    conv: ConvModule,
    ff2: FeedForward,
    final_norm: LayerNorm,
}

impl ConformerBlock {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: ConformerConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            ff1: FeedForward::new(ps, &format!("{name}.ff1"), &cfg, rng),
            attn: SelfAttention::new(ps, &format!("{name}.attn"), &cfg, rng),
            conv: ConvModule::new(ps, &format!("{name}.conv"), &cfg, rng),
            ff2: FeedForward::new(ps, &format!("{name}.ff2"), &cfg, rng),
            final_norm: LayerNorm::new(ps, &format!("{name}.final_norm"), cfg.d_model),
        })
    }

    pub fn config(&self) -> &ConformerConfig {
        &self.cfg
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.cfg.d_model {
            return Err(Error::dim(format!(
                "conformer block of width {} fed width {width}",
                self.cfg.d_model
            )));
        }
        let f = self.ff1.forward(tape, ps, x)?;
        let f = tape.scale(f, 0.5);
        let x = tape.add(x, f)?;
        let a = self.attn.forward(tape, ps, x)?;
        let x = tape.add(x, a)?;
        let c = self.conv.forward(tape, ps, x)?;
        let x = tape.add(x, c)?;
        let f = self.ff2.forward(tape, ps, x)?;
        let f = tape.scale(f, 0.5);
        let x = tape.add(x, f)?;
        self.final_norm.forward(tape, ps, x)
    }
}

/// Inference-only forward pass of a single block.
pub fn conformer_block_forward(input: &Tensor, block: &ConformerBlock, ps: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = block.forward(&mut tape, ps, x)?;
    Ok(tape.value(y).clone())
}

/// Positional encoding followed by a sequence of Conformer blocks.
#[derive(Clone, Debug)]
pub struct ConformerStack {
    blocks: Vec<ConformerBlock>,
    d_model: usize,
}

impl ConformerStack {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        depth: usize,
        cfg: ConformerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| ConformerBlock::new(ps, &format!("{name}.{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            d_model: cfg.d_model,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let len = tape.value(x).rows();
        let pe = tape.constant(sinusoidal_positions(len, self.d_model));
        let mut h = tape.add(x, pe)?;
        for block in &self.blocks {
            h = block.forward(tape, ps, h)?;
        }
        Ok(h)
    }
}
