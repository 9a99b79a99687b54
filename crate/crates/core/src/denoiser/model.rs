//! Token denoiser and embedding refiner sharing one parameter store.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{lookup_sum, Codebooks, TokenMatrix};
use crate::error::{Error, Result};
use crate::nn::kernels::{argmax, log_sum_exp, softmax_in_place};
use crate::nn::{Checkpoint, ConformerConfig, ConformerStack, Linear, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub kernel: usize,
    /// Conformer blocks in the token denoiser.
    pub td_blocks: usize,
    /// Conformer blocks in the embedding refiner.
    pub er_blocks: usize,
    /// Leading token groups predicted by the denoiser.
    pub groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            ff_mult: 4,
            kernel: 7,
            td_blocks: 4,
            er_blocks: 2,
            groups: 2,
        }
    }
}

impl DenoiserConfig {
    /// Stack depths used at full scale (12 and 6 blocks).
    pub fn reference() -> Self {
        Self {
            d_model: 128,
            td_blocks: 12,
            er_blocks: 6,
            ..Self::default()
        }
    }

    pub fn conformer(&self) -> ConformerConfig {
        ConformerConfig {
            d_model: self.d_model,
            heads: self.heads,
            ff_mult: self.ff_mult,
            kernel: self.kernel,
        }
    }

    /// Checks the config against a codec with `quantizers` stages.
    pub fn validate(&self, quantizers: usize) -> Result<()> {
        self.conformer().validate().map_err(|e| match e {
            Error::Config { field, detail } => Error::config(&format!("denoiser.{field}"), detail),
            other => other,
        })?;
        if self.d_model == 0 {
            return Err(Error::config("denoiser.d_model", "must be positive"));
        }
        if self.groups == 0 || self.groups > quantizers {
            return Err(Error::config(
                "denoiser.groups",
                format!("{} predicted groups with {quantizers} codec stages", self.groups),
            ));
        }
        Ok(())
    }
}

/// Per-frame, per-group distributions over the codebook: `T × g × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenProbabilities {
    frames: usize,
    groups: usize,
    size: usize,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl TokenProbabilities {
    /// `logits` laid out `[frame][group][code]`.
    pub fn from_logits(frames: usize, groups: usize, size: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != frames * groups * size || size == 0 {
            return Err(Error::dim(format!(
                "{} logits for {frames}×{groups}×{size}",
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite token logit".into()));
        }
        let mut probs = logits.clone();
        probs.chunks_exact_mut(size).for_each(softmax_in_place);
        Ok(Self {
            frames,
            groups,
            size,
            logits,
            probs,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn probs(&self, frame: usize, group: usize) -> &[f64] {
        let i = (frame * self.groups + group) * self.size;
        &self.probs[i..i + self.size]
    }

    pub fn logits(&self, frame: usize, group: usize) -> &[f64] {
        let i = (frame * self.groups + group) * self.size;
        &self.logits[i..i + self.size]
    }

    /// `−log p[target]` for one row, via log-sum-exp on the logits.
    pub fn neg_log_prob(&self, frame: usize, group: usize, target: usize) -> f64 {
        let row = self.logits(frame, group);
        log_sum_exp(row) - row[target]
    }

    /// Highest-probability code per row; ties go to the lowest index.
    pub fn argmax_tokens(&self) -> Result<TokenMatrix> {
        let tokens = self
            .logits
            .chunks_exact(self.size)
            .map(|row| argmax(row) as u16)
            .collect();
        TokenMatrix::new(self.frames, self.groups, self.size, tokens)
    }
}

/// Parameters of both Conformer stacks and their projections.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    quantizers: usize,
    codebook_size: usize,
    dim: usize,
    pub(crate) params: ParamStore,
    td_in: Linear,
    td_stack: ConformerStack,
    td_heads: Vec<Linear>,
    er_in: Linear,
    er_stack: ConformerStack,
    er_out: Linear,
}

impl DenoiserModel {
    /// `quantizers`, `codebook_size` and `dim` describe the frozen codec.
    pub fn new(config: DenoiserConfig, quantizers: usize, codebook_size: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate(quantizers)?;
        if codebook_size == 0 || dim == 0 {
            return Err(Error::config("codec", "codebook size and width must be positive"));
        }
        let dm = config.d_model;
        let cc = config.conformer();
        let mut ps = ParamStore::new();
        let td_in = Linear::new(&mut ps, "td.in", dim, dm, rng);
        let td_stack = ConformerStack::new(&mut ps, "td.block", config.td_blocks, cc, rng)?;
        let td_heads = (0..config.groups)
            .map(|g| Linear::new(&mut ps, &format!("td.head{g}"), dm, codebook_size, rng))
            .collect();
        let er_in = Linear::new(&mut ps, "er.in", 2 * dim, dm, rng);
        let er_stack = ConformerStack::new(&mut ps, "er.block", config.er_blocks, cc, rng)?;
        let er_out = Linear::new(&mut ps, "er.out", dm, dim, rng);
        Ok(Self {
            config,
            quantizers,
            codebook_size,
            dim,
            params: ps,
            td_in,
            td_stack,
            td_heads,
            er_in,
            er_stack,
            er_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn groups(&self) -> usize {
        self.config.groups
    }

    pub fn quantizers(&self) -> usize {
        self.quantizers
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Sets every classification head weight and bias to zero.
    pub fn zero_heads(&mut self) {
        for h in &self.td_heads {
            self.params.get_mut(h.weight).data_mut().fill(0.0);
            self.params.get_mut(h.bias).data_mut().fill(0.0);
        }
    }

    /// Sets the refiner output projection to zero.
    pub fn zero_refiner_output(&mut self) {
        self.params.get_mut(self.er_out.weight).data_mut().fill(0.0);
        self.params.get_mut(self.er_out.bias).data_mut().fill(0.0);
    }

    pub(crate) fn check_codebooks(&self, codebooks: &Codebooks) -> Result<()> {
        if codebooks.stages() != self.quantizers || codebooks.size() != self.codebook_size || codebooks.dim() != self.dim {
            return Err(Error::dim(format!(
                "model expects {}×{}×{} codebooks, got {}×{}×{}",
                self.quantizers,
                self.codebook_size,
                self.dim,
                codebooks.stages(),
                codebooks.size(),
                codebooks.dim()
            )));
        }
        Ok(())
    }

    /// One `[T × C]` logit matrix per predicted group.
    pub(crate) fn head_logits(&self, tape: &mut Tape, noisy_sum: Var) -> Result<Vec<Var>> {
        let h = self.td_in.forward(tape, &self.params, noisy_sum)?;
        let h = self.td_stack.forward(tape, &self.params, h)?;
        self.td_heads
            .iter()
            .map(|head| head.forward(tape, &self.params, h))
            .collect()
    }

    /// `[T × 2D]` refiner input → `[T × D]` embedding.
    pub(crate) fn refiner(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let h = self.er_in.forward(tape, &self.params, input)?;
        let h = self.er_stack.forward(tape, &self.params, h)?;
        self.er_out.forward(tape, &self.params, h)
    }

    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.params.iter() {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new();
        let cfg = [c.d_model, c.heads, c.ff_mult, c.kernel, c.td_blocks, c.er_blocks, c.groups];
        ck.push_scalars("config.denoiser", &cfg.map(|v| v as f64));
        ck.push_scalars(
            "config.denoiser.codec",
            &[self.quantizers, self.codebook_size, self.dim].map(|v| v as f64),
        );
        self.params.write_records("denoiser.", &mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck.usizes_at("config.denoiser")?;
        let codec = ck.usizes_at("config.denoiser.codec")?;
        let (&[d_model, heads, ff_mult, kernel, td_blocks, er_blocks, groups], &[k, c, d]) = (&cfg[..], &codec[..]) else {
            return Err(Error::Corruption("denoiser config records have the wrong length".into()));
        };
        let config = DenoiserConfig {
            d_model,
            heads,
            ff_mult,
            kernel,
            td_blocks,
            er_blocks,
            groups,
        };
        let blocks = td_blocks.saturating_add(er_blocks);
        ck.ensure_holds(
            "stored denoiser",
            &[
                &[blocks, 4, ff_mult, d_model, d_model],
                &[blocks, 7, d_model, d_model],
                &[blocks, kernel, d_model],
                &[groups, d_model, c],
                &[4, d, d_model],
            ],
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(config, k, c, d, &mut rng)
            .map_err(|e| Error::Corruption(format!("stored denoiser config: {e}")))?;
        model.params.read_records("denoiser.", ck)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Predicts the first `g` clean token groups from all `K` noisy groups.
pub fn denoise_tokens(noisy: &TokenMatrix, model: &DenoiserModel, codebooks: &Codebooks) -> Result<(TokenProbabilities, TokenMatrix)> {
    model.check_codebooks(codebooks)?;
    if noisy.frames() == 0 {
        return Err(Error::Degenerate("no frames to denoise".into()));
    }
    if noisy.groups() != model.quantizers {
        return Err(Error::dim(format!(
            "{} noisy token groups, model expects {}",
            noisy.groups(),
            model.quantizers
        )));
    }
    let summed = lookup_sum(noisy, codebooks, 1..=model.quantizers)?;
    let mut tape = Tape::new();
    let x = tape.constant(summed);
    let heads = model.head_logits(&mut tape, x)?;
    let (t, g, c) = (noisy.frames(), model.groups(), model.codebook_size);
    let mut logits = vec![0.0; t * g * c];
    for (j, &h) in heads.iter().enumerate() {
        for (f, row) in tape.value(h).data().chunks_exact(c).enumerate() {
            logits[(f * g + j) * c..(f * g + j + 1) * c].copy_from_slice(row);
        }
    }
    let probs = TokenProbabilities::from_logits(t, g, c, logits)?;
    let tokens = probs.argmax_tokens()?;
    Ok((probs, tokens))
}

/// Per-frame `[Σ_{1..g} E(enhanced) ‖ Σ_{1..K} E(noisy)]`.
pub fn refiner_input(enhanced: &TokenMatrix, noisy: &TokenMatrix, codebooks: &Codebooks) -> Result<Tensor> {
    if enhanced.frames() != noisy.frames() {
        return Err(Error::dim(format!(
            "{} enhanced frames vs {} noisy frames",
            enhanced.frames(),
            noisy.frames()
        )));
    }
    let a = lookup_sum(enhanced, codebooks, 1..=enhanced.groups())?;
    let b = lookup_sum(noisy, codebooks, 1..=noisy.groups())?;
    let d = codebooks.dim();
    let mut out = Vec::with_capacity(2 * a.len());
    for t in 0..enhanced.frames() {
        out.extend_from_slice(&a.data()[t * d..(t + 1) * d]);
        out.extend_from_slice(&b.data()[t * d..(t + 1) * d]);
    }
    Tensor::new(vec![enhanced.frames(), 2 * d], out)
}

/// Estimate of the summed clean embedding over all `K` stages, `[T × D]`.
pub fn refine(enhanced: &TokenMatrix, noisy: &TokenMatrix, model: &DenoiserModel, codebooks: &Codebooks) -> Result<Tensor> {
    model.check_codebooks(codebooks)?;
    if enhanced.groups() != model.groups() || noisy.groups() != model.quantizers {
        return Err(Error::dim(format!(
            "refiner expects {} enhanced and {} noisy groups, got {} and {}",
            model.groups(),
            model.quantizers,
            enhanced.groups(),
            noisy.groups()
        )));
    }
    let input = refiner_input(enhanced, noisy, codebooks)?;
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let y = model.refiner(&mut tape, x)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(groups: usize) -> (DenoiserModel, Codebooks, TokenMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = DenoiserConfig {
            d_model: 8,
            heads: 2,
            td_blocks: 1,
            er_blocks: 1,
            groups,
            ..DenoiserConfig::default()
        };
        let model = DenoiserModel::new(cfg, 3, 16, 4, &mut rng).unwrap();
        let cb = Codebooks::random(3, 16, 4, 1.0, &mut rng);
        let tokens = (0..9 * 3).map(|_| rng.random_range(0..16u16)).collect();
        (model, cb, TokenMatrix::new(9, 3, 16, tokens).unwrap())
    }

    #[test]
    fn probabilities_are_distributions() {
        let (m, cb, noisy) = setup(2);
        let (p, tokens) = denoise_tokens(&noisy, &m, &cb).unwrap();
        assert_eq!((p.frames(), p.groups(), p.size()), (9, 2, 16));
        for t in 0..9 {
            for k in 0..2 {
                let row = p.probs(t, k);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
                assert!(tokens.get(t, k) < 16);
            }
        }
    }

    #[test]
    fn zero_heads_give_uniform_rows_and_token_zero() {
        let (mut m, cb, noisy) = setup(2);
        m.zero_heads();
        let (p, tokens) = denoise_tokens(&noisy, &m, &cb).unwrap();
        assert!(p.probs(3, 1).iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
        assert!(tokens.tokens().iter().all(|&t| t == 0));
    }

    #[test]
    fn strict_maximum_is_selected() {
        let mut logits = vec![0.0; 16];
        logits[7] = 0.5;
        let p = TokenProbabilities::from_logits(1, 1, 16, logits).unwrap();
        assert_eq!(p.argmax_tokens().unwrap().get(0, 0), 7);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let (m, cb, noisy) = setup(2);
        let empty = TokenMatrix::new(0, 3, 16, vec![]).unwrap();
        assert!(matches!(denoise_tokens(&empty, &m, &cb), Err(Error::Degenerate(_))));
        let enh = TokenMatrix::new(8, 2, 16, vec![0; 16]).unwrap();
        assert!(matches!(refine(&enh, &noisy, &m, &cb), Err(Error::Dimension(_))));
        let wrong_cb = Codebooks::random(2, 16, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(denoise_tokens(&noisy, &m, &wrong_cb).is_err());
    }

    #[test]
    fn refine_shape_purity_and_zero_output() {
        let (mut m, cb, noisy) = setup(2);
        let (_, enh) = denoise_tokens(&noisy, &m, &cb).unwrap();
        let a = refine(&enh, &noisy, &m, &cb).unwrap();
        assert_eq!(a.shape(), &[9, 4]);
        assert_eq!(a, refine(&enh, &noisy, &m, &cb).unwrap());
        m.zero_refiner_output();
        assert!(refine(&enh, &noisy, &m, &cb).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn refiner_input_order() {
        let (_, cb, noisy) = setup(2);
        let enh = noisy.leading(2).unwrap();
        let x = refiner_input(&enh, &noisy, &cb).unwrap();
        let first = lookup_sum(&enh, &cb, 1..=2).unwrap();
        let all = lookup_sum(&noisy, &cb, 1..=3).unwrap();
        assert_eq!(&x.row(4)[..4], first.row(4));
        assert_eq!(&x.row(4)[4..], all.row(4));
    }

    #[test]
    fn group_count_is_validated() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DenoiserConfig {
            groups: 4,
            ..DenoiserConfig::default()
        };
        assert!(matches!(
            DenoiserModel::new(cfg, 3, 16, 4, &mut rng),
            Err(Error::Config { field, .. }) if field == "denoiser.groups"
        ));
        let cfg = DenoiserConfig {
            heads: 5,
            ..DenoiserConfig::default()
        };
        assert!(matches!(
            DenoiserModel::new(cfg, 3, 16, 4, &mut rng),
            Err(Error::Config { field, .. }) if field == "denoiser.heads"
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (m, cb, noisy) = setup(3);
        let back = DenoiserModel::from_checkpoint(&Checkpoint::decode(&m.to_checkpoint().encode()).unwrap()).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert_eq!(back.config(), m.config());
        assert_eq!(denoise_tokens(&noisy, &back, &cb).unwrap(), denoise_tokens(&noisy, &m, &cb).unwrap());
    }
}
