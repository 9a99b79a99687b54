use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::CodecConfig;
use super::rvq::{lookup_sum, rvq_quantize, Codebooks, Quantized};
use super::tokens::TokenMatrix;
use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Conv1d, ConvTranspose1d, ParamStore, Tape, Tensor, Var};

const STEM_KERNEL: usize = 7;
const LATENT_KERNEL: usize = 3;

#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    stem: Conv1d,
    downs: Vec<Conv1d>,
    head: Conv1d,
}

impl Encoder {
    fn new(ps: &mut ParamStore, cfg: &CodecConfig, rng: &mut impl Rng) -> Self {
        let ch = &cfg.channels;
        let stem = Conv1d::new(ps, "encoder.stem", 1, ch[0], STEM_KERNEL, 1, STEM_KERNEL / 2, rng);
        let downs = cfg
            .strides
            .iter()
            .enumerate()
            .map(|(i, &s)| Conv1d::new(ps, &format!("encoder.down{i}"), ch[i], ch[i + 1], 2 * s, s, s / 2, rng))
            .collect();
        let last = *ch.last().expect("validated");
        let head = Conv1d::new(ps, "encoder.head", last, cfg.dim, LATENT_KERNEL, 1, LATENT_KERNEL / 2, rng);
        Self { stem, downs, head }
    }

    /// `x [L × 1]` with `L` a multiple of the hop → `[L/M × D]`.
    pub(crate) fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let mut h = self.stem.forward(tape, ps, x)?;
        h = tape.elu(h);
        for down in &self.downs {
            h = down.forward(tape, ps, h)?;
            h = tape.elu(h);
        }
        self.head.forward(tape, ps, h)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Decoder {
    stem: Conv1d,
    ups: Vec<ConvTranspose1d>,
    head: Conv1d,
}

impl Decoder {
    fn new(ps: &mut ParamStore, cfg: &CodecConfig, rng: &mut impl Rng) -> Self {
        let ch = &cfg.channels;
        let n = cfg.strides.len();
        let stem = Conv1d::new(ps, "decoder.stem", cfg.dim, ch[n], LATENT_KERNEL, 1, LATENT_KERNEL / 2, rng);
        let ups = (0..n)
            .rev()
            .map(|i| ConvTranspose1d::new(ps, &format!("decoder.up{i}"), ch[i + 1], ch[i], cfg.strides[i], rng))
            .collect();
        let head = Conv1d::new(ps, "decoder.head", ch[0], 1, STEM_KERNEL, 1, STEM_KERNEL / 2, rng);
        Self { stem, ups, head }
    }

    /// `[T × D]` → `[T·M × 1]`.
    pub(crate) fn forward(&self, tape: &mut Tape, ps: &ParamStore, z: Var) -> Result<Var> {
        let mut h = self.stem.forward(tape, ps, z)?;
        h = tape.elu(h);
        for up in &self.ups {
            h = up.forward(tape, ps, h)?;
            h = tape.elu(h);
        }
        self.head.forward(tape, ps, h)
    }
}

/// Encoder, decoder and residual quantizer of the codec.
#[derive(Clone, Debug)]
pub struct CodecModel {
    config: CodecConfig,
    pub(crate) params: ParamStore,
    pub(crate) encoder: Encoder,
    pub(crate) decoder: Decoder,
    pub(crate) codebooks: Codebooks,
}

impl CodecModel {
    /// Fresh model with seeded random weights and codebooks.
    pub fn new(config: CodecConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &config, rng);
        let decoder = Decoder::new(&mut params, &config, rng);
        let codebooks = Codebooks::random(config.quantizers, config.codebook_size, config.dim, 0.1, rng);
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            codebooks,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn codebooks(&self) -> &Codebooks {
        &self.codebooks
    }

    pub fn codebooks_mut(&mut self) -> &mut Codebooks {
        &mut self.codebooks
    }

    /// Order-sensitive FNV-1a over every weight and codebook bit.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (_, t) in self.params.iter() {
            t.data().iter().copied().for_each(&mut eat);
        }
        let mut ck = Checkpoint::new();
        self.codebooks.write_records("", &mut ck);
        for r in ck.records() {
            r.data.iter().copied().for_each(&mut eat);
        }
        h
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let c = &self.config;
        let as_f64 = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        ck.push_scalars("config.codec.strides", &as_f64(&c.strides));
        ck.push_scalars("config.codec.channels", &as_f64(&c.channels));
        ck.push_scalars(
            "config.codec.shape",
            &as_f64(&[c.quantizers, c.codebook_size, c.dim]),
        );
        self.params.write_records("codec.", &mut ck);
        self.codebooks.write_records("codebook.", &mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let shape = ck.usizes_at("config.codec.shape")?;
        let [quantizers, codebook_size, dim] = shape[..] else {
            return Err(Error::Corruption("config.codec.shape must hold 3 values".into()));
        };
        let config = CodecConfig {
            strides: ck.usizes_at("config.codec.strides")?,
            channels: ck.usizes_at("config.codec.channels")?,
            quantizers,
            codebook_size,
            dim,
        };
        config
            .validate()
            .map_err(|e| Error::Corruption(format!("stored codec config: {e}")))?;
        let ch = &config.channels;
        let last = ch[ch.len() - 1];
        let mut terms: Vec<Vec<usize>> = vec![
            vec![2, 7, ch[0]],
            vec![2, 3, last, dim],
            vec![2, quantizers, codebook_size, dim],
        ];
        for (i, &s) in config.strides.iter().enumerate() {
            terms.push(vec![2, 2, s, ch[i], ch[i + 1]]);
        }
        let terms: Vec<&[usize]> = terms.iter().map(Vec::as_slice).collect();
        ck.ensure_holds("stored codec", &terms)?;
        // weights are overwritten below
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        model.params.read_records("codec.", ck)?;
        model.codebooks = Codebooks::read_records("codebook.", ck, quantizers, codebook_size, dim)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Latent frames `[T × D]`, `T = ceil(L / M)`; the clip is right-padded with zeros.
    pub fn encode(&self, clip: &AudioClip) -> Result<Tensor> {
        if clip.is_empty() {
            return Err(Error::Degenerate("cannot encode an empty clip".into()));
        }
        let frames = self.config.frames_for(clip.len());
        let mut padded = clip.samples().to_vec();
        padded.resize(frames * self.config.hop(), 0.0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![padded.len(), 1], padded)?);
        let z = self.encoder.forward(&mut tape, &self.params, x)?;
        Ok(tape.value(z).clone())
    }

    /// Waveform of exactly `T·M` samples from a summed embedding `[T × D]`.
    pub fn decode(&self, embedding: &Tensor) -> Result<AudioClip> {
        if embedding.shape().len() != 2 || embedding.cols() != self.config.dim {
            return Err(Error::dim(format!(
                "embedding {:?} for codec width {}",
                embedding.shape(),
                self.config.dim
            )));
        }
        if embedding.rows() == 0 {
            return Ok(AudioClip::zeros(0));
        }
        let mut tape = Tape::new();
        let z = tape.constant(embedding.clone());
        let y = self.decoder.forward(&mut tape, &self.params, z)?;
        AudioClip::new(tape.value(y).data().to_vec())
    }

    pub fn quantize(&self, latents: &Tensor, k: usize) -> Result<Quantized> {
        rvq_quantize(latents, &self.codebooks, k)
    }

    /// All `K` token groups of a clip.
    pub fn tokenize(&self, clip: &AudioClip) -> Result<TokenMatrix> {
        let z = self.encode(clip)?;
        Ok(self.quantize(&z, self.config.quantizers)?.tokens)
    }

    pub fn lookup_sum(&self, tokens: &TokenMatrix, stages: std::ops::RangeInclusive<usize>) -> Result<Tensor> {
        lookup_sum(tokens, &self.codebooks, stages)
    }

    /// Encode, quantize with `k` stages and decode, truncated to the input length.
    pub fn reconstruct(&self, clip: &AudioClip, k: usize) -> Result<AudioClip> {
        let z = self.encode(clip)?;
        let q = self.quantize(&z, k)?;
        Ok(self.decode(&q.quantized)?.truncated(clip.len()))
    }

    /// Encode and decode without quantization.
    pub fn reconstruct_unquantized(&self, clip: &AudioClip) -> Result<AudioClip> {
        let z = self.encode(clip)?;
        Ok(self.decode(&z)?.truncated(clip.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::gen_clean;

    fn desk() -> CodecModel {
        CodecModel::new(CodecConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn frame_count_follows_ceil_contract() {
        let m = desk();
        assert_eq!(m.encode(&AudioClip::zeros(128)).unwrap().shape(), &[2, 32]);
        assert_eq!(m.encode(&AudioClip::zeros(129)).unwrap().shape(), &[3, 32]);
        let clip = gen_clean(1, 1.0).unwrap();
        assert_eq!(m.encode(&clip).unwrap().shape(), &[250, 32]);
    }

    #[test]
    fn empty_clip_is_degenerate() {
        assert!(matches!(desk().encode(&AudioClip::zeros(0)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn decode_length_and_finiteness() {
        let m = desk();
        let y = m.decode(&Tensor::zeros(&[2, 32])).unwrap();
        assert_eq!(y.len(), 128);
        assert!(y.samples().iter().all(|v| v.is_finite()));
        assert!(m.decode(&Tensor::zeros(&[2, 31])).is_err());
    }

    #[test]
    fn reconstruction_keeps_input_length() {
        let m = desk();
        let clip = AudioClip::new((0..1000).map(|i| (i as f64 * 0.01).sin() * 0.3).collect()).unwrap();
        assert_eq!(m.reconstruct(&clip, 8).unwrap().len(), 1000);
        assert_eq!(m.tokenize(&clip).unwrap().frames(), 16);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = desk();
        let ck = Checkpoint::decode(&m.to_checkpoint().encode()).unwrap();
        let back = CodecModel::from_checkpoint(&ck).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert_eq!(back.config(), m.config());
        let clip = gen_clean(2, 0.5).unwrap();
        assert_eq!(back.tokenize(&clip).unwrap(), m.tokenize(&clip).unwrap());
    }

    #[test]
    fn seeds_change_weights() {
        let a = CodecModel::new(CodecConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_ne!(a.checksum(), desk().checksum());
    }
}
