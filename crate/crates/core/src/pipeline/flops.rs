//! Analytic FLOPs: a multiply-add counts as 2; activations, norms and
//! softmax are not counted.

use std::fmt::Write as _;

use serde::Serialize;

use crate::codec::CodecConfig;
use crate::denoiser::DenoiserConfig;
use crate::dsp::SAMPLE_RATE;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    Quantizer,
    TokenDenoiser,
    Refiner,
    Decoder,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Encoder,
        Component::Quantizer,
        Component::TokenDenoiser,
        Component::Refiner,
        Component::Decoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Encoder => "codec encoder",
            Component::Quantizer => "quantizer",
            Component::TokenDenoiser => "token denoiser",
            Component::Refiner => "embedding refiner",
            Component::Decoder => "codec decoder",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopsPart {
    pub component: Component,
    pub layer: String,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopsBreakdown {
    pub frames: u64,
    pub samples: u64,
    pub parts: Vec<FlopsPart>,
    pub total: u64,
}

impl FlopsBreakdown {
    pub fn component(&self, c: Component) -> u64 {
        self.parts.iter().filter(|p| p.component == c).map(|p| p.flops).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }

    pub fn to_table(&self) -> String {
        let width = self.parts.iter().map(|p| p.layer.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        for c in Component::ALL {
            let _ = writeln!(s, "{}", c.name());
            for p in self.parts.iter().filter(|p| p.component == c) {
                let _ = writeln!(s, "  {:<width$}  {:>16}", p.layer, p.flops);
            }
            let _ = writeln!(s, "  {:<width$}  {:>16}", "subtotal", self.component(c));
        }
        let _ = writeln!(s, "{:<w$}  {:>16}", "total", self.total, w = width + 2);
        s
    }
}

pub fn linear_flops(t: u64, d_in: u64, d_out: u64) -> u64 {
    2 * t * d_in * d_out
}

/// Convolution producing `t_out` frames.
pub fn conv_flops(t_out: u64, kernel: u64, c_in: u64, c_out: u64, groups: u64) -> u64 {
    2 * t_out * kernel * c_in * c_out / groups
}

/// Score and value products of self-attention summed over heads.
pub fn attention_flops(t: u64, d_model: u64) -> u64 {
    2 * (2 * t * t * d_model)
}

fn conformer_parts(prefix: &str, t: u64, cfg: &DenoiserConfig, blocks: usize, component: Component, out: &mut Vec<FlopsPart>) {
    let d = cfg.d_model as u64;
    let hidden = d * cfg.ff_mult as u64;
    for b in 0..blocks {
        let mut push = |name: &str, flops: u64| {
            out.push(FlopsPart {
                component,
                layer: format!("{prefix}.block{b}.{name}"),
                flops,
            })
        };
        for ff in ["ff1", "ff2"] {
            push(ff, linear_flops(t, d, hidden) + linear_flops(t, hidden, d));
        }
        push("attn.proj", 4 * linear_flops(t, d, d));
        push("attn.matmul", attention_flops(t, d));
        push("conv.pointwise_in", linear_flops(t, d, 2 * d));
        push("conv.depthwise", conv_flops(t, cfg.kernel as u64, d, d, d));
        push("conv.pointwise_out", linear_flops(t, d, d));
    }
}

/// FLOPs of the full enhancement path for `duration_s` seconds of audio.
pub fn flops_estimate(codec: &CodecConfig, denoiser: &DenoiserConfig, duration_s: f64) -> Result<FlopsBreakdown> {
    codec.validate()?;
    denoiser.validate(codec.quantizers)?;
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::config("duration_s", "must be positive"));
    }
    let samples = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let t = codec.frames_for(samples.max(1)) as u64;
    let l = t * codec.hop() as u64;
    let ch: Vec<u64> = codec.channels.iter().map(|&c| c as u64).collect();
    let (k, c, d) = (codec.quantizers as u64, codec.codebook_size as u64, codec.dim as u64);
    let dm = denoiser.d_model as u64;
    let mut parts = Vec::new();
    let push = |parts: &mut Vec<FlopsPart>, component, layer: String, flops| {
        parts.push(FlopsPart { component, layer, flops })
    };

    use Component::*;
    push(&mut parts, Encoder, "encoder.stem".into(), conv_flops(l, 7, 1, ch[0], 1));
    let mut len = l;
    for (i, &s) in codec.strides.iter().enumerate() {
        len /= s as u64;
        push(&mut parts, Encoder, format!("encoder.down{i}"), conv_flops(len, 2 * s as u64, ch[i], ch[i + 1], 1));
    }
    let last = *ch.last().expect("validated");
    push(&mut parts, Encoder, "encoder.head".into(), conv_flops(t, 3, last, d, 1));
    push(&mut parts, Quantizer, "rvq.search".into(), 2 * t * k * c * d);

    push(&mut parts, TokenDenoiser, "td.in".into(), linear_flops(t, d, dm));
    conformer_parts("td", t, denoiser, denoiser.td_blocks, TokenDenoiser, &mut parts);
    for g in 0..denoiser.groups {
        push(&mut parts, TokenDenoiser, format!("td.head{g}"), linear_flops(t, dm, c));
    }

    push(&mut parts, Refiner, "er.in".into(), linear_flops(t, 2 * d, dm));
    conformer_parts("er", t, denoiser, denoiser.er_blocks, Refiner, &mut parts);
    push(&mut parts, Refiner, "er.out".into(), linear_flops(t, dm, d));

    push(&mut parts, Decoder, "decoder.stem".into(), conv_flops(t, 3, d, last, 1));
    let mut len = t;
    for i in (0..codec.strides.len()).rev() {
        let s = codec.strides[i] as u64;
        // every input frame scatters a kernel of 2s taps per output channel
        push(&mut parts, Decoder, format!("decoder.up{i}"), 2 * len * 2 * s * ch[i + 1] * ch[i]);
        len *= s;
    }
    push(&mut parts, Decoder, "decoder.head".into(), conv_flops(l, 7, ch[0], 1, 1));

    let total = parts.iter().map(|p| p.flops).sum();
    Ok(FlopsBreakdown {
        frames: t,
        samples: samples as u64,
        parts,
        total,
    })
}
