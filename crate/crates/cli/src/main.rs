use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use codec_denoiser::codec::{train_codec, CodecModel, TokenMatrix};
use codec_denoiser::config::RunConfig;
use codec_denoiser::denoiser::DenoiserModel;
use codec_denoiser::dsp::{decode_wav, encode_wav, load_pairs, build_corpus, AudioClip, CorpusManifest, Pair, Split};
use codec_denoiser::pipeline::{
    ablate_groups, enhance, enhance_tokens, evaluate, flops_estimate, si_snr, tokenize_pairs, train_denoiser,
    validation_losses, AblationData,
};
use codec_denoiser::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "codec-denoiser", version, about = "Token-domain speech denoising on a miniature RVQ codec")]
struct Cli {
    /// JSON run configuration; absent keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stage; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for corpus generation, evaluation and ablation.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Jsonl,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the clean/noise/noisy corpus and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the codec on the clean training clips.
    TrainCodec {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV; defaults to the checkpoint path with a .csv extension.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Train the token denoiser and embedding refiner against a frozen codec.
    TrainDenoiser {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Encode a WAV file into an ATOK file holding all token groups.
    Encode {
        #[arg(long)]
        codec: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Enhance a WAV file or a full-group ATOK file.
    Enhance {
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Writes the predicted leading token groups as an ATOK file.
        #[arg(long)]
        prompt_out: Option<PathBuf>,
    },
    /// Per-clip and aggregate metrics on one corpus split.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        split: Option<Split>,
        /// Also writes the JSON-lines report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Train and score one denoiser per predicted-group count.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long, value_delimiter = ',')]
        groups: Option<Vec<usize>>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Analytic FLOPs of the enhancement path.
    Flops {
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
        /// Take the codec geometry from a checkpoint instead of the config.
        #[arg(long)]
        codec: Option<PathBuf>,
        /// Take the denoiser geometry from a checkpoint instead of the config.
        #[arg(long)]
        denoiser: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn config_error(field: &str, detail: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        detail: detail.into(),
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| io_error(path, e))
}

/// Resolves a path that must already exist; a missing prerequisite is a
/// configuration error naming the path.
fn existing(flag: &str, path: &Path) -> Result<PathBuf> {
    let p = absolute(path)?;
    if !p.exists() {
        return Err(config_error(flag, format!("{} does not exist", p.display())));
    }
    Ok(p)
}

/// Resolves an output path; its parent directory must exist.
fn output(flag: &str, path: &Path) -> Result<PathBuf> {
    let p = absolute(path)?;
    match p.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(config_error(
            flag,
            format!("directory {} does not exist", dir.display()),
        )),
        _ => Ok(p),
    }
}

/// Tracks whether a command rewrote any of its outputs.
#[derive(Default)]
struct Outputs {
    written: usize,
}

impl Outputs {
    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if std::fs::read(path).is_ok_and(|old| old == bytes) {
            return Ok(());
        }
        std::fs::write(path, bytes).map_err(|e| io_error(path, e))?;
        self.written += 1;
        Ok(())
    }

    fn finish(&self) {
        if self.written == 0 {
            println!("no changes");
        } else {
            println!("wrote {} file(s)", self.written);
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(&existing("--config", p)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(jobs) = cli.jobs {
        cfg.eval.jobs = jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn corpus_split(dir: &Path, split: Split) -> Result<Vec<Pair>> {
    let manifest = CorpusManifest::load(dir)?;
    let pairs = load_pairs(dir, &manifest, split)?;
    if pairs.is_empty() {
        return Err(Error::Degenerate(format!("corpus {} has no {split} clips", dir.display())));
    }
    Ok(pairs)
}

fn limit(mut pairs: Vec<Pair>, max: usize) -> Vec<Pair> {
    if max > 0 {
        pairs.truncate(max);
    }
    pairs
}

fn loss_csv_path(out: &Path, flag: Option<&PathBuf>) -> Result<PathBuf> {
    match flag {
        Some(p) => output("--loss-csv", p),
        None => Ok(out.with_extension("csv")),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenData { out } => {
            let out = absolute(out)?;
            std::fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
            let (manifest, stats) = build_corpus(&cfg.corpus, &out, cfg.eval.jobs)?;
            for split in Split::ALL {
                let [lo, hi] = cfg.corpus.snr_range(split);
                println!(
                    "{split}: {} clips, SNR {lo} to {hi} dB",
                    manifest.split(split).count()
                );
            }
            if stats.written == 0 {
                println!("no changes");
            } else {
                println!("wrote {} file(s), {} unchanged", stats.written, stats.unchanged);
            }
        }
        Command::TrainCodec { corpus, out, loss_csv } => {
            let corpus = existing("--corpus", corpus)?;
            let out = output("--out", out)?;
            let csv = loss_csv_path(&out, loss_csv.as_ref())?;
            let train = corpus_split(&corpus, Split::Train)?;
            let val = corpus_split(&corpus, Split::Val)?;
            let clips: Vec<AudioClip> = train.into_iter().map(|p| p.clean).collect();
            let (model, report) = train_codec(&clips, &cfg.codec.model, &cfg.codec.train)?;
            let mut outputs = Outputs::default();
            outputs.write(&out, &model.to_checkpoint().encode())?;
            outputs.write(&csv, report.to_csv().as_bytes())?;
            let k = cfg.codec.model.quantizers;
            let mut total = 0.0;
            for p in &val {
                total += si_snr(model.reconstruct(&p.clean, k)?.samples(), p.clean.samples())?;
            }
            println!("steps: {}", report.rows.len());
            println!("final epoch loss: {:.6}", report.epoch_means.last().copied().unwrap_or(f64::NAN));
            println!("val reconstruction SI-SNR: {:.3} dB", total / val.len() as f64);
            outputs.finish();
        }
        Command::TrainDenoiser {
            corpus,
            codec,
            out,
            loss_csv,
        } => {
            let corpus = existing("--corpus", corpus)?;
            let codec_path = existing("--codec", codec)?;
            let out = output("--out", out)?;
            let csv = loss_csv_path(&out, loss_csv.as_ref())?;
            let codec = CodecModel::load(&codec_path)?;
            let train = tokenize_pairs(&codec, &corpus_split(&corpus, Split::Train)?)?;
            let val = tokenize_pairs(&codec, &limit(corpus_split(&corpus, Split::Val)?, cfg.eval.max_clips))?;
            let (model, report) = train_denoiser(&train, &codec, &cfg.denoiser, &cfg.train)?;
            let mut outputs = Outputs::default();
            outputs.write(&out, &model.to_checkpoint().encode())?;
            outputs.write(&csv, report.to_csv().as_bytes())?;
            let v = validation_losses(&model, &codec, &val)?;
            println!("steps: {}", report.rows.len());
            println!("val L_CE: {:.4} ({:.4} per token)", v.ce, v.ce_per_token);
            println!("val L_ER: {:.4}", v.er);
            outputs.finish();
        }
        Command::Encode { codec, input, out } => {
            let codec = CodecModel::load(&existing("--codec", codec)?)?;
            let input = existing("--in", input)?;
            let out = output("--out", out)?;
            let bytes = std::fs::read(&input).map_err(|e| io_error(&input, e))?;
            let tokens = codec.tokenize(&decode_wav(&bytes)?)?;
            let mut outputs = Outputs::default();
            outputs.write(&out, &tokens.to_atok())?;
            println!("{} frames × {} groups", tokens.frames(), tokens.groups());
            outputs.finish();
        }
        Command::Enhance {
            codec,
            denoiser,
            input,
            out,
            prompt_out,
        } => {
            let codec = CodecModel::load(&existing("--codec", codec)?)?;
            let denoiser = DenoiserModel::load(&existing("--denoiser", denoiser)?)?;
            let input = existing("--in", input)?;
            let out = output("--out", out)?;
            let prompt_out = prompt_out.as_ref().map(|p| output("--prompt-out", p)).transpose()?;
            let bytes = std::fs::read(&input).map_err(|e| io_error(&input, e))?;
            let (audio, prompt) = if bytes.starts_with(b"ATOK") {
                let tokens = TokenMatrix::from_atok(&bytes)?;
                let len = tokens.frames() * codec.config().hop();
                enhance_tokens(&tokens, len, &codec, &denoiser)?
            } else {
                enhance(&decode_wav(&bytes)?, &codec, &denoiser)?
            };
            let mut outputs = Outputs::default();
            outputs.write(&out, &encode_wav(&audio)?)?;
            if let Some(p) = prompt_out {
                outputs.write(&p, &prompt.to_atok())?;
            }
            println!("{} samples, prompt {} frames × {} groups", audio.len(), prompt.frames(), prompt.groups());
            outputs.finish();
        }
        Command::Evaluate {
            corpus,
            codec,
            denoiser,
            split,
            report,
            format,
        } => {
            let corpus = existing("--corpus", corpus)?;
            let codec = CodecModel::load(&existing("--codec", codec)?)?;
            let denoiser = DenoiserModel::load(&existing("--denoiser", denoiser)?)?;
            let report_path = report.as_ref().map(|p| output("--report", p)).transpose()?;
            let split = split.unwrap_or(cfg.eval.split);
            let pairs = limit(corpus_split(&corpus, split)?, cfg.eval.max_clips);
            let r = evaluate(&pairs, &codec, &denoiser, cfg.eval.jobs)?;
            match format {
                Format::Table => print!("{}", r.to_table()),
                Format::Jsonl => print!("{}", r.to_jsonl()),
            }
            if let Some(p) = report_path {
                let mut outputs = Outputs::default();
                outputs.write(&p, r.to_jsonl().as_bytes())?;
                outputs.finish();
            }
        }
        Command::Ablate {
            corpus,
            codec,
            groups,
            report,
            format,
        } => {
            let corpus = existing("--corpus", corpus)?;
            let codec = CodecModel::load(&existing("--codec", codec)?)?;
            let report_path = report.as_ref().map(|p| output("--report", p)).transpose()?;
            let groups = groups.clone().unwrap_or_else(|| cfg.eval.ablation_groups.clone());
            let train = tokenize_pairs(&codec, &corpus_split(&corpus, Split::Train)?)?;
            let val = tokenize_pairs(&codec, &limit(corpus_split(&corpus, Split::Val)?, cfg.eval.max_clips))?;
            let test = limit(corpus_split(&corpus, cfg.eval.split)?, cfg.eval.max_clips);
            let data = AblationData {
                train: &train,
                validation: &val,
                evaluation: &test,
            };
            let r = ablate_groups(&data, &codec, &groups, &cfg.denoiser, &cfg.train, cfg.eval.jobs)?;
            match format {
                Format::Table => print!("{}", r.to_table()),
                Format::Jsonl => print!("{}", r.to_jsonl()),
            }
            if let Some(p) = report_path {
                let mut outputs = Outputs::default();
                outputs.write(&p, r.to_jsonl().as_bytes())?;
                outputs.finish();
            }
        }
        Command::Flops {
            duration,
            codec,
            denoiser,
            format,
        } => {
            let codec_cfg = match codec {
                Some(p) => CodecModel::load(&existing("--codec", p)?)?.config().clone(),
                None => cfg.codec.model.clone(),
            };
            let denoiser_cfg = match denoiser {
                Some(p) => DenoiserModel::load(&existing("--denoiser", p)?)?.config().clone(),
                None => cfg.denoiser.clone(),
            };
            let f = flops_estimate(&codec_cfg, &denoiser_cfg, *duration)?;
            match format {
                Format::Table => print!("{}", f.to_table()),
                Format::Jsonl => println!("{}", f.to_json()),
            }
        }
    }
    Ok(())
}
