//! Noisy/clean corpus synthesis and the JSON-lines manifest.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mix::{mix_at_snr, Mixture};
use super::synth::{gen_clean, gen_noise, NoiseKind};
use super::wav::{encode_wav, read_wav};
use super::AudioClip;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::config("split", format!("unknown split {s:?}")))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub duration_s: f64,
    pub train_snr_db: [f64; 2],
    pub val_snr_db: [f64; 2],
    pub test_snr_db: [f64; 2],
    pub noise_kinds: Vec<NoiseKind>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 2000,
            val: 200,
            test: 200,
            duration_s: 1.0,
            train_snr_db: [-5.0, 15.0],
            val_snr_db: [-5.0, 15.0],
            test_snr_db: [0.0, 20.0],
            noise_kinds: NoiseKind::ALL.to_vec(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("corpus.train_snr_db", self.train_snr_db),
            ("corpus.val_snr_db", self.val_snr_db),
            ("corpus.test_snr_db", self.test_snr_db),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::config(name, format!("invalid range [{lo}, {hi}]")));
            }
        }
        if !(self.duration_s >= 0.5) || !self.duration_s.is_finite() {
            return Err(Error::config("corpus.duration_s", "must be at least 0.5 s"));
        }
        if self.noise_kinds.is_empty() {
            return Err(Error::config("corpus.noise_kinds", "needs at least one kind"));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn snr_range(&self, split: Split) -> [f64; 2] {
        match split {
            Split::Train => self.train_snr_db,
            Split::Val => self.val_snr_db,
            Split::Test => self.test_snr_db,
        }
    }

    fn global_index(&self, split: Split, index: usize) -> u64 {
        let offset = match split {
            Split::Train => 0,
            Split::Val => self.train,
            Split::Test => self.train + self.val,
        };
        (offset + index) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub split: Split,
    pub clean_path: String,
    pub noise_path: String,
    pub noisy_path: String,
    pub snr_db: f64,
    pub seed: u64,
}

impl ManifestEntry {
    pub fn parse_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::format("manifest", e.to_string()))
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("manifest entry serializes")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&e.to_line());
            s.push('\n');
        }
        s
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(ManifestEntry::parse_line)
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse_jsonl(&text)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fully determined content of one manifest entry.
pub struct SynthesizedEntry {
    pub entry: ManifestEntry,
    pub kind: NoiseKind,
    pub mixture: Mixture,
}

/// Synthesizes entry `index` of `split` in memory.
pub fn synthesize_entry(cfg: &CorpusConfig, split: Split, index: usize) -> Result<SynthesizedEntry> {
    // base + global index keeps every entry seed distinct
    let seed = splitmix64(cfg.seed).wrapping_add(cfg.global_index(split, index));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = cfg.snr_range(split);
    let snr_db = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let kind = cfg.noise_kinds[rng.random_range(0..cfg.noise_kinds.len())];
    let clean = gen_clean(splitmix64(seed ^ 0xC1EA), cfg.duration_s)?;
    let noise = gen_noise(splitmix64(seed ^ 0x4015E), cfg.duration_s, kind)?;
    let mixture = mix_at_snr(&clean, &noise, snr_db)?;
    let stem = format!("{}_{index:05}.wav", split.as_str());
    Ok(SynthesizedEntry {
        entry: ManifestEntry {
            split,
            clean_path: format!("clean/{stem}"),
            noise_path: format!("noise/{stem}"),
            noisy_path: format!("noisy/{stem}"),
            snr_db,
            seed,
        },
        kind,
        mixture,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub written: usize,
    pub unchanged: usize,
}

/// Writes `bytes` unless the file already holds exactly them.
fn write_if_changed(path: &Path, bytes: &[u8], stats: &mut BuildStats) -> Result<()> {
    if let Ok(existing) = std::fs::read(path) {
        if existing == bytes {
            stats.unchanged += 1;
            return Ok(());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    stats.written += 1;
    Ok(())
}

/// Emits clean/noise/noisy WAVs for every split plus `manifest.jsonl`.
pub fn build_corpus(cfg: &CorpusConfig, out_dir: &Path, jobs: usize) -> Result<(CorpusManifest, BuildStats)> {
    cfg.validate()?;
    for sub in ["clean", "noise", "noisy"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let work: Vec<(Split, usize)> = Split::ALL
        .iter()
        .flat_map(|&s| (0..cfg.count(s)).map(move |i| (s, i)))
        .collect();
    let jobs = jobs.max(1).min(work.len().max(1));
    let chunk = work.len().div_ceil(jobs).max(1);
    let results: Vec<Result<(Vec<ManifestEntry>, BuildStats)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = work
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || -> Result<(Vec<ManifestEntry>, BuildStats)> {
                    let mut stats = BuildStats::default();
                    let mut entries = Vec::with_capacity(part.len());
                    for &(split, i) in part {
                        let s = synthesize_entry(cfg, split, i)?;
                        let m = &s.mixture;
                        for (rel, clip) in [
                            (&s.entry.clean_path, &m.clean),
                            (&s.entry.noise_path, &m.noise),
                            (&s.entry.noisy_path, &m.noisy),
                        ] {
                            write_if_changed(&out_dir.join(rel), &encode_wav(clip)?, &mut stats)?;
                        }
                        entries.push(s.entry);
                    }
                    Ok((entries, stats))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("corpus worker panicked")).collect()
    });
    let mut manifest = CorpusManifest::default();
    let mut stats = BuildStats::default();
    for r in results {
        let (entries, s) = r?;
        manifest.entries.extend(entries);
        stats.written += s.written;
        stats.unchanged += s.unchanged;
    }
    write_if_changed(&out_dir.join(MANIFEST_FILE), manifest.to_jsonl().as_bytes(), &mut stats)?;
    Ok((manifest, stats))
}

/// A clean/noisy pair read back from disk.
#[derive(Clone, Debug)]
pub struct Pair {
    pub clean: AudioClip,
    pub noisy: AudioClip,
    pub snr_db: f64,
}

pub fn load_pairs(dir: &Path, manifest: &CorpusManifest, split: Split) -> Result<Vec<Pair>> {
    manifest
        .split(split)
        .map(|e| {
            Ok(Pair {
                clean: read_wav(&resolve(dir, &e.clean_path))?,
                noisy: read_wav(&resolve(dir, &e.noisy_path))?,
                snr_db: e.snr_db,
            })
        })
        .collect()
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::dsp::mix::measured_snr_db;

    fn small() -> CorpusConfig {
        CorpusConfig {
            seed: 7,
            train: 12,
            val: 3,
            test: 6,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn snr_ranges_follow_split_protocol() {
        let cfg = CorpusConfig {
            train: 100,
            val: 20,
            test: 100,
            ..small()
        };
        for split in Split::ALL {
            let [lo, hi] = cfg.snr_range(split);
            for i in 0..cfg.count(split) {
                let s = synthesize_entry(&cfg, split, i).unwrap();
                assert!(s.entry.snr_db >= lo && s.entry.snr_db <= hi);
                let got = measured_snr_db(s.mixture.clean.samples(), s.mixture.noise.samples());
                assert!((got - s.entry.snr_db).abs() < 1e-6);
            }
        }
        assert_eq!(cfg.snr_range(Split::Train), [-5.0, 15.0]);
        assert_eq!(cfg.snr_range(Split::Test), [0.0, 20.0]);
    }

    #[test]
    fn build_is_deterministic_and_idempotent() {
        let cfg = small();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (ma, sa) = build_corpus(&cfg, a.path(), 1).unwrap();
        let (mb, _) = build_corpus(&cfg, b.path(), 3).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(sa.unchanged, 0);
        for e in &ma.entries {
            for rel in [&e.clean_path, &e.noise_path, &e.noisy_path] {
                assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
            }
        }
        let (_, again) = build_corpus(&cfg, a.path(), 1).unwrap();
        assert_eq!(again.written, 0);
        let seeds: HashSet<u64> = ma.entries.iter().map(|e| e.seed).collect();
        assert_eq!(seeds.len(), ma.entries.len());
        assert_eq!(CorpusManifest::load(a.path()).unwrap(), ma);
        let pairs = load_pairs(a.path(), &ma, Split::Test).unwrap();
        assert_eq!(pairs.len(), 6);
        assert!(pairs.iter().all(|p| p.noisy.peak() <= 1.0));
    }

    #[test]
    fn inverted_range_names_the_field() {
        let cfg = CorpusConfig {
            train_snr_db: [10.0, -5.0],
            ..small()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "corpus.train_snr_db"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_rejects_unknown_keys() {
        let line = r#"{"split":"train","clean_path":"a","noise_path":"b","noisy_path":"c","snr_db":1.0,"seed":3,"x":1}"#;
        assert!(ManifestEntry::parse_line(line).is_err());
        let ok = r#"{"split":"val","clean_path":"a","noise_path":"b","noisy_path":"c","snr_db":1.0,"seed":3}"#;
        assert_eq!(ManifestEntry::parse_line(ok).unwrap().split, Split::Val);
    }
}
