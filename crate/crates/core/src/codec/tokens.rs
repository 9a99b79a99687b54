//! Integer token matrices and the `ATOK` interchange file.
//!
//! ```text
//! "ATOK" | version: u32 | frames T: u32 | groups k: u32 | codebook size C: u32 |
//!   T*k tokens: u16, frame-major
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::checkpoint::Reader;

pub const ATOK_MAGIC: &[u8; 4] = b"ATOK";
pub const ATOK_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// `T × k` acoustic tokens, each in `[0, C)`, stored frame-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenMatrix {
    frames: usize,
    groups: usize,
    codebook_size: usize,
    tokens: Vec<u16>,
}

impl TokenMatrix {
    pub fn new(frames: usize, groups: usize, codebook_size: usize, tokens: Vec<u16>) -> Result<Self> {
        if groups == 0 {
            return Err(Error::dim("token matrix needs at least one group"));
        }
        if codebook_size == 0 || codebook_size > u16::MAX as usize + 1 {
            return Err(Error::dim(format!("codebook size {codebook_size} outside [1, 65536]")));
        }
        if tokens.len() != frames * groups {
            return Err(Error::dim(format!(
                "{} tokens for {frames} frames × {groups} groups",
                tokens.len()
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= codebook_size) {
            return Err(Error::Corruption(format!(
                "token {bad} outside [0, {codebook_size})"
            )));
        }
        Ok(Self {
            frames,
            groups,
            codebook_size,
            tokens,
        })
    }

    /// Builds from per-group columns of equal length.
    pub fn from_columns(columns: &[Vec<usize>], codebook_size: usize) -> Result<Self> {
        let groups = columns.len();
        let frames = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != frames) {
            return Err(Error::dim("token columns differ in length"));
        }
        let mut tokens = Vec::with_capacity(frames * groups);
        for t in 0..frames {
            for col in columns {
                let v = col[t];
                if v >= codebook_size {
                    return Err(Error::Corruption(format!(
                        "token {v} outside [0, {codebook_size})"
                    )));
                }
                tokens.push(v as u16);
            }
        }
        Self::new(frames, groups, codebook_size, tokens)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn get(&self, frame: usize, group: usize) -> usize {
        self.tokens[frame * self.groups + group] as usize
    }

    /// Tokens of one group (0-based) across all frames.
    pub fn column(&self, group: usize) -> Vec<usize> {
        (0..self.frames).map(|t| self.get(t, group)).collect()
    }

    /// The first `k` groups.
    pub fn leading(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.groups {
            return Err(Error::dim(format!("cannot take {k} of {} groups", self.groups)));
        }
        let tokens = self
            .tokens
            .chunks_exact(self.groups)
            .flat_map(|row| row[..k].iter().copied())
            .collect();
        Self::new(self.frames, k, self.codebook_size, tokens)
    }

    pub fn to_atok(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 2 * self.tokens.len());
        out.extend_from_slice(ATOK_MAGIC);
        out.extend_from_slice(&ATOK_VERSION.to_le_bytes());
        for v in [self.frames, self.groups, self.codebook_size] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_atok(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != ATOK_MAGIC {
            return Err(Error::format("magic", "not an ATOK token file"));
        }
        let version = r.u32("version")?;
        if version != ATOK_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let frames = r.u32("frames")? as usize;
        let groups = r.u32("groups")? as usize;
        let codebook_size = r.u32("codebook_size")? as usize;
        if groups == 0 {
            return Err(Error::format("groups", "zero token groups"));
        }
        if codebook_size == 0 || codebook_size > u16::MAX as usize + 1 {
            return Err(Error::format(
                "codebook_size",
                format!("{codebook_size} outside [1, 65536]"),
            ));
        }
        let expected = frames
            .checked_mul(groups)
            .and_then(|n| n.checked_mul(2))
            .ok_or_else(|| Error::format("frames", "token count overflows"))?;
        if expected != r.remaining() {
            return Err(Error::format(
                "tokens",
                format!("{} payload bytes, header implies {expected}", r.remaining()),
            ));
        }
        let mut tokens = Vec::with_capacity(frames * groups);
        for _ in 0..frames * groups {
            tokens.push(r.u16("tokens")?);
        }
        Self::new(frames, groups, codebook_size, tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_atok()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_atok(&bytes)
    }
}
