//! `TDNZ` parameter checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TDNZ" | version: u32 | record count: u32 |
//!   repeated: name len: u32 | name: UTF-8 | rank: u32 | dims: u64 * rank | data: f64 * prod(dims)
//! ```

use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TDNZ";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: Record) {
        debug_assert_eq!(
            record.shape.iter().product::<usize>(),
            record.data.len(),
            "record {} shape/data mismatch",
            record.name
        );
        self.records.push(record);
    }

    pub fn push_scalars(&mut self, name: &str, values: &[f64]) {
        self.push(Record {
            name: name.to_string(),
            shape: vec![values.len()],
            data: values.to_vec(),
        });
    }

    /// Scalars stored across all records.
    pub fn total_scalars(&self) -> usize {
        self.records.iter().map(|r| r.data.len()).sum()
    }

    /// Rejects a stored configuration whose weights could not fit in this
    /// checkpoint, before anything of that size is allocated.
    pub fn ensure_holds(&self, what: &str, factors: &[&[usize]]) -> Result<()> {
        let mut need: usize = 0;
        for term in factors {
            let n = term
                .iter()
                .try_fold(1usize, |acc, &f| acc.checked_mul(f))
                .and_then(|n| need.checked_add(n));
            need = n.ok_or_else(|| Error::Corruption(format!("{what} size overflows")))?;
        }
        if need > self.total_scalars() {
            return Err(Error::Corruption(format!(
                "{what} needs at least {need} weights, checkpoint stores {}",
                self.total_scalars()
            )));
        }
        Ok(())
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn scalars(&self, name: &str) -> Result<&[f64]> {
        self.get(name)
            .map(|r| r.data.as_slice())
            .ok_or_else(|| Error::Corruption(format!("checkpoint lacks {name}")))
    }

    /// Reads a scalar record that must hold a non-negative integer.
    pub fn usize_at(&self, name: &str) -> Result<usize> {
        let v = self.scalars(name)?;
        match v {
            [x] if *x >= 0.0 && x.fract() == 0.0 && *x <= u32::MAX as f64 => Ok(*x as usize),
            _ => Err(Error::Corruption(format!("{name} is not a count"))),
        }
    }

    pub fn usizes_at(&self, name: &str) -> Result<Vec<usize>> {
        self.scalars(name)?
            .iter()
            .map(|&x| {
                if x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64 {
                    Ok(x as usize)
                } else {
                    Err(Error::Corruption(format!("{name} holds a non-count")))
                }
            })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { buf: bytes, pos: 0 };
        let magic = rd.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format("magic", "not a TDNZ checkpoint"));
        }
        let version = rd.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "version",
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let count = rd.u32("record count")? as usize;
        let mut records = Vec::new();
        for _ in 0..count {
            let name_len = rd.u32("name length")? as usize;
            let name = std::str::from_utf8(rd.take(name_len, "name")?)
                .map_err(|_| Error::format("name", "record name is not UTF-8"))?
                .to_string();
            let rank = rd.u32("rank")? as usize;
            if rank > rd.remaining() / 8 {
                return Err(Error::format("rank", format!("{name}: rank {rank} overruns file")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut n: usize = 1;
            for _ in 0..rank {
                let d = rd.u64("dims")?;
                let d = usize::try_from(d)
                    .map_err(|_| Error::format("dims", format!("{name}: dimension too large")))?;
                n = n
                    .checked_mul(d)
                    .ok_or_else(|| Error::format("dims", format!("{name}: element count overflows")))?;
                shape.push(d);
            }
            if n > rd.remaining() / 8 {
                return Err(Error::format(
                    "data",
                    format!("{name}: {n} values overrun the file"),
                ));
            }
            let raw = rd.take(n * 8, "data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(Record { name, shape, data });
        }
        if rd.remaining() != 0 {
            return Err(Error::format(
                "trailer",
                format!("{} unexpected trailing bytes", rd.remaining()),
            ));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(field, "unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}
