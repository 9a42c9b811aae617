//! `RTCK` checkpoint container: a config hash plus named, typed arrays.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I8(Vec<i8>),
    U64(Vec<u64>),
}

impl EntryData {
    fn dtype(&self) -> u8 {
        match self {
            EntryData::F32(_) => 0,
            EntryData::F64(_) => 1,
            EntryData::I8(_) => 2,
            EntryData::U64(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
            EntryData::I8(v) => v.len(),
            EntryData::U64(v) => v.len(),
        }
    }

    fn elem_size(dtype: u8) -> Option<usize> {
        match dtype {
            0 => Some(4),
            1 => Some(8),
            2 => Some(1),
            3 => Some(8),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: EntryData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new(config_hash: [u8; 32]) -> Self {
        Self { config_hash, entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], data: EntryData) {
        let dims: Vec<u32> = dims.iter().map(|&d| d as u32).collect();
        debug_assert_eq!(dims.iter().map(|&d| d as usize).product::<usize>(), data.len());
        self.entries.push(Entry { name: name.into(), dims, data });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no entry {name:?}")))
    }

    pub fn scalar_u64(&self, name: &str) -> Result<u64> {
        match &self.require(name)?.data {
            EntryData::U64(v) if v.len() == 1 => Ok(v[0]),
            _ => Err(Error::Format(format!("checkpoint entry {name:?} is not a u64 scalar"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.config_hash);
        b.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            let nlen = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("entry name too long: {}", e.name)))?;
            let ndim = u8::try_from(e.dims.len())
                .map_err(|_| Error::Format(format!("entry {} has too many dims", e.name)))?;
            b.extend_from_slice(&nlen.to_le_bytes());
            b.extend_from_slice(name);
            b.push(e.data.dtype());
            b.push(ndim);
            for d in &e.dims {
                b.extend_from_slice(&d.to_le_bytes());
            }
            match &e.data {
                EntryData::F32(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
                EntryData::F64(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
                EntryData::I8(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
                EntryData::U64(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let config_hash: [u8; 32] = r.take(32, "config hash")?.try_into().unwrap();
        let count = r.u32("entry count")?;
        let mut entries = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(nlen, "name")?.to_vec())
                .map_err(|_| Error::Format("entry name is not utf-8".into()))?;
            let dtype = r.take(1, "dtype")?[0];
            let ndim = r.take(1, "ndim")?[0] as usize;
            let dims = (0..ndim).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or_else(|| Error::Format(format!("entry {name} dims overflow")))?;
            let size = EntryData::elem_size(dtype)
                .ok_or_else(|| Error::Format(format!("entry {name} has unknown dtype {dtype}")))?;
            let raw = r.take(n * size, &name)?;
            let data = match dtype {
                0 => EntryData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => EntryData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => EntryData::I8(raw.iter().map(|&c| c as i8).collect()),
                _ => EntryData::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            entries.push(Entry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self { config_hash, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated checkpoint reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
