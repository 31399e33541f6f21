//! Packed dataset container, little-endian throughout:
//!
//! ```text
//! magic        8 bytes  "ECGPACK1"
//! target_len   u64
//! split_seed   u64
//! channels     u32
//! n_classes    u32
//! n_train      u64      unique training records
//! n_val        u64
//! n_test       u64
//! records      n_train + n_val + n_test entries, train then val then test:
//!   id_len u32, id (UTF-8), label u32, valid_len u64,
//!   signal f64 × channels × valid_len (channel-major)
//! n_upsample   u64
//! upsample     u64 × n_upsample  (indices into the training records)
//! ```
//!
//! Records are stored as their valid span; the mask of a record placed at
//! offset `o` in a `target_len` window is 1 on `o..o + valid_len`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DatasetSplit, PreparedRecord};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const PACK_MAGIC: &[u8; 8] = b"ECGPACK1";

#[derive(Debug, Clone, PartialEq)]
pub struct PackedDataset {
    pub target_len: usize,
    pub split: DatasetSplit,
}

impl PackedDataset {
    pub fn channels(&self) -> usize {
        self.split
            .train
            .iter()
            .chain(&self.split.val)
            .chain(&self.split.test)
            .next()
            .map_or(0, |r| r.channels())
    }
}

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u32).to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_record(w: &mut impl Write, r: &PreparedRecord) -> std::io::Result<()> {
    put_u32(w, r.id.len())?;
    w.write_all(r.id.as_bytes())?;
    put_u32(w, r.label)?;
    put_u64(w, r.valid_len() as u64)?;
    for v in r.signal.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_pack(pack: &PackedDataset, path: &Path) -> Result<()> {
    let s = &pack.split;
    s.validate()?;
    let c = pack.channels();
    for r in s.train.iter().chain(&s.val).chain(&s.test) {
        if r.channels() != c || r.valid_len() > pack.target_len {
            return Err(Error::Input(format!(
                "record {} is {:?}; pack holds {c} channels of at most {} samples",
                r.id,
                r.signal.shape(),
                pack.target_len
            )));
        }
    }
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let body = (|| -> std::io::Result<()> {
        w.write_all(PACK_MAGIC)?;
        put_u64(&mut w, pack.target_len as u64)?;
        put_u64(&mut w, s.split_seed)?;
        put_u32(&mut w, c)?;
        put_u32(&mut w, s.n_classes)?;
        for n in [s.train.len(), s.val.len(), s.test.len()] {
            put_u64(&mut w, n as u64)?;
        }
        for r in s.train.iter().chain(&s.val).chain(&s.test) {
            put_record(&mut w, r)?;
        }
        put_u64(&mut w, s.upsample.len() as u64)?;
        for &i in &s.upsample {
            put_u64(&mut w, i as u64)?;
        }
        w.flush()
    })();
    body.map_err(io)
}

struct Reader<'a, R: Read> {
    inner: R,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| Error::data(self.path, "truncated pack file"))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn len(&mut self, limit: u64, what: &str) -> Result<usize> {
        let v = self.u64()?;
        if v > limit {
            return Err(Error::data(self.path, format!("implausible {what}: {v}")));
        }
        Ok(v as usize)
    }

    fn record(
        &mut self,
        channels: usize,
        target_len: usize,
        n_classes: usize,
    ) -> Result<PreparedRecord> {
        let id_len = self.u32()?;
        if id_len > 4096 {
            return Err(Error::data(
                self.path,
                format!("implausible id length {id_len}"),
            ));
        }
        let mut id = vec![0u8; id_len];
        self.inner
            .read_exact(&mut id)
            .map_err(|_| Error::data(self.path, "truncated pack file"))?;
        let id =
            String::from_utf8(id).map_err(|_| Error::data(self.path, "record id is not UTF-8"))?;
        let label = self.u32()?;
        if label >= n_classes {
            return Err(Error::data(
                self.path,
                format!("record {id}: label {label} ≥ {n_classes}"),
            ));
        }
        let valid = self.len(target_len as u64, "valid length")?;
        let mut data = Vec::with_capacity(channels * valid);
        for _ in 0..channels * valid {
            data.push(f64::from_le_bytes(self.bytes()?));
        }
        Ok(PreparedRecord {
            signal: Tensor::new(&[channels, valid], data)
                .map_err(|e| Error::data(self.path, e.to_string()))?,
            id,
            label,
        })
    }
}

pub fn read_pack(path: &Path) -> Result<PackedDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path,
    };
    if &r.bytes::<8>()? != PACK_MAGIC {
        return Err(Error::data(path, "not a packed dataset (bad magic)"));
    }
    let target_len = r.len(1 << 32, "target length")?;
    let split_seed = r.u64()?;
    let channels = r.u32()?;
    let n_classes = r.u32()?;
    let mut counts = [0usize; 3];
    for n in &mut counts {
        *n = r.len(1 << 32, "record count")?;
    }
    let mut parts: Vec<Vec<PreparedRecord>> = Vec::with_capacity(3);
    for n in counts {
        parts.push(
            (0..n)
                .map(|_| r.record(channels, target_len, n_classes))
                .collect::<Result<_>>()?,
        );
    }
    let n_up = r.len(1 << 32, "upsample count")?;
    let upsample = (0..n_up)
        .map(|_| r.u64().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    if r.inner
        .read(&mut [0u8; 1])
        .map_err(|e| Error::io(path, e))?
        != 0
    {
        return Err(Error::data(path, "trailing bytes after pack contents"));
    }
    let test = parts.pop().unwrap_or_default();
    let val = parts.pop().unwrap_or_default();
    let train = parts.pop().unwrap_or_default();
    let split = DatasetSplit {
        n_classes,
        train,
        upsample,
        val,
        test,
        split_seed,
    };
    split
        .validate()
        .map_err(|e| Error::data(path, e.to_string()))?;
    Ok(PackedDataset { target_len, split })
}
