//! The MMT1 container: a little-endian header followed by fixed-width
//! records.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MMT1"
//! 4       2     version (1)
//! 6       4     record count
//! 10      2     text_dim
//! 12      2     image_dim
//! 14      2     n_classes
//! 16      ...   records: u16 id length, UTF-8 id, text_dim f32,
//!               image_dim f32, n_classes label bytes (0 or 1)
//! ```

use std::fs;
use std::path::Path;

use super::{Dataset, Record};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MMT1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

pub fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let dims = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::Schema(format!("{what} {v} does not fit in u16")))
    };
    let count = u32::try_from(ds.records.len())
        .map_err(|_| Error::Schema("too many records for one container".into()))?;
    let per_record = 2 + 4 * (ds.text_dim + ds.image_dim) + ds.n_classes;
    let mut out = Vec::with_capacity(HEADER_LEN + ds.records.len() * (per_record + 16));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dims(ds.text_dim, "text_dim")?.to_le_bytes());
    out.extend_from_slice(&dims(ds.image_dim, "image_dim")?.to_le_bytes());
    out.extend_from_slice(&dims(ds.n_classes, "n_classes")?.to_le_bytes());
    for r in &ds.records {
        let id_len = u16::try_from(r.id.len())
            .map_err(|_| Error::Schema(format!("id of {} bytes is too long", r.id.len())))?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(r.id.as_bytes());
        for v in r.text_emb.iter().chain(&r.image_emb) {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        out.extend_from_slice(&r.labels);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!(
                    "truncated: {what} needs {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n, what)?
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected MMT1".into(),
        });
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = cur.u32("record count")? as usize;
    let text_dim = cur.u16("text_dim")? as usize;
    let image_dim = cur.u16("image_dim")? as usize;
    let n_classes = cur.u16("n_classes")? as usize;

    let mut records = Vec::with_capacity(count.min(bytes.len() / (2 + n_classes).max(1)));
    for i in 0..count {
        let start = cur.pos;
        let id_len = cur.u16("id length")? as usize;
        let id = std::str::from_utf8(cur.take(id_len, "id")?)
            .map_err(|e| Error::Format {
                offset: (start + 2 + e.valid_up_to()) as u64,
                msg: format!("record {i} id is not UTF-8"),
            })?
            .to_owned();
        let text_emb = cur.floats(text_dim, "text embedding")?;
        let image_emb = cur.floats(image_dim, "image embedding")?;
        let label_at = cur.pos;
        let labels = cur.take(n_classes, "labels")?.to_vec();
        if let Some(j) = labels.iter().position(|&b| b > 1) {
            return Err(Error::Schema(format!(
                "record {i} label {j} is {} at byte {}, expected 0 or 1",
                labels[j],
                label_at + j
            )));
        }
        records.push(Record {
            id,
            text_emb,
            image_emb,
            labels,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            msg: format!("{} trailing bytes after last record", bytes.len() - cur.pos),
        });
    }
    let ds = Dataset {
        text_dim,
        image_dim,
        n_classes,
        records,
    };
    ds.warn_unlabelled();
    Ok(ds)
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let ds = decode(&fs::read(path)?)?;
    log::info!("read {} records from {}", ds.records.len(), path.display());
    Ok(ds)
}

pub fn write_container(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    fs::write(path, encode(ds)?)?;
    Ok(())
}
