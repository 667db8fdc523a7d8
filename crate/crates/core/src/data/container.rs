//! Binary `MSIT` container for one co-registered set.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "MSIT" | version u32 | M u32 | K u32
//! M × { id_len u8 | id | T u32 | H u32 | W u32 | C u32 | T × u16 dates | T·H·W·C × f32 }
//! H u32 | W u32 | H·W × u16 labels
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::sample::{CoRegisteredSet, LabelMap, SitsSample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 4] = b"MSIT";
pub const CONTAINER_VERSION: u32 = 1;

pub fn encode_container<S: Scalar>(set: &CoRegisteredSet<S>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(set.samples.len(), "modality count")?.to_le_bytes());
    out.extend_from_slice(&u32_of(set.num_classes, "class count")?.to_le_bytes());
    for s in &set.samples {
        let id = s.modality.as_bytes();
        let len = u8::try_from(id.len())
            .map_err(|_| Error::Data(format!("modality id {:?} longer than 255 bytes", s.modality)))?;
        out.push(len);
        out.extend_from_slice(id);
        let (t, h, w, c) = s.dims();
        for v in [t, h, w, c] {
            out.extend_from_slice(&u32_of(v, "extent")?.to_le_bytes());
        }
        for d in s.dates() {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in s.x().data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(&u32_of(set.labels.height(), "label height")?.to_le_bytes());
    out.extend_from_slice(&u32_of(set.labels.width(), "label width")?.to_le_bytes());
    for c in set.labels.classes() {
        out.extend_from_slice(&c.to_le_bytes());
    }
    Ok(out)
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Data(format!("{what} {v} exceeds u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!(
                "truncated: {what} needs {n} bytes, {} left",
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    /// Reads a product of extents as an element count, guarding overflow.
    fn count(&self, dims: &[u32], width: usize) -> Result<usize> {
        dims.iter()
            .try_fold(width, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| self.err("extent product overflows"))
    }
}

pub fn decode_container<S: Scalar>(bytes: &[u8]) -> Result<CoRegisteredSet<S>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != CONTAINER_MAGIC {
        cur.pos = 0;
        return Err(cur.err(format!(
            "bad magic {:?}, expected \"MSIT\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = cur.u32("version")?;
    if version != CONTAINER_VERSION {
        cur.pos -= 4;
        return Err(cur.err(format!("unsupported version {version}, expected {CONTAINER_VERSION}")));
    }
    let m = cur.u32("modality count")?;
    let k = cur.u32("class count")?;
    let mut samples = Vec::with_capacity(m.min(64) as usize);
    for _ in 0..m {
        let start = cur.pos;
        let len = cur.u8("modality id length")? as usize;
        let id = std::str::from_utf8(cur.take(len, "modality id")?)
            .map_err(|_| Error::Parse {
                offset: start as u64 + 1,
                message: "modality id is not UTF-8".into(),
            })?
            .to_string();
        let dims = [
            cur.u32("T")?,
            cur.u32("H")?,
            cur.u32("W")?,
            cur.u32("C")?,
        ];
        let n_dates = dims[0] as usize;
        let date_bytes = cur.take(n_dates.checked_mul(2).ok_or_else(|| cur.err("T overflows"))?, "dates")?;
        let dates: Vec<u16> = date_bytes
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        let nbytes = cur.count(&dims, 4)?;
        let payload_at = cur.pos;
        let raw = cur.take(nbytes, "sample values")?;
        let data: Vec<S> = raw
            .chunks_exact(4)
            .map(|b| S::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        let shape = dims.iter().map(|&d| d as usize).collect();
        let sample = SitsSample::new(id, Tensor::new(shape, data)?, dates).map_err(|e| Error::Parse {
            offset: payload_at as u64,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }
    let h = cur.u32("label height")?;
    let w = cur.u32("label width")?;
    let n = cur.count(&[h, w], 2)?;
    let label_at = cur.pos;
    let classes: Vec<u16> = cur
        .take(n, "labels")?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    if cur.pos != bytes.len() {
        return Err(cur.err(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    let labels = LabelMap::new(h as usize, w as usize, classes)?;
    CoRegisteredSet::new(samples, labels, k as usize).map_err(|e| Error::Parse {
        offset: label_at as u64,
        message: e.to_string(),
    })
}

/// Writes atomically: a sibling temporary file renamed into place.
pub fn write_container<S: Scalar>(set: &CoRegisteredSet<S>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_container(set)?)
}

pub fn read_container<S: Scalar>(path: &Path) -> Result<CoRegisteredSet<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
