//! Little-endian binary embedding/label files and line-delimited
//! pseudo-label files.

use std::io::Write;
use std::path::Path;

use crate::alignment::MetricRow;
use crate::error::{Error, Result};
use crate::pseudo_labeler::PseudoLabelRecord;
use crate::tensor::Tensor;

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
pub const LBL_MAGIC: &[u8; 4] = b"LBL1";
pub const PLBL_HEADER: &str = "PLBL1";

/// Sequential little-endian reader that reports byte offsets.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("truncated {what}: expected {n} bytes, found {left}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != m {
            return Err(Error::Format {
                offset: 0,
                detail: format!(
                    "bad magic: expected {:?}, found {:?}",
                    String::from_utf8_lossy(m),
                    String::from_utf8_lossy(got)
                ),
            });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n.checked_mul(4).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            detail: format!("{what}: length overflow"),
        })?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Contract(format!("{what} {n} does not fit in u32")))
}

pub fn embeddings_to_bytes(m: &Tensor<f32>) -> Result<Vec<u8>> {
    let (n, d) = match m.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::Contract(format!("embeddings must be a matrix, got {s:?}"))),
    };
    let mut out = Vec::with_capacity(12 + 4 * m.numel());
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&u32_of(n, "count")?.to_le_bytes());
    out.extend_from_slice(&u32_of(d, "dim")?.to_le_bytes());
    m.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    Ok(out)
}

pub fn embeddings_from_bytes(buf: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new(buf);
    r.magic(EMB_MAGIC)?;
    let n = r.u32("count")? as usize;
    let d = r.u32("dim")? as usize;
    let data = r.f32s(n * d, "payload")?;
    r.finish()?;
    Tensor::new([n, d], data)
}

pub fn write_embeddings(path: &Path, m: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, embeddings_to_bytes(m)?)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Tensor<f32>> {
    embeddings_from_bytes(&std::fs::read(path)?)
}

pub fn labels_to_bytes(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * labels.len());
    out.extend_from_slice(LBL_MAGIC);
    out.extend_from_slice(&u32_of(labels.len(), "count")?.to_le_bytes());
    for &l in labels {
        out.extend_from_slice(&u32_of(l, "label")?.to_le_bytes());
    }
    Ok(out)
}

pub fn labels_from_bytes(buf: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader::new(buf);
    r.magic(LBL_MAGIC)?;
    let n = r.u32("count")? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        out.push(r.u32("label")? as usize);
    }
    r.finish()?;
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    std::fs::write(path, labels_to_bytes(labels)?)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    labels_from_bytes(&std::fs::read(path)?)
}

pub fn pseudo_labels_to_string(records: &[PseudoLabelRecord]) -> Result<String> {
    let mut out = String::from(PLBL_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn pseudo_labels_from_str(text: &str) -> Result<Vec<PseudoLabelRecord>> {
    let mut offset = 0u64;
    let mut lines = text.split_inclusive('\n');
    match lines.next() {
        Some(h) if h.trim_end() == PLBL_HEADER => offset += h.len() as u64,
        _ => {
            return Err(Error::Format {
                offset: 0,
                detail: format!("missing {PLBL_HEADER} header"),
            })
        }
    }
    let mut out = Vec::new();
    for line in lines {
        let body = line.trim();
        if !body.is_empty() {
            let r = serde_json::from_str(body).map_err(|e| Error::Format {
                offset,
                detail: format!("bad record: {e}"),
            })?;
            out.push(r);
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

pub fn write_pseudo_labels(path: &Path, records: &[PseudoLabelRecord]) -> Result<()> {
    std::fs::write(path, pseudo_labels_to_string(records)?)?;
    Ok(())
}

pub fn read_pseudo_labels(path: &Path) -> Result<Vec<PseudoLabelRecord>> {
    pseudo_labels_from_str(&std::fs::read_to_string(path)?)
}

/// CSV with columns `stage,epoch,pair,loss_cls,loss_ae,loss_l1,total`;
/// an empty `pair` marks a joint (all-bank) row.
pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    csv.flush()?;
    Ok(())
}
