//! Binary file formats and CSV import.
//!
//! All integers and floats are little-endian. Every file starts with a
//! 4-byte magic and a `u16` version (currently 1).
//!
//! | magic  | body |
//! |--------|------|
//! | `JCCH` | dataset: `n, C, d1, d2: u32`; labels as `n` rows of `⌈C/8⌉` bytes (label `s` at byte `s/8`, bit `s%8`, LSB first); `n·d1` then `n·d2` `f32` features; one flags byte (bit 0: paired) |
//! | `JCCF` | coefficients: `n, C, l: u32`; `rescaled: u8`; `n·C` `f64` q then `n·C` `f64` u |
//! | `JCCM` | model: `d1, d2, h, r, C: u32`; `f64` blocks m1.w_hidden, m1.b_hidden, m1.w_hash, m1.w_cls, the same four for m2, then centers (column-major) |
//! | `JCCB` | codes: `n, r: u32`; `n·⌈r/64⌉` `u64` words, row-major |
//!
//! Matrices are stored row-major. A dataset file without the trailing flags
//! byte reads as paired.

use std::io::Read;
use std::path::Path;

use crate::coefficients::CoefficientSet;
use crate::data::CrossModalDataset;
use crate::error::{invalid, Error, Result};
use crate::labels::LabelMatrix;
use crate::matrix::{FeatureMatrix, Matrix};
use crate::retrieval::HashCodeSet;
use crate::trainer::{Dims, EncoderParams};

pub const VERSION: u16 = 1;

const DATASET: (&[u8; 4], &str) = (b"JCCH", "dataset");
const COEFFS: (&[u8; 4], &str) = (b"JCCF", "coefficient");
const MODEL: (&[u8; 4], &str) = (b"JCCM", "model");
const CODES: (&[u8; 4], &str) = (b"JCCB", "code");

fn header(magic: &[u8; 4]) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| invalid("file header", format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], (magic, kind): (&[u8; 4], &'static str)) -> Result<Self> {
        let mut r = Self { buf, pos: 0, kind };
        if r.take(4)? != magic {
            return Err(Error::Format {
                kind,
                reason: format!("bad magic (expected {:?})", String::from_utf8_lossy(magic)),
            });
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                kind,
                found: version,
                expected: VERSION,
            });
        }
        Ok(r)
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or(Error::Truncated(self.kind))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    /// Checked `a·b·width` for a payload length.
    fn payload(&self, count: &[usize], width: usize) -> Result<usize> {
        count
            .iter()
            .try_fold(width, |acc, &c| acc.checked_mul(c))
            .ok_or(Error::Truncated(self.kind))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let len = self.payload(&[count], 8)?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let len = self.payload(&[count], 4)?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn finish(self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format {
                kind: self.kind,
                reason: format!("{} trailing bytes", self.remaining()),
            });
        }
        Ok(())
    }
}

fn format_err(kind: &'static str, e: Error) -> Error {
    match e {
        Error::Shape(reason) | Error::NonFinite(reason) | Error::Invalid { reason, .. } => {
            Error::Format { kind, reason }
        }
        other => other,
    }
}

pub fn dataset_to_bytes(ds: &CrossModalDataset) -> Result<Vec<u8>> {
    let y = ds.labels();
    let (n, c) = (ds.n(), y.num_labels());
    let mut out = header(DATASET.0);
    for v in [n, c, ds.features1().cols(), ds.features2().cols()] {
        put_u32(&mut out, v)?;
    }
    let row_bytes = c.div_ceil(8);
    for i in 0..n {
        let mut row = vec![0u8; row_bytes];
        for &s in y.labels(i) {
            row[s / 8] |= 1 << (s % 8);
        }
        out.extend_from_slice(&row);
    }
    for m in [ds.features1(), ds.features2()] {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.push(u8::from(ds.paired()));
    Ok(out)
}

pub fn dataset_from_bytes(buf: &[u8]) -> Result<CrossModalDataset> {
    let mut r = Reader::open(buf, DATASET)?;
    let (n, c, d1, d2) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let row_bytes = c.div_ceil(8);
    let label_bytes = r.take(r.payload(&[n], row_bytes)?)?;
    let sets: Vec<Vec<usize>> = label_bytes
        .chunks(row_bytes.max(1))
        .take(n)
        .map(|row| (0..c).filter(|&s| row[s / 8] >> (s % 8) & 1 == 1).collect())
        .collect();
    let labels = LabelMatrix::from_sets(c, sets).map_err(|e| format_err(DATASET.1, e))?;
    let f1 = FeatureMatrix::from_vec(n, d1, r.f32s(r.payload(&[n, d1], 1)?)?)?;
    let f2 = FeatureMatrix::from_vec(n, d2, r.f32s(r.payload(&[n, d2], 1)?)?)?;
    let paired = if r.remaining() == 0 { true } else { r.u8()? & 1 == 1 };
    r.finish()?;
    CrossModalDataset::new(f1, f2, labels, paired).map_err(|e| format_err(DATASET.1, e))
}

pub fn coefficients_to_bytes(c: &CoefficientSet) -> Result<Vec<u8>> {
    let mut out = header(COEFFS.0);
    for v in [c.n(), c.num_labels(), c.anchor_size()] {
        put_u32(&mut out, v)?;
    }
    out.push(u8::from(c.rescaled()));
    put_f64s(&mut out, c.q_values());
    put_f64s(&mut out, c.u_values());
    Ok(out)
}

pub fn coefficients_from_bytes(buf: &[u8]) -> Result<CoefficientSet> {
    let mut r = Reader::open(buf, COEFFS)?;
    let (n, c, l) = (r.u32()?, r.u32()?, r.u32()?);
    let rescaled = match r.u8()? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Format {
                kind: COEFFS.1,
                reason: format!("rescaled flag {other}"),
            })
        }
    };
    let count = r.payload(&[n, c], 1)?;
    let q = r.f64s(count)?;
    let u = r.f64s(count)?;
    r.finish()?;
    CoefficientSet::from_parts(n, c, q, u, l, rescaled).map_err(|e| format_err(COEFFS.1, e))
}

pub fn model_to_bytes(p: &EncoderParams) -> Result<Vec<u8>> {
    let d = p.dims();
    let mut out = header(MODEL.0);
    for v in [d.d1, d.d2, d.hidden, d.code_len, d.num_labels] {
        put_u32(&mut out, v)?;
    }
    for block in p.blocks() {
        put_f64s(&mut out, block);
    }
    Ok(out)
}

pub fn model_from_bytes(buf: &[u8]) -> Result<EncoderParams> {
    let mut r = Reader::open(buf, MODEL)?;
    let dims = Dims {
        d1: r.u32()?,
        d2: r.u32()?,
        hidden: r.u32()?,
        code_len: r.u32()?,
        num_labels: r.u32()?,
    };
    let sizes = [
        r.payload(&[dims.d1, dims.hidden], 1)?,
        dims.hidden,
        r.payload(&[dims.hidden, dims.code_len], 1)?,
        r.payload(&[dims.hidden, dims.num_labels], 1)?,
        r.payload(&[dims.d2, dims.hidden], 1)?,
        dims.hidden,
        r.payload(&[dims.hidden, dims.code_len], 1)?,
        r.payload(&[dims.hidden, dims.num_labels], 1)?,
        r.payload(&[dims.code_len, dims.num_labels], 1)?,
    ];
    let mut blocks = Vec::with_capacity(9);
    for size in sizes {
        blocks.push(r.f64s(size)?);
    }
    r.finish()?;
    let mut p = EncoderParams::zeros(dims);
    for (dst, src) in p.blocks_mut().into_iter().zip(&blocks) {
        dst.copy_from_slice(src);
    }
    if !p.is_finite() {
        return Err(Error::Format {
            kind: MODEL.1,
            reason: "non-finite parameters".into(),
        });
    }
    Ok(p)
}

pub fn codes_to_bytes(c: &HashCodeSet) -> Result<Vec<u8>> {
    let mut out = header(CODES.0);
    put_u32(&mut out, c.n())?;
    put_u32(&mut out, c.code_len())?;
    for w in c.words() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(out)
}

pub fn codes_from_bytes(buf: &[u8]) -> Result<HashCodeSet> {
    let mut r = Reader::open(buf, CODES)?;
    let (n, code_len) = (r.u32()?, r.u32()?);
    let len = r.payload(&[n, code_len.div_ceil(64)], 8)?;
    let words = r
        .take(len)?
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    r.finish()?;
    HashCodeSet::from_words(n, code_len, words).map_err(|e| format_err(CODES.1, e))
}

pub fn save_dataset(path: &Path, ds: &CrossModalDataset) -> Result<()> {
    Ok(std::fs::write(path, dataset_to_bytes(ds)?)?)
}

pub fn load_dataset(path: &Path) -> Result<CrossModalDataset> {
    dataset_from_bytes(&std::fs::read(path)?)
}

pub fn save_coefficients(path: &Path, c: &CoefficientSet) -> Result<()> {
    Ok(std::fs::write(path, coefficients_to_bytes(c)?)?)
}

pub fn load_coefficients(path: &Path) -> Result<CoefficientSet> {
    coefficients_from_bytes(&std::fs::read(path)?)
}

pub fn save_model(path: &Path, p: &EncoderParams) -> Result<()> {
    Ok(std::fs::write(path, model_to_bytes(p)?)?)
}

pub fn load_model(path: &Path) -> Result<EncoderParams> {
    model_from_bytes(&std::fs::read(path)?)
}

pub fn save_codes(path: &Path, c: &HashCodeSet) -> Result<()> {
    Ok(std::fs::write(path, codes_to_bytes(c)?)?)
}

pub fn load_codes(path: &Path) -> Result<HashCodeSet> {
    codes_from_bytes(&std::fs::read(path)?)
}

/// Reads a dataset from CSV with a header row: one `labels` column holding
/// `;`-separated 0-based label ids, then `x1_*` columns (modality 1) and
/// `x2_*` columns (modality 2). `num_labels` defaults to the largest id + 1.
pub fn import_csv<R: Read>(input: R, num_labels: Option<usize>) -> Result<CrossModalDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let mut label_col = None;
    let mut cols1 = Vec::new();
    let mut cols2 = Vec::new();
    for (k, h) in headers.iter().enumerate() {
        if h == "labels" {
            label_col = Some(k);
        } else if h.starts_with("x1_") {
            cols1.push(k);
        } else if h.starts_with("x2_") {
            cols2.push(k);
        } else {
            return Err(invalid("csv header", format!("unexpected column {h:?}")));
        }
    }
    let label_col = label_col.ok_or_else(|| invalid("csv header", "missing labels column"))?;
    if cols1.is_empty() || cols2.is_empty() {
        return Err(invalid("csv header", "need at least one x1_* and one x2_* column"));
    }
    let mut sets = Vec::new();
    let (mut f1, mut f2) = (Vec::new(), Vec::new());
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let set = rec[label_col]
            .split(|ch: char| ch == ';' || ch.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| invalid("csv labels", format!("row {row}: {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        sets.push(set);
        for (cols, dst) in [(&cols1, &mut f1), (&cols2, &mut f2)] {
            for &k in cols {
                let v: f32 = rec[k]
                    .parse()
                    .map_err(|_| invalid("csv features", format!("row {row}, column {}: {:?}", k + 1, &rec[k])))?;
                dst.push(v);
            }
        }
    }
    let c = num_labels.unwrap_or_else(|| sets.iter().flatten().max().map_or(0, |m| m + 1));
    let n = sets.len();
    let labels = LabelMatrix::from_sets(c, sets)?;
    CrossModalDataset::new(
        FeatureMatrix::from_vec(n, cols1.len(), f1)?,
        FeatureMatrix::from_vec(n, cols2.len(), f2)?,
        labels,
        true,
    )
}

/// Features of `m` widened to `f64`.
pub fn widen(m: &FeatureMatrix) -> Matrix {
    Matrix::from_vec(m.rows(), m.cols(), m.as_slice().iter().map(|&v| f64::from(v)).collect()).expect("same shape")
}
