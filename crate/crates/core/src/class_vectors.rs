//! Teacher text features computed once and shared as class vectors.
//!
//! Cache file layout (all integers u32 little-endian):
//!
//! ```text
//! "PKDW" | version | N | d | fingerprint[32]
//! name count | (len | utf-8 bytes) * count
//! N*d f32 LE, row-major
//! sha256[32] over everything above
//! ```

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::codec::{put_f32s, put_str, put_u32, write_atomic, Reader};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::evaluation::{CostCounter, Phase};
use crate::math::{l2_normalize, FeatureVector, NORM_EPS};
use crate::model::{encode_texts, EncoderParams, Module, PromptSet};

pub const CACHE_MAGIC: &[u8; 4] = b"PKDW";
pub const CACHE_VERSION: u32 = 1;
pub const NORM_TOLERANCE: f64 = 1e-6;

const TRAILER_LEN: usize = 32;

/// N unit-norm rows of dimension d, one per class name.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassVectorTable {
    class_names: Vec<String>,
    dim: usize,
    rows: Vec<f32>,
    fingerprint: [u8; 32],
}

impl ClassVectorTable {
    /// Validates shape, finiteness and unit norms.
    pub fn new(class_names: Vec<String>, dim: usize, rows: Vec<f32>, fingerprint: [u8; 32]) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::Validation(format!("need at least 2 classes, got {}", class_names.len())));
        }
        if dim == 0 || rows.len() != class_names.len() * dim {
            return Err(Error::Shape(format!(
                "{} values do not form {} rows of width {dim}",
                rows.len(),
                class_names.len()
            )));
        }
        let t = Self {
            class_names,
            dim,
            rows,
            fingerprint,
        };
        if let Some((i, n)) = t.row_norms().into_iter().enumerate().find(|(_, n)| !norm_ok(*n)) {
            return Err(Error::Validation(format!("row {i} has norm {n}")));
        }
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }

    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.num_classes())
            .map(|i| self.row(i).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt())
            .collect()
    }

    /// Table restricted to `classes`, in the given order.
    pub fn subset(&self, classes: &[usize]) -> Result<Self> {
        let mut names = Vec::with_capacity(classes.len());
        let mut rows = Vec::with_capacity(classes.len() * self.dim);
        for &k in classes {
            if k >= self.num_classes() {
                return Err(Error::Index {
                    index: k,
                    len: self.num_classes(),
                });
            }
            names.push(self.class_names[k].clone());
            rows.extend_from_slice(self.row(k));
        }
        Self::new(names, self.dim, rows, self.fingerprint)
    }
}

fn norm_ok(n: f64) -> bool {
    n.is_finite() && (n - 1.0).abs() <= NORM_TOLERANCE
}

/// SHA-256 over a text tower and its prompts, binding a cache to its producer.
pub fn text_fingerprint(text: &EncoderParams, prompts: Option<&PromptSet>) -> [u8; 32] {
    let mut h = Sha256::new();
    text.visit("text", &mut |n, t| t.hash_into(n, &mut h));
    if let Some(p) = prompts {
        p.visit("text_prompts", &mut |n, t| t.hash_into(n, &mut h));
    }
    h.finalize().into()
}

/// One text-encoder forward per class name; rows are the normalized outputs.
pub fn compute_class_vectors(
    text: &EncoderParams,
    prompts: Option<&PromptSet>,
    class_names: &[String],
    vocab: &Vocabulary,
    template: &str,
    counter: &mut CostCounter,
) -> Result<ClassVectorTable> {
    if class_names.is_empty() {
        return Err(Error::Data("no class names to encode".into()));
    }
    let mut seen = HashSet::new();
    for name in class_names {
        if !seen.insert(name) {
            log::warn!("duplicate class name {name:?} yields duplicate class vectors");
        }
    }
    let seqs = class_names
        .iter()
        .map(|c| vocab.tokenize(template, c))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = seqs.iter().collect();
    let feats = encode_texts(text, prompts, &refs)?;
    counter.texts(Phase::Cache, class_names.len());

    let dim = feats.cols;
    let mut rows = Vec::with_capacity(class_names.len() * dim);
    for i in 0..class_names.len() {
        let u = l2_normalize(&FeatureVector::new(feats.row(i).to_vec())?, NORM_EPS)?;
        rows.extend(u.as_slice().iter().map(|&v| v as f32));
    }
    ClassVectorTable::new(class_names.to_vec(), dim, rows, text_fingerprint(text, prompts))
}

pub fn encode_cache(table: &ClassVectorTable) -> Vec<u8> {
    let mut out = Vec::with_capacity(cache_file_len(table.class_names(), table.dim()));
    out.extend_from_slice(CACHE_MAGIC);
    put_u32(&mut out, CACHE_VERSION);
    put_u32(&mut out, table.num_classes() as u32);
    put_u32(&mut out, table.dim() as u32);
    out.extend_from_slice(&table.fingerprint);
    put_u32(&mut out, table.num_classes() as u32);
    for n in &table.class_names {
        put_str(&mut out, n);
    }
    put_f32s(&mut out, &table.rows);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Exact byte length of a cache file holding `names` at width `dim`.
pub fn cache_file_len(names: &[String], dim: usize) -> usize {
    let header = 4 + 4 + 4 + 4 + 32;
    let name_section = 4 + names.iter().map(|n| 4 + n.len()).sum::<usize>();
    header + name_section + names.len() * dim * 4 + TRAILER_LEN
}

pub fn decode_cache(bytes: &[u8]) -> Result<ClassVectorTable> {
    let bad = |m: String| Error::CacheIntegrity(m);
    if bytes.len() < 4 || &bytes[..4] != CACHE_MAGIC {
        return Err(bad("bad magic".into()));
    }
    if bytes.len() < 4 + TRAILER_LEN {
        return Err(bad("truncated file".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - TRAILER_LEN);
    let mut r = Reader::new(body);
    r.bytes(4);
    let truncated = || bad("truncated file".into());
    let version = r.u32().ok_or_else(truncated)?;
    if version != CACHE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = r.u32().ok_or_else(truncated)? as usize;
    let d = r.u32().ok_or_else(truncated)? as usize;
    let fingerprint: [u8; 32] = r.bytes(32).ok_or_else(truncated)?.try_into().expect("32 bytes");
    let count = r.u32().ok_or_else(truncated)? as usize;
    if count != n {
        return Err(bad(format!("header says {n} classes, name section has {count}")));
    }
    let mut names = Vec::with_capacity(n.min(r.remaining() / 4));
    for _ in 0..n {
        let name = r
            .string()
            .ok_or_else(truncated)?
            .map_err(|_| bad("class name is not UTF-8".into()))?;
        names.push(name);
    }
    let values = n
        .checked_mul(d)
        .filter(|&v| v.checked_mul(4).is_some_and(|b| b == r.remaining()))
        .ok_or_else(|| bad(format!("payload of {} bytes does not hold {n}×{d} floats", r.remaining())))?;
    let rows = r.f32s(values).ok_or_else(truncated)?;
    if Sha256::digest(body).as_slice() != trailer {
        return Err(bad("checksum mismatch".into()));
    }
    ClassVectorTable::new(names, d, rows, fingerprint).map_err(|e| bad(e.to_string()))
}

pub fn save_cache(table: &ClassVectorTable, path: &Path) -> Result<()> {
    write_atomic(path, &encode_cache(table))
}

pub fn load_cache(path: &Path) -> Result<ClassVectorTable> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cache(&bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    RowNorm { row: usize, norm: f64 },
    ClassCount { expected: usize, found: usize },
    NameMismatch { index: usize, expected: String, found: String },
    Dimension { table: usize, projector: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RowNorm { row, norm } => write!(f, "row {row} has norm {norm}"),
            Violation::ClassCount { expected, found } => {
                write!(f, "table has {found} classes, split expects {expected}")
            }
            Violation::NameMismatch { index, expected, found } => {
                write!(f, "class {index} is {found:?}, split expects {expected:?}")
            }
            Violation::Dimension { table, projector } => {
                write!(f, "table width {table} differs from projector output {projector}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            return Ok(());
        }
        let msg: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        Err(Error::Validation(msg.join("; ")))
    }
}

/// Checks row norms, name order against `expected_names` (reporting the first
/// mismatched index) and, when given, the projector output width.
pub fn validate_cache(
    table: &ClassVectorTable,
    expected_names: &[String],
    projector_output: Option<usize>,
) -> ValidationReport {
    let mut violations = Vec::new();
    for (row, norm) in table.row_norms().into_iter().enumerate() {
        if !norm_ok(norm) {
            violations.push(Violation::RowNorm { row, norm });
        }
    }
    if expected_names.len() != table.num_classes() {
        violations.push(Violation::ClassCount {
            expected: expected_names.len(),
            found: table.num_classes(),
        });
    }
    if let Some(index) = expected_names
        .iter()
        .zip(table.class_names())
        .position(|(a, b)| a != b)
    {
        violations.push(Violation::NameMismatch {
            index,
            expected: expected_names[index].clone(),
            found: table.class_names()[index].clone(),
        });
    }
    if let Some(p) = projector_output {
        if p != table.dim() {
            violations.push(Violation::Dimension {
                table: table.dim(),
                projector: p,
            });
        }
    }
    ValidationReport { violations }
}
