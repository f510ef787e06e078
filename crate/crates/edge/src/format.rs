//! Version 1 model container.
//!
//! ```text
//! magic "CACT" | version u32 = 1
//! arch id: u8 length + UTF-8
//! num_classes u32, then per label: u8 length + UTF-8
//! input shape: 4 x u32 (N, H, W, C)
//! tensor count u32
//! per tensor: u8 name length + UTF-8 name | dtype u8 (0 f32, 1 f16, 2 i8)
//!             rank u8 | rank x u32 extents | quant flag u8 (1: scale f32, zero point i32)
//!             offset u64 | length u64
//! payload blobs, each starting on a 64-byte boundary
//! ```
//!
//! All integers and floats are little-endian. The writer emits tensors in
//! name order, zero-fills alignment gaps and ends the file at the last blob,
//! so the same model always produces the same bytes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use cactus_core::quant::QuantParams;
use cactus_core::tensor::checked_numel;
use cactus_core::zoo::{Architecture, Weight};
use cactus_core::{DType, ModelGraph, Tensor, TensorData};
use half::f16;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"CACT";
pub const VERSION: u32 = 1;
pub const ALIGN: u64 = 64;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:02x?}, not a model file")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {what}")]
    Truncated { what: String },
    #[error("payload of tensor `{tensor}` ends at byte {end} but the file has {file_len} bytes")]
    TruncatedPayload { tensor: String, end: u64, file_len: u64 },
    #[error("{field} is not valid UTF-8")]
    InvalidUtf8 { field: String },
    #[error("{field} must not be empty")]
    Empty { field: String },
    #[error("unknown architecture id `{0}`")]
    UnknownArch(String),
    #[error("invalid input shape {0:?}")]
    InvalidInputShape([u32; 4]),
    #[error("tensor `{tensor}`: unknown dtype code {code}")]
    UnknownDType { tensor: String, code: u8 },
    #[error("tensor `{tensor}`: invalid shape {shape:?}")]
    InvalidShape { tensor: String, shape: Vec<u32> },
    #[error("tensor `{tensor}`: quant flag {flag} is invalid for dtype {dtype}")]
    QuantFlag { tensor: String, dtype: DType, flag: u8 },
    #[error("tensor `{tensor}`: invalid quantization parameters (scale {scale}, zero point {zero_point})")]
    QuantParams { tensor: String, scale: f32, zero_point: i32 },
    #[error("tensor `{0}` appears twice in the directory")]
    DuplicateTensor(String),
    #[error("tensor `{tensor}`: offset {offset} is not {ALIGN}-byte aligned")]
    Misaligned { tensor: String, offset: u64 },
    #[error("tensor `{tensor}`: payload length {found} does not match {expected} bytes implied by dtype and shape")]
    PayloadLength { tensor: String, expected: u64, found: u64 },
    #[error("tensor `{tensor}`: payload at offset {offset} overlaps the header/directory ending at {directory_end}")]
    OverlapsDirectory { tensor: String, offset: u64, directory_end: u64 },
    #[error("payloads of tensors `{first}` and `{second}` overlap")]
    OverlappingOffsets { first: String, second: String },
    #[error("{extra} unexpected bytes after the last payload")]
    TrailingData { extra: u64 },
    #[error("{what} `{value}` is {len} bytes, longer than the 255-byte limit")]
    NameTooLong { what: &'static str, value: String, len: usize },
    #[error("{what} {value} does not fit in 32 bits")]
    TooLarge { what: String, value: usize },
    #[error("model rejected: {0}")]
    Model(#[from] cactus_core::Error),
}

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

/// One directory entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub quant: Option<(f32, i32)>,
    pub offset: u64,
    pub length: u64,
}

/// Header and directory of a validated file.
#[derive(Debug, Clone, PartialEq)]
pub struct Directory {
    pub arch: String,
    pub labels: Vec<String>,
    pub input_shape: [usize; 4],
    pub tensors: Vec<TensorRecord>,
    pub directory_end: u64,
    pub file_len: u64,
}

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F16 => 1,
        DType::I8 => 2,
    }
}

fn align_up(v: u64) -> u64 {
    v.div_ceil(ALIGN) * ALIGN
}

fn push_str(out: &mut Vec<u8>, what: &'static str, s: &str) -> Result<()> {
    let len =
        u8::try_from(s.len()).map_err(|_| FormatError::NameTooLong { what, value: s.to_string(), len: s.len() })?;
    out.push(len);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn push_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| FormatError::TooLarge { what: what.to_string(), value: v })?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn payload_bytes(t: &Tensor) -> Vec<u8> {
    match t.data() {
        TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        TensorData::F16(v) => v.iter().flat_map(|x| x.to_bits().to_le_bytes()).collect(),
        TensorData::I8(v) => v.iter().map(|&x| x as u8).collect(),
    }
}

/// Serializes `model` to the v1 byte layout.
pub fn encode(model: &ModelGraph) -> Result<Vec<u8>> {
    let weights = model.weights();
    let mut head = Vec::new();
    head.extend_from_slice(&MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    push_str(&mut head, "architecture id", model.arch())?;
    push_u32(&mut head, model.class_labels().len(), "class count")?;
    for label in model.class_labels() {
        push_str(&mut head, "class label", label)?;
    }
    for &d in &model.input_shape() {
        push_u32(&mut head, d, "input extent")?;
    }
    push_u32(&mut head, weights.len(), "tensor count")?;

    // Record sizes are known up front, so offsets can be fixed in one pass.
    let mut dir_len = head.len() as u64;
    for (name, w) in weights {
        if name.len() > 255 {
            return Err(FormatError::NameTooLong { what: "tensor name", value: name.clone(), len: name.len() });
        }
        let q = if w.quant.is_some() { 8 } else { 0 };
        dir_len += 1 + name.len() as u64 + 2 + 4 * w.tensor.rank() as u64 + 1 + q + 16;
    }

    let mut out = head;
    let mut cursor = align_up(dir_len);
    let mut blobs = Vec::with_capacity(weights.len());
    for (name, w) in weights {
        let bytes = payload_bytes(&w.tensor);
        push_str(&mut out, "tensor name", name)?;
        out.push(dtype_code(w.tensor.dtype()));
        out.push(u8::try_from(w.tensor.rank()).map_err(|_| FormatError::InvalidShape {
            tensor: name.clone(),
            shape: w.tensor.shape().iter().map(|&d| d as u32).collect(),
        })?);
        for &d in w.tensor.shape() {
            push_u32(&mut out, d, name)?;
        }
        match (&w.quant, w.tensor.dtype()) {
            (Some(qp), DType::I8) => {
                out.push(1);
                out.extend_from_slice(&qp.scale.to_le_bytes());
                out.extend_from_slice(&qp.zero_point.to_le_bytes());
            }
            (None, DType::F32 | DType::F16) => out.push(0),
            (_, dtype) => {
                return Err(FormatError::QuantFlag { tensor: name.clone(), dtype, flag: u8::from(w.quant.is_some()) })
            }
        }
        out.extend_from_slice(&cursor.to_le_bytes());
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        let len = bytes.len() as u64;
        blobs.push((cursor, bytes));
        cursor = align_up(cursor + len);
    }
    debug_assert_eq!(out.len() as u64, dir_len);
    for (offset, bytes) in blobs {
        out.resize(offset as usize, 0);
        out.extend_from_slice(&bytes);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated { what: what() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: impl FnOnce() -> String) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: impl FnOnce() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: impl FnOnce() -> String) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, field: impl Fn() -> String) -> Result<String> {
        let len = self.u8(|| format!("length of {}", field()))? as usize;
        let bytes = self.take(len, &field)?;
        let s = std::str::from_utf8(bytes).map_err(|_| FormatError::InvalidUtf8 { field: field() })?;
        if s.is_empty() {
            return Err(FormatError::Empty { field: field() });
        }
        Ok(s.to_string())
    }
}

/// Parses and validates the header and directory without touching payloads.
pub fn read_directory(bytes: &[u8]) -> Result<Directory> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, || "magic".into())?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = r.u32(|| "version".into())?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let arch = r.string(|| "architecture id".into())?;
    Architecture::from_id(&arch).map_err(|_| FormatError::UnknownArch(arch.clone()))?;
    let num_classes = r.u32(|| "class count".into())?;
    if num_classes == 0 {
        return Err(FormatError::Empty { field: "class label list".into() });
    }
    let mut labels = Vec::new();
    for i in 0..num_classes {
        labels.push(r.string(|| format!("class label {i}"))?);
    }
    let mut raw_shape = [0u32; 4];
    for (i, d) in raw_shape.iter_mut().enumerate() {
        *d = r.u32(|| format!("input extent {i}"))?;
    }
    if raw_shape.contains(&0) {
        return Err(FormatError::InvalidInputShape(raw_shape));
    }
    let input_shape = raw_shape.map(|d| d as usize);
    let count = r.u32(|| "tensor count".into())?;

    let mut tensors: Vec<TensorRecord> = Vec::new();
    let mut names = HashSet::new();
    for i in 0..count {
        let name = r.string(|| format!("name of tensor {i}"))?;
        let ctx = |field: &str| format!("{field} of tensor `{name}`");
        let code = r.u8(|| ctx("dtype"))?;
        let dtype = match code {
            0 => DType::F32,
            1 => DType::F16,
            2 => DType::I8,
            _ => return Err(FormatError::UnknownDType { tensor: name, code }),
        };
        let rank = r.u8(|| ctx("rank"))? as usize;
        let mut raw = Vec::with_capacity(rank);
        for _ in 0..rank {
            raw.push(r.u32(|| ctx("extents"))?);
        }
        let shape: Vec<usize> = raw.iter().map(|&d| d as usize).collect();
        let numel =
            checked_numel(&shape).map_err(|_| FormatError::InvalidShape { tensor: name.clone(), shape: raw })?;
        let flag = r.u8(|| ctx("quant flag"))?;
        let quant = match (flag, dtype) {
            (0, DType::F32 | DType::F16) => None,
            (1, DType::I8) => {
                let scale = f32::from_le_bytes(r.take(4, || ctx("scale"))?.try_into().expect("4 bytes"));
                let zero_point = i32::from_le_bytes(r.take(4, || ctx("zero point"))?.try_into().expect("4 bytes"));
                if QuantParams::i8(scale, zero_point).is_err() {
                    return Err(FormatError::QuantParams { tensor: name, scale, zero_point });
                }
                Some((scale, zero_point))
            }
            _ => return Err(FormatError::QuantFlag { tensor: name, dtype, flag }),
        };
        let offset = r.u64(|| ctx("offset"))?;
        let length = r.u64(|| ctx("length"))?;
        if !names.insert(name.clone()) {
            return Err(FormatError::DuplicateTensor(name));
        }
        let expected = (numel as u64).saturating_mul(dtype.size_bytes() as u64);
        if length != expected {
            return Err(FormatError::PayloadLength { tensor: name, expected, found: length });
        }
        if offset % ALIGN != 0 {
            return Err(FormatError::Misaligned { tensor: name, offset });
        }
        tensors.push(TensorRecord { name, dtype, shape, quant, offset, length });
    }

    let directory_end = r.pos as u64;
    let file_len = bytes.len() as u64;
    for t in &tensors {
        if t.offset < directory_end {
            return Err(FormatError::OverlapsDirectory { tensor: t.name.clone(), offset: t.offset, directory_end });
        }
    }
    let mut by_offset: Vec<&TensorRecord> = tensors.iter().collect();
    by_offset.sort_by_key(|t| (t.offset, t.name.as_str()));
    for pair in by_offset.windows(2) {
        if pair[0].offset.saturating_add(pair[0].length) > pair[1].offset {
            return Err(FormatError::OverlappingOffsets { first: pair[0].name.clone(), second: pair[1].name.clone() });
        }
    }
    let mut end = directory_end;
    for t in &by_offset {
        let t_end = t.offset.saturating_add(t.length);
        if t_end > file_len {
            return Err(FormatError::TruncatedPayload { tensor: t.name.clone(), end: t_end, file_len });
        }
        end = end.max(t_end);
    }
    if file_len > end {
        return Err(FormatError::TrailingData { extra: file_len - end });
    }
    Ok(Directory { arch, labels, input_shape, tensors, directory_end, file_len })
}

fn read_tensor(bytes: &[u8], t: &TensorRecord) -> Result<Tensor> {
    let blob = &bytes[t.offset as usize..(t.offset + t.length) as usize];
    let data = match t.dtype {
        DType::F32 => {
            TensorData::F32(blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect())
        }
        DType::F16 => {
            TensorData::F16(blob.chunks_exact(2).map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]]))).collect())
        }
        DType::I8 => TensorData::I8(blob.iter().map(|&b| b as i8).collect()),
    };
    Ok(Tensor::from_data(t.shape.clone(), data)?)
}

/// Parses a complete file image into a model.
pub fn decode(bytes: &[u8]) -> Result<ModelGraph> {
    let dir = read_directory(bytes)?;
    let arch = Architecture::from_id(&dir.arch).map_err(|_| FormatError::UnknownArch(dir.arch.clone()))?;
    let mut weights = BTreeMap::new();
    for t in &dir.tensors {
        let quant = t.quant.map(|(s, z)| QuantParams::i8(s, z)).transpose()?;
        weights.insert(t.name.clone(), Weight { tensor: read_tensor(bytes, t)?, quant });
    }
    Ok(arch.assemble(dir.labels, dir.input_shape, weights)?)
}

/// Writes `model` to `path` and returns the number of bytes written.
pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<u64> {
    let bytes = encode(model)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    decode(&fs::read(path)?)
}

/// Read-only summary of a model file.
#[derive(Debug, Clone, PartialEq)]
pub struct Inspection {
    pub directory: Directory,
}

impl Inspection {
    pub fn payload_bytes(&self) -> u64 {
        self.directory.tensors.iter().map(|t| t.length).sum()
    }

    pub fn param_count(&self) -> u64 {
        self.directory.tensors.iter().map(|t| t.shape.iter().product::<usize>() as u64).sum()
    }
}

pub fn inspect(path: impl AsRef<Path>) -> Result<Inspection> {
    inspect_bytes(&fs::read(path)?)
}

/// Validates the full model, then reports the directory.
pub fn inspect_bytes(bytes: &[u8]) -> Result<Inspection> {
    decode(bytes)?;
    Ok(Inspection { directory: read_directory(bytes)? })
}

impl fmt::Display for Inspection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = &self.directory;
        writeln!(f, "format      v{VERSION}")?;
        writeln!(f, "arch        {}", d.arch)?;
        writeln!(f, "classes     {}", d.labels.join(", "))?;
        writeln!(f, "input       {:?}", d.input_shape)?;
        writeln!(f, "tensors     {}", d.tensors.len())?;
        writeln!(f, "params      {}", self.param_count())?;
        writeln!(f, "payload     {} bytes", self.payload_bytes())?;
        writeln!(f, "file        {} bytes", d.file_len)?;
        writeln!(f)?;
        let width = d.tensors.iter().map(|t| t.name.len()).max().unwrap_or(4).max(4);
        writeln!(f, "{:width$}  dtype  {:>18}  {:>10}  {:>10}  quant", "name", "shape", "offset", "bytes")?;
        for t in &d.tensors {
            let quant = match t.quant {
                Some((s, z)) => format!("S={s:e} Z={z}"),
                None => "-".into(),
            };
            let shape = format!("{:?}", t.shape);
            writeln!(
                f,
                "{:width$}  {:<5}  {:>18}  {:>10}  {:>10}  {quant}",
                t.name,
                t.dtype.name(),
                shape,
                t.offset,
                t.length
            )?;
        }
        Ok(())
    }
}
