//! Self-describing tensor container.
//!
//! Layout:
//!
//! ```text
//! [u64 LE: header length N][N bytes: JSON header][payload]
//! ```
//!
//! The header maps each tensor name to `{"dtype", "shape", "data_offsets"}`,
//! with offsets relative to the payload start, plus an optional
//! `"__metadata__"` string map. Tensors may not overlap. Written headers are
//! padded with spaces to a multiple of 8 bytes and list tensors contiguously.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

const METADATA_KEY: &str = "__metadata__";
const MAX_HEADER_BYTES: u64 = 100 << 20;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor {0:?} is declared more than once")]
    DuplicateTensor(String),
    #[error("tensor {name:?} has unsupported dtype {dtype:?}")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor {name:?}: shape {shape:?} needs {expected} bytes but offsets span {found}")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: u64,
        found: u64,
    },
    #[error("tensor {name:?} overlaps tensor {other:?}")]
    Overlap { name: String, other: String },
    #[error("tensor {name:?} is truncated: payload ends at {available}, tensor needs {needed}")]
    Truncated {
        name: String,
        needed: u64,
        available: u64,
    },
    #[error("no tensor named {0:?}")]
    MissingTensor(String),
    #[error("metadata: {0}")]
    Metadata(String),
    #[error("writer: {0}")]
    Writer(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    I32,
}

impl Dtype {
    pub fn size(self) -> usize {
        4
    }

    fn parse(s: &str) -> Option<Dtype> {
        match s {
            "F32" => Some(Dtype::F32),
            "I32" => Some(Dtype::I32),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::I32 => "I32",
        }
    }
}

/// Name, dtype and shape of one tensor, with its byte range in the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub begin: u64,
    pub end: u64,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.end - self.begin
    }

    /// Bytes per leading-axis row.
    pub fn row_bytes(&self) -> usize {
        self.shape.iter().skip(1).product::<usize>() * self.dtype.size()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }
}

/// Parsed header: tensors in payload order plus metadata.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Header {
    pub tensors: Vec<TensorInfo>,
    pub metadata: BTreeMap<String, String>,
}

/// JSON object entries with duplicates preserved.
struct RawEntries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawEntries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;
        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = RawEntries;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawEntries, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    out.push((k, v));
                }
                Ok(RawEntries(out))
            }
        }
        d.deserialize_map(EntriesVisitor)
    }
}

impl Header {
    pub fn get(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn payload_len(&self) -> u64 {
        self.tensors.iter().map(|t| t.end).max().unwrap_or(0)
    }

    /// Parse and structurally validate header bytes (shapes, overlaps, duplicates).
    pub fn parse(bytes: &[u8]) -> Result<Header, ContainerError> {
        let malformed = |m: String| ContainerError::MalformedHeader(m);
        let text = std::str::from_utf8(bytes).map_err(|e| malformed(format!("not UTF-8: {e}")))?;
        let RawEntries(entries) =
            serde_json::from_str(text).map_err(|e| malformed(format!("not a JSON object: {e}")))?;
        let mut seen = HashSet::new();
        let mut header = Header::default();
        for (name, value) in entries {
            if !seen.insert(name.clone()) {
                return Err(ContainerError::DuplicateTensor(name));
            }
            if name == METADATA_KEY {
                header.metadata = serde_json::from_value(value)
                    .map_err(|e| malformed(format!("__metadata__ must map strings to strings: {e}")))?;
                continue;
            }
            header.tensors.push(parse_entry(name, &value)?);
        }
        header.tensors.sort_by_key(|t| (t.begin, t.end));
        for pair in header.tensors.windows(2) {
            if pair[1].begin < pair[0].end {
                return Err(ContainerError::Overlap {
                    name: pair[1].name.clone(),
                    other: pair[0].name.clone(),
                });
            }
        }
        Ok(header)
    }

    /// Header JSON, space-padded to a multiple of 8 bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut map = serde_json::Map::new();
        if !self.metadata.is_empty() {
            map.insert(METADATA_KEY.to_owned(), json!(self.metadata));
        }
        for t in &self.tensors {
            map.insert(
                t.name.clone(),
                json!({
                    "dtype": t.dtype.as_str(),
                    "shape": t.shape,
                    "data_offsets": [t.begin, t.end],
                }),
            );
        }
        let mut bytes = serde_json::to_vec(&Value::Object(map)).expect("header serializes");
        while bytes.len() % 8 != 0 {
            bytes.push(b' ');
        }
        bytes
    }

    /// Lay out `specs` contiguously in the given order.
    pub fn contiguous(specs: Vec<(String, Dtype, Vec<usize>)>, metadata: BTreeMap<String, String>) -> Header {
        let mut offset = 0u64;
        let tensors = specs
            .into_iter()
            .map(|(name, dtype, shape)| {
                let len = (shape.iter().product::<usize>() * dtype.size()) as u64;
                let info = TensorInfo {
                    name,
                    dtype,
                    shape,
                    begin: offset,
                    end: offset + len,
                };
                offset += len;
                info
            })
            .collect();
        Header { tensors, metadata }
    }
}

fn parse_entry(name: String, value: &Value) -> Result<TensorInfo, ContainerError> {
    let malformed = |what: &str| ContainerError::MalformedHeader(format!("tensor {name:?}: {what}"));
    let obj = value.as_object().ok_or_else(|| malformed("entry is not an object"))?;
    let dtype_str = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing dtype"))?;
    let dtype = Dtype::parse(dtype_str).ok_or_else(|| ContainerError::UnsupportedDtype {
        name: name.clone(),
        dtype: dtype_str.to_owned(),
    })?;
    let shape: Vec<usize> = obj
        .get("shape")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| malformed("missing or invalid shape"))?;
    let offsets: [u64; 2] = obj
        .get("data_offsets")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| malformed("missing or invalid data_offsets"))?;
    let [begin, end] = offsets;
    if end < begin {
        return Err(malformed("data_offsets end before begin"));
    }
    let expected = shape
        .iter()
        .try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or_else(|| malformed("shape overflows"))?;
    if expected != end - begin {
        return Err(ContainerError::ShapeMismatch {
            name,
            shape,
            expected,
            found: end - begin,
        });
    }
    Ok(TensorInfo {
        name,
        dtype,
        shape,
        begin,
        end,
    })
}

/// Random access to a container file without loading the payload.
pub struct ContainerReader {
    path: PathBuf,
    file: File,
    header: Header,
    payload_start: u64,
    file_len: u64,
}

impl ContainerReader {
    pub fn open(path: &Path) -> Result<Self, ContainerError> {
        let io = |source| ContainerError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = File::open(path).map_err(io)?;
        let file_len = file.metadata().map_err(io)?.len();
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)
            .map_err(|_| ContainerError::MalformedHeader("file shorter than the 8-byte length prefix".into()))?;
        let n = u64::from_le_bytes(len_bytes);
        if n > MAX_HEADER_BYTES || n > file_len - 8 {
            return Err(ContainerError::MalformedHeader(format!(
                "header length {n} exceeds file size {file_len} or limit"
            )));
        }
        let mut header_bytes = vec![0u8; n as usize];
        file.read_exact(&mut header_bytes).map_err(io)?;
        let header = Header::parse(&header_bytes)?;
        let payload_start = 8 + n;
        let available = file_len - payload_start;
        if let Some(t) = header.tensors.iter().find(|t| t.end > available) {
            return Err(ContainerError::Truncated {
                name: t.name.clone(),
                needed: t.end,
                available,
            });
        }
        Ok(ContainerReader {
            path: path.to_path_buf(),
            file,
            header,
            payload_start,
            file_len,
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file_len(&self) -> u64 {
        self.file_len
    }

    pub fn info(&self, name: &str) -> Result<&TensorInfo, ContainerError> {
        self.header
            .get(name)
            .ok_or_else(|| ContainerError::MissingTensor(name.to_owned()))
    }

    /// Read `buf.len()` bytes starting `offset` bytes into tensor `info`.
    pub fn read_at(&mut self, info: &TensorInfo, offset: u64, buf: &mut [u8]) -> Result<(), ContainerError> {
        let io = |source| ContainerError::Io {
            path: self.path.clone(),
            source,
        };
        debug_assert!(offset + buf.len() as u64 <= info.byte_len());
        self.file
            .seek(SeekFrom::Start(self.payload_start + info.begin + offset))
            .map_err(io)?;
        self.file.read_exact(buf).map_err(io)
    }

    pub fn read_tensor(&mut self, name: &str) -> Result<Tensor, ContainerError> {
        let info = self.info(name)?.clone();
        let mut data = vec![0u8; info.byte_len() as usize];
        self.read_at(&info, 0, &mut data)?;
        Ok(Tensor {
            dtype: info.dtype,
            shape: info.shape,
            data,
        })
    }

    /// Stream a whole tensor into `out` in fixed-size blocks.
    pub fn copy_tensor<W: Write>(&mut self, name: &str, out: &mut W) -> Result<(), ContainerError> {
        let info = self.info(name)?.clone();
        let mut buf = vec![0u8; 1 << 20];
        let mut done = 0u64;
        while done < info.byte_len() {
            let n = (info.byte_len() - done).min(buf.len() as u64) as usize;
            self.read_at(&info, done, &mut buf[..n])?;
            out.write_all(&buf[..n]).map_err(|source| ContainerError::Io {
                path: self.path.clone(),
                source,
            })?;
            done += n as u64;
        }
        Ok(())
    }

    pub fn load_all(mut self) -> Result<Checkpoint, ContainerError> {
        let names: Vec<String> = self.header.tensors.iter().map(|t| t.name.clone()).collect();
        let mut tensors = BTreeMap::new();
        for name in names {
            let t = self.read_tensor(&name)?;
            tensors.insert(name, t);
        }
        Ok(Checkpoint {
            tensors,
            metadata: self.header.metadata.clone(),
        })
    }
}

/// Sequential writer: header first, then each tensor's bytes in header order.
/// The file appears at its destination only after [`ContainerWriter::finish`].
pub struct ContainerWriter {
    path: PathBuf,
    out: BufWriter<tempfile::NamedTempFile>,
    header: Header,
    written: u64,
}

impl ContainerWriter {
    pub fn create(path: &Path, header: Header) -> Result<Self, ContainerError> {
        let io = |source| ContainerError::Io {
            path: path.to_path_buf(),
            source,
        };
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        let mut out = BufWriter::with_capacity(1 << 20, tmp);
        let bytes = header.to_bytes();
        out.write_all(&(bytes.len() as u64).to_le_bytes()).map_err(io)?;
        out.write_all(&bytes).map_err(io)?;
        Ok(ContainerWriter {
            path: path.to_path_buf(),
            out,
            header,
            written: 0,
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn payload_written(&self) -> u64 {
        self.written
    }

    pub fn finish(self) -> Result<(), ContainerError> {
        let expected = self.header.payload_len();
        if self.written != expected {
            return Err(ContainerError::Writer(format!(
                "wrote {} payload bytes, header declares {expected}",
                self.written
            )));
        }
        let path = self.path;
        let tmp = self.out.into_inner().map_err(|e| ContainerError::Io {
            path: path.clone(),
            source: e.into_error(),
        })?;
        tmp.persist(&path).map_err(|e| ContainerError::Io {
            path: path.clone(),
            source: e.error,
        })?;
        Ok(())
    }
}

impl Write for ContainerWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.out.write(buf)?;
        self.written += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "shape and data disagree");
        Tensor {
            dtype: Dtype::F32,
            shape,
            data: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn from_i32(shape: Vec<usize>, values: &[i32]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "shape and data disagree");
        Tensor {
            dtype: Dtype::I32,
            shape,
            data: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }

    pub fn to_i32(&self) -> Vec<i32> {
        self.data
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }

    pub fn row_bytes(&self) -> usize {
        self.shape.iter().skip(1).product::<usize>() * self.dtype.size()
    }

    pub fn row(&self, i: usize) -> &[u8] {
        let rb = self.row_bytes();
        &self.data[i * rb..(i + 1) * rb]
    }
}

/// Named tensors plus string metadata, fully in memory.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        ContainerReader::open(path)?.load_all()
    }

    /// Header for this checkpoint, tensors laid out in name order.
    pub fn header(&self) -> Header {
        Header::contiguous(
            self.tensors
                .iter()
                .map(|(name, t)| (name.clone(), t.dtype, t.shape.clone()))
                .collect(),
            self.metadata.clone(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        for (name, t) in &self.tensors {
            if t.data.len() != t.numel() * t.dtype.size() {
                return Err(ContainerError::ShapeMismatch {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    expected: (t.numel() * t.dtype.size()) as u64,
                    found: t.data.len() as u64,
                });
            }
        }
        let mut writer = ContainerWriter::create(path, self.header())?;
        for t in self.tensors.values() {
            writer.write_all(&t.data).map_err(|source| ContainerError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        }
        writer.finish()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header().to_bytes();
        let mut out = Vec::with_capacity(8 + header.len() + self.payload_bytes() as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn payload_bytes(&self) -> u64 {
        self.tensors.values().map(|t| t.data.len() as u64).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ContainerError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ContainerError::MissingTensor(name.to_owned()))
    }
}
