//! Named-array container.
//!
//! Layout: a UTF-8 header of `name dtype ndim dim...` lines (one per entry),
//! optionally preceded by `# key = value` metadata lines, then one blank
//! line, then the raw little-endian values of every entry in header order.

use std::io::{self, BufRead, Write};

use indexmap::IndexMap;

use super::{DType, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => ArrayData::F32(t.data().iter().map(|x| x.as_f64() as f32).collect()),
            DType::F64 => ArrayData::F64(t.data().iter().map(|x| x.as_f64()).collect()),
        };
        Self {
            shape: t.shape().to_vec(),
            data,
        }
    }

    /// Converts to a tensor of element type `T`; values are cast when the
    /// stored dtype differs.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data: Vec<T> = match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
        };
        Tensor::new(self.shape.clone(), data).expect("container entry shape checked on read")
    }
}

/// Ordered metadata plus ordered named arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub metadata: IndexMap<String, String>,
    pub arrays: IndexMap<String, NamedArray>,
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn write_container<W: Write>(mut w: W, container: &Container) -> io::Result<()> {
    let mut header = String::new();
    for (k, v) in &container.metadata {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(invalid(format!("metadata entry {k:?} is not a single line")));
        }
        header.push_str(&format!("# {k} = {v}\n"));
    }
    for (name, arr) in &container.arrays {
        if name.is_empty() || name.contains(char::is_whitespace) || name.starts_with('#') {
            return Err(invalid(format!("invalid array name {name:?}")));
        }
        if arr.shape.iter().product::<usize>() != arr.data.len() {
            return Err(invalid(format!("array {name} has inconsistent shape")));
        }
        header.push_str(&format!("{name} {} {}", arr.data.dtype().name(), arr.shape.len()));
        for d in &arr.shape {
            header.push_str(&format!(" {d}"));
        }
        header.push('\n');
    }
    header.push('\n');
    w.write_all(header.as_bytes())?;
    for arr in container.arrays.values() {
        match &arr.data {
            ArrayData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            ArrayData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()
}

pub fn read_container<R: BufRead>(mut r: R) -> io::Result<Container> {
    let mut container = Container::default();
    let mut entries: Vec<(String, DType, Vec<usize>)> = Vec::new();
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(invalid("container header is not terminated by a blank line"));
        }
        let text = line.trim_end_matches('\n');
        if text.is_empty() {
            break;
        }
        if let Some(meta) = text.strip_prefix('#') {
            let (k, v) = meta
                .split_once('=')
                .ok_or_else(|| invalid(format!("bad metadata line {text:?}")))?;
            container
                .metadata
                .insert(k.trim().to_string(), v.trim().to_string());
            continue;
        }
        let mut parts = text.split_whitespace();
        let name = parts.next().ok_or_else(|| invalid("empty entry"))?.to_string();
        let dtype = parts
            .next()
            .and_then(DType::parse)
            .ok_or_else(|| invalid(format!("bad dtype in {text:?}")))?;
        let ndim: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| invalid(format!("bad ndim in {text:?}")))?;
        let dims: Vec<usize> = parts
            .map(|s| s.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| invalid(format!("bad dims in {text:?}")))?;
        if dims.len() != ndim {
            return Err(invalid(format!("entry {name}: ndim {ndim} but {} dims", dims.len())));
        }
        entries.push((name, dtype, dims));
    }
    for (name, dtype, shape) in entries {
        let n: usize = shape.iter().product();
        let data = match dtype {
            DType::F32 => {
                let mut buf = vec![0u8; n * 4];
                r.read_exact(&mut buf)?;
                ArrayData::F32(
                    buf.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            DType::F64 => {
                let mut buf = vec![0u8; n * 8];
                r.read_exact(&mut buf)?;
                ArrayData::F64(
                    buf.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
        };
        if container.arrays.insert(name.clone(), NamedArray { shape, data }).is_some() {
            return Err(invalid(format!("duplicate entry {name}")));
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(invalid(format!("{} trailing bytes after last entry", rest.len())));
    }
    Ok(container)
}
