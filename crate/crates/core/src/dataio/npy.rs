//! NPY v1.0 encoding and decoding.

use crate::error::{format_err, Result};

const MAGIC: &[u8] = b"\x93NUMPY";
const ALIGN: usize = 64;

/// Typed payload of an NPY array.
#[derive(Clone, Debug, PartialEq)]
pub enum NpyData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I64(Vec<i64>),
}

impl NpyData {
    pub fn len(&self) -> usize {
        match self {
            NpyData::F32(v) => v.len(),
            NpyData::F64(v) => v.len(),
            NpyData::U8(v) => v.len(),
            NpyData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// NPY dtype descriptor.
    pub fn descr(&self) -> &'static str {
        match self {
            NpyData::F32(_) => "<f4",
            NpyData::F64(_) => "<f8",
            NpyData::U8(_) => "|u1",
            NpyData::I64(_) => "<i8",
        }
    }

    fn item_size(descr: &str) -> Option<usize> {
        Some(match descr {
            "<f4" => 4,
            "<f8" => 8,
            "|u1" | "<u1" => 1,
            "<i8" => 8,
            _ => return None,
        })
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            NpyData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            NpyData::F64(v) => v.clone(),
            NpyData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            NpyData::I64(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            NpyData::F32(v) => v.clone(),
            other => other.to_f64().into_iter().map(|x| x as f32).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

impl NpyArray {
    /// Panics if the shape does not match the payload length.
    pub fn new(shape: Vec<usize>, data: NpyData) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} vs payload");
        Self { shape, data }
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self::new(shape, NpyData::F32(data))
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Self {
        Self::new(shape, NpyData::U8(data))
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

fn shape_literal(shape: &[usize]) -> String {
    match shape {
        [] => "()".into(),
        [n] => format!("({n},)"),
        _ => format!("({})", shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    }
}

pub fn write_npy(a: &NpyArray) -> Vec<u8> {
    let dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        a.data.descr(),
        shape_literal(&a.shape)
    );
    // magic(6) + version(2) + header length(2) + dict + padding + '\n'
    let unpadded = MAGIC.len() + 4 + dict.len() + 1;
    let header_len = dict.len() + 1 + (ALIGN - unpadded % ALIGN) % ALIGN;
    let mut out = Vec::with_capacity(10 + header_len + a.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.resize(10 + header_len - 1, b' ');
    out.push(b'\n');
    match &a.data {
        NpyData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::U8(v) => out.extend_from_slice(v),
        NpyData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

/// Minimal reader for the Python dict literal in an NPY header.
struct HeaderParser<'a> {
    s: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> HeaderParser<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        format_err(self.base + self.pos, msg)
    }

    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> Result<()> {
        self.skip_ws();
        if self.s.get(self.pos) == Some(&c) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected '{}' in header", c as char))
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn string(&mut self) -> Result<String> {
        self.skip_ws();
        let q = match self.s.get(self.pos) {
            Some(&q @ (b'\'' | b'"')) => q,
            _ => return self.err("expected a quoted string in header"),
        };
        let start = self.pos + 1;
        let Some(len) = self.s[start..].iter().position(|&c| c == q) else {
            return self.err("unterminated string in header");
        };
        self.pos = start + len + 1;
        Ok(String::from_utf8_lossy(&self.s[start..start + len]).into_owned())
    }

    fn word(&mut self) -> &'a [u8] {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        &self.s[start..self.pos]
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        self.eat(b'(')?;
        let mut dims = Vec::new();
        loop {
            match self.peek() {
                Some(b')') => {
                    self.pos += 1;
                    return Ok(dims);
                }
                Some(b',') => self.pos += 1,
                Some(c) if c.is_ascii_digit() => {
                    let w = self.word();
                    match std::str::from_utf8(w).ok().and_then(|t| t.trim_end_matches('L').parse().ok()) {
                        Some(d) => dims.push(d),
                        None => return self.err("bad shape entry"),
                    }
                }
                _ => return self.err("bad shape tuple"),
            }
        }
    }
}

/// Parses the header; returns `(descr, shape, data offset)`.
fn read_header(bytes: &[u8]) -> Result<(String, Vec<usize>, usize)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return format_err(0, "bad magic, not an NPY file");
    }
    if bytes.len() < 10 {
        return format_err(bytes.len(), "truncated NPY preamble");
    }
    if bytes[6] != 1 {
        return format_err(6, format!("unsupported NPY version {}.{}", bytes[6], bytes[7]));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + hlen {
        return format_err(
            bytes.len(),
            format!("truncated header: expected {} bytes, got {}", 10 + hlen, bytes.len()),
        );
    }
    let mut p = HeaderParser { s: &bytes[10..10 + hlen], pos: 0, base: 10 };
    let (mut descr, mut fortran, mut shape) = (None, None, None);
    p.eat(b'{')?;
    loop {
        match p.peek() {
            Some(b'}') => break,
            Some(b',') => {
                p.pos += 1;
                continue;
            }
            None => return p.err("unterminated header dict"),
            _ => {}
        }
        let key = p.string()?;
        p.eat(b':')?;
        match key.as_str() {
            "descr" => descr = Some(p.string()?),
            "fortran_order" => {
                fortran = Some(match p.word() {
                    b"True" => true,
                    b"False" => false,
                    _ => return p.err("fortran_order must be True or False"),
                })
            }
            "shape" => shape = Some(p.shape()?),
            other => return p.err(format!("unexpected header key '{other}'")),
        }
    }
    let (Some(descr), Some(fortran), Some(shape)) = (descr, fortran, shape) else {
        return format_err(10, "header is missing descr, fortran_order or shape");
    };
    if fortran {
        return format_err(10, "fortran_order True is not supported");
    }
    Ok((descr, shape, 10 + hlen))
}

pub fn read_npy(bytes: &[u8]) -> Result<NpyArray> {
    let (descr, shape, off) = read_header(bytes)?;
    let Some(size) = NpyData::item_size(&descr) else {
        return format_err(10, format!("unsupported dtype '{descr}'"));
    };
    let n: usize = shape.iter().product();
    let expected = n * size;
    let payload = &bytes[off..];
    if payload.len() != expected {
        return format_err(
            off,
            format!("payload size mismatch: expected {expected} bytes, got {}", payload.len()),
        );
    }
    let data = match size {
        1 => NpyData::U8(payload.to_vec()),
        4 => NpyData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        _ if descr == "<f8" => {
            NpyData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        }
        _ => NpyData::I64(payload.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
    };
    Ok(NpyArray { shape, data })
}
