//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "PMATCKPT" | version: u32 | record*
//! record = name_len: u32 | name: utf-8 | rank: u32 | dims: u32 * rank | payload: f32 * prod(dims)
//! ```
//!
//! Records run to end of file.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{arg_err, Error, Result};
use crate::io::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PMATCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Segment {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Parameter group: the name prefix before the first `.`
    /// (`encoder`, `decoder`, `scoring`).
    pub fn group(&self) -> &str {
        self.name.split('.').next().unwrap_or(&self.name)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    segments: Vec<Segment>,
    index: HashMap<String, usize>,
    pub step_count: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return arg_err(format!("duplicate parameter segment `{name}`"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return arg_err(format!("segment `{name}`: shape {shape:?} vs {} values", data.len()));
        }
        let id = self.segments.len();
        self.segments.push(Segment {
            name: name.to_string(),
            shape,
            data,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Segment {
        &self.segments[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Segment {
        &mut self.segments[id.0]
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segments_mut(&mut self) -> &mut [Segment] {
        &mut self.segments
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.segments.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.segments.iter().map(|s| s.data.len()).sum()
    }

    /// Copy values from `other`, which must have the same layout.
    pub fn load_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        if self.segments.len() != other.segments.len() {
            return arg_err(format!(
                "parameter layout mismatch: {} vs {} segments",
                self.segments.len(),
                other.segments.len()
            ));
        }
        for (dst, src) in self.segments.iter_mut().zip(&other.segments) {
            if dst.name != src.name || dst.shape != src.shape {
                return arg_err(format!(
                    "parameter layout mismatch at `{}` {:?} vs `{}` {:?}",
                    dst.name, dst.shape, src.name, src.shape
                ));
            }
            dst.data.clone_from(&src.data);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.num_scalars() * 4);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for s in &self.segments {
            buf.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(s.name.as_bytes());
            buf.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
            for &d in &s.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &s.data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing PMATCKPT magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut store = ParameterStore::new();
        while r.pos < bytes.len() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("segment name is not utf-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.add(&name, shape, data).map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(store)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// `rows × cols` matrix with orthonormal rows or columns (whichever is
/// shorter), scaled by `gain`.
pub fn orthogonal_init<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    // Orthonormalize the shorter side with modified Gram-Schmidt.
    let (k, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        for u in &vecs {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|a| *a /= norm);
        vecs.push(v);
    }
    let mut out = vec![0.0; rows * cols];
    for (i, v) in vecs.iter().enumerate() {
        for (j, &x) in v.iter().enumerate() {
            let (r, c) = if rows <= cols { (i, j) } else { (j, i) };
            out[r * cols + c] = gain * x;
        }
    }
    out
}
