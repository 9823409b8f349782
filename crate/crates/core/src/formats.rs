//! Binary artifact containers: tensor checkpoints and embedding files.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "FSEB" | u32 version | [u8; 32] config hash
//! u32 metadata length | UTF-8 "key=value\n" lines
//! u32 tensor count | per tensor:
//!     u16 name length | name | u8 dtype (0 = f32, 1 = f64) | u32 ndim | u64 dims[ndim] | payload
//! ```
//!
//! Embedding file layout:
//!
//! ```text
//! "FSEE" | u32 version | u8 kind | u8 source | u32 layer | u32 dim | u64 count
//! u64 projection seed | f64 density | u64 n_in | u32 p_out | u8 normalized | u32 pca dim (0 = none)
//! [u8; 32] model hash | [u8; 32] config hash | u16 name length | name
//! count × (u64 id | f32 values[dim])
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::projection::{Embedding, EmbeddingSource, ProjectionSpec};
use crate::tensor::{DType, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSEB";
pub const EMBEDDING_MAGIC: &[u8; 4] = b"FSEE";
pub const FORMAT_VERSION: u32 = 1;

pub type Hash = [u8; 32];

pub fn sha256(bytes: &[u8]) -> Hash {
    Sha256::digest(bytes).into()
}

pub fn hex(hash: &Hash) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a sibling temporary file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid("atomic_write", format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Cursor over a byte buffer that reports failures with their offset.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'a str) -> Self {
        Reader { bytes, pos: 0, what }
    }

    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            what: self.what.to_string(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        let at = self.pos;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            what: self.what.to_string(),
            offset: at as u64,
            msg: "invalid UTF-8".into(),
        })
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m: [u8; 4] = self.array()?;
        if &m != expected {
            self.pos -= 4;
            return Err(self.fail(format!("bad magic {m:?}, expected {:?}", std::str::from_utf8(expected).unwrap())));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            self.pos -= 4;
            return Err(self.fail(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

/// A stored tensor in either precision.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`; only same-precision or widening conversions succeed.
    pub fn to_real<T: Real>(&self) -> Result<Tensor<T>> {
        match (self, T::DTYPE) {
            (StoredTensor::F32(t), _) => Ok(t.cast()),
            (StoredTensor::F64(t), DType::F64) => Ok(t.cast()),
            (StoredTensor::F64(_), DType::F32) => Err(Error::invalid("checkpoint", "refusing to narrow an f64 tensor to f32")),
        }
    }

    fn from_real<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }
}

/// Named tensors plus string metadata, tied to the configuration that produced them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_hash: Hash,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, StoredTensor)>,
}

impl Checkpoint {
    pub fn new(config_hash: Hash) -> Self {
        Checkpoint {
            config_hash,
            ..Default::default()
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) -> Result<()> {
        let value = value.to_string();
        if key.is_empty() || key.contains(['=', '\n']) || value.contains('\n') {
            return Err(Error::invalid("checkpoint", format!("metadata entry {key:?} cannot be stored")));
        }
        self.metadata.insert(key.to_string(), value);
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::invalid("checkpoint", format!("missing metadata key {key:?}")))
    }

    /// Parses a metadata value.
    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::invalid("checkpoint", format!("metadata {key:?} has unparsable value {raw:?}")))
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize || self.tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::invalid("checkpoint", format!("tensor name {name:?} is too long or duplicated")));
        }
        self.tensors.push((name, StoredTensor::from_real(t)));
        Ok(())
    }

    /// Stores every entry of `params` as `prefix + name`.
    pub fn push_params<T: Real>(&mut self, prefix: &str, params: &ParamSet<T>) -> Result<()> {
        for (name, t) in params.iter() {
            self.push(format!("{prefix}{name}"), t)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Collects every tensor under `prefix`, in stored order, with the prefix stripped.
    pub fn params<T: Real>(&self, prefix: &str) -> Result<ParamSet<T>> {
        let mut out = ParamSet::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.push(rest, t.to_real()?)?;
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        let meta: String = self.metadata.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], what: &str) -> Result<Self> {
        let mut r = Reader::new(bytes, what);
        r.magic(CHECKPOINT_MAGIC)?;
        let config_hash = r.array()?;
        let meta_len = r.u32()? as usize;
        let meta_at = r.pos;
        let meta = r.string(meta_len)?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                what: what.to_string(),
                offset: meta_at as u64,
                msg: format!("metadata line {line:?} lacks '='"),
            })?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = r.string(name_len)?;
            let code = r.u8()?;
            let dtype = DType::from_code(code).ok_or_else(|| {
                r.pos -= 1;
                r.fail(format!("unknown dtype code {code}"))
            })?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(r.fail(format!("tensor {name:?} has {ndim} dimensions")));
            }
            let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = len
                .and_then(|l| l.checked_mul(dtype.size()))
                .ok_or_else(|| r.fail(format!("tensor {name:?} shape {shape:?} overflows")))?;
            let payload = r.take(bytes)?;
            let t = match dtype {
                DType::F32 => StoredTensor::F32(Tensor::new(
                    shape,
                    payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                )?),
                DType::F64 => StoredTensor::F64(Tensor::new(
                    shape,
                    payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                )?),
            };
            tensors.push((name, t));
        }
        r.finish()?;
        Ok(Checkpoint {
            config_hash,
            metadata,
            tensors,
        })
    }

    /// Writes atomically; returns the SHA-256 of the written bytes.
    pub fn save(&self, path: &Path) -> Result<Hash> {
        let bytes = self.to_bytes()?;
        atomic_write(path, &bytes)?;
        Ok(sha256(&bytes))
    }

    /// Reads a checkpoint and the SHA-256 of its bytes.
    pub fn load(path: &Path) -> Result<(Self, Hash)> {
        let bytes = fs::read(path)?;
        Ok((Self::from_bytes(&bytes, &path.display().to_string())?, sha256(&bytes)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingKind {
    /// One vector per dataset sample.
    Samples = 0,
    /// Attribute directions; `id` indexes the attribute.
    Attribute = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingHeader {
    pub kind: EmbeddingKind,
    pub source: EmbeddingSource,
    /// Layer read by the activation source.
    pub layer: u32,
    pub dim: u32,
    pub projection: ProjectionSpec,
    /// Output dimension of the PCA stage, 0 when absent.
    pub pca_dim: u32,
    pub model_hash: Hash,
    pub config_hash: Hash,
    /// Attribute name, empty for sample embeddings.
    pub name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    pub header: EmbeddingHeader,
    pub embeddings: Vec<Embedding>,
}

impl EmbeddingFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        if let Some(e) = self.embeddings.iter().find(|e| e.values.len() != h.dim as usize) {
            return Err(Error::shape("embedding file", "vector length", h.dim, e.values.len()));
        }
        if h.name.len() > u16::MAX as usize {
            return Err(Error::invalid("embedding file", "name too long"));
        }
        let mut out = Vec::with_capacity(128 + self.embeddings.len() * (8 + 4 * h.dim as usize));
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(h.kind as u8);
        out.push(h.source.tag());
        out.extend_from_slice(&h.layer.to_le_bytes());
        out.extend_from_slice(&h.dim.to_le_bytes());
        out.extend_from_slice(&(self.embeddings.len() as u64).to_le_bytes());
        out.extend_from_slice(&h.projection.seed.to_le_bytes());
        out.extend_from_slice(&h.projection.density.to_le_bytes());
        out.extend_from_slice(&(h.projection.n_in as u64).to_le_bytes());
        out.extend_from_slice(&(h.projection.p_out as u32).to_le_bytes());
        out.push(h.projection.normalized as u8);
        out.extend_from_slice(&h.pca_dim.to_le_bytes());
        out.extend_from_slice(&h.model_hash);
        out.extend_from_slice(&h.config_hash);
        out.extend_from_slice(&(h.name.len() as u16).to_le_bytes());
        out.extend_from_slice(h.name.as_bytes());
        for e in &self.embeddings {
            out.extend_from_slice(&e.id.to_le_bytes());
            e.values.iter().for_each(|v| v.write_le(&mut out));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], what: &str) -> Result<Self> {
        let mut r = Reader::new(bytes, what);
        r.magic(EMBEDDING_MAGIC)?;
        let kind = match r.u8()? {
            0 => EmbeddingKind::Samples,
            1 => EmbeddingKind::Attribute,
            k => {
                r.pos -= 1;
                return Err(r.fail(format!("unknown embedding kind {k}")));
            }
        };
        let tag = r.u8()?;
        let source = EmbeddingSource::from_tag(tag).ok_or_else(|| {
            r.pos -= 1;
            r.fail(format!("unknown source tag {tag}"))
        })?;
        let layer = r.u32()?;
        let dim = r.u32()?;
        let count = r.u64()?;
        let projection = ProjectionSpec {
            seed: r.u64()?,
            density: r.f64()?,
            n_in: r.u64()? as usize,
            p_out: r.u32()? as usize,
            normalized: r.u8()? != 0,
        };
        let pca_dim = r.u32()?;
        let model_hash = r.array()?;
        let config_hash = r.array()?;
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let record = 8 + 4 * dim as usize;
        let expected = (count as usize).checked_mul(record);
        if expected != Some(bytes.len() - r.pos) {
            return Err(r.fail(format!(
                "header promises {count} records of {record} bytes but {} bytes follow",
                bytes.len() - r.pos
            )));
        }
        let mut embeddings = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let id = r.u64()?;
            let raw = r.take(4 * dim as usize)?;
            embeddings.push(Embedding {
                id,
                source,
                values: raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            });
        }
        r.finish()?;
        Ok(EmbeddingFile {
            header: EmbeddingHeader {
                kind,
                source,
                layer,
                dim,
                projection,
                pca_dim,
                model_hash,
                config_hash,
                name,
            },
            embeddings,
        })
    }

    pub fn save(&self, path: &Path) -> Result<Hash> {
        let bytes = self.to_bytes()?;
        atomic_write(path, &bytes)?;
        Ok(sha256(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        let mut c = Checkpoint::new([7; 32]);
        c.set_meta("layers", 5).unwrap();
        c.set_meta("note", "a = b").unwrap();
        c.push("w", &Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.1 - f32::MIN_POSITIVE)).unwrap();
        c.push("x", &Tensor::<f64>::from_fn(&[4], |i| (i as f64).exp())).unwrap();
        c.push("s", &Tensor::<f32>::scalar(-0.0)).unwrap();
        c
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let c = sample_checkpoint();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.meta("note").unwrap(), "a = b");
        assert_eq!(back.meta_parse::<usize>("layers").unwrap(), 5);
        assert!(matches!(back.get("s"), Some(StoredTensor::F32(t)) if t.data()[0].is_sign_negative()));
    }

    #[test]
    fn checkpoint_errors_carry_offsets() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        match Checkpoint::from_bytes(&bytes[..bytes.len() - 3], "cut") {
            Err(Error::Format { offset, .. }) => assert!(offset > 40),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, "m"), Err(Error::Format { offset: 0, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, "m").is_err());
    }

    #[test]
    fn params_round_trip_through_prefix() {
        let mut p = ParamSet::<f64>::new();
        p.push("a.weight", Tensor::from_fn(&[2, 2], |i| i as f64)).unwrap();
        p.push("a.bias", Tensor::zeros(&[2])).unwrap();
        let mut c = Checkpoint::new([0; 32]);
        c.push_params("model.", &p).unwrap();
        c.push_params("other.", &p).unwrap();
        assert_eq!(c.params::<f64>("model.").unwrap(), p);
        assert!(c.params::<f32>("model.").is_err());
    }

    fn sample_embeddings() -> EmbeddingFile {
        EmbeddingFile {
            header: EmbeddingHeader {
                kind: EmbeddingKind::Samples,
                source: EmbeddingSource::Fisher,
                layer: 3,
                dim: 3,
                projection: ProjectionSpec {
                    n_in: 1000,
                    p_out: 3,
                    density: 0.125,
                    seed: 42,
                    normalized: true,
                },
                pca_dim: 0,
                model_hash: [1; 32],
                config_hash: [2; 32],
                name: String::new(),
            },
            embeddings: (0..4)
                .map(|i| Embedding {
                    id: 10 + i,
                    source: EmbeddingSource::Fisher,
                    values: vec![i as f32, f32::NAN, -1e-30],
                })
                .collect(),
        }
    }

    #[test]
    fn embedding_file_round_trips_bit_exactly() {
        let f = sample_embeddings();
        let bytes = f.to_bytes().unwrap();
        let back = EmbeddingFile::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.header, f.header);
        assert_eq!(back.embeddings[2].id, 12);
    }

    #[test]
    fn embedding_file_rejects_mismatched_payload() {
        let bytes = sample_embeddings().to_bytes().unwrap();
        assert!(EmbeddingFile::from_bytes(&bytes[..bytes.len() - 4], "m").is_err());
        let mut f = sample_embeddings();
        f.embeddings[0].values.pop();
        assert!(f.to_bytes().is_err());
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.bin");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
