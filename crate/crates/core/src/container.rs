//! Binary container for epochs, alignment references and checkpoints.
//!
//! Layout: the 8-byte magic `SSVEPC01`, a little-endian `u32` header length,
//! a UTF-8 JSON header, the little-endian `f64` payload in row-major order
//! and, for labeled epochs, a little-endian `u32` label array.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentReference;
use crate::error::{Error, Result};
use crate::nnet::{Architecture, ModelParams, Tensor};
use crate::preprocess::{EpochSet, Stage};

pub const MAGIC: &[u8; 8] = b"SSVEPC01";
const DTYPE: &str = "f64le";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Epochs,
    Reference,
    Checkpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: Kind,
    dtype: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subject_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stage: Option<Stage>,
    labels: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eigen_floor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    architecture: Option<Architecture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    version: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    manifest: Option<Vec<(String, Vec<usize>)>>,
}

impl Header {
    fn new(kind: Kind, shape: Vec<usize>) -> Self {
        Self {
            kind,
            dtype: DTYPE.into(),
            shape,
            fs: None,
            subject_id: None,
            stage: None,
            labels: false,
            eigen_floor: None,
            architecture: None,
            version: None,
            manifest: None,
        }
    }
}

/// Any decoded artifact.
#[derive(Clone, Debug, PartialEq)]
pub enum Artifact {
    Epochs(EpochSet),
    Reference(AlignmentReference),
    Checkpoint(ModelParams),
}

fn encode(header: &Header, payload: &[f64], labels: Option<&[usize]>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Format(e.to_string()))?;
    let hlen = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&hlen.to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(l) = labels {
        for &c in l {
            let c = u32::try_from(c).map_err(|_| Error::Format(format!("label {c} exceeds u32")))?;
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    Ok(out)
}

struct Decoded {
    header: Header,
    payload: Vec<f64>,
    labels: Option<Vec<usize>>,
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| {
        Error::TruncatedPayload(format!(
            "{what} needs {n} bytes at offset {pos}, file has {}",
            bytes.len()
        ))
    })?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn decode_raw(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut pos = MAGIC.len();
    let hlen = u32::from_le_bytes(take(bytes, &mut pos, 4, "header length")?.try_into().unwrap()) as usize;
    let hbytes = take(bytes, &mut pos, hlen, "header")?;
    let header: Header =
        serde_json::from_slice(hbytes).map_err(|e| Error::Format(format!("invalid header: {e}")))?;
    if header.dtype != DTYPE {
        return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
    }
    let n: usize = header
        .shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    let raw = take(bytes, &mut pos, n.checked_mul(8).ok_or_else(|| Error::Format("shape overflows".into()))?, "payload")?;
    let payload = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let labels = if header.labels {
        let count = *header
            .shape
            .first()
            .ok_or_else(|| Error::Format("labeled container without a trial axis".into()))?;
        let raw = take(bytes, &mut pos, count * 4, "labels")?;
        Some(
            raw.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
                .collect(),
        )
    } else {
        None
    };
    if pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the payload",
            bytes.len() - pos
        )));
    }
    Ok(Decoded { header, payload, labels })
}

fn expect_kind(d: &Header, kind: Kind) -> Result<()> {
    if d.kind != kind {
        return Err(Error::Format(format!("expected a {kind:?} container, found {:?}", d.kind)));
    }
    Ok(())
}

fn missing(field: &str) -> Error {
    Error::Format(format!("header lacks {field}"))
}

pub fn encode_epochs(set: &EpochSet) -> Result<Vec<u8>> {
    let mut h = Header::new(Kind::Epochs, set.dims().to_vec());
    h.fs = Some(set.fs());
    h.subject_id = Some(set.subject_id().to_string());
    h.stage = Some(set.stage());
    h.labels = set.labels().is_some();
    encode(&h, set.data(), set.labels())
}

fn epochs_from(d: Decoded) -> Result<EpochSet> {
    let h = d.header;
    let dims: [usize; 4] = h
        .shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::ShapeMismatch(format!("epoch shape {:?} is not 4-dimensional", h.shape)))?;
    EpochSet::new(
        d.payload,
        dims,
        d.labels,
        h.fs.ok_or_else(|| missing("fs"))?,
        h.subject_id.ok_or_else(|| missing("subject_id"))?,
        h.stage.ok_or_else(|| missing("stage"))?,
    )
}

pub fn decode_epochs(bytes: &[u8]) -> Result<EpochSet> {
    let d = decode_raw(bytes)?;
    expect_kind(&d.header, Kind::Epochs)?;
    epochs_from(d)
}

pub fn encode_reference(r: &AlignmentReference) -> Result<Vec<u8>> {
    let n = r.dim();
    let mut h = Header::new(Kind::Reference, vec![2, n, n]);
    h.eigen_floor = Some(r.eigen_floor);
    let mut payload = Vec::with_capacity(2 * n * n);
    for m in [&r.mean_cov, &r.inv_sqrt] {
        payload.extend(m.transpose().iter().copied());
    }
    encode(&h, &payload, None)
}

fn reference_from(d: Decoded) -> Result<AlignmentReference> {
    let h = d.header;
    if h.shape.len() != 3 || h.shape[0] != 2 || h.shape[1] != h.shape[2] {
        return Err(Error::ShapeMismatch(format!("reference shape {:?} is not [2, D, D]", h.shape)));
    }
    let n = h.shape[1];
    Ok(AlignmentReference {
        mean_cov: DMatrix::from_row_slice(n, n, &d.payload[..n * n]),
        inv_sqrt: DMatrix::from_row_slice(n, n, &d.payload[n * n..]),
        eigen_floor: h.eigen_floor.ok_or_else(|| missing("eigen_floor"))?,
    })
}

pub fn decode_reference(bytes: &[u8]) -> Result<AlignmentReference> {
    let d = decode_raw(bytes)?;
    expect_kind(&d.header, Kind::Reference)?;
    reference_from(d)
}

pub fn encode_checkpoint(p: &ModelParams) -> Result<Vec<u8>> {
    let mut h = Header::new(Kind::Checkpoint, vec![p.num_params()]);
    h.architecture = Some(p.arch.clone());
    h.version = Some(p.version);
    h.manifest = Some(p.manifest());
    let payload: Vec<f64> = p.tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
    encode(&h, &payload, None)
}

fn checkpoint_from(d: Decoded) -> Result<ModelParams> {
    let h = d.header;
    let manifest = h.manifest.ok_or_else(|| missing("manifest"))?;
    let total: usize = manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if h.shape != [total] {
        return Err(Error::ShapeMismatch(format!(
            "manifest holds {total} values but shape is {:?}",
            h.shape
        )));
    }
    let mut off = 0;
    let mut named = Vec::with_capacity(manifest.len());
    for (name, shape) in manifest {
        let len: usize = shape.iter().product();
        named.push((name, Tensor::new(shape, d.payload[off..off + len].to_vec())?));
        off += len;
    }
    ModelParams::from_tensors(
        h.architecture.ok_or_else(|| missing("architecture"))?,
        h.version.ok_or_else(|| missing("version"))?,
        named,
    )
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let d = decode_raw(bytes)?;
    expect_kind(&d.header, Kind::Checkpoint)?;
    checkpoint_from(d)
}

pub fn encode_artifact(a: &Artifact) -> Result<Vec<u8>> {
    match a {
        Artifact::Epochs(e) => encode_epochs(e),
        Artifact::Reference(r) => encode_reference(r),
        Artifact::Checkpoint(p) => encode_checkpoint(p),
    }
}

pub fn decode_artifact(bytes: &[u8]) -> Result<Artifact> {
    let d = decode_raw(bytes)?;
    Ok(match d.header.kind {
        Kind::Epochs => Artifact::Epochs(epochs_from(d)?),
        Kind::Reference => Artifact::Reference(reference_from(d)?),
        Kind::Checkpoint => Artifact::Checkpoint(checkpoint_from(d)?),
    })
}

/// Kind of the container in `bytes` without decoding the payload.
pub fn peek_kind(bytes: &[u8]) -> Result<Kind> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut pos = MAGIC.len();
    let hlen = u32::from_le_bytes(take(bytes, &mut pos, 4, "header length")?.try_into().unwrap()) as usize;
    let h: Header = serde_json::from_slice(take(bytes, &mut pos, hlen, "header")?)
        .map_err(|e| Error::Format(format!("invalid header: {e}")))?;
    Ok(h.kind)
}

pub fn save(path: &Path, a: &Artifact) -> Result<()> {
    std::fs::write(path, encode_artifact(a)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Artifact> {
    decode_artifact(&std::fs::read(path)?)
}

pub fn load_epochs(path: &Path) -> Result<EpochSet> {
    decode_epochs(&std::fs::read(path)?)
}

pub fn load_reference(path: &Path) -> Result<AlignmentReference> {
    decode_reference(&std::fs::read(path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&std::fs::read(path)?)
}
