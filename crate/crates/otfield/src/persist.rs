//! Single-file model archives: a magic/version line, a checksum of the
//! payload, then one deterministic JSON document. Serialization is
//! byte-reproducible for a fixed model, and loading rebuilds the exact
//! predictor (weights are re-derived from the stored data and
//! hyperparameters, which round-trip losslessly).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::write_atomic;
use crate::dimred::PcaModel;
use crate::error::{Error, Result};
use crate::gp::{GpModel, GpModelRecord, SwwlConfig};
use crate::ot::SinkhornConfig;
use crate::pipeline::TrainedSurrogate;
use crate::reference::ReferenceMeasure;

const MAGIC: &str = "otfield-model";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SurrogateRecord {
    schema: u32,
    field: String,
    scalar_names: Vec<String>,
    attr_dim: usize,
    wl_iterations: usize,
    lambda: f64,
    lambda0: f64,
    sinkhorn: SinkhornConfig,
    swwl: SwwlConfig,
    reference: ReferenceMeasure,
    pca: PcaModel,
    gps: Vec<GpModelRecord>,
    train_fingerprint: String,
}

/// Serialize a surrogate to its archive bytes.
pub fn model_bytes(surrogate: &TrainedSurrogate) -> Result<Vec<u8>> {
    let record = SurrogateRecord {
        schema: VERSION,
        field: surrogate.field().to_string(),
        scalar_names: surrogate.scalar_names().to_vec(),
        attr_dim: surrogate.attr_dim(),
        wl_iterations: surrogate.wl_iterations(),
        lambda: surrogate.lambda(),
        lambda0: surrogate.lambda0(),
        sinkhorn: *surrogate.sinkhorn(),
        swwl: *surrogate.swwl_config(),
        reference: surrogate.reference().clone(),
        pca: surrogate.pca().clone(),
        gps: surrogate.gps().iter().map(GpModel::to_record).collect(),
        train_fingerprint: surrogate.train_fingerprint().to_string(),
    };
    let payload = serde_json::to_string(&record)
        .map_err(|e| Error::Archive(format!("serialization failed: {e}")))?;
    let mut payload = payload.into_bytes();
    payload.push(b'\n');
    let digest = Sha256::digest(&payload);
    let mut out = format!("{MAGIC} v{VERSION}\nsha256:{digest:x}\n").into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_model(surrogate: &TrainedSurrogate, path: &Path) -> Result<()> {
    write_atomic(path, &model_bytes(surrogate)?)
}

/// Verify the `<magic> v<version>` header and the payload checksum,
/// returning the JSON payload.
fn checked_payload<'a>(bytes: &'a [u8], magic: &str) -> Result<&'a str> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Archive("archive is not valid UTF-8".into()))?;
    let (header, rest) = text
        .split_once('\n')
        .ok_or_else(|| Error::Archive("archive is truncated before the header".into()))?;
    let version = header
        .strip_prefix(magic)
        .and_then(|v| v.trim().strip_prefix('v'))
        .ok_or_else(|| Error::Archive(format!("not a '{magic}' archive (header '{header}')")))?;
    let found: u32 = version
        .parse()
        .map_err(|_| Error::Archive(format!("unreadable archive version '{version}'")))?;
    if found != VERSION {
        return Err(Error::ArchiveVersion {
            found,
            supported: VERSION,
        });
    }
    let (checksum_line, payload) = rest
        .split_once('\n')
        .ok_or_else(|| Error::Archive("archive is truncated before the checksum".into()))?;
    let expected = checksum_line
        .strip_prefix("sha256:")
        .ok_or_else(|| Error::Archive("missing payload checksum".into()))?;
    let digest = format!("{:x}", Sha256::digest(payload.as_bytes()));
    if digest != expected {
        return Err(Error::Archive(
            "payload checksum mismatch: archive is truncated or corrupted".into(),
        ));
    }
    Ok(payload)
}

/// Parse archive bytes back into a surrogate, verifying the version and
/// the payload checksum first.
pub fn model_from_bytes(bytes: &[u8]) -> Result<TrainedSurrogate> {
    let payload = checked_payload(bytes, MAGIC)?;
    let record: SurrogateRecord = serde_json::from_str(payload)
        .map_err(|e| Error::Archive(format!("malformed payload: {e}")))?;
    let gps = record
        .gps
        .into_iter()
        .map(GpModel::from_record)
        .collect::<Result<Vec<_>>>()?;
    TrainedSurrogate::from_parts(
        record.field,
        record.scalar_names,
        record.attr_dim,
        record.wl_iterations,
        record.lambda,
        record.lambda0,
        record.sinkhorn,
        record.reference,
        record.swwl,
        record.pca,
        gps,
        record.train_fingerprint,
    )
}

pub fn load_model(path: &Path) -> Result<TrainedSurrogate> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    model_from_bytes(&bytes)
}

const REFERENCE_MAGIC: &str = "otfield-reference";

/// Reference measures use the same header/checksum/JSON layout as model
/// archives so `build-reference` outputs are self-validating too.
pub fn reference_bytes(reference: &ReferenceMeasure) -> Result<Vec<u8>> {
    let payload = serde_json::to_string(reference)
        .map_err(|e| Error::Archive(format!("serialization failed: {e}")))?;
    let mut payload = payload.into_bytes();
    payload.push(b'\n');
    let digest = Sha256::digest(&payload);
    let mut out = format!("{REFERENCE_MAGIC} v{VERSION}\nsha256:{digest:x}\n").into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_reference(reference: &ReferenceMeasure, path: &Path) -> Result<()> {
    write_atomic(path, &reference_bytes(reference)?)
}

pub fn reference_from_bytes(bytes: &[u8]) -> Result<ReferenceMeasure> {
    let payload = checked_payload(bytes, REFERENCE_MAGIC)?;
    serde_json::from_str(payload).map_err(|e| Error::Archive(format!("malformed payload: {e}")))
}

pub fn load_reference(path: &Path) -> Result<ReferenceMeasure> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    reference_from_bytes(&bytes)
}
