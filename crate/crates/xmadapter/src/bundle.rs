//! The XMAB embedding-bundle format and its JSON provenance sidecar.
//!
//! ```text
//! "XMAB"  u16 version
//! u32 feature_dim  u32 num_classes  u32 num_train  u32 num_test
//! num_classes × (u32 byte length, UTF-8 name)
//! f32 train_features [num_train × C]   f32 test_features [num_test × C]
//! f32 text_features [N × C]            f32 zeroshot_weights [C × N]
//! u32 train_labels [num_train]         u32 test_labels [num_test]
//! ```
//!
//! Everything is little-endian and tensors are row-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xmadapter_core::{EmbeddingBundle, Matrix, SyntheticConfig};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"XMAB";
pub const VERSION: u16 = 1;

pub fn encode_bundle(bundle: &EmbeddingBundle) -> Result<Vec<u8>> {
    bundle.validate().map_err(Error::InvalidBundle)?;
    let mut w = Writer::new();
    w.bytes(&MAGIC);
    w.u16(VERSION);
    w.count("feature_dim", bundle.feature_dim)?;
    w.count("num_classes", bundle.num_classes)?;
    w.count("num_train", bundle.num_train())?;
    w.count("num_test", bundle.num_test())?;
    for name in &bundle.class_names {
        w.string(name)?;
    }
    w.f32s(bundle.train_features.data());
    w.f32s(bundle.test_features.data());
    w.f32s(bundle.text_features.data());
    w.f32s(bundle.zeroshot_weights.data());
    w.counts("train label", &bundle.train_labels)?;
    w.counts("test label", &bundle.test_labels)?;
    Ok(w.into_bytes())
}

fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
    Matrix::new(rows, cols, data).map_err(Error::InvalidBundle)
}

fn check_labels(which: &'static str, labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= num_classes) {
        Some(index) => Err(Error::LabelOutOfRange {
            which,
            index,
            label: labels[index],
            num_classes,
        }),
        None => Ok(()),
    }
}

fn check_rows(tensor: &'static str, m: &Matrix) -> Result<()> {
    match (0..m.rows()).find(|&i| m.row(i).iter().all(|&x| x == 0.0)) {
        Some(row) => Err(Error::ZeroRow { tensor, row }),
        None => Ok(()),
    }
}

/// Parses and validates a bundle.
pub fn decode_bundle(bytes: &[u8]) -> Result<EmbeddingBundle> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { format: "XMAB", version });
    }
    let c = r.count()?;
    let n = r.count()?;
    let num_train = r.count()?;
    let num_test = r.count()?;
    let mut class_names = Vec::with_capacity(n.min(r.remaining() / 4));
    for i in 0..n {
        let len = r.count()?;
        let raw = r.take(len)?;
        class_names.push(String::from_utf8(raw.to_vec()).map_err(|_| Error::InvalidUtf8(i))?);
    }
    let train = r.f32s(num_train.saturating_mul(c))?;
    let test = r.f32s(num_test.saturating_mul(c))?;
    let text = r.f32s(n.saturating_mul(c))?;
    let zs = r.f32s(c.saturating_mul(n))?;
    let train_labels = r.counts(num_train)?;
    let test_labels = r.counts(num_test)?;
    r.finish()?;

    check_labels("train", &train_labels, n)?;
    check_labels("test", &test_labels, n)?;
    let bundle = EmbeddingBundle {
        feature_dim: c,
        num_classes: n,
        class_names,
        train_features: matrix(num_train, c, train)?,
        train_labels,
        test_features: matrix(num_test, c, test)?,
        test_labels,
        text_features: matrix(n, c, text)?,
        zeroshot_weights: matrix(c, n, zs)?,
    };
    check_rows("train_features", &bundle.train_features)?;
    check_rows("test_features", &bundle.test_features)?;
    check_rows("text_features", &bundle.text_features)?;
    bundle.validate().map_err(Error::InvalidBundle)?;
    Ok(bundle)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<EmbeddingBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&bytes)
}

pub fn save_bundle(bundle: &EmbeddingBundle, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_bundle(bundle)?;
    crate::write_atomic(path.as_ref(), &bytes)
}

/// Informational metadata stored next to a bundle as `<bundle>.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Provenance {
    pub encoder: Option<String>,
    pub dataset: Option<String>,
    /// Generator settings when the bundle is synthetic.
    pub synthetic: Option<SyntheticConfig>,
}

pub fn sidecar_path(bundle_path: &Path) -> PathBuf {
    let mut s = bundle_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_provenance(bundle_path: &Path, prov: &Provenance) -> Result<()> {
    let json = serde_json::to_vec_pretty(prov)?;
    crate::write_atomic(&sidecar_path(bundle_path), &json)
}

/// Reads the sidecar if present.
pub fn load_provenance(bundle_path: &Path) -> Result<Option<Provenance>> {
    let p = sidecar_path(bundle_path);
    match fs::read(&p) {
        Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(p, e)),
    }
}
