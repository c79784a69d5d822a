//! The XMCK checkpoint format.
//!
//! ```text
//! "XMCK"  u16 version  u8 precision (4 or 8)
//! f64 gamma  f64 alpha  f64 beta  u32 d  u8 flags
//! u32 epochs  u32 batch_size  f64 lr  u64 seed  f64 init_std  u32 hidden (0 = none)
//! u32 shots  u64 split_seed  u32 num_classes  u32 feature_dim  u32 entries
//! cache image keys [entries × C]   trained cache keys [entries × C]
//! meta net, img2txt net: u8 layers, then per layer u32 in, u32 out, weight, bias
//! f64 gamma logit (only when flag bit 5 is set)
//! u32 entry_labels [entries]  u32 source_indices [entries]
//! ```
//!
//! Tensors use the precision byte; scalars are always 64-bit. Flag bits:
//! 0 learn_gamma, 1 pre-aggregate, 2 mask_self, 3 ce_class_scale,
//! 4 raw_log_ce, 5 gamma logit present.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xmadapter_core::cache::Dense;
use xmadapter_core::{AdapterParams, CacheModel, HyperParams, Matrix, PhiOrder, ProjectionNet, TrainOptions};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"XMCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    fn width(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// Everything needed to rerun inference against the source bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub hyper: HyperParams,
    pub options: TrainOptions,
    pub shots: usize,
    pub split_seed: u64,
    pub num_classes: usize,
    pub cache: CacheModel,
    pub params: AdapterParams,
}

fn flags(c: &Checkpoint) -> u8 {
    let bits = [
        c.hyper.learn_gamma,
        c.hyper.phi_order == PhiOrder::PreAggregate,
        c.options.mask_self,
        c.options.ce_class_scale,
        c.options.raw_log_ce,
        c.params.gamma_logit.is_some(),
    ];
    bits.iter().enumerate().fold(0, |acc, (i, &b)| acc | (u8::from(b) << i))
}

fn write_tensor(w: &mut Writer, p: Precision, vals: &[f64]) {
    match p {
        Precision::F32 => w.f32s(vals),
        Precision::F64 => w.f64s(vals),
    }
}

fn read_tensor(r: &mut Reader<'_>, p: Precision, rows: usize, cols: usize) -> Result<Matrix> {
    let n = rows.saturating_mul(cols);
    let data = match p {
        Precision::F32 => r.f32s(n)?,
        Precision::F64 => r.f64s(n)?,
    };
    Matrix::new(rows, cols, data).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
}

fn write_net(w: &mut Writer, p: Precision, net: &ProjectionNet) -> Result<()> {
    let layers: Vec<&Dense> = net.layers().collect();
    w.u8(layers.len() as u8);
    for l in layers {
        w.count("layer input", l.weight.rows())?;
        w.count("layer output", l.weight.cols())?;
        write_tensor(w, p, l.weight.data());
        write_tensor(w, p, &l.bias);
    }
    Ok(())
}

fn read_net(r: &mut Reader<'_>, p: Precision) -> Result<ProjectionNet> {
    let count = r.u8()?;
    let mut layers = Vec::with_capacity(2);
    for _ in 0..count {
        let (input, output) = (r.count()?, r.count()?);
        let weight = read_tensor(r, p, input, output)?;
        let bias = read_tensor(r, p, 1, output)?.into_data();
        layers.push(Dense { weight, bias });
    }
    let mut layers = layers.into_iter();
    match (layers.next(), layers.next(), count) {
        (Some(output), None, 1) => Ok(ProjectionNet::linear(output)),
        (Some(hidden), Some(output), 2) if hidden.weight.cols() == output.weight.rows() => Ok(ProjectionNet {
            hidden: Some(hidden),
            output,
        }),
        _ => Err(Error::CorruptCheckpoint(format!("projection net with {count} layers"))),
    }
}

pub fn encode_checkpoint(c: &Checkpoint, precision: Precision) -> Result<Vec<u8>> {
    let entries = c.cache.len();
    let dim = c.params.cache_keys.cols();
    let mut w = Writer::new();
    w.bytes(&MAGIC);
    w.u16(VERSION);
    w.u8(precision.width());
    w.f64(c.hyper.gamma);
    w.f64(c.hyper.alpha);
    w.f64(c.hyper.beta);
    w.count("d", c.hyper.d)?;
    w.u8(flags(c));
    w.count("epochs", c.options.epochs)?;
    w.count("batch_size", c.options.batch_size)?;
    w.f64(c.options.lr);
    w.u64(c.options.seed);
    w.f64(c.options.init_std);
    w.count("hidden_dim", c.options.hidden_dim.unwrap_or(0))?;
    w.count("shots", c.shots)?;
    w.u64(c.split_seed);
    w.count("num_classes", c.num_classes)?;
    w.count("feature_dim", dim)?;
    w.count("entries", entries)?;
    write_tensor(&mut w, precision, c.cache.image_keys.data());
    write_tensor(&mut w, precision, c.params.cache_keys.data());
    write_net(&mut w, precision, &c.params.meta_net)?;
    write_net(&mut w, precision, &c.params.img2txt)?;
    if let Some(g) = c.params.gamma_logit {
        w.f64(g);
    }
    w.counts("entry label", &c.cache.entry_labels)?;
    w.counts("source index", &c.cache.source_indices)?;
    Ok(w.into_bytes())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { format: "XMCK", version });
    }
    let precision = match r.u8()? {
        4 => Precision::F32,
        8 => Precision::F64,
        other => return Err(Error::CorruptCheckpoint(format!("precision byte {other}"))),
    };
    let (gamma, alpha, beta) = (r.f64()?, r.f64()?, r.f64()?);
    let d = r.count()?;
    let flag = r.u8()?;
    let bit = |i: u8| flag & (1 << i) != 0;
    let hyper = HyperParams {
        gamma,
        alpha,
        beta,
        d,
        learn_gamma: bit(0),
        phi_order: if bit(1) { PhiOrder::PreAggregate } else { PhiOrder::PostAggregate },
    };
    let epochs = r.count()?;
    let batch_size = r.count()?;
    let lr = r.f64()?;
    let seed = r.u64()?;
    let init_std = r.f64()?;
    let hidden = r.count()?;
    let options = TrainOptions {
        epochs,
        batch_size,
        lr,
        seed,
        mask_self: bit(2),
        ce_class_scale: bit(3),
        raw_log_ce: bit(4),
        hidden_dim: (hidden > 0).then_some(hidden),
        init_std,
    };
    let shots = r.count()?;
    let split_seed = r.u64()?;
    let num_classes = r.count()?;
    let dim = r.count()?;
    let entries = r.count()?;
    let image_keys = read_tensor(&mut r, precision, entries, dim)?;
    let cache_keys = read_tensor(&mut r, precision, entries, dim)?;
    let meta_net = read_net(&mut r, precision)?;
    let img2txt = read_net(&mut r, precision)?;
    let gamma_logit = if bit(5) { Some(r.f64()?) } else { None };
    let entry_labels = r.counts(entries)?;
    let source_indices = r.counts(entries)?;
    r.finish()?;

    for net in [&meta_net, &img2txt] {
        if net.input_dim() != dim || net.output_dim() != d || net.hidden_dim() != options.hidden_dim {
            return Err(Error::CorruptCheckpoint("projection net shape disagrees with header".into()));
        }
    }
    if let Some(index) = entry_labels.iter().position(|&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange {
            which: "entry",
            index,
            label: entry_labels[index],
            num_classes,
        });
    }
    let cache = CacheModel::from_parts(image_keys, entry_labels, source_indices, num_classes)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    Ok(Checkpoint {
        hyper,
        options,
        shots,
        split_seed,
        num_classes,
        cache,
        params: AdapterParams {
            cache_keys,
            meta_net,
            img2txt,
            gamma_logit,
        },
    })
}

pub fn save_checkpoint(c: &Checkpoint, precision: Precision, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_checkpoint(c, precision)?;
    crate::write_atomic(path.as_ref(), &bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
