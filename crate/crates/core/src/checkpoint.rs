//! Binary checkpoints for source and fused models.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SCKT"                 magic
//! u32                    format version (1)
//! u8                     kind: 0 = source model, 1 = fused model
//! [u8; 32]               config hash
//! u32                    model count n (1 for a source checkpoint)
//! per model:             architecture header
//!   u32 input_dim, u32 hidden count h, h × u32 hidden width,
//!   u32 feature_dim, u8 bn_after_each_hidden, u8 bottleneck_bn,
//!   u32 num_classes, u8 frozen_classifier
//! blocks:                u64 length, then length × f64
//!   fused only: zeta raw, zeta projected
//!   per model:  hidden weight and bias for each hidden layer,
//!               bottleneck weight and bias,
//!               per BN layer gamma, beta, running mean, running var,
//!               [momentum, epsilon],
//!               classifier weight and bias
//! u32                    CRC32 of every preceding byte
//! ```
//!
//! Gradients and optimizer velocities are not stored; a loaded model has
//! them zeroed.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{check_simplex, EncoderSpec, FusedTargetModel, MixingWeights, SourceModel};
use crate::nn::Param;

const MAGIC: &[u8; 4] = b"SCKT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointModel {
    Source(SourceModel),
    Fused(FusedTargetModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Hash of the configuration that produced the model.
    pub config_hash: [u8; 32],
    pub model: CheckpointModel,
}

impl Checkpoint {
    pub fn source(model: SourceModel, config_hash: [u8; 32]) -> Self {
        Self {
            config_hash,
            model: CheckpointModel::Source(model),
        }
    }

    pub fn fused(model: FusedTargetModel, config_hash: [u8; 32]) -> Self {
        Self {
            config_hash,
            model: CheckpointModel::Fused(model),
        }
    }

    /// The source models, one for a source checkpoint.
    pub fn models(&self) -> &[SourceModel] {
        match &self.model {
            CheckpointModel::Source(m) => std::slice::from_ref(m),
            CheckpointModel::Fused(f) => &f.models,
        }
    }

    pub fn into_source(self) -> Result<SourceModel> {
        match self.model {
            CheckpointModel::Source(m) => Ok(m),
            CheckpointModel::Fused(_) => Err(Error::Contract(
                "expected a source checkpoint, found a fused one".into(),
            )),
        }
    }

    /// A fused model; a source checkpoint becomes a one-source fusion.
    pub fn into_fused(self) -> Result<FusedTargetModel> {
        match self.model {
            CheckpointModel::Source(m) => FusedTargetModel::new(vec![m], MixingWeights::uniform(1)),
            CheckpointModel::Fused(f) => Ok(f),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let models = self.models();
        w.u8(matches!(self.model, CheckpointModel::Fused(_)) as u8);
        w.bytes(&self.config_hash);
        w.u32(models.len() as u32);
        for m in models {
            write_header(&mut w, m);
        }
        if let CheckpointModel::Fused(f) = &self.model {
            w.block(&f.zeta.raw);
            w.block(&f.zeta.projected);
        }
        for m in models {
            write_blocks(&mut w, m);
        }
        let crc = crc32fast::hash(&w.out);
        w.u32(crc);
        w.out
    }

    /// Parses a checkpoint. `path` only labels errors.
    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        // Any truncation or corruption shows up here, before a model is built.
        let checksum_error = || Error::Checksum(path.display().to_string());
        if bytes.len() < 12 {
            return Err(checksum_error());
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(checksum_error());
        }

        let mut r = Reader { path, buf: body, pos: 8 };
        let fused = match r.u8()? {
            0 => false,
            1 => true,
            k => return Err(r.bad(&format!("unknown checkpoint kind {k}"))),
        };
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let n = r.u32()? as usize;
        if n == 0 || (!fused && n != 1) {
            return Err(r.bad(&format!("invalid model count {n}")));
        }
        let mut models = Vec::with_capacity(n);
        for _ in 0..n {
            models.push(read_header(&mut r)?);
        }
        let zeta = if fused {
            let raw = r.block(n)?;
            let projected = r.block(n)?;
            check_simplex(&projected)?;
            Some(MixingWeights { raw, projected })
        } else {
            None
        };
        for m in &mut models {
            read_blocks(&mut r, m)?;
        }
        if r.pos != body.len() {
            return Err(r.bad("trailing bytes after the last block"));
        }
        let model = match zeta {
            Some(zeta) => CheckpointModel::Fused(FusedTargetModel::new(models, zeta)?),
            None => CheckpointModel::Source(models.pop().unwrap()),
        };
        Ok(Self { config_hash, model })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(path, &bytes)
}

fn write_header(w: &mut Writer, m: &SourceModel) {
    w.u32(m.spec.input_dim as u32);
    w.u32(m.spec.hidden_dims.len() as u32);
    for &h in &m.spec.hidden_dims {
        w.u32(h as u32);
    }
    w.u32(m.spec.feature_dim as u32);
    w.u8(m.spec.bn_after_each_hidden as u8);
    w.u8(m.spec.bottleneck_bn as u8);
    w.u32(m.num_classes as u32);
    w.u8(m.frozen_classifier as u8);
}

fn read_header(r: &mut Reader) -> Result<SourceModel> {
    let input_dim = r.u32()? as usize;
    let h = r.u32()? as usize;
    let hidden_dims = (0..h).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let spec = EncoderSpec {
        input_dim,
        hidden_dims,
        feature_dim: r.u32()? as usize,
        bn_after_each_hidden: r.flag()?,
        bottleneck_bn: r.flag()?,
    };
    let num_classes = r.u32()? as usize;
    let frozen = r.flag()?;
    let mut m = SourceModel::zeroed(spec, num_classes)
        .map_err(|e| r.bad(&format!("invalid architecture: {e}")))?;
    m.frozen_classifier = frozen;
    Ok(m)
}

fn params_in_order(m: &mut SourceModel) -> Vec<&mut Param> {
    let mut out = Vec::new();
    for d in &mut m.hidden {
        out.extend(d.params_mut());
    }
    out.extend(m.bottleneck.params_mut());
    out
}

fn write_blocks(w: &mut Writer, m: &SourceModel) {
    for d in m.hidden.iter().chain(std::iter::once(&m.bottleneck)) {
        w.block(d.weight.value.data());
        w.block(d.bias.value.data());
    }
    for bn in &m.bn_layers {
        w.block(bn.gamma.value.data());
        w.block(bn.beta.value.data());
        w.block(&bn.running_mean);
        w.block(&bn.running_var);
        w.block(&[bn.momentum, bn.epsilon]);
    }
    w.block(m.classifier.weight.value.data());
    w.block(m.classifier.bias.value.data());
}

fn read_blocks(r: &mut Reader, m: &mut SourceModel) -> Result<()> {
    for p in params_in_order(m) {
        r.fill(p)?;
    }
    for bn in &mut m.bn_layers {
        r.fill(&mut bn.gamma)?;
        r.fill(&mut bn.beta)?;
        let c = bn.running_mean.len();
        bn.running_mean = r.block(c)?;
        bn.running_var = r.block(c)?;
        let me = r.block(2)?;
        bn.momentum = me[0];
        bn.epsilon = me[1];
    }
    for p in m.classifier.params_mut() {
        r.fill(p)?;
    }
    Ok(())
}

#[derive(Default)]
struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.out.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.out.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn block(&mut self, values: &[f64]) {
        self.bytes(&(values.len() as u64).to_le_bytes());
        for v in values {
            self.bytes(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bad(&self, reason: &str) -> Error {
        Error::format(self.path, reason)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.bad("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.bad(&format!("invalid flag byte {v}"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// A block that must hold exactly `expected` values.
    fn block(&mut self, expected: usize) -> Result<Vec<f64>> {
        let len = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if len != expected as u64 {
            return Err(self.bad(&format!("block of {len} values where {expected} were expected")));
        }
        Ok(self
            .take(8 * expected)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn fill(&mut self, p: &mut Param) -> Result<()> {
        let v = self.block(p.value.numel())?;
        p.value.data_mut().copy_from_slice(&v);
        Ok(())
    }
}
