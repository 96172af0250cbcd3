//! Binary model files.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! "PFSM"           magic
//! u16              format version
//! u8               wrong-recovery mode (0 randomized, 1 obfuscated)
//! u8               key-derivation hash id
//! u32 u32 u32      blocks, growth, image side
//! f64              alpha
//! u32              key-derivation iterations
//! u16 + bytes      salt
//! u32 + bytes      training configuration as UTF-8 `key = value` text
//! u64              parameter count
//! f32 * count      parameters in block, subnet, layer order
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel, WrongRecoveryMode};
use crate::keygen::{KdfHash, KeygenConfig};

use super::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PFSM";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: FlowModel,
    /// Training configuration text stored alongside the model; empty for
    /// untrained models.
    pub config_text: String,
}

impl Checkpoint {
    pub fn train_config(&self) -> Result<Option<TrainConfig>> {
        if self.config_text.trim().is_empty() {
            return Ok(None);
        }
        TrainConfig::from_text(&self.config_text).map(Some)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(&self.model, &self.config_text)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        decode(bytes)
    }
}

fn encode(model: &FlowModel, config_text: &str) -> Result<Vec<u8>> {
    let cfg = &model.config;
    let u32_of = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("{what} {v} does not fit a checkpoint")))
    };
    let salt_len = u16::try_from(cfg.keygen.salt.len())
        .map_err(|_| Error::InvalidConfig("salt longer than 65535 bytes".into()))?;
    let count = model.param_count();
    let mut out = Vec::with_capacity(64 + config_text.len() + count * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(match cfg.mode {
        WrongRecoveryMode::Randomized => 0,
        WrongRecoveryMode::Obfuscated => 1,
    });
    out.push(cfg.keygen.hash.id());
    out.extend_from_slice(&u32_of(cfg.blocks, "block count")?.to_le_bytes());
    out.extend_from_slice(&u32_of(cfg.growth, "growth")?.to_le_bytes());
    out.extend_from_slice(&u32_of(cfg.side, "side")?.to_le_bytes());
    out.extend_from_slice(&cfg.alpha.to_le_bytes());
    out.extend_from_slice(&cfg.keygen.iterations.to_le_bytes());
    out.extend_from_slice(&salt_len.to_le_bytes());
    out.extend_from_slice(&cfg.keygen.salt);
    out.extend_from_slice(&u32_of(config_text.len(), "config length")?.to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for t in model.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("slice has length N"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mode = match r.u8("mode")? {
        0 => WrongRecoveryMode::Randomized,
        1 => WrongRecoveryMode::Obfuscated,
        m => return Err(Error::Format(format!("unknown wrong-recovery mode {m}"))),
    };
    let hash_id = r.u8("hash id")?;
    let hash = KdfHash::from_id(hash_id).ok_or_else(|| Error::Format(format!("unknown hash id {hash_id}")))?;
    let blocks = r.u32("blocks")? as usize;
    let growth = r.u32("growth")? as usize;
    let side = r.u32("side")? as usize;
    let alpha = f64::from_le_bytes(r.array("alpha")?);
    let iterations = r.u32("iterations")?;
    let salt_len = r.u16("salt length")? as usize;
    let salt = r.take(salt_len, "salt")?.to_vec();
    let text_len = r.u32("config length")? as usize;
    let config_text = std::str::from_utf8(r.take(text_len, "config text")?)
        .map_err(|_| Error::Format("configuration text is not UTF-8".into()))?
        .to_string();
    let count = u64::from_le_bytes(r.array("parameter count")?);
    if blocks > 1 << 10 || growth > 1 << 12 || side > 1 << 16 {
        return Err(Error::Format(format!(
            "implausible architecture: {blocks} blocks, growth {growth}, side {side}"
        )));
    }

    let config = FlowConfig {
        blocks,
        growth,
        alpha,
        side,
        mode,
        keygen: KeygenConfig { salt, iterations, hash },
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("stored model configuration is invalid: {e}")))?;
    let expected = config.param_count();
    if count != expected as u64 {
        return Err(Error::Format(format!(
            "header declares {count} parameters, architecture needs {expected}"
        )));
    }
    let remaining = bytes.len() - r.pos;
    if remaining != expected * 4 {
        return Err(Error::Format(format!(
            "expected {} parameter bytes, found {remaining}",
            expected * 4
        )));
    }
    let mut model = FlowModel::<f32>::init(config, 0)?;
    let mut values = bytes[r.pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")));
    for t in model.tensors_mut() {
        for v in t.data_mut() {
            *v = values.next().expect("length checked above");
        }
    }
    Ok(Checkpoint { model, config_text })
}

/// Writes `model` and, if given, the configuration it was trained with.
pub fn save_checkpoint(model: &FlowModel, config: Option<&TrainConfig>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = config.map(TrainConfig::to_text).unwrap_or_default();
    let bytes = encode(model, &text)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> FlowModel {
        let cfg = FlowConfig {
            blocks: 2,
            growth: 3,
            side: 8,
            mode: WrongRecoveryMode::Obfuscated,
            ..FlowConfig::default()
        };
        FlowModel::init_perturbed(cfg, 4, 0.1).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let cp = Checkpoint {
            model: m.clone(),
            config_text: TrainConfig::default().to_text(),
        };
        let bytes = cp.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, cp);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.train_config().unwrap(), Some(TrainConfig::default()));
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let bytes = Checkpoint {
            model: model(),
            config_text: String::new(),
        }
        .to_bytes()
        .unwrap();
        for cut in [0, 3, 10, 40, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Format(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Format(_))));
        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::Format(_))));
    }
}
