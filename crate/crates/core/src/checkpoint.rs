//! Binary model checkpoints.
//!
//! ```text
//! "BVAR" | version u32 | section count u32 | sections... | crc32 u32
//! section = tag [u8; 4] | length u64 | payload
//! ```
//!
//! Integers are little-endian. Sections: `SPEC` (network spec JSON), `CONF`
//! (training config JSON), `SEED` (seed of the data split the model was trained on), `PARM` (f64 parameters in
//! [`BayesianNetwork::param_slices`] order). The CRC covers every preceding byte.
//! Per-block prior overrides are not stored.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{BayesianNetwork, InitOptions, NetworkSpec};
use crate::rng;
use crate::training::TrainingConfig;

pub const MAGIC: &[u8; 4] = b"BVAR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: BayesianNetwork,
    pub config: TrainingConfig,
    pub seed: u64,
}

fn push_section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let spec = serde_json::to_vec(&ckpt.model.spec).expect("spec serializes");
    let conf = serde_json::to_vec(&ckpt.config).expect("config serializes");
    let params: Vec<u8> = ckpt
        .model
        .flat_params()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let mut out = Vec::with_capacity(params.len() + spec.len() + conf.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&4u32.to_le_bytes());
    push_section(&mut out, b"SPEC", &spec);
    push_section(&mut out, b"CONF", &conf);
    push_section(&mut out, b"SEED", &ckpt.seed.to_le_bytes());
    push_section(&mut out, b"PARM", &params);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn defect(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(defect(format!("truncated file while reading {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(defect("bad magic (not a BVAR checkpoint)"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(defect(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = c.u32("section count")?;
    let (mut spec, mut conf, mut seed, mut params) = (None, None, None, None);
    for _ in 0..count {
        let tag: [u8; 4] = c.take(4, "section tag")?.try_into().unwrap();
        let len = usize::try_from(c.u64("section length")?)
            .map_err(|_| defect("section length overflows"))?;
        let payload = c.take(len, &format!("section {}", String::from_utf8_lossy(&tag)))?;
        match &tag {
            b"SPEC" => spec = Some(payload),
            b"CONF" => conf = Some(payload),
            b"SEED" => seed = Some(payload),
            b"PARM" => params = Some(payload),
            other => {
                return Err(defect(format!(
                    "unknown section `{}`",
                    String::from_utf8_lossy(other)
                )))
            }
        }
    }
    let body_len = c.pos;
    let stored = c.u32("CRC trailer")?;
    if c.pos != bytes.len() {
        return Err(defect(format!("{} trailing bytes after CRC", bytes.len() - c.pos)));
    }
    let actual = crc32fast::hash(&bytes[..body_len]);
    if stored != actual {
        return Err(defect(format!(
            "CRC mismatch (stored {stored:08x}, computed {actual:08x})"
        )));
    }
    let missing = |name: &str| defect(format!("missing {name} section"));
    let spec: NetworkSpec = serde_json::from_slice(spec.ok_or_else(|| missing("SPEC"))?)
        .map_err(|e| defect(format!("SPEC section: {e}")))?;
    let config: TrainingConfig = serde_json::from_slice(conf.ok_or_else(|| missing("CONF"))?)
        .map_err(|e| defect(format!("CONF section: {e}")))?;
    let seed = seed.ok_or_else(|| missing("SEED"))?;
    let seed = u64::from_le_bytes(
        seed.try_into()
            .map_err(|_| defect("SEED section is not 8 bytes"))?,
    );
    let params = params.ok_or_else(|| missing("PARM"))?;
    if params.len() % 8 != 0 {
        return Err(defect("PARM section length is not a multiple of 8"));
    }
    let values: Vec<f64> = params
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mut model = BayesianNetwork::new(
        spec,
        config.prior,
        InitOptions::default(),
        &mut rng::seeded(0),
    )
    .map_err(|e| defect(format!("invalid network: {e}")))?;
    model
        .set_flat_params(&values)
        .map_err(|e| defect(format!("PARM section: {e}")))?;
    Ok(Checkpoint {
        model,
        config,
        seed,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
