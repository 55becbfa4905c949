//! Binary checkpoint format.
//!
//! Layout: magic bytes `P2BE`, format version (u16), then six
//! length-prefixed sections (config echo as JSON, step counter, network
//! parameters, optional embedding table, SGD velocities, optional AdamW
//! state), and a trailing CRC32 over everything before it. All integers
//! are little-endian and all floats are raw little-endian f32 bits, so a
//! save → load → save cycle is byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use crate::encoders::EmbeddingTable;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::optim::AdamWState;
use crate::training::{EncoderKind, TrainConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"P2BE";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Everything needed to rebuild a trained model and resume its optimizers.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub network: BTreeMap<String, Tensor>,
    pub table: Option<EmbeddingTable>,
    pub velocity: BTreeMap<String, Vec<f32>>,
    pub adamw: Option<AdamWState>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_invariants()?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

        let config = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
        push_section(&mut out, &config);
        push_section(&mut out, &self.step.to_le_bytes());
        push_section(&mut out, &encode_tensor_map(&self.network));

        let mut table = Vec::new();
        match &self.table {
            Some(t) => {
                table.push(1);
                table.extend_from_slice(&(t.m() as u64).to_le_bytes());
                push_f32s(&mut table, t.values());
            }
            None => table.push(0),
        }
        push_section(&mut out, &table);

        push_section(&mut out, &encode_vec_map(&self.velocity));

        let mut adamw = Vec::new();
        match &self.adamw {
            Some(state) => {
                adamw.push(1);
                adamw.extend_from_slice(&state.step.to_le_bytes());
                adamw.extend_from_slice(&(state.m.len() as u64).to_le_bytes());
                push_f32s(&mut adamw, &state.m);
                push_f32s(&mut adamw, &state.v);
            }
            None => adamw.push(0),
        }
        push_section(&mut out, &adamw);

        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 2 + 4 {
            return Err(Error::CheckpointFormat("file too short".into()));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().expect("split at len-4"));
        if crc32fast::hash(body) != stored {
            return Err(Error::ChecksumMismatch);
        }

        let mut cur = Cursor::new(body);
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointFormat("bad magic bytes".into()));
        }
        let version = cur.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                expected: CHECKPOINT_VERSION,
                got: version,
            });
        }

        let mut config_cur = cur.section()?;
        let config: TrainConfig = serde_json::from_slice(config_cur.remainder())
            .map_err(|e| Error::CheckpointFormat(format!("config section: {e}")))?;
        config.validate()?;

        let mut step_cur = cur.section()?;
        let step = step_cur.u64()?;
        step_cur.finish()?;

        let mut net_cur = cur.section()?;
        let network = decode_tensor_map(&mut net_cur)?;
        net_cur.finish()?;

        let mut table_cur = cur.section()?;
        let table = match table_cur.u8()? {
            0 => None,
            1 => {
                let m = table_cur.u64()? as usize;
                let values = table_cur.f32s(256 * m)?;
                Some(EmbeddingTable::from_values(m, values)?)
            }
            flag => {
                return Err(Error::CheckpointFormat(format!(
                    "bad table presence flag {flag}"
                )))
            }
        };
        table_cur.finish()?;

        let mut vel_cur = cur.section()?;
        let velocity = decode_vec_map(&mut vel_cur)?;
        vel_cur.finish()?;

        let mut adamw_cur = cur.section()?;
        let adamw = match adamw_cur.u8()? {
            0 => None,
            1 => {
                let step = adamw_cur.u64()?;
                let len = adamw_cur.u64()? as usize;
                let m = adamw_cur.f32s(len)?;
                let v = adamw_cur.f32s(len)?;
                Some(AdamWState { step, m, v })
            }
            flag => {
                return Err(Error::CheckpointFormat(format!(
                    "bad optimizer presence flag {flag}"
                )))
            }
        };
        adamw_cur.finish()?;
        cur.finish()?;

        let checkpoint = Checkpoint {
            config,
            step,
            network,
            table,
            velocity,
            adamw,
        };
        checkpoint.check_invariants()?;
        Ok(checkpoint)
    }

    fn check_invariants(&self) -> Result<()> {
        let is_p2be = self.config.encoder == EncoderKind::P2be;
        if is_p2be != self.table.is_some() {
            return Err(Error::Config(format!(
                "checkpoint table must be present exactly for the p2be encoder (encoder {}, table {})",
                self.config.encoder,
                if self.table.is_some() { "present" } else { "absent" }
            )));
        }
        if let Some(t) = &self.table {
            if t.m() != self.config.m {
                return Err(Error::Config(format!(
                    "checkpoint table has M={}, config has M={}",
                    t.m(),
                    self.config.m
                )));
            }
        }
        if let Some(state) = &self.adamw {
            if state.m.len() != state.v.len() {
                return Err(Error::Config(
                    "checkpoint optimizer moment lengths disagree".into(),
                ));
            }
        }
        Ok(())
    }
}

fn push_section(out: &mut Vec<u8>, payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_tensor_map(map: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(map.len() as u64).to_le_bytes());
    for (name, tensor) in map {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u64).to_le_bytes());
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        push_f32s(&mut out, tensor.data());
    }
    out
}

fn decode_tensor_map(cur: &mut Cursor) -> Result<BTreeMap<String, Tensor>> {
    let count = cur.u64()? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name = cur.string()?;
        let rank = cur.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let len = shape.iter().product::<usize>();
        let data = cur.f32s(len)?;
        map.insert(name, Tensor::new(shape, data)?);
    }
    Ok(map)
}

fn encode_vec_map(map: &BTreeMap<String, Vec<f32>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(map.len() as u64).to_le_bytes());
    for (name, values) in map {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        push_f32s(&mut out, values);
    }
    out
}

fn decode_vec_map(cur: &mut Cursor) -> Result<BTreeMap<String, Vec<f32>>> {
    let count = cur.u64()? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name = cur.string()?;
        let len = cur.u64()? as usize;
        map.insert(name, cur.f32s(len)?);
    }
    Ok(map)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Cursor { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::CheckpointFormat("truncated checkpoint".into()));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("took 2")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("took 8")))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| {
            Error::CheckpointFormat("element count overflow".into())
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunks of 4")))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::CheckpointFormat("non-UTF8 name".into()))
    }

    /// Reads a length-prefixed section as its own cursor.
    fn section(&mut self) -> Result<Cursor<'a>> {
        let len = self.u64()? as usize;
        Ok(Cursor::new(self.take(len)?))
    }

    fn remainder(&mut self) -> &'a [u8] {
        let out = &self.data[self.pos..];
        self.pos = self.data.len();
        out
    }

    /// Fails unless every byte was consumed.
    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::CheckpointFormat(format!(
                "{} unread bytes",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}
