//! Versioned little-endian checkpoint format.
//!
//! ```text
//! magic   8 bytes  "PHSICKPT"
//! version u32
//! then sections, each: tag [u8; 4], length u64, payload
//!   CONF  network configuration as UTF-8 JSON
//!   RNG_  seed u64, stream u64, word position u128
//!   EPOC  completed epochs u64
//!   MATS  count u32, then per matrix rows u64, cols u64, rows*cols f64
//! ```
//! Matrices are stored in the order: hidden weights, hidden velocities,
//! readout weights, readout velocity, readout bias (1 x n), bias velocity.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig, Readout};
use crate::numerics::{Matrix, Rng};
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 8] = b"PHSICKPT";
pub const VERSION: u32 = 1;

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for x in m.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    section(&mut out, b"CONF", serde_json::to_string(&state.net.config)?.as_bytes());

    let mut rng = Vec::with_capacity(32);
    rng.extend_from_slice(&state.rng.seed().to_le_bytes());
    rng.extend_from_slice(&state.rng.stream().to_le_bytes());
    rng.extend_from_slice(&state.rng.word_pos().to_le_bytes());
    section(&mut out, b"RNG_", &rng);
    section(&mut out, b"EPOC", &(state.epochs_done as u64).to_le_bytes());

    let net = &state.net;
    let bias = Matrix::new(1, net.readout.bias.len(), net.readout.bias.clone())?;
    let bias_v = Matrix::new(1, state.readout_bias_velocity.len(), state.readout_bias_velocity.clone())?;
    let mats: Vec<&Matrix> = net
        .weights
        .iter()
        .chain(&state.velocity)
        .chain([&net.readout.weights, &state.readout_velocity, &bias, &bias_v])
        .collect();
    let mut payload = Vec::new();
    payload.extend_from_slice(&(mats.len() as u32).to_le_bytes());
    for m in mats {
        put_matrix(&mut payload, m);
    }
    section(&mut out, b"MATS", &payload);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CheckpointCorrupt(format!("{what}: needs {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
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

    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::CheckpointCorrupt("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    let mut config: Option<NetworkConfig> = None;
    let mut rng = None;
    let mut epochs = None;
    let mut mats = None;
    while !r.done() {
        let tag: [u8; 4] = r.take(4, "section tag")?.try_into().unwrap();
        let len = usize::try_from(r.u64("section length")?).map_err(|_| Error::CheckpointCorrupt("section length".into()))?;
        let payload = r.take(len, "section payload")?;
        let mut p = Reader { bytes: payload, pos: 0 };
        match &tag {
            b"CONF" => {
                let s = std::str::from_utf8(payload).map_err(|_| Error::CheckpointCorrupt("config is not UTF-8".into()))?;
                config = Some(serde_json::from_str(s).map_err(|e| Error::CheckpointCorrupt(format!("config: {e}")))?);
            }
            b"RNG_" => {
                let seed = p.u64("rng seed")?;
                let stream = p.u64("rng stream")?;
                let pos = p.u128("rng position")?;
                rng = Some(Rng::restore(seed, stream, pos));
            }
            b"EPOC" => epochs = Some(p.u64("epoch")? as usize),
            b"MATS" => {
                let n = p.u32("matrix count")? as usize;
                let mut v = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    let rows = p.u64("matrix rows")? as usize;
                    let cols = p.u64("matrix cols")? as usize;
                    let count = rows.checked_mul(cols).and_then(|c| c.checked_mul(8)).ok_or_else(|| Error::CheckpointCorrupt("matrix size".into()))?;
                    let raw = p.take(count, "matrix data")?;
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    v.push(Matrix::new(rows, cols, data)?);
                }
                mats = Some(v);
            }
            _ => return Err(Error::CheckpointCorrupt(format!("unknown section {:?}", String::from_utf8_lossy(&tag)))),
        }
        if !p.done() && &tag != b"CONF" {
            return Err(Error::CheckpointCorrupt(format!("trailing bytes in section {}", String::from_utf8_lossy(&tag))));
        }
    }
    let missing = |s: &str| Error::CheckpointCorrupt(format!("missing section {s}"));
    let config = config.ok_or_else(|| missing("CONF"))?;
    let rng = rng.ok_or_else(|| missing("RNG_"))?;
    let epochs_done = epochs.ok_or_else(|| missing("EPOC"))?;
    let mut mats = mats.ok_or_else(|| missing("MATS"))?;
    let h = config.hidden_widths.len();
    if mats.len() != 2 * h + 4 {
        return Err(Error::CheckpointCorrupt(format!("expected {} matrices, found {}", 2 * h + 4, mats.len())));
    }
    let bias_v = mats.pop().unwrap().into_data();
    let bias = mats.pop().unwrap().into_data();
    let readout_velocity = mats.pop().unwrap();
    let readout_weights = mats.pop().unwrap();
    let velocity = mats.split_off(h);
    let net = Network::from_parts(config, mats, Readout { weights: readout_weights, bias })
        .map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
    for (w, v) in net.weights.iter().zip(&velocity) {
        if w.shape() != v.shape() {
            return Err(Error::CheckpointCorrupt("velocity shape".into()));
        }
    }
    if readout_velocity.shape() != net.readout.weights.shape() || bias_v.len() != net.readout.bias.len() {
        return Err(Error::CheckpointCorrupt("readout velocity shape".into()));
    }
    Ok(TrainState { net, velocity, readout_velocity, readout_bias_velocity: bias_v, rng, epochs_done })
}

/// Writes via a temporary file and rename so an interrupted save never
/// leaves a half-written checkpoint.
pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode(state)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
