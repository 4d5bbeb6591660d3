//! `MFCK` calibration checkpoints.
//!
//! Layout (little-endian): magic, u32 version, u64 config hash, u64 step,
//! u32 mode, u32 hidden width, u32 input width, u32 parameter count, float32
//! parameters, u64 render seed, f64 held DFF value, u64 rng seed/key/counter,
//! then CRC32 of everything before it.

use std::path::Path;

use super::calibrator::CalibratorParams;
use super::train::TrainState;
use super::CalibrationMode;
use crate::error::{Error, Result};
use crate::numerics::io::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::numerics::Rng;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MFCK";
const VERSION: u32 = 1;

pub fn encode_checkpoint(config_hash: u64, state: &TrainState) -> Vec<u8> {
    let p = &state.params;
    let flat = p.flatten();
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC).u32(VERSION).u64(config_hash).u64(state.step as u64);
    w.u32(match p.mode {
        CalibrationMode::Calibrator => 0,
        CalibrationMode::Direct => 1,
    });
    w.u32(p.hidden as u32).u32(CalibratorParams::INPUT_DIM as u32);
    w.u32(flat.len() as u32).f32s(flat.iter().map(|&v| v as f32));
    w.u64(p.seed).f64(state.held_dff);
    let (key, counter) = state.rng.state();
    w.u64(state.rng.seed()).u64(key).u64(counter);
    w.crc();
    w.finish()
}

/// Decodes a checkpoint, refusing one written under a different config.
pub fn decode_checkpoint(bytes: &[u8], config_hash: u64) -> Result<TrainState> {
    let mut r = ByteReader::with_crc(bytes)?;
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let hash = r.u64()?;
    if hash != config_hash {
        return Err(Error::config(format!("checkpoint config hash {hash:016x} does not match {config_hash:016x}")));
    }
    let step = r.u64()? as usize;
    let mode = match r.u32()? {
        0 => CalibrationMode::Calibrator,
        1 => CalibrationMode::Direct,
        m => return Err(Error::format(format!("unknown calibration mode {m}"))),
    };
    let hidden = r.u32()? as usize;
    let input = r.u32()? as usize;
    if input != CalibratorParams::INPUT_DIM {
        return Err(Error::format(format!("checkpoint input width {input}, expected {}", CalibratorParams::INPUT_DIM)));
    }
    let n = r.u32()? as usize;
    let flat: Vec<f64> = r.f32s(n)?.into_iter().map(f64::from).collect();
    let seed = r.u64()?;
    let held_dff = r.f64()?;
    let rng = Rng::from_state(r.u64()?, r.u64()?, r.u64()?);
    r.expect_end()?;
    let params = CalibratorParams::unflatten(mode, hidden, seed, &flat)?;
    Ok(TrainState { step, params, held_dff, rng })
}

pub fn write_checkpoint(path: &Path, config_hash: u64, state: &TrainState) -> Result<()> {
    write_atomic(path, &encode_checkpoint(config_hash, state))
}

pub fn read_checkpoint(path: &Path, config_hash: u64) -> Result<TrainState> {
    decode_checkpoint(&read_file(path)?, config_hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::CalibrationConfig;
    use crate::scene::{generate_pairs, SceneConfig};

    fn state() -> TrainState {
        let pairs = generate_pairs(&SceneConfig { pairs: 2, ..SceneConfig::default() }).unwrap();
        let mut s = TrainState::new(&CalibrationConfig::default(), &pairs, Rng::new(4)).unwrap();
        s.step = 17;
        s.held_dff = 0.123;
        s.rng.next();
        s
    }

    #[test]
    fn roundtrip_is_exact() {
        let s = state();
        assert_eq!(decode_checkpoint(&encode_checkpoint(7, &s), 7).unwrap(), s);
    }

    #[test]
    fn rejects_corruption_and_foreign_configs() {
        let s = state();
        let mut bytes = encode_checkpoint(7, &s);
        assert!(matches!(decode_checkpoint(&bytes, 8), Err(Error::Config(_))));
        bytes[30] ^= 1;
        assert!(decode_checkpoint(&bytes, 7).is_err());
        assert!(decode_checkpoint(&bytes[..10], 7).is_err());
    }
}
