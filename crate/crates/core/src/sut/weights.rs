//! `MFWT` weight files.
//!
//! Layout (little-endian): magic, u32 version, u32 name length, name bytes,
//! u32 kind, u32 input c/h/w, u32 tap count, taps, u32 layer count, per layer
//! u32 code + u32 dim count + dims, then per layer u32 parameter count and
//! float32 parameters, then CRC32 of everything before it.

use std::path::Path;

use super::layers::{Layer, LayerSpec};
use super::network::Network;
use super::{ReferenceSut, SutKind};
use crate::error::{Error, Result};
use crate::numerics::io::{read_file, write_atomic, ByteReader, ByteWriter};

pub const WEIGHT_MAGIC: &[u8; 4] = b"MFWT";
const VERSION: u32 = 1;

pub fn encode_weights(sut: &ReferenceSut) -> Vec<u8> {
    let mut w = ByteWriter::new();
    let net = sut.network();
    let (c, h, wd) = net.input_shape();
    w.bytes(WEIGHT_MAGIC).u32(VERSION);
    w.u32(sut.name().len() as u32).bytes(sut.name().as_bytes());
    w.u32(match sut.kind() {
        SutKind::Steering => 0,
        SutKind::Segmentation => 1,
    });
    w.u32(c as u32).u32(h as u32).u32(wd as u32);
    w.u32(sut.taps().len() as u32);
    for &t in sut.taps() {
        w.u32(t as u32);
    }
    w.u32(net.layers().len() as u32);
    for l in net.layers() {
        let dims = l.spec.header();
        w.u32(l.spec.code()).u32(dims.len() as u32);
        for d in dims {
            w.u32(d);
        }
    }
    for l in net.layers() {
        w.u32(l.params.len() as u32).f32s(l.params.iter().map(|&p| p as f32));
    }
    w.crc();
    w.finish()
}

pub fn decode_weights(bytes: &[u8]) -> Result<ReferenceSut> {
    let mut r = ByteReader::with_crc(bytes)?;
    r.magic(WEIGHT_MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported weight file version {version}")));
    }
    let name_len = r.u32()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::format("SUT name is not UTF-8"))?;
    let kind = match r.u32()? {
        0 => SutKind::Steering,
        1 => SutKind::Segmentation,
        k => return Err(Error::format(format!("unknown SUT kind {k}"))),
    };
    let input = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let n_taps = r.u32()? as usize;
    let taps = (0..n_taps).map(|_| r.u32().map(|t| t as usize)).collect::<Result<Vec<_>>>()?;
    let n_layers = r.u32()? as usize;
    let mut specs = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let code = r.u32()?;
        let nd = r.u32()? as usize;
        if nd > 8 {
            return Err(Error::format(format!("layer header with {nd} dims")));
        }
        let dims = (0..nd).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        specs.push(LayerSpec::from_header(code, &dims)?);
    }
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        let n = r.u32()? as usize;
        if n != spec.param_count() {
            return Err(Error::format(format!("{spec:?} stores {n} parameters, expected {}", spec.param_count())));
        }
        let params = r.f32s(n)?.into_iter().map(f64::from).collect();
        layers.push(Layer::new(spec, params)?);
    }
    r.expect_end()?;
    let net = Network::new(input, layers).map_err(|e| Error::format(format!("inconsistent architecture: {e}")))?;
    ReferenceSut::new(name, kind, net, taps)
}

pub fn write_weights(path: &Path, sut: &ReferenceSut) -> Result<()> {
    write_atomic(path, &encode_weights(sut))
}

pub fn read_weights(path: &Path) -> Result<ReferenceSut> {
    decode_weights(&read_file(path)?)
}
