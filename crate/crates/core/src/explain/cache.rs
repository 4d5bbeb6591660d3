//! Decisive-map cache: in memory behind a read-write lock, optionally
//! mirrored to `MFDM` files.
//!
//! File layout (little-endian): magic, u64 SUT hash, u64 image hash, u64
//! config hash, u32 height, u32 width, float32 full map, 256 float32 pooled
//! values, CRC32.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use log::warn;

use super::{decisive_map, image_hash, sut_hash, CfConfig, DecisiveMap, MapSource};
use crate::error::{Error, Result};
use crate::numerics::io::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::numerics::{pool_to_16x16, Grid, Image, POOL_SIDE};
use crate::sut::ReferenceSut;

pub const MAP_MAGIC: &[u8; 4] = b"MFDM";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MapKey {
    pub sut: u64,
    pub image: u64,
    pub config: u64,
}

impl MapKey {
    fn file_name(&self) -> String {
        format!("{:016x}-{:016x}-{:016x}.mfdm", self.sut, self.image, self.config)
    }
}

pub fn encode_map(map: &DecisiveMap) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAP_MAGIC).u64(map.source.sut).u64(map.source.image).u64(map.source.config);
    w.u32(map.full.height() as u32).u32(map.full.width() as u32);
    w.f32s(map.full.data().iter().map(|&v| v as f32));
    w.f32s(map.pooled.values().iter().map(|&v| v as f32));
    w.crc();
    w.finish()
}

/// Decodes a cache file. The pooled values are recomputed from the full map
/// and must agree with the stored ones.
pub fn decode_map(bytes: &[u8], seeds: Vec<u64>) -> Result<DecisiveMap> {
    let mut r = ByteReader::with_crc(bytes)?;
    r.magic(MAP_MAGIC)?;
    let (sut, image, config) = (r.u64()?, r.u64()?, r.u64()?);
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let full: Vec<f64> = r.f32s(h * w)?.into_iter().map(f64::from).collect();
    let stored = r.f32s(POOL_SIDE * POOL_SIDE)?;
    r.expect_end()?;
    let full = Grid::from_vec(h, w, full)?;
    let pooled = pool_to_16x16(&full)?;
    if pooled.values().iter().zip(&stored).any(|(a, b)| *a as f32 != *b) {
        return Err(Error::format("pooled map disagrees with full map"));
    }
    Ok(DecisiveMap { full, pooled, source: MapSource { sut, image, config, seeds } })
}

/// Shared cache; concurrent readers, exclusive writers.
#[derive(Debug, Default)]
pub struct MapCache {
    dir: Option<PathBuf>,
    mem: RwLock<HashMap<MapKey, DecisiveMap>>,
}

impl MapCache {
    pub fn in_memory() -> Self {
        MapCache::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(MapCache { dir: Some(dir), mem: RwLock::default() })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn len(&self) -> usize {
        self.mem.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn key(sut: &ReferenceSut, x: &Image, cfg: &CfConfig) -> MapKey {
        MapKey { sut: sut_hash(sut), image: image_hash(x), config: cfg.hash() }
    }

    fn load(&self, key: &MapKey, cfg: &CfConfig) -> Option<DecisiveMap> {
        let path = self.dir.as_ref()?.join(key.file_name());
        if !path.exists() {
            return None;
        }
        let decoded = read_file(&path).and_then(|b| decode_map(&b, cfg.seeds()));
        match decoded {
            Ok(m) if m.source.sut == key.sut && m.source.image == key.image && m.source.config == key.config => Some(m),
            Ok(_) => {
                warn!("cache entry {} has a mismatched key; recomputing", path.display());
                None
            }
            Err(e) => {
                warn!("corrupt cache entry {}: {e}; recomputing", path.display());
                None
            }
        }
    }

    /// Returns the cached map or computes, stores and returns it.
    pub fn get_or_compute(&self, sut: &ReferenceSut, x: &Image, cfg: &CfConfig) -> Result<DecisiveMap> {
        let key = MapCache::key(sut, x, cfg);
        if let Some(m) = self.mem.read().expect("cache lock").get(&key) {
            return Ok(m.clone());
        }
        let map = match self.load(&key, cfg) {
            Some(m) => m,
            None => {
                let m = decisive_map(sut, x, cfg)?;
                if let Some(dir) = &self.dir {
                    write_atomic(&dir.join(key.file_name()), &encode_map(&m))?;
                }
                m
            }
        };
        self.mem.write().expect("cache lock").insert(key, map.clone());
        Ok(map)
    }
}
