//! The FSKP container.
//!
//! ```text
//! "FSKP" | version u32 | step u64
//! n_meta u32 | n_meta × (key str, value str)
//! n_tensors u32 | n_tensors × (name str, rank u32, rank × u64 dims, f64 data)
//! ```
//!
//! All integers and floats are little-endian; strings are a u32 byte length
//! followed by UTF-8.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::featurizer::DistributionStats;
use crate::numerics::{Grid, ParamStore};

pub const MAGIC: &[u8; 4] = b"FSKP";
pub const VERSION: u32 = 1;

const STATS_MEAN: &str = "stats.mean";
const STATS_ROTATION: &str = "stats.rotation";
const STATS_SCALE: &str = "stats.scale";

/// Hex SHA-256 of a configuration's JSON text.
pub fn config_digest(config_json: &str) -> String {
    Sha256::digest(config_json.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_json: String,
    pub params: ParamStore,
    pub stats: DistributionStats,
}

impl Checkpoint {
    pub fn config_digest(&self) -> String {
        config_digest(&self.config_json)
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&self.step.to_le_bytes())?;
        let meta = [
            ("config_digest", self.config_digest()),
            ("config", self.config_json.clone()),
        ];
        out.write_all(&(meta.len() as u32).to_le_bytes())?;
        for (k, v) in &meta {
            write_str(&mut out, k)?;
            write_str(&mut out, v)?;
        }
        let c = self.stats.channels();
        let stats = [
            (STATS_MEAN.to_string(), Grid::vector(self.stats.mean.clone())),
            (STATS_ROTATION.to_string(), self.stats.rotation.clone()),
            (STATS_SCALE.to_string(), Grid::scalar(self.stats.scale)),
        ];
        debug_assert_eq!(stats[1].1.len(), c * c);
        let n = self.params.len() + stats.len();
        out.write_all(&(n as u32).to_le_bytes())?;
        for (name, g) in stats.iter().map(|(n, g)| (n.as_str(), g)).chain(
            self.params.iter().map(|(n, p)| (n, &p.value)),
        ) {
            write_str(&mut out, name)?;
            let (h, w, c) = g.shape();
            out.write_all(&3u32.to_le_bytes())?;
            for d in [h, w, c] {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(g.len() * 8);
            for v in g.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        ensure!(
            &magic == MAGIC,
            Error::Format(format!("bad magic bytes {magic:?}"))
        );
        let version = read_u32(&mut input)?;
        ensure!(
            version == VERSION,
            Error::VersionMismatch {
                found: version,
                expected: VERSION,
            }
        );
        let step = read_u64(&mut input)?;
        let mut config_json = None;
        let mut digest = None;
        for _ in 0..read_u32(&mut input)? {
            let k = read_str(&mut input)?;
            let v = read_str(&mut input)?;
            match k.as_str() {
                "config" => config_json = Some(v),
                "config_digest" => digest = Some(v),
                _ => log::warn!("ignoring unknown checkpoint metadata '{k}'"),
            }
        }
        let config_json = config_json.ok_or_else(|| Error::Format("missing config metadata".into()))?;
        if let Some(d) = digest {
            ensure!(
                d == config_digest(&config_json),
                Error::Format("config digest does not match the stored config".into())
            );
        }
        let mut params = ParamStore::new();
        let (mut mean, mut rotation, mut scale) = (None, None, None);
        for _ in 0..read_u32(&mut input)? {
            let name = read_str(&mut input)?;
            let rank = read_u32(&mut input)?;
            ensure!(
                rank == 3,
                Error::Format(format!("tensor '{name}' has rank {rank}, expected 3"))
            );
            let dims = [read_u64(&mut input)?, read_u64(&mut input)?, read_u64(&mut input)?];
            let n = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d));
            let n = n.filter(|&n| n < (1 << 32)).ok_or_else(|| {
                Error::Format(format!("tensor '{name}' has implausible shape {dims:?}"))
            })? as usize;
            let mut bytes = vec![0u8; n * 8];
            input.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let g = Grid::from_vec(dims[0] as usize, dims[1] as usize, dims[2] as usize, data)?;
            match name.as_str() {
                STATS_MEAN => mean = Some(g.into_data()),
                STATS_ROTATION => rotation = Some(g),
                STATS_SCALE => scale = Some(g.item()),
                _ => params.insert(name, g),
            }
        }
        let missing = || Error::Format("checkpoint lacks normalization statistics".into());
        Ok(Self {
            step,
            config_json,
            params,
            stats: DistributionStats {
                mean: mean.ok_or_else(missing)?,
                rotation: rotation.ok_or_else(missing)?,
                scale: scale.ok_or_else(missing)?,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn write_str(out: &mut impl Write, s: &str) -> Result<()> {
    out.write_all(&(s.len() as u32).to_le_bytes())?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(input: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(input: &mut impl Read) -> Result<String> {
    let n = read_u32(input)? as usize;
    let mut b = vec![0u8; n];
    input.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Format(format!("invalid UTF-8 in checkpoint: {e}")))
}
