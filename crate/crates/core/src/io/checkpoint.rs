//! Binary scene checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "GENIECKP" | version: u32 | section count: u32 | crc32 of the previous 16 bytes
//! per section: tag: [u8; 4] | length: u64 | payload | crc32 of payload
//! ```
//!
//! Sections: `CFG ` (run config as JSON), `GRID`, `NET `, `GAUS`, and an
//! optional `OPTM` holding optimizer state for resuming.

use std::path::Path;

use thiserror::Error;

use crate::config::RunConfig;
use crate::error::{GenieError, Result};
use crate::field::FieldNetwork;
use crate::hashgrid::HashGrid;
use crate::io::bytes::{ByteReader, ByteWriter};
use crate::render::{render_image, Image, RenderConfig};
use crate::rtgps::ProximityIndex;
use crate::scene::{Camera, Gaussian, GaussianSet};
use crate::splash::{FeatureMode, SplashConfig};
use crate::trainer::OptimizerState;

pub const MAGIC: &[u8; 8] = b"GENIECKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads {supported})")]
    Version { found: u32, supported: u32 },
    #[error("file is truncated")]
    Truncated,
    #[error("checksum mismatch in section {section}")]
    Checksum { section: String },
    #[error("malformed section {section}: {message}")]
    Malformed { section: String, message: String },
    #[error("missing section {0}")]
    MissingSection(&'static str),
}

impl CheckpointError {
    /// Section the error refers to, if any.
    pub fn section(&self) -> Option<&str> {
        match self {
            CheckpointError::Checksum { section } | CheckpointError::Malformed { section, .. } => {
                Some(section)
            }
            CheckpointError::MissingSection(s) => Some(s),
            _ => None,
        }
    }
}

/// Everything persisted about a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub config: RunConfig,
    pub grid: HashGrid,
    pub net: FieldNetwork,
    pub set: GaussianSet,
    pub optimizer: Option<OptimizerState>,
}

impl SceneBundle {
    /// Baked when every Gaussian carries a frozen feature.
    pub fn natural_mode(&self) -> FeatureMode {
        if !self.set.is_empty() && self.set.gaussians().iter().all(|g| g.baked) {
            FeatureMode::Baked
        } else {
            FeatureMode::Live
        }
    }

    /// Splash settings for rendering, in `mode` or the natural mode.
    pub fn render_splash(&self, mode: Option<FeatureMode>) -> SplashConfig {
        SplashConfig {
            mode: mode.unwrap_or_else(|| self.natural_mode()),
            ..self.config.splash.clone()
        }
    }

    pub fn build_index(&self) -> Result<Option<ProximityIndex>> {
        if self.set.is_empty() {
            return Ok(None);
        }
        self.config.splash.build_index(&self.set).map(Some)
    }

    pub fn render(
        &self,
        camera: &Camera,
        index: Option<&ProximityIndex>,
        splash: &SplashConfig,
        render: &RenderConfig,
    ) -> Result<Image> {
        render_image(camera, &self.set, index, &self.grid, &self.net, splash, render)
    }
}

fn malformed(section: &str, message: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed {
        section: section.trim_end().to_string(),
        message: message.into(),
    }
}

fn encode_grid(grid: &HashGrid) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u32(grid.tables().len() as u32);
    for t in grid.tables() {
        w.f64s(t);
    }
    w.buf
}

fn encode_gaussians(set: &GaussianSet) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u64(set.epoch());
    w.u64(set.len() as u64);
    let dim = set.gaussians().first().map_or(0, |g| g.feature.len());
    w.u32(dim as u32);
    for g in set.gaussians() {
        w.vec3(&g.mean);
        w.vec3(&g.log_scale);
        assert_eq!(g.feature.len(), dim, "feature length differs between gaussians");
        for v in &g.feature {
            w.f64(*v);
        }
        w.f64(g.confidence);
        w.u8(g.baked as u8);
    }
    w.buf
}

fn decode_gaussians(data: &[u8]) -> Option<GaussianSet> {
    let mut r = ByteReader::new(data);
    let epoch = r.u64()?;
    let n = usize::try_from(r.u64()?).ok()?;
    let dim = r.u32()? as usize;
    let per = 8 * (7 + dim) + 1;
    if n.checked_mul(per)? > data.len() {
        return None;
    }
    let mut gs = Vec::with_capacity(n);
    for _ in 0..n {
        let mean = r.vec3()?;
        let log_scale = r.vec3()?;
        let feature = (0..dim).map(|_| r.f64()).collect::<Option<Vec<_>>>()?;
        let confidence = r.f64()?;
        let baked = r.u8()? != 0;
        gs.push(Gaussian {
            mean,
            log_scale,
            feature,
            confidence,
            baked,
        });
    }
    r.is_done().then(|| GaussianSet::with_epoch(gs, epoch))
}

pub fn encode(bundle: &SceneBundle) -> Vec<u8> {
    let cfg = serde_json::to_vec(&bundle.config).expect("config serializes");
    let mut net = ByteWriter::new();
    net.f64s(bundle.net.params());
    let mut sections: Vec<(&[u8; 4], Vec<u8>)> = vec![
        (b"CFG ", cfg),
        (b"GRID", encode_grid(&bundle.grid)),
        (b"NET ", net.buf),
        (b"GAUS", encode_gaussians(&bundle.set)),
    ];
    if let Some(opt) = &bundle.optimizer {
        sections.push((b"OPTM", opt.to_bytes()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    for (tag, payload) in sections {
        out.extend_from_slice(tag);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    }
    out
}

/// Splits a checkpoint into verified `(tag, payload)` sections.
fn sections(data: &[u8]) -> std::result::Result<Vec<([u8; 4], &[u8])>, CheckpointError> {
    let mut r = ByteReader::new(data);
    let magic = r.take(8).ok_or(CheckpointError::Truncated)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32().ok_or(CheckpointError::Truncated)?;
    let count = r.u32().ok_or(CheckpointError::Truncated)?;
    let crc = r.u32().ok_or(CheckpointError::Truncated)?;
    if crc != crc32fast::hash(&data[..16]) {
        return Err(CheckpointError::Checksum {
            section: "header".into(),
        });
    }
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: VERSION,
        });
    }
    let mut out = Vec::new();
    for _ in 0..count {
        let tag: [u8; 4] = r.take(4).ok_or(CheckpointError::Truncated)?.try_into().unwrap();
        let len = r.u64().ok_or(CheckpointError::Truncated)?;
        let len = usize::try_from(len).map_err(|_| CheckpointError::Truncated)?;
        let payload = r.take(len).ok_or(CheckpointError::Truncated)?;
        let crc = r.u32().ok_or(CheckpointError::Truncated)?;
        if crc != crc32fast::hash(payload) {
            return Err(CheckpointError::Checksum {
                section: String::from_utf8_lossy(&tag).trim_end().to_string(),
            });
        }
        out.push((tag, payload));
    }
    if !r.is_done() {
        return Err(malformed("file", "trailing bytes after last section"));
    }
    Ok(out)
}

pub fn decode(data: &[u8]) -> std::result::Result<SceneBundle, CheckpointError> {
    let secs = sections(data)?;
    let find = |tag: &'static [u8; 4]| {
        secs.iter()
            .find(|(t, _)| t == tag)
            .map(|(_, p)| *p)
            .ok_or(CheckpointError::MissingSection(std::str::from_utf8(tag).unwrap().trim_end()))
    };
    let config: RunConfig =
        serde_json::from_slice(find(b"CFG ")?).map_err(|e| malformed("CFG", e.to_string()))?;

    let mut r = ByteReader::new(find(b"GRID")?);
    let levels = r.u32().ok_or_else(|| malformed("GRID", "short"))?;
    let tables = (0..levels)
        .map(|_| r.f64s())
        .collect::<Option<Vec<_>>>()
        .filter(|_| r.is_done())
        .ok_or_else(|| malformed("GRID", "short or trailing data"))?;
    let grid = HashGrid::from_tables(config.grid.clone(), tables)
        .map_err(|e| malformed("GRID", e.to_string()))?;

    let mut r = ByteReader::new(find(b"NET ")?);
    let params = r
        .f64s()
        .filter(|_| r.is_done())
        .ok_or_else(|| malformed("NET", "short or trailing data"))?;
    let net = FieldNetwork::from_params(grid.output_dim(), config.field.clone(), params)
        .map_err(|e| malformed("NET", e.to_string()))?;

    let set = decode_gaussians(find(b"GAUS")?).ok_or_else(|| malformed("GAUS", "short or trailing data"))?;
    if let Some(g) = set.gaussians().iter().find(|g| g.feature.len() != grid.output_dim()) {
        return Err(malformed(
            "GAUS",
            format!("feature length {} does not match grid output {}", g.feature.len(), grid.output_dim()),
        ));
    }
    let optimizer = match find(b"OPTM") {
        Ok(p) => Some(OptimizerState::from_bytes(p).ok_or_else(|| malformed("OPTM", "inconsistent"))?),
        Err(_) => None,
    };
    Ok(SceneBundle {
        config,
        grid,
        net,
        set,
        optimizer,
    })
}

pub fn save_checkpoint(bundle: &SceneBundle, path: &Path) -> Result<()> {
    let bytes = encode(bundle);
    // write then rename so readers never observe a partial file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| GenieError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| GenieError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<SceneBundle> {
    let bytes = std::fs::read(path).map_err(|e| GenieError::io(path, e))?;
    Ok(decode(&bytes)?)
}
