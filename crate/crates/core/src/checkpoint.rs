//! Versioned binary snapshot of the six learner networks.
//!
//! Layout (little-endian):
//! `b"SWNVCKPT"`, `u32` version, `u32` network count, then per network a
//! `u32` layer count, that many `u32` widths, a `u8` output tag (0 linear,
//! 1 tanh) and an `f64` output scale; then every network's parameters as
//! `f64` in the same order; finally `u64` learn steps and `u64` exploration
//! episode index.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::nn::{DenseNet, OutputActivation};
use crate::td3::Td3Agent;

pub const MAGIC: &[u8; 8] = b"SWNVCKPT";
pub const VERSION: u32 = 1;
const NETWORKS: usize = 6;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
    #[error("checkpoint network {index} has dims {found:?}, learner expects {expected:?}")]
    ShapeMismatch {
        index: usize,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub networks: Vec<DenseNet>,
    pub learn_steps: u64,
    pub episode: u64,
}

impl Checkpoint {
    pub fn capture(agent: &Td3Agent, episode: u64) -> Self {
        Checkpoint {
            networks: agent.networks().into_iter().cloned().collect(),
            learn_steps: agent.learn_steps(),
            episode,
        }
    }

    /// Copies the stored parameters into a learner of identical shape.
    pub fn restore(&self, agent: &mut Td3Agent) -> Result<(), CheckpointError> {
        for (index, (dst, src)) in agent.networks().into_iter().zip(&self.networks).enumerate() {
            if dst.dims() != src.dims() {
                return Err(CheckpointError::ShapeMismatch {
                    index,
                    found: src.dims().to_vec(),
                    expected: dst.dims().to_vec(),
                });
            }
        }
        for (dst, src) in agent.networks_mut().into_iter().zip(&self.networks) {
            dst.set_params(src.params()).expect("dims checked");
        }
        agent.set_learn_steps(self.learn_steps);
        Ok(())
    }

    /// Hidden widths of the stored actor, for rebuilding a matching learner.
    pub fn hidden_widths(&self) -> Vec<usize> {
        let dims = self.networks[0].dims();
        dims[1..dims.len() - 1].to_vec()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.networks.len() as u32).to_le_bytes());
        for net in &self.networks {
            out.extend_from_slice(&(net.dims().len() as u32).to_le_bytes());
            for &d in net.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let (tag, scale) = match net.output_activation() {
                OutputActivation::Linear => (0u8, 1.0),
                OutputActivation::Tanh { scale } => (1u8, scale),
            };
            out.push(tag);
            out.extend_from_slice(&f64::to_le_bytes(scale));
        }
        for net in &self.networks {
            for p in net.params() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.learn_steps.to_le_bytes());
        out.extend_from_slice(&self.episode.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()? as usize;
        if count != NETWORKS {
            return Err(CheckpointError::Malformed(format!("expected {NETWORKS} networks, found {count}")));
        }
        let mut networks = Vec::with_capacity(count);
        for _ in 0..count {
            let layers = r.u32()? as usize;
            if !(2..=64).contains(&layers) {
                return Err(CheckpointError::Malformed(format!("implausible layer count {layers}")));
            }
            let dims = (0..layers).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let output = match r.u8()? {
                0 => {
                    r.f64()?;
                    OutputActivation::Linear
                }
                1 => OutputActivation::Tanh { scale: r.f64()? },
                t => return Err(CheckpointError::Malformed(format!("unknown output tag {t}"))),
            };
            let net = DenseNet::zeros(&dims, output).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            networks.push(net);
        }
        for net in &mut networks {
            for p in net.params_mut() {
                *p = r.f64()?;
            }
        }
        let learn_steps = r.u64()?;
        let episode = r.u64()?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            networks,
            learn_steps,
            episode,
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Malformed(format!("truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
