//! Binary checkpoint files.
//!
//! Layout (little-endian): magic `HDNC`, `u32` version, `u32` mode tag,
//! 32-byte SHA-256 of the embedded config, `u64` step, `u64` seed, `u32`
//! config length and the config TOML, `u32` section count, then per section
//! a `u16` name length, the name, a `u64` value count and that many `f32`
//! values.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CheckpointError, Error, Result};
use crate::generator::{DomainVector, Generator, LayerLayout};
use crate::hdn::HdnParams;

pub const MAGIC: [u8; 4] = *b"HDNC";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointMode {
    TextDomain,
    OneShotDomain,
    Hdn,
    FullSynthesis,
}

impl CheckpointMode {
    pub fn tag(self) -> u32 {
        match self {
            Self::TextDomain => 0,
            Self::OneShotDomain => 1,
            Self::Hdn => 2,
            Self::FullSynthesis => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Some(match tag {
            0 => Self::TextDomain,
            1 => Self::OneShotDomain,
            2 => Self::Hdn,
            3 => Self::FullSynthesis,
            _ => return None,
        })
    }

    pub fn is_domain_vector(self) -> bool {
        matches!(self, Self::TextDomain | Self::OneShotDomain)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub mode: CheckpointMode,
    pub config_text: String,
    pub step: u64,
    pub seed: u64,
    pub sections: Vec<Section>,
}

const DOMAIN_SECTION: &str = "domain";

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn layout_err(msg: impl Into<String>) -> Error {
    CheckpointError::Layout(msg.into()).into()
}

impl Checkpoint {
    pub fn new(mode: CheckpointMode, config: &RunConfig, step: u64, seed: u64) -> Result<Self> {
        Ok(Self {
            mode,
            config_text: config.to_toml()?,
            step,
            seed,
            sections: Vec::new(),
        })
    }

    pub fn push_section(&mut self, name: &str, values: &[f64]) {
        self.sections.push(Section {
            name: name.to_string(),
            values: to_f32(values),
        });
    }

    pub fn section(&self, name: &str) -> Option<&[f32]> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.values.as_slice())
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.config_text.as_bytes()).into()
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_toml(&self.config_text).map_err(|e| layout_err(format!("embedded config: {e}")))
    }

    pub fn from_domain_vector(
        mode: CheckpointMode,
        config: &RunConfig,
        d: &DomainVector,
        step: u64,
        seed: u64,
    ) -> Result<Self> {
        if !mode.is_domain_vector() {
            return Err(Error::Input(format!(
                "{mode:?} checkpoints do not hold a domain vector"
            )));
        }
        let mut c = Self::new(mode, config, step, seed)?;
        c.push_section(DOMAIN_SECTION, d.values());
        c.validate_layout()?;
        Ok(c)
    }

    pub fn from_hdn(config: &RunConfig, params: &HdnParams, step: u64, seed: u64) -> Result<Self> {
        let mut c = Self::new(CheckpointMode::Hdn, config, step, seed)?;
        for (name, t) in params.tensors() {
            c.push_section(&name, t);
        }
        c.validate_layout()?;
        Ok(c)
    }

    pub fn from_synthesis(config: &RunConfig, gen: &Generator, step: u64, seed: u64) -> Result<Self> {
        let mut c = Self::new(CheckpointMode::FullSynthesis, config, step, seed)?;
        for (name, t) in gen.synthesis_tensors() {
            c.push_section(&name, t);
        }
        c.validate_layout()?;
        Ok(c)
    }

    pub fn domain_vector(&self) -> Result<DomainVector> {
        if !self.mode.is_domain_vector() {
            return Err(Error::Input(format!(
                "{:?} checkpoint holds no domain vector",
                self.mode
            )));
        }
        let layout = LayerLayout::from_config(&self.config()?.generator);
        let v = self
            .section(DOMAIN_SECTION)
            .ok_or_else(|| layout_err("missing domain section"))?;
        DomainVector::from_values(&layout, v.iter().map(|&x| x as f64).collect()).map_err(|e| layout_err(e.to_string()))
    }

    pub fn hdn_params(&self) -> Result<HdnParams> {
        if self.mode != CheckpointMode::Hdn {
            return Err(Error::Input(format!(
                "{:?} checkpoint holds no hypernetwork",
                self.mode
            )));
        }
        let cfg = self.config()?;
        let mut params = HdnParams::new(&cfg.hdn, &LayerLayout::from_config(&cfg.generator))?;
        params
            .set_tensors(|name| self.section(name).map(|v| v.iter().map(|&x| x as f64).collect()))
            .map_err(|e| layout_err(e.to_string()))?;
        Ok(params)
    }

    /// Rebuilds the generator from the embedded config and loads the
    /// fine-tuned synthesis weights.
    pub fn synthesis_generator(&self) -> Result<Generator> {
        if self.mode != CheckpointMode::FullSynthesis {
            return Err(Error::Input(format!(
                "{:?} checkpoint holds no synthesis weights",
                self.mode
            )));
        }
        let mut gen = Generator::new(self.config()?.generator)?;
        let mut flat = Vec::with_capacity(gen.count_parameters().synthesis);
        for (name, t) in gen.synthesis_tensors() {
            let v = self
                .section(&name)
                .ok_or_else(|| layout_err(format!("missing tensor {name}")))?;
            if v.len() != t.len() {
                return Err(layout_err(format!(
                    "tensor {name} has {} values, expected {}",
                    v.len(),
                    t.len()
                )));
            }
            flat.extend(v.iter().map(|&x| x as f64));
        }
        gen.set_synthesis_flat(&flat)?;
        Ok(gen)
    }

    /// Checks that the sections match what the embedded config implies.
    pub fn validate_layout(&self) -> Result<()> {
        let cfg = self.config()?;
        let layout = LayerLayout::from_config(&cfg.generator);
        let expected: Vec<(String, usize)> = match self.mode {
            CheckpointMode::TextDomain | CheckpointMode::OneShotDomain => {
                vec![(DOMAIN_SECTION.to_string(), layout.total_dim())]
            }
            CheckpointMode::Hdn => HdnParams::new(&cfg.hdn, &layout)?
                .tensors()
                .into_iter()
                .map(|(n, t)| (n, t.len()))
                .collect(),
            CheckpointMode::FullSynthesis => Generator::new(cfg.generator.clone())?
                .synthesis_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.len()))
                .collect(),
        };
        let got: Vec<(String, usize)> = self.sections.iter().map(|s| (s.name.clone(), s.values.len())).collect();
        if got != expected {
            return Err(layout_err(format!(
                "{:?} checkpoint has {} sections that do not match the embedded config",
                self.mode,
                got.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.mode.tag().to_le_bytes());
        out.extend_from_slice(&self.digest());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.values.len() as u64).to_le_bytes());
            for v in &s.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes and validates a checkpoint.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::Version("bad magic bytes".into()).into());
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version(format!("unsupported version {version}")).into());
        }
        let tag = r.u32("mode")?;
        let mode =
            CheckpointMode::from_tag(tag).ok_or_else(|| CheckpointError::Corrupt(format!("unknown mode tag {tag}")))?;
        let digest: [u8; 32] = r.take(32, "digest")?.try_into().unwrap();
        let step = r.u64("step")?;
        let seed = r.u64("seed")?;
        let len = r.u32("config length")? as usize;
        let config_text = String::from_utf8(r.take(len, "config")?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("config is not UTF-8".into()))?;
        let count = r.u32("section count")?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let nlen = r.u16("section name length")? as usize;
            let name = String::from_utf8(r.take(nlen, "section name")?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("section name is not UTF-8".into()))?;
            let n = r.u64("section length")?;
            let byte_len = usize::try_from(n)
                .ok()
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CheckpointError::Corrupt("section length overflows".into()))?;
            let raw = r.take(byte_len, "section payload")?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            sections.push(Section { name, values });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)).into());
        }
        let c = Self {
            mode,
            config_text,
            step,
            seed,
            sections,
        };
        if c.digest() != digest {
            return Err(CheckpointError::Corrupt("config digest mismatch".into()).into());
        }
        c.validate_layout()?;
        Ok(c)
    }

    /// Writes through a temporary file in the same directory and renames it
    /// into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&self.to_bytes())?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
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
            .ok_or_else(|| CheckpointError::Truncated(format!("file ends inside {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
