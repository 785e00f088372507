//! Versioned binary checkpoints.
//!
//! Layout: the 8 magic bytes `HILOCKPT`, a little-endian `u32` format version,
//! a `u32` section count, then sections of a 4-byte tag, a `u64` length and
//! the payload. Sections appear in a fixed order, so loading and re-saving a
//! file reproduces it byte for byte. A JSON sidecar (`<file>.meta.json`)
//! summarises the checkpoint for humans.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::ars::{ArsState, IterationRecord};
use crate::config::RunConfig;
use crate::policy::{ObsNorm, PolicyArch, PolicyParams};
use crate::stats::RunningStats;

pub const MAGIC: &[u8; 8] = b"HILOCKPT";
pub const FORMAT_VERSION: u32 = 1;
/// Log records kept inside a checkpoint.
pub const LOG_TAIL: usize = 20;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (bad magic bytes)")]
    Magic,
    #[error("checkpoint format version {found} is not supported (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Policy template: architecture, HL/LL values, freeze flag, normaliser.
    pub params: PolicyParams,
    pub ars: ArsState,
    pub obs_stats: Option<RunningStats>,
    pub episodes: u64,
    pub steps: u64,
    /// Most recent log records, wall clock zeroed so checkpoints stay deterministic.
    pub log_tail: Vec<IterationRecord>,
}

#[derive(Debug, Serialize)]
struct Meta<'a> {
    format_version: u32,
    task: &'a str,
    seed: u64,
    iteration: u64,
    episodes: u64,
    steps: u64,
    hl_params: usize,
    ll_params: usize,
    freeze_ll: bool,
    obs_norm: bool,
    best_return: Option<f64>,
    last_mean_return: Option<f64>,
    last_eval_return: Option<f64>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }

    fn f32s(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(corrupt(format!("section {} is truncated", self.what)));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, width: usize) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|n| n.saturating_mul(width) <= self.buf.len())
            .ok_or_else(|| corrupt(format!("section {}: bad length {n}", self.what)))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        Ok(self.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.len(4)?;
        Ok(self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn finish(self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(corrupt(format!("section {} has {} trailing bytes", self.what, self.buf.len())))
        }
    }
}

const TAGS: [&[u8; 4]; 9] = [b"CONF", b"ARCH", b"PHL ", b"PLL ", b"FRZ ", b"NORM", b"ARST", b"OBST", b"LOGT"];

impl Checkpoint {
    pub fn iteration(&self) -> u64 {
        self.ars.iteration
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sections: Vec<(&[u8; 4], Vec<u8>)> = Vec::new();
        sections.push((b"CONF", self.config.to_toml().into_bytes()));
        sections.push((b"ARCH", serde_json::to_vec(&self.params.arch).expect("arch serialises")));
        let mut w = Writer(Vec::new());
        w.f32s(&self.params.theta_hl);
        sections.push((b"PHL ", w.0));
        let mut w = Writer(Vec::new());
        w.f32s(&self.params.theta_ll);
        sections.push((b"PLL ", w.0));
        sections.push((b"FRZ ", vec![u8::from(self.params.freeze_ll)]));
        if let Some(norm) = &self.params.obs_norm {
            let mut w = Writer(Vec::new());
            w.f32s(&norm.mean);
            w.f32s(&norm.inv_std);
            sections.push((b"NORM", w.0));
        }
        let mut w = Writer(Vec::new());
        w.u64(self.ars.iteration);
        w.u64(self.ars.rng_seed);
        w.0.extend_from_slice(&self.ars.best_return_so_far.to_bits().to_le_bytes());
        w.u64(self.episodes);
        w.u64(self.steps);
        w.f64s(&self.ars.theta);
        w.0.extend(self.ars.frozen.iter().map(|&f| u8::from(f)));
        sections.push((b"ARST", w.0));
        if let Some(stats) = &self.obs_stats {
            let mut w = Writer(Vec::new());
            w.u64(stats.count);
            w.f64s(&stats.mean);
            w.f64s(&stats.m2);
            sections.push((b"OBST", w.0));
        }
        let mut log = Vec::new();
        for r in &self.log_tail {
            serde_json::to_writer(&mut log, r).expect("record serialises");
            log.push(b'\n');
        }
        sections.push((b"LOGT", log));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (tag, body) in sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(body.len() as u64).to_le_bytes());
            out.extend_from_slice(&body);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version, expected: FORMAT_VERSION });
        }
        let count = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let mut rest = &bytes[16..];
        let mut sections: Vec<(&[u8], &[u8])> = Vec::with_capacity(count);
        for _ in 0..count {
            if rest.len() < 12 {
                return Err(corrupt("truncated section header"));
            }
            let tag = &rest[..4];
            let len = u64::from_le_bytes(rest[4..12].try_into().expect("8 bytes"));
            let len = usize::try_from(len)
                .ok()
                .filter(|&l| l <= rest.len() - 12)
                .ok_or_else(|| corrupt("section overruns file"))?;
            sections.push((tag, &rest[12..12 + len]));
            rest = &rest[12 + len..];
        }
        if !rest.is_empty() {
            return Err(corrupt("trailing bytes after the last section"));
        }
        let mut expected = TAGS.iter().filter(|t| {
            !((**t == b"NORM" && !sections.iter().any(|s| s.0 == b"NORM"))
                || (**t == b"OBST" && !sections.iter().any(|s| s.0 == b"OBST")))
        });
        for (tag, _) in &sections {
            if expected.next().is_none_or(|t| &t[..] != *tag) {
                return Err(corrupt(format!("unexpected section {:?}", String::from_utf8_lossy(tag))));
            }
        }
        if expected.next().is_some() {
            return Err(corrupt("missing sections"));
        }
        let get =
            |tag: &[u8; 4], what: &'static str| sections.iter().find(|s| s.0 == tag).map(|s| Reader { buf: s.1, what });
        let section = |tag: &[u8; 4], what: &'static str| get(tag, what).expect("presence checked");

        let conf = std::str::from_utf8(section(b"CONF", "CONF").buf).map_err(|e| corrupt(e.to_string()))?;
        let config = RunConfig::from_toml_str(conf).map_err(|e| corrupt(format!("config: {e}")))?;
        let arch: PolicyArch =
            serde_json::from_slice(section(b"ARCH", "ARCH").buf).map_err(|e| corrupt(format!("arch: {e}")))?;
        let mut r = section(b"PHL ", "PHL");
        let theta_hl = r.f32s()?;
        r.finish()?;
        let mut r = section(b"PLL ", "PLL");
        let theta_ll = r.f32s()?;
        r.finish()?;
        let freeze_ll = match section(b"FRZ ", "FRZ").buf {
            [0] => false,
            [1] => true,
            _ => return Err(corrupt("bad freeze flag")),
        };
        let obs_norm = match get(b"NORM", "NORM") {
            None => None,
            Some(mut r) => {
                let mean = r.f32s()?;
                let inv_std = r.f32s()?;
                r.finish()?;
                Some(ObsNorm { mean, inv_std })
            }
        };
        let params = PolicyParams { arch, theta_hl, theta_ll, freeze_ll, obs_norm };
        if params.arch.hl_param_count() != params.theta_hl.len()
            || params.arch.ll_param_count() != params.theta_ll.len()
        {
            return Err(corrupt("parameter vectors do not match the architecture"));
        }

        let mut r = section(b"ARST", "ARST");
        let iteration = r.u64()?;
        let rng_seed = r.u64()?;
        let best_return_so_far = f64::from_bits(r.u64()?);
        let episodes = r.u64()?;
        let steps = r.u64()?;
        let theta = r.f64s()?;
        let frozen = r.take(theta.len())?.iter().map(|&b| b != 0).collect();
        r.finish()?;
        if theta.len() != params.param_count() {
            return Err(corrupt("optimizer state does not match the architecture"));
        }
        let ars = ArsState { theta, frozen, iteration, rng_seed, best_return_so_far };

        let obs_stats = match get(b"OBST", "OBST") {
            None => None,
            Some(mut r) => {
                let count = r.u64()?;
                let mean = r.f64s()?;
                let m2 = r.f64s()?;
                r.finish()?;
                Some(RunningStats { count, mean, m2 })
            }
        };
        let log = std::str::from_utf8(section(b"LOGT", "LOGT").buf).map_err(|e| corrupt(e.to_string()))?;
        let log_tail = log
            .lines()
            .map(|l| serde_json::from_str(l).map_err(|e| corrupt(format!("log tail: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self { config, params, ars, obs_stats, episodes, steps, log_tail })
    }

    pub fn meta_path(path: &Path) -> PathBuf {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".meta.json");
        path.with_file_name(name)
    }

    pub fn meta_json(&self) -> String {
        let last = self.log_tail.last();
        let meta = Meta {
            format_version: FORMAT_VERSION,
            task: self.config.task.name(),
            seed: self.config.seed,
            iteration: self.ars.iteration,
            episodes: self.episodes,
            steps: self.steps,
            hl_params: self.params.theta_hl.len(),
            ll_params: self.params.theta_ll.len(),
            freeze_ll: self.params.freeze_ll,
            obs_norm: self.params.obs_norm.is_some(),
            best_return: self.ars.best_return_so_far.is_finite().then_some(self.ars.best_return_so_far),
            last_mean_return: last.map(|r| r.mean_return),
            last_eval_return: last.and_then(|r| r.eval_return),
        };
        let mut s = serde_json::to_string_pretty(&meta).expect("meta serialises");
        s.push('\n');
        s
    }

    /// Write the checkpoint and its sidecar, each through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())?;
        write_atomic(&Self::meta_path(path), self.meta_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.into(), source })?;
        Self::from_bytes(&bytes)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| CheckpointError::Io { path: path.into(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(io)
}
