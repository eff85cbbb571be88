//! INI experiment configuration.
//!
//! Every key is optional except where a command needs it; unknown sections
//! and keys are rejected so typos surface as errors. Relative paths resolve
//! against the directory of the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cemdg::assembly::DEFAULT_GAMMA;
use cemdg::cem::DEFAULT_GLOBAL_CAP;
use cemdg::diagnostics::EnergyMetric;
use cemdg::medium::{MediumSpec, Pattern, RasterFormat, SyntheticSpec};
use cemdg::saddle::SaddleMethod;
use cemdg::spectral::DEFAULT_MODES_PER_BLOCK;
use cemdg::wavesim::{
    InitOptions, InitProjection, InitStiffness, Ricker, Source, SpatialSign, DEFAULT_F0, DEFAULT_FINAL_TIME,
    DEFAULT_SOURCE_WIDTH, DEFAULT_TAU,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("{0} is required")]
    Missing(String),
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Oversampling width: fixed, or `round(4 log(1/H)/log 8)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MChoice {
    Fixed(usize),
    Schedule,
}

impl MChoice {
    pub fn resolve(self, coarse_size: f64) -> usize {
        match self {
            MChoice::Fixed(m) => m,
            MChoice::Schedule => cemdg::cem::m_schedule(coarse_size),
        }
    }
}

/// Initial displacement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Initial {
    Zero,
    /// `exp(−r²/(2w²))` about the domain center.
    Bump { width: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub basis: PathBuf,
    pub eigenvalues: PathBuf,
    pub field: PathBuf,
    pub energy: PathBuf,
    pub report: PathBuf,
    pub decay: PathBuf,
    pub snapshot_stride: usize,
    pub timing: bool,
}

impl OutputConfig {
    pub fn path(&self, p: &Path) -> PathBuf {
        self.dir.join(p)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub nc: usize,
    pub nf_per_block: usize,
    pub medium: MediumSpec,
    pub gamma: f64,
    pub modes: usize,
    pub m: MChoice,
    pub saddle: SaddleMethod,
    pub tau: f64,
    pub final_time: f64,
    pub source: Source,
    pub init: InitOptions,
    pub initial: Initial,
    pub reference: bool,
    pub fine_cells: Option<usize>,
    pub levels: Vec<(usize, MChoice)>,
    pub energy_metric: EnergyMetric,
    pub m_values: Vec<usize>,
    pub global_cap: usize,
    pub output: OutputConfig,
}

struct Table {
    entries: BTreeMap<String, String>,
}

impl Table {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let ini = ini::Ini::load_from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let mut entries = BTreeMap::new();
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                let key = match section {
                    Some(s) => format!("{}.{}", s.trim(), k.trim()),
                    None => k.trim().to_string(),
                };
                entries.insert(key, v.trim().to_string());
            }
        }
        Ok(Self { entries })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    fn parse_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| invalid(key, format!("{v:?}: {e}"))),
        }
    }

    fn choice<T: Copy>(&mut self, key: &str, default: T, options: &[(&str, T)]) -> Result<T, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => options
                .iter()
                .find(|(name, _)| name.eq_ignore_ascii_case(&v))
                .map(|&(_, t)| t)
                .ok_or_else(|| {
                    let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                    invalid(key, format!("{v:?} is not one of {}", names.join(", ")))
                }),
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.entries.into_keys().next() {
            Some(k) => Err(ConfigError::UnknownKey(k)),
            None => Ok(()),
        }
    }
}

fn positive(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(key, format!("must be positive, got {v}")))
    }
}

fn at_least_one(key: &str, v: usize) -> Result<usize, ConfigError> {
    if v >= 1 {
        Ok(v)
    } else {
        Err(invalid(key, "must be at least 1"))
    }
}

fn parse_m(key: &str, v: &str) -> Result<MChoice, ConfigError> {
    if v.eq_ignore_ascii_case("schedule") {
        return Ok(MChoice::Schedule);
    }
    v.parse().map(MChoice::Fixed).map_err(|_| invalid(key, format!("{v:?} is neither an integer nor \"schedule\"")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| invalid(key, format!("bad list entry {s:?}"))))
        .collect()
}

/// `nc` or `nc:m` entries, comma separated.
fn parse_levels(key: &str, v: &str) -> Result<Vec<(usize, MChoice)>, ConfigError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (nc, m) = match s.split_once(':') {
                Some((a, b)) => (a.trim(), parse_m(key, b.trim())?),
                None => (s, MChoice::Schedule),
            };
            let nc: usize = nc.parse().map_err(|_| invalid(key, format!("bad level {s:?}")))?;
            Ok((at_least_one(key, nc)?, m))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut t = Table::parse(text)?;
        let resolve = |p: String| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        let nc = at_least_one("mesh.nc", t.parse_or("mesh.nc", 8usize)?)?;
        let nf_per_block = at_least_one("mesh.nf_per_block", t.parse_or("mesh.nf_per_block", 32usize)?)?;

        let kind = t.take("medium.kind").unwrap_or_else(|| "synthetic".into());
        let medium = match kind.to_ascii_lowercase().as_str() {
            "constant" => MediumSpec::Constant(positive("medium.value", t.parse_or("medium.value", 1.0)?)?),
            "synthetic" => {
                let background = positive("medium.background", t.parse_or("medium.background", 1.0)?)?;
                let contrast: f64 = t.parse_or("medium.contrast", 1e3)?;
                if !(contrast >= 1.0 && contrast.is_finite()) {
                    return Err(invalid("medium.contrast", format!("must be at least 1, got {contrast}")));
                }
                let pattern = t.choice(
                    "medium.pattern",
                    Pattern::Inclusions,
                    &[("inclusions", Pattern::Inclusions), ("channels", Pattern::Channels)],
                )?;
                let seed = t.parse_or("medium.seed", 1u64)?;
                MediumSpec::Synthetic(SyntheticSpec {
                    background,
                    contrast,
                    pattern,
                    seed,
                })
            }
            "raster" => {
                let path = t.take("medium.path").ok_or_else(|| ConfigError::Missing("medium.path".into()))?;
                let format = t.choice(
                    "medium.format",
                    RasterFormat::Ascii,
                    &[("ascii", RasterFormat::Ascii), ("binary", RasterFormat::Binary)],
                )?;
                let scale = positive("medium.scale", t.parse_or("medium.scale", 1.0)?)?;
                MediumSpec::Raster {
                    path: resolve(path),
                    format,
                    scale,
                }
            }
            other => return Err(invalid("medium.kind", format!("{other:?} is not one of constant, synthetic, raster"))),
        };

        let gamma = positive("discretization.gamma", t.parse_or("discretization.gamma", DEFAULT_GAMMA)?)?;
        let modes = at_least_one("discretization.modes", t.parse_or("discretization.modes", DEFAULT_MODES_PER_BLOCK)?)?;
        let m = match t.take("discretization.m") {
            Some(v) => parse_m("discretization.m", &v)?,
            None => MChoice::Schedule,
        };
        let saddle = t.choice(
            "discretization.saddle",
            SaddleMethod::SchurCholesky,
            &[("schur", SaddleMethod::SchurCholesky), ("lu", SaddleMethod::SparseLu)],
        )?;

        let tau = positive("time.tau", t.parse_or("time.tau", DEFAULT_TAU)?)?;
        let final_time = positive("time.final", t.parse_or("time.final", DEFAULT_FINAL_TIME)?)?;

        let source_kind = t.choice("source.kind", true, &[("ricker", true), ("none", false)])?;
        let f0 = positive("source.f0", t.parse_or("source.f0", DEFAULT_F0)?)?;
        let width = positive("source.width", t.parse_or("source.width", DEFAULT_SOURCE_WIDTH)?)?;
        let cx = t.parse_or("source.center_x", 0.5)?;
        let cy = t.parse_or("source.center_y", 0.5)?;
        let sign = t.choice(
            "source.spatial_sign",
            SpatialSign::AsPrinted,
            &[("as-printed", SpatialSign::AsPrinted), ("negative", SpatialSign::Negative)],
        )?;
        let source = if source_kind {
            Source::Ricker(Ricker {
                f0,
                width,
                center: [cx, cy],
                sign,
            })
        } else {
            Source::None
        };

        let init = InitOptions {
            projection: t.choice(
                "init.projection",
                InitProjection::Test,
                &[("test", InitProjection::Test), ("l2-gram", InitProjection::L2Gram)],
            )?,
            stiffness: t.choice(
                "init.stiffness",
                InitStiffness::Coarse,
                &[("coarse", InitStiffness::Coarse), ("fine", InitStiffness::Fine)],
            )?,
        };
        let initial = match t.take("init.displacement").as_deref().map(str::to_ascii_lowercase).as_deref() {
            None | Some("zero") => {
                t.take("init.bump_width");
                Initial::Zero
            }
            Some("bump") => Initial::Bump {
                width: positive("init.bump_width", t.parse_or("init.bump_width", 0.05)?)?,
            },
            Some(other) => return Err(invalid("init.displacement", format!("{other:?} is not one of zero, bump"))),
        };
        let reference = t.parse_or("solve.reference", false)?;

        let fine_cells = match t.take("study.fine_cells") {
            None => None,
            Some(v) => Some(at_least_one(
                "study.fine_cells",
                v.parse().map_err(|_| invalid("study.fine_cells", format!("{v:?} is not an integer")))?,
            )?),
        };
        let levels = match t.take("study.levels") {
            Some(v) => parse_levels("study.levels", &v)?,
            None => Vec::new(),
        };
        let energy_metric = t.choice(
            "study.energy_metric",
            EnergyMetric::Anorm,
            &[("anorm", EnergyMetric::Anorm), ("trajectory", EnergyMetric::Trajectory)],
        )?;
        let m_values = match t.take("study.m_values") {
            Some(v) => parse_list("study.m_values", &v)?,
            None => vec![0, 1, 2, 3, 4],
        };
        let global_cap = t.parse_or("study.global_cap", DEFAULT_GLOBAL_CAP)?;

        let dir = resolve(t.take("output.dir").unwrap_or_else(|| ".".into()));
        let mut name = |key: &str, default: &str| PathBuf::from(t.take(key).unwrap_or_else(|| default.into()));
        let output = OutputConfig {
            basis: name("output.basis", "basis.cemb"),
            eigenvalues: name("output.eigenvalues", "eigenvalues.csv"),
            field: name("output.field", "final.cemf"),
            energy: name("output.energy", "energy.csv"),
            report: name("output.report", "report.csv"),
            decay: name("output.decay", "decay.csv"),
            dir,
            snapshot_stride: t.parse_or("output.snapshot_stride", 0usize)?,
            timing: t.parse_or("output.timing", false)?,
        };
        t.finish()?;
        Ok(Self {
            nc,
            nf_per_block,
            medium,
            gamma,
            modes,
            m,
            saddle,
            tau,
            final_time,
            source,
            init,
            initial,
            reference,
            fine_cells,
            levels,
            energy_metric,
            m_values,
            global_cap,
            output,
        })
    }

    pub fn steps(&self) -> usize {
        (self.final_time / self.tau).round() as usize
    }
}
