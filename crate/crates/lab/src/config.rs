//! Flat `key = value` run configuration with namespaced keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use fpd_core::distill::{DistillConfig, Estimator, RefinementSource};
use fpd_core::drift::{DriftConfig, DriftSpace};
use fpd_core::masking::{ConfidenceRule, NoiseSchedule};
use fpd_core::teacher::{Decode, RefineOptions, TeacherConfig};
use fpd_core::world::{LiftConfig, WorldConfig};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: String, line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {msg}")]
    Value { key: String, msg: String },
    #[error("config key {0} is given twice")]
    Duplicate(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Whether `eval` computes exact total variation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TvMode {
    /// Only when the sequence space can be enumerated.
    Auto,
    /// Fail when it cannot.
    Required,
    Off,
}

/// Which model `eval` samples from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalModel {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub model: EvalModel,
    /// Sampler step count for the teacher.
    pub steps: usize,
    /// Samples per class.
    pub samples: usize,
    pub confidence: ConfidenceRule,
    pub residual_samples: usize,
    /// Rows in the decoded sample dump.
    pub dump: usize,
    pub tv: TvMode,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub schedule: NoiseSchedule,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    /// Adds measured wall-clock milliseconds to the CSV streams.
    pub wall_clock: bool,
    pub checkpoint_every: u64,
}

/// Every accepted key, in the order the resolved file lists them.
pub const KEYS: &[&str] = &[
    "seed",
    "world.K",
    "world.L",
    "world.d",
    "world.P",
    "world.F",
    "world.G",
    "world.C",
    "world.templates",
    "world.rho",
    "world.decoder_hidden",
    "world.seed",
    "schedule.kind",
    "teacher.hidden",
    "teacher.steps",
    "teacher.lr",
    "teacher.batch",
    "teacher.seed",
    "distill.r_init",
    "distill.r_lo",
    "distill.r_hi",
    "distill.lambda",
    "distill.source",
    "distill.estimator",
    "distill.decode",
    "distill.batch",
    "distill.steps",
    "distill.lr",
    "distill.disc_lr",
    "distill.disc_hidden",
    "distill.seed",
    "distill.checkpoint_every",
    "drift.bandwidths",
    "drift.eps_rms",
    "drift.space",
    "drift.taps",
    "drift.spatial",
    "eval.model",
    "eval.steps",
    "eval.samples",
    "eval.confidence",
    "eval.temperature",
    "eval.residual_samples",
    "eval.dump",
    "eval.tv",
    "eval.seed",
    "log.wall_clock",
];

/// Keys whose default follows the global `seed`.
const SEED_KEYS: &[&str] = &["world.seed", "teacher.seed", "distill.seed", "eval.seed"];

fn defaults() -> BTreeMap<&'static str, String> {
    let w = WorldConfig::default();
    let t = TeacherConfig::default();
    let d = DistillConfig::default();
    let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    let taps = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let pairs: Vec<(&'static str, String)> = vec![
        ("seed", "0".into()),
        ("world.K", w.vocab.to_string()),
        ("world.L", w.len.to_string()),
        ("world.d", w.embed_dim.to_string()),
        ("world.P", w.pixel_dim.to_string()),
        ("world.F", w.feature_dim.to_string()),
        ("world.G", w.grid.to_string()),
        ("world.C", w.classes.to_string()),
        ("world.templates", w.templates.to_string()),
        ("world.rho", w.rho.to_string()),
        ("world.decoder_hidden", w.decoder_hidden.to_string()),
        ("schedule.kind", "cosine".into()),
        ("teacher.hidden", t.hidden.to_string()),
        ("teacher.steps", t.steps.to_string()),
        ("teacher.lr", t.lr.to_string()),
        ("teacher.batch", t.batch.to_string()),
        ("distill.r_init", d.r_init.to_string()),
        ("distill.r_lo", d.r_lo.to_string()),
        ("distill.r_hi", d.r_hi.to_string()),
        ("distill.lambda", d.lambda.to_string()),
        ("distill.source", "student".into()),
        ("distill.estimator", "ste".into()),
        ("distill.decode", "sample".into()),
        ("distill.batch", d.batch.to_string()),
        ("distill.steps", d.steps.to_string()),
        ("distill.lr", d.lr.to_string()),
        ("distill.disc_lr", d.disc_lr.to_string()),
        ("distill.disc_hidden", d.disc_hidden.to_string()),
        ("distill.checkpoint_every", "0".into()),
        ("drift.bandwidths", list(&d.drift.bandwidths)),
        ("drift.eps_rms", d.drift.eps_rms.to_string()),
        ("drift.space", "feature".into()),
        ("drift.taps", taps(&d.lift.taps)),
        ("drift.spatial", "true".into()),
        ("eval.model", "teacher".into()),
        ("eval.steps", "8".into()),
        ("eval.samples", "5000".into()),
        ("eval.confidence", "plain".into()),
        ("eval.temperature", "4.5".into()),
        ("eval.residual_samples", "1000".into()),
        ("eval.dump", "100".into()),
        ("eval.tv", "auto".into()),
        ("log.wall_clock", "false".into()),
    ];
    pairs.into_iter().collect()
}

/// Raw key/value layer: file contents plus `--set` overrides.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: origin.to_string(),
                line: i + 1,
            })?;
            let key = k.trim().to_string();
            check_key(&key)?;
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate(key));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| ConfigError::Syntax {
            path: "--set".into(),
            line: 1,
        })?;
        let key = k.trim().to_string();
        check_key(&key)?;
        self.values.insert(key, v.trim().to_string());
        Ok(())
    }

    /// Every key with its effective value, seeds included.
    pub fn resolved(&self) -> BTreeMap<&'static str, String> {
        let mut out = defaults();
        for (k, v) in &self.values {
            let key = KEYS.iter().find(|&&known| known == k).expect("checked at insert");
            out.insert(key, v.clone());
        }
        let seed = out["seed"].clone();
        for k in SEED_KEYS {
            out.entry(k).or_insert_with(|| seed.clone());
        }
        out
    }

    pub fn build(&self) -> Result<RunConfig, ConfigError> {
        RunConfig::from_map(&self.resolved())
    }
}

fn check_key(key: &str) -> Result<(), ConfigError> {
    if KEYS.contains(&key) {
        Ok(())
    } else {
        Err(ConfigError::UnknownKey(key.to_string()))
    }
}

fn get<T: FromStr>(map: &BTreeMap<&'static str, String>, key: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    map[key].parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        msg: e.to_string(),
    })
}

fn get_list<T: FromStr>(map: &BTreeMap<&'static str, String>, key: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    map[key]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse().map_err(|e: T::Err| ConfigError::Value {
                key: key.to_string(),
                msg: e.to_string(),
            })
        })
        .collect()
}

fn core_err(e: fpd_core::Error) -> ConfigError {
    match e {
        fpd_core::Error::InvalidArgument { name, msg } => ConfigError::Value {
            key: name.to_string(),
            msg,
        },
        other => ConfigError::Value {
            key: "config".into(),
            msg: other.to_string(),
        },
    }
}

impl RunConfig {
    fn from_map(m: &BTreeMap<&'static str, String>) -> Result<Self, ConfigError> {
        let world = WorldConfig {
            vocab: get(m, "world.K")?,
            len: get(m, "world.L")?,
            embed_dim: get(m, "world.d")?,
            pixel_dim: get(m, "world.P")?,
            feature_dim: get(m, "world.F")?,
            grid: get(m, "world.G")?,
            classes: get(m, "world.C")?,
            templates: get(m, "world.templates")?,
            rho: get(m, "world.rho")?,
            decoder_hidden: get(m, "world.decoder_hidden")?,
            seed: get(m, "world.seed")?,
        };
        world.validate().map_err(core_err)?;
        let schedule: NoiseSchedule = get(m, "schedule.kind")?;
        let teacher = TeacherConfig {
            hidden: get(m, "teacher.hidden")?,
            steps: get(m, "teacher.steps")?,
            lr: get(m, "teacher.lr")?,
            batch: get(m, "teacher.batch")?,
            seed: get(m, "teacher.seed")?,
        };
        teacher.validate().map_err(core_err)?;
        let decode = match m["distill.decode"].as_str() {
            "sample" => Decode::Sample,
            "argmax" => Decode::Argmax,
            other => {
                return Err(ConfigError::Value {
                    key: "distill.decode".into(),
                    msg: format!("unknown decode {other:?}"),
                })
            }
        };
        let spatial = parse_bool(m, "drift.spatial")?;
        let distill = DistillConfig {
            r_init: get(m, "distill.r_init")?,
            r_lo: get(m, "distill.r_lo")?,
            r_hi: get(m, "distill.r_hi")?,
            lambda: get(m, "distill.lambda")?,
            source: get::<RefinementSource>(m, "distill.source")?,
            estimator: get::<Estimator>(m, "distill.estimator")?,
            decode,
            batch: get(m, "distill.batch")?,
            steps: get(m, "distill.steps")?,
            lr: get(m, "distill.lr")?,
            disc_lr: get(m, "distill.disc_lr")?,
            disc_hidden: get(m, "distill.disc_hidden")?,
            seed: get(m, "distill.seed")?,
            drift: DriftConfig {
                bandwidths: get_list(m, "drift.bandwidths")?,
                eps_rms: get(m, "drift.eps_rms")?,
                space: get::<DriftSpace>(m, "drift.space")?,
            },
            lift: LiftConfig {
                taps: get_list(m, "drift.taps")?,
                spatial,
            },
        };
        distill.validate().map_err(core_err)?;
        let model = match m["eval.model"].as_str() {
            "teacher" => EvalModel::Teacher,
            "student" => EvalModel::Student,
            other => {
                return Err(ConfigError::Value {
                    key: "eval.model".into(),
                    msg: format!("unknown model {other:?}"),
                })
            }
        };
        let temperature: f64 = get(m, "eval.temperature")?;
        let confidence = match m["eval.confidence"].as_str() {
            "plain" => ConfidenceRule::Plain,
            "gumbel" => ConfidenceRule::Gumbel { temperature },
            other => {
                return Err(ConfigError::Value {
                    key: "eval.confidence".into(),
                    msg: format!("unknown rule {other:?}"),
                })
            }
        };
        let eval = EvalConfig {
            model,
            steps: get(m, "eval.steps")?,
            samples: get(m, "eval.samples")?,
            confidence,
            residual_samples: get(m, "eval.residual_samples")?,
            dump: get(m, "eval.dump")?,
            tv: match m["eval.tv"].as_str() {
                "auto" => TvMode::Auto,
                "true" | "required" => TvMode::Required,
                "false" | "off" => TvMode::Off,
                other => {
                    return Err(ConfigError::Value {
                        key: "eval.tv".into(),
                        msg: format!("expected auto, true or false, got {other:?}"),
                    })
                }
            },
            seed: get(m, "eval.seed")?,
        };
        for (key, v) in [("eval.steps", eval.steps), ("eval.samples", eval.samples)] {
            if v == 0 {
                return Err(ConfigError::Value {
                    key: key.into(),
                    msg: "must be positive".into(),
                });
            }
        }
        Ok(Self {
            seed: get(m, "seed")?,
            world,
            schedule,
            teacher,
            distill,
            eval,
            wall_clock: parse_bool(m, "log.wall_clock")?,
            checkpoint_every: get(m, "distill.checkpoint_every")?,
        })
    }

    pub fn refine_options(&self) -> RefineOptions {
        RefineOptions {
            decode: Decode::Sample,
            confidence: self.eval.confidence,
        }
    }
}

fn parse_bool(m: &BTreeMap<&'static str, String>, key: &str) -> Result<bool, ConfigError> {
    match m[key].as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(ConfigError::Value {
            key: key.into(),
            msg: format!("{other:?} is not a boolean"),
        }),
    }
}

/// Text form of the resolved configuration, one key per line in [`KEYS`]
/// order.
pub fn render(resolved: &BTreeMap<&'static str, String>) -> String {
    let mut out = String::new();
    for k in KEYS {
        let _ = writeln!(out, "{k} = {}", resolved[k]);
    }
    out
}

/// Sections hashed into each artifact's fingerprint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    World,
    Teacher,
    Distill,
}

impl Stage {
    fn prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::World => &["world."],
            Stage::Teacher => &["world.", "schedule.", "teacher."],
            Stage::Distill => &["world.", "schedule.", "teacher.", "distill.", "drift."],
        }
    }
}

/// First 8 bytes of SHA-256 over the stage's resolved `key=value` lines.
/// `distill.steps` and `distill.checkpoint_every` are left out so a run can
/// be extended or resumed.
pub fn fingerprint(resolved: &BTreeMap<&'static str, String>, stage: Stage) -> u64 {
    let mut h = Sha256::new();
    for k in KEYS {
        if matches!(*k, "distill.steps" | "distill.checkpoint_every") {
            continue;
        }
        if stage.prefixes().iter().any(|p| k.starts_with(p)) {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(resolved[k].as_bytes());
            h.update(b"\n");
        }
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build() {
        let cfg = RawConfig::default().build().unwrap();
        assert_eq!(cfg.world, WorldConfig::default());
        assert_eq!(cfg.distill.estimator, Estimator::Ste);
    }

    #[test]
    fn unknown_and_invalid_keys_are_named() {
        let err = RawConfig::parse("world.Q = 3", "x").unwrap_err();
        assert!(err.to_string().contains("world.Q"));
        let err = RawConfig::parse("world.K = 0", "x").unwrap().build().unwrap_err();
        assert!(err.to_string().contains("world.K"), "{err}");
        let err = RawConfig::parse("distill.estimator = hard", "x").unwrap().build().unwrap_err();
        assert!(err.to_string().contains("distill.estimator"));
        assert!(RawConfig::parse("seed 3", "x").is_err());
        assert!(RawConfig::parse("seed = 1\nseed = 2", "x").is_err());
    }

    #[test]
    fn seed_keys_follow_global_seed_unless_set() {
        let mut raw = RawConfig::parse("seed = 7\n# comment\nteacher.seed = 2", "x").unwrap();
        let cfg = raw.build().unwrap();
        assert_eq!((cfg.world.seed, cfg.teacher.seed, cfg.distill.seed), (7, 2, 7));
        raw.set("distill.seed=9").unwrap();
        assert_eq!(raw.build().unwrap().distill.seed, 9);
    }

    #[test]
    fn render_round_trips() {
        let mut raw = RawConfig::default();
        raw.set("distill.estimator=soft").unwrap();
        raw.set("drift.bandwidths=0.1,0.3").unwrap();
        let text = render(&raw.resolved());
        assert!(text.contains("distill.estimator = soft\n"));
        let back = RawConfig::parse(&text, "resolved").unwrap();
        assert_eq!(back.resolved(), raw.resolved());
        assert_eq!(back.build().unwrap(), raw.build().unwrap());
    }

    #[test]
    fn fingerprints_track_their_sections() {
        let base = RawConfig::default();
        let mut changed = base.clone();
        changed.set("distill.lr=0.5").unwrap();
        let (a, b) = (base.resolved(), changed.resolved());
        assert_eq!(fingerprint(&a, Stage::Teacher), fingerprint(&b, Stage::Teacher));
        assert_ne!(fingerprint(&a, Stage::Distill), fingerprint(&b, Stage::Distill));
        let mut longer = base.clone();
        longer.set("distill.steps=99").unwrap();
        assert_eq!(fingerprint(&a, Stage::Distill), fingerprint(&longer.resolved(), Stage::Distill));
    }
}
