//! Run configuration: task parameters, architecture, adaptation settings,
//! stream regime, seeds, and output location. Configs are validated before
//! any work happens; a rejected config produces no output files.

use std::path::PathBuf;

use tta_core::data::{ArchSpec, Regime, ShiftKind, ShiftSpec, StreamScenario};
use tta_core::tta::{AdaptConfig, Method};
use tta_core::{CoreError, Result};

/// Synthetic task parameters.
#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub separation: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 32,
            n_train: 4096,
            n_test: 2048,
            // Calibrated so severity-5 shifts pull the frozen source model
            // well below its clean accuracy while leaving headroom for
            // adaptation.
            separation: 2.0,
        }
    }
}

impl TaskSpec {
    /// Parses `"c=10,d=32,train=4096,test=2048,sep=6.0"`; omitted keys keep
    /// their defaults.
    pub fn parse(s: &str) -> Result<Self> {
        let mut spec = TaskSpec::default();
        for part in s.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| CoreError::Parse(format!("task field '{part}' is not key=value")))?;
            let bad = |_| CoreError::Parse(format!("bad task value '{value}' for '{key}'"));
            match key {
                "c" => spec.classes = value.parse().map_err(bad)?,
                "d" => spec.dim = value.parse().map_err(bad)?,
                "train" => spec.n_train = value.parse().map_err(bad)?,
                "test" => spec.n_test = value.parse().map_err(bad)?,
                "sep" => spec.separation = value.parse().map_err(|_| {
                    CoreError::Parse(format!("bad task value '{value}' for '{key}'"))
                })?,
                other => {
                    return Err(CoreError::Parse(format!("unknown task key '{other}'")));
                }
            }
        }
        Ok(spec)
    }
}

/// Source training settings.
#[derive(Clone, Copy, Debug)]
pub struct TrainSpec {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        // Enough to fit the separable task well while leaving the entropy
        // distribution spread around the selection threshold under shift.
        Self { epochs: 8, lr: 0.05 }
    }
}

/// One experiment: a method on a scenario over a seed list.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub arch: ArchSpec,
    pub adapt: AdaptConfig<f64>,
    pub regime: Regime,
    /// `None` evaluates the clean (unshifted) stream.
    pub shift: Option<ShiftKind>,
    pub severity: u8,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub train: TrainSpec,
    /// Also record per-sample (entropy, gradient-norm) banding (poem only).
    pub bands: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            arch: ArchSpec::parse("64b|64b").expect("default arch"),
            adapt: AdaptConfig::default(),
            regime: Regime::Standard,
            shift: Some(ShiftKind::GaussNoise),
            severity: 5,
            batch_size: 64,
            seeds: vec![0],
            out: PathBuf::from("runs"),
            train: TrainSpec::default(),
            bands: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.task.classes < 2 || self.task.dim < 2 {
            return Err(CoreError::InvalidConfig("task needs c >= 2 and d >= 2".into()));
        }
        if self.task.n_train < 10 * self.task.classes {
            return Err(CoreError::InvalidConfig("need n_train >= 10*c".into()));
        }
        if self.task.n_test < self.task.classes {
            return Err(CoreError::InvalidConfig("need n_test >= c".into()));
        }
        self.arch.check()?;
        self.adapt.validate()?;
        if self.regime == Regime::MixedShift {
            ShiftSpec::new(ShiftKind::GaussNoise, self.severity)?;
        } else if let Some(kind) = self.shift {
            ShiftSpec::new(kind, self.severity)?;
        }
        if self.seeds.is_empty() {
            return Err(CoreError::InvalidConfig("need at least one seed".into()));
        }
        if self.bands && self.adapt.method != Method::Poem {
            return Err(CoreError::InvalidConfig(
                "gradient banding is only recorded for the poem method".into(),
            ));
        }
        // The scenario validates batch-size constraints per regime.
        self.scenario(0).validate()?;
        if self.batch_size > self.task.n_test {
            return Err(CoreError::InvalidConfig(
                "batch size exceeds test set size".into(),
            ));
        }
        Ok(())
    }

    /// Stream scenario realized for one seed.
    pub fn scenario(&self, seed: u64) -> StreamScenario {
        let shifts = if self.regime == Regime::MixedShift {
            ShiftKind::ALL
                .iter()
                .map(|&k| ShiftSpec { kind: k, severity: self.severity })
                .collect()
        } else {
            self.shift
                .map(|kind| ShiftSpec { kind, severity: self.severity })
                .into_iter()
                .collect()
        };
        StreamScenario {
            regime: self.regime,
            batch_size: self.batch_size,
            shifts,
            seed: derive_seed(seed, SEED_STREAM),
        }
    }

    /// Shift label used in run ids and records ("mixed" under mixed_shift,
    /// "none" for the clean stream).
    pub fn shift_label(&self) -> String {
        if self.regime == Regime::MixedShift {
            "mixed".to_string()
        } else {
            match self.shift {
                Some(kind) => kind.name().to_string(),
                None => "none".to_string(),
            }
        }
    }

    pub fn run_id(&self, seed: u64) -> String {
        format!(
            "{}_{}_{}_s{}_f{}_seed{}",
            self.adapt.method.name(),
            self.regime.name(),
            self.shift_label(),
            self.severity,
            self.adapt.entropy_factor,
            seed
        )
    }
}

pub const SEED_SHIFT: u64 = 1;
pub const SEED_STREAM: u64 = 2;

/// Stable per-purpose seed derivation (splitmix64 over seed ^ purpose).
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    let mut z = seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Flat key-value config file: one `key = value` per line, `#` comments.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CoreError::Parse(format!("config line {} is not key = value", lineno + 1))
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_spec_parsing() {
        let t = TaskSpec::parse("c=4,d=8,train=400,test=200,sep=5.5").unwrap();
        assert_eq!(t.classes, 4);
        assert_eq!(t.dim, 8);
        assert_eq!(t.n_train, 400);
        assert_eq!(t.n_test, 200);
        assert_eq!(t.separation, 5.5);

        let partial = TaskSpec::parse("c=4").unwrap();
        assert_eq!(partial.dim, 32);
        assert!(TaskSpec::parse("bogus").is_err());
        assert!(TaskSpec::parse("q=1").is_err());
    }

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = RunConfig::default();
        cfg.severity = 6;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.regime = Regime::SingleSample; // batch_size still 64
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.bands = true; // default method is poem: fine
        cfg.validate().unwrap();
        cfg.adapt.method = Method::Tent;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_file_parsing() {
        let text = "# comment\nmethod = tent\nentropy_factor = 0.6\n\n";
        let pairs = parse_config_file(text).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0], ("method".into(), "tent".into()));
        assert!(parse_config_file("no equals sign").is_err());
    }

    #[test]
    fn seed_derivation_is_stable() {
        assert_eq!(derive_seed(7, SEED_STREAM), derive_seed(7, SEED_STREAM));
        assert_ne!(derive_seed(7, SEED_STREAM), derive_seed(7, SEED_SHIFT));
        assert_ne!(derive_seed(7, SEED_STREAM), derive_seed(8, SEED_STREAM));
    }
}
