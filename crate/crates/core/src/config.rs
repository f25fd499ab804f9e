//! Experiment configuration: a flat, human-writable key-value format with
//! one `[section]` per component. Lines are `key = value`; `#` starts a
//! comment; lists are comma-separated. Unknown sections or keys are errors.

use crate::error::ConfigError;
use crate::optim::GradientSource;
use crate::prob::ProbParams;
use crate::rng::fnv1a;
use crate::schedule::ScheduleParams;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Dataset source.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Blobs {
        n: usize,
        classes: usize,
        dim: usize,
        separation: f64,
        val_n: usize,
    },
    Digits {
        n: usize,
        noise: f64,
        val_n: usize,
    },
    Idx {
        images: String,
        labels: String,
        val_images: Option<String>,
        val_labels: Option<String>,
        val_fraction: f64,
    },
    Csv {
        path: String,
        val_path: Option<String>,
        val_fraction: f64,
    },
}

/// Model architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Mlp {
        hidden: Vec<usize>,
        batchnorm: bool,
    },
    Cnn {
        channels: Vec<usize>,
    },
}

/// Fully resolved experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    /// Input standardization from training-split statistics.
    pub normalize: bool,
    /// Training-data fraction in (0, 1].
    pub fraction: f64,

    pub rule: String,
    pub scheme: String,
    pub prob: ProbParams,
    pub gradient_source: GradientSource,
    pub batch_size: usize,
    /// None selects the paired default for the batch size.
    pub momentum: Option<f64>,
    /// Optional override of the derived gating stream seed.
    pub gate_seed: Option<u64>,

    pub schedule: String,
    pub schedule_params: ScheduleParams,

    pub epochs: usize,
    pub trials: usize,
    pub seed: u64,
    pub out: String,
}

impl ExperimentConfig {
    /// Momentum actually used: the explicit value, or the paired default
    /// {16: 0, 32: 0.3, 64: 0.6, 128: 0.9}, or 0 for other batch sizes.
    pub fn effective_momentum(&self) -> f64 {
        self.momentum.unwrap_or(match self.batch_size {
            16 => 0.0,
            32 => 0.3,
            64 => 0.6,
            128 => 0.9,
            _ => 0.0,
        })
    }

    /// Canonical serialization of every resolved field. Stable across runs,
    /// used for the provenance hash.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "dataset={:?};", self.dataset);
        let _ = write!(s, "model={:?};", self.model);
        let _ = write!(s, "normalize={};fraction={};", self.normalize, self.fraction);
        let _ = write!(
            s,
            "rule={};scheme={};alpha={};lambda={};constant_p={};source={:?};",
            self.rule,
            self.scheme,
            self.prob.alpha,
            self.prob.lambda,
            self.prob.constant_p,
            self.gradient_source
        );
        let _ = write!(
            s,
            "batch={};momentum={};gate_seed={:?};",
            self.batch_size,
            self.effective_momentum(),
            self.gate_seed
        );
        let _ = write!(
            s,
            "schedule={};eta_init={};eta_final={};steepness={};decay_power={};milestones={:?};",
            self.schedule,
            self.schedule_params.eta_init,
            self.schedule_params.eta_final,
            self.schedule_params.steepness,
            self.schedule_params.decay_power,
            self.schedule_params.milestones
        );
        let _ = write!(
            s,
            "epochs={};trials={};seed={}",
            self.epochs, self.trials, self.seed
        );
        s
    }

    /// Provenance hash over the resolved config.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a(self.canonical_string().as_bytes()))
    }
}

struct RawSection {
    entries: BTreeMap<String, (String, usize)>,
}

struct Raw {
    path: String,
    sections: BTreeMap<String, RawSection>,
}

impl Raw {
    fn parse(path: &str, text: &str) -> Result<Raw, ConfigError> {
        let mut sections: BTreeMap<String, RawSection> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Parse {
                    path: path.to_string(),
                    line: line_no,
                    msg: "section header must be [name]".into(),
                })?;
                let name = name.trim().to_string();
                if !KNOWN_SECTIONS.contains(&name.as_str()) {
                    return Err(ConfigError::Parse {
                        path: path.to_string(),
                        line: line_no,
                        msg: format!(
                            "unknown section [{name}]; known: {}",
                            KNOWN_SECTIONS.join(", ")
                        ),
                    });
                }
                sections.entry(name.clone()).or_insert(RawSection {
                    entries: BTreeMap::new(),
                });
                current = Some(name);
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                path: path.to_string(),
                line: line_no,
                msg: format!("expected key = value, got \"{line}\""),
            })?;
            let section = current.clone().ok_or_else(|| ConfigError::Parse {
                path: path.to_string(),
                line: line_no,
                msg: "key outside any [section]".into(),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            let sec = sections.get_mut(&section).expect("section exists");
            if sec.entries.contains_key(&key) {
                return Err(ConfigError::Parse {
                    path: path.to_string(),
                    line: line_no,
                    msg: format!("duplicate key \"{key}\" in [{section}]"),
                });
            }
            sec.entries.insert(key, (value, line_no));
        }
        Ok(Raw {
            path: path.to_string(),
            sections,
        })
    }
}

const KNOWN_SECTIONS: [&str; 5] = ["dataset", "model", "optimizer", "schedule", "run"];

struct SectionReader<'a> {
    path: &'a str,
    name: &'static str,
    entries: BTreeMap<String, (String, usize)>,
    consumed: Vec<String>,
}

impl<'a> SectionReader<'a> {
    fn new(raw: &'a mut Raw, name: &'static str) -> Result<Self, ConfigError> {
        let entries = raw
            .sections
            .remove(name)
            .map(|s| s.entries)
            .ok_or(ConfigError::Missing {
                section: name,
                key: "(section)",
            })?;
        Ok(SectionReader {
            path: &raw.path,
            name,
            entries,
            consumed: Vec::new(),
        })
    }

    fn optional(&mut self, key: &'static str) -> Option<String> {
        self.consumed.push(key.to_string());
        self.entries.get(key).map(|(v, _)| v.clone())
    }

    fn required(&mut self, key: &'static str) -> Result<String, ConfigError> {
        self.optional(key).ok_or(ConfigError::Missing {
            section: self.name,
            key,
        })
    }

    fn parse<T: std::str::FromStr>(
        &mut self,
        key: &'static str,
        value: &str,
    ) -> Result<T, ConfigError> {
        value.parse().map_err(|_| ConfigError::Field {
            section: self.name,
            key,
            msg: format!("cannot parse \"{value}\""),
        })
    }

    fn required_parsed<T: std::str::FromStr>(&mut self, key: &'static str) -> Result<T, ConfigError> {
        let v = self.required(key)?;
        self.parse(key, &v)
    }

    fn optional_parsed<T: std::str::FromStr>(
        &mut self,
        key: &'static str,
    ) -> Result<Option<T>, ConfigError> {
        match self.optional(key) {
            Some(v) => Ok(Some(self.parse(key, &v)?)),
            None => Ok(None),
        }
    }

    fn list(&mut self, key: &'static str) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.optional(key) {
            None => Ok(None),
            Some(v) if v.is_empty() => Ok(Some(Vec::new())),
            Some(v) => {
                let mut out = Vec::new();
                for part in v.split(',') {
                    out.push(self.parse(key, part.trim())?);
                }
                Ok(Some(out))
            }
        }
    }

    fn usize_list(&mut self, key: &'static str) -> Result<Option<Vec<usize>>, ConfigError> {
        match self.optional(key) {
            None => Ok(None),
            Some(v) if v.is_empty() => Ok(Some(Vec::new())),
            Some(v) => {
                let mut out = Vec::new();
                for part in v.split(',') {
                    out.push(self.parse(key, part.trim())?);
                }
                Ok(Some(out))
            }
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        for (key, (_, line)) in &self.entries {
            if !self.consumed.contains(key) {
                return Err(ConfigError::Parse {
                    path: self.path.to_string(),
                    line: *line,
                    msg: format!("unknown key \"{key}\" in [{}]", self.name),
                });
            }
        }
        Ok(())
    }
}

/// Parses and validates a config file.
pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_str(&path.display().to_string(), &text)
}

/// Parses and validates config text. `path` is used in diagnostics only.
pub fn from_str(path: &str, text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut raw = Raw::parse(path, text)?;

    let mut sec = SectionReader::new(&mut raw, "dataset")?;
    let kind = sec.required("kind")?;
    let dataset = match kind.as_str() {
        "blobs" => DatasetSpec::Blobs {
            n: sec.required_parsed("n")?,
            classes: sec.optional_parsed("classes")?.unwrap_or(2),
            dim: sec.optional_parsed("dim")?.unwrap_or(2),
            separation: sec.optional_parsed("separation")?.unwrap_or(3.0),
            val_n: sec.optional_parsed("val_n")?.unwrap_or(500),
        },
        "digits" => DatasetSpec::Digits {
            n: sec.required_parsed("n")?,
            noise: sec.optional_parsed("noise")?.unwrap_or(0.35),
            val_n: sec.optional_parsed("val_n")?.unwrap_or(1000),
        },
        "idx" => DatasetSpec::Idx {
            images: sec.required("images")?,
            labels: sec.required("labels")?,
            val_images: sec.optional("val_images"),
            val_labels: sec.optional("val_labels"),
            val_fraction: sec.optional_parsed("val_fraction")?.unwrap_or(0.2),
        },
        "csv" => DatasetSpec::Csv {
            path: sec.required("path")?,
            val_path: sec.optional("val_path"),
            val_fraction: sec.optional_parsed("val_fraction")?.unwrap_or(0.2),
        },
        other => {
            return Err(ConfigError::Field {
                section: "dataset",
                key: "kind",
                msg: format!("unknown kind \"{other}\"; known: blobs, digits, idx, csv"),
            })
        }
    };
    let normalize = match sec.optional("normalize").as_deref() {
        None | Some("auto") => matches!(dataset, DatasetSpec::Idx { .. } | DatasetSpec::Csv { .. }),
        Some("on") | Some("true") => true,
        Some("off") | Some("false") => false,
        Some(other) => {
            return Err(ConfigError::Field {
                section: "dataset",
                key: "normalize",
                msg: format!("expected auto|on|off, got \"{other}\""),
            })
        }
    };
    let fraction: f64 = sec.optional_parsed("fraction")?.unwrap_or(1.0);
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ConfigError::Field {
            section: "dataset",
            key: "fraction",
            msg: format!("must lie in (0, 1], got {fraction}"),
        });
    }
    sec.finish()?;

    let mut sec = SectionReader::new(&mut raw, "model")?;
    let kind = sec.required("kind")?;
    let model = match kind.as_str() {
        "mlp" => ModelSpec::Mlp {
            hidden: sec.usize_list("hidden")?.unwrap_or_default(),
            batchnorm: sec.optional_parsed("batchnorm")?.unwrap_or(false),
        },
        "cnn" => ModelSpec::Cnn {
            channels: sec.usize_list("channels")?.unwrap_or_default(),
        },
        other => {
            return Err(ConfigError::Field {
                section: "model",
                key: "kind",
                msg: format!("unknown kind \"{other}\"; known: mlp, cnn"),
            })
        }
    };
    sec.finish()?;

    let mut sec = SectionReader::new(&mut raw, "optimizer")?;
    let rule = sec.required("rule")?;
    if !crate::optim::names().contains(&rule.as_str()) {
        return Err(ConfigError::Field {
            section: "optimizer",
            key: "rule",
            msg: format!(
                "unknown rule \"{rule}\"; known: {}",
                crate::optim::names().join(", ")
            ),
        });
    }
    let scheme = sec.optional("scheme").unwrap_or_else(|| "combined".into());
    if !crate::prob::names().contains(&scheme.as_str()) {
        return Err(ConfigError::Field {
            section: "optimizer",
            key: "scheme",
            msg: format!(
                "unknown scheme \"{scheme}\"; known: {}",
                crate::prob::names().join(", ")
            ),
        });
    }
    let defaults = ProbParams::default();
    let prob = ProbParams {
        alpha: sec.optional_parsed("alpha")?.unwrap_or(defaults.alpha),
        lambda: sec.optional_parsed("lambda")?.unwrap_or(defaults.lambda),
        constant_p: sec
            .optional_parsed("constant_p")?
            .unwrap_or(defaults.constant_p),
    };
    let gradient_source = match sec.optional("gradient_source").as_deref() {
        None | Some("cma") => GradientSource::Cma,
        Some("batch") => GradientSource::Batch,
        Some(other) => {
            return Err(ConfigError::Field {
                section: "optimizer",
                key: "gradient_source",
                msg: format!("expected cma|batch, got \"{other}\""),
            })
        }
    };
    let batch_size: usize = sec.required_parsed("batch_size")?;
    if batch_size == 0 {
        return Err(ConfigError::Field {
            section: "optimizer",
            key: "batch_size",
            msg: "must be positive".into(),
        });
    }
    let momentum: Option<f64> = sec.optional_parsed("momentum")?;
    if let Some(m) = momentum {
        if !(0.0..1.0).contains(&m) {
            return Err(ConfigError::Field {
                section: "optimizer",
                key: "momentum",
                msg: format!("must lie in [0, 1), got {m}"),
            });
        }
    }
    let gate_seed: Option<u64> = sec.optional_parsed("gate_seed")?;
    sec.finish()?;

    let mut sec = SectionReader::new(&mut raw, "schedule")?;
    let schedule = sec.required("kind")?;
    if !crate::schedule::names().contains(&schedule.as_str()) {
        return Err(ConfigError::Field {
            section: "schedule",
            key: "kind",
            msg: format!(
                "unknown kind \"{schedule}\"; known: {}",
                crate::schedule::names().join(", ")
            ),
        });
    }
    let d = ScheduleParams::default();
    let schedule_params = ScheduleParams {
        eta_init: sec.optional_parsed("eta_init")?.unwrap_or(d.eta_init),
        eta_final: sec.optional_parsed("eta_final")?.unwrap_or(d.eta_final),
        steepness: sec.optional_parsed("steepness")?.unwrap_or(d.steepness),
        decay_power: sec.optional_parsed("decay_power")?.unwrap_or(d.decay_power),
        milestones: sec.list("milestones")?.unwrap_or(d.milestones),
    };
    // Validate eagerly so bad values surface as config errors.
    crate::schedule::build(&schedule, &schedule_params)?;
    crate::prob::build(&scheme, &prob)?;
    sec.finish()?;

    let mut sec = SectionReader::new(&mut raw, "run")?;
    let epochs: usize = sec.required_parsed("epochs")?;
    if epochs == 0 {
        return Err(ConfigError::Field {
            section: "run",
            key: "epochs",
            msg: "must be at least 1".into(),
        });
    }
    let trials: usize = sec.optional_parsed("trials")?.unwrap_or(10);
    if trials == 0 {
        return Err(ConfigError::Field {
            section: "run",
            key: "trials",
            msg: "must be at least 1".into(),
        });
    }
    let seed: u64 = sec.optional_parsed("seed")?.unwrap_or(0);
    let out = sec.optional("out").unwrap_or_else(|| "runs/out".into());
    sec.finish()?;

    Ok(ExperimentConfig {
        dataset,
        model,
        normalize,
        fraction,
        rule,
        scheme,
        prob,
        gradient_source,
        batch_size,
        momentum,
        gate_seed,
        schedule,
        schedule_params,
        epochs,
        trials,
        seed,
        out,
    })
}
