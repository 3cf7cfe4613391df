//! Experiment configuration: flat `key = value` text plus flag overrides.
//!
//! Every experiment kind declares its key set with defaults; unknown keys
//! are rejected, values are validated by the typed getters, and the
//! effective configuration serializes to a canonical text whose FNV-1a
//! hash identifies the run across platforms.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use tmdlab::kernel::EpsilonPolicy;
use tmdlab::layer::KernelSource;
use tmdlab::models::DatasetKind;

#[derive(Debug)]
pub enum CliError {
    Config { field: String, reason: String },
    UnknownKey { key: String },
    Usage(String),
    Core(tmdlab::Error),
    Io(std::io::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config { field, reason } => write!(f, "config field `{field}`: {reason}"),
            CliError::UnknownKey { key } => write!(f, "unknown config key `{key}`"),
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<tmdlab::Error> for CliError {
    fn from(e: tmdlab::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl CliError {
    /// One-line machine-readable error record.
    pub fn record(&self) -> String {
        let (kind, detail) = match self {
            CliError::Config { field, reason } => ("config", format!("field={field} reason={reason}")),
            CliError::UnknownKey { key } => ("unknown-key", format!("key={key}")),
            CliError::Usage(msg) => ("usage", msg.clone()),
            CliError::Core(e) => ("runtime", e.to_string()),
            CliError::Io(e) => ("io", e.to_string()),
        };
        format!("error kind={kind} message=\"{detail}\"")
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    ValidateGenerator,
    TrainClassifier,
    TrainPointset,
    Segment,
    Gradcheck,
    DumpOperator,
}

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

macro_rules! keys {
    ($(($k:literal, $d:literal, $h:literal)),* $(,)?) => {
        &[$(KeySpec { key: $k, default: $d, help: $h }),*]
    };
}

const VALIDATE_KEYS: &[KeySpec] = keys![
    ("density", "gaussian1d", "target density: gaussian1d|gaussian2d|mixture1d|mixture2d"),
    ("test_function", "quadratic", "test function: quadratic|coordinate|cosine"),
    ("m_grid", "100,2000", "comma-separated sample counts"),
    ("epsilon_grid", "0.2,0.05", "comma-separated bandwidths"),
    ("seeds", "0,1,2,3,4,5,6,7,8,9", "comma-separated seeds"),
];

const CLASSIFIER_KEYS: &[KeySpec] = keys![
    ("dataset", "two-moons", "dataset: two-moons|blobs"),
    ("train_size", "240", "training samples"),
    ("test_size", "200", "test samples"),
    ("train_noise", "0.15", "dataset noise (train and test draws)"),
    ("augment_noise", "0.2", "fresh input jitter per training batch"),
    ("hidden_dim", "16", "hidden width"),
    ("blocks", "1", "residual hidden blocks"),
    ("use_tmd", "true", "wrap hidden blocks in the correction layer"),
    ("latent_dim", "16", "kernel latent dimension"),
    ("epsilon", "median", "bandwidth: `median`, `median*F`, or a number"),
    ("kernel_source", "input", "kernel features: input|output"),
    ("freeze_delta_t", "false", "keep dt fixed at its initial value"),
    ("delta_t", "0", "initial dt"),
    ("batch_size", "30", "minibatch size (operator batch at train time)"),
    ("epochs", "40", "training epochs"),
    ("learning_rate", "0.15", "SGD learning rate"),
    ("momentum", "0.9", "SGD momentum"),
    ("m_infer", "50", "batch size used to build the operator at inference"),
    ("eval_noise", "0", "test-time input noise for the noisy evaluation"),
    ("seeds", "0", "comma-separated seeds"),
];

const POINTSET_KEYS: &[KeySpec] = keys![
    ("train_per_class", "40", "training clouds per class"),
    ("test_per_class", "20", "test clouds per class"),
    ("n_points", "64", "points per cloud"),
    ("jitter", "0.02", "per-point jitter"),
    ("embed_dim", "24", "embedding width"),
    ("use_tmd", "true", "enable the correction block"),
    ("latent_dim", "8", "kernel latent dimension"),
    ("epsilon", "median", "bandwidth: `median`, `median*F`, or a number"),
    ("kernel_source", "input", "kernel features: input|output"),
    ("freeze_delta_t", "false", "keep dt fixed at its initial value"),
    ("delta_t", "0", "initial dt"),
    ("clouds_per_batch", "6", "clouds per optimizer step"),
    ("epochs", "40", "training epochs"),
    ("learning_rate", "0.02", "SGD learning rate"),
    ("momentum", "0.9", "SGD momentum"),
    ("seeds", "0", "comma-separated seeds"),
];

const SEGMENT_KEYS: &[KeySpec] = keys![
    ("height", "48", "image height"),
    ("width", "48", "image width"),
    ("images", "8", "images per batch"),
    ("image_noise", "0.2", "additive image noise"),
    ("steps", "80", "contour evolution steps"),
    ("mu", "0.05", "length penalty"),
    ("nu", "0", "area penalty"),
    ("lambda1", "1", "foreground data weight"),
    ("lambda2", "1", "background data weight"),
    ("eta", "1", "Heaviside smoothing width"),
    ("contour_dt", "0.8", "contour step size"),
    ("use_tmd", "true", "blend updates across the batch"),
    ("delta_t", "0.1", "correction step size"),
    ("latent_dim", "16", "kernel latent dimension"),
    ("epsilon", "median", "bandwidth: `median`, `median*F`, or a number"),
    ("seeds", "0", "comma-separated seeds"),
];

const GRADCHECK_KEYS: &[KeySpec] = keys![
    ("cases", "20", "random layer instances to check"),
    ("step", "0.00001", "central-difference step"),
    ("seeds", "0", "case-generation seed (first entry used)"),
];

const DUMP_KEYS: &[KeySpec] = keys![
    ("m", "3", "batch size"),
    ("dim", "2", "feature dimension"),
    ("epsilon", "0.5", "bandwidth"),
    ("identical", "false", "use identical points instead of random ones"),
    ("seeds", "7", "batch-generation seed (first entry used)"),
];

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::ValidateGenerator,
        ExperimentKind::TrainClassifier,
        ExperimentKind::TrainPointset,
        ExperimentKind::Segment,
        ExperimentKind::Gradcheck,
        ExperimentKind::DumpOperator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::ValidateGenerator => "validate-generator",
            ExperimentKind::TrainClassifier => "train-classifier",
            ExperimentKind::TrainPointset => "train-pointset",
            ExperimentKind::Segment => "segment",
            ExperimentKind::Gradcheck => "gradcheck",
            ExperimentKind::DumpOperator => "dump-operator",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn keys(self) -> &'static [KeySpec] {
        match self {
            ExperimentKind::ValidateGenerator => VALIDATE_KEYS,
            ExperimentKind::TrainClassifier => CLASSIFIER_KEYS,
            ExperimentKind::TrainPointset => POINTSET_KEYS,
            ExperimentKind::Segment => SEGMENT_KEYS,
            ExperimentKind::Gradcheck => GRADCHECK_KEYS,
            ExperimentKind::DumpOperator => DUMP_KEYS,
        }
    }

    pub fn summary(self) -> &'static str {
        match self {
            ExperimentKind::ValidateGenerator => {
                "compare the finite-sample generator against the closed form"
            }
            ExperimentKind::TrainClassifier => "train the residual MLP classifier",
            ExperimentKind::TrainPointset => "train the point-set classifier",
            ExperimentKind::Segment => "run level-set segmentation on synthetic shapes",
            ExperimentKind::Gradcheck => "verify reverse-mode gradients against finite differences",
            ExperimentKind::DumpOperator => "print one operator matrix in the debug dump format",
        }
    }
}

/// Effective configuration: kind, fully-populated key values, output dir.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    values: BTreeMap<String, String>,
    pub out_dir: PathBuf,
}

fn default_out_dir(kind: ExperimentKind) -> PathBuf {
    let root = std::env::var("TMDLAB_OUT").unwrap_or_else(|_| "runs".to_string());
    PathBuf::from(root).join(kind.name())
}

impl ExperimentConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        let values = kind
            .keys()
            .iter()
            .map(|k| (k.key.to_string(), k.default.to_string()))
            .collect();
        ExperimentConfig { kind, values, out_dir: default_out_dir(kind) }
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        if key == "kind" {
            if value != self.kind.name() {
                return Err(CliError::Config {
                    field: "kind".into(),
                    reason: format!("file says `{value}`, subcommand is `{}`", self.kind.name()),
                });
            }
            return Ok(());
        }
        if !self.kind.keys().iter().any(|k| k.key == key) {
            return Err(CliError::UnknownKey { key: key.to_string() });
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment, blank lines are
    /// skipped.
    pub fn apply_file(&mut self, text: &str) -> CliResult<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config {
                    field: format!("line {}", lineno + 1),
                    reason: format!("expected `key = value`, got `{raw}`"),
                });
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key {key} not in {} config", self.kind.name()))
    }

    pub fn get_f64(&self, key: &str) -> CliResult<f64> {
        self.get(key).parse().map_err(|_| CliError::Config {
            field: key.to_string(),
            reason: format!("`{}` is not a number", self.get(key)),
        })
    }

    pub fn get_positive_f64(&self, key: &str) -> CliResult<f64> {
        let v = self.get_f64(key)?;
        if !(v > 0.0) {
            return Err(CliError::Config {
                field: key.to_string(),
                reason: format!("must be positive, got {v}"),
            });
        }
        Ok(v)
    }

    pub fn get_nonnegative_f64(&self, key: &str) -> CliResult<f64> {
        let v = self.get_f64(key)?;
        if v < 0.0 {
            return Err(CliError::Config {
                field: key.to_string(),
                reason: format!("must be nonnegative, got {v}"),
            });
        }
        Ok(v)
    }

    pub fn get_usize(&self, key: &str) -> CliResult<usize> {
        self.get(key).parse().map_err(|_| CliError::Config {
            field: key.to_string(),
            reason: format!("`{}` is not a nonnegative integer", self.get(key)),
        })
    }

    pub fn get_positive_usize(&self, key: &str) -> CliResult<usize> {
        let v = self.get_usize(key)?;
        if v == 0 {
            return Err(CliError::Config {
                field: key.to_string(),
                reason: "must be at least 1".into(),
            });
        }
        Ok(v)
    }

    pub fn get_bool(&self, key: &str) -> CliResult<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(CliError::Config {
                field: key.to_string(),
                reason: format!("`{other}` is not a boolean"),
            }),
        }
    }

    pub fn get_seeds(&self) -> CliResult<Vec<u64>> {
        let list = self.get_list_u64("seeds")?;
        if list.is_empty() {
            return Err(CliError::Config {
                field: "seeds".into(),
                reason: "at least one seed required".into(),
            });
        }
        Ok(list)
    }

    pub fn get_list_u64(&self, key: &str) -> CliResult<Vec<u64>> {
        self.split_list(key)?
            .iter()
            .map(|s| {
                s.parse().map_err(|_| CliError::Config {
                    field: key.to_string(),
                    reason: format!("`{s}` is not an integer"),
                })
            })
            .collect()
    }

    pub fn get_list_usize(&self, key: &str) -> CliResult<Vec<usize>> {
        self.split_list(key)?
            .iter()
            .map(|s| {
                s.parse().map_err(|_| CliError::Config {
                    field: key.to_string(),
                    reason: format!("`{s}` is not an integer"),
                })
            })
            .collect()
    }

    pub fn get_list_f64(&self, key: &str) -> CliResult<Vec<f64>> {
        self.split_list(key)?
            .iter()
            .map(|s| {
                s.parse().map_err(|_| CliError::Config {
                    field: key.to_string(),
                    reason: format!("`{s}` is not a number"),
                })
            })
            .collect()
    }

    fn split_list(&self, key: &str) -> CliResult<Vec<String>> {
        Ok(self
            .get(key)
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect())
    }

    /// `median`, `median*FACTOR`, or a positive number.
    pub fn get_epsilon_policy(&self, key: &str) -> CliResult<EpsilonPolicy> {
        let value = self.get(key);
        if value == "median" {
            return Ok(EpsilonPolicy::MedianPerBatch);
        }
        if let Some(factor) = value.strip_prefix("median*") {
            let f: f64 = factor.parse().map_err(|_| CliError::Config {
                field: key.to_string(),
                reason: format!("`{factor}` is not a number"),
            })?;
            if !(f > 0.0) {
                return Err(CliError::Config {
                    field: key.to_string(),
                    reason: format!("median factor must be positive, got {f}"),
                });
            }
            return Ok(EpsilonPolicy::ScaledMedian(f));
        }
        let v: f64 = value.parse().map_err(|_| CliError::Config {
            field: key.to_string(),
            reason: format!("`{value}` is neither `median`, `median*F`, nor a number"),
        })?;
        if !(v > 0.0) {
            return Err(CliError::Config {
                field: key.to_string(),
                reason: format!("bandwidth must be positive, got {v}"),
            });
        }
        Ok(EpsilonPolicy::Fixed(v))
    }

    pub fn get_kernel_source(&self, key: &str) -> CliResult<KernelSource> {
        match self.get(key) {
            "input" => Ok(KernelSource::InputFeatures),
            "output" => Ok(KernelSource::OutputFeatures),
            other => Err(CliError::Config {
                field: key.to_string(),
                reason: format!("`{other}` is not input|output"),
            }),
        }
    }

    pub fn get_dataset(&self, key: &str) -> CliResult<DatasetKind> {
        match self.get(key) {
            "two-moons" => Ok(DatasetKind::TwoMoons),
            "blobs" => Ok(DatasetKind::Blobs),
            other => Err(CliError::Config {
                field: key.to_string(),
                reason: format!("`{other}` is not two-moons|blobs"),
            }),
        }
    }

    /// Canonical text: the kind plus every key in sorted order. The output
    /// directory is a placement concern and stays out of the hash.
    pub fn canonical_text(&self) -> String {
        let mut text = format!("kind = {}\n", self.kind.name());
        for (key, value) in &self.values {
            text.push_str(&format!("{key} = {value}\n"));
        }
        text
    }

    pub fn hash_hex(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.canonical_text().as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        format!("{h:016x}")
    }
}

pub fn global_help() -> String {
    let mut text = String::from(
        "tmdlab - generator-estimation experiments\n\n\
         Usage: tmdlab <command> [--config PATH] [--seed N] [--out DIR] [--KEY VALUE]...\n\n\
         Commands:\n",
    );
    for kind in ExperimentKind::ALL {
        text.push_str(&format!("  {:<20} {}\n", kind.name(), kind.summary()));
    }
    text.push_str(
        "\nOptions:\n  \
         --config PATH   read `key = value` lines (unknown keys rejected)\n  \
         --seed N        shorthand for --seeds N\n  \
         --out DIR       output directory (default $TMDLAB_OUT/<command> or runs/<command>)\n  \
         --KEY VALUE     override any config key listed under `tmdlab <command> --help`\n\n\
         Environment:\n  TMDLAB_OUT      default output root\n",
    );
    text
}

pub fn kind_help(kind: ExperimentKind) -> String {
    let mut text = format!(
        "tmdlab {} - {}\n\nKeys (defaults in brackets):\n",
        kind.name(),
        kind.summary()
    );
    for k in kind.keys() {
        text.push_str(&format!("  {:<18} {} [{}]\n", k.key, k.help, k.default));
    }
    text
}
