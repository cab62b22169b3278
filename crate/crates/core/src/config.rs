//! Experiment configuration (TOML) and its content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    generate_synthetic, read_dataset, LabelShardScheme, LabeledDataset, ShardGroup, SplitFractions,
};
use crate::error::{Error, Result};
use crate::federation::{RetrainConfig, SearchConfig};
use crate::supernet::ModelSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: usize,
    pub shape: [usize; 3],
    pub per_class: usize,
    pub difficulty: f64,
    /// Binary dataset file; replaces the synthetic generator when set.
    pub path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: 6,
            shape: [1, 8, 8],
            per_class: 160,
            difficulty: 1.0,
            path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    LabelShard,
    Iid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub kind: PartitionKind,
    pub clients: usize,
    /// Explicit (class group -> client group) pairs. When empty, classes and
    /// clients are cut into `group_count` contiguous blocks.
    pub groups: Vec<ShardGroup>,
    pub group_count: usize,
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            kind: PartitionKind::LabelShard,
            clients: 6,
            groups: Vec::new(),
            group_count: 3,
            test_fraction: 0.1,
            val_fraction: 0.1,
        }
    }
}

impl PartitionConfig {
    pub fn scheme(&self, classes: usize) -> Result<LabelShardScheme> {
        if self.groups.is_empty() {
            LabelShardScheme::contiguous(classes, self.clients, self.group_count)
                .map_err(|e| Error::config("partition.group_count", e.to_string()))
        } else {
            Ok(LabelShardScheme {
                groups: self.groups.clone(),
            })
        }
    }

    pub fn split(&self) -> SplitFractions {
        SplitFractions {
            test: self.test_fraction,
            val: self.val_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterKey {
    Tag,
    Hardware,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct LatencyConfig {
    /// CSV with `profile,layer,candidate,latency_ms` rows.
    pub tables: Option<PathBuf>,
    /// Profile bound into the search phase; groups use their own hardware.
    pub search_profile: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// CSV with `client_id,tag,hardware` rows.
    pub spec: Option<PathBuf>,
    pub key: ClusterKey,
    /// Refinement rounds per group.
    pub rounds: usize,
    /// Divide by the whole federation's data size instead of the group's.
    pub global_size_aggregation: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            spec: None,
            key: ClusterKey::Hardware,
            rounds: 10,
            global_size_aggregation: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSection {
    pub rounds: usize,
    #[serde(flatten)]
    pub hyper: SearchConfig,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            rounds: 40,
            hyper: SearchConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Run client updates on the thread pool.
    pub parallel: bool,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelSpec,
    pub search: SearchSection,
    pub retrain: RetrainConfig,
    pub latency: LatencyConfig,
    pub cluster: ClusterConfig,
}


impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            output_dir: PathBuf::from("runs/desk"),
            parallel: true,
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            model: ModelSpec::default(),
            search: SearchSection::default(),
            retrain: RetrainConfig::default(),
            latency: LatencyConfig::default(),
            cluster: ClusterConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().to_string())
                .map(|line| format!("line {line}"))
                .unwrap_or_else(|| "<document>".into());
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p {
                if inner.is_relative() {
                    *inner = base.join(&*inner);
                }
            }
        };
        resolve(&mut cfg.dataset.path);
        resolve(&mut cfg.latency.tables);
        resolve(&mut cfg.cluster.spec);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.path.is_none() {
            if d.classes < 2 {
                return Err(Error::config("dataset.classes", "must be at least 2"));
            }
            if d.per_class == 0 {
                return Err(Error::config("dataset.per_class", "must be at least 1"));
            }
            if d.shape.contains(&0) {
                return Err(Error::config("dataset.shape", "extents must be positive"));
            }
            if !(d.difficulty.is_finite() && d.difficulty >= 0.0) {
                return Err(Error::config("dataset.difficulty", "must be >= 0"));
            }
            if self.model.classes != d.classes {
                return Err(Error::config(
                    "model.classes",
                    format!("must equal dataset.classes ({})", d.classes),
                ));
            }
            if self.model.input_shape != d.shape {
                return Err(Error::config(
                    "model.input_shape",
                    "must equal dataset.shape",
                ));
            }
        }
        let p = &self.partition;
        if p.clients == 0 {
            return Err(Error::config("partition.clients", "must be at least 1"));
        }
        for (name, f) in [
            ("partition.test_fraction", p.test_fraction),
            ("partition.val_fraction", p.val_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        if self.model.layers == 0 {
            return Err(Error::config("model.layers", "must be at least 1"));
        }
        if self.model.width == 0 {
            return Err(Error::config("model.width", "must be at least 1"));
        }
        self.search
            .hyper
            .validate()
            .map_err(|e| prefix("search", e))?;
        self.retrain.validate()?;
        if self.search.hyper.latency_weight > 0.0
            && self.latency.search_profile.is_some()
            && self.latency.tables.is_none()
        {
            return Err(Error::config(
                "latency.tables",
                "a search profile is set but no table file is given",
            ));
        }
        Ok(())
    }

    /// Hex sha256 of the canonical JSON form of the config. The output
    /// directory and the execution mode do not change results and are left out.
    pub fn hash(&self) -> String {
        let mut content = self.clone();
        content.output_dir = PathBuf::new();
        content.parallel = true;
        let canonical = serde_json::to_string(&content).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn dataset(&self) -> Result<LabeledDataset> {
        match &self.dataset.path {
            Some(path) => {
                let file = std::fs::File::open(path)
                    .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
                let ds = read_dataset(std::io::BufReader::new(file))?;
                if ds.classes() != self.model.classes
                    || ds.example_shape() != self.model.input_shape
                {
                    return Err(Error::config(
                        "dataset.path",
                        "dataset shape or class count disagrees with model",
                    ));
                }
                Ok(ds)
            }
            None => generate_synthetic(
                self.dataset.classes,
                self.dataset.shape,
                self.dataset.per_class,
                self.dataset.difficulty,
                self.seed,
            ),
        }
    }
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config { field, message } => Error::config(format!("{section}.{field}"), message),
        other => other,
    }
}
