use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PipelineError, SelectionPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pass {
    KbCoverage,
    ConfigMine,
    DockerfileLint,
    ComposeGraph,
    Sizes,
}

impl Pass {
    pub const ALL: [Pass; 5] = [
        Pass::KbCoverage,
        Pass::ConfigMine,
        Pass::DockerfileLint,
        Pass::ComposeGraph,
        Pass::Sizes,
    ];

    /// Whether the pass needs composed image filesystems.
    pub fn needs_layers(self) -> bool {
        matches!(self, Pass::KbCoverage | Pass::ConfigMine | Pass::ComposeGraph)
    }
}

impl fmt::Display for Pass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pass::KbCoverage => "kb-coverage",
            Pass::ConfigMine => "config-mine",
            Pass::DockerfileLint => "dockerfile-lint",
            Pass::ComposeGraph => "compose-graph",
            Pass::Sizes => "sizes",
        })
    }
}

fn default_passes() -> Vec<Pass> {
    Pass::ALL.to_vec()
}

fn one_u32() -> u32 {
    1
}

fn one_usize() -> usize {
    1
}

fn all_policy() -> SelectionPolicy {
    SelectionPolicy::All
}

fn two_usize() -> usize {
    2
}

fn two_u64() -> u64 {
    2
}

fn default_capture() -> u64 {
    4 << 20
}

/// A mining job, usually read from TOML:
///
/// ```toml
/// endpoint = "fixture:corpus"          # or https://registry-1.docker.io
/// repositories = ["library/mysql"]     # and/or dictionary = "words.txt"
/// selection = "latest-per-major"       # all | alpine-preferred | latest-per-major | cap-<n>
/// passes = ["sizes", "kb-coverage", "config-mine", "dockerfile-lint", "compose-graph"]
/// eviction_budget_bytes = 1073741824
/// parallelism = 4
/// output_dir = "out"
/// ```
///
/// Relative paths are resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningJobConfig {
    pub endpoint: String,
    /// Separate search endpoint for dictionary discovery and metadata.
    #[serde(default)]
    pub hub_endpoint: Option<String>,
    #[serde(default)]
    pub repositories: Vec<String>,
    /// Explicit `repo:tag` references, mined as given without selection.
    #[serde(default)]
    pub images: Vec<String>,
    /// One search word per line.
    #[serde(default)]
    pub dictionary: Option<PathBuf>,
    #[serde(default = "one_u32")]
    pub search_pages: u32,
    #[serde(default = "all_policy")]
    pub selection: SelectionPolicy,
    #[serde(default = "default_passes")]
    pub passes: Vec<Pass>,
    pub eviction_budget_bytes: u64,
    #[serde(default = "one_usize")]
    pub parallelism: usize,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/store`.
    #[serde(default)]
    pub store_dir: Option<PathBuf>,
    /// Knowledge base consulted by `kb-coverage`; a missing file is an empty base.
    #[serde(default)]
    pub kb_path: Option<PathBuf>,
    /// Add the mined images to the knowledge base after the run.
    #[serde(default)]
    pub kb_update: bool,
    /// TOML software profiles replacing the built-in ones.
    #[serde(default)]
    pub profiles: Option<PathBuf>,
    #[serde(default = "two_usize")]
    pub combination_size: usize,
    #[serde(default = "two_u64")]
    pub combination_min_support: u64,
    /// Files larger than this are not kept for configuration parsing.
    #[serde(default = "default_capture")]
    pub max_capture_bytes: u64,
}

impl MiningJobConfig {
    /// A config with defaults for everything but the required fields.
    pub fn new(endpoint: &str, eviction_budget_bytes: u64, output_dir: impl Into<PathBuf>) -> Self {
        MiningJobConfig {
            endpoint: endpoint.to_string(),
            hub_endpoint: None,
            repositories: Vec::new(),
            images: Vec::new(),
            dictionary: None,
            search_pages: 1,
            selection: SelectionPolicy::All,
            passes: default_passes(),
            eviction_budget_bytes,
            parallelism: 1,
            output_dir: output_dir.into(),
            store_dir: None,
            kb_path: None,
            kb_update: false,
            profiles: None,
            combination_size: 2,
            combination_min_support: 2,
            max_capture_bytes: default_capture(),
        }
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut c: MiningJobConfig = toml::from_str(text).map_err(|e| PipelineError::FatalConfig(e.to_string()))?;
        c.resolve_paths(base_dir);
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::FatalConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [
            &mut self.dictionary,
            &mut self.store_dir,
            &mut self.kb_path,
            &mut self.profiles,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if let Some(dir) = self.endpoint.strip_prefix("fixture:") {
            let p = Path::new(dir);
            if p.is_relative() {
                self.endpoint = format!("fixture:{}", base.join(p).display());
            }
        }
    }

    pub fn store_dir(&self) -> PathBuf {
        self.store_dir.clone().unwrap_or_else(|| self.output_dir.join("store"))
    }

    pub fn has_pass(&self, p: Pass) -> bool {
        self.passes.contains(&p)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fatal = |m: String| Err(PipelineError::FatalConfig(m));
        if self.parallelism == 0 {
            return fatal("parallelism must be at least 1".into());
        }
        if self.eviction_budget_bytes == 0 {
            return fatal("eviction_budget_bytes must be positive".into());
        }
        if self.search_pages == 0 {
            return fatal("search_pages must be at least 1".into());
        }
        if let Some(d) = &self.dictionary {
            if !d.is_file() {
                return fatal(format!("dictionary {} is not a readable file", d.display()));
            }
        }
        if let Some(p) = &self.profiles {
            if !p.is_file() {
                return fatal(format!("profiles {} is not a readable file", p.display()));
            }
        }
        Ok(())
    }
}
