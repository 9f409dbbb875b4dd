//! Run configuration: one TOML file per experiment.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use kicrank::demo::Bm25Params;
use kicrank::eval::{Ablations, PipelineConfig};
use kicrank::gateway::{BackendKind, GatewayConfig};
use kicrank::prompt::{Mode, PromptConfig, Style};
use kicrank::retriever::TrainConfig;
use kicrank::Split;

pub const EFFECTIVE_CONFIG: &str = "effective-config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding train.txt, valid.txt, test.txt and optional text files.
    pub dataset: PathBuf,
    /// Picks prompt defaults; the dataset directory name when absent.
    pub dataset_name: Option<String>,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Split evaluated by predict/evaluate.
    pub split: Split,
    /// Evaluate only the first `limit` queries.
    pub limit: Option<usize>,
    pub m: usize,
    pub filter_candidates: bool,
    pub mode: Option<Mode>,
    pub style: Option<Style>,
    pub demo_batch_size: usize,
    pub budget: usize,
    pub reply_reserve: usize,
    /// Generate aligned relation templates in preprocess and verbalize with them.
    pub aligned_templates: bool,
    /// TOML file overriding the built-in prompt templates.
    pub prompt_templates: Option<PathBuf>,
    /// predict also writes the conversation sent for each query.
    pub save_conversations: bool,
    pub bm25: Bm25Params,
    pub ablations: Ablations,
    pub retriever: TrainConfig,
    pub gateway: GatewayConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let prompt = PromptConfig::default();
        Self {
            dataset: PathBuf::from("data"),
            dataset_name: None,
            output_dir: PathBuf::from("runs"),
            seed: 0,
            split: Split::Test,
            limit: None,
            m: 10,
            filter_candidates: true,
            mode: None,
            style: None,
            demo_batch_size: prompt.demo_batch_size,
            budget: prompt.budget,
            reply_reserve: prompt.reply_reserve,
            aligned_templates: false,
            prompt_templates: None,
            save_conversations: false,
            bm25: Bm25Params::default(),
            ablations: Ablations::default(),
            retriever: TrainConfig::default(),
            gateway: GatewayConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub backend: Option<BackendKind>,
    pub output_dir: Option<PathBuf>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path` and applies overrides. Input paths resolve against the
    /// config file's directory, the response cache against the output dir.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let dir = path
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let dir = fs::canonicalize(dir).with_context(|| format!("resolving {}", dir.display()))?;
        cfg.dataset = resolve(&dir, &cfg.dataset);
        cfg.prompt_templates = cfg.prompt_templates.map(|p| resolve(&dir, &p));
        cfg.gateway.script_path = cfg.gateway.script_path.map(|p| resolve(&dir, &p));
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(backend) = overrides.backend {
            cfg.gateway.backend = backend;
        }
        cfg.output_dir = match &overrides.output_dir {
            Some(o) => std::path::absolute(o).with_context(|| format!("resolving {}", o.display()))?,
            None => resolve(&dir, &cfg.output_dir),
        };
        cfg.gateway.cache_path = cfg.gateway.cache_path.map(|p| resolve(&cfg.output_dir, &p));
        cfg.finish()?;
        Ok(cfg)
    }

    /// Fills dataset-dependent defaults and checks invariants.
    fn finish(&mut self) -> Result<()> {
        let name = self.dataset_name().to_string();
        self.mode.get_or_insert(Mode::default_for_dataset(&name));
        self.style.get_or_insert(Style::default_for_dataset(&name));
        // one seed drives every stream
        self.retriever.seed = self.seed;
        if self.m == 0 {
            bail!("m must be at least 1");
        }
        if self.reply_reserve >= self.budget {
            bail!(
                "reply_reserve ({}) must be smaller than budget ({})",
                self.reply_reserve,
                self.budget
            );
        }
        if self.gateway.backend == BackendKind::Scripted && self.gateway.script_path.is_none() {
            bail!("the scripted backend needs gateway.script_path");
        }
        self.retriever
            .validate()
            .map_err(|e| anyhow::anyhow!("[retriever] {e}"))?;
        Ok(())
    }

    pub fn dataset_name(&self) -> &str {
        match &self.dataset_name {
            Some(n) => n,
            None => self.dataset.file_name().and_then(|n| n.to_str()).unwrap_or(""),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode.expect("resolved in finish")
    }

    pub fn style(&self) -> Style {
        self.style.expect("resolved in finish")
    }

    pub fn prompt(&self) -> PromptConfig {
        PromptConfig {
            mode: self.mode(),
            style: self.style(),
            budget: self.budget,
            reply_reserve: self.reply_reserve,
            demo_batch_size: self.demo_batch_size,
            no_icl: false,
            trivial_prompt: false,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            m: self.m,
            filter_candidates: self.filter_candidates,
            seed: self.seed,
            prompt: self.prompt(),
            ablations: self.ablations,
            bm25: self.bm25,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    /// Writes the resolved configuration next to the outputs.
    pub fn dump(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.output_dir)
            .with_context(|| format!("creating output dir {}", self.output_dir.display()))?;
        let path = self.path(EFFECTIVE_CONFIG);
        fs::write(&path, toml::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_text(dir: &Path, text: &str, overrides: &Overrides) -> Result<RunConfig> {
        let path = dir.join("run.toml");
        fs::write(&path, text).unwrap();
        RunConfig::load(&path, overrides)
    }

    #[test]
    fn defaults_follow_dataset_name() {
        let dir = tempfile::tempdir().unwrap();
        let wn = load_text(dir.path(), "dataset = \"data/WN18RR\"", &Overrides::default()).unwrap();
        assert_eq!((wn.mode(), wn.style()), (Mode::Score, Style::Wordnet));
        let fb = load_text(dir.path(), "dataset = \"data/FB15k-237\"", &Overrides::default()).unwrap();
        assert_eq!((fb.mode(), fb.style()), (Mode::Sort, Style::Freebase));
        let explicit = load_text(
            dir.path(),
            "dataset = \"data/WN18RR\"\nmode = \"sort\"",
            &Overrides::default(),
        )
        .unwrap();
        assert_eq!((explicit.mode(), explicit.style()), (Mode::Sort, Style::Wordnet));
    }

    #[test]
    fn overrides_and_paths() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = load_text(
            dir.path(),
            "dataset = \"d\"\nseed = 3\n[gateway]\ncache_path = \"cache.jsonl\"",
            &Overrides {
                seed: Some(9),
                backend: Some(BackendKind::Oracle),
                output_dir: Some(dir.path().join("out")),
            },
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.retriever.seed, 9);
        assert_eq!(cfg.gateway.backend, BackendKind::Oracle);
        assert!(cfg.dataset.is_absolute());
        assert_eq!(cfg.gateway.cache_path, Some(dir.path().join("out").join("cache.jsonl")));
    }

    #[test]
    fn effective_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = load_text(
            dir.path(),
            "dataset = \"d\"\nm = 7\n[ablations]\nno_icl = true\n[retriever]\ndim = 8",
            &Overrides::default(),
        )
        .unwrap();
        let dumped = cfg.dump().unwrap();
        let again = RunConfig::load(&dumped, &Overrides::default()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let o = Overrides::default();
        assert!(load_text(dir.path(), "m = 0", &o).is_err());
        assert!(load_text(dir.path(), "budget = 100\nreply_reserve = 200", &o).is_err());
        assert!(load_text(dir.path(), "bogus = 1", &o).is_err());
        assert!(load_text(dir.path(), "[gateway]\nbackend = \"scripted\"", &o).is_err());
    }
}
