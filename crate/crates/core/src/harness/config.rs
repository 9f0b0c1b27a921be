//! Experiment configuration, read from `key = value` files with `[section]`
//! headers.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregator::SimilaritySource;
use crate::data::tasks::ProxyTaskSpec;
use crate::error::{Error, Result};
use crate::trainer::TrainerConfig;

pub const OUTPUT_ROOT_ENV: &str = "AGGSSL_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Baseline,
    Pairwise,
    MtAssl,
    SelfAssl,
    Replay,
    LabelSweep,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Baseline => "baseline",
            ExperimentKind::Pairwise => "pairwise",
            ExperimentKind::MtAssl => "mt_assl",
            ExperimentKind::SelfAssl => "self_assl",
            ExperimentKind::Replay => "replay",
            ExperimentKind::LabelSweep => "label_sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    pub output_dir: PathBuf,
    #[serde(default = "one")]
    pub n_seeds: usize,
    #[serde(default)]
    pub tasks: Vec<String>,
    #[serde(default)]
    pub label_fractions: Vec<f64>,
    /// Replay table, relative to the config file.
    #[serde(default)]
    pub fixture: Option<PathBuf>,
    #[serde(default)]
    pub similarity_source: SimilaritySource,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default = "default_images")]
    pub n_images: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_images() -> usize {
    2896
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            n_images: default_images(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub trainer: TrainerConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("config")
                .to_string();
            Error::config(field, e.message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::parse(&text)?, text))
    }

    pub fn task_specs(&self) -> Result<Vec<ProxyTaskSpec>> {
        self.experiment.tasks.iter().map(|t| ProxyTaskSpec::from_name(t)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.n_seeds == 0 {
            return Err(Error::config("experiment.n_seeds", "must be at least 1"));
        }
        if e.output_dir.as_os_str().is_empty() {
            return Err(Error::config("experiment.output_dir", "must not be empty"));
        }
        if e.kind == ExperimentKind::Replay {
            if e.fixture.is_none() {
                return Err(Error::config("experiment.fixture", "required for replay"));
            }
            return Ok(());
        }
        self.trainer.validate().map_err(|err| match err {
            Error::Config { field, message } => Error::config(format!("trainer.{field}"), message),
            other => other,
        })?;
        if self.dataset.n_images < 64 {
            return Err(Error::config("dataset.n_images", "must be at least 64"));
        }
        let min_tasks = match e.kind {
            ExperimentKind::Pairwise | ExperimentKind::MtAssl => 2,
            _ => 1,
        };
        if e.tasks.len() < min_tasks {
            return Err(Error::config(
                "experiment.tasks",
                format!("{} needs at least {min_tasks} task(s)", e.kind.name()),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &e.tasks {
            ProxyTaskSpec::from_name(t).map_err(|_| Error::config("experiment.tasks", format!("unknown task `{t}`")))?;
            if !seen.insert(t) {
                return Err(Error::config("experiment.tasks", format!("duplicate task `{t}`")));
            }
        }
        if e.kind == ExperimentKind::LabelSweep {
            if e.label_fractions.is_empty() {
                return Err(Error::config("experiment.label_fractions", "required for label_sweep"));
            }
            if e.label_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
                return Err(Error::config("experiment.label_fractions", "values must lie in (0, 1]"));
            }
            if e.label_fractions.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config("experiment.label_fractions", "must be sorted ascending"));
            }
        }
        Ok(())
    }

    /// Output directory after applying the output-root override.
    pub fn output_dir(&self, root_override: Option<&Path>) -> PathBuf {
        match root_override {
            Some(root) => root.join(&self.experiment.output_dir),
            None => self.experiment.output_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "[experiment]\nkind = \"baseline\"\noutput_dir = \"out\"\ntasks = [\"rotation\"]\n";

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::parse(BASE).unwrap();
        assert_eq!(c.experiment.n_seeds, 1);
        assert_eq!(c.dataset.n_images, 2896);
        assert_eq!(c.trainer, TrainerConfig::default());
    }

    fn field_of(text: &str) -> String {
        match ExperimentConfig::parse(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of(&format!("{BASE}n_seeds = 0\n")), "experiment.n_seeds");
        assert_eq!(field_of(&format!("{BASE}[trainer]\nlr_proxy = -1.0\n")), "trainer.lr_proxy");
        assert_eq!(field_of(&format!("{BASE}[trainer]\nbogus = 1\n")), "bogus");
        let sweep = "[experiment]\nkind = \"label_sweep\"\noutput_dir = \"o\"\ntasks = [\"rotation\"]\nlabel_fractions = [0.5, 0.25]\n";
        assert_eq!(field_of(sweep), "experiment.label_fractions");
        let pair = "[experiment]\nkind = \"pairwise\"\noutput_dir = \"o\"\ntasks = [\"rotation\"]\n";
        assert_eq!(field_of(pair), "experiment.tasks");
        let dup = "[experiment]\nkind = \"pairwise\"\noutput_dir = \"o\"\ntasks = [\"rotation\", \"rotation\"]\n";
        assert_eq!(field_of(dup), "experiment.tasks");
        let replay = "[experiment]\nkind = \"replay\"\noutput_dir = \"o\"\n";
        assert_eq!(field_of(replay), "experiment.fixture");
    }

    #[test]
    fn output_root_override() {
        let c = ExperimentConfig::parse(BASE).unwrap();
        assert_eq!(c.output_dir(None), PathBuf::from("out"));
        assert_eq!(c.output_dir(Some(Path::new("/tmp/r"))), PathBuf::from("/tmp/r/out"));
    }
}
