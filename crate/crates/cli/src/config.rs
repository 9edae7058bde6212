use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use repacc_core::digest::to_pretty_json;
use repacc_core::judging::PanelDef;
use repacc_core::pipeline::{toy_config, StudyConfig, SubjectSource};
use repacc_core::report::GradientConfig;
use repacc_core::runner::ConditionId;
use repacc_core::{Error, Result};

pub const LOCK_FILE: &str = "config.lock.json";

/// Everything that shapes a run. Written once, before any stage executes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    pub subjects_manifest: Option<PathBuf>,
    pub provider: String,
    pub study: StudyConfig,
    pub stats: GradientConfig,
}

/// Values given on the command line; unset fields fall back to the lock
/// or to defaults.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub subjects_manifest: Option<PathBuf>,
    pub conditions: Option<Vec<ConditionId>>,
    pub panel: Option<Vec<String>>,
    pub seed_derangement: Option<u64>,
    pub seed_bootstrap: Option<u64>,
    pub seed_permutation: Option<u64>,
}

impl RunConfig {
    fn fresh(run_id: &str, o: &Overrides) -> Result<Self> {
        let mut c = Self {
            run_id: run_id.into(),
            subjects_manifest: None,
            provider: "toy".into(),
            study: toy_config(run_id),
            stats: GradientConfig::default(),
        };
        c.apply(o)?;
        Ok(c)
    }

    fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(p) = &o.subjects_manifest {
            self.subjects_manifest = Some(std::fs::canonicalize(p).map_err(|_| Error::MissingUpstream(format!("subject manifest {}", p.display())))?);
        }
        if let Some(c) = &o.conditions {
            self.study.conditions = c.clone();
        }
        if let Some(p) = &o.panel {
            self.study.panel = PanelDef {
                primary: p.clone(),
                sensitivity: vec![],
            };
        }
        if let Some(s) = o.seed_derangement {
            self.study.seed_derangement = s;
        }
        if let Some(s) = o.seed_bootstrap {
            self.stats.seed_bootstrap = s;
        }
        if let Some(s) = o.seed_permutation {
            self.stats.seed_permutation = s;
        }
        Ok(())
    }

    pub fn run_dir(&self, workdir: &Path) -> PathBuf {
        workdir.join(&self.run_id)
    }

    pub fn subjects(&self) -> Result<Vec<SubjectSource>> {
        let path = self
            .subjects_manifest
            .as_ref()
            .ok_or_else(|| Error::MissingUpstream("no subject manifest recorded for this run; pass --subjects".into()))?;
        load_manifest(path)
    }
}

/// Load the lock for `run_id`, or create it. Command-line values that
/// disagree with an existing lock are refused.
pub fn resolve(workdir: &Path, run_id: &str, o: &Overrides) -> Result<RunConfig> {
    let dir = workdir.join(run_id);
    let lock = dir.join(LOCK_FILE);
    if lock.exists() {
        let locked: RunConfig = serde_json::from_str(&std::fs::read_to_string(&lock)?)?;
        let mut wanted = locked.clone();
        wanted.apply(o)?;
        if wanted != locked {
            return Err(Error::invalid(format!(
                "run `{run_id}` is locked with a different configuration ({}); use a new --run-id",
                lock.display()
            )));
        }
        return Ok(locked);
    }
    let cfg = RunConfig::fresh(run_id, o)?;
    std::fs::create_dir_all(&dir)?;
    std::fs::write(&lock, to_pretty_json(&cfg)?)?;
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub name: String,
    pub source_title: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    /// Corpus file, relative to the manifest.
    pub corpus: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub subjects: Vec<ManifestEntry>,
}

pub fn load_manifest(path: &Path) -> Result<Vec<SubjectSource>> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingUpstream(format!("subject manifest {}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    m.subjects
        .into_iter()
        .map(|e| {
            let corpus = base.join(&e.corpus);
            let raw_text = std::fs::read_to_string(&corpus).map_err(|_| Error::MissingUpstream(format!("corpus {}", corpus.display())))?;
            Ok(SubjectSource {
                subject_id: e.subject_id,
                name: e.name,
                source_title: e.source_title,
                aliases: e.aliases,
                raw_text,
            })
        })
        .collect()
}
