//! On-disk workspace: `provwf.toml`, the registry log, saved plans, run
//! directories and the single-run lock.

use std::fs::{self, OpenOptions};
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::catalog::{load_catalog, Catalog, CatalogError};
use crate::dag::{build_dag, DagError, WorkflowDag, DAG_FILE};
use crate::executor::{execute, ExecOptions, RunReport, TaskRunner, REPORT_FILE};
use crate::inspect::{inspect_dataset, InspectError, InspectReport, Inspector, ScopeMapping};
use crate::planner::{Configuration, PlanError};
use crate::registry::{Registry, RegistryError, REGISTRY_FILE};
use crate::store::{write_atomic, ContentStore, STORE_ENV};

pub const CONFIG_FILE: &str = "provwf.toml";
pub const PLANS_DIR: &str = "plans";
pub const RUNS_DIR: &str = "runs";
pub const DAGS_DIR: &str = "dags";
pub const LOCK_FILE: &str = "run.lock";

#[derive(Debug, thiserror::Error)]
pub enum WorkspaceError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{CONFIG_FILE}: {0}")]
    Config(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Inspect(#[from] InspectError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error("no plan matches {0:?}")]
    NoPlan(String),
    #[error("plan id prefix {0:?} is ambiguous")]
    AmbiguousPlan(String),
    #[error("plan {0} is not approved; approve it before running")]
    NotApproved(String),
    #[error("another run holds {0}")]
    Locked(String),
    #[error("no dataset has been inspected in this workspace")]
    NoDataset,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> WorkspaceError + '_ {
    move |source| WorkspaceError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: Option<String>,
    pub port: Option<u16>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Local model endpoint; absent means natural-language queries are
    /// refused.
    pub endpoint: Option<String>,
    pub model: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkspaceConfig {
    pub dataset_root: Option<PathBuf>,
    /// Directory of `*.rule.toml` files; defaults to `<workspace>/rules`.
    pub catalog: Option<PathBuf>,
    /// Content store root; `$PROVWF_STORE` wins when set.
    pub store: Option<PathBuf>,
    /// Regex with a `subject` (and optionally `session`) group applied to
    /// dataset-relative paths.
    pub scope_pattern: Option<String>,
    pub service: ServiceConfig,
    pub adapter: AdapterConfig,
}

/// An approved plan holding the run lock, not yet executed.
#[derive(Debug)]
pub struct PreparedRun {
    config: Configuration,
    run_id: String,
    _lock: RunLock,
}

impl PreparedRun {
    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn plan_id(&self) -> &str {
        self.config.plan_id()
    }
}

#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    config: WorkspaceConfig,
    registry: Arc<Registry>,
    store: ContentStore,
}

/// Held for the duration of a run; removes the lock file on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl Workspace {
    /// Opens (creating if needed) the workspace at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, WorkspaceError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let cfg_path = root.join(CONFIG_FILE);
        let config = if cfg_path.is_file() {
            let text = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
            toml::from_str(&text).map_err(|e| WorkspaceError::Config(e.message().to_owned()))?
        } else {
            WorkspaceConfig::default()
        };
        let registry = Arc::new(Registry::open(root.join(REGISTRY_FILE))?);
        let env_store = std::env::var_os(STORE_ENV).filter(|s| !s.is_empty());
        let store = match (&config.store, env_store) {
            (_, Some(p)) => ContentStore::new(p),
            (Some(p), None) => ContentStore::new(root.join(p)),
            (None, None) => ContentStore::for_workspace(&root),
        };
        Ok(Workspace { root, config, registry, store })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &WorkspaceConfig {
        &self.config
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn store(&self) -> &ContentStore {
        &self.store
    }

    pub fn save_config(&mut self, config: WorkspaceConfig) -> Result<(), WorkspaceError> {
        let text = toml::to_string_pretty(&config).map_err(|e| WorkspaceError::Config(e.to_string()))?;
        let path = self.root.join(CONFIG_FILE);
        write_atomic(&path, text.as_bytes()).map_err(io_err(&path))?;
        self.config = config;
        Ok(())
    }

    pub fn catalog_dir(&self) -> PathBuf {
        match &self.config.catalog {
            Some(p) => self.root.join(p),
            None => self.root.join("rules"),
        }
    }

    pub fn catalog(&self) -> Result<Catalog, WorkspaceError> {
        Ok(load_catalog(&self.catalog_dir())?)
    }

    pub fn dataset_root(&self) -> Result<PathBuf, WorkspaceError> {
        self.config.dataset_root.as_ref().map(|p| self.root.join(p)).ok_or(WorkspaceError::NoDataset)
    }

    fn inspector(&self) -> Result<Inspector, WorkspaceError> {
        Ok(match &self.config.scope_pattern {
            Some(p) => Inspector::with_mapping(ScopeMapping::pattern(p)?),
            None => Inspector::default(),
        })
    }

    /// Scans `dataset` and records it as this workspace's dataset root.
    pub fn inspect(&mut self, dataset: &Path) -> Result<InspectReport, WorkspaceError> {
        let abs = fs::canonicalize(dataset).map_err(io_err(dataset))?;
        let report = inspect_dataset(&self.inspector()?, &abs, &self.registry, &self.store, &self.root)?;
        if self.config.dataset_root.as_deref() != Some(abs.as_path()) {
            let mut cfg = self.config.clone();
            cfg.dataset_root = Some(abs);
            self.save_config(cfg)?;
        }
        Ok(report)
    }

    fn plan_path(&self, plan_id: &str) -> PathBuf {
        self.root.join(PLANS_DIR).join(format!("{plan_id}.json"))
    }

    pub fn dag_path(&self, plan_id: &str) -> PathBuf {
        self.root.join(DAGS_DIR).join(format!("{plan_id}.json"))
    }

    pub fn save_plan(&self, config: &Configuration) -> Result<PathBuf, WorkspaceError> {
        let path = self.plan_path(config.plan_id());
        write_atomic(&path, config.to_json_string().as_bytes()).map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn plan_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = fs::read_dir(self.root.join(PLANS_DIR))
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".json")).map(str::to_owned))
            .collect();
        ids.sort();
        ids
    }

    /// Loads a plan by id or unique id prefix.
    pub fn load_plan(&self, id: &str) -> Result<Configuration, WorkspaceError> {
        let matches: Vec<String> = self.plan_ids().into_iter().filter(|p| !id.is_empty() && p.starts_with(id)).collect();
        let found = match matches.as_slice() {
            [one] => one.clone(),
            [] => return Err(WorkspaceError::NoPlan(id.to_owned())),
            _ => return Err(WorkspaceError::AmbiguousPlan(id.to_owned())),
        };
        let path = self.plan_path(&found);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(Configuration::from_json_str(&text)?)
    }

    /// Seals a saved draft in place.
    pub fn approve_plan(&self, id: &str) -> Result<Configuration, WorkspaceError> {
        let sealed = crate::planner::approve(self.load_plan(id)?)?;
        self.save_plan(&sealed)?;
        Ok(sealed)
    }

    pub fn lock(&self) -> Result<RunLock, WorkspaceError> {
        let path = self.root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(WorkspaceError::Locked(path.display().to_string())),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    /// The canonical DAG of an approved plan, also written to
    /// `workflow.dag.json` and `dags/<id>.json`.
    pub fn dag(&self, config: &Configuration, catalog: &Catalog) -> Result<WorkflowDag, WorkspaceError> {
        if !config.is_approved() {
            return Err(WorkspaceError::NotApproved(config.plan_id().to_owned()));
        }
        let dag = build_dag(config, catalog, &self.registry.snapshot())?;
        let bytes = dag.canonical_bytes();
        for path in [self.root.join(DAG_FILE), self.dag_path(config.plan_id())] {
            write_atomic(&path, &bytes).map_err(io_err(&path))?;
        }
        Ok(dag)
    }

    /// Executes an approved plan under the workspace lock.
    pub fn run(&self, plan_id: &str, runner: &dyn TaskRunner, workers: usize) -> Result<RunReport, WorkspaceError> {
        let prepared = self.prepare_run(plan_id)?;
        self.execute_prepared(prepared, runner, workers)
    }

    /// Checks the approval gate and takes the run lock; the returned
    /// handle is the only way into [`Workspace::execute_prepared`].
    pub fn prepare_run(&self, plan_id: &str) -> Result<PreparedRun, WorkspaceError> {
        let config = self.load_plan(plan_id)?;
        if !config.is_approved() {
            return Err(WorkspaceError::NotApproved(config.plan_id().to_owned()));
        }
        let lock = self.lock()?;
        Ok(PreparedRun { config, run_id: uuid::Uuid::new_v4().to_string(), _lock: lock })
    }

    pub fn execute_prepared(&self, prepared: PreparedRun, runner: &dyn TaskRunner, workers: usize) -> Result<RunReport, WorkspaceError> {
        let PreparedRun { config, run_id, _lock } = prepared;
        let catalog = self.catalog()?;
        let dag = self.dag(&config, &catalog)?;
        let dataset_root = self.dataset_root().unwrap_or_else(|_| self.root.clone());
        let run_dir = self.root.join(RUNS_DIR).join(&run_id);
        let mut opts = ExecOptions::new(run_dir.join("tasks"), dataset_root, self.store.clone()).workers(workers);
        opts.run_id = run_id;
        let report = execute(&dag, runner, &self.registry, &opts);
        for path in [run_dir.join(REPORT_FILE), self.root.join(REPORT_FILE)] {
            report.write(&path).map_err(io_err(&path))?;
        }
        Ok(report)
    }

    pub fn load_run(&self, run_id: &str) -> Result<RunReport, WorkspaceError> {
        let path = self.root.join(RUNS_DIR).join(run_id).join(REPORT_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| WorkspaceError::Io { path: path.display().to_string(), source: io::Error::other(e) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::MockRunner;
    use crate::goal::Goal;
    use crate::planner::assemble;

    const CONVERT: &str = "action = \"\"\n[rule]\nid = \"convert\"\nversion = \"1\"\n[[input]]\nname = \"raw\"\ntype = \"dicom_series\"\n[[output]]\nname = \"nifti\"\ntype = \"nifti_image\"\n";

    #[test]
    fn inspect_plan_approve_run() {
        let d = tempfile::tempdir().unwrap();
        let data = d.path().join("data");
        fs::create_dir_all(data.join("S1/a")).unwrap();
        fs::write(data.join("S1/a/x.dcm"), b"x").unwrap();
        let ws_root = d.path().join("ws");
        let mut ws = Workspace::open(&ws_root).unwrap();
        fs::create_dir_all(ws.catalog_dir()).unwrap();
        fs::write(ws.catalog_dir().join("convert.rule.toml"), CONVERT).unwrap();
        ws.inspect(&data).unwrap();
        let ws = Workspace::open(&ws_root).unwrap();
        assert!(ws.dataset_root().is_ok());
        let cat = ws.catalog().unwrap();
        let draft = assemble(&Goal::new("nifti_image"), &ws.registry().snapshot(), &cat).unwrap();
        ws.save_plan(&draft).unwrap();
        let id = draft.plan_id().to_owned();
        assert!(matches!(ws.run(&id, &MockRunner::new(), 1), Err(WorkspaceError::NotApproved(_))));
        assert!(!ws_root.join(DAG_FILE).exists());
        ws.approve_plan(&id[..6]).unwrap();
        let lock = ws.lock().unwrap();
        assert!(matches!(ws.run(&id, &MockRunner::new(), 1), Err(WorkspaceError::Locked(_))));
        drop(lock);
        let report = ws.run(&id, &MockRunner::new(), 2).unwrap();
        assert_eq!(report.executed, 1);
        assert!(ws_root.join(DAG_FILE).is_file());
        assert_eq!(ws.load_run(&report.run_id).unwrap(), report);
        let again = ws.run(&id, &MockRunner::new(), 2).unwrap();
        assert_eq!(again.skipped, 1);
    }
}
