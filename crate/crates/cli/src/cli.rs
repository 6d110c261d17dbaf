//! Argument parsing and subcommand dispatch.

use std::fs;
use std::io::{self, BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use provwf_core::eval::fixtures::write_standard_catalog;
use provwf_core::eval::{generate_cohort, run_ablation, run_trial_file, CohortSpec};
use provwf_core::executor::{MockRunner, RunReport, SubprocessRunner, TaskRunner, TaskState, REPORT_FILE};
use provwf_core::goal::KeywordInterpreter;
use provwf_core::inspect::{compute_summary, InspectionSummary};
use provwf_core::planner::Configuration;
use provwf_core::query::{
    parse, render_text, translate_natural, ArtifactRef, ContractBackend, FilenameBackend, ProvVerb, Query, QueryAdapter, QueryBackend,
};
use provwf_core::session::{DialogContext, PlanningSession, Reply};
use provwf_core::workspace::Workspace;
use serde_json::json;

use crate::adapter::OllamaAdapter;
use crate::exit::{self, CliError};
use crate::service::{self, AppState, ServeOptions};

#[derive(Debug, Parser)]
#[command(name = "provwf", version, about = "Provenance-first workflow engine for imaging cohorts")]
pub struct Cli {
    /// Workspace directory; created on first use.
    #[arg(short, long, global = true, env = "PROVWF_WORKSPACE", default_value = ".")]
    pub workspace: PathBuf,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create the workspace, optionally with the built-in rule catalog.
    Init {
        #[arg(long)]
        standard_catalog: bool,
    },
    /// Scan a dataset and register every file.
    Inspect {
        root: PathBuf,
        /// Regex with `subject` and optional `session` groups for scopes.
        #[arg(long)]
        scope_pattern: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Assemble a plan from a goal file, a request, or an interactive dialog.
    Plan(PlanArgs),
    /// Seal a draft plan so it can run.
    Approve { plan_id: String },
    /// Execute an approved plan.
    Run {
        plan_id: String,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..=256))]
        workers: u16,
        #[arg(long, value_enum, default_value_t = RunnerKind::Subprocess)]
        runner: RunnerKind,
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a query; reads stdin when the text is omitted or `-`.
    Query {
        text: Option<String>,
        #[arg(long, value_enum, default_value_t = BackendKind::Contract)]
        backend: BackendKind,
        /// Treat the text as a natural-language question for the adapter.
        #[arg(long)]
        ask: bool,
        #[arg(long)]
        json: bool,
    },
    /// Upstream provenance of an artifact id or `scope:name` reference.
    Trace {
        reference: String,
        #[arg(long)]
        json: bool,
    },
    /// Inspection summary from the registry and the latest (or given) run.
    Report {
        run_id: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Print the canonical DAG of an approved plan.
    Dag { plan_id: String },
    /// Serve the JSON API on the loopback interface.
    Serve {
        /// `loopback`, `localhost` or an IP address.
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        /// Permit a non-loopback bind address.
        #[arg(long)]
        allow_remote: bool,
    },
    /// Run a trial file, the query ablation, or generate a synthetic cohort.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// goal.toml, or `-` for stdin.
    #[arg(required_unless_present_any = ["request", "interactive"], conflicts_with_all = ["request", "interactive"])]
    pub goal: Option<PathBuf>,
    /// Free-text request matched against rule keywords.
    #[arg(long, conflicts_with = "interactive")]
    pub request: Option<String>,
    /// Read dialog messages line by line from stdin.
    #[arg(long)]
    pub interactive: bool,
    /// Directive answering a clarification, e.g. `fanout.lung_seg.image=all`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Follow-up message, e.g. an option number or "process them all".
    #[arg(long, value_name = "TEXT")]
    pub answer: Vec<String>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(required_unless_present_any = ["ablation", "cohort"], conflicts_with_all = ["ablation", "cohort"])]
    pub trial: Option<PathBuf>,
    #[arg(long, conflicts_with = "cohort")]
    pub ablation: bool,
    /// Cohort TOML; writes the synthetic dataset to --out.
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long, default_value = "eval-out")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RunnerKind {
    Mock,
    Subprocess,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Contract,
    Filename,
}

pub fn main_entry() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::classify(&e))
        }
    }
}

fn open(path: &Path) -> Result<Workspace> {
    Workspace::open(path).with_context(|| format!("opening workspace {}", path.display()))
}

fn adapter_for(ws: &Workspace) -> Result<Option<Arc<dyn QueryAdapter>>> {
    match OllamaAdapter::from_config(&ws.config().adapter) {
        None => Ok(None),
        Some(Ok(a)) => Ok(Some(Arc::new(a))),
        Some(Err(e)) => Err(CliError::BadInput(format!("adapter: {e}")).into()),
    }
}

fn read_text(arg: Option<&str>) -> Result<String> {
    match arg {
        Some(t) if t != "-" => Ok(t.to_owned()),
        _ => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s).context("reading stdin")?;
            Ok(s)
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<u8> {
    let root = cli.workspace;
    match cli.command {
        Command::Init { standard_catalog } => init(&root, standard_catalog),
        Command::Inspect { root: data, scope_pattern, json } => inspect(&root, &data, scope_pattern, json),
        Command::Plan(args) => plan(&root, args),
        Command::Approve { plan_id } => approve(&root, &plan_id),
        Command::Run { plan_id, workers, runner, json } => run(&root, &plan_id, workers.into(), runner, json),
        Command::Query { text, backend, ask, json } => query(&root, text.as_deref(), backend, ask, json),
        Command::Trace { reference, json } => trace(&root, &reference, json),
        Command::Report { run_id, json } => report(&root, run_id.as_deref(), json),
        Command::Dag { plan_id } => dag(&root, &plan_id),
        Command::Serve { bind, port, allow_remote } => serve(&root, bind, port, allow_remote),
        Command::Eval(args) => eval(args),
    }
}

fn init(root: &Path, standard_catalog: bool) -> Result<u8> {
    let ws = open(root)?;
    if standard_catalog {
        write_standard_catalog(&ws.catalog_dir()).context("writing the standard catalog")?;
        println!("wrote standard rules to {}", ws.catalog_dir().display());
    }
    println!("workspace ready at {}", ws.root().display());
    Ok(exit::OK)
}

fn print_summary(s: &InspectionSummary) {
    let pairs = |m: &std::collections::BTreeMap<String, usize>| m.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ");
    println!("files         {}", s.files);
    println!("subjects      {}", s.subjects);
    println!("sessions      {}", s.sessions);
    println!("organization  {}", s.organization);
    println!("types         {}", pairs(&s.type_counts));
    println!("modalities    {}", pairs(&s.modality_counts));
    println!("extraction    {}", pairs(&s.status_counts));
    if !s.manufacturers.is_empty() {
        println!("manufacturers {}", s.manufacturers.join(", "));
    }
    if let Some((lo, hi)) = s.slice_thickness_range {
        println!("thickness mm  {lo}..{hi}");
    }
}

fn inspect(root: &Path, data: &Path, scope_pattern: Option<String>, json: bool) -> Result<u8> {
    let mut ws = open(root)?;
    if let Some(p) = scope_pattern {
        let mut cfg = ws.config().clone();
        cfg.scope_pattern = Some(p);
        ws.save_config(cfg)?;
    }
    let rep = ws.inspect(data).with_context(|| format!("inspecting {}", data.display()))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&json!({ "summary": rep.summary, "new_ids": rep.inventory.new_ids.len() }))?);
    } else {
        println!("inspected {} ({} new records)", data.display(), rep.inventory.new_ids.len());
        print_summary(&rep.summary);
    }
    Ok(exit::OK)
}

/// Drafts never replace an approved plan with the same id.
fn persist(ws: &Workspace, config: &Configuration) -> Result<()> {
    if !config.is_approved() && ws.load_plan(config.plan_id()).is_ok_and(|p| p.is_approved()) {
        return Ok(());
    }
    ws.save_plan(config)?;
    Ok(())
}

fn plan(root: &Path, args: PlanArgs) -> Result<u8> {
    let ws = open(root)?;
    let catalog = ws.catalog()?;
    let adapter = adapter_for(&ws)?;
    let interpreter = KeywordInterpreter;
    let mut session = PlanningSession::new("cli");
    let say = |session: &mut PlanningSession, text: &str| -> Result<Reply> {
        let ctx =
            DialogContext { registry: ws.registry().snapshot(), catalog: &catalog, interpreter: &interpreter, adapter: adapter.as_deref() };
        let reply = session.advance_dialog(text, &ctx);
        if let Some(c) = session.configuration() {
            persist(&ws, c)?;
        }
        Ok(reply)
    };
    if args.interactive {
        let stdin = io::stdin();
        let mut out = io::stdout().lock();
        for line in stdin.lock().lines() {
            let line = line.context("reading stdin")?;
            if matches!(line.trim(), "quit" | "exit") {
                break;
            }
            if line.trim().is_empty() {
                continue;
            }
            let reply = say(&mut session, &line)?;
            writeln!(out, "{}\n", reply.text().trim_end())?;
        }
    } else {
        let first = match (&args.goal, &args.request) {
            (Some(path), _) if path.as_os_str() == "-" => read_text(None)?,
            (Some(path), _) => fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
            (None, Some(r)) => r.clone(),
            (None, None) => unreachable!("clap requires a source"),
        };
        let mut messages = vec![first];
        for d in &args.set {
            if !d.contains('=') {
                return Err(CliError::BadInput(format!("--set {d:?}: expected KEY=VALUE")).into());
            }
            messages.push(d.clone());
        }
        messages.extend(args.answer.iter().cloned());
        let mut last = None;
        for m in &messages {
            last = Some(say(&mut session, m)?);
        }
        let reply = last.expect("at least one message");
        if args.json {
            println!("{}", serde_json::to_string_pretty(&reply)?);
        } else {
            println!("{}", reply.text().trim_end());
        }
        if let Reply::Help { text } = &reply {
            if session.configuration().is_none() {
                return Err(CliError::PlanFailed(text.clone()).into());
            }
        }
    }
    match session.configuration() {
        Some(c) => {
            let open = c.clarifications().len();
            eprintln!(
                "plan {} saved ({})",
                c.plan_id(),
                if c.is_approved() {
                    "approved".into()
                } else if open > 0 {
                    format!("{open} open question(s)")
                } else {
                    "ready to approve".to_string()
                }
            );
            Ok(exit::OK)
        }
        None if args.interactive => Ok(exit::OK),
        None => Err(CliError::PlanFailed("no plan was assembled".into()).into()),
    }
}

fn approve(root: &Path, plan_id: &str) -> Result<u8> {
    let ws = open(root)?;
    let current = ws.load_plan(plan_id)?;
    if current.is_approved() {
        println!("plan {} is already approved (fingerprint {})", current.plan_id(), current.fingerprint());
        return Ok(exit::OK);
    }
    let sealed = ws.approve_plan(plan_id)?;
    println!("approved plan {} (fingerprint {})", sealed.plan_id(), sealed.fingerprint());
    Ok(exit::OK)
}

fn print_run(r: &RunReport) {
    println!("run {} of plan {}", r.run_id, r.plan_id);
    println!("  runner {}  workers {}", r.runner, r.workers);
    println!("  executed {}  skipped {}  failed {}  registered {}", r.executed, r.skipped, r.failed, r.artifacts_registered);
    for t in r.tasks.iter().filter(|t| t.state == TaskState::Failed) {
        println!("  FAILED {} {}: {}", t.rule_id, t.scope, t.diagnostics.as_deref().unwrap_or("blocked by a failed upstream task"));
    }
}

fn run(root: &Path, plan_id: &str, workers: usize, runner: RunnerKind, json: bool) -> Result<u8> {
    let ws = open(root)?;
    let runner: Box<dyn TaskRunner> = match runner {
        RunnerKind::Mock => Box::new(MockRunner::new()),
        RunnerKind::Subprocess => Box::new(SubprocessRunner),
    };
    let report = ws.run(plan_id, runner.as_ref(), workers).with_context(|| format!("running plan {plan_id}"))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print_run(&report);
    }
    if report.failed > 0 {
        return Err(CliError::RunFailed { run_id: report.run_id, failed: report.failed }.into());
    }
    Ok(exit::OK)
}

fn query(root: &Path, text: Option<&str>, backend: BackendKind, ask: bool, json: bool) -> Result<u8> {
    let ws = open(root)?;
    let text = read_text(text)?;
    let q = if ask {
        let adapter = adapter_for(&ws)?.ok_or_else(|| CliError::BadInput("--ask needs [adapter] endpoint in provwf.toml".into()))?;
        translate_natural(text.trim(), adapter.as_ref())?
    } else {
        parse(text.trim())?
    };
    let snap = ws.registry().snapshot();
    let result = match backend {
        BackendKind::Contract => ContractBackend::new(snap.clone()).evaluate(&q)?,
        BackendKind::Filename => FilenameBackend::new(snap.clone()).evaluate(&q)?,
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&result)?);
    } else {
        print!("{}", render_text(&result, &snap));
    }
    Ok(exit::OK)
}

fn trace(root: &Path, reference: &str, json: bool) -> Result<u8> {
    let ws = open(root)?;
    let snap = ws.registry().snapshot();
    let q = Query::Provenance { verb: ProvVerb::Trace, reference: ArtifactRef::parse(reference) };
    let result = ContractBackend::new(snap.clone()).evaluate(&q)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&result)?);
    } else {
        print!("{}", render_text(&result, &snap));
    }
    Ok(exit::OK)
}

fn report(root: &Path, run_id: Option<&str>, json: bool) -> Result<u8> {
    let ws = open(root)?;
    let summary = compute_summary(&ws.registry().snapshot());
    let run: Option<RunReport> = match run_id {
        Some(id) => Some(ws.load_run(id).map_err(|_| CliError::NotFound(format!("no run {id}")))?),
        None => {
            let latest = ws.root().join(REPORT_FILE);
            match fs::read_to_string(&latest) {
                Ok(text) => Some(serde_json::from_str(&text).with_context(|| format!("reading {}", latest.display()))?),
                Err(_) => None,
            }
        }
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&json!({ "summary": summary, "run": run }))?);
    } else {
        print_summary(&summary);
        match &run {
            Some(r) => print_run(r),
            None => println!("no runs yet"),
        }
    }
    Ok(exit::OK)
}

fn dag(root: &Path, plan_id: &str) -> Result<u8> {
    let ws = open(root)?;
    let config = ws.load_plan(plan_id)?;
    let dag = ws.dag(&config, &ws.catalog()?)?;
    let mut out = io::stdout().lock();
    out.write_all(&dag.canonical_bytes())?;
    writeln!(out)?;
    Ok(exit::OK)
}

fn serve(root: &Path, bind: Option<String>, port: Option<u16>, allow_remote: bool) -> Result<u8> {
    let ws = open(root)?;
    let defaults = ServeOptions::default();
    let opts = ServeOptions {
        bind: bind.or_else(|| ws.config().service.bind.clone()).unwrap_or(defaults.bind),
        port: port.or(ws.config().service.port).unwrap_or(defaults.port),
        allow_remote,
    };
    service::resolve_bind(&opts)?;
    let mut state = AppState::new(ws);
    if let Some(a) = adapter_for(state.workspace())? {
        state = state.with_adapter(a);
    }
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().context("starting the runtime")?;
    runtime.block_on(async move {
        let listener = service::listen(&opts).await?;
        eprintln!("listening on http://{}/v1", listener.local_addr()?);
        axum::serve(listener, service::router(Arc::new(state)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .context("serving")
    })?;
    Ok(exit::OK)
}

fn eval(args: EvalArgs) -> Result<u8> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    if args.ablation {
        let out = run_ablation(&args.out)?;
        let path = args.out.join("ablation_report.json");
        fs::write(&path, serde_json::to_string_pretty(&out)?)?;
        println!("{:<80} {:>8} {:>8} {:>8}", "query", "expected", "contract", "filename");
        let show = |v: Option<u64>| v.map_or("unknown".to_owned(), |n| n.to_string());
        for c in &out.cases {
            println!("{:<80} {:>8} {:>8} {:>8}", c.dsl, c.expected, show(c.contract), show(c.filename));
        }
        println!(
            "contract correct {}/{}; filename answered {}/{}",
            out.contract_correct,
            out.cases.len(),
            out.filename_answered,
            out.cases.len()
        );
        println!("report written to {}", path.display());
    } else if let Some(spec) = &args.cohort {
        let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
        let spec = CohortSpec::from_toml(&text).map_err(|e| CliError::BadInput(format!("cohort spec: {e}")))?;
        let cohort = generate_cohort(&spec, &args.out)?;
        println!("generated {} sessions under {}", cohort.sessions.len(), cohort.root.display());
    } else if let Some(trial) = &args.trial {
        let report = run_trial_file(trial, &args.out)?;
        println!("trial {}", report.name);
        println!(
            "  IRM {}%  PL {}  FO {}",
            report.irm_percent,
            report.pl_count,
            report.fo_percent.map_or("n/a".into(), |p| format!("{p}%"))
        );
        println!("  DAG identical across {} runs: {} ({})", report.runs, report.dag_equal, report.dag_digest);
        for (scope, why) in &report.failures {
            println!("  no output for {scope}: {why}");
        }
        println!("report written to {}", args.out.join(provwf_core::eval::trial::METRICS_FILE).display());
    }
    Ok(exit::OK)
}
