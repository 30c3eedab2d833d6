//! The commands behind the `vsplit` binary.
//!
//! Offline splitting and the hub's run-time path share [`run_pipeline`]:
//! parse, map the query to device lists, annotate, split.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;
use vsplit_core::annotation::annotate;
use vsplit_core::dom::{parse_html, serialize_html, DomDocument};
use vsplit_core::mapping::{
    classify_element, evaluate_query, semantic_links, table_class, ElementClass, GeometryTable, MappingOptions,
    MappingQuery, DEFAULT_REGION_THRESHOLD,
};
use vsplit_core::splitter::{check_split, runtime_config, split, Manifest, SplitConfig, SplitError, SplitResult};
use vsplit_core::sync_hub::{Scenario, SessionApp, SimulationError, SimulationReport};

/// A command failure, carrying the process exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    BadInput(String),
    #[error("the query has region leaves but no geometry was given (use --geometry)")]
    MissingGeometry,
    #[error("annotation violates its invariants: {0}")]
    Annotation(String),
    #[error("port {port} is busy: {source}")]
    PortBusy { port: u16, source: std::io::Error },
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::BadInput(_) => 2,
            CliError::MissingGeometry => 3,
            CliError::Annotation(_) => 4,
            CliError::PortBusy { .. } => 5,
            CliError::Io(_) => 1,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::BadInput(format!("cannot read {}: {e}", path.display())))
}

fn parse_url(s: &str) -> Result<Url, CliError> {
    Url::parse(s).map_err(|e| CliError::BadInput(format!("invalid base URL {s:?}: {e}")))
}

pub fn load_document(path: &Path, base_url: Option<&str>) -> Result<DomDocument, CliError> {
    let base = base_url.map(parse_url).transpose()?;
    parse_html(&read(path)?, base).map_err(|e| CliError::BadInput(format!("{}: {e}", path.display())))
}

pub fn load_query(path: &Path) -> Result<MappingQuery, CliError> {
    let query: MappingQuery = serde_json::from_slice(&read(path)?)
        .map_err(|e| CliError::BadInput(format!("{}: invalid query: {e}", path.display())))?;
    query.validate().map_err(|e| CliError::BadInput(format!("{}: {e}", path.display())))?;
    Ok(query)
}

pub fn load_geometry(path: &Path) -> Result<GeometryTable, CliError> {
    serde_json::from_slice(&read(path)?)
        .map_err(|e| CliError::BadInput(format!("{}: invalid geometry: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// classify

/// One row of the classification report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRow {
    pub node: String,
    pub tag: String,
    pub html_id: Option<String>,
    pub class: ElementClass,
    /// The element is Interactive only because of a declarative listener.
    pub role_change: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassReport {
    pub rows: Vec<ClassRow>,
    /// Referrer/referee pairs (node ids) that must share a device.
    pub links: Vec<(String, String)>,
}

impl ClassReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let id = r.html_id.as_deref().map(|i| format!("#{i}")).unwrap_or_else(|| "-".into());
            let flag = if r.role_change { "role-change→interactive" } else { "" };
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", r.node, r.tag, id, r.class, flag);
        }
        for (a, b) in &self.links {
            let _ = writeln!(out, "link\t{a}\t{b}");
        }
        out
    }
}

pub fn classify_document(doc: &DomDocument) -> ClassReport {
    let Some(body) = doc.body() else {
        return ClassReport::default();
    };
    let rows = doc
        .descendants(&body)
        .into_iter()
        .skip(1)
        .filter_map(|n| {
            let el = doc.element(&n)?;
            let class = classify_element(&el.tag, &el.attributes);
            Some(ClassRow {
                node: n.to_string(),
                tag: el.tag.clone(),
                html_id: el.attributes.get("id").map(str::to_string),
                class,
                role_change: class == ElementClass::Interactive && table_class(&el.tag) != ElementClass::Interactive,
            })
        })
        .collect();
    let links = semantic_links(doc).into_iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
    ClassReport { rows, links }
}

pub fn cmd_classify(input: &Path) -> Result<ClassReport, CliError> {
    Ok(classify_document(&load_document(input, None)?))
}

// ---------------------------------------------------------------------------
// split

#[derive(Debug, Clone)]
pub struct SplitArgs {
    pub input: PathBuf,
    pub query: PathBuf,
    pub geometry: Option<PathBuf>,
    pub base_url: Option<String>,
    pub region_threshold: f64,
    pub session_id: Option<String>,
    pub hub_url: Option<String>,
}

impl SplitArgs {
    pub fn new(input: impl Into<PathBuf>, query: impl Into<PathBuf>) -> Self {
        SplitArgs {
            input: input.into(),
            query: query.into(),
            geometry: None,
            base_url: None,
            region_threshold: DEFAULT_REGION_THRESHOLD,
            session_id: None,
            hub_url: None,
        }
    }
}

/// `manifest.json`: the split's counts and session, plus what a later
/// `serve --dir` needs to re-split at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    #[serde(flatten)]
    pub manifest: Manifest,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default = "default_threshold")]
    pub region_threshold: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_REGION_THRESHOLD
}

/// The result of the shared pipeline, with everything needed to serve it.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub result: SplitResult,
    pub app: SessionApp,
    pub manifest: SplitManifest,
}

fn split_error(e: SplitError) -> CliError {
    match e {
        SplitError::InvalidAnnotation(_) | SplitError::UnreachableContent(_) | SplitError::Annotation(_) => {
            CliError::Annotation(e.to_string())
        }
        other => CliError::BadInput(other.to_string()),
    }
}

/// Parses, maps, annotates and splits. Geometry keys may be node ids or
/// `#htmlid`.
pub fn run_pipeline(
    doc: &DomDocument,
    query: &MappingQuery,
    geometry: Option<&GeometryTable>,
    options: MappingOptions,
    config: SplitConfig,
) -> Result<Pipeline, CliError> {
    if query.has_region() && geometry.is_none() {
        return Err(CliError::MissingGeometry);
    }
    let geometry = match geometry {
        Some(g) => g.resolve_html_ids(doc).map_err(|e| CliError::BadInput(e.to_string()))?,
        None => GeometryTable::new(),
    };
    let lists = evaluate_query(doc, query, &geometry, &options).map_err(|e| CliError::BadInput(e.to_string()))?;
    let annotated = annotate(doc, &lists).map_err(|e| CliError::Annotation(e.to_string()))?;
    let result = split(&annotated, &config).map_err(split_error)?;
    let problems = check_split(&annotated, &result);
    if !problems.is_empty() {
        return Err(CliError::Annotation(problems.join("; ")));
    }
    let manifest = SplitManifest {
        manifest: result.manifest.clone(),
        base_url: doc.base_url().map(|u| u.to_string()),
        region_threshold: options.region_threshold,
    };
    let app = SessionApp { master: result.master.clone(), split: result.clone(), config, options, geometry };
    Ok(Pipeline { result, app, manifest })
}

fn split_config(args: &SplitArgs) -> SplitConfig {
    let mut config = SplitConfig { session_id: args.session_id.clone(), ..SplitConfig::default() };
    if let Some(hub) = &args.hub_url {
        config.hub_url = hub.clone();
    }
    config
}

pub fn split_from_args(args: &SplitArgs) -> Result<Pipeline, CliError> {
    if !(0.0..=1.0).contains(&args.region_threshold) {
        return Err(CliError::BadInput(format!("region threshold {} is outside [0, 1]", args.region_threshold)));
    }
    let doc = load_document(&args.input, args.base_url.as_deref())?;
    let query = load_query(&args.query)?;
    let geometry = args.geometry.as_deref().map(load_geometry).transpose()?;
    let options = MappingOptions { region_threshold: args.region_threshold };
    run_pipeline(&doc, &query, geometry.as_ref(), options, split_config(args))
}

pub const MASTER_FILE: &str = "master.html";
pub const SLAVE_FILE: &str = "slave.html";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Splits and writes `master.html`, `slave.html` and `manifest.json` to `out`.
pub fn cmd_split(args: &SplitArgs, out: &Path) -> Result<SplitManifest, CliError> {
    let pipeline = split_from_args(args)?;
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", out.display()));
    fs::create_dir_all(out).map_err(io)?;
    fs::write(out.join(MASTER_FILE), serialize_html(&pipeline.result.master, true)).map_err(io)?;
    fs::write(out.join(SLAVE_FILE), serialize_html(&pipeline.result.slave, true)).map_err(io)?;
    let mut manifest = serde_json::to_string_pretty(&pipeline.manifest).expect("manifest serializes");
    manifest.push('\n');
    fs::write(out.join(MANIFEST_FILE), manifest).map_err(io)?;
    Ok(pipeline.manifest)
}

/// Rebuilds a served application from a `split` output directory.
pub fn load_split_dir(dir: &Path) -> Result<(String, SessionApp), CliError> {
    let manifest: SplitManifest = serde_json::from_slice(&read(&dir.join(MANIFEST_FILE))?)
        .map_err(|e| CliError::BadInput(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let master = load_document(&dir.join(MASTER_FILE), manifest.base_url.as_deref())?;
    let slave = load_document(&dir.join(SLAVE_FILE), None)?;
    let runtime = runtime_config(&master)
        .ok_or_else(|| CliError::BadInput(format!("{}: no vs-config element", dir.join(MASTER_FILE).display())))?;
    let session = manifest.manifest.session.clone();
    let config = SplitConfig { hub_url: runtime.hub, session_id: Some(session.clone()), ..SplitConfig::default() };
    let result = SplitResult { master: master.clone(), slave, session_id: session.clone(), manifest: manifest.manifest };
    let app = SessionApp {
        master,
        split: result,
        config,
        options: MappingOptions { region_threshold: manifest.region_threshold },
        geometry: GeometryTable::new(),
    };
    Ok((session, app))
}

// ---------------------------------------------------------------------------
// simulate

pub fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    Scenario::load(path).map_err(|e| CliError::BadInput(e.to_string()))
}

/// Runs a scenario. Scenario errors (unknown nodes, unsplittable documents)
/// are bad input; a simulation that cannot settle is reported as a failed run.
pub fn cmd_simulate(scenario: &Scenario) -> Result<SimulationReport, CliError> {
    match vsplit_core::sync_hub::simulate(scenario) {
        Ok(report) => Ok(report),
        Err(e @ SimulationError::Livelock(_)) => Err(CliError::Io(e.to_string())),
        Err(e) => Err(CliError::BadInput(e.to_string())),
    }
}
