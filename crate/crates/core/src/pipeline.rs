//! File-level orchestration of the pipeline stages and their artifacts.
//!
//! Every artifact carries the hash of the resolved [`RunConfig`]: JSON files
//! in a `config_hash` field, CSV files in a leading `# config_hash=` comment
//! line. Outputs never include timestamps or absolute paths, so repeated runs
//! with the same configuration and inputs are byte-identical.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::car::{self, Acceptance, ModelError, ModelFit, ModelSpec, ScalarSummary};
use crate::cluster::{agglomerate, ClusterConfig, ClusterError, MergeTree};
use crate::config::{ConfigError, RunConfig, TemplateSource};
use crate::diagnostics::TraceDiagnostics;
use crate::eval::{EvalError, EvalReport, ReplicateRow};
use crate::gmrf::GmrfSampler;
use crate::graph::{self, AreaGraph, GraphError, PolygonOptions};
use crate::risk::{CountPanel, RiskError};
use crate::select::{self, derive_seed, DicResult, SweepError, SweepResult};
use crate::sim::{self, SimError, SimScenario, Template, TemplateSpec};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Graph { path: PathBuf, source: GraphError },
    #[error("{path}: {source}")]
    Risk { path: PathBuf, source: RiskError },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {message}")]
    Content { path: PathBuf, message: String },
    #[error("missing input: {0}")]
    MissingInput(&'static str),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Sweep(#[from] SweepError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("prior risk matrix: {0}")]
    Psi(RiskError),
}

type Result<T> = std::result::Result<T, PipelineError>;

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    writeln!(w).and_then(|_| w.flush()).map_err(io_at(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Opens a CSV file for writing and emits the hash comment line.
fn create_csv(path: &Path, config_hash: &str) -> Result<BufWriter<File>> {
    let mut w = create(path)?;
    writeln!(w, "# config_hash={config_hash}").map_err(io_at(path))?;
    Ok(w)
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> PipelineError + '_ {
    move |source| PipelineError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Graph and counts as named by the input section of a config.
pub fn load_inputs(config: &RunConfig) -> Result<(AreaGraph, CountPanel)> {
    let input = &config.input;
    let counts = input.counts.as_deref().ok_or(PipelineError::MissingInput("counts file"))?;
    let read_panel = |ids: Option<&[String]>| -> Result<CountPanel> {
        CountPanel::from_csv(open(counts)?, ids, &input.study_period).map_err(|source| PipelineError::Risk {
            path: counts.to_path_buf(),
            source,
        })
    };
    let ids = match &input.ids {
        Some(path) => Some(graph::load_ids(open(path)?).map_err(|source| PipelineError::Graph {
            path: path.clone(),
            source,
        })?),
        None => None,
    };

    let (graph, panel) = if let Some(path) = &input.geojson {
        let options = PolygonOptions {
            id_property: input.id_property.clone(),
            queen: input.queen,
            ..PolygonOptions::default()
        };
        let g = graph::adjacency_from_polygons(open(path)?, &options).map_err(|source| PipelineError::Graph {
            path: path.clone(),
            source,
        })?;
        let g = match &ids {
            Some(ids) => reorder(&g, ids).map_err(|source| PipelineError::Graph {
                path: input.ids.clone().unwrap_or_default(),
                source,
            })?,
            None => g,
        };
        let panel = read_panel(Some(g.ids()))?;
        (g, panel)
    } else {
        let path = input.graph.as_deref().ok_or(PipelineError::MissingInput("graph (edge list or GeoJSON)"))?;
        let panel = read_panel(ids.as_deref())?;
        let g = graph::load_edge_list(open(path)?, panel.ids()).map_err(|source| PipelineError::Graph {
            path: path.to_path_buf(),
            source,
        })?;
        (g, panel)
    };
    if panel.n() != graph.n() {
        return Err(PipelineError::Content {
            path: counts.to_path_buf(),
            message: format!("counts cover {} units, graph has {}", panel.n(), graph.n()),
        });
    }
    Ok((graph, panel))
}

/// Relabels a graph to follow an explicit id order.
fn reorder(g: &AreaGraph, ids: &[String]) -> std::result::Result<AreaGraph, GraphError> {
    if ids.len() != g.n() {
        return Err(GraphError::UnknownId(format!("{} ids for {} polygons", ids.len(), g.n())));
    }
    let pos: Vec<usize> = ids
        .iter()
        .map(|id| g.index_of(id).ok_or_else(|| GraphError::UnknownId(id.clone())))
        .collect::<std::result::Result<_, _>>()?;
    let mut new_index = vec![0; g.n()];
    for (new, &old) in pos.iter().enumerate() {
        new_index[old] = new;
    }
    AreaGraph::new(ids.to_vec(), g.edges().iter().map(|&(a, b)| (new_index[a], new_index[b])))
}

/// Stage 1: prior-period log-SIRs clustered under the contiguity constraint.
/// Also returns how many zero prior counts were replaced by the adjustment.
pub fn build_tree(config: &RunConfig, graph: &AreaGraph, panel: &CountPanel) -> Result<(MergeTree, usize)> {
    let psi = panel.build_psi(config.clustering.zero_adjust).map_err(PipelineError::Psi)?;
    let zeros = psi.zero_cells();
    if zeros > 0 {
        warn!("{zeros} zero prior counts replaced by {}", config.clustering.zero_adjust);
    }
    Ok((agglomerate(graph, &psi, config.clustering.linkage, config.clustering.seed)?, zeros))
}

/// Stage 2: fit every candidate cut of the tree and select by DIC.
pub fn run_sweep(config: &RunConfig, graph: &AreaGraph, panel: &CountPanel, tree: &MergeTree) -> Result<SweepResult> {
    let settings = config.selection.sweep_settings(tree, config.threads);
    Ok(select::sweep(graph, panel.study_observed(), panel.study_expected(), tree, &settings)?)
}

/// Fits one configuration with the chain seed the sweep would use for it.
pub fn fit_one(
    config: &RunConfig,
    graph: &AreaGraph,
    panel: &CountPanel,
    clusters: ClusterConfig,
) -> Result<(ModelFit, DicResult)> {
    let sel = &config.selection;
    let spec = ModelSpec::new(
        graph,
        clusters,
        panel.study_observed().to_vec(),
        panel.study_expected().to_vec(),
        sel.priors,
    )?;
    let mcmc = car::McmcSettings {
        seed: derive_seed(sel.mcmc.seed, spec.k()),
        ..sel.mcmc
    };
    let fit = car::fit(&spec, &mcmc)?;
    let dic = select::dic(&fit, &spec, sel.plug_in, sel.convention);
    Ok((fit, dic))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitDiagnostics {
    pub id: String,
    pub ess: f64,
    pub geweke_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssReport {
    pub tau: TraceDiagnostics,
    pub phi: Vec<UnitDiagnostics>,
}

/// JSON summary of one fitted configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub config_hash: String,
    pub k: usize,
    pub dic: f64,
    pub dbar: f64,
    pub pd: f64,
    pub alpha_summary: Vec<ScalarSummary>,
    pub tau_summary: ScalarSummary,
    pub acceptance: Acceptance,
    pub ess: EssReport,
    pub max_abs_phi_sum: f64,
    /// Relative to the directory holding the report.
    pub risk_csv_path: String,
}

impl FitReport {
    pub fn new(fit: &ModelFit, dic: &DicResult, ids: &[String], risk_csv: &str, config_hash: &str) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            k: fit.k,
            dic: dic.dic,
            dbar: dic.dbar,
            pd: dic.pd,
            alpha_summary: fit.alpha.clone(),
            tau_summary: fit.tau,
            acceptance: fit.acceptance,
            ess: EssReport {
                tau: fit.diagnostics.tau,
                phi: fit
                    .diagnostics
                    .phi
                    .iter()
                    .map(|(i, d)| UnitDiagnostics {
                        id: ids[*i].clone(),
                        ess: d.ess,
                        geweke_z: d.geweke_z,
                    })
                    .collect(),
            },
            max_abs_phi_sum: fit.max_abs_phi_sum,
            risk_csv_path: risk_csv.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub k: usize,
    pub error: String,
}

/// JSON form of a [`SweepResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub selected_k: usize,
    pub near_ties: Vec<usize>,
    pub curve: Vec<DicResult>,
    pub failures: Vec<SweepFailure>,
    pub selected: FitReport,
}

impl SweepReport {
    pub fn new(result: &SweepResult, ids: &[String], risk_csv: &str, config_hash: &str) -> Self {
        let sel = result.selected();
        Self {
            config_hash: config_hash.to_string(),
            selected_k: result.selected_k,
            near_ties: result.near_ties.clone(),
            curve: result.curve(),
            failures: result
                .failures
                .iter()
                .map(|(k, e)| SweepFailure { k: *k, error: e.clone() })
                .collect(),
            selected: FitReport::new(&sel.fit, &sel.dic, ids, risk_csv, config_hash),
        }
    }
}

/// Cluster labels keyed by unit id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedConfig {
    pub config_hash: String,
    pub k: usize,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
}

impl SelectedConfig {
    pub fn new(config: &ClusterConfig, ids: &[String], config_hash: &str) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            k: config.k(),
            ids: ids.to_vec(),
            labels: config.assignment().to_vec(),
        }
    }

    /// The partition in the unit order of `ids`.
    pub fn to_config(&self, ids: &[String]) -> std::result::Result<ClusterConfig, String> {
        if self.ids.len() != self.labels.len() {
            return Err(format!("{} ids but {} labels", self.ids.len(), self.labels.len()));
        }
        let by_id: HashMap<&str, usize> = self.ids.iter().map(String::as_str).zip(self.labels.iter().copied()).collect();
        if by_id.len() != ids.len() {
            return Err(format!("{} labelled units, expected {}", by_id.len(), ids.len()));
        }
        let labels: Vec<usize> = ids
            .iter()
            .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| format!("no label for unit {id:?}")))
            .collect::<std::result::Result<_, _>>()?;
        Ok(ClusterConfig::from_labels(&labels))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RiskRow {
    id: String,
    post_mean: f64,
    lower95: f64,
    upper95: f64,
    cluster: usize,
}

pub fn write_tree(path: &Path, tree: &MergeTree, config_hash: &str) -> Result<()> {
    let mut w = create(path)?;
    tree.write_json(&mut w, Some(config_hash)).map_err(|e| PipelineError::Content {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    writeln!(w).and_then(|_| w.flush()).map_err(io_at(path))
}

pub fn read_tree(path: &Path, n: usize) -> Result<MergeTree> {
    MergeTree::read_json(open(path)?, n).map_err(|e| PipelineError::Content {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// `k,dbar,pd,dic`
pub fn write_dic_curve(path: &Path, curve: &[DicResult], config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_csv(path, config_hash)?);
    for d in curve {
        w.serialize(d).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_at(path))
}

/// `id,post_mean,lower95,upper95,cluster`
pub fn write_risk_csv(path: &Path, fit: &ModelFit, clusters: &ClusterConfig, ids: &[String], config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_csv(path, config_hash)?);
    for (i, r) in fit.risk.iter().enumerate() {
        w.serialize(RiskRow {
            id: ids[i].clone(),
            post_mean: r.mean,
            lower95: r.lower95,
            upper95: r.upper95,
            cluster: clusters.label(i),
        })
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_at(path))
}

/// Posterior mean risk keyed by unit id.
pub fn read_risk_csv(path: &Path) -> Result<HashMap<String, f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(open(path)?);
    let mut out = HashMap::new();
    for row in reader.deserialize::<RiskRow>() {
        let row = row.map_err(csv_err(path))?;
        out.insert(row.id, row.post_mean);
    }
    Ok(out)
}

/// Where [`run_pipeline`] put its artifacts and what it selected.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config_hash: String,
    pub selected_k: usize,
    pub near_ties: Vec<usize>,
    pub zero_adjusted_cells: usize,
    pub out_dir: PathBuf,
}

pub const TREE_FILE: &str = "tree.json";
pub const SWEEP_FILE: &str = "sweep.json";
pub const DIC_CURVE_FILE: &str = "dic_curve.csv";
pub const RISK_FILE: &str = "risk.csv";
pub const SELECTED_FILE: &str = "selected_config.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const STATUS_FILE: &str = "status.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub config_hash: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Zero prior counts replaced by the adjustment when building the tree.
    #[serde(default)]
    pub zero_adjusted_cells: usize,
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    config_hash: String,
    config: &'a RunConfig,
}

fn write_resolved_config(dir: &Path, config: &RunConfig, hash: &str) -> Result<()> {
    let resolved = RunConfig {
        threads: None,
        ..config.clone()
    };
    write_json(
        &dir.join(RESOLVED_CONFIG_FILE),
        &ResolvedConfig {
            config_hash: hash.to_string(),
            config: &resolved,
        },
    )
}

/// Runs clustering, the DIC sweep and selection, writing every artifact to
/// `out_dir`. On failure `status.json` records the error so that partial
/// artifacts are recognisable.
pub fn run_pipeline(config: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    config.validate()?;
    let hash = config.hash();
    create_dir(out_dir)?;
    let status_path = out_dir.join(STATUS_FILE);
    // a stale status from an earlier run must not survive a crash
    let _ = fs::remove_file(&status_path);
    let outcome = run_stages(config, out_dir, &hash);
    let status = RunStatus {
        config_hash: hash.clone(),
        status: if outcome.is_ok() { "ok" } else { "failed" }.to_string(),
        error: outcome.as_ref().err().map(ToString::to_string),
        zero_adjusted_cells: outcome.as_ref().map_or(0, |o| o.zero_adjusted_cells),
    };
    write_json(&status_path, &status)?;
    outcome
}

fn run_stages(config: &RunConfig, out_dir: &Path, hash: &str) -> Result<RunOutcome> {
    write_resolved_config(out_dir, config, hash)?;
    let (graph, panel) = load_inputs(config)?;
    info!("loaded {} units, {} periods", graph.n(), panel.periods().len());
    let (tree, zero_adjusted_cells) = build_tree(config, &graph, &panel)?;
    write_tree(&out_dir.join(TREE_FILE), &tree, hash)?;
    let result = run_sweep(config, &graph, &panel, &tree)?;
    info!("selected k = {} (near ties {:?})", result.selected_k, result.near_ties);
    write_sweep_artifacts(out_dir, &result, graph.ids(), hash)?;
    Ok(RunOutcome {
        config_hash: hash.to_string(),
        selected_k: result.selected_k,
        near_ties: result.near_ties,
        zero_adjusted_cells,
        out_dir: out_dir.to_path_buf(),
    })
}

/// `sweep.json`, `dic_curve.csv`, `risk.csv` and `selected_config.json`.
pub fn write_sweep_artifacts(dir: &Path, result: &SweepResult, ids: &[String], hash: &str) -> Result<()> {
    let sel = result.selected();
    write_json(&dir.join(SWEEP_FILE), &SweepReport::new(result, ids, RISK_FILE, hash))?;
    write_dic_curve(&dir.join(DIC_CURVE_FILE), &result.curve(), hash)?;
    write_risk_csv(&dir.join(RISK_FILE), &sel.fit, &sel.config, ids, hash)?;
    write_json(&dir.join(SELECTED_FILE), &SelectedConfig::new(&sel.config, ids, hash))
}

/// Ground truth for one simulated replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub config_hash: String,
    pub replicate: String,
    pub seed: u64,
    pub k: usize,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub template_means: Vec<f64>,
    pub true_phi: Vec<f64>,
    pub true_risk: Vec<f64>,
}

pub const IDS_FILE: &str = "ids.csv";
pub const EDGES_FILE: &str = "edges.csv";
pub const COUNTS_FILE: &str = "counts.csv";
pub const TRUTH_FILE: &str = "truth.json";

pub fn replicate_name(r: usize) -> String {
    format!("rep_{r:03}")
}

/// The simulation template named by the config.
pub fn resolve_template(config: &RunConfig) -> Result<Template> {
    let s = &config.simulation;
    Ok(match &s.template {
        TemplateSource::Flat => Template::flat(s.rows * s.cols),
        TemplateSource::Quadrants { means } => {
            Template::from_spec(s.rows, s.cols, &TemplateSpec::quadrants(s.rows, s.cols, *means))?
        }
        TemplateSource::Blocks(spec) => Template::from_spec(s.rows, s.cols, spec)?,
        TemplateSource::File { path } => {
            let spec: TemplateSpec = read_json(path)?;
            Template::from_spec(s.rows, s.cols, &spec)?
        }
    })
}

fn scenario(config: &RunConfig, template: Template, seed: u64) -> SimScenario {
    let s = &config.simulation;
    let n = template.config.n();
    SimScenario {
        template,
        c: s.c,
        rho: s.rho,
        tau: s.tau,
        expected: vec![s.expected; n],
        noise: s.noise.clone(),
        seed,
    }
}

/// Seed of replicate `r`.
pub fn replicate_seed(config: &RunConfig, r: usize) -> u64 {
    derive_seed(config.simulation.seed, r)
}

/// Writes `ids.csv`, `edges.csv`, `resolved_config.json` and one
/// `rep_XXX/{counts.csv,truth.json}` per replicate. Returns the replicate
/// names.
pub fn simulate_to_dir(config: &RunConfig, out_dir: &Path) -> Result<Vec<String>> {
    config.validate()?;
    let hash = config.hash();
    let s = &config.simulation;
    let graph = AreaGraph::grid(s.rows, s.cols);
    let template = resolve_template(config)?;
    create_dir(out_dir)?;
    write_resolved_config(out_dir, config, &hash)?;
    let graph_err = |path: PathBuf| move |e: GraphError| PipelineError::Content { path, message: e.to_string() };
    let ids_path = out_dir.join(IDS_FILE);
    graph.write_ids(create_csv(&ids_path, &hash)?).map_err(graph_err(ids_path.clone()))?;
    let edges_path = out_dir.join(EDGES_FILE);
    graph.write_edge_list(create_csv(&edges_path, &hash)?).map_err(graph_err(edges_path.clone()))?;

    // the precision does not depend on the replicate, so factor it once
    let base = scenario(config, template, 0);
    let precision = sim::leroux_precision(&graph, base.rho, base.tau)?;
    let sampler = GmrfSampler::new(&precision).map_err(SimError::from)?;

    let names: Vec<String> = (0..s.replicates).map(replicate_name).collect();
    let write_one = |r: usize| -> Result<()> {
        let seed = replicate_seed(config, r);
        let sc = SimScenario { seed, ..base.clone() };
        let data = sim::generate_with(&graph, &sc, &sampler)?;
        let dir = out_dir.join(&names[r]);
        create_dir(&dir)?;
        let counts_path = dir.join(COUNTS_FILE);
        data.panel
            .write_csv(create_csv(&counts_path, &hash)?)
            .map_err(|source| PipelineError::Risk { path: counts_path.clone(), source })?;
        write_json(
            &dir.join(TRUTH_FILE),
            &TruthFile {
                config_hash: hash.clone(),
                replicate: names[r].clone(),
                seed,
                k: data.truth.k(),
                ids: graph.ids().to_vec(),
                labels: data.truth.assignment().to_vec(),
                template_means: sc.template.means.clone(),
                true_phi: data.true_phi,
                true_risk: data.true_risk,
            },
        )
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.unwrap_or(0))
        .build()
        .map_err(|e| SweepError::Pool(e.to_string()))?;
    pool.install(|| (0..s.replicates).into_par_iter().map(write_one).collect::<Result<Vec<()>>>())?;
    Ok(names)
}

/// Replicate directories (`rep_*` holding `truth.json`) in name order.
pub fn list_replicates(sim_dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(sim_dir).map_err(io_at(sim_dir))? {
        let entry = entry.map_err(io_at(sim_dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("rep_") && entry.path().join(TRUTH_FILE).is_file() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Runs the pipeline on every replicate of a simulation directory, writing
/// each replicate's artifacts to `out_dir/rep_XXX`. Replicates run one after
/// another; each sweep uses the configured worker pool.
pub fn run_replicates(config: &RunConfig, sim_dir: &Path, out_dir: &Path) -> Result<Vec<RunOutcome>> {
    let names = list_replicates(sim_dir)?;
    if names.is_empty() {
        return Err(PipelineError::Content {
            path: sim_dir.to_path_buf(),
            message: "no replicate directories".into(),
        });
    }
    let mut outcomes = Vec::with_capacity(names.len());
    for name in names {
        let mut cfg = config.clone();
        cfg.input.counts = Some(sim_dir.join(&name).join(COUNTS_FILE));
        cfg.input.graph = Some(sim_dir.join(EDGES_FILE));
        cfg.input.ids = Some(sim_dir.join(IDS_FILE));
        cfg.input.geojson = None;
        cfg.input.study_period = sim::STUDY_PERIOD.to_string();
        info!("replicate {name}");
        outcomes.push(run_pipeline(&cfg, &out_dir.join(&name))?);
    }
    Ok(outcomes)
}

/// Scores every replicate in `sim_dir` against `results_dir/rep_XXX`.
/// Replicates without results are listed as missing.
pub fn evaluate_replicates(sim_dir: &Path, results_dir: &Path, log_scale: bool) -> Result<EvalReport> {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for name in list_replicates(sim_dir)? {
        let truth: TruthFile = read_json(&sim_dir.join(&name).join(TRUTH_FILE))?;
        let res_dir = results_dir.join(&name);
        let (sel_path, risk_path) = (res_dir.join(SELECTED_FILE), res_dir.join(RISK_FILE));
        if !sel_path.is_file() || !risk_path.is_file() {
            warn!("no results for {name} in {}", results_dir.display());
            missing.push(name);
            continue;
        }
        let content = |path: &Path| {
            let path = path.to_path_buf();
            move |message: String| PipelineError::Content { path, message }
        };
        let selected: SelectedConfig = read_json(&sel_path)?;
        let estimate = selected.to_config(&truth.ids).map_err(content(&sel_path))?;
        let risk = read_risk_csv(&risk_path)?;
        let risk_mean: Vec<f64> = truth
            .ids
            .iter()
            .map(|id| risk.get(id).copied().ok_or_else(|| format!("no risk for unit {id:?}")))
            .collect::<std::result::Result<_, _>>()
            .map_err(content(&risk_path))?;
        let truth_config = ClusterConfig::from_labels(&truth.labels);
        rows.push(ReplicateRow::score(name, &truth_config, &estimate, &truth.true_risk, &risk_mean, log_scale)?);
    }
    Ok(EvalReport::from_rows(rows, missing)?)
}

/// `report.json` and `report.csv` in `dir`.
pub fn write_eval_report(json_path: &Path, report: &EvalReport, config_hash: Option<&str>) -> Result<()> {
    #[derive(Serialize)]
    struct Out<'a> {
        #[serde(skip_serializing_if = "Option::is_none")]
        config_hash: Option<&'a str>,
        #[serde(flatten)]
        report: &'a EvalReport,
    }
    write_json(json_path, &Out { config_hash, report })?;
    let csv_path = json_path.with_extension("csv");
    let w = match config_hash {
        Some(h) => create_csv(&csv_path, h)?,
        None => create(&csv_path)?,
    };
    report.write_csv(w).map_err(|e| PipelineError::Content {
        path: csv_path.clone(),
        message: e.to_string(),
    })
}
