use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use arealclust::config::TemplateSource;
use arealclust::pipeline::{self, FitReport, SelectedConfig, SweepReport};
use arealclust::select::PlugIn;
use arealclust::{LinkageMethod, RunConfig};

/// Spatially contiguous disease-risk clusters from areal count data.
#[derive(Parser, Debug)]
#[command(name = "arealclust", version, about)]
struct Cli {
    /// Worker threads for parallel fits (default: available parallelism).
    #[arg(long, global = true, env = "AREALCLUST_THREADS")]
    threads: Option<usize>,
    /// TOML or JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate clustered count data on a lattice.
    Simulate(SimulateArgs),
    /// Build the contiguity-constrained merge tree from prior-period data.
    Cluster(ClusterArgs),
    /// Fit the cluster model for one configuration.
    Fit(FitArgs),
    /// Fit every candidate cut of a tree and select by DIC.
    Sweep(SweepArgs),
    /// Score results against simulation truth.
    Evaluate(EvaluateArgs),
    /// Cluster, sweep and select in one go.
    Run(RunArgs),
}

#[derive(Args, Debug, Default)]
struct InputArgs {
    /// Long-format counts CSV: id,period,observed,expected.
    #[arg(long)]
    counts: Option<PathBuf>,
    /// Edge list CSV: from,to.
    #[arg(long, conflicts_with = "geojson")]
    graph: Option<PathBuf>,
    /// GeoJSON polygons to derive adjacency from.
    #[arg(long)]
    geojson: Option<PathBuf>,
    /// Id list CSV fixing the unit order.
    #[arg(long)]
    ids: Option<PathBuf>,
    /// Period label holding the study counts.
    #[arg(long)]
    study_period: Option<String>,
    /// Treat polygons touching at a point as neighbours.
    #[arg(long)]
    queen: bool,
    /// GeoJSON feature property holding the unit id.
    #[arg(long)]
    id_property: Option<String>,
}

impl InputArgs {
    fn apply(&self, c: &mut RunConfig) {
        let i = &mut c.input;
        if let Some(p) = &self.counts {
            i.counts = Some(p.clone());
        }
        if let Some(p) = &self.graph {
            i.graph = Some(p.clone());
            i.geojson = None;
        }
        if let Some(p) = &self.geojson {
            i.geojson = Some(p.clone());
            i.graph = None;
        }
        if let Some(p) = &self.ids {
            i.ids = Some(p.clone());
        }
        if let Some(s) = &self.study_period {
            i.study_period = s.clone();
        }
        if self.queen {
            i.queen = true;
        }
        if let Some(s) = &self.id_property {
            i.id_property = s.clone();
        }
    }
}

#[derive(Args, Debug, Default)]
struct ClusterOpts {
    /// Between-cluster distance.
    #[arg(long)]
    linkage: Option<LinkageMethod>,
    /// Replacement for zero prior counts in the log-SIR.
    #[arg(long)]
    zero_adjust: Option<f64>,
}

impl ClusterOpts {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(l) = self.linkage {
            c.clustering.linkage = l;
        }
        if let Some(z) = self.zero_adjust {
            c.clustering.zero_adjust = z;
        }
    }
}

#[derive(Args, Debug, Default)]
struct McmcOpts {
    /// Burn-in iterations per chain.
    #[arg(long)]
    burnin: Option<usize>,
    /// Retained iterations per chain.
    #[arg(long)]
    keep: Option<usize>,
    /// Keep every n-th iteration.
    #[arg(long)]
    thin: Option<usize>,
    /// Base seed for the Markov chains.
    #[arg(long)]
    mcmc_seed: Option<u64>,
    /// Plug-in for the effective number of parameters.
    #[arg(long)]
    plug_in: Option<PlugIn>,
}

impl McmcOpts {
    fn apply(&self, c: &mut RunConfig) {
        let m = &mut c.selection.mcmc;
        if let Some(v) = self.burnin {
            m.burnin = v;
        }
        if let Some(v) = self.keep {
            m.keep = v;
        }
        if let Some(v) = self.thin {
            m.thin = v;
        }
        if let Some(v) = self.mcmc_seed {
            m.seed = v;
        }
        if let Some(p) = self.plug_in {
            c.selection.plug_in = p;
        }
    }
}

#[derive(Args, Debug, Default)]
struct RangeOpts {
    /// Largest number of clusters fitted.
    #[arg(long)]
    kmax: Option<usize>,
    /// Explicit cluster counts to fit, comma separated.
    #[arg(long, value_delimiter = ',')]
    k_values: Vec<usize>,
}

impl RangeOpts {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(k) = self.kmax {
            c.selection.kmax = k;
        }
        if !self.k_values.is_empty() {
            c.selection.k_values = self.k_values.clone();
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Lattice size as ROWSxCOLS.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    /// `flat`, `quadrants` or a JSON block template file.
    #[arg(long)]
    template: Option<String>,
    /// Multiplier applied to the template means.
    #[arg(long)]
    c: Option<f64>,
    /// Leroux spatial dependence in [0, 1).
    #[arg(long)]
    rho: Option<f64>,
    /// Leroux precision of the residual field.
    #[arg(long)]
    tau: Option<f64>,
    /// Constant expected count per unit.
    #[arg(long)]
    e: Option<f64>,
    /// Prior-period noise half-widths, comma separated, nearest period first.
    #[arg(long, value_delimiter = ',')]
    noise: Vec<f64>,
    /// Number of replicate datasets.
    #[arg(long)]
    replicates: Option<usize>,
    /// Base seed; replicate seeds are derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    opts: ClusterOpts,
    /// Tie-breaking seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output tree JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    mcmc: McmcOpts,
    /// Cluster labels as written by `sweep` or `run`.
    #[arg(long, conflicts_with_all = ["tree", "k"])]
    selected: Option<PathBuf>,
    /// Merge tree to cut at `--k`.
    #[arg(long, requires = "k")]
    tree: Option<PathBuf>,
    /// Number of clusters.
    #[arg(long, requires = "tree")]
    k: Option<usize>,
    /// Output fit JSON.
    #[arg(long)]
    out: PathBuf,
    /// Per-unit risk CSV (default: risk.csv next to the fit JSON).
    #[arg(long)]
    risk_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    mcmc: McmcOpts,
    #[command(flatten)]
    range: RangeOpts,
    /// Merge tree from `cluster`.
    #[arg(long)]
    tree: PathBuf,
    /// Output sweep JSON; the DIC curve, risk and selected configuration are
    /// written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Simulation directory.
    #[arg(long)]
    truth: PathBuf,
    /// Directory holding one result directory per replicate.
    #[arg(long)]
    results: PathBuf,
    /// Output report JSON; the per-replicate CSV goes next to it.
    #[arg(long)]
    out: PathBuf,
    /// RMSE on the log-risk scale.
    #[arg(long)]
    log_scale: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    opts: ClusterOpts,
    #[command(flatten)]
    mcmc: McmcOpts,
    #[command(flatten)]
    range: RangeOpts,
    /// Seed for both tie breaking and the chains.
    #[arg(long)]
    seed: Option<u64>,
    /// Run every replicate of a simulation directory.
    #[arg(long, conflicts_with_all = ["counts", "graph", "geojson", "ids"])]
    sim_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let (r, c) = (parse(r)?, parse(c)?);
    if r == 0 || c == 0 {
        return Err("grid dimensions must be positive".into());
    }
    Ok((r, c))
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if cli.threads.is_some() {
        config.threads = cli.threads;
    }
    Ok(config)
}

fn parent_dir(path: &Path) -> Result<PathBuf> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(&dir).map_err(|e| anyhow!("{}: {e}", dir.display()))?;
    }
    Ok(dir)
}

fn simulate(cli: &Cli, args: &SimulateArgs) -> Result<()> {
    let mut config = base_config(cli)?;
    let s = &mut config.simulation;
    if let Some((r, c)) = args.grid {
        s.rows = r;
        s.cols = c;
    }
    if let Some(t) = &args.template {
        s.template = match t.as_str() {
            "flat" => TemplateSource::Flat,
            "quadrants" => TemplateSource::default(),
            path => TemplateSource::File { path: path.into() },
        };
    }
    if let Some(v) = args.c {
        s.c = v;
    }
    if let Some(v) = args.rho {
        s.rho = v;
    }
    if let Some(v) = args.tau {
        s.tau = v;
    }
    if let Some(v) = args.e {
        s.expected = v;
    }
    if !args.noise.is_empty() {
        s.noise = args.noise.clone();
    }
    if let Some(v) = args.replicates {
        s.replicates = v;
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }
    let names = pipeline::simulate_to_dir(&config, &args.out)?;
    println!("wrote {} replicates to {}", names.len(), args.out.display());
    Ok(())
}

fn cluster(cli: &Cli, args: &ClusterArgs) -> Result<()> {
    let mut config = base_config(cli)?;
    args.input.apply(&mut config);
    args.opts.apply(&mut config);
    if let Some(s) = args.seed {
        config.clustering.seed = s;
    }
    config.validate()?;
    let (graph, panel) = pipeline::load_inputs(&config)?;
    let (tree, zeros) = pipeline::build_tree(&config, &graph, &panel)?;
    parent_dir(&args.out)?;
    pipeline::write_tree(&args.out, &tree, &config.hash())?;
    println!(
        "merge tree for {} units ({} merges, {} linkage) written to {}",
        tree.n(),
        tree.records().len(),
        tree.method(),
        args.out.display()
    );
    if zeros > 0 {
        println!("{zeros} zero prior counts replaced by {}", config.clustering.zero_adjust);
    }
    Ok(())
}

fn fit(cli: &Cli, args: &FitArgs) -> Result<()> {
    let mut config = base_config(cli)?;
    args.input.apply(&mut config);
    args.mcmc.apply(&mut config);
    config.validate()?;
    let hash = config.hash();
    let (graph, panel) = pipeline::load_inputs(&config)?;
    let clusters = match (&args.selected, &args.tree, args.k) {
        (Some(path), _, _) => {
            let sel: SelectedConfig = pipeline::read_json(path)?;
            sel.to_config(graph.ids())
                .map_err(|e| anyhow!("{}: {e}", path.display()))?
        }
        (None, Some(tree), Some(k)) => pipeline::read_tree(tree, graph.n())?.cut(k)?,
        _ => bail!("give either --selected or --tree with --k"),
    };
    clusters.check_contiguous(&graph)?;
    let (fit, dic) = pipeline::fit_one(&config, &graph, &panel, clusters.clone())?;
    let dir = parent_dir(&args.out)?;
    let risk_path = args.risk_out.clone().unwrap_or_else(|| dir.join(pipeline::RISK_FILE));
    let risk_ref = if risk_path.parent() == Some(dir.as_path()) || risk_path.parent().is_none() {
        risk_path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
    } else {
        risk_path.display().to_string()
    };
    pipeline::write_risk_csv(&risk_path, &fit, &clusters, graph.ids(), &hash)?;
    pipeline::write_json(&args.out, &FitReport::new(&fit, &dic, graph.ids(), &risk_ref, &hash))?;
    println!("k = {}: DIC {:.3} (Dbar {:.3}, pD {:.3})", dic.k, dic.dic, dic.dbar, dic.pd);
    Ok(())
}

fn sweep(cli: &Cli, args: &SweepArgs) -> Result<()> {
    let mut config = base_config(cli)?;
    args.input.apply(&mut config);
    args.mcmc.apply(&mut config);
    args.range.apply(&mut config);
    config.validate()?;
    let hash = config.hash();
    let (graph, panel) = pipeline::load_inputs(&config)?;
    let tree = pipeline::read_tree(&args.tree, graph.n())?;
    let result = pipeline::run_sweep(&config, &graph, &panel, &tree)?;
    let dir = parent_dir(&args.out)?;
    let sel = result.selected();
    pipeline::write_json(&args.out, &SweepReport::new(&result, graph.ids(), pipeline::RISK_FILE, &hash))?;
    pipeline::write_dic_curve(&dir.join(pipeline::DIC_CURVE_FILE), &result.curve(), &hash)?;
    pipeline::write_risk_csv(&dir.join(pipeline::RISK_FILE), &sel.fit, &sel.config, graph.ids(), &hash)?;
    pipeline::write_json(&dir.join(pipeline::SELECTED_FILE), &SelectedConfig::new(&sel.config, graph.ids(), &hash))?;
    report_selection(result.selected_k, &result.near_ties);
    Ok(())
}

fn report_selection(k: usize, near: &[usize]) {
    let near: Vec<String> = near.iter().map(ToString::to_string).collect();
    println!("selected k = {k}; within the near-tie margin: {}", near.join(","));
}

fn evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<()> {
    let config = base_config(cli)?;
    let log_scale = args.log_scale || config.evaluation.log_scale;
    let report = pipeline::evaluate_replicates(&args.truth, &args.results, log_scale)?;
    parent_dir(&args.out)?;
    pipeline::write_eval_report(&args.out, &report, Some(&config.hash()))?;
    if !report.missing.is_empty() {
        eprintln!("warning: no results for {}", report.missing.join(", "));
    }
    println!(
        "{} replicates: median k {:.1}, median Rand {:.4}, median RMSE {:.4}",
        report.rows.len(),
        report.k_est.median,
        report.rand.median,
        report.rmse.median
    );
    Ok(())
}

fn run(cli: &Cli, args: &RunArgs) -> Result<()> {
    let mut config = base_config(cli)?;
    args.input.apply(&mut config);
    args.opts.apply(&mut config);
    args.mcmc.apply(&mut config);
    args.range.apply(&mut config);
    if let Some(s) = args.seed {
        config.clustering.seed = s;
        config.selection.mcmc.seed = s;
    }
    if let Some(sim) = &args.sim_dir {
        let outcomes = pipeline::run_replicates(&config, sim, &args.out)?;
        for o in &outcomes {
            info!("{}: k = {}", o.out_dir.display(), o.selected_k);
        }
        println!("ran {} replicates into {}", outcomes.len(), args.out.display());
    } else {
        let outcome = pipeline::run_pipeline(&config, &args.out)?;
        report_selection(outcome.selected_k, &outcome.near_ties);
        if outcome.zero_adjusted_cells > 0 {
            println!("{} zero prior counts replaced by {}", outcome.zero_adjusted_cells, config.clustering.zero_adjust);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = match &cli.command {
        Command::Simulate(a) => simulate(&cli, a),
        Command::Cluster(a) => cluster(&cli, a),
        Command::Fit(a) => fit(&cli, a),
        Command::Sweep(a) => sweep(&cli, a),
        Command::Evaluate(a) => evaluate(&cli, a),
        Command::Run(a) => run(&cli, a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
