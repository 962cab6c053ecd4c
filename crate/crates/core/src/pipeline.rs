//! End-to-end stages: ingest market data, train one agent per prototype,
//! and explain each agent with a Markov surrogate. Every stage writes under
//! the configured output directory and skips work whose outputs already
//! exist unless forced.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig, PrototypeEntry, SeedStream, SeriesKind};
use crate::ddpg::{rollout_policy, train, Checkpoint, DdpgError, Prototype};
use crate::discretize::{discretize_trace, DiscreteTrace, StateFeature};
use crate::env::{EnvError, InvestEnv, MarketData, SIMPLEX_SLACK};
use crate::explain::{
    export_action_matrix, export_dot, fidelity, fidelity_csv_row, saliency_by_perturbation,
    saliency_csv_rows, ExplainError, FidelityReport, SaliencyReport, FIDELITY_CSV_HEADER,
    SALIENCY_CSV_HEADER,
};
use crate::io_util::write_atomic;
use crate::market_data::{
    format_price_csv, load_price_csv, parse_price_csv, synth_series, IndicatorSeries,
    MarketDataError, PriceSeries,
};
use crate::markov::{fit_counts, max_row_sum_error, MarkovError, MarkovSurrogate, RolloutMode};

/// Tolerance on row sums of fitted stochastic matrices.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{series}: {source}")]
    Data {
        series: String,
        source: MarketDataError,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("training {agent} failed: {source}")]
    Train { agent: Prototype, source: DdpgError },
    #[error("explaining {agent} failed: {source}")]
    Explain {
        agent: Prototype,
        source: ExplainError,
    },
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot build worker pool: {0}")]
    Pool(String),
    #[error("invariant checks failed:\n  {}", .0.join("\n  "))]
    Invariants(Vec<String>),
}

impl PipelineError {
    /// Process exit code: 1 for configuration problems, 3 for failed
    /// invariant checks, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Invariants(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// File names under the output directory.
#[derive(Debug, Clone)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn prices(&self, kind: SeriesKind) -> PathBuf {
        self.root
            .join("data")
            .join(format!("{}_prices.csv", kind.label()))
    }

    pub fn indicators(&self, kind: SeriesKind) -> PathBuf {
        self.root
            .join("indicators")
            .join(format!("{}.csv", kind.label()))
    }

    pub fn checkpoint(&self, p: Prototype) -> PathBuf {
        self.root.join("checkpoints").join(format!("{p}.json"))
    }

    pub fn train_log(&self, p: Prototype) -> PathBuf {
        self.root.join("logs").join(format!("{p}_train.csv"))
    }

    pub fn trajectory(&self, p: Prototype) -> PathBuf {
        self.root.join("traces").join(format!("{p}_trajectory.csv"))
    }

    pub fn trace(&self, p: Prototype) -> PathBuf {
        self.root.join("traces").join(format!("{p}_trace.csv"))
    }

    pub fn surrogate(&self, p: Prototype) -> PathBuf {
        self.root.join("surrogates").join(format!("{p}.surrogate"))
    }

    pub fn dot(&self, p: Prototype) -> PathBuf {
        self.root.join("dot").join(format!("{p}.dot"))
    }

    pub fn agent_actions(&self, p: Prototype) -> PathBuf {
        self.root.join("actions").join(format!("{p}_agent.csv"))
    }

    pub fn surrogate_actions(&self, p: Prototype) -> PathBuf {
        self.root.join("actions").join(format!("{p}_surrogate.csv"))
    }

    pub fn fidelity_report(&self) -> PathBuf {
        self.root.join("reports").join("fidelity.csv")
    }

    pub fn saliency_report(&self) -> PathBuf {
        self.root.join("reports").join("saliency.csv")
    }

    pub fn summary_report(&self) -> PathBuf {
        self.root.join("reports").join("summary.csv")
    }
}

/// Series that feed the discrete and continuous state (luxury is a price only).
pub const INDICATOR_SERIES: [SeriesKind; 3] =
    [SeriesKind::Stocks, SeriesKind::Property, SeriesKind::Rate];

fn write(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn all_exist(paths: &[PathBuf]) -> bool {
    paths.iter().all(|p| p.is_file())
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))
}

/// Cuts `series` down to `months` consecutive months starting at `start`.
fn window(
    series: PriceSeries,
    start: crate::market_data::YearMonth,
    months: usize,
) -> Result<PriceSeries> {
    let name = series.index_name.clone();
    let short = |got: usize| PipelineError::Data {
        series: name.clone(),
        source: MarketDataError::SeriesTooShort {
            needed: months,
            got,
        },
    };
    let offset = series
        .dates
        .iter()
        .position(|&d| d == start)
        .ok_or_else(|| short(0))?;
    if series.len() - offset < months {
        return Err(short(series.len() - offset));
    }
    PriceSeries::new(
        name.clone(),
        series.dates[offset..offset + months].to_vec(),
        series.prices[offset..offset + months].to_vec(),
    )
    .map_err(|source| PipelineError::Data {
        series: name,
        source,
    })
}

/// Loads a configured CSV, or synthesizes the series when the file is absent
/// and the fallback is enabled.
fn acquire_series(config: &PipelineConfig, kind: SeriesKind) -> Result<(PriceSeries, bool)> {
    let src = config.data.source(kind);
    let data_err = |source| PipelineError::Data {
        series: kind.label().to_string(),
        source,
    };
    if let Some(path) = src.csv.as_ref().filter(|p| p.is_file()) {
        let mut series = load_price_csv(path).map_err(data_err)?;
        series.index_name = kind.label().to_string();
        return Ok((
            window(series, config.data_start(), config.price_months())?,
            false,
        ));
    }
    let series = synth_series(
        kind.label(),
        config.data_start(),
        config.seed_for(SeedStream::Series(kind)),
        config.price_months(),
        src.start_price,
        src.drift,
        src.vol,
    )
    .map_err(data_err)?;
    Ok((series, true))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSummary {
    pub kind: SeriesKind,
    pub synthetic: bool,
    pub months: usize,
    pub dropped_warm_up: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub skipped: bool,
    pub series: Vec<SeriesSummary>,
}

impl IngestReport {
    pub fn lines(&self) -> Vec<String> {
        if self.skipped {
            return vec!["ingest: outputs present, skipped".into()];
        }
        self.series
            .iter()
            .map(|s| {
                format!(
                    "ingest: {:<8} {} months ({}), {} warm-up months dropped",
                    s.kind.label(),
                    s.months,
                    if s.synthetic { "synthetic" } else { "csv" },
                    s.dropped_warm_up
                )
            })
            .collect()
    }
}

/// Writes the price window used by later stages and the indicator files.
pub fn cmd_ingest(config: &PipelineConfig, force: bool) -> Result<IngestReport> {
    config.validate()?;
    let out = OutputLayout::new(&config.output_dir);
    let mut targets: Vec<PathBuf> = SeriesKind::ALL.iter().map(|&k| out.prices(k)).collect();
    targets.extend(INDICATOR_SERIES.iter().map(|&k| out.indicators(k)));
    if !force && all_exist(&targets) {
        return Ok(IngestReport {
            skipped: true,
            series: Vec::new(),
        });
    }
    let mut series = Vec::new();
    for kind in SeriesKind::ALL {
        let (prices, synthetic) = acquire_series(config, kind)?;
        write(&out.prices(kind), &format_price_csv(&prices))?;
        let mut dropped = 0;
        if INDICATOR_SERIES.contains(&kind) {
            let ind = IndicatorSeries::compute(&prices, &config.indicators).map_err(|source| {
                PipelineError::Data {
                    series: kind.label().to_string(),
                    source,
                }
            })?;
            dropped = prices.len() - ind.len();
            write(&out.indicators(kind), &ind.to_csv())?;
        }
        series.push(SeriesSummary {
            kind,
            synthetic,
            months: prices.len(),
            dropped_warm_up: dropped,
        });
    }
    Ok(IngestReport {
        skipped: false,
        series,
    })
}

/// Rebuilds the environment's market data from the ingested price files.
pub fn load_market_data(config: &PipelineConfig) -> Result<Arc<MarketData>> {
    let out = OutputLayout::new(&config.output_dir);
    let mut loaded = Vec::new();
    for kind in SeriesKind::ALL {
        let path = out.prices(kind);
        let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::Input {
            path: path.clone(),
            message: format!("{e}; run `ingest` first"),
        })?;
        let series =
            parse_price_csv(kind.label(), &text).map_err(|source| PipelineError::Data {
                series: kind.label().to_string(),
                source,
            })?;
        loaded.push(series);
    }
    let indicators = |i: usize| {
        IndicatorSeries::compute(&loaded[i], &config.indicators).map_err(|source| {
            PipelineError::Data {
                series: loaded[i].index_name.clone(),
                source,
            }
        })
    };
    let data = MarketData::new(indicators(0)?, indicators(1)?, indicators(2)?, &loaded[3])?;
    Ok(Arc::new(data))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrainSummary {
    pub agent: Prototype,
    pub lambda: f64,
    pub episodes: usize,
    pub skipped: bool,
    pub final_affinity_loss: Option<f64>,
    pub final_return: Option<f64>,
}

impl AgentTrainSummary {
    pub fn line(&self) -> String {
        if self.skipped {
            return format!(
                "train: {:<17} lambda={} checkpoint present, skipped",
                self.agent.label(),
                self.lambda
            );
        }
        format!(
            "train: {:<17} lambda={} episodes={} final L={:.3e} final return={:.4}",
            self.agent.label(),
            self.lambda,
            self.episodes,
            self.final_affinity_loss.unwrap_or(f64::NAN),
            self.final_return.unwrap_or(f64::NAN)
        )
    }
}

fn train_one(
    config: &PipelineConfig,
    data: &Arc<MarketData>,
    entry: &PrototypeEntry,
    force: bool,
) -> Result<AgentTrainSummary> {
    let out = OutputLayout::new(&config.output_dir);
    let cfg = config.train_config_for(entry);
    let agent = entry.label;
    if !force && all_exist(&[out.checkpoint(agent), out.train_log(agent)]) {
        return Ok(AgentTrainSummary {
            agent,
            lambda: cfg.lambda,
            episodes: cfg.episodes,
            skipped: true,
            final_affinity_loss: None,
            final_return: None,
        });
    }
    let mut env = InvestEnv::new(config.env.clone(), Arc::clone(data))?;
    let prior = entry.prior();
    let (bundle, log) =
        train(&mut env, &prior, &cfg).map_err(|source| PipelineError::Train { agent, source })?;
    let checkpoint = Checkpoint::new(prior, cfg.clone(), bundle);
    let json = checkpoint
        .to_json()
        .map_err(|source| PipelineError::Train { agent, source })?;
    write(&out.checkpoint(agent), &json)?;
    write(&out.train_log(agent), &log.to_csv())?;
    Ok(AgentTrainSummary {
        agent,
        lambda: cfg.lambda,
        episodes: cfg.episodes,
        skipped: false,
        final_affinity_loss: log.final_affinity_loss(),
        final_return: log.episodes.last().map(|e| e.episode_return),
    })
}

/// Trains the five agents on a pool of `config.workers` threads.
pub fn cmd_train(config: &PipelineConfig, force: bool) -> Result<Vec<AgentTrainSummary>> {
    config.validate()?;
    let data = load_market_data(config)?;
    worker_pool(config.workers)?.install(|| {
        config
            .prototypes
            .par_iter()
            .map(|entry| train_one(config, &data, entry, force))
            .collect()
    })
}

/// Everything `explain` learns about one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentExplanation {
    pub agent: Prototype,
    pub lambda: f64,
    pub visited_states: usize,
    pub potential_states: usize,
    pub symbols: usize,
    pub greedy: FidelityReport,
    pub sampled: FidelityReport,
    pub saliency: SaliencyReport,
    pub violations: Vec<String>,
}

impl AgentExplanation {
    /// True when no feature's collapse costs more fidelity than collapsing maturity.
    pub fn maturity_first(&self) -> bool {
        let m = self.saliency.get(StateFeature::Maturity).drop;
        self.saliency.features.iter().all(|f| f.drop <= m)
    }

    pub fn line(&self) -> String {
        format!(
            "explain: {:<17} visited {}/{} states, {} symbols, fidelity greedy {:.3} sampled {:.3}±{:.3}, most salient {}",
            self.agent.label(),
            self.visited_states,
            self.potential_states,
            self.symbols,
            self.greedy.exact_match,
            self.sampled.exact_match,
            self.sampled.exact_match_std,
            self.saliency.most_salient().map_or("none", StateFeature::label)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainReport {
    pub skipped: bool,
    pub agents: Vec<AgentExplanation>,
}

impl ExplainReport {
    pub fn lines(&self) -> Vec<String> {
        if self.skipped {
            return vec!["explain: reports present, skipped".into()];
        }
        self.agents.iter().map(AgentExplanation::line).collect()
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Input {
        path: path.to_path_buf(),
        message: format!("{e}; run `train` first"),
    })?;
    Checkpoint::from_json(&text).map_err(|e| PipelineError::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn surrogate_violations(agent: Prototype, s: &MarkovSurrogate) -> Vec<String> {
    let mut v = Vec::new();
    let f_err = max_row_sum_error(&s.transition);
    let e_err = max_row_sum_error(&s.emission);
    if f_err > ROW_SUM_TOL {
        v.push(format!("{agent}: transition row sums off by {f_err:e}"));
    }
    if e_err > ROW_SUM_TOL {
        v.push(format!("{agent}: emission row sums off by {e_err:e}"));
    }
    if s.state_count() > s.layout.state_count() {
        v.push(format!(
            "{agent}: {} visited states exceed {} potential",
            s.state_count(),
            s.layout.state_count()
        ));
    }
    match MarkovSurrogate::from_text(&s.to_text()) {
        Ok(back) if back.to_text() == s.to_text() => {}
        Ok(_) => v.push(format!("{agent}: surrogate text does not round-trip")),
        Err(e) => v.push(format!("{agent}: surrogate text does not parse back: {e}")),
    }
    v
}

fn dot_violations(agent: Prototype, dot: &str, max_states: usize) -> Vec<String> {
    let nodes = dot
        .lines()
        .filter(|l| l.trim_start().starts_with('s') && l.contains("[label=") && !l.contains("->"))
        .count();
    if nodes > max_states {
        vec![format!(
            "{agent}: DOT graph has {nodes} nodes, limit {max_states}"
        )]
    } else {
        Vec::new()
    }
}

fn explain_one(
    config: &PipelineConfig,
    data: &Arc<MarketData>,
    entry: &PrototypeEntry,
) -> Result<AgentExplanation> {
    let out = OutputLayout::new(&config.output_dir);
    let agent = entry.label;
    let explain_err = |source: ExplainError| PipelineError::Explain { agent, source };
    let markov_err = |e: MarkovError| explain_err(ExplainError::Markov(e));

    let checkpoint = load_checkpoint(&out.checkpoint(agent))?;
    let mut env = InvestEnv::new(config.env.clone(), Arc::clone(data))?;
    let trajectory = rollout_policy(&checkpoint.bundle, &mut env)
        .map_err(|source| PipelineError::Train { agent, source })?;
    let trace = discretize_trace(&trajectory, &config.bins, agent.label());
    let surrogate =
        fit_counts(std::slice::from_ref(&trace), config.explain.smoothing).map_err(markov_err)?;

    let greedy = fidelity(&surrogate, &trace, RolloutMode::Greedy, &[]).map_err(explain_err)?;
    let sampled = fidelity(
        &surrogate,
        &trace,
        RolloutMode::Sample,
        &config.rollout_seeds(),
    )
    .map_err(explain_err)?;
    let saliency = saliency_by_perturbation(
        std::slice::from_ref(&trajectory),
        &config.bins,
        RolloutMode::Greedy,
        &[],
    )
    .map_err(explain_err)?;
    let dot = export_dot(
        &surrogate,
        config.explain.dot_max_states,
        config.explain.dot_min_prob,
    );
    let surrogate_trace: DiscreteTrace = DiscreteTrace {
        label: format!("{agent}-surrogate"),
        ..surrogate.rollout(RolloutMode::Greedy, 0, trace.len())
    };

    let mut violations = surrogate_violations(agent, &surrogate);
    violations.extend(dot_violations(agent, &dot, config.explain.dot_max_states));
    if let Some(t) = trajectory
        .actions
        .iter()
        .position(|a| !a.is_on_simplex(SIMPLEX_SLACK))
    {
        violations.push(format!("{agent}: agent action at t={t} is off the simplex"));
    }

    write(&out.trajectory(agent), &trajectory.to_csv())?;
    write(&out.trace(agent), &trace.to_csv())?;
    write(&out.surrogate(agent), &surrogate.to_text())?;
    write(&out.dot(agent), &dot)?;
    write(
        &out.agent_actions(agent),
        &export_action_matrix(&trace, &config.bins).map_err(explain_err)?,
    )?;
    write(
        &out.surrogate_actions(agent),
        &export_action_matrix(&surrogate_trace, &config.bins).map_err(explain_err)?,
    )?;

    Ok(AgentExplanation {
        agent,
        lambda: checkpoint.config.lambda,
        visited_states: surrogate.state_count(),
        potential_states: surrogate.layout.state_count(),
        symbols: surrogate.symbol_count(),
        greedy,
        sampled,
        saliency,
        violations,
    })
}

pub const SUMMARY_CSV_HEADER: &str = "agent,lambda,visited_states,potential_states,symbols,greedy_fidelity,sampled_fidelity,sampled_fidelity_std,most_salient,maturity_drop,maturity_first";

fn summary_csv(agents: &[AgentExplanation]) -> String {
    let mut out = format!("{SUMMARY_CSV_HEADER}\n");
    for a in agents {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{},{:.6},{}",
            a.agent,
            a.lambda,
            a.visited_states,
            a.potential_states,
            a.symbols,
            a.greedy.exact_match,
            a.sampled.exact_match,
            a.sampled.exact_match_std,
            a.saliency
                .most_salient()
                .map_or("none", StateFeature::label),
            a.saliency.get(StateFeature::Maturity).drop,
            a.maturity_first()
        );
    }
    out
}

/// Traces, fits and scores every trained agent, writes all exports and
/// reports, then fails with [`PipelineError::Invariants`] if any check did not hold.
pub fn cmd_explain(config: &PipelineConfig, force: bool) -> Result<ExplainReport> {
    config.validate()?;
    let out = OutputLayout::new(&config.output_dir);
    let reports = [
        out.fidelity_report(),
        out.saliency_report(),
        out.summary_report(),
    ];
    if !force && all_exist(&reports) {
        return Ok(ExplainReport {
            skipped: true,
            agents: Vec::new(),
        });
    }
    let data = load_market_data(config)?;
    let agents: Vec<AgentExplanation> = worker_pool(config.workers)?.install(|| {
        config
            .prototypes
            .par_iter()
            .map(|entry| explain_one(config, &data, entry))
            .collect::<Result<_>>()
    })?;

    let mut fid = format!("{FIDELITY_CSV_HEADER}\n");
    let mut sal = format!("{SALIENCY_CSV_HEADER}\n");
    for a in &agents {
        let label = a.agent.label();
        let _ = writeln!(fid, "{}", fidelity_csv_row(label, &a.greedy));
        let _ = writeln!(fid, "{}", fidelity_csv_row(label, &a.sampled));
        for row in saliency_csv_rows(label, &a.saliency) {
            let _ = writeln!(sal, "{row}");
        }
    }
    write(&out.fidelity_report(), &fid)?;
    write(&out.saliency_report(), &sal)?;
    write(&out.summary_report(), &summary_csv(&agents))?;

    let violations: Vec<String> = agents
        .iter()
        .flat_map(|a| a.violations.iter().cloned())
        .collect();
    if !violations.is_empty() {
        return Err(PipelineError::Invariants(violations));
    }
    Ok(ExplainReport {
        skipped: false,
        agents,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub ingest: IngestReport,
    pub train: Vec<AgentTrainSummary>,
    pub explain: ExplainReport,
}

impl RunReport {
    pub fn lines(&self) -> Vec<String> {
        let mut lines = self.ingest.lines();
        lines.extend(self.train.iter().map(AgentTrainSummary::line));
        lines.extend(self.explain.lines());
        lines
    }
}

/// Ingest, train and explain in sequence.
pub fn run_all(config: &PipelineConfig, force: bool) -> Result<RunReport> {
    let ingest = cmd_ingest(config, force)?;
    let train = cmd_train(config, force)?;
    let explain = cmd_explain(config, force)?;
    Ok(RunReport {
        ingest,
        train,
        explain,
    })
}
