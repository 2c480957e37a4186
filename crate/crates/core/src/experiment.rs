//! Experiment orchestration: configuration, runs, sweeps, reports and
//! replay verification.
//!
//! A run is fully determined by its config. Every random choice flows
//! from the run seeds through tagged sub-seeds, every collection is
//! iterated in a fixed order, and wall-clock timing goes only to
//! `run.log`, so two runs of the same config produce byte-identical
//! report files. `replay` re-runs a report's resolved config and
//! byte-compares everything except `run.log`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::client::{ClientState, StepAudit, TrainHyper};
use crate::data::{
    apportion, partition, stratified_holdout, AbcSplit, Dataset, Partition, PartitionPlan,
    SynthTask, TaskKind,
};
use crate::error::{Error, Result};
use crate::metrics::{gains, weighted_mean, CommStats, Metric};
use crate::model::{BlockedModel, FusionKind, ModalityMask, ModelSpec};
use crate::seeds::sub_seed;
use crate::server::{run_round_with_audit, sync_clients, AggregationMode, FedAvg, Server};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Which samples each client scores against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalScheme {
    /// Per-client slices of the server holdout, apportioned to match
    /// the client's own training class proportions.
    Matched,
    /// Every client scores the full holdout.
    Uniform,
}

impl std::fmt::Display for EvalScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalScheme::Matched => write!(f, "matched"),
            EvalScheme::Uniform => write!(f, "uniform"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub task: TaskKind,
    pub n_classes: usize,
    pub input_dims: Vec<usize>,
    pub noise_scale: f64,
    /// Per-modality noise multiplier; modality m gets
    /// noise_scale * noise_ratio^m. Above 1, later modalities are
    /// noisier, so modality groups need different decision
    /// calibrations.
    pub noise_ratio: f64,
    pub n_samples: usize,
    pub leak: f64,
    pub holdout_frac: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Complementary,
            n_classes: 3,
            input_dims: vec![12, 12],
            noise_scale: 0.3,
            noise_ratio: 2.0,
            n_samples: 2000,
            leak: 0.05,
            holdout_frac: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub fusion_dim: usize,
    pub fusion: FusionKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            embed_dim: 16,
            fusion_dim: 32,
            fusion: FusionKind::Concat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    /// `a-b-c`: a clients with modality 0 only, b with modality 1
    /// only, c with both.
    pub abc: String,
    /// `iid`, `iid_stratified` or `dirichlet`.
    pub split: String,
    /// Dirichlet concentration, used when `split = "dirichlet"`.
    pub alpha: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            abc: "5-5-0".into(),
            split: "dirichlet".into(),
            alpha: 1.0,
        }
    }
}

impl FederationConfig {
    pub fn abc_split(&self) -> Result<AbcSplit> {
        self.abc.parse()
    }

    pub fn partition(&self) -> Result<Partition> {
        match self.split.as_str() {
            "iid" => Ok(Partition::Iid),
            "iid_stratified" => Ok(Partition::IidStratified),
            "dirichlet" => {
                if !(self.alpha > 0.0) {
                    return Err(Error::Config {
                        path: "federation.alpha".into(),
                        detail: format!("alpha must be positive, got {}", self.alpha),
                    });
                }
                Ok(Partition::Dirichlet(self.alpha))
            }
            other => Err(Error::Config {
                path: "federation.split".into(),
                detail: format!(
                    "unknown split `{other}` (expected iid, iid_stratified or dirichlet)"
                ),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub scheme: EvalScheme,
    /// Eval-slice budget per client under the matched scheme.
    pub samples_per_client: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scheme: EvalScheme::Matched,
            samples_per_client: 128,
        }
    }
}

/// Complete, self-contained description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub name: String,
    pub seeds: Vec<u64>,
    pub rounds: usize,
    pub eval_every: usize,
    /// Final score = mean of the last this-many eval points.
    pub final_window: usize,
    pub metric: Metric,
    pub modes: Vec<AggregationMode>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub federation: FederationConfig,
    pub train: TrainHyper,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            format_version: REPORT_FORMAT_VERSION,
            name: "experiment".into(),
            seeds: vec![1, 2, 3],
            rounds: 60,
            eval_every: 1,
            final_window: 5,
            metric: Metric::MacroF1,
            modes: AggregationMode::ALL.to_vec(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            federation: FederationConfig::default(),
            train: TrainHyper::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(body: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(body).map_err(|e| Error::Config {
            path: "config".into(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::from_toml_str(&body).map_err(|e| match e {
            Error::Config { detail, .. } => Error::Config {
                path: path.display().to_string(),
                detail,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, detail: String| Error::Config {
            path: path.into(),
            detail,
        };
        if self.format_version != REPORT_FORMAT_VERSION {
            return Err(fail(
                "format_version",
                format!(
                    "version {} unsupported (expected {REPORT_FORMAT_VERSION})",
                    self.format_version
                ),
            ));
        }
        if self.seeds.is_empty() {
            return Err(fail("seeds", "need at least one seed".into()));
        }
        if self.rounds == 0 || self.eval_every == 0 || self.final_window == 0 {
            return Err(fail(
                "rounds",
                "rounds, eval_every and final_window must be positive".into(),
            ));
        }
        if self.modes.is_empty() {
            return Err(fail("modes", "need at least one aggregation mode".into()));
        }
        let mut sorted = self.modes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.modes.len() {
            return Err(fail("modes", "duplicate aggregation mode".into()));
        }
        if self.dataset.input_dims.len() != 2 {
            return Err(fail(
                "dataset.input_dims",
                "the a-b-c client layout requires exactly 2 modalities".into(),
            ));
        }
        if !(self.dataset.holdout_frac > 0.0 && self.dataset.holdout_frac < 1.0) {
            return Err(fail(
                "dataset.holdout_frac",
                format!("must be in (0, 1), got {}", self.dataset.holdout_frac),
            ));
        }
        if self.eval.samples_per_client == 0 {
            return Err(fail(
                "eval.samples_per_client",
                "must be positive".into(),
            ));
        }
        self.synth_task()?.validate().map_err(|e| fail("dataset", e.to_string()))?;
        self.model_spec()?.validate().map_err(|e| fail("model", e.to_string()))?;
        self.federation.abc_split()?;
        self.federation.partition()?;
        self.train.validate().map_err(|e| fail("train", e.to_string()))?;
        Ok(())
    }

    pub fn synth_task(&self) -> Result<SynthTask> {
        Ok(SynthTask {
            kind: self.dataset.task,
            n_classes: self.dataset.n_classes,
            input_dims: self.dataset.input_dims.clone(),
            noise_scale: self.dataset.noise_scale,
            noise_ratio: self.dataset.noise_ratio,
            n_samples: self.dataset.n_samples,
            leak: self.dataset.leak,
        })
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec {
            n_classes: self.dataset.n_classes,
            input_dims: self.dataset.input_dims.clone(),
            hidden_dim: self.model.hidden_dim,
            embed_dim: self.model.embed_dim,
            fusion_dim: self.model.fusion_dim,
            fusion: self.model.fusion,
        })
    }

    /// Label used in report rows for the partition scheme.
    pub fn split_label(&self) -> String {
        match self.federation.partition() {
            Ok(p) => p.to_string(),
            Err(_) => self.federation.split.clone(),
        }
    }
}

/// Everything one seed shares across aggregation modes. Modes see the
/// same data, the same partition and the same initial model, so score
/// differences come from aggregation behavior alone.
pub struct SeedSetup {
    pub seed: u64,
    pub masks: Vec<ModalityMask>,
    pub plan: PartitionPlan,
    pub init: BlockedModel<f64>,
    pub client_train: Vec<Dataset>,
    pub client_eval: Vec<Dataset>,
}

pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedSetup> {
    let dataset = cfg.synth_task()?.generate(sub_seed(seed, "data", 0))?;
    let (train_idx, holdout_idx) =
        stratified_holdout(&dataset, cfg.dataset.holdout_frac, sub_seed(seed, "holdout", 0))?;
    let abc = cfg.federation.abc_split()?;
    let plan = partition(
        &dataset,
        &train_idx,
        abc.n_clients(),
        cfg.federation.partition()?,
        sub_seed(seed, "partition", 0),
    )?;
    let masks = abc.masks(sub_seed(seed, "modality-assign", 0))?;
    let init = BlockedModel::init(&cfg.model_spec()?, sub_seed(seed, "model-init", 0))?;
    let eval_slices = build_eval_slices(
        &dataset,
        &holdout_idx,
        &plan,
        cfg.eval.scheme,
        cfg.eval.samples_per_client,
        sub_seed(seed, "val-slice", 0),
    )?;
    let client_train = plan
        .shards
        .iter()
        .map(|s| dataset.gather(s))
        .collect::<Result<Vec<_>>>()?;
    let client_eval = eval_slices
        .iter()
        .map(|s| dataset.gather(s))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedSetup {
        seed,
        masks,
        plan,
        init,
        client_train,
        client_eval,
    })
}

/// Build per-client eval index lists over the holdout.
fn build_eval_slices(
    dataset: &Dataset,
    holdout: &[usize],
    plan: &PartitionPlan,
    scheme: EvalScheme,
    samples_per_client: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if holdout.is_empty() {
        return Err(Error::Data("empty holdout".into()));
    }
    match scheme {
        EvalScheme::Uniform => Ok(vec![holdout.to_vec(); plan.n_clients()]),
        EvalScheme::Matched => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes];
            for &i in holdout {
                by_class[dataset.labels[i]].push(i);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for list in &mut by_class {
                list.shuffle(&mut rng);
            }
            let budget = samples_per_client.min(holdout.len());
            let mut out = Vec::with_capacity(plan.n_clients());
            for k in 0..plan.n_clients() {
                let want = apportion(budget, &plan.class_proportions(k));
                let mut slice = Vec::new();
                for (c, w) in want.iter().enumerate() {
                    let take = (*w).min(by_class[c].len());
                    slice.extend_from_slice(&by_class[c][..take]);
                }
                if slice.is_empty() {
                    return Err(Error::Data(format!(
                        "client {k} got an empty matched eval slice"
                    )));
                }
                slice.sort_unstable();
                out.push(slice);
            }
            Ok(out)
        }
    }
}

/// Human label for the modality group a mask belongs to.
pub fn group_label(mask: &ModalityMask) -> String {
    if mask.n_modalities() == 2 {
        match (mask.is_present(0), mask.is_present(1)) {
            (true, false) => "mod0_only".into(),
            (false, true) => "mod1_only".into(),
            (true, true) => "both".into(),
            (false, false) => unreachable!("masks require one present modality"),
        }
    } else {
        format!("mask_{mask}")
    }
}

/// One evaluation pass: scores in percent per group, including "all".
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub round: usize,
    pub groups: BTreeMap<String, f64>,
}

/// Trajectory of one (seed, mode) pair.
pub struct ModeRun {
    pub mode: AggregationMode,
    pub evals: Vec<EvalPoint>,
    /// Mean of the last `final_window` global scores, percent.
    pub final_score: f64,
    pub round_comm: CommStats,
    pub total_comm: CommStats,
    /// Lowest-id client's full personalized model.
    pub exemplar: BlockedModel<f64>,
}

pub fn run_mode(cfg: &ExperimentConfig, setup: &SeedSetup, mode: AggregationMode) -> Result<ModeRun> {
    run_mode_with_audit(cfg, setup, mode, &mut |_| {})
}

/// `run_mode` with a per-step gradient audit hook.
pub fn run_mode_with_audit(
    cfg: &ExperimentConfig,
    setup: &SeedSetup,
    mode: AggregationMode,
    audit: &mut dyn FnMut(&StepAudit),
) -> Result<ModeRun> {
    let n_clients = setup.masks.len();
    let mut clients = Vec::with_capacity(n_clients);
    for k in 0..n_clients {
        clients.push(ClientState::new(
            k,
            setup.masks[k].clone(),
            setup.client_train[k].clone(),
            setup.client_eval[k].clone(),
            &setup.init,
            sub_seed(setup.seed, "client", k as u64),
        )?);
    }
    let mut server = Server::new(&setup.init, mode, &setup.masks, Box::new(FedAvg))?;
    let round_comm = server.round_comm()?;
    let mut total_comm = CommStats::default();
    let mut evals = Vec::new();
    for round in 0..cfg.rounds {
        total_comm += run_round_with_audit(&mut server, &mut clients, round, &cfg.train, audit)?;
        if (round + 1) % cfg.eval_every == 0 || round + 1 == cfg.rounds {
            sync_clients(&server, &mut clients)?;
            evals.push(EvalPoint {
                round: round + 1,
                groups: eval_groups(&clients, cfg.metric)?,
            });
        }
    }
    let window = cfg.final_window.min(evals.len());
    let final_score = evals[evals.len() - window..]
        .iter()
        .map(|e| e.groups["all"])
        .sum::<f64>()
        / window as f64;
    Ok(ModeRun {
        mode,
        evals,
        final_score,
        round_comm,
        total_comm,
        exemplar: clients[0].model().clone(),
    })
}

/// Per-group eval-sample-weighted mean score, in percent.
fn eval_groups(clients: &[ClientState], metric: Metric) -> Result<BTreeMap<String, f64>> {
    let mut scores = Vec::with_capacity(clients.len());
    let mut weights = Vec::with_capacity(clients.len());
    let mut labels = Vec::with_capacity(clients.len());
    for client in clients {
        let (s, n) = client.evaluate(metric)?;
        scores.push(s * 100.0);
        weights.push(n as f64);
        labels.push(group_label(client.mask()));
    }
    let mut groups = BTreeMap::new();
    groups.insert("all".to_string(), weighted_mean(&scores, &weights)?);
    let mut names: Vec<String> = labels.clone();
    names.sort();
    names.dedup();
    for name in names {
        let (vs, ws): (Vec<f64>, Vec<f64>) = scores
            .iter()
            .zip(&weights)
            .zip(&labels)
            .filter(|(_, l)| **l == name)
            .map(|((v, w), _)| (*v, *w))
            .unzip();
        groups.insert(name, weighted_mean(&vs, &ws)?);
    }
    Ok(groups)
}

/// One line of the results grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub dataset: String,
    /// The a-b-c layout.
    pub config: String,
    pub missing_rate: f64,
    pub split: String,
    pub fusion: String,
    pub s_fm: Option<f64>,
    pub s_ph: Option<f64>,
    pub s_phf: Option<f64>,
    pub ph_gain: Option<f64>,
    pub phf_gain: Option<f64>,
    pub pg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: usize,
    pub group: String,
    pub mode: String,
    /// Mean over seeds, percent.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub mode: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommRow {
    pub mode: String,
    pub round_params: u64,
    pub round_bytes: u64,
    pub total_params: u64,
    pub total_bytes: u64,
}

/// Deterministic run results, written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format_version: u32,
    pub metric: Metric,
    pub rows: Vec<TableRow>,
    pub curves: Vec<CurvePoint>,
    pub per_seed: Vec<SeedScore>,
    pub comm: Vec<CommRow>,
    pub config: ExperimentConfig,
}

/// Report plus final models for checkpointing.
pub struct RunOutput {
    pub report: ExperimentReport,
    /// `(mode, seed)` to the exemplar client model.
    pub checkpoints: Vec<(AggregationMode, u64, BlockedModel<f64>)>,
}

pub fn run_in_memory(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut per_mode: BTreeMap<AggregationMode, Vec<ModeRun>> = BTreeMap::new();
    let mut checkpoints = Vec::new();
    for &seed in &cfg.seeds {
        let setup = prepare_seed(cfg, seed)?;
        for &mode in &cfg.modes {
            let run = run_mode(cfg, &setup, mode)?;
            checkpoints.push((mode, seed, run.exemplar.clone()));
            per_mode.entry(mode).or_default().push(run);
        }
    }

    let mut per_seed = Vec::new();
    let mut comm = Vec::new();
    let mut finals: BTreeMap<AggregationMode, f64> = BTreeMap::new();
    for &mode in &cfg.modes {
        let runs = &per_mode[&mode];
        for (seed, run) in cfg.seeds.iter().zip(runs.iter()) {
            per_seed.push(SeedScore {
                seed: *seed,
                mode: mode.to_string(),
                score: run.final_score,
            });
        }
        finals.insert(
            mode,
            runs.iter().map(|r| r.final_score).sum::<f64>() / runs.len() as f64,
        );
        let mut total = CommStats::default();
        for r in runs {
            total += r.total_comm;
        }
        comm.push(CommRow {
            mode: mode.to_string(),
            round_params: runs[0].round_comm.total_params(),
            round_bytes: runs[0].round_comm.total_bytes(),
            total_params: total.total_params() / runs.len() as u64,
            total_bytes: total.total_bytes() / runs.len() as u64,
        });
    }

    let mut curves = Vec::new();
    for &mode in &cfg.modes {
        let runs = &per_mode[&mode];
        let n_evals = runs[0].evals.len();
        for e in 0..n_evals {
            let round = runs[0].evals[e].round;
            let group_names: Vec<String> = runs[0].evals[e].groups.keys().cloned().collect();
            for group in group_names {
                let mean = runs
                    .iter()
                    .map(|r| r.evals[e].groups[&group])
                    .sum::<f64>()
                    / runs.len() as f64;
                curves.push(CurvePoint {
                    round,
                    group,
                    mode: mode.to_string(),
                    score: mean,
                });
            }
        }
    }

    let abc = cfg.federation.abc_split()?;
    let full = [AggregationMode::Fm, AggregationMode::Ph, AggregationMode::Phf];
    let row = if full.iter().all(|m| finals.contains_key(m)) {
        let g = gains(
            finals[&AggregationMode::Fm],
            finals[&AggregationMode::Ph],
            finals[&AggregationMode::Phf],
        )?;
        TableRow {
            dataset: cfg.dataset.task.to_string(),
            config: abc.to_string(),
            missing_rate: abc.missing_rate(),
            split: cfg.split_label(),
            fusion: cfg.model.fusion.to_string(),
            s_fm: Some(g.s_fm),
            s_ph: Some(g.s_ph),
            s_phf: Some(g.s_phf),
            ph_gain: Some(g.ph_gain),
            phf_gain: Some(g.phf_gain),
            pg: Some(g.pg),
        }
    } else {
        TableRow {
            dataset: cfg.dataset.task.to_string(),
            config: abc.to_string(),
            missing_rate: abc.missing_rate(),
            split: cfg.split_label(),
            fusion: cfg.model.fusion.to_string(),
            s_fm: finals.get(&AggregationMode::Fm).copied(),
            s_ph: finals.get(&AggregationMode::Ph).copied(),
            s_phf: finals.get(&AggregationMode::Phf).copied(),
            ph_gain: None,
            phf_gain: None,
            pg: None,
        }
    };

    let report = ExperimentReport {
        format_version: REPORT_FORMAT_VERSION,
        metric: cfg.metric,
        rows: vec![row],
        curves,
        per_seed,
        comm,
        config: cfg.clone(),
    };
    Ok(RunOutput {
        report,
        checkpoints,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// Render the gains grid as CSV (header comment carries the format
/// version).
pub fn render_gains_csv(rows: &[TableRow]) -> String {
    let mut out = format!("# format_version {REPORT_FORMAT_VERSION}\n");
    out.push_str("dataset,config,split,fusion,S_FM,S_PH,S_PHF,ph_gain,phf_gain,pg\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.dataset,
            r.config,
            r.split,
            r.fusion,
            fmt_opt(r.s_fm),
            fmt_opt(r.s_ph),
            fmt_opt(r.s_phf),
            fmt_opt(r.ph_gain),
            fmt_opt(r.phf_gain),
            fmt_opt(r.pg),
        ));
    }
    out
}

pub fn render_curves_csv(curves: &[CurvePoint]) -> String {
    let mut out = format!("# format_version {REPORT_FORMAT_VERSION}\n");
    out.push_str("round,group,mode,score\n");
    for c in curves {
        out.push_str(&format!("{},{},{},{:.4}\n", c.round, c.group, c.mode, c.score));
    }
    out
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    fs::write(path, body + "\n")?;
    Ok(())
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = toml::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    fs::write(path, body)?;
    Ok(())
}

/// Write all deterministic report files for one run.
pub fn write_report(dir: &Path, output: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("gains.csv"), render_gains_csv(&output.report.rows))?;
    fs::write(dir.join("curves.csv"), render_curves_csv(&output.report.curves))?;
    write_json(&dir.join("summary.json"), &output.report)?;
    write_toml(&dir.join("config.resolved.toml"), &output.report.config)?;
    let ckpt_dir = dir.join("checkpoints");
    for (mode, seed, model) in &output.checkpoints {
        save_checkpoint(&ckpt_dir.join(format!("{mode}-seed{seed}.fbm")), model, *seed)?;
    }
    Ok(())
}

pub fn append_run_log(dir: &Path, line: &str) -> Result<()> {
    use std::io::Write as _;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("run.log"))?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Run a config and write its report directory.
pub fn run_to_dir(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport> {
    let started = Instant::now();
    let output = run_in_memory(cfg)?;
    write_report(out_dir, &output)?;
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    append_run_log(
        out_dir,
        &format!(
            "[{stamp}] run `{}`: {} seeds x {} modes x {} rounds in {:.2}s",
            cfg.name,
            cfg.seeds.len(),
            cfg.modes.len(),
            cfg.rounds,
            started.elapsed().as_secs_f64()
        ),
    )?;
    Ok(output.report)
}

/// Axes of a sweep grid. Missing axes fall back to the base config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridAxes {
    pub task: Option<Vec<String>>,
    pub abc: Option<Vec<String>>,
    pub split: Option<Vec<String>>,
    pub fusion: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub format_version: u32,
    pub name: String,
    pub base: ExperimentConfig,
    pub grid: GridAxes,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            format_version: REPORT_FORMAT_VERSION,
            name: "sweep".into(),
            base: ExperimentConfig::default(),
            grid: GridAxes::default(),
        }
    }
}

impl SweepConfig {
    pub fn from_toml_str(body: &str) -> Result<Self> {
        let cfg: SweepConfig = toml::from_str(body).map_err(|e| Error::Config {
            path: "sweep".into(),
            detail: e.to_string(),
        })?;
        for (_, combo) in cfg.expand()? {
            combo.validate()?;
        }
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::from_toml_str(&body)
    }

    /// Cartesian product of the axes, in declaration order.
    pub fn expand(&self) -> Result<Vec<(String, ExperimentConfig)>> {
        let tasks = self
            .grid
            .task
            .clone()
            .unwrap_or_else(|| vec![self.base.dataset.task.to_string()]);
        let abcs = self
            .grid
            .abc
            .clone()
            .unwrap_or_else(|| vec![self.base.federation.abc.clone()]);
        let splits = self
            .grid
            .split
            .clone()
            .unwrap_or_else(|| vec![self.base.federation.split.clone()]);
        let fusions = self
            .grid
            .fusion
            .clone()
            .unwrap_or_else(|| vec![self.base.model.fusion.to_string()]);
        let mut out = Vec::new();
        for task in &tasks {
            for abc in &abcs {
                for split in &splits {
                    for fusion in &fusions {
                        let mut cfg = self.base.clone();
                        cfg.dataset.task = task.parse()?;
                        cfg.federation.abc = abc.clone();
                        cfg.federation.split = split.clone();
                        cfg.model.fusion = fusion.parse()?;
                        let name = format!("{task}_{abc}_{split}_{fusion}");
                        cfg.name = name.clone();
                        out.push((name, cfg));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Run every grid combination and write per-combo reports under
/// `runs/`, plus a merged grid at the top level.
pub fn run_sweep_to_dir(sweep: &SweepConfig, out_dir: &Path) -> Result<Vec<TableRow>> {
    let started = Instant::now();
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    let mut merged = Vec::new();
    for (name, cfg) in sweep.expand()? {
        let output = run_in_memory(&cfg)?;
        write_report(&out_dir.join("runs").join(&name), &output)?;
        rows.extend(output.report.rows.clone());
        merged.push((name, output.report));
    }
    fs::write(out_dir.join("gains.csv"), render_gains_csv(&rows))?;
    #[derive(Serialize)]
    struct SweepSummary<'a> {
        format_version: u32,
        name: &'a str,
        rows: &'a [TableRow],
        runs: Vec<&'a str>,
    }
    write_json(
        &out_dir.join("summary.json"),
        &SweepSummary {
            format_version: REPORT_FORMAT_VERSION,
            name: &sweep.name,
            rows: &rows,
            runs: merged.iter().map(|(n, _)| n.as_str()).collect(),
        },
    )?;
    write_toml(&out_dir.join("sweep.resolved.toml"), sweep)?;
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    append_run_log(
        out_dir,
        &format!(
            "[{stamp}] sweep `{}`: {} combos in {:.2}s",
            sweep.name,
            merged.len(),
            started.elapsed().as_secs_f64()
        ),
    )?;
    Ok(rows)
}

/// Outcome of re-running a report and comparing files.
#[derive(Debug, Clone, Serialize)]
pub struct ReplayOutcome {
    pub files_compared: usize,
    /// Relative paths that differ or are missing on either side.
    pub mismatches: Vec<String>,
}

impl ReplayOutcome {
    pub fn is_clean(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Re-run the resolved config stored in a report directory and
/// byte-compare every deterministic file (`run.log` is excluded).
pub fn replay(report_dir: &Path) -> Result<ReplayOutcome> {
    let scratch = tempfile::tempdir()?;
    let run_cfg = report_dir.join("config.resolved.toml");
    let sweep_cfg = report_dir.join("sweep.resolved.toml");
    if run_cfg.exists() {
        let cfg = ExperimentConfig::from_toml_file(&run_cfg)?;
        run_to_dir(&cfg, scratch.path())?;
    } else if sweep_cfg.exists() {
        let sweep = SweepConfig::from_toml_file(&sweep_cfg)?;
        run_sweep_to_dir(&sweep, scratch.path())?;
    } else {
        return Err(Error::Config {
            path: report_dir.display().to_string(),
            detail: "no config.resolved.toml or sweep.resolved.toml found".into(),
        });
    }
    compare_dirs(report_dir, scratch.path())
}

fn collect_files(root: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(root.join(rel))?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.file_name())
        .collect();
    entries.sort();
    for name in entries {
        if name == "run.log" {
            continue;
        }
        let sub = rel.join(&name);
        if root.join(&sub).is_dir() {
            collect_files(root, &sub, out)?;
        } else {
            out.push(sub);
        }
    }
    Ok(())
}

fn compare_dirs(original: &Path, fresh: &Path) -> Result<ReplayOutcome> {
    let mut orig_files = Vec::new();
    collect_files(original, Path::new(""), &mut orig_files)?;
    let mut fresh_files = Vec::new();
    collect_files(fresh, Path::new(""), &mut fresh_files)?;
    let mut mismatches = Vec::new();
    for f in &fresh_files {
        if !orig_files.contains(f) {
            mismatches.push(format!("{} (only in replay)", f.display()));
        }
    }
    let mut compared = 0;
    for f in &orig_files {
        if !fresh_files.contains(f) {
            mismatches.push(format!("{} (missing in replay)", f.display()));
            continue;
        }
        compared += 1;
        let a = fs::read(original.join(f))?;
        let b = fs::read(fresh.join(f))?;
        if a != b {
            mismatches.push(f.display().to_string());
        }
    }
    Ok(ReplayOutcome {
        files_compared: compared,
        mismatches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small but non-degenerate config that runs in well under a
    /// second.
    pub(crate) fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.name = "tiny".into();
        cfg.seeds = vec![1];
        cfg.rounds = 2;
        cfg.final_window = 2;
        cfg.dataset.n_samples = 240;
        cfg.dataset.input_dims = vec![6, 6];
        cfg.dataset.task = TaskKind::Redundant;
        cfg.model.hidden_dim = 8;
        cfg.model.embed_dim = 6;
        cfg.model.fusion_dim = 8;
        cfg.federation.abc = "2-2-2".into();
        cfg.train.batch_size = 16;
        cfg.eval.samples_per_client = 24;
        cfg
    }

    #[test]
    fn empty_toml_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.rounds, 60);
        assert_eq!(cfg.modes.len(), 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("nope = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        assert_eq!(err.exit_code(), 1);
        let err2 = ExperimentConfig::from_toml_str("[dataset]\nn_classez = 4\n").unwrap_err();
        assert!(matches!(err2, Error::Config { .. }));
    }

    #[test]
    fn bad_values_fail_validation() {
        for body in [
            "seeds = []\n",
            "rounds = 0\n",
            "modes = [\"fm\", \"fm\"]\n",
            "[federation]\nabc = \"1-2\"\n",
            "[federation]\nsplit = \"sorted\"\n",
            "[federation]\nsplit = \"dirichlet\"\nalpha = 0.0\n",
            "[dataset]\nholdout_frac = 1.5\n",
            "[dataset]\ninput_dims = [4, 4, 4]\n",
        ] {
            let err = ExperimentConfig::from_toml_str(body).unwrap_err();
            assert_eq!(err.exit_code(), 1, "body: {body}");
        }
    }

    #[test]
    fn config_toml_roundtrip() {
        let cfg = tiny_config();
        let body = toml::to_string_pretty(&cfg).unwrap();
        let back = ExperimentConfig::from_toml_str(&body).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn matched_eval_slices_follow_client_proportions() {
        let cfg = tiny_config();
        let setup = prepare_seed(&cfg, 3).unwrap();
        // Rebuild the slices to inspect them directly.
        let dataset = cfg.synth_task().unwrap().generate(sub_seed(3, "data", 0)).unwrap();
        let (_, holdout) =
            stratified_holdout(&dataset, cfg.dataset.holdout_frac, sub_seed(3, "holdout", 0))
                .unwrap();
        let slices = build_eval_slices(
            &dataset,
            &holdout,
            &setup.plan,
            EvalScheme::Matched,
            24,
            sub_seed(3, "val-slice", 0),
        )
        .unwrap();
        assert_eq!(slices.len(), 6);
        for (k, slice) in slices.iter().enumerate() {
            assert!(!slice.is_empty());
            assert!(slice.iter().all(|i| holdout.contains(i)));
            // A class the client never trains on must not be scored.
            let props = setup.plan.class_proportions(k);
            for &i in slice {
                assert!(props[dataset.labels[i]] > 0.0);
            }
        }
    }

    #[test]
    fn uniform_eval_slices_are_the_full_holdout() {
        let cfg = tiny_config();
        let dataset = cfg.synth_task().unwrap().generate(1).unwrap();
        let (train, holdout) = stratified_holdout(&dataset, 0.2, 2).unwrap();
        let plan = partition(&dataset, &train, 6, Partition::Iid, 3).unwrap();
        let slices =
            build_eval_slices(&dataset, &holdout, &plan, EvalScheme::Uniform, 24, 4).unwrap();
        assert!(slices.iter().all(|s| s == &holdout));
    }

    #[test]
    fn tiny_run_produces_coherent_report() {
        let cfg = tiny_config();
        let output = run_in_memory(&cfg).unwrap();
        let report = &output.report;
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        assert_eq!(row.config, "2-2-2");
        assert!((row.missing_rate - 4.0 / 12.0).abs() < 1e-12);
        assert!(row.pg.is_some());
        assert!(row.s_fm.unwrap() > 0.0);
        // 3 modes x 2 eval rounds x 4 groups (all, mod0, mod1, both).
        assert_eq!(report.curves.len(), 3 * 2 * 4);
        assert_eq!(report.per_seed.len(), 3);
        assert_eq!(output.checkpoints.len(), 3);
        // Traffic strictly shrinks as more blocks go private.
        let by_mode: BTreeMap<&str, u64> = report
            .comm
            .iter()
            .map(|c| (c.mode.as_str(), c.round_params))
            .collect();
        assert!(by_mode["phf"] < by_mode["ph"]);
        assert!(by_mode["ph"] < by_mode["fm"]);
    }

    #[test]
    fn runs_are_bit_reproducible_in_memory() {
        let cfg = tiny_config();
        let a = run_in_memory(&cfg).unwrap();
        let b = run_in_memory(&cfg).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(
            render_gains_csv(&a.report.rows),
            render_gains_csv(&b.report.rows)
        );
        assert_eq!(
            render_curves_csv(&a.report.curves),
            render_curves_csv(&b.report.curves)
        );
        for ((m1, s1, model1), (m2, s2, model2)) in
            a.checkpoints.iter().zip(b.checkpoints.iter())
        {
            assert_eq!((m1, s1), (m2, s2));
            assert_eq!(model1, model2);
        }
    }

    #[test]
    fn modes_share_data_and_differ_only_by_aggregation() {
        let cfg = tiny_config();
        let setup = prepare_seed(&cfg, 1).unwrap();
        let fm = run_mode(&cfg, &setup, AggregationMode::Fm).unwrap();
        let ph = run_mode(&cfg, &setup, AggregationMode::Ph).unwrap();
        // Same init everywhere, so encoder trajectories start together
        // but the modes must diverge somewhere by the end.
        assert_ne!(fm.exemplar, ph.exemplar);
    }

    #[test]
    fn report_dir_replays_cleanly() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        run_to_dir(&cfg, dir.path()).unwrap();
        for name in ["gains.csv", "curves.csv", "summary.json", "config.resolved.toml", "run.log"] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        let outcome = replay(dir.path()).unwrap();
        assert!(outcome.is_clean(), "mismatches: {:?}", outcome.mismatches);
        assert!(outcome.files_compared >= 7);

        // Tampering is detected.
        let gains_path = dir.path().join("gains.csv");
        let mut body = fs::read_to_string(&gains_path).unwrap();
        body.push_str("tampered\n");
        fs::write(&gains_path, body).unwrap();
        let outcome = replay(dir.path()).unwrap();
        assert_eq!(outcome.mismatches, vec!["gains.csv".to_string()]);
    }

    #[test]
    fn sweep_expands_and_merges_rows() {
        let mut sweep = SweepConfig::default();
        sweep.base = tiny_config();
        sweep.grid.abc = Some(vec!["2-2-2".into(), "0-0-6".into()]);
        sweep.grid.split = Some(vec!["iid".into()]);
        let combos = sweep.expand().unwrap();
        assert_eq!(combos.len(), 2);
        assert_eq!(combos[0].0, "redundant_2-2-2_iid_concat");
        let dir = tempfile::tempdir().unwrap();
        let rows = run_sweep_to_dir(&sweep, dir.path()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(dir.path().join("runs/redundant_0-0-6_iid_concat/gains.csv").exists());
        assert!(dir.path().join("gains.csv").exists());
        assert!(dir.path().join("sweep.resolved.toml").exists());
        let outcome = replay(dir.path()).unwrap();
        assert!(outcome.is_clean(), "mismatches: {:?}", outcome.mismatches);
    }

    #[test]
    fn group_labels_cover_two_modalities() {
        assert_eq!(group_label(&ModalityMask::single(2, 0).unwrap()), "mod0_only");
        assert_eq!(group_label(&ModalityMask::single(2, 1).unwrap()), "mod1_only");
        assert_eq!(group_label(&ModalityMask::full(2)), "both");
        assert_eq!(group_label(&ModalityMask::full(3)), "mask_111");
    }
}
