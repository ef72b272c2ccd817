//! Stage-by-stage experiment runner over a run directory.
//!
//! Every stage reads its inputs from and writes its outputs to the run
//! directory, and is skipped when its output already exists; an interrupted
//! run picks up where it stopped.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use exitsteal_core::attack::{
    build_query_set, estimate_exit_labels, train_substitute, AttackConfig, LossTrace, Provenance, QueryRecord,
    QuerySet, RecordBatch,
};
use exitsteal_core::changepoint::ChangepointResult;
use exitsteal_core::data::LabeledSet;
use exitsteal_core::metrics::{make_report, EvalReport};
use exitsteal_core::multiexit::{BackboneSpec, BlockSpec, MultiExitNet, OutputStrategy};
use exitsteal_core::numerics::Tensor;
use exitsteal_core::search::{search_strategy, CalibrationPoint, SearchOutcome};
use exitsteal_core::victimlab::{
    select_traditional_strategy, train_victim, TimingModel, TrainConfig, TraditionalSelection, VictimDeployment,
};
use exitsteal_core::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{ArchConfig, BaselineArch, DatasetKind, ExperimentConfig};
use crate::datasets::{generate_unrelated, BlobTask};
use crate::error::{HarnessError, Result};
use crate::idx::{load_idx_dataset, load_idx_images};

/// Data every stage draws from, rebuilt deterministically from the config.
pub struct Environment {
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub iid_pool: Tensor,
    pub unrelated_pool: Tensor,
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

impl Environment {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let d = &cfg.dataset;
        let seed = cfg.seeds.dataset;
        match d.kind {
            DatasetKind::Synthetic => {
                let task = BlobTask::new(
                    d.classes,
                    d.features,
                    d.blobs_per_class,
                    d.center_spread,
                    d.tier_noise.clone(),
                    seed,
                )?;
                Ok(Self {
                    train: task.sample(d.train_size, seed.wrapping_add(1)).set,
                    test: task.sample(d.test_size, seed.wrapping_add(2)).set,
                    iid_pool: task.sample(d.iid_pool, seed.wrapping_add(3)).set.inputs().clone(),
                    unrelated_pool: generate_unrelated(
                        d.unrelated_pool,
                        d.features,
                        d.unrelated_scale * d.center_spread,
                        seed.wrapping_add(4),
                    ),
                    input_shape: vec![d.features],
                    classes: d.classes,
                })
            }
            DatasetKind::Idx => {
                let path = |p: &Option<PathBuf>| p.clone().expect("validated");
                let train = load_idx_dataset(&path(&d.train_images), &path(&d.train_labels), d.duplicate_channels)?;
                let test = load_idx_dataset(&path(&d.test_images), &path(&d.test_labels), d.duplicate_channels)?;
                let input_shape = train.inputs().shape()[1..].to_vec();
                let per: usize = input_shape.iter().product();
                let unrelated_pool = match &d.unrelated_images {
                    Some(p) => load_idx_images(p, d.duplicate_channels)?,
                    None => {
                        let mut shape = vec![d.unrelated_pool];
                        shape.extend(&input_shape);
                        generate_unrelated(d.unrelated_pool, per, d.unrelated_scale, seed.wrapping_add(4))
                            .reshape(shape)?
                    }
                };
                let classes = train.labels().iter().chain(test.labels()).max().map_or(0, |m| m + 1);
                Ok(Self {
                    iid_pool: train.inputs().clone(),
                    train,
                    test,
                    unrelated_pool,
                    input_shape,
                    classes,
                })
            }
        }
    }
}

pub fn backbone_for(arch: &ArchConfig, input_shape: &[usize]) -> BackboneSpec {
    if arch.conv_channels.is_empty() {
        let flat = input_shape.iter().product();
        let mut spec = BackboneSpec::dense(flat, &arch.widths, arch.activation);
        spec.input_shape = input_shape.to_vec();
        spec
    } else {
        let mut blocks = Vec::new();
        let mut prev = input_shape[0];
        for &c in &arch.conv_channels {
            blocks.push(BlockSpec::Conv {
                in_channels: prev,
                out_channels: c,
                kernel: 3,
                stride: 1,
            });
            prev = c;
        }
        BackboneSpec {
            input_shape: input_shape.to_vec(),
            blocks,
            activation: arch.activation,
        }
    }
}

/// Substitute variants a run can train and report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Performance + strategy loss, searched strategy.
    Ours,
    /// Performance loss only, traditional strategy.
    Baseline,
    /// Performance loss only, searched strategy.
    NoStrategyLoss,
    /// Performance + strategy loss, traditional strategy.
    NoSearch,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ours, Variant::Baseline, Variant::NoStrategyLoss, Variant::NoSearch];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::Baseline => "baseline",
            Variant::NoStrategyLoss => "no_strategy_loss",
            Variant::NoSearch => "no_search",
        }
    }

    /// Which trained network the variant deploys.
    pub fn network(self) -> &'static str {
        match self {
            Variant::Ours | Variant::NoSearch => "ours",
            Variant::Baseline => "baseline",
            Variant::NoStrategyLoss => "no_strategy_loss",
        }
    }

    pub fn uses_search(self) -> bool {
        matches!(self, Variant::Ours | Variant::NoStrategyLoss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentRecord {
    pub strategy: OutputStrategy,
    pub timing: TimingModel,
}

/// Strategy chosen for one variant, with how it was chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum StrategyRecord {
    Search {
        strategy: OutputStrategy,
        agreement: f64,
        candidate_counts: Vec<usize>,
        points: usize,
    },
    Traditional(TraditionalSelection),
}

impl StrategyRecord {
    pub fn strategy(&self) -> &OutputStrategy {
        match self {
            StrategyRecord::Search { strategy, .. } => strategy,
            StrategyRecord::Traditional(t) => &t.strategy,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    pub outcome: String,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunStatus {
    pub stages: Vec<StageStatus>,
}

/// Everything reported for a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub changepoint: ChangepointResult,
    pub victim_exit_count: usize,
    pub victim: EvalReport,
    /// Victim test accuracy of each exit on its own.
    pub victim_exit_accuracy: Vec<f64>,
    pub variants: Vec<(String, EvalReport)>,
    pub lambda_sweep: Vec<LambdaPoint>,
}

impl RunSummary {
    pub fn variant(&self, name: &str) -> Option<&EvalReport> {
        self.variants.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub calibration_agreement: f64,
    pub report: EvalReport,
}

/// A run directory bound to its configuration.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    env: Option<Environment>,
    status: RunStatus,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(HarnessError::MissingArtifact(path.to_owned()));
    }
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_net(path: &Path) -> Result<MultiExitNet> {
    if !path.exists() {
        return Err(HarnessError::MissingArtifact(path.to_owned()));
    }
    Ok(MultiExitNet::load(path)?)
}

impl Run {
    pub fn new(cfg: ExperimentConfig, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("reports")).map_err(|e| HarnessError::io(&dir, e))?;
        let status_path = dir.join("status.json");
        let status = if status_path.exists() {
            read_json(&status_path).unwrap_or_default()
        } else {
            RunStatus::default()
        };
        let cfg_path = dir.join("config.toml");
        if cfg_path.exists() {
            let mut prev = ExperimentConfig::load(&cfg_path)?;
            prev.out_dir = cfg.out_dir.clone();
            if prev.to_toml() != cfg.to_toml() {
                return Err(HarnessError::StaleRun(dir));
            }
        }
        let run = Self {
            cfg,
            dir,
            env: None,
            status,
        };
        fs::write(run.path("config.toml"), run.cfg.to_toml()).map_err(|e| HarnessError::io(run.path("config.toml"), e))?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn env(&mut self) -> Result<&Environment> {
        if self.env.is_none() {
            self.env = Some(Environment::build(&self.cfg)?);
        }
        Ok(self.env.as_ref().unwrap())
    }

    /// Runs `f` unless `artifact` exists, recording the outcome in `status.json`.
    fn stage<F>(&mut self, name: &str, artifact: &Path, f: F) -> Result<()>
    where
        F: FnOnce(&mut Self) -> Result<()>,
    {
        if artifact.exists() {
            return Ok(());
        }
        let start = Instant::now();
        let res = f(self);
        let entry = StageStatus {
            stage: name.to_owned(),
            outcome: if res.is_ok() { "ok" } else { "failed" }.into(),
            seconds: start.elapsed().as_secs_f64(),
            error: res.as_ref().err().map(ToString::to_string),
        };
        self.status.stages.retain(|s| s.stage != name);
        self.status.stages.push(entry);
        write_json(&self.path("status.json"), &self.status)?;
        res
    }

    fn victim_train_config(&self) -> TrainConfig {
        let v = &self.cfg.victim;
        TrainConfig {
            epochs: v.epochs,
            lr: v.lr,
            batch_size: v.batch_size,
            momentum: v.momentum,
            seed: self.cfg.seeds.shuffle,
        }
    }

    pub fn train_victim(&mut self) -> Result<()> {
        let out = self.path("victim.ckpt");
        self.stage("train-victim", &out.clone(), |run| {
            let cfg = run.victim_train_config();
            let v = run.cfg.victim.clone();
            let seed = run.cfg.seeds.victim_init;
            let env = run.env()?;
            let spec = backbone_for(&v.arch, &env.input_shape);
            let net = MultiExitNet::build_evenly_partitioned(spec, v.exits, env.classes, seed)?;
            let net = train_victim(net, &env.train, &cfg)?;
            net.save(&out)?;
            Ok(())
        })
    }

    pub fn victim_net(&self) -> Result<MultiExitNet> {
        load_net(&self.path("victim.ckpt"))
    }

    pub fn deploy(&mut self) -> Result<()> {
        let out = self.path("deployment.json");
        self.stage("deploy", &out.clone(), |run| {
            let net = run.victim_net()?;
            let v = &run.cfg.victim;
            let strategy = match &v.thresholds {
                Some(t) => OutputStrategy::new(t.clone())?,
                None => OutputStrategy::uniform(v.tau, net.exit_count())?,
            };
            let mut timing = TimingModel::uniform(&net, v.timing.block_cost, v.timing.head_cost, 0.0, run.cfg.seeds.victim_noise);
            timing.noise_sigma = match v.timing.noise_sigma {
                Some(s) => s,
                None => {
                    let base = timing.base_times(&net);
                    let gap = base.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
                    gap / v.timing.gap_over_sigma
                }
            };
            write_json(&out, &DeploymentRecord { strategy, timing })
        })
    }

    pub fn deployment(&self) -> Result<VictimDeployment> {
        let rec: DeploymentRecord = read_json(&self.path("deployment.json"))?;
        Ok(VictimDeployment::new(self.victim_net()?, rec.strategy, rec.timing)?)
    }

    pub fn build_queries(&mut self) -> Result<()> {
        let out = self.path("query_set.json");
        self.stage("query", &out.clone(), |run| {
            let a = run.cfg.attacker.clone();
            let seed = run.cfg.seeds.shuffle ^ 0x5157;
            let env = run.env()?;
            let q = build_query_set(&env.iid_pool, &env.unrelated_pool, a.n_iid, a.n_unrelated, seed)?;
            write_json(&out, &q)
        })
    }

    /// The i.i.d. rows of the query set used for changepoint fitting and
    /// strategy calibration (query-set indices).
    fn calibration_indices(&self, q: &QuerySet) -> Vec<usize> {
        q.provenance
            .iter()
            .enumerate()
            .filter(|(_, p)| **p == Provenance::Iid)
            .map(|(i, _)| i)
            .take(self.cfg.attacker.calibration)
            .collect()
    }

    pub fn estimate_exits(&mut self) -> Result<()> {
        let out = self.path("records.json");
        self.stage("estimate-exits", &out.clone(), |run| {
            let q: QuerySet = read_json(&run.path("query_set.json"))?;
            let mut dep = run.deployment()?;
            let calib = q.inputs.gather_rows(&run.calibration_indices(&q));
            let (cp, records) = estimate_exit_labels(&mut dep, &calib, &q.inputs, &run.cfg.attacker.bcd)?;
            write_json(&run.path("changepoint.json"), &cp)?;
            write_json(&out, &records)
        })
    }

    pub fn records(&self) -> Result<(ChangepointResult, Vec<QueryRecord>)> {
        let records = read_json(&self.path("records.json"))?;
        Ok((read_json(&self.path("changepoint.json"))?, records))
    }

    fn substitute_init(&mut self, network: &str, exit_count: usize) -> Result<MultiExitNet> {
        let seed = self.cfg.seeds.attacker_init;
        let victim_arch = self.cfg.baseline_uses_victim_arch() && network == "baseline";
        let arch = if victim_arch {
            self.cfg.victim.arch.clone()
        } else {
            self.cfg.attacker.arch.clone()
        };
        let input_shape = self.env()?.input_shape.clone();
        let classes = self.env()?.classes;
        let spec = backbone_for(&arch, &input_shape);
        if victim_arch {
            let exits = self.victim_net()?.exits().to_vec();
            return Ok(MultiExitNet::with_exits(spec, exits, classes, seed)?);
        }
        let k = exit_count.clamp(2, spec.block_count());
        Ok(MultiExitNet::build_evenly_partitioned(spec, k, classes, seed)?)
    }

    fn attack_config(&self, lambda: f64) -> AttackConfig {
        AttackConfig {
            lambda,
            seed: self.cfg.seeds.shuffle ^ 0x7a11,
            ..self.cfg.attacker.train.clone()
        }
    }

    /// Trains the named substitute network (`ours`, `baseline`,
    /// `no_strategy_loss` or `lambda_<x>`).
    pub fn train_network(&mut self, network: &str) -> Result<()> {
        let out = self.path(&format!("{network}.ckpt"));
        let lambda = match network {
            "ours" => self.cfg.attacker.train.lambda,
            "baseline" | "no_strategy_loss" => 0.0,
            other => other
                .strip_prefix("lambda_")
                .and_then(|l| l.parse().ok())
                .ok_or_else(|| HarnessError::Core(Error::Contract(format!("unknown substitute {other}"))))?,
        };
        self.stage(&format!("train-substitute:{network}"), &out.clone(), |run| {
            let (cp, records) = run.records()?;
            let mut sub = run.substitute_init(network, cp.exit_count)?;
            let records = clamp_exits(records, sub.exit_count());
            let cfg = run.attack_config(lambda);
            let trace: LossTrace;
            (sub, trace) = train_substitute(sub, &records, &cfg)?;
            let trace_path = run.path(&format!("{network}_trace.csv"));
            fs::write(&trace_path, trace.to_csv()).map_err(|e| HarnessError::io(&trace_path, e))?;
            sub.save(&out)?;
            Ok(())
        })
    }

    pub fn network(&self, network: &str) -> Result<MultiExitNet> {
        load_net(&self.path(&format!("{network}.ckpt")))
    }

    fn calibration_records(&self) -> Result<Vec<QueryRecord>> {
        let q: QuerySet = read_json(&self.path("query_set.json"))?;
        let (_, records) = self.records()?;
        Ok(self.calibration_indices(&q).into_iter().map(|i| records[i].clone()).collect())
    }

    /// Output-strategy search on the calibration records, shrinking the
    /// point set while the candidate product exceeds the budget.
    pub fn searched_strategy(&self, net: &MultiExitNet) -> Result<StrategyRecord> {
        let calib = clamp_exits(self.calibration_records()?, net.exit_count());
        let batch = RecordBatch::from_records(&calib)?;
        let conf = net.confidences(&batch.inputs)?;
        let points: Vec<CalibrationPoint> = conf
            .into_iter()
            .zip(&batch.exits)
            .map(|(conf, &target_exit)| CalibrationPoint { conf, target_exit })
            .collect();
        let mut n = self.cfg.attacker.search_points.min(points.len());
        loop {
            match search_strategy(&points[..n]) {
                Ok(SearchOutcome {
                    strategy,
                    agreement,
                    candidate_counts,
                }) => {
                    return Ok(StrategyRecord::Search {
                        strategy,
                        agreement,
                        candidate_counts,
                        points: n,
                    })
                }
                Err(Error::Budget { .. }) if n > 16 => n /= 2,
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Uniform threshold chosen on the calibration inputs labeled with the
    /// victim's predictions.
    pub fn traditional_strategy(&self, net: &MultiExitNet) -> Result<StrategyRecord> {
        let calib = self.calibration_records()?;
        let batch = RecordBatch::from_records(&calib)?;
        let labels = calib.iter().map(|r| r.victim_probs.argmax()).collect();
        let set = LabeledSet::new(batch.inputs, labels)?;
        Ok(StrategyRecord::Traditional(select_traditional_strategy(
            net,
            &set,
            self.cfg.attacker.traditional_slack,
        )?))
    }

    pub fn select_strategy(&mut self, variant: Variant) -> Result<()> {
        let out = self.path(&format!("{}_strategy.json", variant.name()));
        self.stage(&format!("search-strategy:{}", variant.name()), &out.clone(), |run| {
            let net = run.network(variant.network())?;
            let rec = if variant.uses_search() {
                run.searched_strategy(&net)?
            } else {
                run.traditional_strategy(&net)?
            };
            write_json(&out, &rec)
        })
    }

    pub fn strategy(&self, variant: Variant) -> Result<StrategyRecord> {
        read_json(&self.path(&format!("{}_strategy.json", variant.name())))
    }

    fn variants(&self) -> Vec<Variant> {
        if self.cfg.study.ablations {
            Variant::ALL.to_vec()
        } else {
            vec![Variant::Ours, Variant::Baseline]
        }
    }

    fn lambda_network(lambda: f64) -> String {
        format!("lambda_{lambda}")
    }

    /// Reports for every variant whose artifacts exist; errors on the first
    /// missing artifact of a requested variant.
    pub fn evaluate(&mut self) -> Result<RunSummary> {
        let dep = self.deployment()?;
        let (cp, _) = self.records()?;
        let victim_exit_count = dep.net().exit_count();
        let test = self.env()?.test.clone();
        let victim = make_report(dep.net(), dep.strategy(), &dep, &test)?;
        write_json(&self.path("reports/victim.json"), &victim)?;
        let victim_exit_accuracy = exit_accuracy(dep.net(), &test)?;
        let mut variants = Vec::new();
        for v in self.variants() {
            let net = self.network(v.network())?;
            let strategy = self.strategy(v)?;
            let report = make_report(&net, strategy.strategy(), &dep, &test)?;
            write_json(&self.path(&format!("reports/{}.json", v.name())), &report)?;
            variants.push((v.name().to_owned(), report));
        }
        let mut lambda_sweep = Vec::new();
        for &lambda in &self.cfg.study.lambda_sweep.clone() {
            let name = Self::lambda_network(lambda);
            let net = self.network(&name)?;
            let rec = self.searched_strategy(&net)?;
            let StrategyRecord::Search { agreement, .. } = rec else {
                unreachable!()
            };
            let report = make_report(&net, rec.strategy(), &dep, &test)?;
            write_json(&self.path(&format!("reports/{name}.json")), &report)?;
            lambda_sweep.push(LambdaPoint {
                lambda,
                calibration_agreement: agreement,
                report,
            });
        }
        let summary = RunSummary {
            name: self.cfg.name.clone(),
            changepoint: cp,
            victim_exit_count,
            victim,
            victim_exit_accuracy,
            variants,
            lambda_sweep,
        };
        write_json(&self.path("report.json"), &summary)?;
        let csv = self.path("report.csv");
        fs::write(&csv, summary_csv(&summary)).map_err(|e| HarnessError::io(&csv, e))?;
        Ok(summary)
    }

    fn record_stage_failure<T>(&mut self, name: &str, res: Result<T>) -> Result<T> {
        if let Err(e) = &res {
            self.status.stages.push(StageStatus {
                stage: name.into(),
                outcome: "failed".into(),
                seconds: 0.0,
                error: Some(e.to_string()),
            });
            write_json(&self.path("status.json"), &self.status)?;
        }
        res
    }

    /// Every stage in order; existing artifacts are reused.
    pub fn run_all(&mut self) -> Result<RunSummary> {
        self.train_victim()?;
        self.deploy()?;
        self.build_queries()?;
        self.estimate_exits()?;
        let mut networks = vec!["ours".to_owned(), "baseline".to_owned()];
        if self.cfg.study.ablations {
            networks.push("no_strategy_loss".into());
        }
        networks.extend(self.cfg.study.lambda_sweep.iter().map(|&l| Self::lambda_network(l)));
        for n in &networks {
            self.train_network(n)?;
        }
        for v in self.variants() {
            self.select_strategy(v)?;
        }
        let res = self.evaluate();
        self.record_stage_failure("evaluate", res)
    }
}

impl ExperimentConfig {
    fn baseline_uses_victim_arch(&self) -> bool {
        self.attacker.baseline_arch == BaselineArch::Victim
    }
}

/// Exit labels above the substitute's exit count are folded into its last exit.
fn exit_accuracy(net: &MultiExitNet, test: &LabeledSet) -> Result<Vec<f64>> {
    let probs = net.forward_batch(test.inputs())?;
    Ok(probs
        .iter()
        .map(|p| {
            let hits = (0..p.rows())
                .filter(|&r| p.row_tensor(r).argmax() == test.labels()[r])
                .count();
            hits as f64 / p.rows().max(1) as f64
        })
        .collect())
}

fn clamp_exits(mut records: Vec<QueryRecord>, k: usize) -> Vec<QueryRecord> {
    for r in &mut records {
        r.estimated_exit = r.estimated_exit.min(k);
    }
    records
}

pub fn summary_csv(s: &RunSummary) -> String {
    let mut out = format!("model,{}\n", EvalReport::CSV_HEADER);
    out += &format!("victim,{}\n", s.victim.csv_row());
    for (name, r) in &s.variants {
        out += &format!("{name},{}\n", r.csv_row());
    }
    for p in &s.lambda_sweep {
        out += &format!("lambda_{},{}\n", p.lambda, p.report.csv_row());
    }
    out
}

/// Sub-runs for the exit-count sweep: one directory per victim exit count.
pub fn run_exit_sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<(usize, RunSummary)>> {
    let mut out = Vec::new();
    for &k in &cfg.study.exit_sweep {
        let mut sub = cfg.clone();
        sub.victim.exits = k;
        sub.study.exit_sweep.clear();
        sub.study.lambda_sweep.clear();
        sub.study.ablations = false;
        sub.name = format!("{}-exits{k}", cfg.name);
        let mut run = Run::new(sub, dir.join(format!("exits_{k}")))?;
        out.push((k, run.run_all()?));
    }
    Ok(out)
}

/// Full experiment: the main run plus any configured sweeps.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    cfg.validate().map_err(|message| HarnessError::Config {
        path: dir.join("config.toml"),
        message,
    })?;
    let mut run = Run::new(cfg.clone(), dir)?;
    let summary = run.run_all()?;
    let sweep = run_exit_sweep(cfg, dir)?;
    if !sweep.is_empty() {
        let rows: Vec<_> = sweep
            .iter()
            .map(|(k, s)| (k, s.victim.cc, s.variant("ours").cloned(), s.variant("baseline").cloned()))
            .collect();
        write_json(&dir.join("exit_sweep.json"), &rows)?;
    }
    Ok(summary)
}
