//! End-to-end run: simulate, subgoals, cluster, match, pwa, partition,
//! hhmm, evaluate. Each stage persists one JSON file stamped with the
//! config digest, so a rerun skips every stage whose file is current.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hhmm::{assemble_hhmm, Hhmm, HhmmParams};
use crate::matching::{build_pattern_library, default_eps, PatternLibrary, SegmentCluster};
use crate::model::{dist, AgentState, Dataset, Environment};
use crate::partition::{
    default_spacing, derive_subgoals_manifolds, fit_ttg, predict_partition_agreement, Agreement, PartitionParams, PartitionPrediction,
    TtgModel,
};
use crate::pwa::{classify_mode_semantics, identify_pwa, ModeLabel, ModeSemantics, PwaModel, PwaParams, Transition};
use crate::route::Route;
use crate::segment::{cluster_subgoals, segment_trajectories, ClusterParams, ClusterResult, HiddenSubgoal, Segment};
use crate::sim::{config_digest, generate_dataset, SimConfig, StartGrid};
use crate::symbolic::{extract_observed_subgoals, quantize_dataset, Quantizer, SubgoalObservation};

/// Acceleration magnitude separating the speed-profile regimes (m/s²).
pub const SPEED_LABEL_THRESHOLD: f64 = 0.1;

/// Ground-truth regime of a sample from its commanded acceleration.
pub fn speed_label(a: f64) -> ModeLabel {
    if a > SPEED_LABEL_THRESHOLD {
        ModeLabel::Starting
    } else if a < -SPEED_LABEL_THRESHOLD {
        ModeLabel::Approaching
    } else {
        ModeLabel::Coasting
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerSection {
    /// Spatial cell (m); defaults to workspace extent / 40.
    pub cell_xy: Option<f64>,
    /// Speed cell (m/s); defaults to cruise speed / 4.
    pub cell_v: Option<f64>,
    /// Heading cell (rad); must divide 2π. Defaults to π/8.
    pub cell_psi: Option<f64>,
}

impl Default for QuantizerSection {
    fn default() -> Self {
        Self {
            cell_xy: None,
            cell_v: None,
            cell_psi: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubgoalSection {
    /// Shortest common suffix accepted as a merge (symbols).
    pub l_min: usize,
}

impl Default for SubgoalSection {
    fn default() -> Self {
        Self { l_min: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchSection {
    /// Equivalence threshold (m); defaults to 5% of the median segment length.
    pub eps_match: Option<f64>,
    pub allow_reflect: bool,
    pub n_corr: usize,
}

impl Default for MatchSection {
    fn default() -> Self {
        Self {
            eps_match: None,
            allow_reflect: true,
            n_corr: crate::matching::DEFAULT_N_CORR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PwaSection {
    /// Every `stride`-th transition enters the fit.
    pub stride: usize,
    #[serde(flatten)]
    pub params: PwaParams,
}

impl Default for PwaSection {
    fn default() -> Self {
        Self {
            stride: 1,
            params: PwaParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Seed of the held-out dataset; defaults to the simulation seed + 1.
    pub held_out_seed: Option<u64>,
    pub rollouts: usize,
    /// Rollout step cap; defaults to `sim.t_max / sim.dt`.
    pub step_cap: Option<usize>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            held_out_seed: None,
            rollouts: 200,
            step_cap: None,
        }
    }
}

/// Every tunable of a run; this is what the digest covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineParams {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sim: SimConfig,
    pub start: StartGrid,
    #[serde(default)]
    pub quantizer: QuantizerSection,
    #[serde(default)]
    pub subgoals: SubgoalSection,
    #[serde(default)]
    pub cluster: ClusterParams,
    #[serde(default, rename = "match")]
    pub matching: MatchSection,
    #[serde(default)]
    pub pwa: PwaSection,
    #[serde(default)]
    pub partition: PartitionParams,
    #[serde(default)]
    pub hhmm: HhmmParams,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    /// Environment JSON; relative paths resolve against the config file.
    pub environment: PathBuf,
    /// Run directory (default `run`); relative paths resolve against the config file.
    pub out_dir: PathBuf,
    #[serde(flatten)]
    pub params: PipelineParams,
}

fn check(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg.to_string()))
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let mut table: toml::Table = text.parse().map_err(|e| bad(&e))?;
        let mut path = |key: &str| match table.remove(key) {
            Some(toml::Value::String(s)) => Ok(Some(PathBuf::from(s))),
            Some(_) => Err(Error::Config(format!("{key} must be a string"))),
            None => Ok(None),
        };
        let environment = path("environment")?.ok_or_else(|| Error::Config("missing environment".into()))?;
        let out_dir = path("out_dir")?.unwrap_or_else(|| PathBuf::from("run"));
        let params = PipelineParams::deserialize(table).map_err(|e| bad(&e))?;
        Ok(Self {
            environment,
            out_dir,
            params,
        })
    }

    /// Parses the file and resolves its relative paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.environment.is_relative() {
            cfg.environment = base.join(&cfg.environment);
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        p.sim.validate()?;
        check(p.start.nx >= 1 && p.start.ny >= 1, "start.nx and start.ny must be at least 1")?;
        for v in [p.quantizer.cell_xy, p.quantizer.cell_v, p.quantizer.cell_psi].into_iter().flatten() {
            check(positive(v), "quantizer cells must be positive")?;
        }
        check(p.subgoals.l_min >= 1, "subgoals.l_min must be at least 1")?;
        let c = &p.cluster;
        check(c.k_nn >= 1 && c.dims >= 1 && c.k_max >= 1, "cluster.k_nn, dims and k_max must be at least 1")?;
        check(c.heading_weight >= 0.0 && c.heading_weight.is_finite(), "cluster.heading_weight must be non-negative")?;
        check(c.cov_floor.is_none_or(|f| f >= 0.0 && f.is_finite()), "cluster.cov_floor must be non-negative")?;
        check(p.matching.eps_match.is_none_or(positive), "match.eps_match must be positive")?;
        check(p.matching.n_corr >= 3, "match.n_corr must be at least 3")?;
        let w = &p.pwa.params;
        check(p.pwa.stride >= 1 && w.n_modes >= 1 && w.max_rounds >= 1 && w.restarts >= 1, "pwa counts must be at least 1")?;
        check(w.c_local > crate::pwa::NZ, "pwa.c_local must exceed the regressor count")?;
        check(w.location_weight >= 0.0 && w.feature_weights.iter().all(|x| *x >= 0.0), "pwa weights must be non-negative")?;
        check(w.local_ridge >= 0.0 && w.region_ridge > 0.0, "pwa ridges must be non-negative (region ridge positive)")?;
        let q = &p.partition;
        check(q.spacing.is_none_or(positive), "partition.spacing must be positive")?;
        check(q.inflate >= 0.0 && q.n_min >= 1 && q.attract_len > 0.0, "partition parameters out of range")?;
        let h = &p.hhmm;
        check(positive(h.tolerance) && positive(h.cov_floor), "hhmm.tolerance and cov_floor must be positive")?;
        check((0.0..=1.0).contains(&h.region_leak), "hhmm.region_leak must lie in [0, 1]")?;
        check(p.evaluate.step_cap.is_none_or(|s| s >= 1), "evaluate.step_cap must be at least 1")
    }

    pub fn quantizer(&self, env: &Environment) -> Result<Quantizer> {
        let s = &self.params.quantizer;
        let mut q = Quantizer::for_environment(env, self.params.sim.v_cruise);
        q.cell[0] = s.cell_xy.unwrap_or(q.cell[0]);
        q.cell[1] = s.cell_xy.unwrap_or(q.cell[1]);
        q.cell[2] = s.cell_v.unwrap_or(q.cell[2]);
        q.cell[3] = s.cell_psi.unwrap_or(q.cell[3]);
        q.validate()?;
        Ok(q)
    }

    /// Covers the parameters and the environment, not the paths.
    pub fn digest(&self, env: &Environment) -> String {
        config_digest(&(&self.params, env))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStage {
    pub dataset: Dataset,
    pub routes: Vec<Route>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgoalStage {
    pub quantizer: Quantizer,
    pub observations: Vec<SubgoalObservation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStage {
    /// `None` when too few observations exist to cluster.
    pub result: Option<ClusterResult>,
    pub hidden: Vec<HiddenSubgoal>,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchStage {
    pub library: PatternLibrary,
    pub se2_patterns: usize,
    pub reflect_patterns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwaStage {
    pub model: PwaModel,
    pub semantics: ModeSemantics,
    pub transitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStage {
    pub ttg: TtgModel,
    pub prediction: PartitionPrediction,
    pub agreement: Agreement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateStage {
    pub filter_accuracy: Option<f64>,
    pub filter_steps: usize,
    pub rollouts: usize,
    pub rollouts_reached: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub trajectories: usize,
    pub observations: usize,
    pub k_star: usize,
    /// Distinct obstacle vertices used by the planner's routes.
    pub truth_subgoals: usize,
    /// Observed representatives within 2 spatial cells of a route vertex.
    pub near_waypoint_fraction: Option<f64>,
    pub patterns: usize,
    pub se2_patterns: usize,
    pub reflect_patterns: usize,
    pub pwa_modes: usize,
    pub mode_labels: Option<Vec<ModeLabel>>,
    /// Share of the samples in the first 10% of each trajectory's first
    /// segment that fall in the starting mode.
    pub early_starting_fraction: Option<f64>,
    pub speed_label_accuracy: Option<f64>,
    pub partition_subgoals: usize,
    pub repelling_polylines: usize,
    pub partition_agreement: f64,
    pub filter_accuracy: Option<f64>,
    pub rollout_reach_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub version: String,
    pub stages: Vec<StageRecord>,
    pub metrics: RunMetrics,
}

/// Wall clock per stage; kept apart from the manifest so the manifest stays
/// byte-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub seconds: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub manifest: RunManifest,
    pub timings: Vec<StageTiming>,
}

pub const STAGES: [&str; 8] = ["simulate", "subgoals", "cluster", "match", "pwa", "partition", "hhmm", "evaluate"];

pub fn stage_file(name: &str) -> String {
    format!("{name}.json")
}

#[derive(Serialize, Deserialize)]
struct Stamped<T> {
    key: String,
    value: T,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads a persisted stage value regardless of its stamp.
pub fn load_stage<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<T> {
    let bytes = std::fs::read(dir.join(stage_file(name)))?;
    Ok(serde_json::from_slice::<Stamped<T>>(&bytes)?.value)
}

struct Runner {
    dir: PathBuf,
    digest: String,
    records: Vec<StageRecord>,
    timings: Vec<StageTiming>,
    until: Option<usize>,
}

impl Runner {
    fn stage<T: Serialize + DeserializeOwned>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let file = stage_file(name);
        let path = self.dir.join(&file);
        let key = sha256_hex(format!("{}:{name}", self.digest).as_bytes());
        let cached = std::fs::read(&path)
            .ok()
            .and_then(|b| serde_json::from_slice::<Stamped<T>>(&b).ok().map(|s| (s, b)))
            .filter(|(s, _)| s.key == key);
        let (value, bytes, skipped) = match cached {
            Some((s, b)) => (s.value, b, true),
            None => {
                let value = f().map_err(|e| e.in_stage(name))?;
                let stamped = Stamped { key, value };
                let bytes = serde_json::to_vec(&stamped).map_err(|e| Error::from(e).in_stage(name))?;
                let tmp = self.dir.join(format!(".{file}.tmp"));
                std::fs::write(&tmp, &bytes).and_then(|_| std::fs::rename(&tmp, &path)).map_err(|e| Error::from(e).in_stage(name))?;
                (stamped.value, bytes, false)
            }
        };
        self.records.push(StageRecord {
            name: name.to_string(),
            file,
            sha256: sha256_hex(&bytes),
        });
        self.timings.push(StageTiming {
            name: name.to_string(),
            seconds: t0.elapsed().as_secs_f64(),
            skipped,
        });
        Ok(value)
    }

    fn done(&self) -> bool {
        self.until.is_some_and(|u| self.records.len() > u)
    }
}

pub fn pwa_transitions(ds: &Dataset, stride: usize) -> Vec<Transition> {
    ds.trajectories
        .iter()
        .flat_map(|t| {
            (0..t.len().saturating_sub(1))
                .step_by(stride.max(1))
                .map(move |i| Transition::new(&t.samples[i].state, &t.samples[i].control, &t.samples[i + 1].state))
        })
        .collect()
}

/// Segment clusters keyed by `membership - 1`, empty ones left out. Only
/// subgoal-terminated segments take part unless there are no subgoals, in
/// which case the goal-reaching segments form the single cluster.
pub fn segment_clusters(ds: &Dataset, segments: &[Segment], n_hidden: usize) -> Vec<SegmentCluster> {
    let ids = if n_hidden > 0 { 1..=n_hidden } else { 1..=1 };
    ids
        .map(|c| SegmentCluster {
            id: c - 1,
            members: segments
                .iter()
                .filter(|s| s.membership == c)
                .map(|s| s.states(ds).iter().map(|x| x.pos()).collect())
                .collect(),
        })
        .filter(|c| !c.members.is_empty())
        .collect()
}

/// Share of the samples in the first 10% of each trajectory-initial
/// segment labelled `target` by the model.
pub fn early_segment_fraction(ds: &Dataset, segments: &[Segment], model: &PwaModel, target: usize) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in segments.iter().filter(|s| s.start == 0) {
        let t = &ds.trajectories[s.traj];
        let n = (s.end.min(t.len() - 1)) / 10;
        for i in 0..n {
            let tr = Transition::new(&t.samples[i].state, &t.samples[i].control, &t.samples[i + 1].state);
            total += 1;
            hit += usize::from(model.mode_at(&tr.x, &tr.u) == target);
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// MAP-mode accuracy of the filter against speed-profile labels.
pub fn filter_accuracy(h: &Hhmm, labels: &[ModeLabel], ds: &Dataset) -> Result<(f64, usize)> {
    let (mut hit, mut total) = (0usize, 0usize);
    for t in ds.trajectories.iter().filter(|t| t.len() >= 2) {
        let xs: Vec<AgentState> = t.states().copied().collect();
        for (k, m) in h.filter(&xs)?.map_modes().into_iter().enumerate() {
            total += 1;
            hit += usize::from(labels[m] == speed_label(t.samples[k].control.a));
        }
    }
    if total == 0 {
        return Err(Error::InsufficientData("no held-out steps".into()));
    }
    Ok((hit as f64 / total as f64, total))
}

/// Runs the pipeline, or only its first `until + 1` stages.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    run_pipeline_until(cfg, None)
}

pub fn run_pipeline_until(cfg: &PipelineConfig, until: Option<&str>) -> Result<RunReport> {
    let until = match until {
        Some(name) => Some(STAGES.iter().position(|s| *s == name).ok_or_else(|| Error::Config(format!("unknown stage {name}")))?),
        None => None,
    };
    cfg.validate()?;
    let env = Environment::load(&cfg.environment).map_err(|e| e.in_stage("config"))?;
    let p = &cfg.params;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut run = Runner {
        dir: cfg.out_dir.clone(),
        digest: cfg.digest(&env),
        records: Vec::new(),
        timings: Vec::new(),
        until,
    };
    let partial = |run: Runner| RunReport {
        manifest: RunManifest {
            config_digest: run.digest.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            stages: run.records,
            metrics: RunMetrics::empty(),
        },
        timings: run.timings,
    };

    let sim: SimStage = run.stage("simulate", || {
        let g = generate_dataset(&env, &p.start, &p.sim, p.seed)?;
        Ok(SimStage {
            dataset: g.dataset,
            routes: g.routes,
        })
    })?;
    let ds = &sim.dataset;
    if run.done() {
        return Ok(partial(run));
    }

    let sub: SubgoalStage = run.stage("subgoals", || {
        let quantizer = cfg.quantizer(&env)?;
        let sds = quantize_dataset(ds, &quantizer);
        let observations = extract_observed_subgoals(&sds, ds, p.subgoals.l_min, true)?;
        Ok(SubgoalStage { quantizer, observations })
    })?;
    if run.done() {
        return Ok(partial(run));
    }

    let cl: ClusterStage = run.stage("cluster", || {
        let result = if sub.observations.len() >= 2 {
            Some(cluster_subgoals(&sub.observations, &sub.quantizer, &p.cluster)?)
        } else {
            None
        };
        let hidden = result.as_ref().map(|r| r.hidden.clone()).unwrap_or_default();
        let segments = segment_trajectories(ds, &hidden, &sub.quantizer);
        Ok(ClusterStage { result, hidden, segments })
    })?;
    if run.done() {
        return Ok(partial(run));
    }

    let mt: MatchStage = run.stage("match", || {
        let clusters = segment_clusters(ds, &cl.segments, cl.hidden.len());
        let eps = p.matching.eps_match.unwrap_or_else(|| default_eps(&clusters));
        let se2 = build_pattern_library(&clusters, eps, false, p.matching.n_corr)?;
        let refl = build_pattern_library(&clusters, eps, true, p.matching.n_corr)?;
        let (se2_patterns, reflect_patterns) = (se2.patterns.len(), refl.patterns.len());
        Ok(MatchStage {
            library: if p.matching.allow_reflect { refl } else { se2 },
            se2_patterns,
            reflect_patterns,
        })
    })?;
    if run.done() {
        return Ok(partial(run));
    }

    let pw: PwaStage = run.stage("pwa", || {
        let data = pwa_transitions(ds, p.pwa.stride);
        let model = identify_pwa(&data, &p.pwa.params)?;
        let (semantics, _) = classify_mode_semantics(&model, &data);
        Ok(PwaStage {
            model,
            semantics,
            transitions: data.len(),
        })
    })?;
    if run.done() {
        return Ok(partial(run));
    }

    let pt: PartitionStage = run.stage("partition", || {
        let spacing = p.partition.spacing.unwrap_or_else(|| default_spacing(&env));
        let ttg = fit_ttg(ds, spacing)?;
        let prediction = derive_subgoals_manifolds(&env, &ttg, &p.partition)?;
        let agreement = predict_partition_agreement(&prediction, ds, &cl.segments);
        Ok(PartitionStage { ttg, prediction, agreement })
    })?;
    if run.done() {
        return Ok(partial(run));
    }

    let hm: Hhmm = run.stage("hhmm", || {
        assemble_hhmm(ds, &cl.hidden, &cl.segments, &mt.library, &pw.model, Some(&pt.prediction), &p.hhmm)
    })?;
    if run.done() {
        return Ok(partial(run));
    }

    let ev: EvaluateStage = run.stage("evaluate", || {
        let held = generate_dataset(&env, &p.start, &p.sim, p.evaluate.held_out_seed.unwrap_or(p.seed.wrapping_add(1)))?.dataset;
        let (filter_accuracy, filter_steps) = match &pw.semantics.labels {
            Some(l) => {
                let (a, n) = filter_accuracy(&hm, l, &held)?;
                (Some(a), n)
            }
            None => (None, 0),
        };
        let cap = p.evaluate.step_cap.unwrap_or((p.sim.t_max / p.sim.dt).ceil() as usize);
        let starts: Vec<AgentState> = ds.trajectories.iter().map(|t| *t.first()).collect();
        let mut reached = 0;
        for k in 0..p.evaluate.rollouts {
            if starts.is_empty() {
                break;
            }
            let g = hm.generate(&starts[k % starts.len()], k as u64, cap)?;
            reached += usize::from(g.reached_goal);
        }
        Ok(EvaluateStage {
            filter_accuracy,
            filter_steps,
            rollouts: if starts.is_empty() { 0 } else { p.evaluate.rollouts },
            rollouts_reached: reached,
        })
    })?;

    let cell = sub.quantizer.cell[0];
    let vertices: Vec<[f64; 2]> = sim.routes.iter().flat_map(|r| r.vertex_waypoints().map(|v| v.1)).collect();
    let distinct: BTreeSet<usize> = sim.routes.iter().flat_map(|r| r.vertex_waypoints().map(|v| v.0)).collect();
    let near = sub
        .observations
        .iter()
        .filter(|o| vertices.iter().any(|v| dist(o.rep_state.pos(), *v) <= 2.0 * cell))
        .count();
    let starting = pw.semantics.mode_of(ModeLabel::Starting);
    let data = pwa_transitions(ds, 1);
    let model_labels = pw.model.labels(&data);
    let speed_label_accuracy = pw.semantics.labels.as_ref().map(|l| {
        data.iter().zip(&model_labels).filter(|(t, m)| l[**m] == speed_label(t.u[1])).count() as f64 / data.len().max(1) as f64
    });
    let metrics = RunMetrics {
        trajectories: ds.trajectories.len(),
        observations: sub.observations.len(),
        k_star: cl.hidden.len(),
        truth_subgoals: distinct.len(),
        near_waypoint_fraction: (!sub.observations.is_empty()).then(|| near as f64 / sub.observations.len() as f64),
        patterns: mt.library.patterns.len(),
        se2_patterns: mt.se2_patterns,
        reflect_patterns: mt.reflect_patterns,
        pwa_modes: pw.model.n_modes,
        mode_labels: pw.semantics.labels.clone(),
        early_starting_fraction: starting.and_then(|s| early_segment_fraction(ds, &cl.segments, &pw.model, s)),
        speed_label_accuracy,
        partition_subgoals: pt.prediction.subgoals.len(),
        repelling_polylines: pt.prediction.repelling.len(),
        partition_agreement: pt.agreement.fraction,
        filter_accuracy: ev.filter_accuracy,
        rollout_reach_fraction: (ev.rollouts > 0).then(|| ev.rollouts_reached as f64 / ev.rollouts as f64),
    };
    let manifest = RunManifest {
        config_digest: run.digest.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        stages: run.records.clone(),
        metrics,
    };
    std::fs::write(cfg.out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(cfg.out_dir.join("timings.json"), serde_json::to_string_pretty(&run.timings)?)?;
    Ok(RunReport {
        manifest,
        timings: run.timings,
    })
}

impl RunMetrics {
    fn empty() -> Self {
        Self {
            trajectories: 0,
            observations: 0,
            k_star: 0,
            truth_subgoals: 0,
            near_waypoint_fraction: None,
            patterns: 0,
            se2_patterns: 0,
            reflect_patterns: 0,
            pwa_modes: 0,
            mode_labels: None,
            early_starting_fraction: None,
            speed_label_accuracy: None,
            partition_subgoals: 0,
            repelling_polylines: 0,
            partition_agreement: 0.0,
            filter_accuracy: None,
            rollout_reach_fraction: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(name: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
    }

    fn in_temp(name: &str, dir: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig::load(scenario(name)).unwrap();
        cfg.out_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn shipped_configs_parse_and_validate() {
        for name in ["reference.toml", "empty_world.toml"] {
            let cfg = PipelineConfig::load(scenario(name)).unwrap();
            cfg.validate().unwrap();
            assert!(cfg.environment.exists());
        }
        let cfg = PipelineConfig::load(scenario("reference.toml")).unwrap();
        assert_eq!(cfg.params.pwa.stride, 2);
        assert_eq!(cfg.params.pwa.params.feature_weights[5], 10.0);
        assert_eq!(cfg.params.sim.a_max, 0.5);
    }

    #[test]
    fn bad_configs_rejected() {
        let base = "environment = \"e.json\"\nstart.region = { xmin = 0.0, ymin = 0.0, xmax = 1.0, ymax = 1.0 }\nstart.nx = 1\nstart.ny = 1\nstart.headings = 1\n";
        assert!(PipelineConfig::from_toml(base).unwrap().validate().is_ok());
        assert!(matches!(PipelineConfig::from_toml(&format!("{base}bogus = 1\n")), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml(&format!("{base}match.bogus = 1\n")), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml("environment = \"e.json\"\n"), Err(Error::Config(_))));
        for bad in ["pwa.c_local = 3", "hhmm.region_leak = 2.0", "partition.spacing = -1.0", "quantizer.cell_xy = 0.0", "match.n_corr = 2"] {
            let cfg = PipelineConfig::from_toml(&format!("{base}{bad}\n")).unwrap();
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{bad}");
        }
        let cfg = PipelineConfig::from_toml(&format!("{base}sim.dt = 0.0\n")).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_world_runs_and_reruns_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = in_temp("empty_world.toml", dir.path());
        let first = run_pipeline(&cfg).unwrap();
        let m = &first.manifest.metrics;
        assert_eq!((m.k_star, m.patterns), (0, 1));
        assert_eq!(first.manifest.stages.len(), STAGES.len());
        assert!(first.timings.iter().all(|t| !t.skipped));
        let text = std::fs::read(dir.path().join("manifest.json")).unwrap();

        let second = run_pipeline(&cfg).unwrap();
        assert!(second.timings.iter().all(|t| t.skipped));
        assert_eq!(second.manifest, first.manifest);
        assert_eq!(std::fs::read(dir.path().join("manifest.json")).unwrap(), text);

        let other = tempfile::tempdir().unwrap();
        run_pipeline(&in_temp("empty_world.toml", other.path())).unwrap();
        for s in STAGES {
            let f = stage_file(s);
            assert_eq!(std::fs::read(dir.path().join(&f)).unwrap(), std::fs::read(other.path().join(&f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn stages_resume_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = in_temp("empty_world.toml", dir.path());
        let part = run_pipeline_until(&cfg, Some("match")).unwrap();
        assert_eq!(part.manifest.stages.len(), 4);
        assert!(!dir.path().join(stage_file("pwa")).exists());
        let full = run_pipeline(&cfg).unwrap();
        let skipped: Vec<bool> = full.timings.iter().map(|t| t.skipped).collect();
        assert_eq!(skipped, [true, true, true, true, false, false, false, false]);

        let sim: SimStage = load_stage(dir.path(), "simulate").unwrap();
        assert!(sim.dataset.all_reach_goal());
        let h: Hhmm = load_stage(dir.path(), "hhmm").unwrap();
        assert!((h.initial.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for l in &h.modes {
            assert!(l.transition.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-9));
        }
        let pt: PartitionStage = load_stage(dir.path(), "partition").unwrap();
        assert!(pt.ttg.theta1 > 0.0);
    }

    #[test]
    fn changed_config_invalidates_stages() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = in_temp("empty_world.toml", dir.path());
        run_pipeline_until(&cfg, Some("subgoals")).unwrap();
        cfg.params.subgoals.l_min = 4;
        let r = run_pipeline_until(&cfg, Some("subgoals")).unwrap();
        assert!(r.timings.iter().all(|t| !t.skipped));
    }

    #[test]
    fn stage_errors_carry_the_stage_and_keep_earlier_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = in_temp("empty_world.toml", dir.path());
        // Too few trajectories for the time-to-go regression.
        cfg.params.start.ny = 4;
        let err = run_pipeline(&cfg).unwrap_err();
        assert!(matches!(&err, Error::Stage { stage, .. } if stage == "partition"), "{err}");
        assert!(err.to_string().starts_with("stage partition:"));
        assert!(dir.path().join(stage_file("pwa")).exists());
        assert!(matches!(run_pipeline_until(&cfg, Some("nope")), Err(Error::Config(_))));
    }

    #[test]
    fn speed_labels_split_at_threshold() {
        assert_eq!(speed_label(0.5), ModeLabel::Starting);
        assert_eq!(speed_label(0.1), ModeLabel::Coasting);
        assert_eq!(speed_label(-0.1), ModeLabel::Coasting);
        assert_eq!(speed_label(-0.2), ModeLabel::Approaching);
    }
}
