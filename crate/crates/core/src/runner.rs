//! End-to-end flows: scenario simulation for data generation, agent
//! evaluation over labelled traces, and the pred@k by feedback settings
//! matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentMemory, Terminal, DEFAULT_MAX_STEPS, DEFAULT_MEMORY_BOUND, MAX_CANDIDATES};
use crate::gateway::{CallRole, Gateway};
use crate::gym::{sample_examples, EnvironmentState, Gym, Scenario};
use crate::judge::Judge;
use crate::metrics::{aggregate_run, classify, render_table, ConfusionCell, MetricsReport, ScenarioCategory};
use crate::prompts::PromptSet;
use crate::trace::{Decision, Event, Judgment, NeedFlag, Prediction, PredictionRecord, TaskCandidate, Trace};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Simulate,
    Evaluate,
}

/// How much of an evaluation item's trace the agent sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    /// The whole item trace, up to the memory bound.
    #[default]
    Carried,
    /// Only the item's last event.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: RunMode,
    pub agent_model: String,
    pub judge_model: String,
    pub gym_model: String,
    pub user_model: String,
    pub k: usize,
    pub with_feedback: bool,
    pub seed: u64,
    pub event_budget: usize,
    pub max_steps: usize,
    /// Example events shown to the event generator per call.
    pub example_samples: usize,
    pub memory: MemoryMode,
    pub memory_bound: usize,
    /// Evaluation items processed at once.
    pub concurrency: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: RunMode::Evaluate,
            agent_model: "gpt-4o".into(),
            judge_model: "reward-model".into(),
            gym_model: "gpt-4o".into(),
            user_model: "gpt-4o".into(),
            k: 1,
            with_feedback: false,
            seed: 0,
            event_budget: 200,
            max_steps: DEFAULT_MAX_STEPS,
            example_samples: 3,
            memory: MemoryMode::Carried,
            memory_bound: DEFAULT_MEMORY_BOUND,
            concurrency: 1,
        }
    }
}

impl RunConfig {
    pub fn check(&self) -> Result<()> {
        if !(1..=MAX_CANDIDATES).contains(&self.k) {
            return Err(Error::Invalid(format!("k must be between 1 and {MAX_CANDIDATES}, got {}", self.k)));
        }
        if self.max_steps == 0 {
            return Err(Error::Invalid("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// One labelled evaluation step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub item_id: String,
    pub trace: Trace,
    pub need: NeedFlag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub item_id: String,
    pub observation: Event,
    /// Present when feedback was requested on a draft.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft: Option<Prediction>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feedback: Vec<Judgment>,
    pub prediction: Prediction,
    pub judgments: Vec<Judgment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub need: Option<NeedFlag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_t: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<ConfusionCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<ScenarioCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution: Option<ExecutionSummary>,
}

/// What happened when an accepted task was carried out in the gym.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionSummary {
    pub task: TaskCandidate,
    pub terminal: Terminal,
    pub steps: usize,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedItem {
    pub item_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_id: Option<String>,
    pub ledger: Vec<LedgerEntry>,
    #[serde(default)]
    pub excluded: Vec<ExcludedItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<MetricsReport>,
    pub call_counts: BTreeMap<CallRole, u64>,
    /// Zero under a scripted backend so manifests are reproducible.
    pub wall_clock_ms: u64,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunManifest {
    fn start(config: &RunConfig, gateway: &Gateway) -> Self {
        RunManifest {
            config: config.clone(),
            backend: gateway.identity(),
            scenario_id: None,
            ledger: Vec::new(),
            excluded: Vec::new(),
            summary: None,
            call_counts: BTreeMap::new(),
            wall_clock_ms: 0,
            complete: false,
            error: None,
        }
    }

    fn finish(&mut self, gateway: &Gateway, before: &BTreeMap<CallRole, u64>, started: Instant) {
        self.call_counts = count_delta(before, &gateway.call_counts());
        self.wall_clock_ms = if self.backend.starts_with("scripted") {
            0
        } else {
            started.elapsed().as_millis() as u64
        };
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

fn count_delta(before: &BTreeMap<CallRole, u64>, after: &BTreeMap<CallRole, u64>) -> BTreeMap<CallRole, u64> {
    after
        .iter()
        .map(|(role, n)| (*role, n - before.get(role).copied().unwrap_or(0)))
        .filter(|(_, n)| *n > 0)
        .collect()
}

/// The models of one run, built from a config.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub agent: Agent,
    pub judge: Judge,
    pub gym: Gym,
}

impl Pipeline {
    pub fn new(config: &RunConfig, prompts: Arc<PromptSet>) -> Self {
        let mut gym = Gym::new(config.gym_model.clone(), prompts.clone()).with_user_model(config.user_model.clone());
        gym.history_window = config.memory_bound;
        Pipeline {
            agent: Agent::new(config.agent_model.clone(), prompts.clone()),
            judge: Judge::new(config.judge_model.clone(), prompts),
            gym,
        }
    }
}

struct Step {
    draft: Option<Prediction>,
    feedback: Vec<Judgment>,
    prediction: Prediction,
    judgments: Vec<Judgment>,
}

/// Predict, optionally collect feedback on the draft and refine once, then
/// judge the final candidates in order until one is accepted.
fn predict_and_judge(p: &Pipeline, memory: &AgentMemory, config: &RunConfig, gw: &Gateway) -> Result<Step> {
    let window = memory.window();
    let draft = p.agent.predict(memory, gw, config.k)?;
    if !config.with_feedback {
        let judgments = if draft.is_silent() {
            Vec::new()
        } else {
            p.judge.judge_prediction(&window, &draft, gw)?
        };
        return Ok(Step {
            draft: None,
            feedback: Vec::new(),
            prediction: draft,
            judgments,
        });
    }
    let feedback = p.judge.judge_prediction(&window, &draft, gw)?;
    let last = feedback.last().expect("at least one judgment").clone();
    if last.is_accepted() {
        // accepted drafts are final; their judgments stand
        let judgments = if draft.is_silent() { Vec::new() } else { feedback.clone() };
        return Ok(Step {
            draft: Some(draft.clone()),
            feedback,
            prediction: draft,
            judgments,
        });
    }
    let refined = p.agent.refine_with_feedback(memory, &draft, &last, gw, config.k)?;
    let judgments = if refined.is_silent() {
        Vec::new()
    } else {
        p.judge.judge_prediction(&window, &refined, gw)?
    };
    Ok(Step {
        draft: Some(draft),
        feedback,
        prediction: refined,
        judgments,
    })
}

fn evaluate_item(p: &Pipeline, item: &EvalItem, config: &RunConfig, gw: &Gateway) -> Result<LedgerEntry> {
    let observation = item
        .trace
        .events
        .last()
        .cloned()
        .ok_or_else(|| Error::Invalid(format!("item {} has an empty trace", item.item_id)))?;
    let memory = match config.memory {
        MemoryMode::Carried => AgentMemory::new(config.memory_bound).observe_all(&item.trace.events),
        MemoryMode::Independent => AgentMemory::new(config.memory_bound).observe(&observation),
    };
    let step = predict_and_judge(p, &memory, config, gw)?;
    let predicted = !step.prediction.is_silent();
    let decision = predicted.then(|| Decision::from_accepted(step.judgments.iter().any(Judgment::is_accepted)));
    let (cell, category) = classify(predicted, decision, item.need)?;
    Ok(LedgerEntry {
        item_id: item.item_id.clone(),
        observation,
        draft: step.draft,
        feedback: step.feedback,
        prediction: step.prediction,
        judgments: step.judgments,
        need: Some(item.need),
        r_t: Some(cell.reward()),
        cell: Some(cell),
        category: Some(category),
        execution: None,
    })
}

fn summarize(ledger: &[LedgerEntry]) -> Result<MetricsReport> {
    let records: Vec<(PredictionRecord, NeedFlag)> = ledger
        .iter()
        .filter_map(|e| {
            let need = e.need?;
            Some((PredictionRecord::new(e.observation.clone(), &e.prediction, &e.judgments), need))
        })
        .collect();
    Ok(aggregate_run(&records)?)
}

/// Evaluate every item; failures are excluded and listed, never fatal.
pub fn run_evaluation(items: &[EvalItem], config: &RunConfig, prompts: Arc<PromptSet>, gw: &Gateway) -> Result<RunManifest> {
    resume_evaluation(items, config, prompts, gw, None)
}

/// Like [`run_evaluation`], but items already in `previous`'s ledger are
/// carried over instead of re-run.
pub fn resume_evaluation(
    items: &[EvalItem],
    config: &RunConfig,
    prompts: Arc<PromptSet>,
    gw: &Gateway,
    previous: Option<&RunManifest>,
) -> Result<RunManifest> {
    config.check()?;
    let mut config = config.clone();
    config.mode = RunMode::Evaluate;
    let started = Instant::now();
    let before = gw.call_counts();
    let mut manifest = RunManifest::start(&config, gw);
    let pipeline = Pipeline::new(&config, prompts);

    let done: BTreeMap<&str, &LedgerEntry> = previous
        .map(|m| m.ledger.iter().map(|e| (e.item_id.as_str(), e)).collect())
        .unwrap_or_default();
    let pending: Vec<&EvalItem> = items.iter().filter(|i| !done.contains_key(i.item_id.as_str())).collect();

    let results: Vec<Mutex<Option<Result<LedgerEntry>>>> = pending.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = config.concurrency.clamp(1, pending.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = pending.get(i) else { break };
                let r = evaluate_item(&pipeline, item, &config, gw);
                *results[i].lock().unwrap() = Some(r);
            });
        }
    });
    let mut fresh: BTreeMap<&str, LedgerEntry> = BTreeMap::new();
    for (item, slot) in pending.iter().zip(results) {
        match slot.into_inner().unwrap().expect("every item processed") {
            Ok(entry) => {
                fresh.insert(item.item_id.as_str(), entry);
            }
            Err(e) => {
                log::warn!("item {} excluded: {e}", item.item_id);
                manifest.excluded.push(ExcludedItem {
                    item_id: item.item_id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    for item in items {
        if let Some(e) = done.get(item.item_id.as_str()) {
            manifest.ledger.push((*e).clone());
        } else if let Some(e) = fresh.remove(item.item_id.as_str()) {
            manifest.ledger.push(e);
        }
    }
    manifest.summary = Some(summarize(&manifest.ledger)?);
    manifest.complete = true;
    manifest.finish(gw, &before, started);
    Ok(manifest)
}

/// Result of one scenario simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub trace: Trace,
    pub records: Vec<PredictionRecord>,
    pub states: Vec<EnvironmentState>,
    pub manifest: RunManifest,
}

/// Alternate simulated user activity, environment events and agent
/// predictions until the user is done or the event budget is spent.
/// Accepted proposals are executed and their events folded into the trace.
/// Errors stop the run and are reported in an incomplete manifest.
pub fn run_simulation(scenario: &Scenario, config: &RunConfig, prompts: Arc<PromptSet>, gw: &Gateway) -> Result<Simulation> {
    config.check()?;
    scenario.check()?;
    let mut config = config.clone();
    config.mode = RunMode::Simulate;
    let started = Instant::now();
    let before = gw.call_counts();
    let mut manifest = RunManifest::start(&config, gw);
    manifest.scenario_id = Some(scenario.id.clone());
    let pipeline = Pipeline::new(&config, prompts);

    let mut sim = SimState {
        trace: Trace::with_scenario(scenario.id.clone()),
        records: Vec::new(),
        states: vec![EnvironmentState::initial(scenario)],
        memory: AgentMemory::new(config.memory_bound),
    };
    let outcome = simulate_loop(&pipeline, scenario, &config, gw, &mut sim, &mut manifest);
    match outcome {
        Ok(()) => manifest.complete = true,
        Err(e) => {
            log::warn!("simulation of {} stopped: {e}", scenario.id);
            manifest.error = Some(e.to_string());
        }
    }
    manifest.finish(gw, &before, started);
    Ok(Simulation {
        trace: sim.trace,
        records: sim.records,
        states: sim.states,
        manifest,
    })
}

struct SimState {
    trace: Trace,
    records: Vec<PredictionRecord>,
    states: Vec<EnvironmentState>,
    memory: AgentMemory,
}

impl SimState {
    fn state(&self) -> &EnvironmentState {
        self.states.last().expect("initial state")
    }

    fn push(&mut self, e: Event) {
        self.memory = self.memory.observe(&e);
        self.trace.events.push(e);
    }
}

fn simulate_loop(
    p: &Pipeline,
    scenario: &Scenario,
    config: &RunConfig,
    gw: &Gateway,
    sim: &mut SimState,
    manifest: &mut RunManifest,
) -> Result<()> {
    let mut step = 0u64;
    while sim.trace.len() < config.event_budget {
        let Some(activity) = p.gym.user_activity(scenario, sim.state(), &sim.trace, gw)? else {
            break;
        };
        let activity = activity.event;
        sim.push(activity.clone());
        if sim.trace.len() < config.event_budget {
            let examples = sample_examples(scenario, config.seed.wrapping_add(step), config.example_samples);
            if let Some(generated) = p.gym.generate_event(sim.state(), &sim.trace, &activity, &examples, gw)? {
                let next = p.gym.update_state(sim.state(), &generated.event, gw)?;
                sim.states.push(next);
                sim.push(generated.event);
            }
        }
        step += 1;

        let observation = sim.trace.events.last().expect("just pushed").clone();
        let outcome = predict_and_judge(p, &sim.memory, config, gw)?;
        let accepted = outcome.judgments.iter().position(Judgment::is_accepted);
        let mut execution = None;
        if let (Some(i), false) = (accepted, outcome.prediction.is_silent()) {
            let task = &outcome.prediction.candidates[i];
            let ex = p.agent.execute_task(task, scenario, sim.state(), &sim.trace, &p.gym, gw, config.max_steps)?;
            for e in ex.events() {
                sim.push(e);
            }
            execution = Some(ExecutionSummary {
                task: task.clone(),
                terminal: ex.terminal,
                steps: ex.steps.len(),
                errors: ex.errors.len(),
            });
            sim.states.push(ex.final_state);
        }
        sim.records.push(PredictionRecord::new(observation.clone(), &outcome.prediction, &outcome.judgments));
        manifest.ledger.push(LedgerEntry {
            item_id: format!("{}#{}", scenario.id, step),
            observation,
            draft: outcome.draft,
            feedback: outcome.feedback,
            prediction: outcome.prediction,
            judgments: outcome.judgments,
            need: None,
            r_t: None,
            cell: None,
            category: None,
            execution,
        });
    }
    Ok(())
}

/// One cell of the settings matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingResult {
    pub label: String,
    pub k: usize,
    pub with_feedback: bool,
    pub manifest: RunManifest,
}

pub fn setting_label(k: usize, with_feedback: bool) -> String {
    match with_feedback {
        false => format!("pred@{k}"),
        true if k == 1 => "w/ RM".to_string(),
        true => format!("pred@{k}, w/ RM"),
    }
}

/// {pred@1, pred@3} x {feedback off, on}. Each setting runs against the
/// gateway produced by `gateway_for` so replay fixtures can differ per cell.
pub fn settings_matrix(
    items: &[EvalItem],
    base: &RunConfig,
    prompts: Arc<PromptSet>,
    mut gateway_for: impl FnMut(usize, bool) -> Result<Gateway>,
) -> Result<Vec<SettingResult>> {
    let mut out = Vec::with_capacity(4);
    for with_feedback in [false, true] {
        for k in [1, 3] {
            let config = RunConfig {
                k,
                with_feedback,
                ..base.clone()
            };
            let gw = gateway_for(k, with_feedback)?;
            let manifest = run_evaluation(items, &config, prompts.clone(), &gw)?;
            out.push(SettingResult {
                label: setting_label(k, with_feedback),
                k,
                with_feedback,
                manifest,
            });
        }
    }
    Ok(out)
}

pub fn render_settings(results: &[SettingResult]) -> String {
    let empty = crate::metrics::compute_metrics(Default::default());
    let rows: Vec<(String, &MetricsReport)> = results
        .iter()
        .map(|r| (r.label.clone(), r.manifest.summary.as_ref().unwrap_or(&empty)))
        .collect();
    render_table(&rows)
}

/// Checks a simulated trace against the gym invariants: non-decreasing
/// times and entity states confined to the scenario's entities.
pub fn check_simulation(scenario: &Scenario, sim: &Simulation) -> std::result::Result<(), String> {
    let report = sim.trace.validate();
    if !report.is_ok() {
        return Err(format!("trace invalid: {report:?}"));
    }
    let ids: BTreeSet<&str> = scenario.entities.iter().map(|e| e.id.as_str()).collect();
    let mut clock = None;
    for st in &sim.states {
        if st.entity_states.keys().any(|k| !ids.contains(k.as_str())) {
            return Err("state holds an entity outside the scenario".into());
        }
        if clock.is_some_and(|c| st.clock < c) {
            return Err("clock moved backwards".into());
        }
        clock = Some(st.clock);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::FixtureEntry;
    use crate::trace::Timestamp;

    fn item(id: &str, need: NeedFlag) -> EvalItem {
        EvalItem {
            item_id: id.into(),
            trace: Trace::new(vec![Event::environment(Timestamp::from_millis(1_000), format!("event {id}")).unwrap()]),
            need,
        }
    }

    const SILENT: &str = r#"{"Proactive Task":null}"#;
    const TASK: &str = r#"{"Proactive Task":"Do the thing"}"#;
    const ACC: &str = r#"{"thought":"yes","judgment":"accepted"}"#;
    const REJ: &str = r#"{"thought":"no","judgment":"rejected"}"#;

    fn prompts() -> Arc<PromptSet> {
        Arc::new(PromptSet::default())
    }

    #[test]
    fn evaluation_counts_and_exclusions() {
        let items = vec![
            item("a", NeedFlag::Needed),
            item("b", NeedFlag::NotNeeded),
            item("c", NeedFlag::Needed),
            item("d", NeedFlag::Needed),
        ];
        let gw = Gateway::scripted(
            [TASK, ACC, TASK, REJ, SILENT, "garbage", "still garbage"]
                .into_iter()
                .map(FixtureEntry::any)
                .collect(),
        );
        let m = run_evaluation(&items, &RunConfig::default(), prompts(), &gw).unwrap();
        assert_eq!(m.ledger.len() + m.excluded.len(), items.len());
        assert_eq!(m.excluded[0].item_id, "d");
        let c = m.summary.unwrap().counts;
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (1, 1, 0, 1));
        assert_eq!(m.wall_clock_ms, 0);
        assert_eq!(m.call_counts[&CallRole::Judge], 2);
    }

    #[test]
    fn feedback_short_circuit_records_no_refinement() {
        let gw = Gateway::scripted([TASK, ACC].into_iter().map(FixtureEntry::any).collect());
        let cfg = RunConfig {
            with_feedback: true,
            ..RunConfig::default()
        };
        let m = run_evaluation(&[item("a", NeedFlag::Needed)], &cfg, prompts(), &gw).unwrap();
        assert!(!m.call_counts.contains_key(&CallRole::Refine));
        assert_eq!(m.ledger[0].cell, Some(ConfusionCell::TP));
    }

    #[test]
    fn second_candidate_accepted_counts_as_tp() {
        let gw = Gateway::scripted(
            [r#"{"Proactive Task":["x","y","z"]}"#, REJ, ACC]
                .into_iter()
                .map(FixtureEntry::any)
                .collect(),
        );
        let cfg = RunConfig { k: 3, ..RunConfig::default() };
        let m = run_evaluation(&[item("a", NeedFlag::NotNeeded)], &cfg, prompts(), &gw).unwrap();
        assert_eq!(m.ledger[0].cell, Some(ConfusionCell::TP));
        assert_eq!(m.ledger[0].judgments.len(), 2);
    }

    #[test]
    fn resume_skips_done_items() {
        let items = vec![item("a", NeedFlag::NotNeeded), item("b", NeedFlag::NotNeeded)];
        let gw = Gateway::scripted([SILENT].into_iter().map(FixtureEntry::any).collect());
        let first = run_evaluation(&items[..1], &RunConfig::default(), prompts(), &gw).unwrap();
        let gw = Gateway::scripted([SILENT].into_iter().map(FixtureEntry::any).collect());
        let m = resume_evaluation(&items, &RunConfig::default(), prompts(), &gw, Some(&first)).unwrap();
        assert_eq!(m.ledger.len(), 2);
        assert_eq!(m.call_counts[&CallRole::Agent], 1);
    }

    #[test]
    fn empty_matrix_has_four_undefined_reports() {
        let results = settings_matrix(&[], &RunConfig::default(), prompts(), |_, _| Ok(Gateway::scripted(vec![]))).unwrap();
        assert_eq!(results.len(), 4);
        for r in &results {
            let s = r.manifest.summary.as_ref().unwrap();
            assert!(s.recall.is_none() && s.accuracy.is_none());
        }
        let table = render_settings(&results);
        assert!(table.contains("pred@3, w/ RM"));
    }

    #[test]
    fn invalid_k_rejected() {
        let cfg = RunConfig { k: 4, ..RunConfig::default() };
        assert!(run_evaluation(&[], &cfg, prompts(), &Gateway::scripted(vec![])).is_err());
    }
}
