//! The environment gym: scenario generation, event generation conditioned on
//! history, state and sampled examples, user-activity simulation, and
//! entity-state plus clock maintenance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::gateway::{
    request_structured, request_structured_or_sentinel, to_pretty_json, CallRole, ChatMessage,
    ChatRequest, Gateway, GatewayError, Refusal, StructuredError,
};
use crate::prompts::{fill, PromptSet};
use crate::trace::{format_event_line, Event, Source, Timestamp, Trace};

/// Reply literal that ends event generation.
pub const EVENT_SENTINEL: &str = "NO_MORE_EVENTS";
/// Reply literal that ends user-activity simulation.
pub const ACTIVITY_SENTINEL: &str = "NO_MORE_ACTIVITIES";

#[derive(Debug, Error)]
pub enum GymError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("scenario generation failed at stage `{stage}`: {reason}")]
    Stage { stage: ScenarioStage, reason: String },
    #[error("event generation failed: {0}")]
    Generation(String),
    #[error("state update failed: {0}")]
    State(String),
    #[error("state patch names unknown entities: {}", .0.join(", "))]
    UnknownEntities(Vec<String>),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn structured_err(e: StructuredError, wrap: impl FnOnce(String) -> GymError) -> GymError {
    match e {
        StructuredError::Gateway(g) => GymError::Gateway(g),
        StructuredError::Invalid { reason, .. } => wrap(reason),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Coding,
    Writing,
    DailyLife,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Coding, Category::Writing, Category::DailyLife];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Coding => "coding",
            Category::Writing => "writing",
            Category::DailyLife => "daily_life",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown category `{s}` (expected coding, writing or daily_life)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub properties: BTreeMap<String, String>,
    #[serde(default)]
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Argument name to type tag (`string`, `number`, `boolean`).
    #[serde(default)]
    pub arguments: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub category: Category,
    pub job: String,
    pub background: String,
    pub start_time: Timestamp,
    pub entities: Vec<Entity>,
    #[serde(default)]
    pub tools: Vec<ToolSpec>,
    #[serde(default)]
    pub example_events: Vec<Event>,
}

impl Scenario {
    pub fn check(&self) -> Result<(), GymError> {
        if self.entities.is_empty() {
            return Err(GymError::Precondition(format!("scenario `{}` has no entities", self.id)));
        }
        let mut ids = BTreeSet::new();
        for e in &self.entities {
            if e.id.trim().is_empty() || !ids.insert(e.id.as_str()) {
                return Err(GymError::Precondition(format!(
                    "scenario `{}`: entity id `{}` is empty or duplicated",
                    self.id, e.id
                )));
            }
        }
        let mut names = BTreeSet::new();
        for t in &self.tools {
            if t.name.trim().is_empty() || !names.insert(t.name.as_str()) {
                return Err(GymError::Precondition(format!(
                    "scenario `{}`: tool name `{}` is empty or duplicated",
                    self.id, t.name
                )));
            }
        }
        Ok(())
    }

    pub fn tool(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.iter().find(|t| t.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityState {
    pub properties: BTreeMap<String, String>,
    pub status: String,
}

/// One applied patch, kept so later updates can see an entity's history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateChange {
    pub time: Timestamp,
    pub entity_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub properties: BTreeMap<String, String>,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentState {
    pub scenario_id: String,
    pub entity_states: BTreeMap<String, EntityState>,
    pub clock: Timestamp,
    #[serde(default)]
    pub changes: Vec<StateChange>,
}

impl EnvironmentState {
    pub fn initial(scenario: &Scenario) -> Self {
        EnvironmentState {
            scenario_id: scenario.id.clone(),
            entity_states: scenario
                .entities
                .iter()
                .map(|e| {
                    (
                        e.id.clone(),
                        EntityState {
                            properties: e.properties.clone(),
                            status: e.status.clone(),
                        },
                    )
                })
                .collect(),
            clock: scenario.start_time,
            changes: Vec::new(),
        }
    }
}

/// Patch for one entity as returned by the state-update prompt.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EntityPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub properties: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioStage {
    Job,
    Entities,
    Details,
    Examples,
}

impl fmt::Display for ScenarioStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioStage::Job => "job",
            ScenarioStage::Entities => "entities",
            ScenarioStage::Details => "details",
            ScenarioStage::Examples => "examples",
        })
    }
}

/// An event produced by [`Gym::generate_event`]; `clamped` records that the
/// model's time was earlier than the clock.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedEvent {
    pub event: Event,
    pub clamped: bool,
}

/// A few processed events from real users, used as style references when
/// drafting scenario examples.
const REFERENCE_EVENTS: &[(&str, &str)] = &[
    ("1717378968.208", "The user opens a new browser tab and navigates to the Google homepage."),
    ("1717378971.255", "The user switches to the 'Code.exe' application, and opens a new file."),
    ("1717342914.314", "A new tab titled 'new Tab' was opened in the web browser."),
];

#[derive(Debug, Clone)]
pub struct Gym {
    pub model_id: String,
    pub user_model_id: String,
    /// Number of trailing history events shown in prompts.
    pub history_window: usize,
    /// Number of example events drafted per scenario.
    pub example_count: usize,
    prompts: Arc<PromptSet>,
}

fn str_field<'a>(v: &'a Value, key: &str) -> Result<&'a str, Refusal> {
    v.get(key)
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Refusal::Retry(format!("missing or empty `{key}`")))
}

fn string_map(v: Option<&Value>, what: &str) -> Result<BTreeMap<String, String>, Refusal> {
    match v {
        None | Some(Value::Null) => Ok(BTreeMap::new()),
        Some(Value::Object(m)) => Ok(m
            .iter()
            .map(|(k, v)| {
                let s = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), s)
            })
            .collect()),
        Some(_) => Err(Refusal::Retry(format!("`{what}` must be an object"))),
    }
}

fn time_field(v: &Value, key: &str) -> Result<Timestamp, Refusal> {
    let raw = v
        .get(key)
        .ok_or_else(|| Refusal::Retry(format!("missing `{key}`")))?;
    let t: Timestamp = serde_json::from_value(raw.clone())
        .map_err(|e| Refusal::Retry(format!("`{key}`: {e}")))?;
    if !t.is_positive() {
        return Err(Refusal::Retry(format!("`{key}` must be positive")));
    }
    Ok(t)
}

fn render_history(events: &[Event]) -> String {
    if events.is_empty() {
        return "(none)".into();
    }
    events.iter().map(format_event_line).collect::<Vec<_>>().join("\n")
}

fn parse_timed_text(v: &Value, text_key: &str) -> Result<(Timestamp, String), Refusal> {
    Ok((time_field(v, "time")?, str_field(v, text_key)?.to_string()))
}

/// Pick `k` examples without replacement, deterministic in `seed`, returned
/// in their original order.
pub fn sample_examples(scenario: &Scenario, seed: u64, k: usize) -> Vec<Event> {
    let n = scenario.example_events.len();
    if k >= n {
        return scenario.example_events.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| scenario.example_events[i].clone()).collect()
}

impl Gym {
    pub fn new(model_id: impl Into<String>, prompts: Arc<PromptSet>) -> Self {
        let model_id = model_id.into();
        Gym {
            user_model_id: model_id.clone(),
            model_id,
            history_window: 30,
            example_count: 8,
            prompts,
        }
    }

    pub fn with_user_model(mut self, model_id: impl Into<String>) -> Self {
        self.user_model_id = model_id.into();
        self
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    /// Four sequential calls in one conversation: job, entities, details,
    /// example events. Each stage gets one reprompt before failing.
    pub fn generate_scenario(
        &self,
        id: &str,
        seed_job: &str,
        category: Category,
        gateway: &Gateway,
    ) -> Result<Scenario, GymError> {
        if seed_job.trim().is_empty() {
            return Err(GymError::Precondition("seed job is empty".into()));
        }
        let p = &self.prompts;
        let mut messages = vec![ChatMessage::system(p.seed_jobs.clone())];
        let stage = |stage: ScenarioStage,
                         prompt: String,
                         messages: &mut Vec<ChatMessage>,
                         validate: &dyn Fn(&Value) -> Result<(), Refusal>|
         -> Result<Value, GymError> {
            messages.push(ChatMessage::user(prompt));
            let req = ChatRequest::new(self.model_id.clone(), messages.clone());
            let value = request_structured(gateway, CallRole::Gym, &req, |v| {
                validate(v)?;
                Ok(v.clone())
            })
            .map_err(|e| structured_err(e, |reason| GymError::Stage { stage, reason }))?;
            messages.push(ChatMessage::assistant(to_pretty_json(&value)));
            Ok(value)
        };

        let job = stage(
            ScenarioStage::Job,
            fill(&p.scenario_job, &[("category", category.as_str()), ("seed_job", seed_job.trim())]),
            &mut messages,
            &|v| {
                str_field(v, "job")?;
                str_field(v, "background")?;
                Ok(())
            },
        )?;

        let listed = stage(
            ScenarioStage::Entities,
            p.scenario_entities.clone(),
            &mut messages,
            &|v| parse_entities(v).map(|_| ()),
        )?;
        let (mut entities, tools) = parse_entities(&listed).expect("validated above");

        let known: BTreeSet<String> = entities.iter().map(|e| e.id.clone()).collect();
        let details = stage(
            ScenarioStage::Details,
            p.scenario_details.clone(),
            &mut messages,
            &|v| parse_details(v, &known).map(|_| ()),
        )?;
        let (start_time, patches) = parse_details(&details, &known).expect("validated above");
        for (id, patch) in patches {
            let entity = entities.iter_mut().find(|e| e.id == id).expect("known id");
            entity.properties.extend(patch.properties);
            if let Some(status) = patch.status {
                entity.status = status;
            }
        }

        let reference = REFERENCE_EVENTS
            .iter()
            .map(|(t, e)| format!("{{\"time\":\"{t}\",\"event\":\"{e}\"}}"))
            .collect::<Vec<_>>()
            .join("\n");
        let count = self.example_count.to_string();
        let examples = stage(
            ScenarioStage::Examples,
            fill(&p.scenario_examples, &[("reference_events", &reference), ("count", &count)]),
            &mut messages,
            &|v| parse_examples(v).map(|_| ()),
        )?;
        let mut example_events = parse_examples(&examples).expect("validated above");
        example_events.sort_by_key(|e| e.time);

        let scenario = Scenario {
            id: id.to_string(),
            category,
            job: str_field(&job, "job").expect("validated").to_string(),
            background: str_field(&job, "background").expect("validated").to_string(),
            start_time,
            entities,
            tools,
            example_events,
        };
        scenario.check()?;
        Ok(scenario)
    }

    /// The next environment event caused by `activity`, or `None` once the
    /// model reports that nothing further follows.
    pub fn generate_event(
        &self,
        state: &EnvironmentState,
        history: &Trace,
        activity: &Event,
        examples: &[Event],
        gateway: &Gateway,
    ) -> Result<Option<GeneratedEvent>, GymError> {
        if activity.source == Source::Environment {
            return Err(GymError::Precondition(
                "events are generated from user or agent activity".into(),
            ));
        }
        let source = match activity.source {
            Source::User => "user",
            _ => "agent",
        };
        let clock = state.clock.to_string();
        let prompt = fill(
            &self.prompts.gym_event,
            &[
                ("state", &to_pretty_json(&state.entity_states)),
                ("examples", &render_history(examples)),
                ("history", &render_history(history.tail(self.history_window))),
                ("source", source),
                ("activity", &activity.text),
                ("clock", &clock),
                ("sentinel", EVENT_SENTINEL),
            ],
        );
        let req = ChatRequest::new(
            self.model_id.clone(),
            vec![ChatMessage::system(self.prompts.gym_scene.clone()), ChatMessage::user(prompt)],
        );
        let reply = request_structured_or_sentinel(gateway, CallRole::Gym, &req, EVENT_SENTINEL, |v| {
            parse_timed_text(v, "event")
        })
        .map_err(|e| structured_err(e, GymError::Generation))?;
        let Some((time, text)) = reply else {
            return Ok(None);
        };
        let clamped = time < state.clock;
        if clamped {
            log::warn!(
                "generated event time {time} precedes clock {}; clamped",
                state.clock
            );
        }
        let event = Event::environment(time.max(state.clock), text)
            .map_err(|e| GymError::Generation(e.to_string()))?;
        Ok(Some(GeneratedEvent { event, clamped }))
    }

    /// Simulated user's next activity, or `None` when the job is done.
    pub fn user_activity(
        &self,
        scenario: &Scenario,
        state: &EnvironmentState,
        history: &Trace,
        gateway: &Gateway,
    ) -> Result<Option<GeneratedEvent>, GymError> {
        let clock = state.clock.to_string();
        let prompt = fill(
            &self.prompts.user_activity,
            &[
                ("job", &scenario.job),
                ("background", &scenario.background),
                ("state", &to_pretty_json(&state.entity_states)),
                ("history", &render_history(history.tail(self.history_window))),
                ("clock", &clock),
                ("sentinel", ACTIVITY_SENTINEL),
            ],
        );
        let req = ChatRequest::new(
            self.user_model_id.clone(),
            vec![ChatMessage::system(self.prompts.user_agent.clone()), ChatMessage::user(prompt)],
        );
        let reply =
            request_structured_or_sentinel(gateway, CallRole::User, &req, ACTIVITY_SENTINEL, |v| {
                parse_timed_text(v, "activity")
            })
            .map_err(|e| structured_err(e, GymError::Generation))?;
        let Some((time, text)) = reply else {
            return Ok(None);
        };
        let clamped = time < state.clock;
        let event = Event::new(time.max(state.clock), text, Source::User)
            .map_err(|e| GymError::Generation(e.to_string()))?;
        Ok(Some(GeneratedEvent { event, clamped }))
    }

    /// Ask the model how `event` changes the entities and apply the patches
    /// atomically. The clock advances to the event time.
    pub fn update_state(
        &self,
        state: &EnvironmentState,
        event: &Event,
        gateway: &Gateway,
    ) -> Result<EnvironmentState, GymError> {
        let relevant = relevant_changes(state, &event.text, self.history_window);
        let prompt = fill(
            &self.prompts.status_input,
            &[
                ("entities", &to_pretty_json(&state.entity_states)),
                ("changes", &to_pretty_json(&relevant)),
                ("event", &format_event_line(event)),
            ],
        );
        let req = ChatRequest::new(
            self.model_id.clone(),
            vec![ChatMessage::system(self.prompts.status_update.clone()), ChatMessage::user(prompt)],
        );
        let patches = request_structured(gateway, CallRole::Gym, &req, parse_patches)
            .map_err(|e| structured_err(e, GymError::State))?;
        apply_patches(state, &patches, event)
    }
}

/// Changes to entities the event mentions (by id, or id with underscores as
/// spaces); if none are mentioned, the most recent changes.
fn relevant_changes(state: &EnvironmentState, text: &str, limit: usize) -> Vec<StateChange> {
    let lower = text.to_lowercase();
    let mentioned: BTreeSet<&str> = state
        .entity_states
        .keys()
        .filter(|id| {
            let id = id.to_lowercase();
            lower.contains(&id) || lower.contains(&id.replace('_', " "))
        })
        .map(String::as_str)
        .collect();
    let picked: Vec<&StateChange> = if mentioned.is_empty() {
        state.changes.iter().collect()
    } else {
        state
            .changes
            .iter()
            .filter(|c| mentioned.contains(c.entity_id.as_str()))
            .collect()
    };
    let skip = picked.len().saturating_sub(limit);
    picked.into_iter().skip(skip).cloned().collect()
}

pub fn apply_patches(
    state: &EnvironmentState,
    patches: &BTreeMap<String, EntityPatch>,
    event: &Event,
) -> Result<EnvironmentState, GymError> {
    let unknown: Vec<String> = patches
        .keys()
        .filter(|id| !state.entity_states.contains_key(*id))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(GymError::UnknownEntities(unknown));
    }
    let mut next = state.clone();
    for (id, patch) in patches {
        let entity = next.entity_states.get_mut(id).expect("checked above");
        entity.properties.extend(patch.properties.clone());
        if let Some(status) = &patch.status {
            entity.status = status.clone();
        }
        next.changes.push(StateChange {
            time: event.time,
            entity_id: id.clone(),
            status: patch.status.clone(),
            properties: patch.properties.clone(),
            cause: event.text.clone(),
        });
    }
    next.clock = state.clock.max(event.time);
    Ok(next)
}

fn parse_patches(v: &Value) -> Result<BTreeMap<String, EntityPatch>, Refusal> {
    let updates = match v.get("updates") {
        Some(Value::Object(m)) => m,
        Some(Value::Null) => return Ok(BTreeMap::new()),
        Some(_) => return Err(Refusal::Retry("`updates` must be an object".into())),
        None => return Err(Refusal::Retry("missing `updates`".into())),
    };
    updates
        .iter()
        .map(|(id, patch)| {
            let patch = patch
                .as_object()
                .ok_or_else(|| Refusal::Retry(format!("patch for `{id}` must be an object")))?;
            let status = match patch.get("status") {
                None | Some(Value::Null) => None,
                Some(Value::String(s)) => Some(s.clone()),
                Some(_) => return Err(Refusal::Retry(format!("status of `{id}` must be a string"))),
            };
            let properties = string_map(patch.get("properties"), "properties")?;
            Ok((id.clone(), EntityPatch { status, properties }))
        })
        .collect()
}

fn parse_entities(v: &Value) -> Result<(Vec<Entity>, Vec<ToolSpec>), Refusal> {
    let list = v
        .get("entities")
        .and_then(Value::as_array)
        .filter(|a| !a.is_empty())
        .ok_or_else(|| Refusal::Retry("`entities` must be a non-empty list".into()))?;
    let mut seen = BTreeSet::new();
    let mut entities = Vec::with_capacity(list.len());
    for (i, e) in list.iter().enumerate() {
        let id = str_field(e, "id").map_err(|_| Refusal::Retry(format!("entity {i} has no `id`")))?;
        if !seen.insert(id.to_string()) {
            return Err(Refusal::Retry(format!("entity id `{id}` is duplicated")));
        }
        entities.push(Entity {
            id: id.to_string(),
            name: e.get("name").and_then(Value::as_str).unwrap_or(id).to_string(),
            kind: e.get("kind").and_then(Value::as_str).unwrap_or("other").to_string(),
            properties: string_map(e.get("properties"), "properties")?,
            status: e.get("status").and_then(Value::as_str).unwrap_or_default().to_string(),
        });
    }
    let mut names = BTreeSet::new();
    let mut tools = Vec::new();
    for (i, t) in v.get("tools").and_then(Value::as_array).into_iter().flatten().enumerate() {
        let name = str_field(t, "name").map_err(|_| Refusal::Retry(format!("tool {i} has no `name`")))?;
        if !names.insert(name.to_string()) {
            return Err(Refusal::Retry(format!("tool `{name}` is duplicated")));
        }
        tools.push(ToolSpec {
            name: name.to_string(),
            description: t.get("description").and_then(Value::as_str).unwrap_or_default().to_string(),
            arguments: string_map(t.get("arguments"), "arguments")?,
        });
    }
    Ok((entities, tools))
}

fn parse_details(
    v: &Value,
    known: &BTreeSet<String>,
) -> Result<(Timestamp, Vec<(String, EntityPatch)>), Refusal> {
    let start = time_field(v, "start_time")?;
    let mut patches = Vec::new();
    for e in v.get("entities").and_then(Value::as_array).into_iter().flatten() {
        let id = str_field(e, "id")?;
        if !known.contains(id) {
            return Err(Refusal::Retry(format!("entity `{id}` was not listed before")));
        }
        let status = e.get("status").and_then(Value::as_str).map(str::to_string);
        patches.push((
            id.to_string(),
            EntityPatch {
                status,
                properties: string_map(e.get("properties"), "properties")?,
            },
        ));
    }
    Ok((start, patches))
}

fn parse_examples(v: &Value) -> Result<Vec<Event>, Refusal> {
    let list = v
        .get("events")
        .and_then(Value::as_array)
        .filter(|a| !a.is_empty())
        .ok_or_else(|| Refusal::Retry("`events` must be a non-empty list".into()))?;
    list.iter()
        .map(|e| {
            let (time, text) = parse_timed_text(e, "event")?;
            Event::environment(time, text).map_err(|e| Refusal::Retry(e.to_string()))
        })
        .collect()
}

/// Arguments of a tool call rendered as compact JSON.
pub fn render_arguments(args: &Map<String, Value>) -> String {
    Value::Object(args.clone()).to_string()
}
