//! The proactive agent: a bounded event memory, null-or-task prediction
//! (optionally several candidates and one feedback-driven refinement), and a
//! tool-driven execution loop inside the gym.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::gateway::{
    request_structured, to_pretty_json, CallRole, ChatMessage, ChatRequest, Gateway,
    GatewayError, Refusal, StructuredError,
};
use crate::gym::{render_arguments, EnvironmentState, Gym, GymError, Scenario};
use crate::prompts::{fill, PromptSet};
use crate::trace::{Event, Judgment, Prediction, Source, TaskCandidate, Trace};

pub const MAX_CANDIDATES: usize = 3;
pub const DEFAULT_MEMORY_BOUND: usize = 30;
pub const DEFAULT_MAX_STEPS: usize = 20;
/// Consecutive failed actions after which execution is abandoned.
pub const MAX_CONSECUTIVE_ERRORS: usize = 3;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("k must be between 1 and {MAX_CANDIDATES}, got {0}")]
    InvalidK(usize),
    #[error("prediction failed: {0}")]
    Prediction(String),
    #[error("task execution failed: {0}")]
    Execution(String),
    #[error(transparent)]
    Gym(#[from] GymError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn structured_err(e: StructuredError, wrap: impl FnOnce(String) -> AgentError) -> AgentError {
    match e {
        StructuredError::Gateway(g) => AgentError::Gateway(g),
        StructuredError::Invalid { reason, .. } => wrap(reason),
    }
}

/// Bounded window of observed events plus conversation and profile context.
/// `observe` returns a new memory and leaves the receiver untouched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentMemory {
    pub events: Vec<Event>,
    #[serde(default)]
    pub conversation: Vec<(String, String)>,
    #[serde(default)]
    pub user_profile: String,
    pub bound: usize,
}

impl Default for AgentMemory {
    fn default() -> Self {
        AgentMemory::new(DEFAULT_MEMORY_BOUND)
    }
}

impl AgentMemory {
    pub fn new(bound: usize) -> Self {
        AgentMemory {
            events: Vec::new(),
            conversation: Vec::new(),
            user_profile: String::new(),
            bound: bound.max(1),
        }
    }

    pub fn observe(&self, event: &Event) -> AgentMemory {
        let mut next = self.clone();
        next.events.push(event.clone());
        let excess = next.events.len().saturating_sub(next.bound);
        next.events.drain(..excess);
        next
    }

    pub fn observe_all<'a>(&self, events: impl IntoIterator<Item = &'a Event>) -> AgentMemory {
        let mut next = self.clone();
        for e in events {
            next = next.observe(e);
        }
        next
    }

    pub fn window(&self) -> Trace {
        Trace::new(self.events.clone())
    }

    pub fn last(&self) -> Option<&Event> {
        self.events.last()
    }
}

/// The agent's reply format, used both to render drafts back to the model
/// and for the prediction ledger.
pub fn prediction_json(p: &Prediction) -> Value {
    let task = match p.candidates.as_slice() {
        [] => Value::Null,
        [one] => Value::String(one.description().to_string()),
        many => Value::Array(
            many.iter()
                .map(|c| Value::String(c.description().to_string()))
                .collect(),
        ),
    };
    json!({
        "Purpose": p.purpose,
        "Thoughts": p.thoughts,
        "Proactive Task": task,
        "Response": p.response,
    })
}

fn text_field(v: &Value, key: &str) -> String {
    v.get(key).and_then(Value::as_str).unwrap_or_default().to_string()
}

fn is_null_task(s: &str) -> bool {
    let t = s.trim().trim_matches('`');
    t.is_empty() || t.eq_ignore_ascii_case("null") || t.eq_ignore_ascii_case("none")
}

/// Parse an agent reply, truncating to `k` candidates.
pub fn parse_prediction(v: &Value, k: usize) -> Result<Prediction, Refusal> {
    let task = v
        .get("Proactive Task")
        .ok_or_else(|| Refusal::Retry("missing `Proactive Task`".into()))?;
    let mut candidates = Vec::new();
    match task {
        Value::Null => {}
        Value::String(s) if is_null_task(s) => {}
        Value::String(s) => candidates.push(TaskCandidate::new(s.trim()).expect("non-blank")),
        Value::Array(items) => {
            for item in items {
                match item {
                    Value::Null => {}
                    Value::String(s) if is_null_task(s) => {}
                    Value::String(s) => {
                        candidates.push(TaskCandidate::new(s.trim()).expect("non-blank"))
                    }
                    _ => {
                        return Err(Refusal::Retry(
                            "`Proactive Task` entries must be strings".into(),
                        ))
                    }
                }
            }
        }
        _ => {
            return Err(Refusal::Retry(
                "`Proactive Task` must be null, a string or a list of strings".into(),
            ))
        }
    }
    if candidates.len() > k {
        log::warn!("agent proposed {} tasks, keeping the first {k}", candidates.len());
        candidates.truncate(k);
    }
    let response = if candidates.is_empty() {
        String::new()
    } else {
        text_field(v, "Response")
    };
    Ok(Prediction {
        candidates,
        purpose: text_field(v, "Purpose"),
        thoughts: text_field(v, "Thoughts"),
        response,
    })
}

/// Why an execution loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Finished,
    Interrupted,
    StepLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolAction {
    pub tool: String,
    #[serde(default)]
    pub arguments: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionStep {
    pub action: ToolAction,
    /// The agent-source event describing the action.
    pub action_event: Event,
    pub resulting_event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    pub steps: Vec<ExecutionStep>,
    pub final_state: EnvironmentState,
    pub terminal: Terminal,
    /// Failed actions, in order, with the reason fed back to the model.
    pub errors: Vec<String>,
}

impl Execution {
    /// Action and resulting events in the order they happened.
    pub fn events(&self) -> Vec<Event> {
        self.steps
            .iter()
            .flat_map(|s| [s.action_event.clone(), s.resulting_event.clone()])
            .collect()
    }
}

enum ExecReply {
    Finish,
    Act(ToolAction),
}

fn parse_exec(v: &Value) -> Result<ExecReply, Refusal> {
    if v.get("finish").and_then(Value::as_bool) == Some(true) {
        return Ok(ExecReply::Finish);
    }
    let action = v
        .get("action")
        .ok_or_else(|| Refusal::Retry("reply needs `action` or `finish: true`".into()))?;
    let tool = action
        .get("tool")
        .and_then(Value::as_str)
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| Refusal::Retry("`action.tool` must be a non-empty string".into()))?;
    let arguments = match action.get("arguments") {
        None | Some(Value::Null) => Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(_) => return Err(Refusal::Retry("`action.arguments` must be an object".into())),
    };
    Ok(ExecReply::Act(ToolAction {
        tool: tool.trim().to_string(),
        arguments,
    }))
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub model_id: String,
    pub temperature: f64,
    prompts: Arc<PromptSet>,
}

impl Agent {
    pub fn new(model_id: impl Into<String>, prompts: Arc<PromptSet>) -> Self {
        Agent {
            model_id: model_id.into(),
            temperature: 0.0,
            prompts,
        }
    }

    fn system_prompt(&self, k: usize) -> String {
        if k > 1 {
            let k = k.to_string();
            format!("{}\n{}", self.prompts.agent, fill(&self.prompts.agent_multi, &[("k", &k)]))
        } else {
            self.prompts.agent.clone()
        }
    }

    fn observations(memory: &AgentMemory) -> String {
        let mut events = memory.events.clone();
        events.sort_by_key(|e| e.time);
        let mut payload = Map::new();
        if !memory.user_profile.is_empty() {
            payload.insert("User Profile".into(), Value::String(memory.user_profile.clone()));
        }
        payload.insert("Observations (Time Ascending)".into(), json!(events));
        if !memory.conversation.is_empty() {
            let turns: Vec<Value> = memory
                .conversation
                .iter()
                .map(|(who, text)| json!({ "speaker": who, "text": text }))
                .collect();
            payload.insert("Conversation".into(), Value::Array(turns));
        }
        to_pretty_json(&Value::Object(payload))
    }

    fn base_request(&self, memory: &AgentMemory, k: usize) -> ChatRequest {
        ChatRequest::new(
            self.model_id.clone(),
            vec![
                ChatMessage::system(self.system_prompt(k)),
                ChatMessage::user(Self::observations(memory)),
            ],
        )
        .with_temperature(self.temperature)
    }

    fn check_k(k: usize) -> Result<(), AgentError> {
        if (1..=MAX_CANDIDATES).contains(&k) {
            Ok(())
        } else {
            Err(AgentError::InvalidK(k))
        }
    }

    /// One call proposing up to `k` tasks, or none.
    pub fn predict(&self, memory: &AgentMemory, gateway: &Gateway, k: usize) -> Result<Prediction, AgentError> {
        Self::check_k(k)?;
        let req = self.base_request(memory, k);
        request_structured(gateway, CallRole::Agent, &req, |v| parse_prediction(v, k))
            .map_err(|e| structured_err(e, AgentError::Prediction))
    }

    /// One refinement round. Accepted feedback returns the draft unchanged
    /// without calling the model.
    pub fn refine_with_feedback(
        &self,
        memory: &AgentMemory,
        draft: &Prediction,
        feedback: &Judgment,
        gateway: &Gateway,
        k: usize,
    ) -> Result<Prediction, AgentError> {
        Self::check_k(k)?;
        if feedback.is_accepted() {
            return Ok(draft.clone());
        }
        let draft_json = to_pretty_json(&prediction_json(draft));
        let mut req = self.base_request(memory, k);
        req.messages.push(ChatMessage::assistant(draft_json.clone()));
        req.messages.push(ChatMessage::user(fill(
            &self.prompts.agent_refine,
            &[
                ("draft", &draft_json),
                ("decision", &feedback.decision.to_string()),
                ("feedback", &feedback.thought),
            ],
        )));
        request_structured(gateway, CallRole::Refine, &req, |v| parse_prediction(v, k))
            .map_err(|e| structured_err(e, AgentError::Prediction))
    }

    /// Carry out an accepted task through the scenario's tools. Each valid
    /// action becomes an agent-source event; the gym turns it into one
    /// environment event and updates the state.
    #[allow(clippy::too_many_arguments)]
    pub fn execute_task(
        &self,
        task: &TaskCandidate,
        scenario: &Scenario,
        state: &EnvironmentState,
        history: &Trace,
        gym: &Gym,
        gateway: &Gateway,
        max_steps: usize,
    ) -> Result<Execution, AgentError> {
        if max_steps == 0 {
            return Err(AgentError::Execution("max_steps must be at least 1".into()));
        }
        if scenario.tools.is_empty() {
            return Err(AgentError::Execution(format!(
                "scenario `{}` has no tools",
                scenario.id
            )));
        }
        let tool_list = to_pretty_json(&scenario.tools);
        let mut messages = vec![
            ChatMessage::system(self.prompts.agent_execute.clone()),
            ChatMessage::user(to_pretty_json(&json!({
                "Accepted Task": task.description(),
                "Tools": serde_json::from_str::<Value>(&tool_list).expect("serialized above"),
                "Environment State": state.entity_states,
                "Clock": state.clock.to_string(),
            }))),
        ];
        let mut state = state.clone();
        let mut history = history.clone();
        let mut steps = Vec::new();
        let mut errors = Vec::new();
        let mut consecutive = 0usize;

        for _ in 0..max_steps {
            let req = ChatRequest::new(self.model_id.clone(), messages.clone())
                .with_temperature(self.temperature);
            let reply = request_structured(gateway, CallRole::Execute, &req, parse_exec)
                .map_err(|e| structured_err(e, AgentError::Execution))?;
            let action = match reply {
                ExecReply::Finish => {
                    return Ok(Execution {
                        steps,
                        final_state: state,
                        terminal: Terminal::Finished,
                        errors,
                    })
                }
                ExecReply::Act(a) => a,
            };
            messages.push(ChatMessage::assistant(to_pretty_json(&json!({ "action": action }))));

            let outcome = self.apply_action(&action, scenario, &state, &history, gym, gateway)?;
            match outcome {
                Ok((action_event, resulting_event, next_state)) => {
                    consecutive = 0;
                    messages.push(ChatMessage::user(to_pretty_json(&json!({
                        "Events": [&action_event, &resulting_event],
                        "Environment State": next_state.entity_states,
                    }))));
                    history.events.push(action_event.clone());
                    history.events.push(resulting_event.clone());
                    state = next_state;
                    steps.push(ExecutionStep {
                        action,
                        action_event,
                        resulting_event,
                    });
                }
                Err(reason) => {
                    consecutive += 1;
                    messages.push(ChatMessage::user(format!("Error: {reason}")));
                    errors.push(reason);
                    if consecutive >= MAX_CONSECUTIVE_ERRORS {
                        return Ok(Execution {
                            steps,
                            final_state: state,
                            terminal: Terminal::Interrupted,
                            errors,
                        });
                    }
                }
            }
        }
        Ok(Execution {
            steps,
            final_state: state,
            terminal: Terminal::StepLimit,
            errors,
        })
    }

    /// Inner `Err` is a recoverable step error reported back to the model.
    #[allow(clippy::type_complexity)]
    fn apply_action(
        &self,
        action: &ToolAction,
        scenario: &Scenario,
        state: &EnvironmentState,
        history: &Trace,
        gym: &Gym,
        gateway: &Gateway,
    ) -> Result<Result<(Event, Event, EnvironmentState), String>, AgentError> {
        if scenario.tool(&action.tool).is_none() {
            let known: Vec<&str> = scenario.tools.iter().map(|t| t.name.as_str()).collect();
            return Ok(Err(format!(
                "unknown tool `{}`; available tools: {}",
                action.tool,
                known.join(", ")
            )));
        }
        let text = format!(
            "The assistant calls `{}` with {}.",
            action.tool,
            render_arguments(&action.arguments)
        );
        let action_event = Event::new(state.clock, text, Source::Agent)
            .map_err(|e| AgentError::Execution(e.to_string()))?;
        let examples: Vec<Event> = Vec::new();
        let Some(generated) = gym.generate_event(state, history, &action_event, &examples, gateway)? else {
            return Ok(Err(format!(
                "`{}` produced no change in the environment",
                action.tool
            )));
        };
        let next = gym.update_state(state, &generated.event, gateway)?;
        Ok(Ok((action_event, generated.event, next)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::FixtureEntry;
    use crate::gym::{Category, Entity, ToolSpec};
    use crate::trace::Timestamp;
    use std::collections::BTreeMap;

    fn ev(ms: i64, text: &str) -> Event {
        Event::environment(Timestamp::from_millis(ms), text).unwrap()
    }

    fn agent() -> Agent {
        Agent::new("gpt-4o", Arc::new(PromptSet::default()))
    }

    #[test]
    fn memory_is_bounded_and_ordered() {
        let m = AgentMemory::default();
        let m1 = m.observe(&ev(1, "a"));
        assert!(m.events.is_empty());
        assert_eq!(m1.events.len(), 1);
        let m2 = m1.observe(&ev(2, "b"));
        assert_eq!(m2.events[0].text, "a");
        assert_eq!(m2.events[1].text, "b");
        let full = (0..30).fold(AgentMemory::default(), |m, i| m.observe(&ev(i + 1, "x")));
        let next = full.observe(&ev(100, "new"));
        assert_eq!(next.events.len(), 30);
        assert_eq!(next.events[0].time, Timestamp::from_millis(2));
        assert_eq!(next.events[29].text, "new");
    }

    #[test]
    fn predict_null_single_and_multi() {
        let mem = AgentMemory::default().observe(&ev(1717378968208, "The user opens a new tab."));
        let gw = Gateway::scripted(vec![
            FixtureEntry::any(r#"{"Purpose":"p","Thoughts":"t","Proactive Task":null,"Response":""}"#),
            FixtureEntry::any(r#"{"Purpose":"p","Thoughts":"t","Proactive Task":"Suggest creating a new terminal or command prompt within the 'Code.exe' application.","Response":"Shall I?"}"#),
            FixtureEntry::any(r#"{"Proactive Task":["a","b","c","d"]}"#),
        ]);
        let a = agent();
        assert!(a.predict(&mem, &gw, 1).unwrap().is_silent());
        let p = a.predict(&mem, &gw, 1).unwrap();
        assert_eq!(
            p.candidates[0].description(),
            "Suggest creating a new terminal or command prompt within the 'Code.exe' application."
        );
        assert_eq!(p.response, "Shall I?");
        let p = a.predict(&mem, &gw, 3).unwrap();
        let d: Vec<_> = p.candidates.iter().map(|c| c.description()).collect();
        assert_eq!(d, ["a", "b", "c"]);
        assert!(matches!(a.predict(&mem, &gw, 4), Err(AgentError::InvalidK(4))));
        assert!(matches!(a.predict(&mem, &gw, 0), Err(AgentError::InvalidK(0))));
    }

    #[test]
    fn predict_reprompts_on_missing_field() {
        let gw = Gateway::scripted(vec![
            FixtureEntry::any(r#"{"Purpose":"p"}"#),
            FixtureEntry::any(r#"{"Proactive Task":"x"}"#),
        ]);
        assert_eq!(agent().predict(&AgentMemory::default(), &gw, 1).unwrap().candidates.len(), 1);
        assert_eq!(gw.call_counts()[&CallRole::Agent], 2);
    }

    #[test]
    fn refinement_rules() {
        let mem = AgentMemory::default();
        let draft = Prediction {
            candidates: vec![TaskCandidate::new("Summarize the page").unwrap()],
            ..Prediction::default()
        };
        let gw = Gateway::scripted(vec![
            FixtureEntry::any(r#"{"Proactive Task":null}"#),
            FixtureEntry::any(r#"{"Proactive Task":"Open the docs"}"#),
        ]);
        let a = agent();
        let same = a
            .refine_with_feedback(&mem, &draft, &Judgment::accepted("fine"), &gw, 1)
            .unwrap();
        assert_eq!(same, draft);
        assert!(gw.call_counts().is_empty());
        let withdrawn = a
            .refine_with_feedback(&mem, &draft, &Judgment::rejected("too abstract"), &gw, 1)
            .unwrap();
        assert!(withdrawn.is_silent());
        let proposed = a
            .refine_with_feedback(&mem, &Prediction::silent(), &Judgment::rejected("a task is needed"), &gw, 1)
            .unwrap();
        assert_eq!(proposed.candidates.len(), 1);
        assert_eq!(gw.call_counts()[&CallRole::Refine], 2);
    }

    #[test]
    fn prediction_json_round_trip() {
        for n in 0..=3 {
            let p = Prediction {
                candidates: (0..n).map(|i| TaskCandidate::new(format!("t{i}")).unwrap()).collect(),
                purpose: "p".into(),
                thoughts: "t".into(),
                response: if n > 0 { "r".into() } else { String::new() },
            };
            assert_eq!(parse_prediction(&prediction_json(&p), 3).unwrap(), p);
        }
    }

    fn scenario() -> Scenario {
        Scenario {
            id: "s".into(),
            category: Category::Coding,
            job: "job".into(),
            background: "bg".into(),
            start_time: Timestamp::from_millis(1_000_000),
            entities: vec![Entity {
                id: "browser".into(),
                name: "Browser".into(),
                kind: "browser".into(),
                properties: BTreeMap::new(),
                status: "open".into(),
            }],
            tools: vec![ToolSpec {
                name: "open_url".into(),
                description: "Open a URL.".into(),
                arguments: BTreeMap::from([("url".into(), "string".into())]),
            }],
            example_events: vec![],
        }
    }

    fn gym() -> Gym {
        Gym::new("gpt-4o", Arc::new(PromptSet::default()))
    }

    #[test]
    fn execution_finishes_after_two_actions() {
        let s = scenario();
        let st = EnvironmentState::initial(&s);
        let gw = Gateway::scripted(vec![
            FixtureEntry::any(r#"{"thought":"open","action":{"tool":"open_url","arguments":{"url":"https://docs.example.com"}}}"#),
            FixtureEntry::any(r#"{"time":"1000.500","event":"The browser loads the documentation page."}"#),
            FixtureEntry::any(r#"{"updates":{"browser":{"properties":{"url":"https://docs.example.com"}}}}"#),
            FixtureEntry::any(r#"{"action":{"tool":"open_url","arguments":{"url":"https://api.example.com"}}}"#),
            FixtureEntry::any(r#"{"time":"1001.000","event":"The browser loads the API reference."}"#),
            FixtureEntry::any(r#"{"updates":{}}"#),
            FixtureEntry::any(r#"{"thought":"done","finish":true}"#),
        ]);
        let task = TaskCandidate::new("Open the docs").unwrap();
        let ex = agent()
            .execute_task(&task, &s, &st, &Trace::default(), &gym(), &gw, 20)
            .unwrap();
        assert_eq!(ex.terminal, Terminal::Finished);
        assert_eq!(ex.steps.len(), 2);
        assert_eq!(ex.steps[0].action_event.source, Source::Agent);
        assert_eq!(ex.steps[0].resulting_event.source, Source::Environment);
        assert_eq!(ex.final_state.entity_states["browser"].properties["url"], "https://docs.example.com");
        assert_eq!(ex.final_state.clock, Timestamp::from_millis(1_001_000));
        let times: Vec<_> = ex.events().iter().map(|e| e.time).collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn execution_step_limit_and_interrupt() {
        let s = scenario();
        let st = EnvironmentState::initial(&s);
        let task = TaskCandidate::new("t").unwrap();
        let gw = Gateway::scripted(vec![
            FixtureEntry::any(r#"{"action":{"tool":"open_url","arguments":{}}}"#),
            FixtureEntry::any(r#"{"time":"1001.000","event":"Something opens."}"#),
            FixtureEntry::any(r#"{"updates":{}}"#),
        ]);
        let ex = agent().execute_task(&task, &s, &st, &Trace::default(), &gym(), &gw, 1).unwrap();
        assert_eq!((ex.terminal, ex.steps.len()), (Terminal::StepLimit, 1));

        let bad = r#"{"action":{"tool":"rm_rf","arguments":{}}}"#;
        let gw = Gateway::scripted(vec![FixtureEntry::any(bad), FixtureEntry::any(bad), FixtureEntry::any(bad)]);
        let ex = agent().execute_task(&task, &s, &st, &Trace::default(), &gym(), &gw, 20).unwrap();
        assert_eq!(ex.terminal, Terminal::Interrupted);
        assert!(ex.steps.is_empty());
        assert_eq!(ex.errors.len(), 3);
    }
}
