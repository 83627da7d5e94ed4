//! Core domain types shared by every stage of the pipeline, with their
//! line-oriented JSON encodings.
//!
//! Timestamps are kept as integer milliseconds since the Unix epoch. On read
//! any decimal precision is accepted (rounded half-up to the millisecond); on
//! write they are always rendered with exactly three decimals so golden files
//! stay byte-stable.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("malformed JSON: {0}")]
    Malformed(String),
    #[error("field `{field}`: {reason}")]
    Field { field: &'static str, reason: String },
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<TraceError>,
    },
}

impl TraceError {
    fn field(field: &'static str, reason: impl Into<String>) -> Self {
        TraceError::Field {
            field,
            reason: reason.into(),
        }
    }
}

/// Milliseconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const fn from_millis(ms: i64) -> Self {
        Timestamp(ms)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        Timestamp((secs * 1000.0).round() as i64)
    }

    pub const fn millis(self) -> i64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn is_positive(self) -> bool {
        self.0 > 0
    }

    pub fn plus_millis(self, ms: i64) -> Self {
        Timestamp(self.0 + ms)
    }

    /// Parse a decimal seconds string such as `"1717378975.29"`.
    pub fn parse_decimal(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let (negative, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (int_part, frac_part) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(format!("`{s}` is not a decimal number"));
        }
        if !int_part.bytes().all(|b| b.is_ascii_digit())
            || !frac_part.bytes().all(|b| b.is_ascii_digit())
        {
            return Err(format!("`{s}` is not a decimal number"));
        }
        let whole: i64 = if int_part.is_empty() {
            0
        } else {
            int_part
                .parse()
                .map_err(|_| format!("`{s}` is out of range"))?
        };
        let digits: Vec<i64> = frac_part.bytes().map(|b| (b - b'0') as i64).collect();
        let mut millis = 0i64;
        for i in 0..3 {
            millis = millis * 10 + digits.get(i).copied().unwrap_or(0);
        }
        if digits.get(3).is_some_and(|d| *d >= 5) {
            millis += 1;
        }
        let total = whole
            .checked_mul(1000)
            .and_then(|w| w.checked_add(millis))
            .ok_or_else(|| format!("`{s}` is out of range"))?;
        Ok(Timestamp(if negative { -total } else { total }))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:03}", abs / 1000, abs % 1000)
    }
}

impl FromStr for Timestamp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Timestamp::parse_decimal(s)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        match Value::deserialize(deserializer)? {
            Value::String(s) => Timestamp::parse_decimal(&s).map_err(D::Error::custom),
            Value::Number(n) => n
                .as_f64()
                .map(Timestamp::from_secs_f64)
                .ok_or_else(|| D::Error::custom("time is not a finite number")),
            other => Err(D::Error::custom(format!(
                "expected a decimal string, found {other}"
            ))),
        }
    }
}

/// Who produced an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    User,
    #[default]
    Environment,
    Agent,
}

/// A timestamped natural-language observation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub time: Timestamp,
    pub text: String,
    pub source: Source,
}

impl Event {
    pub fn new(time: Timestamp, text: impl Into<String>, source: Source) -> Result<Self, TraceError> {
        let event = Event {
            time,
            text: text.into(),
            source,
        };
        event.check()?;
        Ok(event)
    }

    pub fn environment(time: Timestamp, text: impl Into<String>) -> Result<Self, TraceError> {
        Event::new(time, text, Source::Environment)
    }

    fn check(&self) -> Result<(), TraceError> {
        if !self.time.is_positive() {
            return Err(TraceError::field("time", "time must be > 0"));
        }
        if self.text.trim().is_empty() {
            return Err(TraceError::field("event", "empty text"));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct EventOut<'a> {
    time: Timestamp,
    event: &'a str,
    #[serde(skip_serializing_if = "is_environment")]
    source: Source,
}

fn is_environment(s: &Source) -> bool {
    *s == Source::Environment
}

impl Serialize for Event {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        EventOut {
            time: self.time,
            event: &self.text,
            source: self.source,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Event {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        event_from_value(&value).map_err(D::Error::custom)
    }
}

fn event_from_value(value: &Value) -> Result<Event, TraceError> {
    let obj = value
        .as_object()
        .ok_or_else(|| TraceError::Malformed("event is not a JSON object".into()))?;
    let time = match obj.get("time") {
        None => return Err(TraceError::field("time", "missing")),
        Some(Value::String(s)) => {
            Timestamp::parse_decimal(s).map_err(|e| TraceError::field("time", e))?
        }
        Some(Value::Number(n)) => n
            .as_f64()
            .map(Timestamp::from_secs_f64)
            .ok_or_else(|| TraceError::field("time", "not a finite number"))?,
        Some(_) => return Err(TraceError::field("time", "expected a decimal string")),
    };
    let text = match obj.get("event") {
        None => return Err(TraceError::field("event", "missing")),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(TraceError::field("event", "expected a string")),
    };
    let source = match obj.get("source") {
        None | Some(Value::Null) => Source::Environment,
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|_| TraceError::field("source", format!("unknown source {v}")))?,
    };
    Event::new(time, text, source)
}

/// Parse one processed-event line, e.g.
/// `{"time":"1717378968.208","event":"The user opens a new browser tab…"}`.
pub fn parse_event_line(line: &str) -> Result<Event, TraceError> {
    let value: Value =
        serde_json::from_str(line.trim()).map_err(|e| TraceError::Malformed(e.to_string()))?;
    event_from_value(&value)
}

pub fn format_event_line(event: &Event) -> String {
    serde_json::to_string(event).expect("event serialization is infallible")
}

/// An ordered list of events, optionally tied to a scenario.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Trace {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_id: Option<String>,
    pub events: Vec<Event>,
}

impl Trace {
    pub fn new(events: Vec<Event>) -> Self {
        Trace {
            scenario_id: None,
            events,
        }
    }

    pub fn with_scenario(scenario_id: impl Into<String>) -> Self {
        Trace {
            scenario_id: Some(scenario_id.into()),
            events: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn last_time(&self) -> Option<Timestamp> {
        self.events.last().map(|e| e.time)
    }

    /// The last `n` events.
    pub fn tail(&self, n: usize) -> &[Event] {
        let start = self.events.len().saturating_sub(n);
        &self.events[start..]
    }

    pub fn validate(&self) -> ValidationReport {
        validate_trace(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    TimeRegression,
    EmptyText,
    NonPositiveTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ValidationReport {
    Ok,
    Violation { index: usize, kind: ViolationKind },
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        matches!(self, ValidationReport::Ok)
    }
}

/// Report the first event that breaks time ordering or carries empty text.
pub fn validate_trace(trace: &Trace) -> ValidationReport {
    let mut prev: Option<Timestamp> = None;
    for (index, event) in trace.events.iter().enumerate() {
        if event.text.trim().is_empty() {
            return ValidationReport::Violation {
                index,
                kind: ViolationKind::EmptyText,
            };
        }
        if !event.time.is_positive() {
            return ValidationReport::Violation {
                index,
                kind: ViolationKind::NonPositiveTime,
            };
        }
        if prev.is_some_and(|p| event.time < p) {
            return ValidationReport::Violation {
                index,
                kind: ViolationKind::TimeRegression,
            };
        }
        prev = Some(event.time);
    }
    ValidationReport::Ok
}

/// A single proposed task. Never blank.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(transparent)]
pub struct TaskCandidate(String);

impl TaskCandidate {
    pub fn new(description: impl Into<String>) -> Result<Self, TraceError> {
        let description = description.into();
        if description.trim().is_empty() {
            return Err(TraceError::field("description", "empty task description"));
        }
        Ok(TaskCandidate(description))
    }

    pub fn description(&self) -> &str {
        &self.0
    }
}

impl<'de> Deserialize<'de> for TaskCandidate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        TaskCandidate::new(s).map_err(D::Error::custom)
    }
}

impl fmt::Display for TaskCandidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The agent's output at one step: zero candidates means it stays silent.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(default)]
    pub candidates: Vec<TaskCandidate>,
    #[serde(default)]
    pub purpose: String,
    #[serde(default)]
    pub thoughts: String,
    #[serde(default)]
    pub response: String,
}

impl Prediction {
    pub fn silent() -> Self {
        Prediction::default()
    }

    pub fn is_silent(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn first(&self) -> Option<&TaskCandidate> {
        self.candidates.first()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accepted,
    Rejected,
}

impl Decision {
    pub fn is_accepted(self) -> bool {
        self == Decision::Accepted
    }

    pub fn from_accepted(accepted: bool) -> Self {
        if accepted {
            Decision::Accepted
        } else {
            Decision::Rejected
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Accepted => "accepted",
            Decision::Rejected => "rejected",
        })
    }
}

/// A user (or reward-model) verdict on a proposal, in the judge's reply schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    #[serde(default)]
    pub thought: String,
    #[serde(rename = "judgment", alias = "judgement")]
    pub decision: Decision,
}

impl Judgment {
    pub fn new(decision: Decision, thought: impl Into<String>) -> Self {
        Judgment {
            thought: thought.into(),
            decision,
        }
    }

    pub fn accepted(thought: impl Into<String>) -> Self {
        Judgment::new(Decision::Accepted, thought)
    }

    pub fn rejected(thought: impl Into<String>) -> Self {
        Judgment::new(Decision::Rejected, thought)
    }

    pub fn is_accepted(&self) -> bool {
        self.decision.is_accepted()
    }
}

/// Whether the user needed assistance at a step. Encoded as `0` / `1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum NeedFlag {
    NotNeeded,
    Needed,
}

impl NeedFlag {
    pub fn from_bool(needed: bool) -> Self {
        if needed {
            NeedFlag::Needed
        } else {
            NeedFlag::NotNeeded
        }
    }

    pub fn is_needed(self) -> bool {
        self == NeedFlag::Needed
    }
}

impl From<NeedFlag> for u8 {
    fn from(n: NeedFlag) -> u8 {
        match n {
            NeedFlag::NotNeeded => 0,
            NeedFlag::Needed => 1,
        }
    }
}

impl TryFrom<u8> for NeedFlag {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(NeedFlag::NotNeeded),
            1 => Ok(NeedFlag::Needed),
            other => Err(format!("need flag must be 0 or 1, got {other}")),
        }
    }
}

/// The free-text side of a prediction record.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OtherInformation {
    #[serde(rename = "Purpose", default)]
    pub purpose: String,
    #[serde(rename = "Thoughts", default)]
    pub thoughts: String,
    #[serde(rename = "Response", default)]
    pub response: String,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

/// One line of a prediction ledger.
///
/// `agent_response` is written as `null` when the agent stayed silent. The
/// `judgment` list follows the candidates in order and stops after the first
/// acceptance; for a silent prediction it may hold the verdict on the null
/// task. `task_status` (the task was executed) is always derived from the
/// judgments and never read from input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRecord {
    pub observation: Event,
    pub agent_response: Vec<String>,
    pub task_status: bool,
    pub other_information: OtherInformation,
    pub judgment: Vec<bool>,
}

impl PredictionRecord {
    pub fn new(observation: Event, prediction: &Prediction, judgments: &[Judgment]) -> Self {
        let agent_response: Vec<String> = prediction
            .candidates
            .iter()
            .map(|c| c.description().to_string())
            .collect();
        let judgment: Vec<bool> = judgments.iter().map(Judgment::is_accepted).collect();
        PredictionRecord {
            task_status: task_executed(&agent_response, &judgment),
            observation,
            agent_response,
            other_information: OtherInformation {
                purpose: prediction.purpose.clone(),
                thoughts: prediction.thoughts.clone(),
                response: prediction.response.clone(),
                extra: BTreeMap::new(),
            },
            judgment,
        }
    }

    pub fn predicted(&self) -> bool {
        !self.agent_response.is_empty()
    }

    pub fn prediction(&self) -> Prediction {
        Prediction {
            candidates: self
                .agent_response
                .iter()
                .filter_map(|s| TaskCandidate::new(s.clone()).ok())
                .collect(),
            purpose: self.other_information.purpose.clone(),
            thoughts: self.other_information.thoughts.clone(),
            response: self.other_information.response.clone(),
        }
    }

    fn check(&self) -> Result<(), TraceError> {
        if self.agent_response.iter().any(|s| s.trim().is_empty()) {
            return Err(TraceError::field("agent_response", "empty task description"));
        }
        if !self.agent_response.is_empty() && !self.judgment.is_empty() {
            let n = self.judgment.len();
            if n > self.agent_response.len() {
                return Err(TraceError::field(
                    "judgment",
                    "more judgments than proposed tasks",
                ));
            }
            if n < self.agent_response.len() && !self.judgment[n - 1] {
                return Err(TraceError::field(
                    "judgment",
                    "judgments stop early without an acceptance",
                ));
            }
            if self.judgment[..n - 1].iter().any(|j| *j) {
                return Err(TraceError::field(
                    "judgment",
                    "judgments continue past an acceptance",
                ));
            }
        }
        if self.agent_response.is_empty() && self.judgment.len() > 1 {
            return Err(TraceError::field(
                "judgment",
                "a silent prediction carries at most one judgment",
            ));
        }
        Ok(())
    }
}

fn task_executed(agent_response: &[String], judgment: &[bool]) -> bool {
    !agent_response.is_empty() && judgment.iter().any(|j| *j)
}

#[derive(Serialize)]
struct RecordOut<'a> {
    observation: &'a Event,
    agent_response: Option<&'a [String]>,
    task_status: bool,
    other_information: &'a OtherInformation,
    judgment: &'a [bool],
}

#[derive(Deserialize)]
struct RecordIn {
    observation: Event,
    #[serde(default)]
    agent_response: Option<Vec<String>>,
    #[serde(default)]
    #[allow(dead_code)]
    task_status: Option<bool>,
    #[serde(default, alias = "other_infomation")]
    other_information: OtherInformation,
    #[serde(default)]
    judgment: Vec<bool>,
}

impl Serialize for PredictionRecord {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        RecordOut {
            observation: &self.observation,
            agent_response: if self.agent_response.is_empty() {
                None
            } else {
                Some(&self.agent_response)
            },
            task_status: task_executed(&self.agent_response, &self.judgment),
            other_information: &self.other_information,
            judgment: &self.judgment,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PredictionRecord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RecordIn::deserialize(deserializer)?;
        let agent_response = raw.agent_response.unwrap_or_default();
        let record = PredictionRecord {
            task_status: task_executed(&agent_response, &raw.judgment),
            observation: raw.observation,
            agent_response,
            other_information: raw.other_information,
            judgment: raw.judgment,
        };
        record.check().map_err(D::Error::custom)?;
        Ok(record)
    }
}

/// Read a JSONL stream, skipping blank lines.
pub fn read_jsonl<T, R>(reader: R) -> Result<Vec<T>, TraceError>
where
    T: serde::de::DeserializeOwned,
    R: BufRead,
{
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| TraceError::Malformed(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| TraceError::Line {
            line: i + 1,
            source: Box::new(TraceError::Malformed(e.to_string())),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Write one compact JSON object per line, LF terminated.
pub fn write_jsonl<T, W>(mut writer: W, items: &[T]) -> std::io::Result<()>
where
    T: Serialize,
    W: Write,
{
    for item in items {
        let line = serde_json::to_string(item).map_err(std::io::Error::other)?;
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}
