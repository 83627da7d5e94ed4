//! Raw activity-monitor logs to merged segments to natural-language events.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{CallRole, ChatMessage, ChatRequest, Gateway, GatewayError};
use crate::prompts::PromptSet;
use crate::trace::{Event, Timestamp};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("raw input is not valid JSON: {0}")]
    Malformed(String),
    #[error("record {index}: {reason}")]
    Record { index: usize, reason: String },
    #[error("rendering segment {index}: {source}")]
    Render {
        index: usize,
        #[source]
        source: GatewayError,
    },
    #[error("rendering segment {index}: model returned empty text")]
    EmptyRender { index: usize },
    #[error("invalid redaction pattern `{pattern}`: {reason}")]
    Redaction { pattern: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivityStatus {
    Afk,
    NotAfk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputDevice {
    Mouse,
    Keyboard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputKind {
    #[serde(rename = "click")]
    Click,
    #[serde(rename = "input")]
    Input,
    #[serde(rename = "pressAndRelease")]
    PressAndRelease,
    #[serde(rename = "scroll")]
    Scroll,
    #[serde(rename = "other")]
    Other,
}

impl InputKind {
    fn parse(s: &str) -> InputKind {
        match s {
            "click" => InputKind::Click,
            "input" => InputKind::Input,
            "pressAndRelease" => InputKind::PressAndRelease,
            "scroll" => InputKind::Scroll,
            _ => InputKind::Other,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            InputKind::Click => "click",
            InputKind::Input => "input",
            InputKind::PressAndRelease => "pressAndRelease",
            InputKind::Scroll => "scroll",
            InputKind::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputAction {
    pub from: InputDevice,
    pub kind: InputKind,
    pub payload: String,
}

impl InputAction {
    /// Accepts both monitor shapes: `{"from", "type", "data": "text"}` and
    /// `{"from", "data": {"type", ...}}`.
    fn from_raw(value: &Value) -> Result<Self, String> {
        let obj = value.as_object().ok_or("input action is not an object")?;
        let from = match obj.get("from").and_then(Value::as_str) {
            Some("mouse") => InputDevice::Mouse,
            Some("keyboard") => InputDevice::Keyboard,
            Some(other) => return Err(format!("unknown input source `{other}`")),
            None => return Err("input action lacks `from`".into()),
        };
        let data = obj.get("data");
        let kind_str = obj
            .get("type")
            .and_then(Value::as_str)
            .or_else(|| data.and_then(|d| d.get("type")).and_then(Value::as_str));
        let kind = kind_str.map(InputKind::parse).unwrap_or(InputKind::Other);
        let payload = if kind == InputKind::Other {
            let mut rest = obj.clone();
            rest.remove("from");
            Value::Object(rest).to_string()
        } else {
            match data {
                Some(Value::String(s)) => s.clone(),
                Some(Value::Object(map)) => map
                    .iter()
                    .filter(|(k, _)| k.as_str() != "type")
                    .map(|(_, v)| match v {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(" "),
                Some(other) => other.to_string(),
                None => String::new(),
            }
        };
        Ok(InputAction {
            from,
            kind,
            payload,
        })
    }

    fn summary(&self) -> String {
        let device = match self.from {
            InputDevice::Mouse => "mouse",
            InputDevice::Keyboard => "keyboard",
        };
        match (self.kind, self.payload.is_empty()) {
            (_, true) => format!("{device} {}", self.kind.as_str()),
            (InputKind::Input, false) => format!("{device} input {:?}", self.payload),
            (kind, false) => format!("{device} {} ({})", kind.as_str(), self.payload),
        }
    }
}

/// One activity-monitor record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RawRecord {
    pub timestamp: Timestamp,
    /// Milliseconds.
    pub duration_ms: i64,
    pub user_input: Vec<InputAction>,
    pub status: ActivityStatus,
    pub app: String,
    pub events: Vec<String>,
    /// Fields the parser does not model, kept verbatim.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, Value>,
}

impl RawRecord {
    pub fn end(&self) -> Timestamp {
        self.timestamp.plus_millis(self.duration_ms)
    }

    fn from_value(value: &Value) -> Result<Self, String> {
        let obj = value.as_object().ok_or("record is not an object")?;
        let timestamp = match obj.get("timestamp") {
            Some(Value::Number(n)) => Timestamp::from_secs_f64(n.as_f64().ok_or("bad timestamp")?),
            Some(Value::String(s)) => Timestamp::parse_decimal(s)?,
            _ => return Err("missing or non-numeric `timestamp`".into()),
        };
        if !timestamp.is_positive() {
            return Err("`timestamp` must be > 0".into());
        }
        let duration = obj
            .get("duration")
            .and_then(Value::as_f64)
            .ok_or("missing or non-numeric `duration`")?;
        if duration.is_nan() || duration < 0.0 {
            return Err(format!("negative `duration` {duration}"));
        }
        let status = match obj.get("status").and_then(Value::as_str) {
            Some("afk") => ActivityStatus::Afk,
            Some("not-afk") | None => ActivityStatus::NotAfk,
            Some(other) => return Err(format!("unknown `status` `{other}`")),
        };
        let app = obj
            .get("app")
            .and_then(Value::as_str)
            .ok_or("missing `app`")?
            .to_string();
        let user_input = match obj.get("user_input") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(items)) => items
                .iter()
                .map(InputAction::from_raw)
                .collect::<Result<_, _>>()?,
            Some(_) => return Err("`user_input` is not a list".into()),
        };
        let events = match obj.get("events") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect(),
            Some(_) => return Err("`events` is not a list".into()),
        };
        let extra = obj
            .iter()
            .filter(|(k, _)| {
                !matches!(
                    k.as_str(),
                    "timestamp" | "duration" | "user_input" | "status" | "app" | "events"
                )
            })
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(RawRecord {
            timestamp,
            duration_ms: (duration * 1000.0).round() as i64,
            user_input,
            status,
            app,
            events,
            extra,
        })
    }
}

/// Parse a JSON array or JSONL stream of raw records, in file order.
pub fn parse_raw_trace(input: &[u8]) -> Result<Vec<RawRecord>, IngestError> {
    let text = std::str::from_utf8(input).map_err(|e| IngestError::Malformed(e.to_string()))?;
    let trimmed = text.trim_start();
    let values: Vec<Value> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed).map_err(|e| IngestError::Malformed(e.to_string()))?
    } else {
        trimmed
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(index, l)| {
                serde_json::from_str(l).map_err(|e| IngestError::Record {
                    index,
                    reason: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?
    };
    values
        .iter()
        .enumerate()
        .map(|(index, v)| RawRecord::from_value(v).map_err(|reason| IngestError::Record { index, reason }))
        .collect()
}

/// A run of same-app records merged into one logical unit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Segment {
    pub start: Timestamp,
    pub end: Timestamp,
    pub app: String,
    pub records: Vec<RawRecord>,
    pub action_summary: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub gap_threshold_secs: f64,
    pub max_span_secs: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            gap_threshold_secs: 5.0,
            max_span_secs: 600.0,
        }
    }
}

/// Drop `afk` records, then merge neighbours that share an app, follow each
/// other by less than the gap threshold and keep the segment within the
/// maximum span.
pub fn merge_segments(records: &[RawRecord], config: MergeConfig) -> Vec<Segment> {
    let gap_ms = (config.gap_threshold_secs * 1000.0).round() as i64;
    let span_ms = (config.max_span_secs * 1000.0).round() as i64;
    let mut active: Vec<&RawRecord> = records
        .iter()
        .filter(|r| r.status == ActivityStatus::NotAfk)
        .collect();
    active.sort_by_key(|r| r.timestamp);

    let mut groups: Vec<Vec<&RawRecord>> = Vec::new();
    for record in active {
        let joins = groups.last().is_some_and(|group| {
            let prev = group.last().expect("groups are never empty");
            let start = group[0].timestamp;
            let end = group.iter().map(|r| r.end()).max().expect("non-empty");
            let gap = record.timestamp.millis() - prev.end().millis();
            let span = end.max(record.end()).millis() - start.millis();
            prev.app == record.app && gap < gap_ms && span <= span_ms
        });
        if joins {
            groups.last_mut().expect("checked").push(record);
        } else {
            groups.push(vec![record]);
        }
    }

    groups
        .into_iter()
        .map(|group| {
            let records: Vec<RawRecord> = group.into_iter().cloned().collect();
            Segment {
                start: records[0].timestamp,
                end: records.iter().map(RawRecord::end).max().expect("non-empty"),
                app: records[0].app.clone(),
                action_summary: summarize_actions(&records),
                records,
            }
        })
        .collect()
}

/// Order-preserving textual flattening of a segment's input actions.
pub fn summarize_actions(records: &[RawRecord]) -> String {
    let parts: Vec<String> = records
        .iter()
        .flat_map(|r| {
            r.user_input
                .iter()
                .map(InputAction::summary)
                .chain(r.events.iter().map(|e| format!("event: {e}")))
        })
        .collect();
    if parts.is_empty() {
        "no input actions".to_string()
    } else {
        parts.join("; ")
    }
}

/// Masks sensitive keyboard text before it reaches a model.
#[derive(Debug, Clone, Default)]
pub struct Redactor {
    patterns: Vec<Regex>,
}

impl Redactor {
    pub const MASK: &'static str = "[REDACTED]";

    pub fn new<S: AsRef<str>>(patterns: &[S]) -> Result<Self, IngestError> {
        let patterns = patterns
            .iter()
            .map(|p| {
                Regex::new(p.as_ref()).map_err(|e| IngestError::Redaction {
                    pattern: p.as_ref().to_string(),
                    reason: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Redactor { patterns })
    }

    pub fn apply(&self, segments: &mut [Segment]) {
        if self.patterns.is_empty() {
            return;
        }
        for segment in segments.iter_mut() {
            for record in segment.records.iter_mut() {
                for action in record
                    .user_input
                    .iter_mut()
                    .filter(|a| a.from == InputDevice::Keyboard)
                {
                    for re in &self.patterns {
                        action.payload = re.replace_all(&action.payload, Redactor::MASK).into_owned();
                    }
                }
            }
            segment.action_summary = summarize_actions(&segment.records);
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderConfig {
    pub model_id: String,
    pub concurrency: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            model_id: "gpt-4o".into(),
            concurrency: 1,
        }
    }
}

fn render_request(segment: &Segment, prompts: &PromptSet, model_id: &str) -> ChatRequest {
    let payload = serde_json::json!({
        "app": segment.app,
        "start": segment.start,
        "end": segment.end,
        "actions": segment.action_summary,
    });
    ChatRequest::new(
        model_id,
        vec![
            ChatMessage::system(prompts.render_event.clone()),
            ChatMessage::user(serde_json::to_string_pretty(&payload).expect("serializes")),
        ],
    )
}

fn render_one(
    index: usize,
    segment: &Segment,
    gateway: &Gateway,
    prompts: &PromptSet,
    model_id: &str,
) -> Result<Event, IngestError> {
    let reply = gateway
        .chat(CallRole::Render, &render_request(segment, prompts, model_id))
        .map_err(|source| IngestError::Render { index, source })?;
    let text = reply.trim().trim_matches('"').trim();
    if text.is_empty() {
        return Err(IngestError::EmptyRender { index });
    }
    Event::environment(segment.start, text).map_err(|_| IngestError::EmptyRender { index })
}

/// One event per segment, at the segment's start time, in segment order.
pub fn render_events(
    segments: &[Segment],
    gateway: &Gateway,
    prompts: &PromptSet,
    config: &RenderConfig,
) -> Result<Vec<Event>, IngestError> {
    let workers = config.concurrency.clamp(1, segments.len().max(1));
    if workers == 1 {
        return segments
            .iter()
            .enumerate()
            .map(|(i, s)| render_one(i, s, gateway, prompts, &config.model_id))
            .collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Event, IngestError>>>> =
        Mutex::new((0..segments.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= segments.len() {
                    break;
                }
                let result = render_one(i, &segments[i], gateway, prompts, &config.model_id);
                slots.lock().unwrap()[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("every segment rendered"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::FixtureEntry;

    pub(crate) const APPENDIX_RAW: &str = r#"[{
        "timestamp": 1717335890.127, "duration": 2.056, "user_input": [],
        "status": "not-afk", "app": "web", "events": []
    },
    {
        "timestamp": 1717335893.215, "duration": 10.267,
        "user_input": [
            {"from": "mouse", "data": {"type": "click", "button": "left"}},
            {"from": "keyboard", "type": "input", "data": "swift ui ctrl_l liebiao "},
            {"from": "keyboard", "data": {"type": "pressAndRelease", "key": "enter"}}
        ],
        "status": "not-afk", "app": "web", "events": []
    },
    {
        "timestamp": 1717335904.513, "duration": 0.0, "user_input": [],
        "status": "not-afk", "app": "web", "events": []
    }]"#;

    fn rec(ts_ms: i64, dur_ms: i64, app: &str) -> RawRecord {
        RawRecord {
            timestamp: Timestamp::from_millis(ts_ms),
            duration_ms: dur_ms,
            user_input: vec![],
            status: ActivityStatus::NotAfk,
            app: app.into(),
            events: vec![],
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn parses_sample_records() {
        let records = parse_raw_trace(APPENDIX_RAW.as_bytes()).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].timestamp, Timestamp::from_millis(1_717_335_890_127));
        assert_eq!(records[1].duration_ms, 10_267);
        assert_eq!(
            records[1].user_input,
            vec![
                InputAction { from: InputDevice::Mouse, kind: InputKind::Click, payload: "left".into() },
                InputAction { from: InputDevice::Keyboard, kind: InputKind::Input, payload: "swift ui ctrl_l liebiao ".into() },
                InputAction { from: InputDevice::Keyboard, kind: InputKind::PressAndRelease, payload: "enter".into() },
            ]
        );
        assert!(records.iter().all(|r| r.app == "web"));
    }

    #[test]
    fn parse_edge_cases() {
        assert!(parse_raw_trace(b"[]").unwrap().is_empty());
        let err = parse_raw_trace(br#"[{"timestamp": 5, "duration": -1, "app": "web"}]"#).unwrap_err();
        assert!(matches!(err, IngestError::Record { index: 0, .. }), "{err}");
        let jsonl = b"{\"timestamp\": 5, \"duration\": 1, \"app\": \"a\", \"title\": \"x\"}\n\n{\"timestamp\": 7, \"duration\": 0, \"app\": \"b\"}\n";
        let recs = parse_raw_trace(jsonl).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].extra.get("title"), Some(&Value::from("x")));
        let err = parse_raw_trace(b"{\"timestamp\": 5, \"duration\": 1, \"app\": \"a\"}\n{oops").unwrap_err();
        assert!(matches!(err, IngestError::Record { index: 1, .. }));
    }

    #[test]
    fn unknown_input_kind_keeps_payload() {
        let v: Value = serde_json::from_str(r#"{"from":"mouse","data":{"type":"drag","dx":3}}"#).unwrap();
        let a = InputAction::from_raw(&v).unwrap();
        assert_eq!(a.kind, InputKind::Other);
        assert!(a.payload.contains("drag") && a.payload.contains("dx"));
        let bad: Value = serde_json::from_str(r#"{"from":"pen","type":"click"}"#).unwrap();
        assert!(InputAction::from_raw(&bad).is_err());
    }

    #[test]
    fn sample_merges_into_one_segment() {
        let records = parse_raw_trace(APPENDIX_RAW.as_bytes()).unwrap();
        let segments = merge_segments(&records, MergeConfig::default());
        assert_eq!(segments.len(), 1);
        assert_eq!(segments[0].start.to_string(), "1717335890.127");
        assert_eq!(segments[0].end.to_string(), "1717335904.513");
        assert_eq!(
            segments[0].action_summary,
            "mouse click (left); keyboard input \"swift ui ctrl_l liebiao \"; keyboard pressAndRelease (enter)"
        );
    }

    #[test]
    fn app_change_and_gap_split() {
        let s = merge_segments(&[rec(1000, 1000, "web"), rec(2500, 0, "Code.exe")], MergeConfig::default());
        assert_eq!(s.len(), 2);
        let s = merge_segments(&[rec(1000, 0, "web"), rec(11_000, 0, "web")], MergeConfig::default());
        assert_eq!(s.len(), 2);
        // exactly at threshold splits (strict inequality)
        let s = merge_segments(&[rec(1000, 0, "web"), rec(6000, 0, "web")], MergeConfig::default());
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn span_limit_and_afk_drop() {
        let cfg = MergeConfig { gap_threshold_secs: 5.0, max_span_secs: 10.0 };
        let s = merge_segments(&[rec(1000, 4000, "a"), rec(6000, 4000, "a"), rec(10_500, 2000, "a")], cfg);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].records.len(), 2);
        let mut afk = rec(3000, 0, "a");
        afk.status = ActivityStatus::Afk;
        let s = merge_segments(&[rec(1000, 0, "a"), afk], MergeConfig::default());
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].records.len(), 1);
    }

    #[test]
    fn unsorted_input_is_sorted() {
        let s = merge_segments(&[rec(3000, 0, "a"), rec(1000, 0, "a")], MergeConfig::default());
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].start, Timestamp::from_millis(1000));
    }

    #[test]
    fn redaction_masks_keyboard_text() {
        let records = parse_raw_trace(APPENDIX_RAW.as_bytes()).unwrap();
        let mut segments = merge_segments(&records, MergeConfig::default());
        Redactor::new(&["swift"]).unwrap().apply(&mut segments);
        assert!(segments[0].action_summary.contains("[REDACTED] ui"));
        assert!(Redactor::new(&["("]).is_err());
    }

    #[test]
    fn render_passes_model_text_through() {
        let records = parse_raw_trace(APPENDIX_RAW.as_bytes()).unwrap();
        let segments = merge_segments(&records, MergeConfig::default());
        let text = "The user searched for 'swift ui' in the web browser and pressed 'Enter'.";
        let gw = Gateway::scripted(vec![FixtureEntry::any(text)]);
        let events = render_events(&segments, &gw, &PromptSet::default(), &RenderConfig::default()).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].text, text);
        assert_eq!(events[0].time, segments[0].start);
        assert!(render_events(&[], &gw, &PromptSet::default(), &RenderConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn render_errors_carry_segment_index() {
        let segs = merge_segments(&[rec(1000, 0, "a"), rec(2000, 0, "b")], MergeConfig::default());
        let gw = Gateway::scripted(vec![FixtureEntry::any("ok"), FixtureEntry::any("   ")]);
        let err = render_events(&segs, &gw, &PromptSet::default(), &RenderConfig::default()).unwrap_err();
        assert!(matches!(err, IngestError::EmptyRender { index: 1 }));
        let gw = Gateway::scripted(vec![FixtureEntry::any("ok")]);
        let err = render_events(&segs, &gw, &PromptSet::default(), &RenderConfig::default()).unwrap_err();
        assert!(matches!(err, IngestError::Render { index: 1, .. }));
    }

    #[test]
    fn concurrent_render_keeps_order() {
        let segs: Vec<Segment> = merge_segments(
            &(0..6).map(|i| rec(1000 + i * 100_000, 0, "a")).collect::<Vec<_>>(),
            MergeConfig::default(),
        );
        assert_eq!(segs.len(), 6);
        // keyed fixtures make assignment independent of scheduling
        let prompts = PromptSet::default();
        let entries = segs
            .iter()
            .enumerate()
            .map(|(i, s)| FixtureEntry::keyed(render_request(s, &prompts, "gpt-4o").digest(), format!("event {i}")))
            .collect();
        let gw = Gateway::scripted(entries);
        let cfg = RenderConfig { concurrency: 4, ..RenderConfig::default() };
        let events = render_events(&segs, &gw, &prompts, &cfg).unwrap();
        for (i, (e, s)) in events.iter().zip(&segs).enumerate() {
            assert_eq!(e.text, format!("event {i}"));
            assert_eq!(e.time, s.start);
        }
    }
}
