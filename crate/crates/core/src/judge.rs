//! The user side of the loop: reward-model judging, the outcome rule,
//! label-target selection and the human annotation protocol (three
//! annotators, accept / reject / reject-all, majority voting).

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{
    cosine_distance, request_structured, to_pretty_json, CallRole, ChatMessage, ChatRequest,
    EmbeddingVector, Gateway, GatewayError, Refusal, StructuredError,
};
use crate::prompts::{fill, PromptSet};
use crate::trace::{Decision, Event, Judgment, NeedFlag, Prediction, TaskCandidate, Trace};

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge call failed: {0}")]
    Gateway(#[from] GatewayError),
    #[error("judge reply rejected: {reason}")]
    Reply { reason: String, raw: String },
    #[error("outcome contract violated: {0}")]
    Contract(&'static str),
    #[error("label-target selection: {0}")]
    Selection(String),
    #[error("item {item_id}: {reason}")]
    Vote { item_id: String, reason: String },
}

impl From<StructuredError> for JudgeError {
    fn from(e: StructuredError) -> Self {
        match e {
            StructuredError::Gateway(g) => JudgeError::Gateway(g),
            StructuredError::Invalid { reason, raw } => JudgeError::Reply { reason, raw },
        }
    }
}

pub const JUDGE_INSTRUCTION: &str =
    "Now give your judgment. You should complete the reasoning process in the first person.";

/// Case-insensitive, surrounding punctuation ignored.
pub fn normalize_decision(raw: &str) -> Option<Decision> {
    let cleaned = raw
        .trim()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_ascii_lowercase();
    match cleaned.as_str() {
        "accepted" => Some(Decision::Accepted),
        "rejected" => Some(Decision::Rejected),
        _ => None,
    }
}

fn parse_judgment(value: &Value) -> Result<Judgment, Refusal> {
    let raw = value
        .get("judgment")
        .or_else(|| value.get("judgement"))
        .ok_or_else(|| Refusal::Retry("missing `judgment`".into()))?;
    let raw = raw
        .as_str()
        .ok_or_else(|| Refusal::Retry("`judgment` is not a string".into()))?;
    let decision = normalize_decision(raw)
        .ok_or_else(|| Refusal::Fatal(format!("judgment `{raw}` is neither accepted nor rejected")))?;
    let thought = value
        .get("thought")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    Ok(Judgment { thought, decision })
}

/// The reward-model input: observations in ascending time plus the
/// proposed task (`null` for silence).
pub fn judgment_input(window: &Trace, task: Option<&TaskCandidate>) -> String {
    #[derive(Serialize)]
    struct Input<'a> {
        #[serde(rename = "Observations (Time Ascending)")]
        observations: Vec<&'a Event>,
        #[serde(rename = "Proposed Task")]
        proposed_task: Option<&'a str>,
        #[serde(rename = "Instruction")]
        instruction: &'static str,
    }
    let mut observations: Vec<&Event> = window.events.iter().collect();
    observations.sort_by_key(|e| e.time);
    to_pretty_json(&Input {
        observations,
        proposed_task: task.map(TaskCandidate::description),
        instruction: JUDGE_INSTRUCTION,
    })
}

/// Reward-model judge.
#[derive(Debug, Clone)]
pub struct Judge {
    pub model_id: String,
    pub temperature: f64,
    prompts: Arc<PromptSet>,
}

impl Judge {
    pub fn new(model_id: impl Into<String>, prompts: Arc<PromptSet>) -> Self {
        Judge {
            model_id: model_id.into(),
            temperature: 0.0,
            prompts,
        }
    }

    pub fn request(&self, window: &Trace, task: Option<&TaskCandidate>) -> ChatRequest {
        ChatRequest::new(
            self.model_id.clone(),
            vec![
                ChatMessage::system(self.prompts.judge.clone()),
                ChatMessage::user(judgment_input(window, task)),
            ],
        )
        .with_temperature(self.temperature)
    }

    /// Judge one proposed task, or the null task when `task` is `None`.
    pub fn judge(
        &self,
        window: &Trace,
        task: Option<&TaskCandidate>,
        gateway: &Gateway,
    ) -> Result<Judgment, JudgeError> {
        let req = self.request(window, task);
        Ok(request_structured(gateway, CallRole::Judge, &req, parse_judgment)?)
    }

    /// Judge each candidate in order, stopping at the first acceptance.
    /// A silent prediction is judged as the null task.
    pub fn judge_prediction(
        &self,
        window: &Trace,
        prediction: &Prediction,
        gateway: &Gateway,
    ) -> Result<Vec<Judgment>, JudgeError> {
        if prediction.is_silent() {
            return Ok(vec![self.judge(window, None, gateway)?]);
        }
        let mut out = Vec::with_capacity(prediction.candidates.len());
        for candidate in &prediction.candidates {
            let j = self.judge(window, Some(candidate), gateway)?;
            let accepted = j.is_accepted();
            out.push(j);
            if accepted {
                break;
            }
        }
        Ok(out)
    }
}

/// R_t: 1 for an accepted proposal or a correct silence, 0 otherwise.
///
/// A judgment is required exactly when the prediction proposes something and
/// a need flag exactly when it is silent.
pub fn outcome(
    predicted: bool,
    judgment: Option<Decision>,
    need: Option<NeedFlag>,
) -> Result<u8, JudgeError> {
    match (predicted, judgment, need) {
        (true, Some(d), None) => Ok(d.is_accepted() as u8),
        (false, None, Some(n)) => Ok((!n.is_needed()) as u8),
        (true, None, _) => Err(JudgeError::Contract("a proposed task needs a judgment")),
        (true, Some(_), Some(_)) => Err(JudgeError::Contract(
            "the need flag only applies to silent predictions",
        )),
        (false, Some(_), _) => Err(JudgeError::Contract(
            "a silent prediction is scored by the need flag",
        )),
        (false, None, None) => Err(JudgeError::Contract("a silent prediction needs a need flag")),
    }
}

/// Convenience wrapper over [`outcome`] for a [`Prediction`].
pub fn prediction_outcome(
    p: &Prediction,
    j: Option<&Judgment>,
    need: Option<NeedFlag>,
) -> Result<u8, JudgeError> {
    outcome(!p.is_silent(), j.map(|j| j.decision), need)
}

pub const MAX_LABEL_CANDIDATES: usize = 16;
const TIE_TOLERANCE: f64 = 1e-12;

/// Choose the `min(k, n)` candidates whose pairwise cosine distances sum to
/// the minimum, by exhaustive enumeration. Ties go to the lexicographically
/// smallest index set.
pub fn select_label_targets(
    candidates: &[TaskCandidate],
    embeddings: &[EmbeddingVector],
    k: usize,
) -> Result<Vec<usize>, JudgeError> {
    let n = candidates.len();
    if embeddings.len() != n {
        return Err(JudgeError::Selection(format!(
            "{n} candidates but {} embeddings",
            embeddings.len()
        )));
    }
    if k == 0 {
        return Err(JudgeError::Selection("k must be at least 1".into()));
    }
    if n > MAX_LABEL_CANDIDATES {
        return Err(JudgeError::Selection(format!(
            "at most {MAX_LABEL_CANDIDATES} candidates, got {n}"
        )));
    }
    let k = k.min(n);
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut dist = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = cosine_distance(&embeddings[i], &embeddings[j])
                .map_err(|e| JudgeError::Selection(e.to_string()))?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let total = |idx: &[usize]| -> f64 {
        let mut sum = 0.0;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                sum += dist[i][j];
            }
        }
        sum
    };
    // lexicographic enumeration; only a strictly better total replaces the best
    let mut idx: Vec<usize> = (0..k).collect();
    let mut best = idx.clone();
    let mut best_total = total(&idx);
    while let Some(pos) = (0..k).rev().find(|&p| idx[p] < n - k + p) {
        idx[pos] += 1;
        for p in pos + 1..k {
            idx[p] = idx[p - 1] + 1;
        }
        let t = total(&idx);
        if t < best_total - TIE_TOLERANCE {
            best_total = t;
            best.clone_from(&idx);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteChoice {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ballot {
    PerCandidate(Vec<VoteChoice>),
    RejectAll,
}

/// One annotator's decision on an item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationVote {
    pub annotator_id: String,
    pub ballot: Ballot,
}

impl AnnotationVote {
    pub fn per_candidate(annotator_id: impl Into<String>, choices: Vec<VoteChoice>) -> Self {
        AnnotationVote {
            annotator_id: annotator_id.into(),
            ballot: Ballot::PerCandidate(choices),
        }
    }

    pub fn reject_all(annotator_id: impl Into<String>) -> Self {
        AnnotationVote {
            annotator_id: annotator_id.into(),
            ballot: Ballot::RejectAll,
        }
    }

    pub fn is_reject_all(&self) -> bool {
        self.ballot == Ballot::RejectAll
    }

    /// The vote this annotator effectively cast on candidate `i`.
    pub fn effective(&self, i: usize) -> VoteChoice {
        match &self.ballot {
            Ballot::RejectAll => VoteChoice::Reject,
            Ballot::PerCandidate(v) => v.get(i).copied().unwrap_or(VoteChoice::Reject),
        }
    }

    pub fn check(&self, candidate_count: usize) -> Result<(), String> {
        if self.annotator_id.trim().is_empty() {
            return Err("annotator_id is empty".into());
        }
        if let Ballot::PerCandidate(v) = &self.ballot {
            if v.len() != candidate_count {
                return Err(format!(
                    "expected {candidate_count} per-candidate choices, got {}",
                    v.len()
                ));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct VoteWire {
    annotator_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    per_candidate: Option<Vec<VoteChoice>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    reject_all: bool,
}

impl Serialize for AnnotationVote {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let (per_candidate, reject_all) = match &self.ballot {
            Ballot::PerCandidate(v) => (Some(v.clone()), false),
            Ballot::RejectAll => (None, true),
        };
        VoteWire {
            annotator_id: self.annotator_id.clone(),
            per_candidate,
            reject_all,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for AnnotationVote {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let w = VoteWire::deserialize(deserializer)?;
        let ballot = match (w.per_candidate, w.reject_all) {
            (Some(v), false) => Ballot::PerCandidate(v),
            (None, true) => Ballot::RejectAll,
            (Some(_), true) => {
                return Err(D::Error::custom(
                    "a vote carries either per_candidate or reject_all, not both",
                ))
            }
            (None, false) => {
                return Err(D::Error::custom("a vote needs per_candidate or reject_all"))
            }
        };
        Ok(AnnotationVote {
            annotator_id: w.annotator_id,
            ballot,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub labels: Vec<Decision>,
    pub need: NeedFlag,
}

pub const MAX_ITEM_CANDIDATES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationItem {
    pub item_id: String,
    pub trace_window: Trace,
    pub candidates: Vec<TaskCandidate>,
    #[serde(default)]
    pub votes: Vec<AnnotationVote>,
    #[serde(default)]
    pub resolved: Option<Resolution>,
    /// Which model proposed each candidate; never shown to annotators.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidate_models: Vec<String>,
}

impl AnnotationItem {
    pub fn new(item_id: impl Into<String>, trace_window: Trace, candidates: Vec<TaskCandidate>) -> Self {
        AnnotationItem {
            item_id: item_id.into(),
            trace_window,
            candidates,
            votes: Vec::new(),
            resolved: None,
            candidate_models: Vec::new(),
        }
    }

    pub fn check(&self) -> Result<(), JudgeError> {
        let err = |reason: String| JudgeError::Vote {
            item_id: self.item_id.clone(),
            reason,
        };
        if self.candidates.len() > MAX_ITEM_CANDIDATES {
            return Err(err(format!(
                "{} candidates exceeds the limit of {MAX_ITEM_CANDIDATES}",
                self.candidates.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for v in &self.votes {
            v.check(self.candidates.len()).map_err(&err)?;
            if !seen.insert(v.annotator_id.as_str()) {
                return Err(err(format!("duplicate vote by `{}`", v.annotator_id)));
            }
        }
        Ok(())
    }

    pub fn has_vote_from(&self, annotator_id: &str) -> bool {
        self.votes.iter().any(|v| v.annotator_id == annotator_id)
    }
}

/// How to set N_t when every candidate is rejected but reject-all did not
/// win a majority.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MixedNeedPolicy {
    #[default]
    Needed,
    NotNeeded,
}

/// Resolve an item: per-candidate strict majority, reject-all counting as a
/// reject on every candidate, and N_t from the labels.
pub fn majority_vote(item: &AnnotationItem, policy: MixedNeedPolicy) -> Result<Resolution, JudgeError> {
    item.check()?;
    let n = item.votes.len();
    if n < 3 || n.is_multiple_of(2) {
        return Err(JudgeError::Vote {
            item_id: item.item_id.clone(),
            reason: format!("needs an odd number of at least 3 votes, got {n}"),
        });
    }
    let labels: Vec<Decision> = (0..item.candidates.len())
        .map(|i| {
            let accepts = item
                .votes
                .iter()
                .filter(|v| v.effective(i) == VoteChoice::Accept)
                .count();
            Decision::from_accepted(2 * accepts > n)
        })
        .collect();
    let need = if labels.iter().any(|d| d.is_accepted()) {
        NeedFlag::Needed
    } else if 2 * item.votes.iter().filter(|v| v.is_reject_all()).count() > n {
        NeedFlag::NotNeeded
    } else {
        match policy {
            MixedNeedPolicy::Needed => NeedFlag::Needed,
            MixedNeedPolicy::NotNeeded => NeedFlag::NotNeeded,
        }
    };
    Ok(Resolution { labels, need })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementSummary {
    /// Number of (item, candidate) labels with at least two votes.
    pub labels: usize,
    pub unanimous: Option<f64>,
    pub pairwise: Option<f64>,
}

/// Annotator agreement over (item, candidate) labels, reported two ways:
/// the share of unanimous labels and the mean pairwise agreement.
pub fn annotator_agreement(items: &[AnnotationItem]) -> AgreementSummary {
    let mut labels = 0usize;
    let mut unanimous = 0usize;
    let mut pair_total = 0usize;
    let mut pair_agree = 0usize;
    for item in items.iter().filter(|i| i.votes.len() >= 2) {
        for c in 0..item.candidates.len() {
            let votes: Vec<VoteChoice> = item.votes.iter().map(|v| v.effective(c)).collect();
            labels += 1;
            if votes.iter().all(|v| *v == votes[0]) {
                unanimous += 1;
            }
            for a in 0..votes.len() {
                for b in a + 1..votes.len() {
                    pair_total += 1;
                    pair_agree += (votes[a] == votes[b]) as usize;
                }
            }
        }
    }
    AgreementSummary {
        labels,
        unanimous: (labels > 0).then(|| unanimous as f64 / labels as f64),
        pairwise: (pair_total > 0).then(|| pair_agree as f64 / pair_total as f64),
    }
}

/// Reward-model training row in the judge's reply schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub item_id: String,
    pub observations: Vec<Event>,
    pub proposed_task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thought: Option<String>,
    pub judgment: Decision,
    pub need: NeedFlag,
}

/// One row per resolved candidate plus one row for the null task, which is
/// accepted exactly when no help was needed. Unresolved items are skipped.
pub fn export_rows(items: &[AnnotationItem]) -> Vec<TrainingRow> {
    let mut rows = Vec::new();
    for item in items {
        let Some(res) = &item.resolved else { continue };
        let mut observations = item.trace_window.events.clone();
        observations.sort_by_key(|e| e.time);
        for (cand, label) in item.candidates.iter().zip(&res.labels) {
            rows.push(TrainingRow {
                item_id: item.item_id.clone(),
                observations: observations.clone(),
                proposed_task: Some(cand.description().to_string()),
                thought: None,
                judgment: *label,
                need: res.need,
            });
        }
        rows.push(TrainingRow {
            item_id: item.item_id.clone(),
            observations,
            proposed_task: None,
            thought: None,
            judgment: Decision::from_accepted(!res.need.is_needed()),
            need: res.need,
        });
    }
    rows
}

/// Rebuild resolved items from exported rows, with three synthetic
/// annotators whose unanimous votes reproduce each item's labels.
pub fn items_from_rows(rows: &[TrainingRow]) -> Vec<AnnotationItem> {
    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<String, Vec<&TrainingRow>> = BTreeMap::new();
    for row in rows {
        if !grouped.contains_key(&row.item_id) {
            order.push(row.item_id.clone());
        }
        grouped.entry(row.item_id.clone()).or_default().push(row);
    }
    order
        .into_iter()
        .map(|id| {
            let rows = &grouped[&id];
            let task_rows: Vec<&&TrainingRow> =
                rows.iter().filter(|r| r.proposed_task.is_some()).collect();
            let candidates: Vec<TaskCandidate> = task_rows
                .iter()
                .filter_map(|r| TaskCandidate::new(r.proposed_task.clone().unwrap_or_default()).ok())
                .collect();
            let labels: Vec<Decision> = task_rows.iter().map(|r| r.judgment).collect();
            let need = rows[0].need;
            let all_rejected = labels.iter().all(|d| !d.is_accepted());
            let votes = (1..=3)
                .map(|a| {
                    let annotator = format!("import-{a}");
                    if all_rejected && !need.is_needed() {
                        AnnotationVote::reject_all(annotator)
                    } else {
                        AnnotationVote::per_candidate(
                            annotator,
                            labels
                                .iter()
                                .map(|d| if d.is_accepted() { VoteChoice::Accept } else { VoteChoice::Reject })
                                .collect(),
                        )
                    }
                })
                .collect();
            let mut item = AnnotationItem::new(id, Trace::new(rows[0].observations.clone()), candidates);
            item.votes = votes;
            item.resolved = Some(Resolution { labels, need });
            item
        })
        .collect()
}

/// Ask a model for a first-person explanation of a row's judgment.
pub fn explain_row(
    row: &TrainingRow,
    gateway: &Gateway,
    model_id: &str,
    prompts: &PromptSet,
) -> Result<String, JudgeError> {
    let system = fill(&prompts.explain, &[("decision", &row.judgment.to_string())]);
    let window = Trace::new(row.observations.clone());
    let task = row
        .proposed_task
        .as_ref()
        .and_then(|t| TaskCandidate::new(t.clone()).ok());
    let req = ChatRequest::new(
        model_id,
        vec![
            ChatMessage::system(system),
            ChatMessage::user(judgment_input(&window, task.as_ref())),
        ],
    );
    Ok(request_structured(gateway, CallRole::Explain, &req, |v| {
        v.get("thought")
            .and_then(Value::as_str)
            .filter(|s| !s.trim().is_empty())
            .map(str::to_string)
            .ok_or_else(|| Refusal::Retry("missing `thought`".into()))
    })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::FixtureEntry;
    use crate::trace::Timestamp;

    fn cand(s: &str) -> TaskCandidate {
        TaskCandidate::new(s).unwrap()
    }

    fn unit(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalized(v.to_vec()).unwrap()
    }

    fn judge() -> Judge {
        Judge::new("reward-model", Arc::new(PromptSet::default()))
    }

    fn remote_working_trace() -> Trace {
        let rows = [
            ("1717342908.098", "The user searched for 'remote working software' in the web browser and pressed 'Enter'."),
            ("1717342914.314", "A new tab titled 'new Tab' was opened in the web browser."),
            ("1717342940.516", "The user opened a search result with the title 'remote working software - search' on Bing."),
            ("1717342956.012", "The user switched to another tab in the web browser, interacting with multiple scroll actions."),
            ("1717343061.447", "The user resumed browsing on Bing search."),
            ("1717343082.081", "The user continued exploring search result pages in Bing with multiple scrolling actions and clicking on specific results."),
        ];
        Trace::new(
            rows.iter()
                .map(|(t, e)| Event::environment(Timestamp::parse_decimal(t).unwrap(), *e).unwrap())
                .collect(),
        )
    }

    #[test]
    fn judge_input_matches_reference_layout() {
        let input = judgment_input(&remote_working_trace(), None);
        assert!(input.starts_with("{\n    \"Observations (Time Ascending)\": [\n        {\n            \"time\": \"1717342908.098\","));
        assert!(input.contains("\"Proposed Task\": null"));
        assert!(input.contains(JUDGE_INSTRUCTION));
    }

    #[test]
    fn judge_parses_reference_output() {
        let reply = r#"{
    "thought": "I have been browsing the web and switching between different applications, and I haven't received any task proposal from the proactive assistant.",
    "judgment": "accepted"
}"#;
        let gw = Gateway::scripted(vec![FixtureEntry::any(reply)]);
        let j = judge().judge(&remote_working_trace(), None, &gw).unwrap();
        assert_eq!(j.decision, Decision::Accepted);
        assert!(j.thought.starts_with("I have been browsing the web"));
    }

    #[test]
    fn judge_normalizes_case_and_rejects_unknown() {
        let gw = Gateway::scripted(vec![FixtureEntry::any(r#"{"judgment":"Rejected"}"#)]);
        assert_eq!(judge().judge(&Trace::default(), None, &gw).unwrap().decision, Decision::Rejected);
        let gw = Gateway::scripted(vec![FixtureEntry::any(r#"{"judgment":"maybe"}"#)]);
        assert!(matches!(judge().judge(&Trace::default(), None, &gw), Err(JudgeError::Reply { .. })));
        assert_eq!(normalize_decision(" 'ACCEPTED'. "), Some(Decision::Accepted));
        assert_eq!(normalize_decision("accept"), None);
    }

    #[test]
    fn judge_reprompts_once_on_garbage() {
        let gw = Gateway::scripted(vec![
            FixtureEntry::any("I think yes"),
            FixtureEntry::any(r#"{"thought":"t","judgement":"accepted"}"#),
        ]);
        assert!(judge().judge(&Trace::default(), Some(&cand("x")), &gw).unwrap().is_accepted());
        let gw = Gateway::scripted(vec![FixtureEntry::any("nope"), FixtureEntry::any("still nope")]);
        assert!(judge().judge(&Trace::default(), None, &gw).is_err());
    }

    #[test]
    fn judge_prediction_short_circuits() {
        let gw = Gateway::scripted(vec![
            FixtureEntry::any(r#"{"judgment":"rejected"}"#),
            FixtureEntry::any(r#"{"judgment":"accepted"}"#),
        ]);
        let p = Prediction {
            candidates: vec![cand("a"), cand("b"), cand("c")],
            ..Prediction::default()
        };
        let js = judge().judge_prediction(&Trace::default(), &p, &gw).unwrap();
        assert_eq!(js.len(), 2);
        assert_eq!(gw.call_counts()[&CallRole::Judge], 2);
    }

    #[test]
    fn outcome_branches() {
        assert_eq!(outcome(false, None, Some(NeedFlag::NotNeeded)).unwrap(), 1);
        assert_eq!(outcome(false, None, Some(NeedFlag::Needed)).unwrap(), 0);
        assert_eq!(outcome(true, Some(Decision::Accepted), None).unwrap(), 1);
        assert_eq!(outcome(true, Some(Decision::Rejected), None).unwrap(), 0);
        assert!(outcome(true, None, None).is_err());
        assert!(outcome(false, Some(Decision::Accepted), Some(NeedFlag::Needed)).is_err());
        assert!(outcome(false, None, None).is_err());
        assert!(outcome(true, Some(Decision::Accepted), Some(NeedFlag::Needed)).is_err());
    }

    #[test]
    fn selection_examples() {
        let cands: Vec<_> = (0..5).map(|i| cand(&format!("c{i}"))).collect();
        let embs: Vec<_> = (0..5).map(|i| unit(&[1.0, i as f64])).collect();
        assert_eq!(select_label_targets(&cands, &embs, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_label_targets(&cands, &embs, 9).unwrap().len(), 5);

        let v = unit(&[1.0, 0.0, 0.0]);
        let w = unit(&[0.0, 1.0, 0.0]);
        let x = unit(&[0.0, 0.0, 1.0]);
        let embs = vec![v.clone(), v, w, x];
        let cands: Vec<_> = (0..4).map(|i| cand(&format!("c{i}"))).collect();
        assert_eq!(select_label_targets(&cands, &embs, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn selection_errors_and_ties() {
        let c2 = vec![cand("a"), cand("b")];
        assert!(select_label_targets(&c2, &[unit(&[1.0])], 1).is_err());
        assert!(select_label_targets(&c2, &[unit(&[1.0]), unit(&[1.0])], 0).is_err());
        assert!(select_label_targets(&c2, &[unit(&[1.0]), unit(&[1.0, 0.0])], 2).is_err());
        // all identical: every subset ties, smallest index set wins
        let cands: Vec<_> = (0..6).map(|i| cand(&format!("c{i}"))).collect();
        let embs = vec![unit(&[1.0, 1.0]); 6];
        assert_eq!(select_label_targets(&cands, &embs, 3).unwrap(), vec![0, 1, 2]);
        assert!(select_label_targets(&[], &[], 3).unwrap().is_empty());
    }

    fn item(n_cands: usize, votes: Vec<AnnotationVote>) -> AnnotationItem {
        let mut it = AnnotationItem::new(
            "i1",
            Trace::default(),
            (0..n_cands).map(|i| cand(&format!("task {i}"))).collect(),
        );
        it.votes = votes;
        it
    }

    use VoteChoice::{Accept as A, Reject as R};

    #[test]
    fn majority_examples() {
        let it = item(1, vec![
            AnnotationVote::per_candidate("a", vec![A]),
            AnnotationVote::per_candidate("b", vec![A]),
            AnnotationVote::per_candidate("c", vec![R]),
        ]);
        let r = majority_vote(&it, MixedNeedPolicy::default()).unwrap();
        assert_eq!(r, Resolution { labels: vec![Decision::Accepted], need: NeedFlag::Needed });

        let it = item(3, vec![AnnotationVote::reject_all("a"), AnnotationVote::reject_all("b"), AnnotationVote::reject_all("c")]);
        let r = majority_vote(&it, MixedNeedPolicy::default()).unwrap();
        assert_eq!(r.labels, vec![Decision::Rejected; 3]);
        assert_eq!(r.need, NeedFlag::NotNeeded);

        let it = item(1, vec![
            AnnotationVote::per_candidate("a", vec![A]),
            AnnotationVote::per_candidate("b", vec![R]),
            AnnotationVote::per_candidate("c", vec![R]),
        ]);
        let r = majority_vote(&it, MixedNeedPolicy::default()).unwrap();
        assert_eq!(r, Resolution { labels: vec![Decision::Rejected], need: NeedFlag::Needed });
        assert_eq!(majority_vote(&it, MixedNeedPolicy::NotNeeded).unwrap().need, NeedFlag::NotNeeded);
    }

    #[test]
    fn reject_all_counts_against_every_candidate() {
        let it = item(2, vec![
            AnnotationVote::per_candidate("a", vec![A, R]),
            AnnotationVote::per_candidate("b", vec![A, A]),
            AnnotationVote::reject_all("c"),
        ]);
        let r = majority_vote(&it, MixedNeedPolicy::default()).unwrap();
        assert_eq!(r.labels, vec![Decision::Accepted, Decision::Rejected]);
        assert_eq!(r.need, NeedFlag::Needed);
    }

    #[test]
    fn majority_input_errors() {
        let two = item(1, vec![AnnotationVote::per_candidate("a", vec![A]), AnnotationVote::per_candidate("b", vec![A])]);
        assert!(majority_vote(&two, MixedNeedPolicy::default()).is_err());
        let dup = item(1, vec![
            AnnotationVote::per_candidate("a", vec![A]),
            AnnotationVote::per_candidate("a", vec![A]),
            AnnotationVote::per_candidate("c", vec![A]),
        ]);
        assert!(majority_vote(&dup, MixedNeedPolicy::default()).is_err());
        let four = item(1, (0..4).map(|i| AnnotationVote::per_candidate(format!("a{i}"), vec![A])).collect());
        assert!(majority_vote(&four, MixedNeedPolicy::default()).is_err());
        let short = item(2, (0..3).map(|i| AnnotationVote::per_candidate(format!("a{i}"), vec![A])).collect());
        assert!(majority_vote(&short, MixedNeedPolicy::default()).is_err());
        let six = item(6, vec![]);
        assert!(six.check().is_err());
    }

    #[test]
    fn vote_wire_format() {
        let v: AnnotationVote = serde_json::from_str(r#"{"annotator_id":"x","per_candidate":["accept","reject"]}"#).unwrap();
        assert_eq!(v, AnnotationVote::per_candidate("x", vec![A, R]));
        let v: AnnotationVote = serde_json::from_str(r#"{"annotator_id":"x","reject_all":true}"#).unwrap();
        assert!(v.is_reject_all());
        assert_eq!(serde_json::to_string(&v).unwrap(), r#"{"annotator_id":"x","reject_all":true}"#);
        assert!(serde_json::from_str::<AnnotationVote>(r#"{"annotator_id":"x"}"#).is_err());
        assert!(serde_json::from_str::<AnnotationVote>(r#"{"annotator_id":"x","per_candidate":[],"reject_all":true}"#).is_err());
    }

    #[test]
    fn agreement_examples() {
        let same = item(2, (0..3).map(|i| AnnotationVote::per_candidate(format!("a{i}"), vec![A, R])).collect());
        let s = annotator_agreement(std::slice::from_ref(&same));
        assert_eq!((s.unanimous, s.pairwise), (Some(1.0), Some(1.0)));
        let split = item(1, vec![
            AnnotationVote::per_candidate("a", vec![A]),
            AnnotationVote::per_candidate("b", vec![A]),
            AnnotationVote::per_candidate("c", vec![R]),
        ]);
        let s = annotator_agreement(&[split]);
        assert_eq!(s.unanimous, Some(0.0));
        assert!((s.pairwise.unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let s = annotator_agreement(&[]);
        assert_eq!((s.labels, s.unanimous, s.pairwise), (0, None, None));
    }

    #[test]
    fn export_and_reimport_preserve_labels() {
        let mut items = vec![
            item(2, vec![
                AnnotationVote::per_candidate("a", vec![A, R]),
                AnnotationVote::per_candidate("b", vec![A, R]),
                AnnotationVote::per_candidate("c", vec![R, R]),
            ]),
            item(1, vec![AnnotationVote::reject_all("a"), AnnotationVote::reject_all("b"), AnnotationVote::per_candidate("c", vec![A])]),
            item(1, vec![
                AnnotationVote::per_candidate("a", vec![R]),
                AnnotationVote::per_candidate("b", vec![R]),
                AnnotationVote::reject_all("c"),
            ]),
        ];
        for (i, it) in items.iter_mut().enumerate() {
            it.item_id = format!("item-{i}");
            it.resolved = Some(majority_vote(it, MixedNeedPolicy::default()).unwrap());
        }
        let rows = export_rows(&items);
        assert_eq!(rows.len(), 3 + 2 + 2);
        assert_eq!(rows[0].judgment, Decision::Accepted);
        assert_eq!(rows[2].proposed_task, None);
        assert_eq!(rows[2].judgment, Decision::Rejected);
        let back = items_from_rows(&rows);
        for (orig, re) in items.iter().zip(&back) {
            let resolved = majority_vote(re, MixedNeedPolicy::default()).unwrap();
            assert_eq!(Some(resolved), orig.resolved);
        }
    }

    #[test]
    fn explanation_fills_thought() {
        let row = TrainingRow {
            item_id: "x".into(),
            observations: remote_working_trace().events,
            proposed_task: None,
            thought: None,
            judgment: Decision::Accepted,
            need: NeedFlag::NotNeeded,
        };
        let gw = Gateway::scripted(vec![FixtureEntry::any(r#"{"thought":"I was just browsing."}"#)]);
        let t = explain_row(&row, &gw, "gpt-4o", &PromptSet::default()).unwrap();
        assert_eq!(t, "I was just browsing.");
    }
}
