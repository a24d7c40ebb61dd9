//! Dialogue corpora: belief states, the slot ontology, and the per-turn
//! annotated dataset format.
//!
//! Dataset files are a JSON array of dialogues:
//!
//! ```json
//! [{"dialogue_idx": "SNG01.json",
//!   "domains": ["hotel"],
//!   "dialogue": [{"turn_idx": 0,
//!                 "system_transcript": "",
//!                 "transcript": "i need a hotel in the east",
//!                 "belief_state": [{"slots": [["hotel-area", "east"]], "act": "inform"}]}]}]
//! ```
//!
//! `belief_state` is the cumulative state after the turn. `domains` is
//! optional; when missing it is derived from the belief states and any
//! per-turn `"domain"` field.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{DstError, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotKey {
    pub domain: String,
    pub slot: String,
}

impl SlotKey {
    pub fn new(domain: impl Into<String>, slot: impl Into<String>) -> Self {
        SlotKey {
            domain: domain.into(),
            slot: slot.into(),
        }
    }

    /// Parses `"domain-slot"`; the slot part may itself contain spaces.
    pub fn parse(s: &str) -> Option<Self> {
        let (d, sl) = s.trim().split_once('-')?;
        let (d, sl) = (normalize_value(d), normalize_value(sl));
        if d.is_empty() || sl.is_empty() {
            return None;
        }
        Some(SlotKey::new(d, sl))
    }
}

impl fmt::Display for SlotKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.domain, self.slot)
    }
}

/// Lowercase, trim, collapse internal whitespace.
pub fn normalize_value(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Slot-value pairs. Absence of a key means "none"; the literal value
/// "none" and empty values are never stored.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeliefState {
    entries: BTreeMap<SlotKey, String>,
}

impl BeliefState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores the normalized value; "none" or an empty value removes the key.
    pub fn set(&mut self, key: SlotKey, value: &str) {
        let v = normalize_value(value);
        if v.is_empty() || v == "none" {
            self.entries.remove(&key);
        } else {
            self.entries.insert(key, v);
        }
    }

    pub fn get(&self, key: &SlotKey) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &SlotKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn remove(&mut self, key: &SlotKey) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SlotKey, &str)> {
        self.entries.iter().map(|(k, v)| (k, v.as_str()))
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&SlotKey, &str) -> bool) {
        self.entries.retain(|k, v| keep(k, v));
    }

    /// Every entry of `self` is present in `other` with the same value.
    pub fn is_subset_of(&self, other: &BeliefState) -> bool {
        self.iter().all(|(k, v)| other.get(k) == Some(v))
    }
}

impl<K: Into<String>, S: Into<String>, V: AsRef<str>> FromIterator<(K, S, V)> for BeliefState {
    fn from_iter<I: IntoIterator<Item = (K, S, V)>>(iter: I) -> Self {
        let mut state = BeliefState::new();
        for (d, s, v) in iter {
            state.set(SlotKey::new(d, s), v.as_ref());
        }
        state
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueTurn {
    pub turn_index: usize,
    /// Empty at turn 0.
    pub system_utterance: String,
    pub user_utterance: String,
    /// Cumulative state after this turn.
    pub gold_state: BeliefState,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub domains: BTreeSet<String>,
    pub turns: Vec<DialogueTurn>,
}

/// The ordered (domain, slot) list the decoder iterates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ontology {
    slots: Vec<SlotKey>,
    /// Candidate values, used for synthetic generation and validation only.
    pub known_values: Option<BTreeMap<SlotKey, Vec<String>>>,
}

const MULTIWOZ_ONTOLOGY: &str = include_str!("../data/multiwoz_ontology.txt");

impl Ontology {
    pub fn new(slots: Vec<SlotKey>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &slots {
            if !seen.insert(s) {
                return Err(DstError::InvalidConfig(format!("duplicate ontology slot {s}")));
            }
        }
        Ok(Ontology {
            slots,
            known_values: None,
        })
    }

    /// The five-domain, 30-slot list, sorted by "domain-slot".
    pub fn multiwoz() -> Self {
        Self::from_text(MULTIWOZ_ONTOLOGY, "multiwoz_ontology.txt").expect("bundled ontology is valid")
    }

    /// One `domain-slot` per line; blank lines and `#` comments are ignored.
    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut slots = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let key = SlotKey::parse(line).ok_or_else(|| DstError::Parse {
                path: origin.to_string(),
                line: i + 1,
                reason: format!("expected domain-slot, got {line:?}"),
            })?;
            slots.push(key);
        }
        Self::new(slots)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        self.slots.iter().map(|s| format!("{s}\n")).collect()
    }

    pub fn slots(&self) -> &[SlotKey] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn index_of(&self, key: &SlotKey) -> Option<usize> {
        self.slots.iter().position(|s| s == key)
    }

    pub fn contains(&self, key: &SlotKey) -> bool {
        self.index_of(key).is_some()
    }

    /// Domains in first-appearance order.
    pub fn domains(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.slots {
            if !out.contains(&s.domain) {
                out.push(s.domain.clone());
            }
        }
        out
    }

    /// Distinct slot names in first-appearance order.
    pub fn slot_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.slots {
            if !out.contains(&s.slot) {
                out.push(s.slot.clone());
            }
        }
        out
    }
}

/// Result of reading a dataset file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoadedCorpus {
    pub dialogues: Vec<Dialogue>,
    /// Belief entries dropped because their slot is not in the ontology.
    pub skipped_entries: usize,
}

fn malformed(id: &str, turn: Option<usize>, reason: impl Into<String>) -> DstError {
    DstError::Malformed {
        dialogue_id: id.to_string(),
        turn_index: turn,
        reason: reason.into(),
    }
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Parses a dataset document. With an ontology, belief entries for unknown
/// slots are skipped (and counted); without one every entry is kept.
pub fn parse_multiwoz(text: &str, ontology: Option<&Ontology>) -> Result<LoadedCorpus> {
    if text.trim().is_empty() {
        return Ok(LoadedCorpus {
            dialogues: Vec::new(),
            skipped_entries: 0,
        });
    }
    let root: Value = serde_json::from_str(text).map_err(|e| malformed("<document>", None, e.to_string()))?;
    let records = root
        .as_array()
        .ok_or_else(|| malformed("<document>", None, "top level must be an array"))?;
    let mut dialogues = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for (pos, rec) in records.iter().enumerate() {
        let id = rec
            .get("dialogue_idx")
            .and_then(id_string)
            .ok_or_else(|| malformed(&format!("#{pos}"), None, "missing dialogue_idx"))?;
        let turns_v = rec
            .get("dialogue")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed(&id, None, "missing dialogue array"))?;
        let mut domains: BTreeSet<String> = BTreeSet::new();
        let explicit_domains = rec.get("domains").and_then(Value::as_array);
        if let Some(ds) = explicit_domains {
            for d in ds {
                let d = d
                    .as_str()
                    .ok_or_else(|| malformed(&id, None, "domains must be strings"))?;
                domains.insert(normalize_value(d));
            }
        }
        let mut turns = Vec::with_capacity(turns_v.len());
        for (k, t) in turns_v.iter().enumerate() {
            let turn_index = match t.get("turn_idx") {
                Some(v) => v
                    .as_u64()
                    .map(|v| v as usize)
                    .ok_or_else(|| malformed(&id, Some(k), "turn_idx must be a non-negative integer"))?,
                None => k,
            };
            if let Some(prev) = turns.last().map(|t: &DialogueTurn| t.turn_index) {
                if turn_index <= prev {
                    return Err(malformed(&id, Some(turn_index), "turn_idx not strictly increasing"));
                }
            }
            let text_field = |name: &str| -> Result<String> {
                match t.get(name) {
                    None | Some(Value::Null) => Ok(String::new()),
                    Some(Value::String(s)) => Ok(s.clone()),
                    Some(_) => Err(malformed(&id, Some(turn_index), format!("{name} must be a string"))),
                }
            };
            let system_utterance = text_field("system_transcript")?;
            let user_utterance = text_field("transcript")?;
            let mut gold_state = BeliefState::new();
            let belief = match t.get("belief_state") {
                None | Some(Value::Null) => &[][..],
                Some(Value::Array(b)) => b.as_slice(),
                Some(_) => return Err(malformed(&id, Some(turn_index), "belief_state must be an array")),
            };
            for entry in belief {
                let slots = entry
                    .get("slots")
                    .and_then(Value::as_array)
                    .ok_or_else(|| malformed(&id, Some(turn_index), "belief entry without slots"))?;
                for pair in slots {
                    let pair = pair.as_array().filter(|p| p.len() == 2);
                    let (name, value) = match pair.map(|p| (p[0].as_str(), p[1].as_str())) {
                        Some((Some(n), Some(v))) => (n, v),
                        _ => return Err(malformed(&id, Some(turn_index), "slot pair must be [name, value]")),
                    };
                    let key = SlotKey::parse(name)
                        .ok_or_else(|| malformed(&id, Some(turn_index), format!("bad slot name {name:?}")))?;
                    if ontology.is_some_and(|o| !o.contains(&key)) {
                        log::warn!("dialogue {id} turn {turn_index}: skipping unknown slot {key}");
                        skipped += 1;
                        continue;
                    }
                    gold_state.set(key, value);
                }
            }
            if explicit_domains.is_none() {
                domains.extend(gold_state.iter().map(|(k, _)| k.domain.clone()));
                if let Some(d) = t.get("domain").and_then(Value::as_str) {
                    let d = normalize_value(d);
                    if !d.is_empty() {
                        domains.insert(d);
                    }
                }
            }
            turns.push(DialogueTurn {
                turn_index,
                system_utterance,
                user_utterance,
                gold_state,
            });
        }
        if turns.is_empty() {
            return Err(malformed(&id, None, "dialogue has no turns"));
        }
        dialogues.push(Dialogue { id, domains, turns });
    }
    Ok(LoadedCorpus {
        dialogues,
        skipped_entries: skipped,
    })
}

pub fn load_multiwoz(path: &Path, ontology: Option<&Ontology>) -> Result<LoadedCorpus> {
    let text = fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
    parse_multiwoz(&text, ontology).map_err(|e| match e {
        DstError::Malformed {
            dialogue_id,
            turn_index,
            reason,
        } => DstError::Malformed {
            dialogue_id,
            turn_index,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}

#[derive(Serialize)]
struct BeliefEntryOut<'a> {
    slots: Vec<[String; 2]>,
    act: &'a str,
}

#[derive(Serialize)]
struct TurnOut<'a> {
    turn_idx: usize,
    system_transcript: &'a str,
    transcript: &'a str,
    belief_state: Vec<BeliefEntryOut<'a>>,
}

#[derive(Serialize)]
struct DialogueOut<'a> {
    dialogue_idx: &'a str,
    domains: Vec<&'a str>,
    dialogue: Vec<TurnOut<'a>>,
}

/// Serializes dialogues in the dataset format read by [`parse_multiwoz`].
pub fn to_dataset_json(dialogues: &[Dialogue]) -> String {
    let out: Vec<DialogueOut<'_>> = dialogues
        .iter()
        .map(|d| DialogueOut {
            dialogue_idx: &d.id,
            domains: d.domains.iter().map(String::as_str).collect(),
            dialogue: d
                .turns
                .iter()
                .map(|t| TurnOut {
                    turn_idx: t.turn_index,
                    system_transcript: &t.system_utterance,
                    transcript: &t.user_utterance,
                    belief_state: t
                        .gold_state
                        .iter()
                        .map(|(k, v)| BeliefEntryOut {
                            slots: vec![[k.to_string(), v.to_string()]],
                            act: "inform",
                        })
                        .collect(),
                })
                .collect(),
        })
        .collect();
    serde_json::to_string_pretty(&out).expect("dataset serialization cannot fail")
}

pub fn save_dataset(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    fs::write(path, to_dataset_json(dialogues)).map_err(|e| DstError::io(path, e))
}

/// Domains excluded by default: too small and absent from the test split.
pub fn default_excluded_domains() -> BTreeSet<String> {
    ["hospital", "police"].iter().map(|s| s.to_string()).collect()
}

/// Drops dialogues touching any excluded domain and strips excluded-domain
/// entries from the remaining gold states.
pub fn filter_domains(dialogues: Vec<Dialogue>, excluded: &BTreeSet<String>) -> Vec<Dialogue> {
    if excluded.is_empty() {
        return dialogues;
    }
    dialogues
        .into_iter()
        .filter(|d| d.domains.is_disjoint(excluded))
        .map(|mut d| {
            for t in &mut d.turns {
                t.gold_state.retain(|k, _| !excluded.contains(&k.domain));
            }
            d
        })
        .collect()
}

/// Mean number of turns per dialogue (0 for an empty corpus).
pub fn mean_turns(dialogues: &[Dialogue]) -> f64 {
    if dialogues.is_empty() {
        return 0.0;
    }
    dialogues.iter().map(|d| d.turns.len()).sum::<usize>() as f64 / dialogues.len() as f64
}
