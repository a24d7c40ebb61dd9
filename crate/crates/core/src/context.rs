//! Dialogue-context sequences, tokenization, vocabulary and length buckets.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::corpus::Dialogue;
use crate::error::{DstError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
pub const SYS_TAG: usize = 4;
pub const USR_TAG: usize = 5;

/// Reserved symbols, in id order. They occupy ids 0..6 in every vocabulary.
pub const RESERVED: [&str; 6] = ["<pad>", "<unk>", "<sos>", "<eos>", "[sys]", "[usr]"];

const TERMINAL_PUNCT: &[char] = &['.', ',', '?', '!', ';', ':'];

/// Lowercases, splits on whitespace and detaches trailing punctuation marks
/// as separate tokens.
pub fn tokenize(utterance: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in utterance.split_whitespace() {
        let lower = piece.to_lowercase();
        let word = lower.trim_end_matches(TERMINAL_PUNCT);
        if !word.is_empty() {
            out.push(word.to_string());
        }
        out.extend(lower[word.len()..].chars().map(String::from));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Speaker {
    System,
    User,
}

/// Concatenated dialogue history for one turn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextSequence {
    pub tokens: Vec<String>,
    /// Indices of `[sys]` / `[usr]` tokens; empty when tagging is off.
    pub tag_positions: Vec<usize>,
}

impl ContextSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The same sequence with tag tokens removed.
    pub fn untagged(&self) -> ContextSequence {
        let tokens = self
            .tokens
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.tag_positions.contains(i))
            .map(|(_, t)| t.clone())
            .collect();
        ContextSequence {
            tokens,
            tag_positions: Vec::new(),
        }
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Utterances of turns `0..=up_to_turn` in speaking order, skipping empty ones.
fn utterances(dialogue: &Dialogue, up_to_turn: usize) -> Result<Vec<(Speaker, &str)>> {
    if up_to_turn >= dialogue.turns.len() {
        return Err(DstError::TurnOutOfRange {
            turn: up_to_turn,
            len: dialogue.turns.len(),
        });
    }
    let mut out = Vec::with_capacity(2 * (up_to_turn + 1));
    for turn in &dialogue.turns[..=up_to_turn] {
        for (speaker, text) in [
            (Speaker::System, &turn.system_utterance),
            (Speaker::User, &turn.user_utterance),
        ] {
            if !text.trim().is_empty() {
                out.push((speaker, text.as_str()));
            }
        }
    }
    Ok(out)
}

/// Concatenates every system and user utterance up to and including
/// `up_to_turn`. With `tagging`, each utterance is preceded by `[sys]` or
/// `[usr]`. Empty utterances (the turn-0 system slot) contribute nothing.
pub fn build_context(dialogue: &Dialogue, up_to_turn: usize, tagging: bool) -> Result<ContextSequence> {
    let mut tokens = Vec::new();
    let mut tag_positions = Vec::new();
    for (speaker, text) in utterances(dialogue, up_to_turn)? {
        let words = tokenize(text);
        if words.is_empty() {
            continue;
        }
        if tagging {
            tag_positions.push(tokens.len());
            tokens.push(RESERVED[if speaker == Speaker::System { SYS_TAG } else { USR_TAG }].to_string());
        }
        tokens.extend(words);
    }
    Ok(ContextSequence { tokens, tag_positions })
}

/// Token ↔ id map with a fixed reserved block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::reserved_only()
    }
}

impl Vocabulary {
    pub fn reserved_only() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.push(t);
        }
        v
    }

    fn push(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Builds a vocabulary from extra tokens listed in id order after the reserved block.
    pub fn from_tokens<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = Self::reserved_only();
        for t in tokens {
            v.push(t.as_ref());
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or `UNK`.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line for ids `RESERVED.len()..`; the reserved block is implicit.
    pub fn to_text(&self) -> String {
        self.tokens[RESERVED.len()..].iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut v = Self::reserved_only();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || line.contains(char::is_whitespace) {
                return Err(DstError::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    reason: format!("invalid vocabulary token {line:?}"),
                });
            }
            if v.get(line).is_some() {
                return Err(DstError::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    reason: format!("duplicate token {line:?}"),
                });
            }
            v.push(line);
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| DstError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

/// Every utterance and gold-value token occurring at least `min_count`
/// times, ordered by descending frequency then lexicographically.
pub fn build_vocabulary(dialogues: &[Dialogue], min_count: usize) -> Vocabulary {
    let min_count = min_count.max(1);
    let mut counts: HashMap<String, usize> = HashMap::new();
    for d in dialogues {
        for t in &d.turns {
            let values = t.gold_state.iter().map(|(_, v)| v);
            for text in [t.system_utterance.as_str(), t.user_utterance.as_str()]
                .into_iter()
                .chain(values)
            {
                for tok in tokenize(text) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t))
}

/// Context-length buckets of width 100 with an open top bucket.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LengthBucket {
    UpTo99,
    From100To199,
    From200To299,
    AtLeast300,
}

impl LengthBucket {
    pub const ALL: [LengthBucket; 4] = [
        LengthBucket::UpTo99,
        LengthBucket::From100To199,
        LengthBucket::From200To299,
        LengthBucket::AtLeast300,
    ];

    pub fn label(self) -> &'static str {
        match self {
            LengthBucket::UpTo99 => "0-99",
            LengthBucket::From100To199 => "100-199",
            LengthBucket::From200To299 => "200-299",
            LengthBucket::AtLeast300 => ">=300",
        }
    }

    pub fn lower_bound(self) -> usize {
        self as usize * 100
    }

    pub fn of(length: usize) -> LengthBucket {
        LengthBucket::ALL[(length / 100).min(3)]
    }
}

impl fmt::Display for LengthBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Half-open buckets `[0,100) [100,200) [200,300) [300,inf)`.
pub fn length_bucket(length: i64) -> Result<LengthBucket> {
    match length {
        l if l < 0 => Err(DstError::NegativeLength(l)),
        0..=99 => Ok(LengthBucket::UpTo99),
        100..=199 => Ok(LengthBucket::From100To199),
        200..=299 => Ok(LengthBucket::From200To299),
        _ => Ok(LengthBucket::AtLeast300),
    }
}
