//! Joint and slot accuracy, context-length buckets and the
//! over/partial/false error taxonomy over prediction dumps.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::LengthBucket;
use crate::corpus::{BeliefState, Ontology, SlotKey};
use crate::error::{DstError, Result};

/// One evaluated turn. `context_length` counts untagged tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TurnPrediction {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub context_length: usize,
    pub predicted: BeliefState,
    pub gold: BeliefState,
}

/// On-disk form of a [`TurnPrediction`]; one JSON object per line with
/// states as `{"domain-slot": "value"}` maps.
#[derive(Serialize, Deserialize)]
struct DumpRecord {
    dialogue_id: String,
    turn_index: usize,
    context_length: usize,
    predicted: BTreeMap<String, String>,
    gold: BTreeMap<String, String>,
}

fn state_to_map(state: &BeliefState) -> BTreeMap<String, String> {
    state.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn map_to_state(map: BTreeMap<String, String>, origin: &str, line: usize) -> Result<BeliefState> {
    let mut state = BeliefState::new();
    for (k, v) in map {
        let key = SlotKey::parse(&k).ok_or_else(|| DstError::Parse {
            path: origin.to_string(),
            line,
            reason: format!("slot `{k}` is not of the form domain-slot"),
        })?;
        state.set(key, &v);
    }
    Ok(state)
}

pub fn dump_to_string(predictions: &[TurnPrediction]) -> String {
    let mut out = String::new();
    for p in predictions {
        let rec = DumpRecord {
            dialogue_id: p.dialogue_id.clone(),
            turn_index: p.turn_index,
            context_length: p.context_length,
            predicted: state_to_map(&p.predicted),
            gold: state_to_map(&p.gold),
        };
        out.push_str(&serde_json::to_string(&rec).expect("string maps always serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_dump(text: &str, origin: &str) -> Result<Vec<TurnPrediction>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DumpRecord = serde_json::from_str(line).map_err(|e| DstError::Parse {
            path: origin.to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(TurnPrediction {
            dialogue_id: rec.dialogue_id,
            turn_index: rec.turn_index,
            context_length: rec.context_length,
            predicted: map_to_state(rec.predicted, origin, i + 1)?,
            gold: map_to_state(rec.gold, origin, i + 1)?,
        });
    }
    Ok(out)
}

pub fn write_dump(path: &Path, predictions: &[TurnPrediction]) -> Result<()> {
    fs::write(path, dump_to_string(predictions)).map_err(|e| DstError::io(path, e))
}

pub fn read_dump(path: &Path) -> Result<Vec<TurnPrediction>> {
    let text = fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
    parse_dump(&text, &path.display().to_string())
}

/// A ratio reported as a percentage with two decimals, rounded half-up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Percentage {
    pub numerator: u64,
    pub denominator: u64,
}

impl Percentage {
    pub fn new(numerator: u64, denominator: u64) -> Option<Self> {
        (denominator > 0).then_some(Percentage { numerator, denominator })
    }

    /// The percentage in hundredths of a percent, e.g. 7194 for 71.94.
    pub fn hundredths(self) -> u64 {
        let scaled = u128::from(self.numerator) * 10_000;
        let d = u128::from(self.denominator);
        ((2 * scaled + d) / (2 * d)) as u64
    }

    pub fn as_f64(self) -> f64 {
        self.hundredths() as f64 / 100.0
    }

    pub fn fraction(self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

impl fmt::Display for Percentage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = self.hundredths();
        write!(f, "{}.{:02}", h / 100, h % 100)
    }
}

pub fn joint_accuracy(predictions: &[TurnPrediction]) -> Result<Percentage> {
    let correct = predictions.iter().filter(|p| p.predicted == p.gold).count();
    Percentage::new(correct as u64, predictions.len() as u64).ok_or(DstError::Empty("prediction list"))
}

/// Per-(turn, slot) accuracy over the ontology's slots; an absent slot
/// counts as the value "none" on either side.
pub fn slot_accuracy(predictions: &[TurnPrediction], ontology: &Ontology) -> Result<Percentage> {
    if ontology.is_empty() {
        return Err(DstError::Empty("ontology"));
    }
    if predictions.is_empty() {
        return Err(DstError::Empty("prediction list"));
    }
    let mut correct = 0u64;
    for p in predictions {
        for slot in ontology.slots() {
            let pv = p.predicted.get(slot).unwrap_or("none");
            let gv = p.gold.get(slot).unwrap_or("none");
            correct += u64::from(pv == gv);
        }
    }
    Ok(Percentage::new(correct, (predictions.len() * ontology.len()) as u64).expect("non-zero"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ErrorClass {
    Correct,
    OverPrediction,
    PartialPrediction,
    FalsePrediction,
}

impl ErrorClass {
    pub const ALL: [ErrorClass; 4] = [
        ErrorClass::Correct,
        ErrorClass::OverPrediction,
        ErrorClass::PartialPrediction,
        ErrorClass::FalsePrediction,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ErrorClass::Correct => "correct",
            ErrorClass::OverPrediction => "over_prediction",
            ErrorClass::PartialPrediction => "partial_prediction",
            ErrorClass::FalsePrediction => "false_prediction",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Exclusive classification with precedence false > partial > over. A
/// prediction that both misses and adds slots without any value clash is
/// partial.
pub fn classify_error(predicted: &BeliefState, gold: &BeliefState) -> ErrorClass {
    if predicted == gold {
        return ErrorClass::Correct;
    }
    let clash = predicted.iter().any(|(k, v)| gold.get(k).is_some_and(|g| g != v));
    if clash {
        return ErrorClass::FalsePrediction;
    }
    let missing = gold.iter().any(|(k, _)| !predicted.contains(k));
    if missing {
        ErrorClass::PartialPrediction
    } else {
        ErrorClass::OverPrediction
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TaxonomyReport {
    counts: [usize; 4],
}

impl TaxonomyReport {
    pub fn count(&self, class: ErrorClass) -> usize {
        self.counts[class.index()]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn from_counts(correct: usize, over: usize, partial: usize, false_pred: usize) -> Self {
        TaxonomyReport {
            counts: [correct, over, partial, false_pred],
        }
    }
}

pub fn taxonomy_report(predictions: &[TurnPrediction]) -> TaxonomyReport {
    let mut report = TaxonomyReport::default();
    for p in predictions {
        report.counts[classify_error(&p.predicted, &p.gold).index()] += 1;
    }
    report
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BucketRow {
    pub bucket: LengthBucket,
    pub total: usize,
    pub correct: usize,
}

impl BucketRow {
    pub fn accuracy(&self) -> Option<Percentage> {
        Percentage::new(self.correct as u64, self.total as u64)
    }
}

/// One row per length bucket, in ascending order, including empty buckets.
pub fn length_report(predictions: &[TurnPrediction]) -> Vec<BucketRow> {
    let mut rows: Vec<BucketRow> = LengthBucket::ALL
        .iter()
        .map(|&bucket| BucketRow {
            bucket,
            total: 0,
            correct: 0,
        })
        .collect();
    for p in predictions {
        let b = LengthBucket::of(p.context_length);
        let row = &mut rows[LengthBucket::ALL.iter().position(|&x| x == b).expect("bucket listed")];
        row.total += 1;
        row.correct += usize::from(p.predicted == p.gold);
    }
    rows
}

/// `1234567` → `"1,234,567"`.
pub fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Renders rows as a left-aligned first column and right-aligned others.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = widths[i])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(&header.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

pub fn format_length_table(rows: &[BucketRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.bucket.label().to_string(),
                group_thousands(r.total),
                group_thousands(r.correct),
                r.accuracy().map_or_else(|| "-".to_string(), |p| p.to_string()),
            ]
        })
        .collect();
    render_table(&["context length", "total", "correct", "joint acc"], &body)
}

pub fn format_taxonomy_table(report: &TaxonomyReport) -> String {
    let mut body: Vec<Vec<String>> = ErrorClass::ALL
        .iter()
        .map(|&c| vec![c.label().to_string(), group_thousands(report.count(c))])
        .collect();
    body.push(vec!["total".into(), group_thousands(report.total())]);
    render_table(&["class", "turns"], &body)
}

/// One row per model variant: name, joint accuracy, slot accuracy.
pub fn format_summary_table(rows: &[(String, Percentage, Percentage)]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, j, s)| vec![name.clone(), j.to_string(), s.to_string()])
        .collect();
    render_table(&["model", "joint acc", "slot acc"], &body)
}

#[derive(Serialize)]
struct BucketRecord<'a> {
    record: &'static str,
    bucket: &'a str,
    total: usize,
    correct: usize,
    joint_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct ClassRecord {
    record: &'static str,
    class: &'static str,
    count: usize,
}

pub fn length_records(rows: &[BucketRow]) -> String {
    rows.iter()
        .map(|r| {
            let rec = BucketRecord {
                record: "length_bucket",
                bucket: r.bucket.label(),
                total: r.total,
                correct: r.correct,
                joint_accuracy: r.accuracy().map(Percentage::as_f64),
            };
            serde_json::to_string(&rec).expect("serializable") + "\n"
        })
        .collect()
}

pub fn taxonomy_records(report: &TaxonomyReport) -> String {
    ErrorClass::ALL
        .iter()
        .map(|&c| {
            let rec = ClassRecord {
                record: "error_class",
                class: c.label(),
                count: report.count(c),
            };
            serde_json::to_string(&rec).expect("serializable") + "\n"
        })
        .collect()
}

/// Tab-separated `bucket_lower_bound, joint_accuracy` points for plotting.
pub fn length_plot_points(rows: &[BucketRow]) -> String {
    let mut out = String::from("bucket\tlower_bound\tjoint_accuracy\n");
    for r in rows {
        if let Some(p) = r.accuracy() {
            out.push_str(&format!("{}\t{}\t{}\n", r.bucket.label(), r.bucket.lower_bound(), p));
        }
    }
    out
}
