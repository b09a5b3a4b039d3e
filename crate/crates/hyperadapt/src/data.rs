//! Task datasets and their builders.
//!
//! A [`Task`] is a natural-language description plus input/output examples;
//! a [`TaskDataset`] groups tasks into train/dev/test splits whose
//! descriptions never overlap, so test tasks are genuinely unseen. Builders
//! here produce datasets three ways: reading task JSONL (including
//! ZEST-style records), deriving question-type tasks from MRQA-format
//! reading-comprehension records, and generating small compositional
//! families (ordinal extraction, keyword filtering) that train in minutes
//! on a CPU. [`subsample`] supports data-efficiency ablations.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("duplicate task_id {task_id:?} (line {line})")]
    DuplicateTaskId { task_id: String, line: usize },
    #[error("task {task_id:?}: {msg}")]
    InvalidTask { task_id: String, msg: String },
    #[error(
        "need {needed} question types with at least {min_records} records each, \
         found {found}; deficient types: {deficient:?}"
    )]
    InsufficientData { needed: usize, min_records: usize, found: usize, deficient: Vec<String> },
    #[error("fixed partition requires types {missing:?}, absent from the selected top types")]
    MissingListingTypes { missing: Vec<String> },
    #[error("unknown task family {name:?}; valid families: ordinal, keyword")]
    UnknownFamily { name: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// One input/output pair within a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub source: String,
    pub target: String,
}

/// A task: a description shared by all its examples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub task_id: String,
    pub description: String,
    pub examples: Vec<Example>,
}

impl Task {
    /// Non-empty description and at least one example.
    pub fn validate(&self) -> Result<()> {
        if self.description.trim().is_empty() {
            return Err(DataError::InvalidTask {
                task_id: self.task_id.clone(),
                msg: "empty description".into(),
            });
        }
        if self.examples.is_empty() {
            return Err(DataError::InvalidTask {
                task_id: self.task_id.clone(),
                msg: "no examples".into(),
            });
        }
        Ok(())
    }
}

/// How a dataset was produced, for provenance in reports and logs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub builder: String,
    pub seed: u64,
    pub source_files: Vec<String>,
}

/// Train/dev/test task splits. Descriptions are disjoint across splits;
/// a dev or test description is never seen during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub train: Vec<Task>,
    pub dev: Vec<Task>,
    pub test: Vec<Task>,
    pub provenance: Provenance,
}

impl TaskDataset {
    /// Unique ids, split-disjoint descriptions, per-task invariants.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut split_of_desc: BTreeMap<&str, &str> = BTreeMap::new();
        for (split, tasks) in
            [("train", &self.train), ("dev", &self.dev), ("test", &self.test)]
        {
            for t in tasks {
                t.validate()?;
                if !ids.insert(t.task_id.as_str()) {
                    return Err(DataError::InvalidTask {
                        task_id: t.task_id.clone(),
                        msg: "task_id appears more than once in the dataset".into(),
                    });
                }
                match split_of_desc.get(t.description.as_str()) {
                    Some(&other) if other != split => {
                        return Err(DataError::InvalidTask {
                            task_id: t.task_id.clone(),
                            msg: format!(
                                "description {:?} appears in both {other} and {split}",
                                t.description
                            ),
                        });
                    }
                    _ => {
                        split_of_desc.insert(t.description.as_str(), split);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&[Task]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(DataError::Invalid(format!(
                "unknown split {other:?}; valid splits: train, dev, test"
            ))),
        }
    }

    /// All lines of text a vocabulary should cover: descriptions, sources,
    /// and targets of every split.
    pub fn corpus_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        for tasks in [&self.train, &self.dev, &self.test] {
            for t in tasks {
                lines.push(t.description.clone());
                for ex in &t.examples {
                    lines.push(ex.source.clone());
                    lines.push(ex.target.clone());
                }
            }
        }
        lines
    }

    /// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl`, `provenance.json`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_tasks(&self.train, &dir.join("train.jsonl"))?;
        save_tasks(&self.dev, &dir.join("dev.jsonl"))?;
        save_tasks(&self.test, &dir.join("test.jsonl"))?;
        let json = serde_json::to_string_pretty(&self.provenance)
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        std::fs::write(dir.join("provenance.json"), json + "\n")?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let prov_path = dir.join("provenance.json");
        let provenance: Provenance = serde_json::from_str(&std::fs::read_to_string(&prov_path)?)
            .map_err(|e| DataError::Parse {
                path: prov_path.display().to_string(),
                line: e.line(),
                msg: e.to_string(),
            })?;
        let ds = TaskDataset {
            train: load_tasks(&dir.join("train.jsonl"))?,
            dev: load_tasks(&dir.join("dev.jsonl"))?,
            test: load_tasks(&dir.join("test.jsonl"))?,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// One reading-comprehension record: a context paragraph, a question about
/// it, and the first gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MrqaRecord {
    pub context: String,
    pub question: String,
    pub answer: String,
}

/// ZEST-style task record: the question acts as the task description and
/// each (context, answer) pair becomes an example.
#[derive(Deserialize)]
struct ZestRecord {
    question: String,
    examples: Vec<ZestExample>,
}

#[derive(Deserialize)]
struct ZestExample {
    context: String,
    #[serde(alias = "answers")]
    answer: serde_json::Value,
}

fn first_answer_string(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Array(items) => items.first().and_then(|x| x.as_str().map(String::from)),
        _ => None,
    }
}

/// Reads task JSONL: one JSON object per line. Canonical lines carry
/// {"task_id", "description", "examples"}; ZEST-style lines carry
/// {"question", "examples": [{"context", "answer"}]} and are mapped
/// question -> description, context -> source, first answer -> target
/// (the literal string "n/a" is kept as-is).
pub fn load_tasks(path: &Path) -> Result<Vec<Task>> {
    let parse_err = |line: usize, msg: String| DataError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let file = std::fs::File::open(path)?;
    let mut tasks: Vec<Task> = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let task = if value.get("task_id").is_some() {
            serde_json::from_value::<Task>(value).map_err(|e| parse_err(lineno, e.to_string()))?
        } else if value.get("question").is_some() {
            let rec: ZestRecord = serde_json::from_value(value)
                .map_err(|e| parse_err(lineno, e.to_string()))?;
            let mut examples = Vec::with_capacity(rec.examples.len());
            for (i, ex) in rec.examples.iter().enumerate() {
                let target = first_answer_string(&ex.answer).ok_or_else(|| {
                    parse_err(lineno, format!("example {i}: answer is not a string or string list"))
                })?;
                examples.push(Example { source: ex.context.clone(), target });
            }
            Task {
                task_id: format!("zest-{lineno:04}"),
                description: rec.question,
                examples,
            }
        } else {
            return Err(parse_err(
                lineno,
                "line is neither a task (task_id/description/examples) nor a \
                 ZEST record (question/examples)"
                    .into(),
            ));
        };
        task.validate()?;
        if let Some(&first) = seen.get(&task.task_id) {
            return Err(DataError::DuplicateTaskId {
                task_id: task.task_id,
                line: first.min(lineno),
            });
        }
        seen.insert(task.task_id.clone(), lineno);
        tasks.push(task);
    }
    Ok(tasks)
}

/// Writes canonical task JSONL, one task per line.
pub fn save_tasks(tasks: &[Task], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in tasks {
        let line = serde_json::to_string(t).map_err(|e| DataError::Invalid(e.to_string()))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct MrqaLine {
    context: String,
    qas: Vec<MrqaQa>,
}

#[derive(Deserialize)]
struct MrqaQa {
    question: String,
    answers: Vec<String>,
}

/// Reads MRQA-format JSONL ({context, qas:[{question, answers}]}), plain or
/// gzipped by file extension. A leading header line ({"header": ...}) is
/// skipped. Each question contributes one record with its first answer.
pub fn load_mrqa(path: &Path) -> Result<Vec<MrqaRecord>> {
    let file = std::fs::File::open(path)?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(flate2::read::GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let parse_err = |line: usize, msg: String| DataError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if value.get("header").is_some() {
            continue;
        }
        let parsed: MrqaLine =
            serde_json::from_value(value).map_err(|e| parse_err(lineno, e.to_string()))?;
        for (i, qa) in parsed.qas.into_iter().enumerate() {
            let answer = qa
                .answers
                .into_iter()
                .next()
                .ok_or_else(|| parse_err(lineno, format!("qa {i}: empty answers list")))?;
            if parsed.context.trim().is_empty()
                || qa.question.trim().is_empty()
                || answer.trim().is_empty()
            {
                return Err(parse_err(lineno, format!("qa {i}: empty context/question/answer")));
            }
            records.push(MrqaRecord { context: parsed.context.clone(), question: qa.question, answer });
        }
    }
    Ok(records)
}

/// Words that can open a question type. The first of these found in a
/// question, joined with its following token, names the question type.
pub const QUESTION_WORDS: [&str; 10] =
    ["what", "when", "who", "whom", "whose", "where", "why", "how", "which", "was"];

/// Lowercases and strips edge punctuation, keeping inner apostrophes so
/// contracted forms like "what's" survive.
fn clean_token(tok: &str) -> String {
    tok.trim_matches(|c: char| !(c.is_alphanumeric() || c == '\''))
        .trim_matches('\'')
        .to_lowercase()
}

/// The question-type bigram: the first question word in the text (also
/// matching contracted forms like "what's"), joined with the next token.
/// None when no question word appears or it is the last token.
pub fn question_type_bigram(question: &str) -> Option<String> {
    let tokens: Vec<String> =
        question.split_whitespace().map(clean_token).filter(|t| !t.is_empty()).collect();
    for (i, tok) in tokens.iter().enumerate() {
        let is_qword = QUESTION_WORDS
            .iter()
            .any(|qw| tok == qw || tok.starts_with(&format!("{qw}'")));
        if is_qword {
            return tokens.get(i + 1).map(|next| format!("{tok} {next}"));
        }
    }
    None
}

/// The published question-type partition for the synthetic reading
/// comprehension dataset: 80 train, 10 dev, 10 test types.
pub const LISTING1_TRAIN: [&str; 80] = [
    "why were", "what years", "who said", "what percent", "when did", "where do", "who is",
    "how are", "what decade", "how does", "how long", "where was", "what has", "which two",
    "who was", "who were", "where are", "where does", "what did", "how far", "what organization",
    "what does", "what group", "what would", "how did", "who has", "who created", "how many",
    "what name", "what types", "what two", "which city", "who are", "how is", "what event",
    "what are", "what century", "what area", "whom did", "why was", "who wrote", "why are",
    "where is", "how old", "when is", "what caused", "who did", "where did", "what happened",
    "what state", "what kind", "what time", "what famous", "what's the", "what day", "what is",
    "what company", "what were", "why do", "what new", "what date", "what do", "what color",
    "which group", "what country", "how can", "what have", "where can", "what period",
    "which year", "when was", "what other", "what happens", "was the", "what was", "which of",
    "when were", "what sort", "what city", "what year",
];

pub const LISTING1_DEV: [&str; 10] = [
    "what month", "why is", "what part", "what term", "how was", "how were", "how do",
    "who led", "which country", "when does",
];

pub const LISTING1_TEST: [&str; 10] = [
    "where were", "what political", "what religion", "why did", "what type", "what language",
    "who had", "what percentage", "what can", "how much",
];

/// How the 100 selected question types are split 80/10/10.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ListingMode {
    /// Fixed partition when the selected types are exactly the published
    /// 100, otherwise a seeded shuffle.
    Auto,
    /// Fixed partition; error if any published type is missing.
    Fixed,
    /// Seeded shuffle regardless.
    Shuffled,
}

/// How many question types become tasks, and how many examples each keeps.
pub const SQUAD_TYPES: usize = 100;
pub const SQUAD_EXAMPLES_PER_TYPE: usize = 64;

/// Source text for a reading-comprehension example. The question rides in
/// front so truncation (which only trims the tail) keeps it intact.
fn squad_source(question: &str, context: &str) -> String {
    format!("{question} <sep> {context}")
}

/// Builds question-type tasks from reading-comprehension records: groups
/// records by question-type bigram, keeps the 100 most frequent types
/// (ties broken lexicographically), samples 64 records per type with the
/// seeded generator, and splits the types 80/10/10.
pub fn build_synthetic_squad(
    records: &[MrqaRecord],
    seed: u64,
    mode: ListingMode,
) -> Result<TaskDataset> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        if let Some(bigram) = question_type_bigram(&rec.question) {
            groups.entry(bigram).or_default().push(i);
        }
    }

    // Top types by count; BTreeMap iteration makes count ties lexicographic.
    let mut by_freq: Vec<(&String, usize)> =
        groups.iter().map(|(k, v)| (k, v.len())).collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let selected: Vec<&String> = by_freq.iter().take(SQUAD_TYPES).map(|&(k, _)| k).collect();

    let deficient: Vec<String> = selected
        .iter()
        .filter(|&&k| groups[k].len() < SQUAD_EXAMPLES_PER_TYPE)
        .map(|&k| k.clone())
        .collect();
    if selected.len() < SQUAD_TYPES || !deficient.is_empty() {
        let found = by_freq.iter().filter(|&&(_, n)| n >= SQUAD_EXAMPLES_PER_TYPE).count();
        return Err(DataError::InsufficientData {
            needed: SQUAD_TYPES,
            min_records: SQUAD_EXAMPLES_PER_TYPE,
            found,
            deficient,
        });
    }

    let selected_set: BTreeSet<&str> = selected.iter().map(|s| s.as_str()).collect();
    let listing: Vec<&str> = LISTING1_TRAIN
        .iter()
        .chain(LISTING1_DEV.iter())
        .chain(LISTING1_TEST.iter())
        .copied()
        .collect();
    let missing: Vec<String> =
        listing.iter().filter(|&&t| !selected_set.contains(t)).map(|&t| t.to_string()).collect();

    let use_fixed = match mode {
        ListingMode::Fixed if !missing.is_empty() => {
            return Err(DataError::MissingListingTypes { missing });
        }
        ListingMode::Fixed => true,
        ListingMode::Auto => missing.is_empty(),
        ListingMode::Shuffled => false,
    };

    let rng = Rng::new(seed);
    let (train_types, dev_types, test_types): (Vec<String>, Vec<String>, Vec<String>) =
        if use_fixed {
            (
                LISTING1_TRAIN.iter().map(|s| s.to_string()).collect(),
                LISTING1_DEV.iter().map(|s| s.to_string()).collect(),
                LISTING1_TEST.iter().map(|s| s.to_string()).collect(),
            )
        } else {
            let mut order: Vec<String> = selected.iter().map(|s| s.to_string()).collect();
            rng.subrng("squad/split").shuffle(&mut order);
            let dev_start = SQUAD_TYPES - 20;
            let test_start = SQUAD_TYPES - 10;
            (
                order[..dev_start].to_vec(),
                order[dev_start..test_start].to_vec(),
                order[test_start..].to_vec(),
            )
        };

    let build_split = |types: &[String]| -> Vec<Task> {
        types
            .iter()
            .map(|bigram| {
                let members = &groups[bigram];
                let perm = rng.subrng(&format!("squad/sample/{bigram}")).permutation(members.len());
                let mut picked: Vec<usize> =
                    perm[..SQUAD_EXAMPLES_PER_TYPE].iter().map(|&j| members[j]).collect();
                picked.sort_unstable();
                let examples = picked
                    .iter()
                    .map(|&ri| {
                        let r = &records[ri];
                        Example {
                            source: squad_source(&r.question, &r.context),
                            target: r.answer.clone(),
                        }
                    })
                    .collect();
                Task { task_id: bigram.clone(), description: bigram.clone(), examples }
            })
            .collect()
    };

    let ds = TaskDataset {
        train: build_split(&train_types),
        dev: build_split(&dev_types),
        test: build_split(&test_types),
        provenance: Provenance {
            builder: format!(
                "build-synthetic-squad(mode={})",
                if use_fixed { "fixed" } else { "shuffled" }
            ),
            seed,
            source_files: vec![],
        },
    };
    ds.validate()?;
    Ok(ds)
}

/// Out-of-domain test tasks: records (typically from a different corpus)
/// whose question-type bigram matches a test-split description, grouped
/// into one task per type. Types with no matching records are dropped.
pub fn build_ood_testset(records: &[MrqaRecord], dataset: &TaskDataset) -> Vec<Task> {
    let test_types: BTreeSet<&str> =
        dataset.test.iter().map(|t| t.description.as_str()).collect();
    let mut groups: BTreeMap<String, Vec<Example>> = BTreeMap::new();
    for rec in records {
        if let Some(bigram) = question_type_bigram(&rec.question) {
            if test_types.contains(bigram.as_str()) {
                groups.entry(bigram).or_default().push(Example {
                    source: squad_source(&rec.question, &rec.context),
                    target: rec.answer.clone(),
                });
            }
        }
    }
    groups
        .into_iter()
        .map(|(bigram, examples)| Task {
            task_id: bigram.clone(),
            description: bigram,
            examples,
        })
        .collect()
}

/// Fifty common words the compositional generators draw from.
pub const WORD_POOL: [&str; 50] = [
    "apple", "basket", "candle", "dragon", "engine", "forest", "garden", "hammer", "island",
    "jacket", "kettle", "ladder", "magnet", "needle", "ocean", "pencil", "quartz", "ribbon",
    "shadow", "temple", "umbrella", "violin", "window", "yellow", "zebra", "anchor", "bridge",
    "canyon", "desert", "ember", "falcon", "glacier", "harbor", "ivory", "jungle", "koala",
    "lantern", "meadow", "nectar", "orchard", "pebble", "quiver", "river", "saddle", "thunder",
    "valley", "walnut", "yarn", "zephyr", "marble",
];

/// Ordinal extraction family: task K asks for the K-th word of the input.
/// Whole K values are held out for dev and test, so those descriptions are
/// unseen in training. Sources are random words from [`WORD_POOL`]; a
/// source for task K is always at least K words long.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrdinalSpec {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub examples_per_task: usize,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for OrdinalSpec {
    fn default() -> Self {
        OrdinalSpec {
            n_train: 8,
            n_dev: 2,
            n_test: 2,
            examples_per_task: 64,
            min_words: 6,
            max_words: 12,
        }
    }
}

/// Keyword filter family: task WORD asks whether the input contains WORD.
/// Keywords are taken from the front of [`WORD_POOL`] in order; dev and
/// test keywords are unseen in training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordSpec {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub examples_per_task: usize,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for KeywordSpec {
    fn default() -> Self {
        KeywordSpec {
            n_train: 10,
            n_dev: 3,
            n_test: 5,
            examples_per_task: 64,
            min_words: 6,
            max_words: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FamilySpec {
    Ordinal(OrdinalSpec),
    Keyword(KeywordSpec),
}

impl FamilySpec {
    /// Default spec for a family name; the names double as CLI values.
    pub fn by_name(name: &str) -> Result<FamilySpec> {
        match name {
            "ordinal" => Ok(FamilySpec::Ordinal(OrdinalSpec::default())),
            "keyword" => Ok(FamilySpec::Keyword(KeywordSpec::default())),
            other => Err(DataError::UnknownFamily { name: other.to_string() }),
        }
    }
}

fn split_counts(n_train: usize, n_dev: usize, n_test: usize) -> Result<usize> {
    if n_train == 0 || n_dev == 0 || n_test == 0 {
        return Err(DataError::Invalid(
            "each split needs at least one task".into(),
        ));
    }
    Ok(n_train + n_dev + n_test)
}

fn split_tasks(mut tasks: Vec<Task>, n_train: usize, n_dev: usize) -> (Vec<Task>, Vec<Task>, Vec<Task>) {
    let test = tasks.split_off(n_train + n_dev);
    let dev = tasks.split_off(n_train);
    (tasks, dev, test)
}

/// Generates a compositional task family. Pure in (spec, seed).
pub fn gen_compositional_tasks(spec: &FamilySpec, seed: u64) -> Result<TaskDataset> {
    let rng = Rng::new(seed);
    let (tasks, n_train, n_dev, builder) = match spec {
        FamilySpec::Ordinal(s) => {
            let total = split_counts(s.n_train, s.n_dev, s.n_test)?;
            if s.min_words == 0 || s.max_words < s.min_words {
                return Err(DataError::Invalid(format!(
                    "bad source length range {}..={}",
                    s.min_words, s.max_words
                )));
            }
            if total > s.max_words {
                return Err(DataError::Invalid(format!(
                    "word position {total} exceeds the maximum source length {}",
                    s.max_words
                )));
            }
            if s.examples_per_task == 0 {
                return Err(DataError::Invalid("examples_per_task must be positive".into()));
            }
            let mut tasks = Vec::with_capacity(total);
            for k in 1..=total {
                let mut trng = rng.subrng(&format!("ordinal/{k}"));
                // Sources shorter than K have no K-th word.
                let lo = s.min_words.max(k);
                let examples = (0..s.examples_per_task)
                    .map(|_| {
                        let len = lo + trng.usize_below(s.max_words - lo + 1);
                        let words: Vec<&str> = (0..len)
                            .map(|_| WORD_POOL[trng.usize_below(WORD_POOL.len())])
                            .collect();
                        Example {
                            source: words.join(" "),
                            target: words[k - 1].to_string(),
                        }
                    })
                    .collect();
                tasks.push(Task {
                    task_id: format!("ordinal-{k:02}"),
                    description: format!("return word number {k} of the input"),
                    examples,
                });
            }
            (tasks, s.n_train, s.n_dev, "gen-compositional/ordinal")
        }
        FamilySpec::Keyword(s) => {
            let total = split_counts(s.n_train, s.n_dev, s.n_test)?;
            if total > WORD_POOL.len() {
                return Err(DataError::Invalid(format!(
                    "{total} keyword tasks requested but the pool has {} words",
                    WORD_POOL.len()
                )));
            }
            if s.min_words == 0 || s.max_words < s.min_words {
                return Err(DataError::Invalid(format!(
                    "bad source length range {}..={}",
                    s.min_words, s.max_words
                )));
            }
            if s.examples_per_task == 0 {
                return Err(DataError::Invalid("examples_per_task must be positive".into()));
            }
            let mut tasks = Vec::with_capacity(total);
            for word in WORD_POOL.iter().take(total) {
                let mut trng = rng.subrng(&format!("keyword/{word}"));
                // Others: pool minus the keyword, so "no" sources are clean.
                let others: Vec<&str> =
                    WORD_POOL.iter().filter(|&&w| w != *word).copied().collect();
                let n_yes = s.examples_per_task.div_ceil(2);
                let mut examples: Vec<Example> = (0..s.examples_per_task)
                    .map(|i| {
                        let len = s.min_words + trng.usize_below(s.max_words - s.min_words + 1);
                        let mut words: Vec<&str> = (0..len)
                            .map(|_| others[trng.usize_below(others.len())])
                            .collect();
                        let yes = i < n_yes;
                        if yes {
                            words[trng.usize_below(len)] = word;
                        }
                        Example {
                            source: words.join(" "),
                            target: if yes { "yes".into() } else { "no".into() },
                        }
                    })
                    .collect();
                trng.shuffle(&mut examples);
                tasks.push(Task {
                    task_id: format!("keyword-{word}"),
                    description: format!("output yes if the input contains {word} otherwise no"),
                    examples,
                });
            }
            (tasks, s.n_train, s.n_dev, "gen-compositional/keyword")
        }
    };
    // Seeded shuffle before splitting: held-out tasks are a random draw
    // from the family, not its tail (K would otherwise always extrapolate).
    let mut tasks = tasks;
    rng.subrng("split").shuffle(&mut tasks);
    let (train, dev, test) = split_tasks(tasks, n_train, n_dev);
    let ds = TaskDataset {
        train,
        dev,
        test,
        provenance: Provenance { builder: builder.to_string(), seed, source_files: vec![] },
    };
    ds.validate()?;
    Ok(ds)
}

/// Keeps a seeded fraction of train tasks and, per kept task, a seeded
/// fraction of its examples. Dev and test are untouched. Selection uses a
/// single permutation prefix per level, so for a fixed seed the kept set
/// at a smaller fraction is a subset of the kept set at a larger one.
pub fn subsample(
    dataset: &TaskDataset,
    task_fraction: f64,
    example_fraction: f64,
    seed: u64,
) -> Result<TaskDataset> {
    for (name, f) in [("task_fraction", task_fraction), ("example_fraction", example_fraction)] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(DataError::Invalid(format!("{name} must be in (0, 1], got {f}")));
        }
    }
    let rng = Rng::new(seed);
    let n = dataset.train.len();
    let keep_n = (task_fraction * n as f64).round() as usize;
    if keep_n == 0 {
        return Err(DataError::Invalid(format!(
            "task_fraction {task_fraction} keeps zero of {n} train tasks"
        )));
    }
    let perm = rng.subrng("subsample/tasks").permutation(n);
    let mut keep_idx: Vec<usize> = perm[..keep_n.min(n)].to_vec();
    keep_idx.sort_unstable();

    let mut train = Vec::with_capacity(keep_idx.len());
    for &ti in &keep_idx {
        let task = &dataset.train[ti];
        let m = task.examples.len();
        let keep_m = (example_fraction * m as f64).round() as usize;
        if keep_m == 0 {
            return Err(DataError::Invalid(format!(
                "example_fraction {example_fraction} keeps zero of {m} examples in task {:?}",
                task.task_id
            )));
        }
        let eperm =
            rng.subrng(&format!("subsample/examples/{}", task.task_id)).permutation(m);
        let mut eidx: Vec<usize> = eperm[..keep_m.min(m)].to_vec();
        eidx.sort_unstable();
        train.push(Task {
            task_id: task.task_id.clone(),
            description: task.description.clone(),
            examples: eidx.iter().map(|&i| task.examples[i].clone()).collect(),
        });
    }
    Ok(TaskDataset {
        train,
        dev: dataset.dev.clone(),
        test: dataset.test.clone(),
        provenance: Provenance {
            builder: format!(
                "{}+subsample(tasks={task_fraction},examples={example_fraction},seed={seed})",
                dataset.provenance.builder
            ),
            seed: dataset.provenance.seed,
            source_files: dataset.provenance.source_files.clone(),
        },
    })
}
