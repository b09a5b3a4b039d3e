//! Scoring: token-level F1 per example, mean F1 per task, and
//! Competence@K over a task collection.
//!
//! Competence@K is the percentage of tasks whose mean F1 (scaled to 0-100)
//! is strictly greater than K; it measures how many whole tasks a model
//! handles acceptably rather than how well it does on average. Evaluation
//! is read-only: models and hypernetworks are borrowed immutably and their
//! checksums are unchanged.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Task;
use crate::hypernet::Hypernetwork;
use crate::model::{concat_input, AdapterSet, MainNetwork, ModelError, Vocab};
use crate::numerics::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("task {task_id:?}, example {index}: {source}")]
    Decode { task_id: String, index: usize, source: ModelError },
    #[error("adapter generation for task {task_id:?}: {msg}")]
    AdapterGen { task_id: String, msg: String },
    #[error("competence is undefined on an empty result list")]
    EmptyResults,
    #[error("unknown report format {name:?}; valid formats: json, text")]
    UnknownFormat { name: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Lowercase, drop punctuation characters, remove the articles "a", "an",
/// "the", and collapse whitespace. The usual convention for scoring short
/// extracted answers, where casing and articles are noise.
pub fn normalize_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    let no_punct: String =
        lower.chars().filter(|c| c.is_alphanumeric() || c.is_whitespace()).collect();
    no_punct
        .split_whitespace()
        .filter(|tok| !matches!(*tok, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Token-overlap F1 between prediction and gold on normalized tokens.
/// Overlap counts multiset intersection. Both empty scores 1.0; exactly
/// one empty scores 0.0.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let pred = normalize_answer(prediction);
    let gold = normalize_answer(gold);
    let p: Vec<&str> = pred.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in &g {
        *counts.entry(tok).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for tok in &p {
        if let Some(c) = counts.get_mut(tok) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Per-task scores. `mean_f1` is the arithmetic mean of `per_example_f1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub mean_f1: f64,
    pub per_example_f1: Vec<f64>,
}

impl TaskResult {
    pub fn from_scores(task_id: String, per_example_f1: Vec<f64>) -> Self {
        let mean_f1 = if per_example_f1.is_empty() {
            0.0
        } else {
            per_example_f1.iter().sum::<f64>() / per_example_f1.len() as f64
        };
        TaskResult { task_id, mean_f1, per_example_f1 }
    }
}

/// Decodes every example of `task` with the given adapters (None runs the
/// bare model) and scores each prediction against the target.
pub fn evaluate_task<T: Scalar>(
    net: &MainNetwork<T>,
    vocab: &Vocab,
    adapters: Option<&AdapterSet<T>>,
    task: &Task,
) -> Result<TaskResult> {
    let max_new = net.config.max_len;
    let mut scores = Vec::with_capacity(task.examples.len());
    for (index, ex) in task.examples.iter().enumerate() {
        let wrap = |source: ModelError| EvalError::Decode {
            task_id: task.task_id.clone(),
            index,
            source,
        };
        let src = concat_input(vocab, &task.description, &ex.source, net.config.max_len)
            .map_err(wrap)?;
        let prediction = net.greedy_decode(vocab, adapters, &src, max_new).map_err(wrap)?;
        scores.push(token_f1(&prediction, &ex.target));
    }
    Ok(TaskResult::from_scores(task.task_id.clone(), scores))
}

/// Percentage of tasks whose mean F1, scaled to 0-100, strictly exceeds K.
pub fn competence_at_k(results: &[TaskResult], k: u32) -> Result<f64> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let above = results.iter().filter(|r| r.mean_f1 * 100.0 > f64::from(k)).count();
    Ok(100.0 * above as f64 / results.len() as f64)
}

/// Evaluation summary over one dataset split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskResult>,
    /// Mean over tasks of each task's mean F1.
    pub mean_f1: f64,
    /// K -> Competence@K percentage.
    pub competence: BTreeMap<u32, f64>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

/// The columns reported by default: C@75 and C@90.
pub const DEFAULT_COMPETENCE_KS: [u32; 2] = [75, 90];

impl EvalReport {
    /// Aggregates per-task results: sorts by task_id, averages task means,
    /// and computes Competence@K for each requested K.
    pub fn from_results(mut results: Vec<TaskResult>, ks: &[u32]) -> Result<Self> {
        if results.is_empty() {
            return Err(EvalError::EmptyResults);
        }
        results.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        let mean_f1 = results.iter().map(|r| r.mean_f1).sum::<f64>() / results.len() as f64;
        let mut competence = BTreeMap::new();
        for &k in ks {
            competence.insert(k, competence_at_k(&results, k)?);
        }
        Ok(EvalReport { tasks: results, mean_f1, competence, meta: BTreeMap::new() })
    }
}

/// Evaluates the model with one fixed adapter set shared by every task
/// (None runs the bare model). Used for the plain and shared-adapter
/// baselines, where adapters do not depend on the description.
pub fn evaluate_fixed<T: Scalar>(
    net: &MainNetwork<T>,
    vocab: &Vocab,
    adapters: Option<&AdapterSet<T>>,
    tasks: &[Task],
    ks: &[u32],
    jobs: usize,
) -> Result<EvalReport> {
    let one = |task: &Task| evaluate_task(net, vocab, adapters, task);
    let results: Vec<TaskResult> = if jobs <= 1 || tasks.len() <= 1 {
        tasks.iter().map(one).collect::<Result<_>>()?
    } else {
        let chunk = tasks.len().div_ceil(jobs);
        std::thread::scope(|scope| {
            let handles: Vec<_> = tasks
                .chunks(chunk)
                .map(|slice| scope.spawn(move || slice.iter().map(one).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(tasks.len());
            for h in handles {
                all.extend(h.join().expect("evaluation thread panicked")?);
            }
            Ok::<_, EvalError>(all)
        })?
    };
    EvalReport::from_results(results, ks)
}

/// Evaluates the model over `tasks`, one adapter set per task from the
/// hypernetwork when present. `jobs` > 1 scores tasks in parallel threads;
/// results are sorted by task_id either way.
pub fn evaluate<T: Scalar>(
    net: &MainNetwork<T>,
    vocab: &Vocab,
    hn: Option<&Hypernetwork<T>>,
    tasks: &[Task],
    ks: &[u32],
    jobs: usize,
) -> Result<EvalReport> {
    let one = |task: &Task| -> Result<TaskResult> {
        let adapters = match hn {
            None => None,
            Some(h) => Some(h.generate_adapters(vocab, &task.description).map_err(|e| {
                EvalError::AdapterGen { task_id: task.task_id.clone(), msg: e.to_string() }
            })?),
        };
        evaluate_task(net, vocab, adapters.as_ref(), task)
    };
    let results: Vec<TaskResult> = if jobs <= 1 || tasks.len() <= 1 {
        tasks.iter().map(one).collect::<Result<_>>()?
    } else {
        let chunk = tasks.len().div_ceil(jobs);
        std::thread::scope(|scope| {
            let handles: Vec<_> = tasks
                .chunks(chunk)
                .map(|slice| scope.spawn(move || slice.iter().map(one).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(tasks.len());
            for h in handles {
                all.extend(h.join().expect("evaluation thread panicked")?);
            }
            Ok::<_, EvalError>(all)
        })?
    };
    EvalReport::from_results(results, ks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Text,
}

impl std::str::FromStr for ReportFormat {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "text" => Ok(ReportFormat::Text),
            other => Err(EvalError::UnknownFormat { name: other.to_string() }),
        }
    }
}

/// Renders the report as an aligned table: one row per task, then the
/// aggregate rows Mean-F1 and C@K (all scaled to 0-100).
pub fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let width = report
        .tasks
        .iter()
        .map(|r| r.task_id.len())
        .chain(["task_id".len(), "Mean-F1".len()])
        .max()
        .unwrap_or(8)
        .max(8);
    out.push_str(&format!("{:<width$}  {:>8}\n", "task_id", "mean_f1"));
    for r in &report.tasks {
        out.push_str(&format!("{:<width$}  {:>8.2}\n", r.task_id, r.mean_f1 * 100.0));
    }
    out.push_str(&format!("{:-<w$}\n", "", w = width + 10));
    out.push_str(&format!("{:<width$}  {:>8.2}\n", "Mean-F1", report.mean_f1 * 100.0));
    for (k, v) in &report.competence {
        out.push_str(&format!("{:<width$}  {:>8.2}\n", format!("C@{k}"), v));
    }
    if !report.meta.is_empty() {
        for (key, value) in &report.meta {
            out.push_str(&format!("# {key}: {value}\n"));
        }
    }
    out
}

/// Writes the report to `path` as pretty JSON or a plain-text table.
pub fn emit_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    let body = match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(report).map_err(|e| EvalError::Invalid(e.to_string()))?
                + "\n"
        }
        ReportFormat::Text => render_text(report),
    };
    std::fs::write(path, body)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Example;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_answer("The Cat."), "cat");
        assert_eq!(normalize_answer("a an the"), "");
        assert_eq!(normalize_answer("  An  Apple,  a day! "), "apple day");
        let once = normalize_answer("The Quick, Brown Fox!");
        assert_eq!(normalize_answer(&once), once, "normalization is idempotent");
    }

    #[test]
    fn f1_fixture_pairs() {
        assert_eq!(token_f1("exact match", "exact match"), 1.0);
        assert_eq!(token_f1("alpha beta", "gamma delta"), 0.0);
        assert_eq!(token_f1("The cat", "cat"), 1.0);
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("something", ""), 0.0);
        assert_eq!(token_f1("", "something"), 0.0);
        // Half overlap on two-token answers: P = R = 0.5.
        assert_eq!(token_f1("x y", "y z"), 0.5);
        // Articles vanish in normalization before counting, so a leading
        // "a" shrinks the prediction to one token instead of scoring 0.5.
        assert_eq!(token_f1("a b", "b c"), 2.0 * (1.0 * 0.5) / 1.5);
        // Multiset counting: a repeated prediction token only matches as
        // many gold copies as exist.
        let f1 = token_f1("dog dog", "dog");
        let expected = 2.0 * (0.5 * 1.0) / 1.5;
        assert!((f1 - expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn f1_is_bounded_and_symmetric(
            a in "[a-c ]{0,12}",
            b in "[a-c ]{0,12}",
        ) {
            let ab = token_f1(&a, &b);
            let ba = token_f1(&b, &a);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-15);
        }
    }

    #[test]
    fn competence_hand_case() {
        let results: Vec<TaskResult> = [0.95, 0.80, 0.91, 0.30]
            .iter()
            .enumerate()
            .map(|(i, &f)| TaskResult { task_id: format!("t{i}"), mean_f1: f, per_example_f1: vec![f] })
            .collect();
        assert_eq!(competence_at_k(&results, 90).unwrap(), 50.0);
        assert_eq!(competence_at_k(&results, 0).unwrap(), 100.0);
        assert!(matches!(competence_at_k(&[], 75), Err(EvalError::EmptyResults)));
    }

    #[test]
    fn competence_boundary_is_strict() {
        let results = vec![TaskResult {
            task_id: "edge".into(),
            mean_f1: 0.90,
            per_example_f1: vec![0.90],
        }];
        assert_eq!(competence_at_k(&results, 90).unwrap(), 0.0);
        assert_eq!(competence_at_k(&results, 89).unwrap(), 100.0);
    }

    proptest! {
        /// Brute-force recount agrees with competence_at_k.
        #[test]
        fn competence_matches_brute_force(
            f1s in proptest::collection::vec(0.0f64..=1.0, 1..40),
            k in 0u32..=100,
        ) {
            let results: Vec<TaskResult> = f1s
                .iter()
                .enumerate()
                .map(|(i, &f)| TaskResult { task_id: format!("t{i}"), mean_f1: f, per_example_f1: vec![f] })
                .collect();
            let got = competence_at_k(&results, k).unwrap();
            let mut count = 0usize;
            for r in &results {
                if r.mean_f1 * 100.0 > f64::from(k) { count += 1; }
            }
            let want = 100.0 * count as f64 / results.len() as f64;
            prop_assert_eq!(got, want);
        }
    }

    fn tiny_setup() -> (MainNetwork<f32>, Vocab) {
        let corpus = ["alpha beta gamma delta", "return word number 1 of the input"];
        let vocab = Vocab::from_corpus(corpus, 1, None);
        let config = ModelConfig { max_len: 32, ..ModelConfig::tiny(vocab.len()) };
        (MainNetwork::init(config, 0).unwrap(), vocab)
    }

    #[test]
    fn evaluate_task_means_match_recomputation() {
        let (net, vocab) = tiny_setup();
        let task = Task {
            task_id: "t".into(),
            description: "return word number 1 of the input".into(),
            examples: vec![
                Example { source: "alpha beta".into(), target: "alpha".into() },
                Example { source: "gamma delta".into(), target: "gamma".into() },
            ],
        };
        let result = evaluate_task(&net, &vocab, None, &task).unwrap();
        assert_eq!(result.per_example_f1.len(), 2);
        let direct: f64 = result.per_example_f1.iter().sum::<f64>() / 2.0;
        assert_eq!(result.mean_f1, direct);
        for f in &result.per_example_f1 {
            assert!((0.0..=1.0).contains(f));
        }
    }

    #[test]
    fn zero_adapters_score_exactly_like_none() {
        let (net, vocab) = tiny_setup();
        let task = Task {
            task_id: "t".into(),
            description: "return word number 1 of the input".into(),
            examples: vec![Example { source: "alpha beta gamma".into(), target: "alpha".into() }],
        };
        let zero = AdapterSet::zeros(net.config.n_layers(), net.config.h, net.config.adapter_width);
        let bare = evaluate_task(&net, &vocab, None, &task).unwrap();
        let adapted = evaluate_task(&net, &vocab, Some(&zero), &task).unwrap();
        assert_eq!(bare, adapted);
    }

    #[test]
    fn evaluate_is_read_only_and_parallel_matches_serial() {
        let (net, vocab) = tiny_setup();
        let tasks: Vec<Task> = (0..4)
            .map(|i| Task {
                task_id: format!("t{i}"),
                description: "return word number 1 of the input".into(),
                examples: vec![Example { source: "alpha beta".into(), target: "alpha".into() }],
            })
            .collect();
        let before = net.checksum();
        let serial = evaluate(&net, &vocab, None, &tasks, &DEFAULT_COMPETENCE_KS, 1).unwrap();
        let parallel = evaluate(&net, &vocab, None, &tasks, &DEFAULT_COMPETENCE_KS, 3).unwrap();
        assert_eq!(net.checksum(), before, "evaluation must not mutate the model");
        assert_eq!(serial, parallel);
        assert_eq!(serial.tasks.len(), 4);
        assert!(serial.competence[&90] <= serial.competence[&75], "competence is monotone");
    }

    #[test]
    fn aggregate_mean_is_mean_of_task_means() {
        let results = vec![
            TaskResult { task_id: "b".into(), mean_f1: 0.5, per_example_f1: vec![0.5] },
            TaskResult { task_id: "a".into(), mean_f1: 1.0, per_example_f1: vec![1.0] },
            TaskResult { task_id: "c".into(), mean_f1: 0.25, per_example_f1: vec![0.25] },
        ];
        let report = EvalReport::from_results(results, &DEFAULT_COMPETENCE_KS).unwrap();
        assert!((report.mean_f1 - (0.5 + 1.0 + 0.25) / 3.0).abs() < 1e-15);
        let ids: Vec<&str> = report.tasks.iter().map(|r| r.task_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"], "results sorted by task_id");
    }

    #[test]
    fn report_json_roundtrip_and_text_rows() {
        let results = vec![
            TaskResult { task_id: "x".into(), mean_f1: 0.8, per_example_f1: vec![0.8, 0.8] },
            TaskResult { task_id: "y".into(), mean_f1: 0.95, per_example_f1: vec![0.9, 1.0] },
        ];
        let mut report = EvalReport::from_results(results, &DEFAULT_COMPETENCE_KS).unwrap();
        report.meta.insert("dataset".into(), serde_json::json!("fixture"));
        let dir = tempfile::tempdir().unwrap();
        let json_path = dir.path().join("report.json");
        emit_report(&report, &json_path, ReportFormat::Json).unwrap();
        let loaded: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(loaded, report);
        // The JSON schema uses string keys for competence percentages.
        let raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert!(raw["competence"]["75"].is_number());
        assert!(raw["tasks"][0]["per_example_f1"].is_array());

        let text_path = dir.path().join("report.txt");
        emit_report(&report, &text_path, ReportFormat::Text).unwrap();
        let text = std::fs::read_to_string(&text_path).unwrap();
        assert!(text.contains("Mean-F1"), "{text}");
        assert!(text.contains("C@75"), "{text}");
        assert!(text.contains("C@90"), "{text}");
    }

    #[test]
    fn unknown_format_lists_valid_ones() {
        let err = "yaml".parse::<ReportFormat>().unwrap_err().to_string();
        assert!(err.contains("json") && err.contains("text"), "{err}");
    }
}
