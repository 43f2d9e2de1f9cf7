//! Scoring: cyclic option permutations, exact match with a judge fallback,
//! circular verdicts and per-task / per-angle aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clients::{Session, Stage};
use crate::prompt::{judge_prompt, option_letter, Task};

pub const MIN_OPTIONS: usize = 2;
pub const MAX_OPTIONS: usize = 6;
pub const DEFAULT_BUCKET_DEG: f64 = 18.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{0} options; permutations need between 2 and 6")]
    TooManyOptions(usize),
    #[error("no records to aggregate")]
    NoRecords,
    #[error("bucket width {0} must be positive")]
    InvalidBucket(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Match {
    Correct,
    Incorrect,
    /// Neither a sole option index nor an exact option text.
    Undecided,
}

/// The `N` cyclic rotations of `options`, starting with the original order.
pub fn permutations<T: Clone>(options: &[T]) -> Result<Vec<Vec<T>>, EvalError> {
    let n = options.len();
    if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&n) {
        return Err(EvalError::TooManyOptions(n));
    }
    Ok((0..n)
        .map(|k| options[k..].iter().chain(&options[..k]).cloned().collect())
        .collect())
}

fn normalize(s: &str) -> String {
    s.trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .to_lowercase()
}

/// Option index named by `response` through its letter, its 1-based number
/// or its exact text.
pub fn chosen_option(response: &str, options: &[String]) -> Option<usize> {
    let r = normalize(response);
    if r.is_empty() {
        return None;
    }
    let names = |i: usize, o: &String| {
        r == option_letter(i).to_ascii_lowercase().to_string() || r == (i + 1).to_string() || r == normalize(o)
    };
    let hits: Vec<usize> = options.iter().enumerate().filter(|(i, o)| names(*i, o)).map(|(i, _)| i).collect();
    match hits.as_slice() {
        [one] => Some(*one),
        _ => None,
    }
}

pub fn exact_match(response: &str, options: &[String], answer: usize) -> Match {
    let r = normalize(response);
    if r.is_empty() {
        return Match::Undecided;
    }
    let names = |i: usize| {
        r == option_letter(i).to_ascii_lowercase().to_string()
            || r == (i + 1).to_string()
            || options.get(i).is_some_and(|o| r == normalize(o))
    };
    if names(answer) {
        Match::Correct
    } else if (0..options.len()).any(names) {
        Match::Incorrect
    } else {
        Match::Undecided
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Judgement {
    pub verdict: Verdict,
    /// Set when the verdict was forced to Incorrect for lack of a usable
    /// judge reply.
    pub flag: Option<String>,
}

pub fn judge_key(response: &str, question: &str, answer: &str) -> String {
    let mut h = Sha256::new();
    for part in [response, question, answer] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

fn parse_yes_no(reply: &str) -> Option<bool> {
    let first = reply
        .split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .find(|w| !w.is_empty())?
        .to_lowercase();
    match first.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Ask the judge whether `response` selects `options[answer]`. Empty
/// responses are Incorrect without a call; anything but a yes/no reply is
/// Incorrect and flagged.
pub fn llm_judge(session: &mut Session<'_>, response: &str, question: &str, options: &[String], answer: usize) -> Judgement {
    if response.trim().is_empty() {
        return Judgement {
            verdict: Verdict::Incorrect,
            flag: None,
        };
    }
    let target = &options[answer];
    let prompt = judge_prompt(question, options, response.trim(), target);
    match session.judge(&judge_key(response, question, target), &prompt) {
        Ok(reply) => match parse_yes_no(&reply) {
            Some(true) => Judgement {
                verdict: Verdict::Correct,
                flag: None,
            },
            Some(false) => Judgement {
                verdict: Verdict::Incorrect,
                flag: None,
            },
            None => {
                let msg = format!("unparseable judge reply {reply:?}");
                session.warn(Stage::Judge, msg.clone());
                Judgement {
                    verdict: Verdict::Incorrect,
                    flag: Some(msg),
                }
            }
        },
        Err(e) => {
            let msg = format!("judge failed: {e}");
            session.warn(Stage::Judge, msg.clone());
            Judgement {
                verdict: Verdict::Incorrect,
                flag: Some(msg),
            }
        }
    }
}

/// Exact match first, then the judge for undecided responses.
pub fn score_response(
    session: &mut Session<'_>,
    response: &str,
    question: &str,
    options: &[String],
    answer: usize,
) -> Judgement {
    match exact_match(response, options, answer) {
        Match::Correct => Judgement {
            verdict: Verdict::Correct,
            flag: None,
        },
        Match::Incorrect => Judgement {
            verdict: Verdict::Incorrect,
            flag: None,
        },
        Match::Undecided => llm_judge(session, response, question, options, answer),
    }
}

/// Correct only if every permutation was answered correctly.
pub fn circular_eval(verdicts: &[Verdict]) -> Verdict {
    if !verdicts.is_empty() && verdicts.iter().all(|v| *v == Verdict::Correct) {
        Verdict::Correct
    } else {
        Verdict::Incorrect
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermRecord {
    pub order: Vec<String>,
    pub response: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub task: Task,
    pub theta: f64,
    pub perms: Vec<PermRecord>,
    pub circular: Verdict,
}

impl EvalRecord {
    pub fn new(id: impl Into<String>, task: Task, theta: f64, perms: Vec<PermRecord>) -> Self {
        let verdicts: Vec<Verdict> = perms.iter().map(|p| p.verdict).collect();
        Self {
            id: id.into(),
            task,
            theta,
            circular: circular_eval(&verdicts),
            perms,
        }
    }

    pub fn failed(&self) -> bool {
        self.perms.iter().any(|p| p.failure.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub correct: usize,
    pub total: usize,
    pub failures: usize,
}

impl TaskStats {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketPoint {
    pub theta_bucket: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tasks: BTreeMap<Task, TaskStats>,
    pub overall: TaskStats,
    pub buckets: Vec<BucketPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
}

fn bucket_of(theta: f64, width: f64) -> f64 {
    let c = (theta / width).round() * width;
    let c = c.rem_euclid(360.0);
    let c = if c > 180.0 { c - 360.0 } else { c };
    // keep 180 rather than its -180 twin, and avoid -0
    if c == 0.0 {
        0.0
    } else {
        c
    }
}

/// Accuracy per theta bucket, buckets centred on multiples of `width`.
pub fn angle_buckets(records: &[EvalRecord], width: f64) -> Result<Vec<BucketPoint>, EvalError> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(EvalError::InvalidBucket(width));
    }
    let mut acc: BTreeMap<i64, (usize, usize)> = BTreeMap::new();
    for r in records {
        let key = (bucket_of(r.theta, width) * 1e6).round() as i64;
        let slot = acc.entry(key).or_default();
        slot.1 += 1;
        if r.circular == Verdict::Correct {
            slot.0 += 1;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(k, (c, n))| BucketPoint {
            theta_bucket: k as f64 / 1e6,
            accuracy: c as f64 / n as f64,
            count: n,
        })
        .collect())
}

pub fn aggregate(records: &[EvalRecord], bucket_width: f64) -> Result<Report, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let mut tasks: BTreeMap<Task, TaskStats> = BTreeMap::new();
    let mut overall = TaskStats {
        correct: 0,
        total: 0,
        failures: 0,
    };
    for r in records {
        for s in [
            tasks.entry(r.task).or_insert(TaskStats {
                correct: 0,
                total: 0,
                failures: 0,
            }),
            &mut overall,
        ] {
            s.total += 1;
            s.correct += usize::from(r.circular == Verdict::Correct);
            s.failures += usize::from(r.failed());
        }
    }
    Ok(Report {
        tasks,
        overall,
        buckets: angle_buckets(records, bucket_width)?,
        manifest: None,
    })
}

impl Report {
    pub fn bucket(&self, theta: f64) -> Option<&BucketPoint> {
        self.buckets.iter().find(|b| (b.theta_bucket - theta).abs() < 1e-6)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>8} {:>7} {:>8} {:>8}", "task", "accuracy", "items", "correct", "failures");
        let rows = self.tasks.iter().map(|(t, s)| (t.name(), s)).chain([("all", &self.overall)]);
        for (name, s) in rows {
            let _ = writeln!(
                out,
                "{:<12} {:>8.4} {:>7} {:>8} {:>8}",
                name,
                s.accuracy(),
                s.total,
                s.correct,
                s.failures
            );
        }
        if !self.buckets.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:>8} {:>8} {:>7}", "theta", "accuracy", "items");
            for b in &self.buckets {
                let _ = writeln!(out, "{:>8.1} {:>8.4} {:>7}", b.theta_bucket, b.accuracy, b.count);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta_bucket,accuracy,count\n");
        for b in &self.buckets {
            let _ = writeln!(out, "{},{:.6},{}", b.theta_bucket, b.accuracy, b.count);
        }
        out
    }
}
