//! Prompt templates and response parsers.
//!
//! Templates use `{Name}` placeholders filled in a single pass: substituted
//! values are never rescanned, and `{{` / `}}` stand for literal braces.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::render::ColorMap;
use crate::scene::{Frame, SceneAbstraction, CAMERA_LABEL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("template {template} has no value for {{{field}}}")]
    MissingField { template: &'static str, field: String },
    #[error("template {template} does not use field {field}")]
    UnusedField { template: &'static str, field: String },
    #[error("template {template} has an unterminated placeholder")]
    Malformed { template: &'static str },
    #[error("could not parse response {0:?}")]
    Parse(String),
    #[error("perspective {0:?} matches no extracted object")]
    UnknownPerspective(String),
    #[error("no object label of {0:?} occurs in the question")]
    NoReplacement(String),
    #[error("numerical prompt needs a viewer-egocentric scene")]
    WrongFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Objects,
    Perspective,
    Rephrase,
    Visual,
    Numerical,
    Refine,
    Judge,
    Direct,
}

pub const TEMPLATES: [Template; 8] = [
    Template::Objects,
    Template::Perspective,
    Template::Rephrase,
    Template::Visual,
    Template::Numerical,
    Template::Refine,
    Template::Judge,
    Template::Direct,
];

impl Template {
    pub fn name(self) -> &'static str {
        match self {
            Template::Objects => "objects",
            Template::Perspective => "perspective",
            Template::Rephrase => "rephrase",
            Template::Visual => "visual",
            Template::Numerical => "numerical",
            Template::Refine => "refine",
            Template::Judge => "judge",
            Template::Direct => "direct",
        }
    }

    pub fn text(self) -> &'static str {
        match self {
            Template::Objects => include_str!("../templates/objects.txt"),
            Template::Perspective => include_str!("../templates/perspective.txt"),
            Template::Rephrase => include_str!("../templates/rephrase.txt"),
            Template::Visual => include_str!("../templates/visual.txt"),
            Template::Numerical => include_str!("../templates/numerical.txt"),
            Template::Refine => include_str!("../templates/refine.txt"),
            Template::Judge => include_str!("../templates/judge.txt"),
            Template::Direct => include_str!("../templates/direct.txt"),
        }
    }

    pub fn sha256(self) -> String {
        hex::encode(Sha256::digest(self.text().as_bytes()))
    }

    /// Substitute every placeholder. Every placeholder needs a value and
    /// every value must be used.
    pub fn fill(self, fields: &[(&str, &str)]) -> Result<String, PromptError> {
        let text = self.text();
        let mut out = String::with_capacity(text.len() + 256);
        let mut used = vec![false; fields.len()];
        let mut rest = text;
        while let Some(i) = rest.find(['{', '}']) {
            out.push_str(&rest[..i]);
            let tail = &rest[i..];
            if tail.starts_with("{{") {
                out.push('{');
                rest = &tail[2..];
            } else if tail.starts_with("}}") {
                out.push('}');
                rest = &tail[2..];
            } else if tail.starts_with('}') {
                return Err(PromptError::Malformed { template: self.name() });
            } else {
                let end = tail.find('}').ok_or(PromptError::Malformed { template: self.name() })?;
                let name = &tail[1..end];
                let k = fields
                    .iter()
                    .position(|(f, _)| *f == name)
                    .ok_or_else(|| PromptError::MissingField {
                        template: self.name(),
                        field: name.to_string(),
                    })?;
                used[k] = true;
                out.push_str(fields[k].1);
                rest = &tail[end + 1..];
            }
        }
        out.push_str(rest);
        if let Some(k) = used.iter().position(|u| !u) {
            return Err(PromptError::UnusedField {
                template: self.name(),
                field: fields[k].0.to_string(),
            });
        }
        Ok(out)
    }
}

/// Template name to SHA-256 of its text.
pub fn template_hashes() -> BTreeMap<String, String> {
    TEMPLATES.iter().map(|t| (t.name().to_string(), t.sha256())).collect()
}

pub fn objects_prompt(question: &str) -> String {
    Template::Objects.fill(&[("Question", question)]).expect("fixed template")
}

/// The option list always ends with the camera.
pub fn perspective_prompt(question: &str, objects: &[String]) -> String {
    let mut options: Vec<&str> = objects.iter().map(String::as_str).filter(|o| *o != CAMERA_LABEL).collect();
    options.push(CAMERA_LABEL);
    Template::Perspective
        .fill(&[("Question", question), ("Options", &options.join(", "))])
        .expect("fixed template")
}

pub fn rephrase_prompt(question: &str) -> String {
    Template::Rephrase.fill(&[("Question", question)]).expect("fixed template")
}

pub fn visual_prompt(question: &str) -> String {
    Template::Visual.fill(&[("Question", question)]).expect("fixed template")
}

pub fn direct_prompt(question: &str) -> String {
    Template::Direct.fill(&[("Question", question)]).expect("fixed template")
}

pub fn refine_prompt(label: &str, count: usize) -> String {
    Template::Refine
        .fill(&[("Count", &count.to_string()), ("Label", label)])
        .expect("fixed template")
}

pub fn judge_prompt(question: &str, options: &[String], answer: &str, target: &str) -> String {
    Template::Judge
        .fill(&[
            ("Question", question),
            ("Options", &options.join(", ")),
            ("Answer", answer),
            ("Target", target),
        ])
        .expect("fixed template")
}

/// Question categories of the synthetic benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    LeftRight,
    Closer,
    Visibility,
    Facing,
    Other,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::LeftRight => "leftright",
            Task::Closer => "closer",
            Task::Visibility => "visibility",
            Task::Facing => "facing",
            Task::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "leftright" => Some(Task::LeftRight),
            "closer" => Some(Task::Closer),
            "visibility" => Some(Task::Visibility),
            "facing" => Some(Task::Facing),
            "other" => Some(Task::Other),
            _ => None,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A question as it moves through the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub raw: String,
    pub options: Vec<String>,
    pub task: Task,
    #[serde(default)]
    pub extracted_objects: Vec<String>,
    #[serde(default)]
    pub reference: Option<Perspective>,
    #[serde(default)]
    pub egocentric_text: Option<String>,
    #[serde(default)]
    pub abstract_text: Option<String>,
}

impl Question {
    pub fn new(raw: impl Into<String>, options: Vec<String>, task: Task) -> Self {
        Self {
            raw: raw.into(),
            options,
            task,
            extracted_objects: Vec::new(),
            reference: None,
            egocentric_text: None,
            abstract_text: None,
        }
    }
}

/// Option letter for a zero-based index: 0 -> 'A'.
pub fn option_letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

/// `"<stem> Options: A. x, B. y."`
pub fn format_question(stem: &str, options: &[String]) -> String {
    let listed: Vec<String> = options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{}. {o}", option_letter(i)))
        .collect();
    format!("{stem} Options: {}.", listed.join(", "))
}

/// Inverse of [`format_question`]; `None` when there is no option suffix.
pub fn split_options(question: &str) -> Option<(&str, Vec<String>)> {
    let (stem, list) = question.rsplit_once(" Options: ")?;
    let list = list.trim().strip_suffix('.').unwrap_or(list.trim());
    let mut options = Vec::new();
    for (i, item) in list.split(", ").enumerate() {
        let prefix = format!("{}. ", option_letter(i));
        options.push(item.strip_prefix(prefix.as_str())?.to_string());
    }
    Some((stem, options))
}

fn fmt2(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".to_string()
    } else {
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NumericalOptions {
    /// Append each object's facing direction after its position.
    pub include_facing: bool,
}

/// Coordinate lines for every object except the camera and the reference,
/// in scene order.
pub fn coordinate_lines(scene: &SceneAbstraction, opts: NumericalOptions) -> Result<String, PromptError> {
    let Frame::ViewerEgocentric(reference) = scene.frame() else {
        return Err(PromptError::WrongFrame);
    };
    let mut out = String::new();
    for o in scene.objects().iter().filter(|o| !o.is_camera && &o.label != reference) {
        if !out.is_empty() {
            out.push('\n');
        }
        let p = o.position;
        write!(out, "- {}: [{}, {}, {}]", o.label, fmt2(p.x), fmt2(p.y), fmt2(p.z)).unwrap();
        if opts.include_facing {
            let d = o.orientation;
            write!(out, ", facing [{}, {}, {}]", fmt2(d.x), fmt2(d.y), fmt2(d.z)).unwrap();
        }
    }
    Ok(out)
}

pub fn numerical_prompt(scene: &SceneAbstraction, question: &str, opts: NumericalOptions) -> Result<String, PromptError> {
    let Frame::ViewerEgocentric(reference) = scene.frame() else {
        return Err(PromptError::WrongFrame);
    };
    let coords = coordinate_lines(scene, opts)?;
    Template::Numerical.fill(&[("src_obj", reference), ("Coordinates", &coords), ("Question", question)])
}

/// Entities after the last `[Detect]` marker: either a bracketed list or the
/// rest of the line. Trimmed, lowercased, deduplicated, order kept.
pub fn parse_object_list(response: &str) -> Result<Vec<String>, PromptError> {
    let Some(i) = response.rfind("[Detect]") else {
        return Err(PromptError::Parse(response.to_string()));
    };
    let tail = &response[i + "[Detect]".len()..];
    let tail = tail.trim_start();
    let body = if let Some(rest) = tail.strip_prefix('[') {
        rest.split(']').next().unwrap_or(rest)
    } else {
        tail.lines().next().unwrap_or("")
    };
    let mut out: Vec<String> = Vec::new();
    for item in body.split(',') {
        let item = item
            .trim()
            .trim_matches(|c: char| c == '"' || c == '\'' || c == '`' || c == '.')
            .trim()
            .to_lowercase();
        if !item.is_empty() && !out.contains(&item) {
            out.push(item);
        }
    }
    if out.is_empty() {
        return Err(PromptError::Parse(response.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perspective {
    Camera,
    Object(String),
}

/// Read `++name++` and resolve it against the known objects: exact
/// (case-insensitive) match first, then containment either way.
pub fn parse_perspective(response: &str, objects: &[String]) -> Result<Perspective, PromptError> {
    let parts: Vec<&str> = response.split("++").collect();
    if parts.len() < 3 {
        return Err(PromptError::Parse(response.to_string()));
    }
    // the token between the last pair of markers
    let token = parts[parts.len() - 2].trim().to_lowercase();
    let unknown = || PromptError::UnknownPerspective(token.clone());
    if token.is_empty() {
        return Err(unknown());
    }
    if token == CAMERA_LABEL {
        return Ok(Perspective::Camera);
    }
    if let Some(o) = objects.iter().find(|o| o.to_lowercase() == token) {
        return Ok(Perspective::Object(o.clone()));
    }
    let stripped = token.trim_start_matches("the ");
    let mut hits = objects.iter().filter(|o| {
        let o = o.to_lowercase();
        o.contains(stripped) || stripped.contains(&o)
    });
    match (hits.next(), hits.next()) {
        (Some(o), None) => Ok(Perspective::Object(o.clone())),
        _ if stripped.contains(CAMERA_LABEL) => Ok(Perspective::Camera),
        _ => Err(unknown()),
    }
}

/// First non-empty line of the reply, minus an echoed `[Output]` marker.
/// Falls back to the original question (with a warning) when empty.
pub fn parse_rephrase(response: &str, question: &str) -> (String, Option<String>) {
    let tail = match response.rfind("[Output]") {
        Some(i) => &response[i + "[Output]".len()..],
        None => response,
    };
    match tail.lines().map(str::trim).find(|l| !l.is_empty()) {
        Some(line) => (line.to_string(), None),
        None => (
            question.to_string(),
            Some("empty rephrase response, keeping the original question".to_string()),
        ),
    }
}

/// Replace each coloured object's label with "<colour> box". Longer labels
/// win over their prefixes; replaced text is not rescanned.
pub fn abstract_question(question: &str, colors: &ColorMap) -> Result<String, PromptError> {
    let mut labels: Vec<&str> = colors.entries().iter().map(|e| e.label.as_str()).collect();
    labels.sort_by_key(|l| std::cmp::Reverse(l.len()));
    if labels.is_empty() {
        return Err(PromptError::NoReplacement(question.to_string()));
    }
    let alternation = labels.iter().map(|l| regex::escape(l)).collect::<Vec<_>>().join("|");
    let re = Regex::new(&format!(r"(?i)\b(?:{alternation})\b")).expect("escaped labels");
    let mut hit = false;
    let out = re.replace_all(question, |c: &regex::Captures<'_>| {
        hit = true;
        let m = c[0].to_lowercase();
        let entry = colors
            .entries()
            .iter()
            .find(|e| e.label.to_lowercase() == m)
            .expect("alternation only matches known labels");
        format!("{} box", entry.color.name())
    });
    if !hit {
        return Err(PromptError::NoReplacement(question.to_string()));
    }
    Ok(out.into_owned())
}

/// First integer in the reply, for the crop-selection prompt.
pub fn parse_index(response: &str) -> Option<usize> {
    let digits: String = response
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(char::is_ascii_digit)
        .collect();
    digits.parse().ok()
}
