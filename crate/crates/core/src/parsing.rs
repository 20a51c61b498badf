//! Turning raw agent text into structured observations.
//!
//! Agents are asked to end their response with two marker lines:
//!
//! ```text
//! Final Answer: <answer>
//! Confidence: <number in [0, 1]>
//! ```
//!
//! A tagged answer is the normal path. When the marker is missing the parser
//! falls back to reading the last non-empty line and flags the observation as
//! malformed so the belief stage can penalize it.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::CalibrationParams;

const ANSWER_MARKER: &str = "final answer:";
const CONFIDENCE_MARKER: &str = "confidence:";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no {kind} candidate could be extracted from {input:?}")]
    CanonicalizationFailure { kind: &'static str, input: String },
    #[error("multiple-choice task needs at least one option")]
    EmptyOptions,
    #[error("duplicate multiple-choice option {0:?}")]
    DuplicateOption(String),
    #[error("observation from agent {0:?} is not valid")]
    InvalidObservation(String),
}

/// The shape of answer a task expects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Numeric,
    MultipleChoice { options: Vec<String> },
    Label,
    FreeText,
}

impl TaskKind {
    /// Builds a multiple-choice kind. Options are uppercased and must be
    /// non-empty and distinct.
    pub fn multiple_choice<I, S>(options: I) -> Result<Self, ParseError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out: Vec<String> = Vec::new();
        for opt in options {
            let opt = opt.as_ref().trim().to_uppercase();
            if opt.is_empty() {
                return Err(ParseError::EmptyOptions);
            }
            if out.contains(&opt) {
                return Err(ParseError::DuplicateOption(opt));
            }
            out.push(opt);
        }
        if out.is_empty() {
            return Err(ParseError::EmptyOptions);
        }
        Ok(TaskKind::MultipleChoice { options: out })
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Numeric => "numeric",
            TaskKind::MultipleChoice { .. } => "multiple_choice",
            TaskKind::Label => "label",
            TaskKind::FreeText => "free_text",
        }
    }

    pub fn options(&self) -> &[String] {
        match self {
            TaskKind::MultipleChoice { options } => options,
            _ => &[],
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    Tagged,
    Heuristic,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseQuality {
    pub malformed: bool,
    pub extraction_method: ExtractionMethod,
}

/// One agent's response reduced to the fields aggregation needs.
///
/// `canonical` is `Some` exactly when `valid` is true.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedObservation {
    pub agent_id: String,
    pub raw_candidate: String,
    pub canonical: Option<String>,
    pub confidence: Option<f64>,
    pub valid: bool,
    pub quality: ParseQuality,
}

impl ParsedObservation {
    /// An observation that carries no usable candidate.
    pub fn invalid(agent_id: impl Into<String>) -> Self {
        ParsedObservation {
            agent_id: agent_id.into(),
            raw_candidate: String::new(),
            canonical: None,
            confidence: None,
            valid: false,
            quality: ParseQuality {
                malformed: false,
                extraction_method: ExtractionMethod::None,
            },
        }
    }

    /// Canonical key of a valid observation.
    pub fn key(&self) -> Option<&str> {
        if self.valid {
            self.canonical.as_deref()
        } else {
            None
        }
    }
}

/// Parses one raw response. Never fails: unusable text yields `valid = false`.
pub fn parse_response(raw: &str, kind: &TaskKind, agent_id: &str) -> ParsedObservation {
    let mut malformed = false;
    let confidence = match find_marker(raw, CONFIDENCE_MARKER) {
        Some(text) => match parse_confidence(text) {
            Some((c, clamped)) => {
                malformed |= clamped;
                Some(c)
            }
            None => None,
        },
        None => None,
    };

    if let Some(answer) = find_marker(raw, ANSWER_MARKER) {
        let answer = answer.trim();
        if !answer.is_empty() {
            return match canonicalize(answer, kind) {
                Ok(z) => observation(agent_id, answer, Some(z), confidence, malformed, ExtractionMethod::Tagged),
                // Symbolic numeric answers we cannot evaluate keep a folded
                // key but count as malformed.
                Err(_) if matches!(kind, TaskKind::Numeric) => match fold_free_text(answer) {
                    Some(z) => observation(agent_id, answer, Some(z), confidence, true, ExtractionMethod::Tagged),
                    None => rejected(agent_id, answer, confidence, ExtractionMethod::Tagged),
                },
                Err(_) => rejected(agent_id, answer, confidence, ExtractionMethod::Tagged),
            };
        }
    }

    let last_line = raw
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !starts_with_marker(l, CONFIDENCE_MARKER))
        .last();
    if let Some(line) = last_line {
        if let Some((answer, z)) = heuristic_extract(line, kind) {
            return observation(agent_id, &answer, Some(z), confidence, true, ExtractionMethod::Heuristic);
        }
    }

    let mut obs = ParsedObservation::invalid(agent_id);
    obs.confidence = confidence;
    obs
}

fn observation(
    agent_id: &str,
    answer: &str,
    canonical: Option<String>,
    confidence: Option<f64>,
    malformed: bool,
    method: ExtractionMethod,
) -> ParsedObservation {
    ParsedObservation {
        agent_id: agent_id.to_string(),
        raw_candidate: answer.to_string(),
        valid: canonical.is_some(),
        canonical,
        confidence,
        quality: ParseQuality {
            malformed,
            extraction_method: method,
        },
    }
}

fn rejected(agent_id: &str, answer: &str, confidence: Option<f64>, method: ExtractionMethod) -> ParsedObservation {
    observation(agent_id, answer, None, confidence, true, method)
}

/// Text preceding the trailing answer/confidence marker block, or everything
/// but the last line when the response is untagged.
pub fn reasoning_text(raw: &str) -> &str {
    let mut offset = 0;
    let mut tail_start = None;
    for line in raw.split_inclusive('\n') {
        let t = line.trim();
        if starts_with_marker(t, ANSWER_MARKER) || starts_with_marker(t, CONFIDENCE_MARKER) {
            tail_start.get_or_insert(offset);
        } else if !t.is_empty() {
            tail_start = None;
        }
        offset += line.len();
    }
    if let Some(end) = tail_start {
        return raw[..end].trim_end();
    }
    let trimmed = raw.trim_end();
    match trimmed.rfind('\n') {
        Some(i) => trimmed[..i].trim_end(),
        None => "",
    }
}

fn strip_line_decoration(line: &str) -> &str {
    line.trim().trim_start_matches(['*', '#', '>', '-', ' ']).trim_start()
}

fn starts_with_marker(line: &str, marker: &str) -> bool {
    let l = strip_line_decoration(line);
    l.len() >= marker.len() && l.is_char_boundary(marker.len()) && l[..marker.len()].eq_ignore_ascii_case(marker)
}

/// Value of the last line carrying `marker`.
fn find_marker<'a>(raw: &'a str, marker: &str) -> Option<&'a str> {
    raw.lines().rev().find_map(|line| {
        let l = strip_line_decoration(line);
        if starts_with_marker(l, marker) {
            Some(l[marker.len()..].trim().trim_matches('*').trim())
        } else {
            None
        }
    })
}

/// Returns the confidence and whether it had to be clamped into [0, 1].
fn parse_confidence(text: &str) -> Option<(f64, bool)> {
    let text = text.trim().trim_end_matches('.');
    let (num, scale) = match text.strip_suffix('%') {
        Some(n) => (n.trim(), 100.0),
        None => (text, 1.0),
    };
    let value: f64 = num.parse().ok()?;
    if !value.is_finite() {
        return None;
    }
    let value = value / scale;
    if (0.0..=1.0).contains(&value) {
        Some((value, false))
    } else {
        Some((value.clamp(0.0, 1.0), true))
    }
}

fn heuristic_extract(line: &str, kind: &TaskKind) -> Option<(String, String)> {
    if let Ok(z) = canonicalize(line, kind) {
        return Some((line.to_string(), z));
    }
    match kind {
        TaskKind::Numeric => {
            let token = last_number_token(line)?;
            let z = canonicalize(&token, kind).ok()?;
            Some((token, z))
        }
        TaskKind::MultipleChoice { options } => {
            // Last standalone uppercase token naming an option, e.g. "The answer is B".
            let token = line
                .split(|c: char| !c.is_alphanumeric())
                .filter(|t| !t.is_empty())
                .filter(|t| t.chars().all(|c| !c.is_lowercase()))
                .filter(|t| options.iter().any(|o| o == t))
                .last()?;
            Some((token.to_string(), token.to_string()))
        }
        TaskKind::Label | TaskKind::FreeText => None,
    }
}

fn last_number_token(line: &str) -> Option<String> {
    let chars: Vec<char> = line.chars().collect();
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < chars.len() {
        let starts = chars[i].is_ascii_digit()
            || (chars[i] == '.' && chars.get(i + 1).is_some_and(|c| c.is_ascii_digit()));
        if !starts {
            i += 1;
            continue;
        }
        let mut start = i;
        if start > 0 && chars[start - 1] == '-' {
            start -= 1;
        }
        let mut end = i;
        while end < chars.len() {
            let c = chars[end];
            let next_digit = chars.get(end + 1).is_some_and(|n| n.is_ascii_digit());
            if c.is_ascii_digit() || ((c == '.' || c == ',' || c == '/') && next_digit) {
                end += 1;
            } else {
                break;
            }
        }
        best = Some((start, end));
        i = end.max(i + 1);
    }
    best.map(|(s, e)| chars[s..e].iter().collect())
}

/// Maps a candidate answer to the key under which equivalent answers collide.
pub fn canonicalize(answer: &str, kind: &TaskKind) -> Result<String, ParseError> {
    let failure = || ParseError::CanonicalizationFailure {
        kind: kind.name(),
        input: answer.to_string(),
    };
    match kind {
        TaskKind::Numeric => parse_numeric(answer).map(|r| render_rational(&r)).ok_or_else(failure),
        TaskKind::MultipleChoice { options } => extract_option(answer, options).ok_or_else(failure),
        TaskKind::Label => {
            let folded = answer
                .trim()
                .trim_end_matches(|c: char| matches!(c, '.' | ',' | '!' | '?' | ';' | ':'))
                .trim()
                .to_lowercase();
            if folded.is_empty() {
                Err(failure())
            } else {
                Ok(folded)
            }
        }
        TaskKind::FreeText => fold_free_text(answer).ok_or_else(failure),
    }
}

fn fold_free_text(answer: &str) -> Option<String> {
    let folded = answer.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    (!folded.is_empty()).then_some(folded)
}

fn extract_option(answer: &str, options: &[String]) -> Option<String> {
    let text = answer.trim();
    let text = strip_prefix_ci(text, "option").unwrap_or(text).trim_start();
    let first: String = text
        .trim_start_matches(['(', '[', '*', '"', '\''])
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect();
    let rest = &text[text.find(first.as_str()).map_or(0, |i| i + first.len())..];
    let first = first.to_uppercase();
    // The identifier must stand alone: "B", "(B)", "B) Paris", "B. Paris", "B: Paris".
    let boundary = rest
        .chars()
        .next()
        .is_none_or(|c| matches!(c, ')' | ']' | '.' | ':' | ',' | '*' | '"' | '\'') || c.is_whitespace());
    if boundary && options.iter().any(|o| *o == first) {
        return Some(first);
    }
    None
}

fn strip_prefix_ci<'a>(text: &'a str, prefix: &str) -> Option<&'a str> {
    if text.len() > prefix.len() && text.is_char_boundary(prefix.len()) && text[..prefix.len()].eq_ignore_ascii_case(prefix) {
        let rest = &text[prefix.len()..];
        rest.starts_with(char::is_whitespace).then_some(rest)
    } else {
        None
    }
}

fn unwrap_command<'a>(text: &'a str, command: &str) -> Option<&'a str> {
    let inner = text.strip_prefix(command)?.strip_prefix('{')?;
    let close = matching_brace(inner)?;
    (close == inner.len() - 1).then(|| &inner[..close])
}

/// Byte offset of the `}` closing an already opened brace.
fn matching_brace(text: &str) -> Option<usize> {
    let mut depth = 1usize;
    for (i, c) in text.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn strip_math_wrappers(mut text: &str) -> &str {
    loop {
        let before = text;
        text = text.trim();
        for (open, close) in [("$$", "$$"), ("\\(", "\\)"), ("\\[", "\\]"), ("$", "$")] {
            if text.len() >= open.len() + close.len() {
                if let Some(inner) = text.strip_prefix(open).and_then(|t| t.strip_suffix(close)) {
                    text = inner;
                }
            }
        }
        for cmd in ["\\boxed", "\\fbox", "\\text", "\\mathrm", "\\textbf", "\\mathbf"] {
            if let Some(inner) = unwrap_command(text, cmd) {
                text = inner;
            }
        }
        if text == before {
            return text;
        }
    }
}

fn parse_numeric(answer: &str) -> Option<BigRational> {
    let text = strip_math_wrappers(answer);
    let (negative, body) = match text.strip_prefix('-') {
        Some(b) => (true, b.trim_start()),
        None => (false, text),
    };
    for cmd in ["\\dfrac", "\\tfrac", "\\frac"] {
        if body.starts_with(cmd) {
            let value = parse_frac(body, cmd)?;
            return Some(if negative { -value } else { value });
        }
    }

    let mut cleaned = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if let Some(r) = ["\\%", "\\$", "\\!", "\\,"].iter().find_map(|p| rest.strip_prefix(p)) {
            rest = r;
            continue;
        }
        match c {
            '$' | '%' | '€' | '£' | '¥' | ',' | '_' => {}
            c if c.is_whitespace() => {}
            c => cleaned.push(c),
        }
        rest = &rest[c.len_utf8()..];
    }
    if let Some((num, den)) = cleaned.split_once('/') {
        let num = parse_decimal(num)?;
        let den = parse_decimal(den)?;
        if den.is_zero() {
            return None;
        }
        return Some(num / den);
    }
    parse_decimal(&cleaned)
}

/// `\frac{a}{b}` with numeric `a` and `b`.
fn parse_frac(text: &str, cmd: &str) -> Option<BigRational> {
    let body = text.strip_prefix(cmd)?.trim_start().strip_prefix('{')?;
    let close = matching_brace(body)?;
    let rest = body[close + 1..].trim_start().strip_prefix('{')?;
    let close2 = matching_brace(rest)?;
    if !rest[close2 + 1..].trim().is_empty() {
        return None;
    }
    let num = parse_numeric(&body[..close])?;
    let den = parse_numeric(&rest[..close2])?;
    if den.is_zero() {
        return None;
    }
    Some(num / den)
}

/// Parses `[+-]digits[.digits][e[+-]digits]`, also accepting `.5` and `5.`.
fn parse_decimal(text: &str) -> Option<BigRational> {
    let (negative, body) = match text.as_bytes().first()? {
        b'-' => (true, &text[1..]),
        b'+' => (false, &text[1..]),
        _ => (false, text),
    };
    let (mantissa, exponent) = match body.find(['e', 'E']) {
        Some(i) => (&body[..i], Some(&body[i + 1..])),
        None => (body, None),
    };
    let (int_part, frac_part) = match mantissa.split_once('.') {
        Some((i, f)) => (i, f),
        None => (mantissa, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.bytes().all(|b| b.is_ascii_digit()) || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let digits = format!("{int_part}{frac_part}");
    let mut numer: BigInt = digits.parse().ok()?;
    let mut denom = BigInt::from(10u32).pow(frac_part.len() as u32);
    if let Some(exp) = exponent {
        let exp: i32 = exp.parse().ok()?;
        if exp.unsigned_abs() > 4096 {
            return None;
        }
        let scale = BigInt::from(10u32).pow(exp.unsigned_abs());
        if exp >= 0 {
            numer *= scale;
        } else {
            denom *= scale;
        }
    }
    if negative {
        numer = -numer;
    }
    Some(BigRational::new(numer, denom))
}

/// Integer without a decimal point, else the exact terminating decimal, else `p/q`.
fn render_rational(value: &BigRational) -> String {
    if value.is_zero() {
        return "0".to_string();
    }
    if value.is_integer() {
        return value.numer().to_string();
    }
    let mut den = value.denom().clone();
    let two = BigInt::from(2u32);
    let five = BigInt::from(5u32);
    let mut twos = 0u32;
    let mut fives = 0u32;
    while (&den % &two).is_zero() {
        den /= &two;
        twos += 1;
    }
    while (&den % &five).is_zero() {
        den /= &five;
        fives += 1;
    }
    if !den.is_one() {
        return format!("{}/{}", value.numer(), value.denom());
    }
    let places = twos.max(fives);
    let scaled = (value * BigRational::from_integer(BigInt::from(10u32).pow(places))).to_integer();
    let sign = if scaled.is_negative() { "-" } else { "" };
    let digits = scaled.abs().to_string();
    let places = places as usize;
    let padded = if digits.len() <= places {
        format!("{}{}", "0".repeat(places - digits.len() + 1), digits)
    } else {
        digits
    };
    let (int_part, frac_part) = padded.split_at(padded.len() - places);
    format!("{sign}{int_part}.{frac_part}")
}

/// Confidence used for scoring: reported value, else the calibrated
/// missing-confidence rate (0.5 with default parameters).
pub fn impute_confidence(obs: &ParsedObservation, params: &CalibrationParams) -> Result<f64, ParseError> {
    if !obs.valid {
        return Err(ParseError::InvalidObservation(obs.agent_id.clone()));
    }
    Ok(obs.confidence.unwrap_or(params.c_miss))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mc() -> TaskKind {
        TaskKind::multiple_choice(["A", "B", "C", "D"]).unwrap()
    }

    #[test]
    fn tagged_answer_with_confidence() {
        let obs = parse_response("reasoning...\nFinal Answer: 42\nConfidence: 0.8", &TaskKind::Numeric, "m1");
        assert!(obs.valid);
        assert_eq!(obs.raw_candidate, "42");
        assert_eq!(obs.canonical.as_deref(), Some("42"));
        assert_eq!(obs.confidence, Some(0.8));
        assert_eq!(obs.quality.extraction_method, ExtractionMethod::Tagged);
        assert!(!obs.quality.malformed);
    }

    #[test]
    fn empty_input_is_invalid() {
        let obs = parse_response("", &TaskKind::Numeric, "m1");
        assert!(!obs.valid);
        assert_eq!(obs.canonical, None);
        assert_eq!(obs.quality.extraction_method, ExtractionMethod::None);
    }

    #[test]
    fn last_line_heuristic() {
        let obs = parse_response("I think it is 42", &TaskKind::Numeric, "m1");
        assert!(obs.valid);
        assert_eq!(obs.raw_candidate, "42");
        assert_eq!(obs.canonical.as_deref(), Some("42"));
        assert_eq!(obs.confidence, None);
        assert_eq!(obs.quality.extraction_method, ExtractionMethod::Heuristic);
        assert!(obs.quality.malformed);
    }

    #[test]
    fn heuristic_without_candidate_is_invalid() {
        let obs = parse_response("no idea at all", &TaskKind::Numeric, "m1");
        assert!(!obs.valid);
        assert_eq!(obs.quality.extraction_method, ExtractionMethod::None);
        let obs = parse_response("hmm\nthe answer is a mystery", &mc(), "m1");
        assert!(!obs.valid);
    }

    #[test]
    fn heuristic_multiple_choice() {
        let obs = parse_response("thinking\nThe answer is B", &mc(), "m1");
        assert_eq!(obs.canonical.as_deref(), Some("B"));
        assert!(obs.quality.malformed);
    }

    #[test]
    fn out_of_range_confidence_is_clamped_and_flagged() {
        let obs = parse_response("Final Answer: 3\nConfidence: 1.7", &TaskKind::Numeric, "m1");
        assert_eq!(obs.confidence, Some(1.0));
        assert!(obs.quality.malformed);
        assert!(obs.valid);
        let obs = parse_response("Final Answer: 3\nConfidence: 80%", &TaskKind::Numeric, "m1");
        assert_eq!(obs.confidence, Some(0.8));
        assert!(!obs.quality.malformed);
        let obs = parse_response("Final Answer: 3\nConfidence: high", &TaskKind::Numeric, "m1");
        assert_eq!(obs.confidence, None);
    }

    #[test]
    fn markdown_decorated_markers() {
        let obs = parse_response("**Final Answer:** C\n**Confidence:** 0.6", &mc(), "m1");
        assert_eq!(obs.canonical.as_deref(), Some("C"));
        assert_eq!(obs.confidence, Some(0.6));
        assert_eq!(obs.quality.extraction_method, ExtractionMethod::Tagged);
    }

    #[test]
    fn tagged_symbolic_numeric_falls_back_to_folding() {
        let obs = parse_response("Final Answer: π/2", &TaskKind::Numeric, "m1");
        assert!(obs.valid);
        assert_eq!(obs.canonical.as_deref(), Some("π/2"));
        assert!(obs.quality.malformed);
    }

    #[test]
    fn tagged_option_outside_list_is_invalid() {
        let obs = parse_response("Final Answer: F", &mc(), "m1");
        assert!(!obs.valid);
        assert_eq!(obs.quality.extraction_method, ExtractionMethod::Tagged);
        assert_eq!(obs.canonical, None);
    }

    #[test]
    fn canonicalize_examples() {
        assert_eq!(canonicalize("\\boxed{42}", &TaskKind::Numeric).unwrap(), "42");
        assert_eq!(canonicalize("YES.", &TaskKind::Label).unwrap(), "yes");
        assert_eq!(canonicalize("B) Paris", &mc()).unwrap(), "B");
    }

    #[test]
    fn numeric_forms() {
        let n = |s: &str| canonicalize(s, &TaskKind::Numeric).unwrap();
        assert_eq!(n("0.5"), "0.5");
        assert_eq!(n("1/2"), "0.5");
        assert_eq!(n("  .5 "), "0.5");
        assert_eq!(n("$1,234.50"), "1234.5");
        assert_eq!(n("42.000"), "42");
        assert_eq!(n("50%"), "50");
        assert_eq!(n("50\\%"), "50");
        assert_eq!(n("1/3"), "1/3");
        assert_eq!(n("2/6"), "1/3");
        assert_eq!(n("-3/4"), "-0.75");
        assert_eq!(n("$\\frac{1}{8}$"), "0.125");
        assert_eq!(n("\\dfrac{2}{3}"), "2/3");
        assert_eq!(n("-\\frac{1}{4}"), "-0.25");
        assert_eq!(n("-0"), "0");
        assert_eq!(n("1e3"), "1000");
        assert_eq!(n("0.001"), "0.001");
        assert_eq!(n("\\(\\boxed{7}\\)"), "7");
        assert_eq!(n("+5."), "5");
    }

    #[test]
    fn numeric_rejects_non_numbers() {
        for bad in ["", "abc", "1/0", "π", "1..2", "--3", "\\frac{1}{0}"] {
            assert!(canonicalize(bad, &TaskKind::Numeric).is_err(), "{bad}");
        }
    }

    #[test]
    fn option_extraction() {
        let o = |s: &str| canonicalize(s, &mc());
        assert_eq!(o("b").unwrap(), "B");
        assert_eq!(o("(C)").unwrap(), "C");
        assert_eq!(o("Option D").unwrap(), "D");
        assert_eq!(o("A. London").unwrap(), "A");
        assert!(o("E").is_err());
        assert!(o("Apple").is_err());
    }

    #[test]
    fn free_text_folding() {
        assert_eq!(canonicalize("  The   Quick\tFox ", &TaskKind::FreeText).unwrap(), "the quick fox");
        assert!(canonicalize("   ", &TaskKind::FreeText).is_err());
        assert!(canonicalize("...", &TaskKind::Label).is_err());
    }

    #[test]
    fn multiple_choice_constructor_validates() {
        assert_eq!(TaskKind::multiple_choice(Vec::<String>::new()), Err(ParseError::EmptyOptions));
        assert!(matches!(TaskKind::multiple_choice(["A", "a"]), Err(ParseError::DuplicateOption(_))));
    }

    #[test]
    fn reasoning_text_stops_at_markers() {
        assert_eq!(reasoning_text("step one\nstep two\nFinal Answer: 4\nConfidence: 0.9"), "step one\nstep two");
        assert_eq!(reasoning_text("step one\nso 4"), "step one");
        assert_eq!(reasoning_text("4"), "");
    }

    #[test]
    fn impute_confidence_paths() {
        let mut params = CalibrationParams::default();
        let mut obs = parse_response("Final Answer: 1\nConfidence: 0.8", &TaskKind::Numeric, "m1");
        assert_eq!(impute_confidence(&obs, &params).unwrap(), 0.8);
        obs.confidence = None;
        assert_eq!(impute_confidence(&obs, &params).unwrap(), 0.5);
        params.c_miss = 0.7;
        assert_eq!(impute_confidence(&obs, &params).unwrap(), 0.7);
        let bad = ParsedObservation::invalid("m2");
        assert!(matches!(impute_confidence(&bad, &params), Err(ParseError::InvalidObservation(_))));
    }
}
