//! Chain-of-step trace format.
//!
//! A trace is a sequence of reasoning steps wrapped in special tokens,
//! followed by a free-form answer:
//!
//! ```text
//! <|reasoning_start|>
//!   <|reasoning_step_start|>
//!     <|reasoning_step_name_start|>..<|reasoning_step_name_end|>
//!     <|reasoning_step_thought_start|>..<|reasoning_step_thought_end|>
//!     <|reasoning_step_reflection_start|>..<|reasoning_step_reflection_end|>
//!   <|reasoning_step_end|>
//!   <|reasoning_proceed|>
//!   <|reasoning_step_start|> .. <|reasoning_step_end|>
//! <|reasoning_end|>answer text
//! ```
//!
//! (Line breaks above are for reading only; the wire form has no whitespace
//! between tokens.) Payload text is kept byte-for-byte, which is what makes
//! prefix splicing exact.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The eleven structural markers of the format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpecialToken {
    ReasoningStart,
    ReasoningEnd,
    StepStart,
    StepEnd,
    NameStart,
    NameEnd,
    ThoughtStart,
    ThoughtEnd,
    ReflectionStart,
    ReflectionEnd,
    Proceed,
}

impl SpecialToken {
    pub const ALL: [SpecialToken; 11] = [
        SpecialToken::ReasoningStart,
        SpecialToken::ReasoningEnd,
        SpecialToken::StepStart,
        SpecialToken::StepEnd,
        SpecialToken::NameStart,
        SpecialToken::NameEnd,
        SpecialToken::ThoughtStart,
        SpecialToken::ThoughtEnd,
        SpecialToken::ReflectionStart,
        SpecialToken::ReflectionEnd,
        SpecialToken::Proceed,
    ];

    /// Literal surface text of the token.
    pub const fn surface(self) -> &'static str {
        match self {
            SpecialToken::ReasoningStart => "<|reasoning_start|>",
            SpecialToken::ReasoningEnd => "<|reasoning_end|>",
            SpecialToken::StepStart => "<|reasoning_step_start|>",
            SpecialToken::StepEnd => "<|reasoning_step_end|>",
            SpecialToken::NameStart => "<|reasoning_step_name_start|>",
            SpecialToken::NameEnd => "<|reasoning_step_name_end|>",
            SpecialToken::ThoughtStart => "<|reasoning_step_thought_start|>",
            SpecialToken::ThoughtEnd => "<|reasoning_step_thought_end|>",
            SpecialToken::ReflectionStart => "<|reasoning_step_reflection_start|>",
            SpecialToken::ReflectionEnd => "<|reasoning_step_reflection_end|>",
            SpecialToken::Proceed => "<|reasoning_proceed|>",
        }
    }

    /// Short description of the token's role.
    pub const fn definition(self) -> &'static str {
        match self {
            SpecialToken::ReasoningStart => "opens the reasoning block",
            SpecialToken::ReasoningEnd => "closes the reasoning block; the answer follows",
            SpecialToken::StepStart => "opens one step",
            SpecialToken::StepEnd => "closes one step",
            SpecialToken::NameStart => "opens the step name",
            SpecialToken::NameEnd => "closes the step name",
            SpecialToken::ThoughtStart => "opens the step thought",
            SpecialToken::ThoughtEnd => "closes the step thought",
            SpecialToken::ReflectionStart => "opens the step reflection",
            SpecialToken::ReflectionEnd => "closes the step reflection",
            SpecialToken::Proceed => "separates consecutive steps",
        }
    }

    fn match_at(text: &str) -> Option<SpecialToken> {
        Self::ALL.into_iter().find(|t| text.starts_with(t.surface()))
    }
}

impl fmt::Display for SpecialToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.surface())
    }
}

/// Returns the first special token surface contained in `text`, if any.
pub fn find_special_token(text: &str) -> Option<(usize, SpecialToken)> {
    let mut from = 0;
    while let Some(rel) = text[from..].find("<|") {
        let at = from + rel;
        if let Some(tok) = SpecialToken::match_at(&text[at..]) {
            return Some((at, tok));
        }
        from = at + 2;
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Step {
    pub name: String,
    pub thought: String,
    pub reflection: String,
}

impl Step {
    pub fn new(
        name: impl Into<String>,
        thought: impl Into<String>,
        reflection: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            thought: thought.into(),
            reflection: reflection.into(),
        }
    }

    fn fields(&self) -> [(&'static str, &str); 3] {
        [
            ("name", &self.name),
            ("thought", &self.thought),
            ("reflection", &self.reflection),
        ]
    }
}

/// A parsed chain-of-step reasoning trace.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Trace {
    #[serde(default)]
    pub question_id: String,
    pub steps: Vec<Step>,
    pub answer: String,
}

/// One line of a trace JSONL file. `raw_text`, when present, is the
/// serialized form the structured fields came from or render to.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TraceRecord {
    pub question_id: String,
    pub steps: Vec<Step>,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
}

impl TraceRecord {
    pub fn from_trace(trace: Trace, raw_text: Option<String>) -> Self {
        Self {
            question_id: trace.question_id,
            steps: trace.steps,
            answer: trace.answer,
            raw_text,
        }
    }

    pub fn trace(&self) -> Trace {
        Trace::new(self.question_id.clone(), self.steps.clone(), self.answer.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("trace has no steps")]
    NoSteps,
    #[error("step {step} field `{field}` is empty")]
    EmptyField { step: usize, field: &'static str },
    #[error("answer is empty")]
    EmptyAnswer,
    #[error("step {step} field `{field}` contains special token {token}")]
    TokenInField {
        step: usize,
        field: &'static str,
        token: SpecialToken,
    },
    #[error("answer contains special token {0}")]
    TokenInAnswer(SpecialToken),
    #[error("prefix index {k} out of range for a {len}-step trace")]
    IndexOutOfRange { k: usize, len: usize },
}

impl Trace {
    pub fn new(question_id: impl Into<String>, steps: Vec<Step>, answer: impl Into<String>) -> Self {
        Self {
            question_id: question_id.into(),
            steps,
            answer: answer.into(),
        }
    }

    /// Checks that no field can break serialization (token surfaces).
    pub fn check_serializable(&self) -> Result<(), TraceError> {
        for (i, step) in self.steps.iter().enumerate() {
            for (field, value) in step.fields() {
                if let Some((_, token)) = find_special_token(value) {
                    return Err(TraceError::TokenInField {
                        step: i + 1,
                        field,
                        token,
                    });
                }
            }
        }
        if let Some((_, token)) = find_special_token(&self.answer) {
            return Err(TraceError::TokenInAnswer(token));
        }
        Ok(())
    }

    /// Strict validity: serializable, at least one step, and every field
    /// plus the answer non-empty after trimming.
    pub fn validate(&self) -> Result<(), TraceError> {
        self.check_serializable()?;
        if self.steps.is_empty() {
            return Err(TraceError::NoSteps);
        }
        for (i, step) in self.steps.iter().enumerate() {
            for (field, value) in step.fields() {
                if value.trim().is_empty() {
                    return Err(TraceError::EmptyField { step: i + 1, field });
                }
            }
        }
        if self.answer.trim().is_empty() {
            return Err(TraceError::EmptyAnswer);
        }
        Ok(())
    }

    pub fn step_count(&self) -> usize {
        self.steps.len()
    }
}

fn push_step(out: &mut String, step: &Step) {
    use SpecialToken::*;
    out.push_str(StepStart.surface());
    out.push_str(NameStart.surface());
    out.push_str(&step.name);
    out.push_str(NameEnd.surface());
    out.push_str(ThoughtStart.surface());
    out.push_str(&step.thought);
    out.push_str(ThoughtEnd.surface());
    out.push_str(ReflectionStart.surface());
    out.push_str(&step.reflection);
    out.push_str(ReflectionEnd.surface());
    out.push_str(StepEnd.surface());
}

/// Serializes `steps` without the opening token; consecutive steps are
/// joined by the proceed delimiter.
pub fn render_steps(steps: &[Step]) -> String {
    let mut out = String::new();
    for (i, step) in steps.iter().enumerate() {
        if i > 0 {
            out.push_str(SpecialToken::Proceed.surface());
        }
        push_step(&mut out, step);
    }
    out
}

/// Renders the canonical text of a trace. Unlike [`serialize_trace`], this
/// performs no validation and is used for traces the caller already trusts.
pub fn render_trace(trace: &Trace) -> String {
    let mut out = String::from(SpecialToken::ReasoningStart.surface());
    out.push_str(&render_steps(&trace.steps));
    out.push_str(SpecialToken::ReasoningEnd.surface());
    out.push_str(&trace.answer);
    out
}

pub fn serialize_trace(trace: &Trace) -> Result<String, TraceError> {
    trace.validate()?;
    Ok(render_trace(trace))
}

/// Serialized prefix of a trace through step `k`, used to seed rollouts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TracePrefix<'a> {
    pub origin: &'a Trace,
    pub k: usize,
    pub serialized_text: String,
}

/// Prefix through step `k` (1-based). For `k` below the step count the text
/// ends with the proceed delimiter, so a continuation begins a new step. At
/// `k` equal to the step count the text ends right after the last step: the
/// full serialization has no delimiter there, and the continuation starts
/// with either a delimiter or the end token.
pub fn prefix_at(trace: &Trace, k: usize) -> Result<TracePrefix<'_>, TraceError> {
    let len = trace.steps.len();
    if k == 0 || k > len {
        return Err(TraceError::IndexOutOfRange { k, len });
    }
    trace.check_serializable()?;
    let mut text = String::from(SpecialToken::ReasoningStart.surface());
    text.push_str(&render_steps(&trace.steps[..k]));
    if k < len {
        text.push_str(SpecialToken::Proceed.surface());
    }
    Ok(TracePrefix {
        origin: trace,
        k,
        serialized_text: text,
    })
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    Strict,
    Lenient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseErrorKind {
    /// Input ended inside the structure.
    UnterminatedSpan,
    /// A special token appeared where another one was required.
    MisorderedToken,
    /// Free text appeared where a special token was required.
    UnexpectedText,
    /// Nothing follows the end token.
    MissingAnswer,
    /// A step field is blank (strict mode only).
    EmptyField,
    InvalidUtf8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Found {
    Token(SpecialToken),
    Text(String),
    EndOfInput,
}

impl fmt::Display for Found {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Found::Token(t) => write!(f, "{t}"),
            Found::Text(s) => write!(f, "text {s:?}"),
            Found::EndOfInput => f.write_str("end of input"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?} at byte {offset}: expected {}, found {found}", fmt_expected(.expected))]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub offset: usize,
    pub expected: Vec<SpecialToken>,
    pub found: Found,
}

fn fmt_expected(expected: &[SpecialToken]) -> String {
    match expected {
        [] => "answer text".to_string(),
        [one] => one.to_string(),
        many => many
            .iter()
            .map(|t| t.surface())
            .collect::<Vec<_>>()
            .join(" or "),
    }
}

/// A deviation tolerated by lenient parsing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub step: usize,
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTrace {
    pub trace: Trace,
    pub violations: Vec<Violation>,
}

/// Where a parsed prefix stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefixEnd {
    /// Empty input: nothing generated yet.
    Empty,
    /// Ends after the opening token; no step yet.
    AfterStart,
    /// Ends after a step's closing token.
    AfterStep,
    /// Ends after a proceed delimiter.
    AfterProceed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrefix {
    pub steps: Vec<Step>,
    pub end: PrefixEnd,
}

#[derive(Debug, Clone, Copy)]
enum Lexeme {
    Token(SpecialToken, usize),
    Text(usize, usize),
}

fn lex(text: &str) -> Vec<Lexeme> {
    let mut out = Vec::new();
    let mut text_start = 0;
    let mut from = 0;
    while let Some(rel) = text[from..].find("<|") {
        let at = from + rel;
        match SpecialToken::match_at(&text[at..]) {
            Some(tok) => {
                if at > text_start {
                    out.push(Lexeme::Text(text_start, at));
                }
                out.push(Lexeme::Token(tok, at));
                from = at + tok.surface().len();
                text_start = from;
            }
            None => from = at + 2,
        }
    }
    if text_start < text.len() {
        out.push(Lexeme::Text(text_start, text.len()));
    }
    out
}

struct Parser<'a> {
    text: &'a str,
    lexemes: Vec<Lexeme>,
    pos: usize,
    mode: ParseMode,
    violations: Vec<Violation>,
}

const SNIPPET: usize = 32;

impl<'a> Parser<'a> {
    fn new(text: &'a str, mode: ParseMode) -> Self {
        Self {
            text,
            lexemes: lex(text),
            pos: 0,
            mode,
            violations: Vec::new(),
        }
    }

    fn peek(&self) -> Option<Lexeme> {
        self.lexemes.get(self.pos).copied()
    }

    fn offset(&self) -> usize {
        match self.peek() {
            Some(Lexeme::Token(_, at)) | Some(Lexeme::Text(at, _)) => at,
            None => self.text.len(),
        }
    }

    fn error_here(&self, expected: &[SpecialToken]) -> ParseError {
        let (kind, found) = match self.peek() {
            None => (ParseErrorKind::UnterminatedSpan, Found::EndOfInput),
            Some(Lexeme::Token(t, _)) => (ParseErrorKind::MisorderedToken, Found::Token(t)),
            Some(Lexeme::Text(a, b)) => {
                let s = &self.text[a..b];
                let cut = s
                    .char_indices()
                    .nth(SNIPPET)
                    .map(|(i, _)| i)
                    .unwrap_or(s.len());
                (ParseErrorKind::UnexpectedText, Found::Text(s[..cut].to_string()))
            }
        };
        ParseError {
            kind,
            offset: self.offset(),
            expected: expected.to_vec(),
            found,
        }
    }

    fn at_token(&self, tok: SpecialToken) -> bool {
        matches!(self.peek(), Some(Lexeme::Token(t, _)) if t == tok)
    }

    fn expect(&mut self, tok: SpecialToken) -> Result<(), ParseError> {
        if self.at_token(tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error_here(&[tok]))
        }
    }

    /// Optional payload text followed by the closing token.
    fn span(&mut self, close: SpecialToken) -> Result<String, ParseError> {
        let payload = match self.peek() {
            Some(Lexeme::Text(a, b)) => {
                self.pos += 1;
                self.text[a..b].to_string()
            }
            _ => String::new(),
        };
        self.expect(close)?;
        Ok(payload)
    }

    fn check_field(&self, step: usize, value: &str, field_offset: usize) -> Result<(), ParseError> {
        if self.mode == ParseMode::Strict && value.trim().is_empty() {
            let _ = step;
            return Err(ParseError {
                kind: ParseErrorKind::EmptyField,
                offset: field_offset,
                expected: vec![],
                found: Found::Text(value.to_string()),
            });
        }
        Ok(())
    }

    fn step(&mut self, index: usize) -> Result<Step, ParseError> {
        use SpecialToken::*;
        self.expect(StepStart)?;

        self.expect(NameStart)?;
        let at = self.offset();
        let name = self.span(NameEnd)?;
        self.check_field(index, &name, at)?;

        self.expect(ThoughtStart)?;
        let at = self.offset();
        let thought = self.span(ThoughtEnd)?;
        self.check_field(index, &thought, at)?;

        let reflection = if self.mode == ParseMode::Lenient && self.at_token(StepEnd) {
            self.violations.push(Violation {
                step: index,
                offset: self.offset(),
                message: "missing reflection span".to_string(),
            });
            String::new()
        } else {
            if !self.at_token(ReflectionStart) {
                return Err(self.error_here(&[ReflectionStart]));
            }
            self.pos += 1;
            let at = self.offset();
            let reflection = self.span(ReflectionEnd)?;
            self.check_field(index, &reflection, at)?;
            reflection
        };
        self.expect(StepEnd)?;
        Ok(Step {
            name,
            thought,
            reflection,
        })
    }

    fn trace(mut self) -> Result<ParsedTrace, ParseError> {
        use SpecialToken::*;
        self.expect(ReasoningStart)?;
        let mut steps = vec![self.step(1)?];
        loop {
            if self.at_token(Proceed) {
                self.pos += 1;
                steps.push(self.step(steps.len() + 1)?);
            } else if self.at_token(ReasoningEnd) {
                self.pos += 1;
                break;
            } else {
                return Err(self.error_here(&[Proceed, ReasoningEnd]));
            }
        }
        let answer = match self.peek() {
            Some(Lexeme::Text(a, b)) => {
                self.pos += 1;
                self.text[a..b].to_string()
            }
            Some(Lexeme::Token(..)) => return Err(self.error_here(&[])),
            None => String::new(),
        };
        if answer.trim().is_empty() {
            return Err(ParseError {
                kind: ParseErrorKind::MissingAnswer,
                offset: self.text.len(),
                expected: vec![],
                found: Found::EndOfInput,
            });
        }
        if self.peek().is_some() {
            return Err(self.error_here(&[]));
        }
        Ok(ParsedTrace {
            trace: Trace {
                question_id: String::new(),
                steps,
                answer,
            },
            violations: self.violations,
        })
    }

    fn prefix(mut self) -> Result<ParsedPrefix, ParseError> {
        use SpecialToken::*;
        if self.peek().is_none() {
            return Ok(ParsedPrefix {
                steps: vec![],
                end: PrefixEnd::Empty,
            });
        }
        self.expect(ReasoningStart)?;
        let mut steps = Vec::new();
        let mut end = PrefixEnd::AfterStart;
        while self.peek().is_some() {
            if end == PrefixEnd::AfterStep {
                self.expect(Proceed)?;
                end = PrefixEnd::AfterProceed;
            } else {
                steps.push(self.step(steps.len() + 1)?);
                end = PrefixEnd::AfterStep;
            }
        }
        Ok(ParsedPrefix { steps, end })
    }
}

/// Parses a complete serialized trace. The returned trace has an empty
/// `question_id`; identifiers travel out of band.
pub fn parse_trace(text: &str, mode: ParseMode) -> Result<ParsedTrace, ParseError> {
    Parser::new(text, mode).trace()
}

/// Byte-level entry point; never panics on arbitrary input.
pub fn parse_trace_bytes(bytes: &[u8], mode: ParseMode) -> Result<ParsedTrace, ParseError> {
    match std::str::from_utf8(bytes) {
        Ok(text) => parse_trace(text, mode),
        Err(e) => Err(ParseError {
            kind: ParseErrorKind::InvalidUtf8,
            offset: e.valid_up_to(),
            expected: vec![],
            found: Found::EndOfInput,
        }),
    }
}

/// Parses the rollout seed form: empty, or an opening token followed by
/// whole steps, optionally ending with a proceed delimiter. The end token is
/// never part of a prefix.
pub fn parse_prefix(text: &str) -> Result<ParsedPrefix, ParseError> {
    Parser::new(text, ParseMode::Strict).prefix()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(n: &str) -> Step {
        Step::new(format!("name {n}"), format!("thought {n}"), format!("reflect {n}"))
    }

    fn trace(n: usize) -> Trace {
        Trace::new("", (1..=n).map(|i| step(&i.to_string())).collect(), "42")
    }

    #[test]
    fn surfaces_are_distinct_and_unnested() {
        for a in SpecialToken::ALL {
            for b in SpecialToken::ALL {
                if a != b {
                    assert!(!a.surface().contains(b.surface()), "{a} contains {b}");
                }
            }
        }
    }

    #[test]
    fn one_step_template() {
        let t = Trace::new("", vec![Step::new("A", "B", "C")], "D");
        let text = serialize_trace(&t).unwrap();
        assert!(text.starts_with(
            "<|reasoning_start|><|reasoning_step_start|><|reasoning_step_name_start|>A<|reasoning_step_name_end|>"
        ));
        assert!(text.ends_with("<|reasoning_end|>D"));
        assert_eq!(
            text,
            "<|reasoning_start|><|reasoning_step_start|><|reasoning_step_name_start|>A\
             <|reasoning_step_name_end|><|reasoning_step_thought_start|>B<|reasoning_step_thought_end|>\
             <|reasoning_step_reflection_start|>C<|reasoning_step_reflection_end|><|reasoning_step_end|>\
             <|reasoning_end|>D"
        );
    }

    #[test]
    fn delimiter_between_two_steps() {
        let text = serialize_trace(&trace(2)).unwrap();
        assert_eq!(text.matches("<|reasoning_proceed|>").count(), 1);
        assert!(text.contains("<|reasoning_step_end|><|reasoning_proceed|><|reasoning_step_start|>"));
    }

    #[test]
    fn parses_two_steps() {
        let t = trace(2);
        let parsed = parse_trace(&serialize_trace(&t).unwrap(), ParseMode::Strict).unwrap();
        assert_eq!(parsed.trace, t);
        assert!(parsed.violations.is_empty());
        assert_eq!(parsed.trace.steps[1].thought, "thought 2");
    }

    #[test]
    fn missing_end_is_unterminated_at_end() {
        let text = serialize_trace(&trace(2)).unwrap();
        let cut = text.replace("<|reasoning_end|>42", "");
        let err = parse_trace(&cut, ParseMode::Strict).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UnterminatedSpan);
        assert_eq!(err.offset, cut.len());
        assert_eq!(err.found, Found::EndOfInput);
        assert_eq!(err.expected, vec![SpecialToken::Proceed, SpecialToken::ReasoningEnd]);
    }

    #[test]
    fn missing_answer() {
        let text = serialize_trace(&trace(1)).unwrap();
        let cut = text.trim_end_matches("42");
        let err = parse_trace(cut, ParseMode::Strict).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::MissingAnswer);
        let blank = format!("{cut}  \n");
        assert_eq!(
            parse_trace(&blank, ParseMode::Lenient).unwrap_err().kind,
            ParseErrorKind::MissingAnswer
        );
    }

    #[test]
    fn misordered_thought_before_name() {
        let text = "<|reasoning_start|><|reasoning_step_start|><|reasoning_step_thought_start|>x";
        let err = parse_trace(text, ParseMode::Strict).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::MisorderedToken);
        assert_eq!(err.expected, vec![SpecialToken::NameStart]);
        assert_eq!(err.found, Found::Token(SpecialToken::ThoughtStart));
        assert_eq!(err.offset, "<|reasoning_start|><|reasoning_step_start|>".len());
    }

    #[test]
    fn text_between_tokens_is_rejected() {
        let text = serialize_trace(&trace(1)).unwrap().replacen(
            "<|reasoning_start|>",
            "<|reasoning_start|>\n",
            1,
        );
        let err = parse_trace(&text, ParseMode::Strict).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UnexpectedText);
    }

    #[test]
    fn lenient_recovers_missing_reflection() {
        let text = "<|reasoning_start|><|reasoning_step_start|><|reasoning_step_name_start|>N\
                    <|reasoning_step_name_end|><|reasoning_step_thought_start|>T\
                    <|reasoning_step_thought_end|><|reasoning_step_end|><|reasoning_end|>A";
        let strict = parse_trace(text, ParseMode::Strict).unwrap_err();
        assert_eq!(strict.expected, vec![SpecialToken::ReflectionStart]);

        let parsed = parse_trace(text, ParseMode::Lenient).unwrap();
        assert_eq!(parsed.trace.steps.len(), 1);
        assert_eq!(parsed.trace.steps[0].reflection, "");
        assert_eq!(parsed.trace.steps[0].name, "N");
        assert_eq!(parsed.violations.len(), 1);
        assert_eq!(parsed.violations[0].step, 1);
    }

    #[test]
    fn lenient_does_not_recover_anything_else() {
        let text = "<|reasoning_start|><|reasoning_step_start|><|reasoning_step_name_start|>N\
                    <|reasoning_step_name_end|><|reasoning_step_end|><|reasoning_end|>A";
        assert!(parse_trace(text, ParseMode::Lenient).is_err());
    }

    #[test]
    fn whitespace_payload_is_preserved() {
        let t = Trace::new("", vec![Step::new("  padded\n", "\tx ", " y")], " answer\n");
        let parsed = parse_trace(&serialize_trace(&t).unwrap(), ParseMode::Strict).unwrap();
        assert_eq!(parsed.trace, t);
    }

    #[test]
    fn blank_field_fails_strict() {
        let t = Trace::new("", vec![Step::new("n", "  ", "r")], "a");
        assert_eq!(
            t.validate(),
            Err(TraceError::EmptyField {
                step: 1,
                field: "thought"
            })
        );
        let text = render_trace(&t);
        assert_eq!(
            parse_trace(&text, ParseMode::Strict).unwrap_err().kind,
            ParseErrorKind::EmptyField
        );
    }

    #[test]
    fn token_in_field_is_invalid() {
        let t = Trace::new("", vec![Step::new("a<|reasoning_proceed|>b", "t", "r")], "a");
        assert!(matches!(
            serialize_trace(&t),
            Err(TraceError::TokenInField {
                step: 1,
                field: "name",
                token: SpecialToken::Proceed
            })
        ));
        // near misses are plain text
        let ok = Trace::new("", vec![Step::new("a<|reasoning_proceed|", "<<|>", "|>")], "<|x|>");
        let parsed = parse_trace(&serialize_trace(&ok).unwrap(), ParseMode::Strict).unwrap();
        assert_eq!(parsed.trace, ok);
    }

    #[test]
    fn answer_containing_token_fails_parse() {
        let text = format!("{}<|reasoning_proceed|>", render_trace(&trace(1)));
        let err = parse_trace(&text, ParseMode::Strict).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::MisorderedToken);
    }

    #[test]
    fn invalid_utf8() {
        let err = parse_trace_bytes(&[b'<', 0xff, 0xfe], ParseMode::Strict).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::InvalidUtf8);
        assert_eq!(err.offset, 1);
    }

    #[test]
    fn last_prefix_has_all_steps_and_no_end() {
        let t = trace(3);
        let p = prefix_at(&t, 3).unwrap();
        assert_eq!(p.serialized_text.matches("<|reasoning_step_start|>").count(), 3);
        assert!(!p.serialized_text.contains("<|reasoning_end|>"));
        assert!(!p.serialized_text.ends_with("<|reasoning_proceed|>"));
        let full = serialize_trace(&t).unwrap();
        assert!(full.starts_with(&p.serialized_text) && full.len() > p.serialized_text.len());
    }

    #[test]
    fn inner_prefix_ends_with_proceed() {
        let t = trace(3);
        let p1 = prefix_at(&t, 1).unwrap();
        let p2 = prefix_at(&t, 2).unwrap();
        assert!(p1.serialized_text.ends_with("<|reasoning_step_end|><|reasoning_proceed|>"));
        assert!(p2.serialized_text.starts_with(&p1.serialized_text));
        assert_eq!(p2.k, 2);
    }

    #[test]
    fn prefix_out_of_range() {
        let t = trace(2);
        assert_eq!(
            prefix_at(&t, 0).unwrap_err(),
            TraceError::IndexOutOfRange { k: 0, len: 2 }
        );
        assert!(prefix_at(&t, 3).is_err());
    }

    #[test]
    fn parse_prefix_forms() {
        assert_eq!(parse_prefix("").unwrap().end, PrefixEnd::Empty);
        assert_eq!(
            parse_prefix("<|reasoning_start|>").unwrap().end,
            PrefixEnd::AfterStart
        );
        let t = trace(3);
        let p1 = parse_prefix(&prefix_at(&t, 1).unwrap().serialized_text).unwrap();
        assert_eq!(p1.end, PrefixEnd::AfterProceed);
        assert_eq!(p1.steps, t.steps[..1]);
        let p3 = parse_prefix(&prefix_at(&t, 3).unwrap().serialized_text).unwrap();
        assert_eq!(p3.end, PrefixEnd::AfterStep);
        assert_eq!(p3.steps, t.steps);
        assert!(parse_prefix(&render_trace(&t)).is_err());
    }
}
