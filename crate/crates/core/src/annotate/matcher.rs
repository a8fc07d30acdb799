use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Decides whether a predicted answer matches a reference answer.
///
/// Each side is reduced to a canonical form (choice letter, number or
/// normalized text) and the forms are compared, so the relation is
/// reflexive and symmetric by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerMatcher {
    pub case_fold: bool,
    pub strip_punctuation: bool,
    /// Compare parseable numbers with absolute tolerance [`NUMERIC_TOL`].
    pub numeric: bool,
    /// Pull a choice letter out of forms like `(B)` or `the answer is B`.
    pub mc_letter: bool,
}

pub const NUMERIC_TOL: f64 = 1e-6;

impl Default for AnswerMatcher {
    fn default() -> Self {
        Self {
            case_fold: true,
            strip_punctuation: true,
            numeric: true,
            mc_letter: false,
        }
    }
}

impl AnswerMatcher {
    pub fn exact() -> Self {
        Self {
            case_fold: false,
            strip_punctuation: false,
            numeric: false,
            mc_letter: false,
        }
    }

    pub fn numeric() -> Self {
        Self {
            numeric: true,
            ..Self::exact()
        }
    }

    pub fn multiple_choice() -> Self {
        Self {
            mc_letter: true,
            ..Self::default()
        }
    }

    pub fn matches(&self, pred: &str, gold: &str) -> bool {
        match (self.canonical(pred), self.canonical(gold)) {
            (Canon::Number(a), Canon::Number(b)) => (a - b).abs() <= NUMERIC_TOL,
            (a, b) => a == b,
        }
    }

    fn canonical(&self, s: &str) -> Canon {
        let s = s.trim();
        if self.mc_letter {
            if let Some(c) = self.choice_letter(s) {
                return Canon::Letter(c);
            }
        }
        if self.numeric {
            if let Some(x) = parse_number(s) {
                return Canon::Number(x);
            }
        }
        let mut t = s.to_string();
        if self.case_fold {
            t = t.to_lowercase();
        }
        if self.strip_punctuation {
            t.retain(|c| !c.is_ascii_punctuation());
            t = t.split_whitespace().collect::<Vec<_>>().join(" ");
        }
        Canon::Text(t)
    }

    fn choice_letter(&self, s: &str) -> Option<char> {
        let s = if self.case_fold { s.to_uppercase() } else { s.to_string() };
        let letter = |c: char| c.is_ascii_uppercase().then_some(c);

        // (B)
        let b = s.as_bytes();
        for i in 0..b.len().saturating_sub(2) {
            if b[i] == b'(' && b[i + 2] == b')' {
                if let Some(c) = letter(b[i + 1] as char) {
                    return Some(c);
                }
            }
        }
        // "answer is B", "ANSWER: B"
        let lower = s.to_ascii_lowercase();
        for cue in ["answer is", "answer:"] {
            if let Some(at) = lower.rfind(cue) {
                let rest = s[at + cue.len()..].trim_start();
                let rest = rest.trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
                let mut chars = rest.chars();
                if let (Some(c), None) = (chars.next(), chars.next()) {
                    return letter(c);
                }
            }
        }
        // bare "B" or "B."
        let bare = s.trim_end_matches(['.', ')']).trim_start_matches('(');
        let mut chars = bare.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => letter(c),
            _ => None,
        }
    }
}

fn parse_number(s: &str) -> Option<f64> {
    let s = s.trim_end_matches('.').replace(',', "");
    // Rust also accepts "inf" and "nan"; only plain digits count here.
    if !s.bytes().any(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse::<f64>().ok().filter(|x| x.is_finite())
}

#[derive(Debug, Clone, PartialEq)]
enum Canon {
    Letter(char),
    Number(f64),
    Text(String),
}

impl fmt::Display for AnswerMatcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.case_fold {
            parts.push("case-fold");
        }
        if self.strip_punctuation {
            parts.push("strip-punct");
        }
        if self.numeric {
            parts.push("numeric");
        }
        if self.mc_letter {
            parts.push("mc-letter");
        }
        if parts.is_empty() {
            f.write_str("exact")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

/// Accepts a preset (`exact`, `default`, `numeric`, `mc`) or a comma list of
/// `case-fold`, `strip-punct`, `numeric`, `mc-letter`.
impl FromStr for AnswerMatcher {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => return Ok(Self::exact()),
            "default" => return Ok(Self::default()),
            "numeric" => return Ok(Self::numeric()),
            "mc" => return Ok(Self::multiple_choice()),
            _ => {}
        }
        let mut m = Self::exact();
        for part in s.split(',').map(str::trim) {
            match part {
                "case-fold" => m.case_fold = true,
                "strip-punct" => m.strip_punctuation = true,
                "numeric" => m.numeric = true,
                "mc-letter" => m.mc_letter = true,
                other => return Err(format!("unknown matcher flag '{other}'")),
            }
        }
        Ok(m)
    }
}
