//! Repeating / incrementing template detection.
//!
//! Two split sequences are derived from the detokenized text:
//!
//! - numeric splits: whitespace words with `0x`/`0b`/`0o` numerals rewritten
//!   in decimal (backslash escapes act as whitespace), each word cut into runs of
//!   digits (a `digits.digits` run is one decimal numeral) and runs of other
//!   characters. Fewer than three numerals means no numeric template.
//! - character splits: one element per character, never numeric.
//!
//! Each sequence is checked by stride: for every templating length `L` with
//! `2L` below the sequence length and every start position below `L`, the
//! elements `pos, pos+L, pos+2L, ...` form one iteration. An iteration mixing
//! text and numerals is neither; text is repeating when all elements are
//! equal; numerals are incrementing when they form an arithmetic progression
//! with nonzero difference and repeating when the difference is zero. A
//! length is repeating when all its iterations repeat and incrementing when
//! at least one increments and the rest increment or repeat.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Repeating,
    Incrementing,
    None,
}

impl TemplateKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TemplateKind::Repeating => "repeating",
            TemplateKind::Incrementing => "incrementing",
            TemplateKind::None => "none",
        }
    }
}

impl std::str::FromStr for TemplateKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "repeating" => Ok(TemplateKind::Repeating),
            "incrementing" => Ok(TemplateKind::Incrementing),
            "none" => Ok(TemplateKind::None),
            other => Err(format!("unknown template kind {other:?}")),
        }
    }
}

/// Template classification with the templating length that matched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateVerdict {
    pub kind: TemplateKind,
    pub stride: Option<usize>,
}

impl TemplateVerdict {
    pub const NONE: TemplateVerdict = TemplateVerdict {
        kind: TemplateKind::None,
        stride: None,
    };

    pub fn new(kind: TemplateKind, stride: usize) -> Self {
        TemplateVerdict {
            kind,
            stride: Some(stride),
        }
    }

    pub fn is_template(&self) -> bool {
        self.kind != TemplateKind::None
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Elem {
    Text(String),
    Num(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum IterKind {
    Neither,
    RepeatText,
    RepeatZeroDiff,
    Incrementing,
}

/// First matching templating lengths of one split sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Scan {
    /// (length, repetition came only from zero-difference progressions)
    repeating: Option<(usize, bool)>,
    incrementing: Option<usize>,
}

fn prefixed_numeral() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(?:0[xX][0-9a-fA-F]+|0[bB][01]+|0[oO][0-7]+)").unwrap())
}

fn escape_sequence() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"\\(?:x[0-9a-fA-F]{2}|u[0-9a-fA-F]{4}|[ntrvfab0'"\\])"#).unwrap()
    })
}

fn to_decimal(numeral: &str) -> Option<String> {
    let (radix, digits) = match &numeral[..2] {
        "0x" | "0X" => (16, &numeral[2..]),
        "0b" | "0B" => (2, &numeral[2..]),
        "0o" | "0O" => (8, &numeral[2..]),
        _ => return None,
    };
    u128::from_str_radix(digits, radix).ok().map(|v| v.to_string())
}

fn segment(word: &str, out: &mut Vec<Elem>) {
    let chars: Vec<char> = word.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let s: String = chars[start..i].iter().collect();
            out.push(Elem::Num(s.parse().expect("digit run parses")));
        } else {
            let start = i;
            while i < chars.len() && !chars[i].is_ascii_digit() {
                i += 1;
            }
            out.push(Elem::Text(chars[start..i].iter().collect()));
        }
    }
}

/// Numeric split sequence, or `None` when it holds fewer than 3 numerals.
fn numeric_splits(text: &str) -> Option<Vec<Elem>> {
    let mut elems = Vec::new();
    // An escape separates words, so `1\n2` is two numerals rather than 12.
    let unescaped = escape_sequence().replace_all(text, " ");
    for word in unescaped.split_whitespace() {
        let converted = prefixed_numeral().replace_all(word, |c: &regex::Captures| {
            to_decimal(&c[0]).unwrap_or_else(|| c[0].to_string())
        });
        segment(&converted, &mut elems);
    }
    let numerals = elems.iter().filter(|e| matches!(e, Elem::Num(_))).count();
    (numerals >= 3).then_some(elems)
}

fn char_splits(text: &str) -> Vec<Elem> {
    text.chars().map(|c| Elem::Text(c.to_string())).collect()
}

fn classify<'a>(mut it: impl Iterator<Item = &'a Elem>) -> IterKind {
    let first = match it.next() {
        Some(e) => e,
        None => return IterKind::Neither,
    };
    match first {
        Elem::Text(t0) => {
            for e in it {
                match e {
                    Elem::Text(t) if t == t0 => {}
                    _ => return IterKind::Neither,
                }
            }
            IterKind::RepeatText
        }
        Elem::Num(x0) => {
            let mut prev = *x0;
            let mut diff = None;
            for e in it {
                let x = match e {
                    Elem::Num(x) => *x,
                    Elem::Text(_) => return IterKind::Neither,
                };
                let d = x - prev;
                match diff {
                    None => diff = Some(d),
                    Some(d0) => {
                        let tol = 1e-9 * x.abs().max(prev.abs()).max(1.0);
                        if (d - d0).abs() > tol {
                            return IterKind::Neither;
                        }
                    }
                }
                prev = x;
            }
            match diff {
                Some(d) if d != 0.0 => IterKind::Incrementing,
                _ => IterKind::RepeatZeroDiff,
            }
        }
    }
}

fn scan(elems: &[Elem]) -> Scan {
    let mut out = Scan::default();
    // Strictly below half: at exactly half every iteration has two
    // elements, and any two numerals form a progression.
    for len in (1..).take_while(|l| 2 * l < elems.len()) {
        let kinds: Vec<IterKind> = (0..len)
            .map(|pos| classify(elems[pos..].iter().step_by(len)))
            .collect();
        if kinds.contains(&IterKind::Neither) {
            continue;
        }
        if kinds.contains(&IterKind::Incrementing) {
            out.incrementing.get_or_insert(len);
        } else {
            let zero_diff_only = kinds.iter().all(|k| *k == IterKind::RepeatZeroDiff);
            out.repeating.get_or_insert((len, zero_diff_only));
        }
        if out.incrementing.is_some() && matches!(out.repeating, Some((_, false))) {
            break;
        }
    }
    out
}

/// Classifies detokenized text as a repeating or incrementing template.
///
/// When both kinds match, repeating wins unless every repeating match came
/// from zero-difference numeric progressions alone.
pub fn detect_template(text: &str) -> TemplateVerdict {
    let numeric = numeric_splits(text).map(|e| scan(&e)).unwrap_or_default();
    let chars = scan(&char_splits(text));

    let strong_repeat = match numeric.repeating {
        Some((len, false)) => Some(len),
        _ => chars.repeating.map(|(len, _)| len),
    };
    if let Some(len) = strong_repeat {
        return TemplateVerdict::new(TemplateKind::Repeating, len);
    }
    if let Some(len) = numeric.incrementing {
        return TemplateVerdict::new(TemplateKind::Incrementing, len);
    }
    if let Some((len, _)) = numeric.repeating {
        return TemplateVerdict::new(TemplateKind::Repeating, len);
    }
    TemplateVerdict::NONE
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kind(s: &str) -> TemplateKind {
        detect_template(s).kind
    }

    #[test]
    fn fixtures() {
        assert_eq!(kind("Go Go Go Go"), TemplateKind::Repeating);
        assert_eq!(kind("23: 0xf1, 24: 0xf2, 25: 0xf3"), TemplateKind::Incrementing);
        assert_eq!(kind("the quick brown fox jumps"), TemplateKind::None);
        assert_eq!(kind("5 5 5 5"), TemplateKind::Repeating);
    }

    #[test]
    fn hex_example_matches_at_stride_four() {
        // [23 : 241 , 24 : 242 , 25 : 243] has period 4.
        assert_eq!(
            detect_template("23: 0xf1, 24: 0xf2, 25: 0xf3"),
            TemplateVerdict::new(TemplateKind::Incrementing, 4)
        );
    }

    #[test]
    fn numeric_segmentation() {
        let e = numeric_splits("a1.5b 0x10, 0b11\\n 7").unwrap();
        assert_eq!(
            e,
            vec![
                Elem::Text("a".into()),
                Elem::Num(1.5),
                Elem::Text("b".into()),
                Elem::Num(16.0),
                Elem::Text(",".into()),
                Elem::Num(3.0),
                Elem::Num(7.0),
            ]
        );
        assert!(numeric_splits("only 2 numerals 3").is_none());
    }

    #[test]
    fn decimal_points_join_numerals() {
        assert_eq!(kind("1.5 2.5 3.5 4.5"), TemplateKind::Incrementing);
        assert_eq!(kind("v1.0 v1.1 v1.2 v1.3"), TemplateKind::Incrementing);
    }

    #[test]
    fn other_bases() {
        assert_eq!(kind("0b1 0b10 0b11 0b100"), TemplateKind::Incrementing);
        assert_eq!(kind("0o7 0o10 0o11"), TemplateKind::Incrementing);
        assert_eq!(kind("0x0A 0x0B 0x0C 0x0D"), TemplateKind::Incrementing);
    }

    #[test]
    fn escapes_are_removed() {
        assert_eq!(kind("1\\n 2\\n 3\\n 4\\n"), TemplateKind::Incrementing);
        assert_eq!(kind("0b101\\n0b110\\n0b111\\n0b1000"), TemplateKind::Incrementing);
    }

    #[test]
    fn separators_interleaved() {
        assert_eq!(kind("item 1, item 2, item 3, item 4"), TemplateKind::Incrementing);
        assert_eq!(kind("10 - 20 - 30 - 40"), TemplateKind::Incrementing);
    }

    #[test]
    fn decreasing_progressions_count() {
        assert_eq!(kind("9 7 5 3 1"), TemplateKind::Incrementing);
    }

    #[test]
    fn non_progression_is_none() {
        assert_eq!(kind("3 17 4 99 8 1000 2 56 3"), TemplateKind::None);
        assert_eq!(kind("the year 1999 and also 2004 then 17 things"), TemplateKind::None);
    }

    #[test]
    fn repeating_text_wins_over_incrementing() {
        // Character view repeats with period 4; numeric view is a zero-diff
        // repeat at length 2.
        assert_eq!(kind("1 2 1 2 1 2"), TemplateKind::Repeating);
    }

    #[test]
    fn zero_diff_scan() {
        let elems: Vec<Elem> = [1.0, 2.0, 1.0, 2.0, 1.0, 2.0].map(Elem::Num).to_vec();
        let s = scan(&elems);
        assert_eq!(s.repeating, Some((2, true)));
        assert_eq!(s.incrementing, None);
        let mixed: Vec<Elem> = [1.0, 5.0, 2.0, 5.0, 3.0, 5.0].map(Elem::Num).to_vec();
        assert_eq!(scan(&mixed), Scan { repeating: None, incrementing: Some(2) });
    }

    #[test]
    fn two_element_iterations_are_not_enough() {
        // Any two numerals form a progression, so length n/2 is excluded.
        assert_eq!(kind("7 100"), TemplateKind::None);
        assert_eq!(kind("3 90 41 8 12 77"), TemplateKind::None);
    }

    #[test]
    fn stride_below_half() {
        for text in ["ab ab", "x x x", "1 2 3", "Go Go Go Go", "aaaa"] {
            let v = detect_template(text);
            if let Some(s) = v.stride {
                assert!(2 * s < text.chars().count(), "{text}: {v:?}");
            }
        }
    }

    #[test]
    fn empty_and_short_text() {
        assert_eq!(detect_template(""), TemplateVerdict::NONE);
        assert_eq!(detect_template("a"), TemplateVerdict::NONE);
        assert_eq!(kind("aa"), TemplateKind::None);
        assert_eq!(kind("aaa"), TemplateKind::Repeating);
    }
}
