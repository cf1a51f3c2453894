//! Reply parsers for the specialist agents.

use std::sync::OnceLock;

use regex::Regex;
use serde_json::Value;

use crate::domain::{EMOTION_CATEGORIES, SENTIMENT_CATEGORIES, VECTOR_SUM_TOLERANCE};
use crate::reply::find_json_object;

pub const NO_FACE_SENTINEL: &str = "no face detected";
pub const NO_TEXT_SENTINEL: &str = "NONE";

/// Result of parsing a score vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedVector {
    /// Sums to one.
    pub values: Vec<f64>,
    /// Set when the reply was a sentinel, all-zero, or off by more than the
    /// tolerance before renormalization.
    pub low_confidence: bool,
}

const NUMBER: &str = r"([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)";

fn score_regex(categories: &[&str]) -> Regex {
    let names = categories.join("|");
    Regex::new(&format!(r#"(?i)\b({names})\b["']?\s*[:=]\s*["']?{NUMBER}"#)).expect("valid score regex")
}

fn sentiment_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| score_regex(&SENTIMENT_CATEGORIES))
}

fn emotion_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| score_regex(&EMOTION_CATEGORIES))
}

fn confidence_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(r#"(?i)\bconfidence\b["']?\s*[:=]\s*["']?{NUMBER}"#)).expect("valid regex")
    })
}

fn json_number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// Pull scores for `categories` out of a JSON object or `label=x` /
/// `label: x` tokens. `None` when no score token is present or a JSON score
/// is negative or non-numeric.
fn extract_scores(reply: &str, categories: &[&str], re: &Regex) -> Option<Vec<Option<f64>>> {
    let has_category = |m: &serde_json::Map<String, Value>| {
        m.keys().any(|k| categories.iter().any(|c| c.eq_ignore_ascii_case(k)))
    };
    if let Some((map, _, _)) = find_json_object(reply, has_category) {
        let mut scores = vec![None; categories.len()];
        for (key, value) in &map {
            if let Some(i) = categories.iter().position(|c| c.eq_ignore_ascii_case(key)) {
                let v = json_number(value).filter(|v| v.is_finite() && *v >= 0.0)?;
                scores[i].get_or_insert(v);
            }
        }
        return Some(scores);
    }
    let mut scores = vec![None; categories.len()];
    let mut found = false;
    for cap in re.captures_iter(reply) {
        let name = cap[1].to_lowercase();
        let Some(i) = categories.iter().position(|c| *c == name) else {
            continue;
        };
        if let Ok(v) = cap[2].parse::<f64>() {
            if v.is_finite() {
                scores[i].get_or_insert(v);
                found = true;
            }
        }
    }
    found.then_some(scores)
}

fn finish(scores: Vec<Option<f64>>) -> ParsedVector {
    let n = scores.len();
    let values: Vec<f64> = scores.into_iter().map(|s| s.unwrap_or(0.0)).collect();
    let sum: f64 = values.iter().sum();
    if sum <= 0.0 {
        return ParsedVector {
            values: vec![1.0 / n as f64; n],
            low_confidence: true,
        };
    }
    ParsedVector {
        low_confidence: (sum - 1.0).abs() > VECTOR_SUM_TOLERANCE,
        values: values.into_iter().map(|v| v / sum).collect(),
    }
}

/// Positive/neutral/negative scores.
pub fn parse_sentiment3(reply: &str) -> Option<ParsedVector> {
    extract_scores(reply, &SENTIMENT_CATEGORIES, sentiment_regex()).map(finish)
}

/// Seven basic-emotion scores; the no-face sentinel yields a uniform vector.
pub fn parse_emotion7(reply: &str) -> Option<ParsedVector> {
    if reply.to_lowercase().contains(NO_FACE_SENTINEL) {
        let n = EMOTION_CATEGORIES.len();
        return Some(ParsedVector {
            values: vec![1.0 / n as f64; n],
            low_confidence: true,
        });
    }
    extract_scores(reply, &EMOTION_CATEGORIES, emotion_regex()).map(finish)
}

/// Trimmed reply, with the no-text sentinel mapped to the empty string.
pub fn parse_ocr_text(reply: &str) -> String {
    let trimmed = reply.trim();
    let bare = trimmed.trim_matches(|c: char| !c.is_alphanumeric());
    if bare.eq_ignore_ascii_case(NO_TEXT_SENTINEL) {
        String::new()
    } else {
        trimmed.to_string()
    }
}

/// A `confidence` score supplied in the reply, clamped to `[0, 1]`.
pub fn parse_confidence(reply: &str) -> Option<f64> {
    if let Some((map, _, _)) = find_json_object(reply, |m| m.contains_key("confidence")) {
        if let Some(v) = map.get("confidence").and_then(json_number) {
            return v.is_finite().then(|| v.clamp(0.0, 1.0));
        }
    }
    let cap = confidence_regex().captures(reply)?;
    cap[1].parse::<f64>().ok().filter(|v| v.is_finite()).map(|v| v.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn sentiment_json() {
        let p = parse_sentiment3(r#"{"positive":0.5,"neutral":0.5,"negative":0.0}"#).unwrap();
        assert!(close(&p.values, &[0.5, 0.5, 0.0]));
        assert!(!p.low_confidence);
    }

    #[test]
    fn sentiment_missing_labels_default_zero() {
        let p = parse_sentiment3("negative: 1").unwrap();
        assert!(close(&p.values, &[0.0, 0.0, 1.0]));
        assert!(!p.low_confidence);
    }

    #[test]
    fn sentiment_renormalized_and_flagged() {
        // 0.6 / 1.2 = 0.5
        let p = parse_sentiment3("positive=0.6, neutral=0.6").unwrap();
        assert!(close(&p.values, &[0.5, 0.5, 0.0]));
        assert!(p.low_confidence);
    }

    #[test]
    fn sentiment_order_and_case_insensitive() {
        let p = parse_sentiment3("Negative=0.10\nPOSITIVE = 0.70\nneutral: 0.20").unwrap();
        assert!(close(&p.values, &[0.7, 0.2, 0.1]));
    }

    #[test]
    fn sentiment_all_zero_is_uniform() {
        let p = parse_sentiment3("positive=0 neutral=0 negative=0").unwrap();
        assert!(close(&p.values, &[1.0 / 3.0; 3]));
        assert!(p.low_confidence);
    }

    #[test]
    fn sentiment_unrecognized() {
        assert!(parse_sentiment3("it feels upbeat").is_none());
        assert!(parse_sentiment3(r#"{"positive": -1}"#).is_none());
    }

    #[test]
    fn emotion_one_hot_and_sentinel() {
        let p = parse_emotion7(r#"{"happy":1}"#).unwrap();
        assert_eq!(p.values, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let p = parse_emotion7("No face detected.").unwrap();
        assert!(close(&p.values, &[1.0 / 7.0; 7]));
        assert!(p.low_confidence);
    }

    #[test]
    fn emotion_sevenths_accepted_as_is() {
        let reply = EMOTION_CATEGORIES
            .iter()
            .map(|c| format!("{c}=0.142857"))
            .collect::<Vec<_>>()
            .join("\n");
        let p = parse_emotion7(&reply).unwrap();
        // 7 × 0.142857 = 0.999999, inside the tolerance.
        assert!(!p.low_confidence);
        assert!((p.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ocr_sentinel() {
        assert_eq!(parse_ocr_text("NONE"), "");
        assert_eq!(parse_ocr_text(" none. "), "");
        assert_eq!(parse_ocr_text("SALE 50% OFF\n"), "SALE 50% OFF");
        assert_eq!(parse_ocr_text("NONE OF YOUR BUSINESS"), "NONE OF YOUR BUSINESS");
    }

    #[test]
    fn confidence_token() {
        assert_eq!(parse_confidence("positive=1\nconfidence: 0.8"), Some(0.8));
        assert_eq!(parse_confidence(r#"{"confidence": 2}"#), Some(1.0));
        assert_eq!(parse_confidence("no score"), None);
    }
}
