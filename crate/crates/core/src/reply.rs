//! Helpers for pulling structured answers out of free-form model replies.
//!
//! Rules:
//! - Yes/No: leading quotes, backticks, asterisks and whitespace are
//!   skipped; the first alphabetic word decides, case-insensitively.
//!   `yes` → true, `no` → false, anything else is unrecognized.
//! - JSON: the first balanced `{...}` span that parses as a JSON object and
//!   satisfies the caller's predicate wins. Prose and code fences around it
//!   are ignored.

use serde_json::{Map, Value};

pub fn parse_yes_no(reply: &str) -> Option<bool> {
    let trimmed = reply.trim_start_matches(|c: char| {
        c.is_whitespace() || matches!(c, '"' | '\'' | '`' | '*' | '_')
    });
    let word: String = trimmed
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// End index (exclusive) of the balanced object starting at `start`, which
/// must point at `{`. String literals are skipped so braces inside them do not
/// count.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, &b) in bytes[start..].iter().enumerate() {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(start + offset + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// First JSON object in `text` accepted by `accept`, with its byte span.
pub fn find_json_object<F>(text: &str, accept: F) -> Option<(Map<String, Value>, usize, usize)>
where
    F: Fn(&Map<String, Value>) -> bool,
{
    let bytes = text.as_bytes();
    let mut search = 0;
    while let Some(rel) = text[search..].find('{') {
        let start = search + rel;
        if let Some(end) = balanced_end(bytes, start) {
            if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&text[start..end]) {
                if accept(&map) {
                    return Some((map, start, end));
                }
            }
        }
        search = start + 1;
    }
    None
}

/// Interpret a JSON value as a 0/1 flag. Accepts integers 0/1, booleans and
/// the strings "0"/"1"/"yes"/"no".
pub fn json_flag(value: &Value) -> Option<bool> {
    match value {
        Value::Bool(b) => Some(*b),
        Value::Number(n) => match n.as_f64() {
            Some(1.0) => Some(true),
            Some(0.0) => Some(false),
            _ => None,
        },
        Value::String(s) => match s.trim().to_lowercase().as_str() {
            "1" | "yes" | "true" => Some(true),
            "0" | "no" | "false" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yes_no_variants() {
        for (reply, want) in [
            ("Yes", Some(true)),
            ("yes", Some(true)),
            ("YES.", Some(true)),
            ("  \"Yes\"", Some(true)),
            ("**No**", Some(false)),
            ("No, it does not.", Some(false)),
            ("`no`", Some(false)),
            ("maybe", None),
            ("Nope", None),
            ("Yesterday", None),
            ("", None),
        ] {
            assert_eq!(parse_yes_no(reply), want, "{reply:?}");
        }
    }

    #[test]
    fn json_inside_prose_and_fences() {
        let text = "Sure!\n```json\n{\"prediction\": \"sarcastic\"}\n```\nDone";
        let (map, _, _) = find_json_object(text, |m| m.contains_key("prediction")).unwrap();
        assert_eq!(map["prediction"], "sarcastic");
    }

    #[test]
    fn skips_objects_failing_predicate_and_braces_in_strings() {
        let text = r#"{"note": "a } brace"} then {"prediction": "non-sarcastic"}"#;
        let (map, start, _) = find_json_object(text, |m| m.contains_key("prediction")).unwrap();
        assert_eq!(map["prediction"], "non-sarcastic");
        assert!(start > 0);
        assert!(find_json_object("{ not json", |_| true).is_none());
    }

    #[test]
    fn nested_objects() {
        let text = r#"x {"a": {"b": 1}, "prediction": "sarcastic"} y"#;
        let (map, _, _) = find_json_object(text, |m| m.contains_key("prediction")).unwrap();
        assert_eq!(map["a"]["b"], 1);
    }

    #[test]
    fn flags() {
        assert_eq!(json_flag(&Value::from(1)), Some(true));
        assert_eq!(json_flag(&Value::from(0.0)), Some(false));
        assert_eq!(json_flag(&Value::from(true)), Some(true));
        assert_eq!(json_flag(&Value::from("0")), Some(false));
        assert_eq!(json_flag(&Value::from(2)), None);
        assert_eq!(json_flag(&Value::Null), None);
    }
}
