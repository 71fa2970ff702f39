//! Lenient recovery of the JSON objects models are asked to emit.

use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no JSON object could be recovered from the response")]
    UnparseableResponse,
    #[error("response is missing the `{0}` field")]
    MissingField(&'static str),
    #[error("field `{0}` is empty")]
    EmptyField(&'static str),
}

/// Strips a single leading/trailing Markdown code fence, if present.
pub fn strip_code_fence(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    // Drop the info string (e.g. "json") on the opening fence line.
    let body = match rest.find('\n') {
        Some(nl) => &rest[nl + 1..],
        None => rest,
    };
    body.trim_end()
        .strip_suffix("```")
        .unwrap_or(body)
        .trim()
}

/// Finds the JSON object in a model response: the whole (fence-stripped)
/// text if it parses, otherwise the span from the first `{` to the last `}`.
pub fn extract_object(raw: &str) -> Result<Map<String, Value>, ParseError> {
    let body = strip_code_fence(raw);
    if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(body) {
        return Ok(map);
    }
    let (Some(start), Some(end)) = (body.find('{'), body.rfind('}')) else {
        return Err(ParseError::UnparseableResponse);
    };
    if start >= end {
        return Err(ParseError::UnparseableResponse);
    }
    match serde_json::from_str::<Value>(&body[start..=end]) {
        Ok(Value::Object(map)) => Ok(map),
        _ => Err(ParseError::UnparseableResponse),
    }
}

/// Reads a field as text. Numbers and booleans are stringified since models
/// sometimes emit `"prediction": 42`.
pub fn text_field(map: &Map<String, Value>, name: &'static str) -> Result<String, ParseError> {
    match map.get(name) {
        None | Some(Value::Null) => Err(ParseError::MissingField(name)),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(Value::Bool(b)) => Ok(b.to_string()),
        Some(other) => Ok(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fences_are_stripped() {
        assert_eq!(strip_code_fence("```json\n{\"a\":1}\n```"), "{\"a\":1}");
        assert_eq!(strip_code_fence("```\n{}\n```\n"), "{}");
        assert_eq!(strip_code_fence("  {\"a\":1} "), "{\"a\":1}");
    }

    #[test]
    fn object_is_recovered_from_chatter() {
        let m = extract_object("Sure! Here it is: {\"x\": \"y\"} hope that helps").unwrap();
        assert_eq!(m["x"], "y");
        assert_eq!(extract_object("no json"), Err(ParseError::UnparseableResponse));
        assert_eq!(extract_object("} {"), Err(ParseError::UnparseableResponse));
        assert_eq!(extract_object("[1,2]"), Err(ParseError::UnparseableResponse));
    }

    #[test]
    fn text_field_coerces_scalars() {
        let m = extract_object(r#"{"a": 42, "b": "s", "c": null}"#).unwrap();
        assert_eq!(text_field(&m, "a").unwrap(), "42");
        assert_eq!(text_field(&m, "b").unwrap(), "s");
        assert_eq!(text_field(&m, "c"), Err(ParseError::MissingField("c")));
        assert_eq!(text_field(&m, "d"), Err(ParseError::MissingField("d")));
    }
}
