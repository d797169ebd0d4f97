//! Tolerant parsing of model responses.
//!
//! A response gets exactly one repair pass: markdown fences are stripped, the
//! text is trimmed to its outermost braces/brackets and single-quoted strings
//! are normalized. If that still does not parse, the caller sees an error.

use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Strips a surrounding markdown code fence, if any.
pub fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let body = match rest.find('\n') {
            Some(i) => &rest[i + 1..],
            None => rest,
        };
        let body = body.trim_end();
        body.strip_suffix("```").unwrap_or(body).trim()
    } else {
        t
    }
}

/// Trims to the span from the first opening brace/bracket to the last matching closer.
pub fn outermost_span(text: &str) -> Option<&str> {
    let start = text.find(['{', '['])?;
    let close = if text.as_bytes()[start] == b'{' { '}' } else { ']' };
    let end = text.rfind(close)?;
    (end > start).then(|| &text[start..=end])
}

/// Rewrites `'...'` string literals to `"..."` outside of double-quoted strings.
fn normalize_quotes(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_double = false;
    let mut in_single = false;
    let mut escaped = false;
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if escaped {
            out.push(c);
            escaped = false;
            continue;
        }
        match c {
            '\\' => {
                escaped = true;
                out.push(c);
            }
            '"' if !in_single => {
                in_double = !in_double;
                out.push(c);
            }
            '"' if in_single => out.push_str("\\\""),
            '\'' if !in_double => {
                // apostrophes inside words stay literal
                let prev = i.checked_sub(1).map(|j| chars[j]);
                let next = chars.get(i + 1).copied();
                let inner = prev.is_some_and(char::is_alphanumeric) && next.is_some_and(char::is_alphanumeric);
                if inner && in_single {
                    out.push(c);
                } else {
                    in_single = !in_single;
                    out.push('"');
                }
            }
            _ => out.push(c),
        }
    }
    out
}

/// Removes trailing commas before `}` or `]`, which several prompt formats invite.
fn drop_trailing_commas(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let chars: Vec<char> = text.chars().collect();
    let mut in_str = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_str {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            continue;
        }
        if c == '"' {
            in_str = true;
        }
        if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

/// Parses a JSON value, applying the single repair pass on failure.
pub fn parse_json(text: &str, what: &'static str) -> Result<Value> {
    if let Ok(v) = serde_json::from_str::<Value>(text.trim()) {
        return Ok(v);
    }
    let unfenced = strip_fences(text);
    let span = outermost_span(unfenced)
        .ok_or_else(|| Error::parse(what, format!("no JSON object or list in {:?}", snippet(text))))?;
    let straight = span.replace(['\u{201c}', '\u{201d}'], "\"").replace(['\u{2018}', '\u{2019}'], "'");
    let candidates = [
        span.to_string(),
        drop_trailing_commas(span),
        drop_trailing_commas(&normalize_quotes(&straight)),
    ];
    for c in &candidates {
        if let Ok(v) = serde_json::from_str::<Value>(c) {
            return Ok(v);
        }
    }
    Err(Error::parse(what, format!("invalid JSON in {:?}", snippet(text))))
}

pub fn snippet(text: &str) -> String {
    const MAX: usize = 160;
    if text.chars().count() <= MAX {
        text.to_string()
    } else {
        let cut: String = text.chars().take(MAX).collect();
        format!("{cut}...")
    }
}

/// Reads an integer id from a JSON number or a string such as `"3"`, `"id3"`.
pub fn value_to_id(v: &Value) -> Option<u32> {
    match v {
        Value::Number(n) => n.as_u64().and_then(|n| u32::try_from(n).ok()),
        Value::String(s) => {
            let digits: String = s
                .chars()
                .skip_while(|c| !c.is_ascii_digit())
                .take_while(char::is_ascii_digit)
                .collect();
            digits.parse().ok()
        }
        _ => None,
    }
}

/// Parses a list of ids such as `['0','2']` or `[0, 2]`.
pub fn parse_id_list(text: &str, what: &'static str) -> Result<Vec<u32>> {
    let v = parse_json(text, what)?;
    let items = v
        .as_array()
        .ok_or_else(|| Error::parse(what, format!("expected a list, got {:?}", snippet(text))))?;
    items
        .iter()
        .map(|item| {
            value_to_id(item)
                .ok_or_else(|| Error::parse(what, format!("list element {item} is not an id")))
        })
        .collect()
}

/// Looks up a key in a JSON object, ignoring case and surrounding whitespace.
pub fn get_ci<'a>(obj: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.iter()
        .find(|(k, _)| k.trim().eq_ignore_ascii_case(key))
        .map(|(_, v)| v)
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.trim().to_string(),
        other => other.to_string(),
    }
}

/// Extracts `key: value` fields from loosely formatted output such as
/// `{Reason: ..., Judgement: "valid", Confidence: 0.8}`.
///
/// Tries strict JSON (after repair) first. Otherwise each value runs from
/// its key up to the next recognised key. Keys are matched case-insensitively;
/// each entry of `keys` lists accepted spellings for one field.
pub fn loose_fields(text: &str, keys: &[&[&str]]) -> Vec<Option<String>> {
    if let Ok(Value::Object(obj)) = parse_json(text, "fields") {
        let found: Vec<Option<String>> = keys
            .iter()
            .map(|names| names.iter().find_map(|n| get_ci(&obj, n)).map(value_text))
            .collect();
        if found.iter().any(Option::is_some) {
            return found;
        }
    }
    let body = strip_fences(text);
    let lower = body.to_lowercase();
    // (start of key, end of key incl. colon, field index)
    let mut hits: Vec<(usize, usize, usize)> = Vec::new();
    for (field, names) in keys.iter().enumerate() {
        for name in names.iter() {
            let needle = name.to_lowercase();
            let mut from = 0;
            while let Some(pos) = lower[from..].find(&needle) {
                let start = from + pos;
                let mut end = start + needle.len();
                let boundary_ok = start == 0
                    || !lower[..start].chars().next_back().is_some_and(char::is_alphanumeric);
                let rest = &lower[end..];
                let skip_quote = rest.len() - rest.trim_start_matches(['"', '\'', '*']).len();
                end += skip_quote;
                let rest = &lower[end..];
                let ws = rest.len() - rest.trim_start().len();
                if boundary_ok && lower[end + ws..].starts_with(':') {
                    hits.push((start, end + ws + 1, field));
                    break;
                }
                from = start + needle.len();
            }
        }
    }
    hits.sort();
    hits.dedup_by_key(|h| h.2);
    let mut out = vec![None; keys.len()];
    for (i, &(_, vstart, field)) in hits.iter().enumerate() {
        if out[field].is_some() {
            continue;
        }
        let vend = hits
            .iter()
            .skip(i + 1)
            .map(|h| h.0)
            .next()
            .unwrap_or(body.len());
        let raw = body[vstart..vend]
            .trim()
            .trim_end_matches(['}', ','])
            .trim()
            .trim_start_matches(['"', '\''])
            .trim_end_matches(['"', '\''])
            .trim()
            .trim_end_matches(',')
            .trim_end_matches(['"', '\''])
            .trim();
        out[field] = Some(raw.to_string());
    }
    out
}

/// Strips characters that are not letters, digits, whitespace or ordinary
/// punctuation, then collapses whitespace runs.
pub fn sanitize_text(text: &str) -> String {
    const KEEP: &[char] = &['.', ',', ':', ';', '!', '?', '\'', '-', '/', '%', '(', ')', '&', '+', '@', '$'];
    let kept: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace() || KEEP.contains(c))
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}
