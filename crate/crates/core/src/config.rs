//! `key=value` text used by run configs and checkpoint headers.

use std::str::FromStr;

use crate::error::{invalid, Result};

/// Parses `key=value` lines. Blank lines and lines starting with `#` are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| invalid(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn format_kv(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| invalid(format!("invalid value {value:?} for {key}")))
}

pub(crate) fn kv(key: &str, value: impl ToString) -> (String, String) {
    (key.to_string(), value.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_formats() {
        let pairs = parse_kv("# comment\n\nwidth = 64\nvariant=uvit\n").unwrap();
        assert_eq!(pairs, vec![kv("width", 64), kv("variant", "uvit")]);
        assert_eq!(parse_kv(&format_kv(&pairs)).unwrap(), pairs);
        assert!(parse_kv("novalue").is_err());
        assert!(parse_value::<usize>("width", "x").is_err());
    }
}
