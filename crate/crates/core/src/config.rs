//! `key = value` configuration text.
//!
//! One assignment per line; `#` starts a comment; blank lines are
//! ignored. Keys may appear once.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_kv(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
        let (key, value) = (k.trim(), v.trim());
        if key.is_empty() {
            return Err(Error::Config(format!("line {line}: empty key")));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config(format!(
                "line {line}: `{key}` already set on line {}",
                prev.line
            )));
        }
        out.push(Entry {
            key: key.to_string(),
            value: value.to_string(),
            line,
        });
    }
    Ok(out)
}

impl Entry {
    pub fn parse<T: FromStr>(&self) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.value.parse().map_err(|e: T::Err| {
            Error::Config(format!(
                "line {}: bad value `{}` for `{}`: {e}",
                self.line, self.value, self.key
            ))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blanks_and_spacing() {
        let e = parse_kv("# header\n\nepochs = 3  # inline\nlr=0.5\n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].key.as_str(), e[0].value.as_str(), e[0].line), ("epochs", "3", 3));
        assert_eq!(e[1].parse::<f64>().unwrap(), 0.5);
    }

    #[test]
    fn rejects_malformed() {
        assert!(parse_kv("epochs 3").is_err());
        assert!(parse_kv(" = 3").is_err());
        assert!(parse_kv("a = 1\na = 2").is_err());
        let e = parse_kv("a = x").unwrap();
        assert!(e[0].parse::<usize>().is_err());
    }
}
