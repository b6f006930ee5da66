//! Stable text output: six-significant-digit numbers, JSON-lines records
//! and plain tables.
//!
//! Rounding is round-half-to-even on the exact binary value, as done by
//! the standard library's `{:e}` formatting.

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub const SIG_DIGITS: usize = 6;

/// `%g`-style rendering with six significant digits: fixed notation for
/// decimal exponents in [-5, 6), scientific otherwise, trailing zeros
/// dropped.
pub fn fmt_g6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.*e}", SIG_DIGITS - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..SIG_DIGITS as i32).contains(&exp) {
        let decimals = (SIG_DIGITS as i32 - 1 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        let m = trim_zeros(mantissa.to_string());
        let sign = if exp < 0 { "-" } else { "+" };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// The value `fmt_g6` prints, read back.
pub fn round_g6(x: f64) -> f64 {
    if x.is_finite() {
        fmt_g6(x).parse().expect("fmt_g6 output parses")
    } else {
        x
    }
}

/// Rounds every float in a JSON tree; integers are left alone.
pub fn round_json(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = round_g6(n.as_f64().expect("f64 number"));
            serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round_json).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}

/// One compact JSON object, floats rounded.
pub fn record<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)
        .map_err(|e| Error::format("record", e.to_string()))?;
    Ok(round_json(v).to_string())
}

/// Left-aligned first column, right-aligned others, dashed rule under the
/// header.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate().take(cols) {
            width[i] = width[i].max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{:<w$}", c, w = width[i])
                } else {
                    format!("{:>w$}", c, w = width[i])
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&rule.join("  "));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_g6(0.65 / 1.15), "0.565217");
        assert_eq!(fmt_g6(2.1), "2.1");
        assert_eq!(fmt_g6(1.0), "1");
        assert_eq!(fmt_g6(-0.0), "0");
        assert_eq!(fmt_g6(123456.7), "123457");
        assert_eq!(fmt_g6(1234567.0), "1.23457e+06");
        assert_eq!(fmt_g6(1e-9), "1e-09");
        assert_eq!(fmt_g6(0.0001), "0.0001");
        assert_eq!(fmt_g6(1.0 / 3.0), "0.333333");
        assert_eq!(fmt_g6(f64::NAN), "nan");
    }

    #[test]
    fn json_rounding_keeps_integers() {
        let v = serde_json::json!({"a": 0.1234567, "n": 7, "xs": [1.0 / 3.0]});
        assert_eq!(round_json(v).to_string(), r#"{"a":0.123457,"n":7,"xs":[0.333333]}"#);
    }

    #[test]
    fn table_layout() {
        let t = table(&["name", "x"], &[vec!["full".into(), "0.5".into()]]);
        assert_eq!(t, "name    x\n----  ---\nfull  0.5\n");
    }
}
