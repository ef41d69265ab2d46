//! Text formatting shared by the NDJSON and CSV writers.

use std::fmt::Write as _;

/// A finite number with 17 significant digits; JSON `null` otherwise.
pub fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "null".to_string()
    }
}

pub fn json_array(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 24 + 2);
    s.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&fmt_num(*v));
    }
    s.push(']');
    s
}

/// Comma-joined numbers for a CSV row.
pub fn csv_row(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{}", fmt_num(*v));
    }
    s
}

/// `prefix1,...,prefixd`.
pub fn coord_header(prefix: &str, d: usize) -> String {
    (1..=d).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(",")
}
