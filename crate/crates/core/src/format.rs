//! Numeric output formatting: every emitted number carries 9 significant
//! digits.

use std::collections::BTreeMap;

/// Rounds to 9 significant digits.
pub fn sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Shortest decimal text of `sig9(x)`; exponent form outside [1e-5, 1e15).
pub fn fmt9(x: f64) -> String {
    let r = sig9(x);
    if r.is_nan() {
        return "NaN".into();
    }
    if r.is_infinite() {
        return if r > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let a = r.abs();
    if a != 0.0 && !(1e-5..1e15).contains(&a) {
        format!("{r:e}")
    } else {
        format!("{r}")
    }
}

/// Recursively rounds every float inside a JSON value.
pub fn round_json(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Number(n) if n.is_f64() => {
            let f = n.as_f64().unwrap_or(f64::NAN);
            serde_json::Number::from_f64(sig9(f)).map_or(Value::Null, Value::Number)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(round_json).collect()),
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}

/// Serializes with floats rounded to 9 significant digits, one line.
pub fn to_json_line<T: serde::Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable value");
    serde_json::to_string(&round_json(v)).expect("json value serializes")
}

/// Pretty JSON with rounded floats.
pub fn to_json_pretty<T: serde::Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable value");
    serde_json::to_string_pretty(&round_json(v)).expect("json value serializes")
}

/// Flattens a TOML table into sorted `section.key = value` lines.
pub fn flat_toml(table: &toml::Table) -> String {
    fn walk(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, String>) {
        for (k, v) in table {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                toml::Value::Table(t) => walk(&key, t, out),
                other => {
                    out.insert(key, other.to_string());
                }
            }
        }
    }
    let mut lines = BTreeMap::new();
    walk("", table, &mut lines);
    lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
