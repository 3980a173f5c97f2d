//! Plain-text rendering of result documents: one `path  value` row per leaf.
//! Arrays of numbers (vectors, matrices) stay on one row.

use serde_json::Value;

fn is_numeric_array(v: &Value) -> bool {
    match v {
        Value::Array(items) => items.iter().all(|x| x.is_number() || x.is_string() || is_numeric_array(x)),
        _ => false,
    }
}

fn scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        Value::Number(n) => match n.as_f64() {
            Some(x) if n.is_f64() => format!("{x:.10}").trim_end_matches('0').trim_end_matches('.').to_string(),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

fn flatten(prefix: &str, v: &Value, rows: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) if !map.is_empty() => {
            for (k, x) in map {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&p, x, rows);
            }
        }
        Value::Array(items) if !items.is_empty() && !is_numeric_array(v) => {
            for (k, x) in items.iter().enumerate() {
                flatten(&format!("{prefix}[{k}]"), x, rows);
            }
        }
        Value::Array(_) | Value::Object(_) => rows.push((prefix.to_string(), v.to_string())),
        _ => rows.push((prefix.to_string(), scalar(v))),
    }
}

pub fn render(v: &Value) -> String {
    let mut rows = Vec::new();
    flatten("", v, &mut rows);
    let width = rows.iter().map(|r| r.0.chars().count()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, x) in rows {
        let pad = width - k.chars().count();
        out.push_str(&k);
        out.push_str(&" ".repeat(pad + 2));
        out.push_str(&x);
        out.push('\n');
    }
    out
}
