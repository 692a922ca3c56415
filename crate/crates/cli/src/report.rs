//! Consolidated report: per-check rows tagged with the statement they test.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde_json::{json, Value};

use crate::pipeline::{read_json, write_json, CONDITIONS_FILE, CONFIG_FILE, EXTRACTION_FILE, SWEEP_FILE};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

fn row(id: &str, verdict: bool, value: Value, bound: Value, detail: Value) -> Value {
    json!({"id": id, "verdict": verdict, "value": value, "bound": bound, "detail": detail})
}

fn field<'a>(v: &'a Value, key: &str, file: &str) -> anyhow::Result<&'a Value> {
    v.get(key).ok_or_else(|| anyhow!("{file} lacks `{key}`"))
}

fn condition_rows(cond: &Value) -> anyhow::Result<Vec<Value>> {
    let list = field(cond, "conditions", CONDITIONS_FILE)?
        .as_array()
        .ok_or_else(|| anyhow!("{CONDITIONS_FILE}: `conditions` is not a list"))?;
    let eps = cond.get("eps").cloned().unwrap_or(Value::Null);
    let tol = cond.get("tolerance").cloned().unwrap_or(Value::Null);
    list.iter()
        .map(|c| {
            let k = field(c, "condition", CONDITIONS_FILE)?;
            let name = field(c, "name", CONDITIONS_FILE)?.as_str().unwrap_or("");
            let bound = if k.as_u64() == Some(2) { eps.clone() } else { tol.clone() };
            Ok(row(
                &format!("cond{k}.{name}"),
                field(c, "verdict", CONDITIONS_FILE)?.as_bool().unwrap_or(false),
                c["worst"].clone(),
                bound,
                c["witness_element"].clone(),
            ))
        })
        .collect()
}

fn hat_rows(hat: &Value) -> Vec<Value> {
    let lt = |a: &Value, b: &Value| matches!((a.as_f64(), b.as_f64()), (Some(x), Some(y)) if x < y);
    let rel = &hat["relation_error"];
    vec![
        row(
            "prop.hat_relation",
            rel.as_f64().is_some_and(|x| x <= diagdim_core::witness::HAT_RELATION_TOL),
            rel.clone(),
            json!(diagdim_core::witness::HAT_RELATION_TOL),
            Value::Null,
        ),
        row(
            "prop.hat_approximation",
            lt(&hat["approximation_worst"], &hat["approximation_bound"]),
            hat["approximation_worst"].clone(),
            hat["approximation_bound"].clone(),
            json!({"t": hat["t"]}),
        ),
        row(
            "prop.hat_multiplicativity",
            lt(&hat["multiplicativity"], &hat["multiplicativity_bound"]),
            hat["multiplicativity"].clone(),
            hat["multiplicativity_bound"].clone(),
            json!({"samples": hat["samples"], "seed": hat["seed"]}),
        ),
    ]
}

fn extraction_section(ex: &Value) -> Value {
    let verify = &ex["verify"];
    let covers = verify["covers"].as_bool().unwrap_or(false);
    let separated = verify["separated"]
        .as_array()
        .is_some_and(|a| a.iter().all(|s| s.as_bool() == Some(true)));
    let s = ex["S"].as_u64();
    let s_max = ex["s_max"].as_u64();
    let lemma = &ex["cover_lemma"];
    let gap = verify["min_same_color_gap"]
        .as_array()
        .and_then(|g| g.iter().filter_map(Value::as_f64).reduce(f64::min));
    let rows = vec![
        row(
            "lemma.cover",
            covers && separated,
            json!(gap),
            ex["r"].clone(),
            json!({"covers": covers, "uncovered": verify["uncovered"], "separated": verify["separated"]}),
        ),
        row(
            "lemma.class_bound",
            matches!((s, s_max), (Some(a), Some(b)) if a <= b),
            ex["S"].clone(),
            ex["s_max"].clone(),
            Value::Null,
        ),
        row(
            "lemma.cover_values",
            lemma["violations"].as_array().is_some_and(|v| v.is_empty()),
            lemma["min_value"].clone(),
            json!(0.75),
            lemma["violations"].clone(),
        ),
        row(
            "lemma.recursion",
            ex["recursion_ok"].as_bool().unwrap_or(false),
            ex["recursion_ok"].clone(),
            Value::Null,
            Value::Null,
        ),
        row(
            "prop.matrix_units",
            ex["identities"]["pass"].as_bool().unwrap_or(false),
            ex["identities"]["worst"].clone(),
            ex["identities"]["tolerance"].clone(),
            Value::Null,
        ),
    ];
    json!({
        "S": ex["S"],
        "s_max": ex["s_max"],
        "colors": verify["colors"],
        "constants": ex["constants"],
        "rows": rows,
    })
}

fn sweep_section(sw: &Value) -> Value {
    let rows: Vec<Value> = sw["rows"]
        .as_array()
        .map(|rs| {
            rs.iter()
                .map(|r| {
                    json!({
                        "id": "cond2.approximation",
                        "r": r["r"],
                        "brick_side": r["brick_side"],
                        "error": r["error"],
                        "verdict": r["verdict"],
                        "structural": r["structural"],
                    })
                })
                .collect()
        })
        .unwrap_or_default();
    json!({"rows": rows, "non_increasing": sw["non_increasing"]})
}

/// Builds the consolidated report from the artifacts in `dir`.
pub fn build_report(dir: &Path) -> anyhow::Result<Value> {
    let cond_path = dir.join(CONDITIONS_FILE);
    let cond = read_json(&cond_path).with_context(|| format!("missing input {}", cond_path.display()))?;
    let mut doc = json!({
        "provenance": {
            "tool": "diagdim",
            "version": env!("CARGO_PKG_VERSION"),
        },
        "summary": {
            "points": cond["points"],
            "d": cond["d"],
            "fiber": cond["fiber"],
            "eps": cond["eps"],
            "summands": cond["summands"],
        },
        "conditions": condition_rows(&cond)?,
    });
    let cfg_path = dir.join(CONFIG_FILE);
    if cfg_path.exists() {
        let cfg = read_json(&cfg_path)?;
        doc["provenance"]["config_sha256"] = cfg["config_sha256"].clone();
        doc["provenance"]["seed"] = cfg["config"]["seed"].clone();
    }
    if let Some(hat) = cond.get("hat") {
        doc["hat"] = json!(hat_rows(hat));
    }
    let ex_path = dir.join(EXTRACTION_FILE);
    if ex_path.exists() {
        doc["extraction"] = extraction_section(&read_json(&ex_path)?);
    }
    let sw_path = dir.join(SWEEP_FILE);
    if sw_path.exists() {
        doc["sweep"] = sweep_section(&read_json(&sw_path)?);
    }
    Ok(doc)
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        Value::Number(n) => match n.as_f64() {
            Some(x) if n.is_f64() && x.fract() == 0.0 && x.abs() < 1e9 => format!("{x}"),
            Some(x) if n.is_f64() => format!("{x:.6e}"),
            _ => n.to_string(),
        },
        Value::Array(a) if a.iter().all(|x| x.is_number()) => {
            let m = a.iter().filter_map(Value::as_f64).fold(0.0, f64::max);
            format!("max {m:.6e}")
        }
        other => other.to_string(),
    }
}

/// Fixed-width summary of a report.
pub fn render_text(doc: &Value) -> String {
    let mut out = String::new();
    let p = &doc["provenance"];
    let _ = writeln!(out, "diagdim {} report", p["version"].as_str().unwrap_or("?"));
    if let Some(h) = p["config_sha256"].as_str() {
        let _ = writeln!(out, "config sha256 {h}");
    }
    let s = &doc["summary"];
    let _ = writeln!(
        out,
        "points {}  d {}  fiber {}  eps {}  summands {}",
        cell(&s["points"]),
        cell(&s["d"]),
        cell(&s["fiber"]),
        cell(&s["eps"]),
        cell(&s["summands"])
    );
    let mut table = |title: &str, rows: &Value| {
        let Some(rows) = rows.as_array() else { return };
        let _ = writeln!(out, "\n{title}");
        let _ = writeln!(out, "{:<30} {:<7} {:<24} {}", "check", "verdict", "value", "bound");
        for r in rows {
            let _ = writeln!(
                out,
                "{:<30} {:<7} {:<24} {}",
                r["id"].as_str().unwrap_or("?"),
                if r["verdict"].as_bool() == Some(true) { "pass" } else { "FAIL" },
                cell(&r["value"]),
                cell(&r["bound"])
            );
        }
    };
    table("conditions", &doc["conditions"]);
    table("renormalized maps", &doc["hat"]);
    if let Some(ex) = doc.get("extraction") {
        table("extraction", &ex["rows"]);
        let _ = writeln!(out, "S {}  s_max {}", cell(&ex["S"]), cell(&ex["s_max"]));
    }
    if let Some(sw) = doc.get("sweep") {
        let _ = writeln!(out, "\nerror vs r");
        let _ = writeln!(out, "{:<8} {:<11} {:<24} {}", "r", "brick side", "error", "verdict");
        for r in sw["rows"].as_array().into_iter().flatten() {
            let _ = writeln!(
                out,
                "{:<8} {:<11} {:<24} {}",
                cell(&r["r"]),
                cell(&r["brick_side"]),
                cell(&r["error"]),
                if r["verdict"].as_bool() == Some(true) { "pass" } else { "FAIL" }
            );
        }
        let _ = writeln!(out, "non-increasing: {}", sw["non_increasing"]);
    }
    out
}

/// Writes `report.json` and `report.txt` to `out_dir`.
pub fn write_report(dir: &Path, out_dir: &Path) -> anyhow::Result<PathBuf> {
    let doc = build_report(dir)?;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(REPORT_JSON);
    write_json(&path, &doc)?;
    std::fs::write(out_dir.join(REPORT_TXT), render_text(&doc))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_ids_and_bounds() {
        let cond = json!({
            "eps": 0.5,
            "tolerance": 1e-9,
            "conditions": [
                {"condition": 1, "name": "psi_contractive", "verdict": true, "worst": 0.0, "witness_element": null},
                {"condition": 2, "name": "approximation", "verdict": false, "worst": 0.7, "witness_element": "a1"},
            ],
        });
        let rows = condition_rows(&cond).unwrap();
        assert_eq!(rows[0]["id"], "cond1.psi_contractive");
        assert_eq!(rows[0]["bound"], 1e-9);
        assert_eq!(rows[1]["bound"], 0.5);
        assert_eq!(rows[1]["detail"], "a1");
        assert!(render_text(&json!({"provenance": {}, "summary": {}, "conditions": rows})).contains("FAIL"));
    }

    #[test]
    fn cells() {
        assert_eq!(cell(&json!(5.0)), "5");
        assert_eq!(cell(&json!(0.25)), "2.500000e-1");
        assert_eq!(cell(&json!(40)), "40");
        assert_eq!(cell(&Value::Null), "-");
    }
}
