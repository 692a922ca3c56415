//! Stages of an experiment and the artifacts they write.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use diagdim_core::cover::{brick_cover, verify_cover, ColoredCover};
use diagdim_core::extract::{extract_from_witness, matrix_unit_identities};
use diagdim_core::space::{generate_space, FiniteMetricSpace, GridSpec};
use diagdim_core::witness::{
    build_upper_witness_with_tests, check_witness, hat_normalize_seeded, propagation_tests, DiagDimWitness,
};
use serde_json::{json, Value};

use crate::config::{CoverSpec, ExperimentConfig, SpaceSpec, Stage};
use crate::report;

pub const SPACE_FILE: &str = "space.json";
pub const COVER_FILE: &str = "cover.json";
pub const WITNESS_FILE: &str = "witness.json";
pub const CONDITIONS_FILE: &str = "conditions.json";
pub const EXTRACTION_FILE: &str = "extraction.json";
pub const SWEEP_FILE: &str = "sweep.json";
pub const CONFIG_FILE: &str = "config.json";

/// A hard error inside one stage, with the file it concerns.
#[derive(Debug)]
pub struct StageError {
    pub stage: String,
    pub file: PathBuf,
    pub source: anyhow::Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage `{}` failed ({}): {:#}", self.stage, self.file.display(), self.source)
    }
}

impl std::error::Error for StageError {}

pub fn stage_err(stage: &str, file: &Path, source: impl Into<anyhow::Error>) -> StageError {
    StageError {
        stage: stage.into(),
        file: file.to_path_buf(),
        source: source.into(),
    }
}

pub fn write_json(path: &Path, v: &Value) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_json(path: &Path) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))
}

pub fn load_space(path: &Path) -> anyhow::Result<Arc<FiniteMetricSpace>> {
    Ok(Arc::new(FiniteMetricSpace::from_json(read_json(path)?)?))
}

pub fn load_cover(path: &Path, space: &FiniteMetricSpace) -> anyhow::Result<ColoredCover> {
    Ok(ColoredCover::from_json(&read_json(path)?, space)?)
}

pub fn load_witness(path: &Path, space: Arc<FiniteMetricSpace>) -> anyhow::Result<DiagDimWitness> {
    Ok(DiagDimWitness::from_json(&read_json(path)?, space)?)
}

pub fn space_from_spec(spec: &GridSpec) -> anyhow::Result<Arc<FiniteMetricSpace>> {
    Ok(Arc::new(generate_space(spec)?))
}

pub fn cover_artifact(cover: &ColoredCover, space: &FiniteMetricSpace, r: f64) -> Value {
    let mut v = cover.to_json(space);
    v["r"] = json!(r);
    v["verify"] = serde_json::to_value(verify_cover(cover, space, r)).expect("report serializes");
    v
}

pub fn build_witness(
    space: Arc<FiniteMetricSpace>,
    cover: &ColoredCover,
    r: f64,
    fiber: usize,
    eps: f64,
    test_propagation: f64,
) -> anyhow::Result<DiagDimWitness> {
    let tests = propagation_tests(&space, test_propagation, fiber)?;
    Ok(build_upper_witness_with_tests(space, cover, r, fiber, tests)?.with_eps(eps)?)
}

pub fn witness_artifact(w: &DiagDimWitness, r: f64, test_propagation: f64) -> anyhow::Result<Value> {
    let mut v = w.to_json()?;
    v["r"] = json!(r);
    v["test_propagation"] = json!(test_propagation);
    Ok(v)
}

pub fn conditions_artifact(w: &DiagDimWitness, tol: f64) -> anyhow::Result<Value> {
    let rep = check_witness(w, tol)?;
    Ok(json!({
        "points": w.space.len(),
        "d": w.d,
        "fiber": w.fiber(),
        "eps": w.eps,
        "summands": w.algebra.summand_sizes.len(),
        "tolerance": tol,
        "conditions": rep,
    }))
}

pub fn hat_artifact(w: &DiagDimWitness, samples: usize, seed: u64) -> anyhow::Result<Value> {
    let mut v = hat_normalize_seeded(w, samples, seed)?.to_json();
    v["samples"] = json!(samples);
    v["seed"] = json!(seed);
    Ok(v)
}

pub fn extraction_artifact(w: &DiagDimWitness, r: f64, identity_tol: f64) -> anyhow::Result<Value> {
    let (td, pts, ex) = extract_from_witness(w, r)?;
    let ids = matrix_unit_identities(&pts, identity_tol)?;
    let mut v = ex.to_json(&w.space);
    v["r"] = json!(r);
    v["d"] = json!(td.d);
    v["constants"] = json!({
        "delta": td.constants.delta,
        "eta": td.constants.eta,
        "eps": td.constants.eps,
    });
    v["corners"] = json!(td.corners.len());
    v["borderline"] = json!(pts.borderline);
    v["identities"] = json!({
        "worst": ids.worst,
        "tolerance": identity_tol,
        "pass": ids.pass,
    });
    v["passes"] = json!(ex.passes());
    Ok(v)
}

/// Error-vs-r table: one witness per scale on bricks of side
/// `max(base_side, 3r)` with a fixed test set.
pub fn sweep_artifact(
    space: &Arc<FiniteMetricSpace>,
    radii: &[f64],
    base_side: f64,
    fiber: usize,
    eps: f64,
    test_propagation: f64,
    tol: f64,
) -> anyhow::Result<Value> {
    let tests = propagation_tests(space, test_propagation, fiber)?;
    let mut rows = Vec::new();
    for &r in radii {
        let side = base_side.max(3.0 * r);
        let cover = brick_cover(space, r, side).with_context(|| format!("cover at r = {r}"))?;
        let w = build_upper_witness_with_tests(space.clone(), &cover, r, fiber, tests.clone())
            .with_context(|| format!("witness at r = {r}"))?
            .with_eps(eps)?;
        let rep = check_witness(&w, tol)?;
        let approx = &rep[1];
        rows.push(json!({
            "r": r,
            "brick_side": side,
            "error": approx.worst,
            "element": approx.witness_element,
            "verdict": approx.verdict,
            "structural": rep.iter().filter(|c| c.condition != 2).all(|c| c.verdict),
        }));
    }
    let errors: Vec<f64> = rows.iter().map(|r| r["error"].as_f64().unwrap_or(f64::NAN)).collect();
    Ok(json!({
        "eps": eps,
        "fiber": fiber,
        "test_propagation": test_propagation,
        "rows": rows,
        "non_increasing": errors.windows(2).all(|p| p[1] <= p[0]),
    }))
}

/// Runs the configured stages in order, writing artifacts to the output
/// directory.
pub fn run(cfg: &ExperimentConfig) -> Result<(), StageError> {
    let out = &cfg.output;
    let at = |name: &str| out.join(name);
    std::fs::create_dir_all(out).map_err(|e| stage_err("space", out, e))?;
    let mut cfg_json = serde_json::to_value(cfg).expect("config serializes");
    if let Value::Object(map) = &mut cfg_json {
        map.remove("output");
    }
    let cfg_file = at(CONFIG_FILE);
    write_json(&cfg_file, &json!({"config": cfg_json, "config_sha256": cfg.hash()}))
        .map_err(|e| stage_err("space", &cfg_file, e))?;

    let space_path = at(SPACE_FILE);
    let space = match &cfg.space {
        SpaceSpec::Grid(spec) => space_from_spec(spec).map_err(|e| stage_err("space", &space_path, e))?,
        SpaceSpec::File { file } => load_space(file).map_err(|e| stage_err("space", file, e))?,
    };
    write_json(&space_path, &space.to_json()).map_err(|e| stage_err("space", &space_path, e))?;
    eprintln!("space: {} points -> {}", space.len(), space_path.display());
    if !cfg.has(Stage::Cover) {
        return Ok(());
    }

    let cover_path = at(COVER_FILE);
    let cover = match &cfg.cover {
        CoverSpec::File { file } => load_cover(file, &space).map_err(|e| stage_err("cover", file, e))?,
        spec => {
            let side = spec.brick_side(cfg.r).expect("brick cover");
            brick_cover(&space, cfg.r, side).map_err(|e| stage_err("cover", &cover_path, e))?
        }
    };
    write_json(&cover_path, &cover_artifact(&cover, &space, cfg.r)).map_err(|e| stage_err("cover", &cover_path, e))?;
    eprintln!("cover: {} colors -> {}", cover.colors(), cover_path.display());
    if !cfg.has(Stage::Witness) {
        return Ok(());
    }

    let witness_path = at(WITNESS_FILE);
    let w = build_witness(space.clone(), &cover, cfg.r, cfg.fiber, cfg.eps, cfg.test_propagation)
        .map_err(|e| stage_err("witness", &witness_path, e))?;
    let wv = witness_artifact(&w, cfg.r, cfg.test_propagation).map_err(|e| stage_err("witness", &witness_path, e))?;
    write_json(&witness_path, &wv).map_err(|e| stage_err("witness", &witness_path, e))?;
    eprintln!("witness: {} summands -> {}", w.algebra.summand_sizes.len(), witness_path.display());
    if !cfg.has(Stage::Check) {
        return Ok(());
    }

    let cond_path = at(CONDITIONS_FILE);
    let mut cond = conditions_artifact(&w, cfg.tolerance.check).map_err(|e| stage_err("check", &cond_path, e))?;
    write_json(&cond_path, &cond).map_err(|e| stage_err("check", &cond_path, e))?;
    eprintln!("check: -> {}", cond_path.display());
    if !cfg.sweep.is_empty() {
        let sweep_path = at(SWEEP_FILE);
        let base = cfg.cover.brick_side(cfg.r).expect("validated brick cover");
        let sv = sweep_artifact(&space, &cfg.sweep, base, cfg.fiber, cfg.eps, cfg.test_propagation, cfg.tolerance.check)
            .map_err(|e| stage_err("check", &sweep_path, e))?;
        write_json(&sweep_path, &sv).map_err(|e| stage_err("check", &sweep_path, e))?;
        eprintln!("sweep: {} scales -> {}", cfg.sweep.len(), sweep_path.display());
    }
    if !cfg.has(Stage::Hat) {
        return Ok(());
    }

    cond["hat"] = hat_artifact(&w, cfg.hat_samples, cfg.seed).map_err(|e| stage_err("hat", &cond_path, e))?;
    write_json(&cond_path, &cond).map_err(|e| stage_err("hat", &cond_path, e))?;
    eprintln!("hat: -> {}", cond_path.display());
    if !cfg.has(Stage::Extract) {
        return Ok(());
    }

    let ex_path = at(EXTRACTION_FILE);
    let ex = extraction_artifact(&w, cfg.r, cfg.tolerance.identities).map_err(|e| stage_err("extract", &ex_path, e))?;
    write_json(&ex_path, &ex).map_err(|e| stage_err("extract", &ex_path, e))?;
    eprintln!("extract: -> {}", ex_path.display());
    if !cfg.has(Stage::Report) {
        return Ok(());
    }

    let paths = report::write_report(out, out).map_err(|e| stage_err("report", &out.join(report::REPORT_JSON), e))?;
    eprintln!("report: -> {}", paths.display());
    Ok(())
}
