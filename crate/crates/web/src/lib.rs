//! wasm-bindgen bindings behind the static page in the top-level `www/`.
//!
//! Every export takes and returns plain strings so the page needs no glue
//! beyond what `wasm-bindgen --target web` generates.

use opf_relax::cases;
use opf_relax::hierarchy::Relaxation;
use opf_relax::network::{load_case, CaseFormat, NetworkCase};
use opf_relax::pipeline::solve_case;
use opf_relax::sweep::{run_sweep, to_json, AxisRange, SweepSpec};
use wasm_bindgen::prelude::*;

type Res<T> = std::result::Result<T, String>;

fn parse_case(text: &str) -> Res<NetworkCase> {
    let case = load_case(text, CaseFormat::Toml).map_err(|e| e.to_string())?;
    case.validate().map_err(|e| e.to_string())?;
    Ok(case)
}

fn parse_relaxation(tag: &str) -> Res<Relaxation> {
    let r: Relaxation = tag.parse().map_err(|e: opf_relax::Error| e.to_string())?;
    // Higher orders are far too slow for a page.
    if r.order() > 2 {
        return Err(format!("{r}: the demo stops at order 2"));
    }
    Ok(r)
}

pub fn bundled_case_toml(name: &str) -> Res<String> {
    cases::builtin_document(name)
        .map(str::to_string)
        .ok_or_else(|| format!("unknown case `{name}`"))
}

pub fn solve_text(case_toml: &str, relaxation: &str) -> Res<String> {
    let case = parse_case(case_toml)?;
    let rel = parse_relaxation(relaxation)?;
    let report = solve_case(&case, rel, &Default::default()).map_err(|e| e.to_string())?;
    let mut doc = report.to_json();
    doc["summary"] = report.summary().into();
    Ok(doc.to_string())
}

/// Sweeps the active-power target at `bus` with every other released
/// injection left as in the case.
pub fn scan_text(case_toml: &str, relaxation: &str, bus: u32, lo: f64, hi: f64, step: f64) -> Res<String> {
    let case = parse_case(case_toml)?;
    let mut spec = SweepSpec::default_grid(parse_relaxation(relaxation)?);
    spec.axes = vec![AxisRange::new(bus, lo, hi, step).map_err(|e| e.to_string())?];
    if spec.axes[0].len() > 200 {
        return Err("at most 200 scan points".into());
    }
    spec.validate(&case).map_err(|e| e.to_string())?;
    let records = run_sweep(&case, &spec).map_err(|e| e.to_string())?;
    Ok(to_json(&case, &spec, &records))
}

pub fn kron_text(case_toml: &str, bus: u32) -> Res<String> {
    let case = parse_case(case_toml)?;
    let reduced = case.kron_reduce(bus).map_err(|e| e.to_string())?;
    Ok(reduced.to_toml())
}

#[wasm_bindgen(js_name = bundledCase)]
pub fn bundled_case(name: &str) -> Result<String, JsError> {
    bundled_case_toml(name).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn solve(case_toml: &str, relaxation: &str) -> Result<String, JsError> {
    solve_text(case_toml, relaxation).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn scan(case_toml: &str, relaxation: &str, bus: u32, lo: f64, hi: f64, step: f64) -> Result<String, JsError> {
    scan_text(case_toml, relaxation, bus, lo, hi, step).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn kron(case_toml: &str, bus: u32) -> Result<String, JsError> {
    kron_text(case_toml, bus).map_err(|e| JsError::new(&e))
}
