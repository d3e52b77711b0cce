//! Plain-text program format.
//!
//! ```text
//! conic-program 1
//! vars 3
//! var 0 a
//! objective <constant> <var>:<coef> ...
//! eq <label> <constant> <var>:<coef> ...
//! cone <nonneg|soc|rsoc|psd:<dim>> <label> <rows>
//! row <constant> <var>:<coef> ...
//! ```
//!
//! Labels and names must not contain whitespace; writers replace it with `_`.
//! Numbers use Rust's shortest round-trip formatting, so write → read is exact.

use std::fmt::Write as _;

use super::{AffineExpr, ConeKind, ConicProgram};
use crate::{Error, Result};

fn token(s: &str) -> String {
    if s.is_empty() {
        "_".into()
    } else {
        s.split_whitespace().collect::<Vec<_>>().join("_")
    }
}

fn write_expr(out: &mut String, e: &AffineExpr) {
    let _ = write!(out, "{:?}", e.constant);
    for &(v, c) in &e.terms {
        let _ = write!(out, " {v}:{c:?}");
    }
}

pub fn write_program(p: &ConicProgram) -> String {
    let mut out = String::from("conic-program 1\n");
    let _ = writeln!(out, "vars {}", p.num_vars());
    for (i, name) in p.var_names.iter().enumerate() {
        let _ = writeln!(out, "var {i} {}", token(name));
    }
    out.push_str("objective ");
    write_expr(&mut out, &p.objective);
    out.push('\n');
    for (e, label) in &p.equalities {
        let _ = write!(out, "eq {} ", token(label));
        write_expr(&mut out, e);
        out.push('\n');
    }
    for cone in &p.cones {
        let kind = match cone.kind {
            ConeKind::NonNeg => "nonneg".to_string(),
            ConeKind::SecondOrder => "soc".to_string(),
            ConeKind::RotatedSecondOrder => "rsoc".to_string(),
            ConeKind::Psd { dim } => format!("psd:{dim}"),
        };
        let _ = writeln!(out, "cone {kind} {} {}", token(&cone.label), cone.rows.len());
        for row in &cone.rows {
            out.push_str("row ");
            write_expr(&mut out, row);
            out.push('\n');
        }
    }
    out
}

fn parse_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("program line {line}: {msg}"))
}

fn parse_expr<'a>(line: usize, mut it: impl Iterator<Item = &'a str>) -> Result<AffineExpr> {
    let constant: f64 = it
        .next()
        .ok_or_else(|| parse_err(line, "missing constant"))?
        .parse()
        .map_err(|e| parse_err(line, e))?;
    let mut terms = Vec::new();
    for t in it {
        let (v, c) = t
            .split_once(':')
            .ok_or_else(|| parse_err(line, format!("bad term `{t}`")))?;
        let v: usize = v.parse().map_err(|e| parse_err(line, e))?;
        let c: f64 = c.parse().map_err(|e| parse_err(line, e))?;
        terms.push((v, c));
    }
    Ok(AffineExpr { terms, constant })
}

pub fn read_program(text: &str) -> Result<ConicProgram> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some((_, "conic-program 1")) => {}
        Some((n, other)) => return Err(parse_err(n, format!("unexpected header `{other}`"))),
        None => return Err(Error::Parse("empty program".into())),
    }
    let mut p = ConicProgram::default();
    let mut declared = None;
    let mut pending: Option<(usize, usize)> = None; // (cone index, rows left)
    for (n, line) in lines {
        let mut it = line.split_whitespace();
        let head = it.next().unwrap_or_default();
        if let Some((idx, left)) = pending {
            if head != "row" {
                return Err(parse_err(n, format!("expected {left} more row(s)")));
            }
            p.cones[idx].rows.push(parse_expr(n, it)?);
            pending = (left > 1).then_some((idx, left - 1));
            continue;
        }
        match head {
            "vars" => {
                let count: usize = it
                    .next()
                    .ok_or_else(|| parse_err(n, "missing count"))?
                    .parse()
                    .map_err(|e| parse_err(n, e))?;
                declared = Some(count);
                p.var_names = (0..count).map(|i| format!("x{i}")).collect();
            }
            "var" => {
                let i: usize = it
                    .next()
                    .ok_or_else(|| parse_err(n, "missing index"))?
                    .parse()
                    .map_err(|e| parse_err(n, e))?;
                let name = it.next().ok_or_else(|| parse_err(n, "missing name"))?;
                let slot = p
                    .var_names
                    .get_mut(i)
                    .ok_or_else(|| parse_err(n, format!("variable {i} out of range")))?;
                *slot = name.to_string();
            }
            "objective" => p.objective = parse_expr(n, it)?,
            "eq" => {
                let label = it.next().ok_or_else(|| parse_err(n, "missing label"))?;
                p.equalities.push((parse_expr(n, it)?, label.to_string()));
            }
            "cone" => {
                let kind = match it.next() {
                    Some("nonneg") => ConeKind::NonNeg,
                    Some("soc") => ConeKind::SecondOrder,
                    Some("rsoc") => ConeKind::RotatedSecondOrder,
                    Some(k) if k.starts_with("psd:") => ConeKind::Psd {
                        dim: k[4..].parse().map_err(|e| parse_err(n, e))?,
                    },
                    other => return Err(parse_err(n, format!("unknown cone {other:?}"))),
                };
                let label = it.next().ok_or_else(|| parse_err(n, "missing label"))?;
                let rows: usize = it
                    .next()
                    .ok_or_else(|| parse_err(n, "missing row count"))?
                    .parse()
                    .map_err(|e| parse_err(n, e))?;
                p.add_cone(kind, Vec::with_capacity(rows), label);
                if rows > 0 {
                    pending = Some((p.cones.len() - 1, rows));
                }
            }
            other => return Err(parse_err(n, format!("unknown directive `{other}`"))),
        }
    }
    if let Some((_, left)) = pending {
        return Err(Error::Parse(format!("program ended with {left} row(s) missing")));
    }
    if declared.is_none() {
        return Err(Error::Parse("missing `vars` line".into()));
    }
    p.validate()?;
    Ok(p)
}
