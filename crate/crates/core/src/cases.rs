//! Bundled case documents.

use std::path::Path;

use crate::network::{load_case, load_case_file, CaseFormat, NetworkCase};
use crate::{Error, Result};

pub const TWO_BUS_TOML: &str = include_str!("cases/two-bus.toml");
pub const THREE_BUS_TOML: &str = include_str!("cases/three-bus.toml");

/// Names of the bundled cases, in listing order.
pub const BUILTIN_NAMES: [&str; 2] = ["two-bus", "three-bus"];

pub fn builtin_document(name: &str) -> Option<&'static str> {
    match name {
        "two-bus" => Some(TWO_BUS_TOML),
        "three-bus" => Some(THREE_BUS_TOML),
        _ => None,
    }
}

pub fn builtin(name: &str) -> Result<NetworkCase> {
    let doc = builtin_document(name).ok_or_else(|| Error::UnknownCase {
        name: name.to_string(),
        available: BUILTIN_NAMES.join(", "),
    })?;
    load_case(doc, CaseFormat::Toml)
}

pub fn two_bus() -> NetworkCase {
    builtin("two-bus").expect("bundled case is valid")
}

pub fn three_bus() -> NetworkCase {
    builtin("three-bus").expect("bundled case is valid")
}

/// Resolves a bundled case name or a path to a case file.
pub fn resolve(spec: &str) -> Result<NetworkCase> {
    if let Some(doc) = builtin_document(spec) {
        return load_case(doc, CaseFormat::Toml);
    }
    let path = Path::new(spec);
    if path.exists() {
        return load_case_file(path);
    }
    Err(Error::UnknownCase {
        name: spec.to_string(),
        available: BUILTIN_NAMES.join(", "),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_bus_parameters() {
        let case = two_bus();
        assert_eq!(case.num_buses(), 2);
        assert_eq!(case.branches.len(), 1);
        assert_eq!(case.branches[0].r, 0.06129);
        assert_eq!(case.branches[0].x, 0.05117);
        assert_eq!(case.buses[1].v_min, Some(1.3));
        assert_eq!(case.buses[1].v_max, Some(1.3));
        let g2 = case.generator_at(1).unwrap();
        assert_eq!((g2.p_min, g2.p_max), (Some(0.0), Some(0.0)));
        assert_eq!((g2.q_min, g2.q_max), (None, None));
    }

    #[test]
    fn three_bus_parameters() {
        let case = three_bus();
        assert_eq!(case.num_buses(), 3);
        let z: Vec<(u32, u32, f64, f64)> = case
            .branches
            .iter()
            .map(|b| (b.from, b.to, b.r, b.x))
            .collect();
        assert_eq!(z, vec![(1, 2, 0.15, 0.1), (1, 3, 0.1, 0.05), (2, 3, 0.001, 0.05)]);
        assert!(case.buses[2].v_min.is_none() && case.buses[2].v_max.is_none());
    }

    #[test]
    fn unknown_case_lists_available() {
        let err = resolve("nine-bus").unwrap_err();
        assert!(err.to_string().contains("two-bus, three-bus"));
    }
}
