//! Case file I/O and content hashing.
//!
//! Cases are stored as TOML with field names matching the [`crate::network`]
//! types. A minimal file looks like:
//!
//! ```toml
//! name = "two-bus"
//! base_kv = 1.0
//! base_kva = 1.0
//! k_op = 0.0
//! k_tot = inf
//! chain_constraint = false
//!
//! [[nodes]]
//! id = 0
//! v_min = 1.0
//! v_max = 1.0
//!
//! [[nodes]]
//! id = 1
//! v_min = 0.8
//! v_max = 1.2
//!
//! [[lines]]
//! from = 0
//! to = 1
//! a0 = 45000.0
//! e0 = 29000.0
//! f_max = 1000.0
//! f_min = 1000.0
//! expansions = [{ m = 0.0 }, { m = 1.0, k_fix = 100.0, k_var = 0.1 }]
//!
//! [[fixed_loads]]
//! node = 1
//! t = 0
//! d = 100.0
//!
//! [[demand_bids]]
//! id = "d1"
//! node = 1
//! t = 0
//! price = 40.0
//! p_min = 0.0
//! p_max = 100.0
//!
//! [[trade_prices]]
//! t = 0
//! c_p0 = 30.0
//! ```
//!
//! Optional sections follow the same pattern: `[[gen_offers]]` mirrors
//! `[[demand_bids]]`, `areas = [[1, 2], [3, 4]]` partitions the non-slack
//! nodes into fixed-price areas, and omitted numeric fields default to zero
//! (`k_tot` to infinity). [`load_case`] validates after parsing, so a loaded
//! case is always usable downstream.
//!
//! [`case_sha256`] hashes the canonical serialization; reports embed it so
//! any output file can be traced back to the exact instance that produced it.

use crate::network::{validate_case, NetworkCase};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaseFileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("serializing case: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("case failed validation:\n{report}")]
    Invalid { report: String },
}

/// Parse and validate a case file.
pub fn load_case(path: &Path) -> Result<NetworkCase, CaseFileError> {
    let text = std::fs::read_to_string(path).map_err(|source| CaseFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let case: NetworkCase = toml::from_str(&text).map_err(|source| CaseFileError::Parse {
        path: path.display().to_string(),
        source: Box::new(source),
    })?;
    let report = validate_case(&case);
    if !report.is_ok() {
        return Err(CaseFileError::Invalid { report: report.to_string() });
    }
    Ok(case)
}

/// Canonical TOML serialization; the basis for [`case_sha256`].
pub fn to_toml(case: &NetworkCase) -> Result<String, CaseFileError> {
    Ok(toml::to_string_pretty(case)?)
}

/// Write a case file (no validation; callers may persist drafts).
pub fn save_case(case: &NetworkCase, path: &Path) -> Result<(), CaseFileError> {
    let text = to_toml(case)?;
    std::fs::write(path, text).map_err(|source| CaseFileError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Hex SHA-256 of the canonical serialization. Stable across loads and
/// saves of the same instance; changes whenever any field changes.
pub fn case_sha256(case: &NetworkCase) -> String {
    let text = to_toml(case).expect("case serializes");
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases::{ieee33, surrogate_5bus, Ieee33Options, Surrogate5Config};
    use crate::network::Line;

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("gridplan-case-test-{}-{name}", std::process::id()));
        p
    }

    #[test]
    fn round_trips_bundled_cases() {
        for case in [
            surrogate_5bus(Surrogate5Config::default()),
            surrogate_5bus(Surrogate5Config::tariff_study(&[0.5, 1.0])),
            ieee33(7, Ieee33Options { expandable: true, ..Default::default() }),
        ] {
            let path = tmp(&case.name);
            save_case(&case, &path).unwrap();
            let loaded = load_case(&path).unwrap();
            assert_eq!(to_toml(&case).unwrap(), to_toml(&loaded).unwrap());
            assert_eq!(case_sha256(&case), case_sha256(&loaded));
            std::fs::remove_file(&path).unwrap();
        }
    }

    #[test]
    fn infinite_budget_survives_round_trip() {
        let case = surrogate_5bus(Surrogate5Config::default());
        assert!(case.k_tot.is_infinite());
        let text = to_toml(&case).unwrap();
        let back: NetworkCase = toml::from_str(&text).unwrap();
        assert!(back.k_tot.is_infinite());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ieee33(42, Ieee33Options::default());
        let mut b = a.clone();
        assert_eq!(case_sha256(&a), case_sha256(&b));
        b.demand_bids[0].price += 0.01;
        assert_ne!(case_sha256(&a), case_sha256(&b));
    }

    #[test]
    fn load_rejects_invalid_topology() {
        let mut case = surrogate_5bus(Surrogate5Config::default());
        case.lines.push(Line {
            from: 4,
            to: 0,
            a0: 1.0,
            e0: 1.0,
            f_max: 1.0,
            f_min: 1.0,
            expansions: vec![crate::network::ExpansionOption { m: 0.0, k_fix: 0.0, k_var: 0.0 }],
        });
        let path = tmp("cyclic");
        save_case(&case, &path).unwrap();
        let err = load_case(&path).unwrap_err();
        assert!(matches!(err, CaseFileError::Invalid { .. }), "{err}");
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_case(Path::new("/nonexistent/gridplan.toml")).unwrap_err();
        assert!(matches!(err, CaseFileError::Io { .. }));
    }

    #[test]
    fn garbage_is_parse_error() {
        let path = tmp("garbage");
        std::fs::write(&path, "nodes = 3 this is not toml").unwrap();
        let err = load_case(&path).unwrap_err();
        assert!(matches!(err, CaseFileError::Parse { .. }));
        std::fs::remove_file(&path).unwrap();
    }
}
