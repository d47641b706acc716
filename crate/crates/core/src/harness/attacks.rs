//! The attack matrix: every known attack class against every gate family.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use super::interleave::{interleave_explore, InterleaveError};
use super::runner::{run_scenario, Report, RunError};
use super::scenario::{parse_scenario, ParseError, Scenario};

/// The columns: one variant per gate family.
pub const MATRIX_VARIANTS: [&str; 3] = ["secc_rand:32", "secc_eph", "secc_cet"];

/// Rows in order, with the scenario file each one runs and the families it
/// is expected to get through.
pub const ATTACKS: [(&str, &str, &[&str]); 15] = [
    ("PKU Inconsistency", "pku-inconsistency", &[]),
    ("PT Inconsistency", "pt-inconsistency", &[]),
    ("Mutable Backing", "mutable-backing", &[]),
    ("Code Relocation", "code-relocation", &[]),
    ("Sigreturn PKRU", "sigreturn-pkru", &[]),
    ("Signal Race", "signal-race", &[]),
    ("Scan Race", "scan-race", &[]),
    (
        "Trusted Mapping Determination",
        "trusted-mapping-determination",
        &[],
    ),
    ("Seccomp Influence", "seccomp-influence", &[]),
    ("Modify Trusted Mappings", "modify-trusted-mappings", &[]),
    ("Forged Signal", "forged-signal", &[]),
    ("Fork Bomb", "fork-bomb", &["rand"]),
    ("Syscall Arg Abuse", "syscall-arg-abuse", &[]),
    ("TSX", "tsx", &["rand"]),
    ("Race Condition", "race-condition", &[]),
];

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: ParseError },
}

/// The scenario corpus: `ENDOSIM_SCENARIO_DIR` if set, else the bundled one.
pub fn scenario_dir() -> PathBuf {
    std::env::var_os("ENDOSIM_SCENARIO_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios")))
}

/// Loads a scenario by path, or by name from [`scenario_dir`].
pub fn load_scenario(name_or_path: &str) -> Result<Scenario, LoadError> {
    let direct = Path::new(name_or_path);
    let path = if direct.is_file() {
        direct.to_path_buf()
    } else {
        scenario_dir().join(format!("{name_or_path}.scn"))
    };
    let text = fs::read_to_string(&path).map_err(|source| LoadError::Io {
        path: path.clone(),
        source,
    })?;
    let mut sc = parse_scenario(&text).map_err(|source| LoadError::Parse {
        path: path.clone(),
        source,
    })?;
    if sc.name.is_empty() {
        sc.name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    Ok(sc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Cell {
    Prevented,
    Vulnerable,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cell::Prevented => "Prevented",
            Cell::Vulnerable => "Vulnerable",
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AttackRow {
    pub attack: String,
    pub cells: Vec<Cell>,
    pub expected: Vec<Cell>,
    /// Whether every event met its expectation under every variant.
    pub scenario_pass: bool,
    #[serde(skip)]
    pub reports: Vec<Report>,
}

impl AttackRow {
    pub fn matches(&self) -> bool {
        self.cells == self.expected && self.scenario_pass
    }
}

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("{scenario}: {source}")]
    Run {
        scenario: String,
        source: InterleaveError,
    },
}

/// Runs a scenario in file order, or across every interleaving when it
/// sets `explore=<depth>`.
fn run(variant: &str, sc: &Scenario, seed: u64) -> Result<Report, InterleaveError> {
    match sc.config.get("explore") {
        Some(d) => {
            let depth = d
                .parse()
                .map_err(|_| RunError::Config(format!("explore depth {d:?}")))?;
            interleave_explore(variant, sc, depth, seed)
        }
        None => Ok(run_scenario(variant, sc, seed)?),
    }
}

/// Runs one row under every variant.
pub fn run_attack(
    label: &str,
    file: &str,
    vulnerable: &[&str],
    seed: u64,
) -> Result<AttackRow, MatrixError> {
    let sc = load_scenario(file)?;
    let mut row = AttackRow {
        attack: label.to_string(),
        cells: Vec::new(),
        expected: Vec::new(),
        scenario_pass: true,
        reports: Vec::new(),
    };
    for v in MATRIX_VARIANTS {
        let report = run(v, &sc, seed).map_err(|source| MatrixError::Run {
            scenario: file.to_string(),
            source,
        })?;
        row.cells
            .push(if report.any_bypass() || report.sp_violations > 0 {
                Cell::Vulnerable
            } else {
                Cell::Prevented
            });
        let family = super::scenario::variant_family(v);
        row.expected.push(if vulnerable.contains(&family) {
            Cell::Vulnerable
        } else {
            Cell::Prevented
        });
        row.scenario_pass &= report.pass;
        row.reports.push(report);
    }
    Ok(row)
}

/// The whole matrix, rows in parallel.
pub fn attack_matrix(seed: u64) -> Result<Vec<AttackRow>, MatrixError> {
    use rayon::prelude::*;
    ATTACKS
        .par_iter()
        .map(|(label, file, vulnerable)| run_attack(label, file, vulnerable, seed))
        .collect()
}

/// Fixed-width text rendering.
pub fn render_matrix(rows: &[AttackRow]) -> String {
    let mut out = format!("{:<32}", "attack");
    for v in MATRIX_VARIANTS {
        out.push_str(&format!("{v:<14}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:<32}", r.attack));
        for c in &r.cells {
            out.push_str(&format!("{:<14}", c.to_string()));
        }
        if !r.matches() {
            out.push_str("  MISMATCH");
        }
        out.push('\n');
    }
    out
}
