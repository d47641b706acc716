use std::process::Command;

fn endosim(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_endosim"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
    )
}

#[test]
fn run_prints_a_passing_report() {
    let (code, out) = endosim(&["run", "--variant", "secc_eph", "--scenario", "wx"]);
    assert_eq!(code, 0, "{out}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["pass"], true);
    assert_eq!(v["sp_violations"], 0);
}

#[test]
fn unknown_variant_exits_one() {
    let (code, _) = endosim(&["run", "--variant", "secc_nope", "--scenario", "wx"]);
    assert_eq!(code, 1);
}

#[test]
fn shallow_storm_is_clean() {
    let (code, out) = endosim(&["storm", "--depth", "2", "--variant", "secc_cet"]);
    assert_eq!(code, 0, "{out}");
}

#[test]
fn attacks_matrix_matches() {
    let (code, out) = endosim(&["attacks"]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(out.lines().count(), 16);
    assert!(!out.contains("MISMATCH"));
}
