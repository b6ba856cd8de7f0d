use std::path::Path;
use std::process::{Command, Output};

use doe_market::scenario::{random_market_scenario, save_scenario};

const FIXTURE: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/tests/fixtures/ieee13_desk.json"
);

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_doe-market"))
        .args(args)
        .output()
        .unwrap()
}

fn small_scenario(dir: &Path) -> String {
    let path = dir.join("small.json");
    save_scenario(&random_market_scenario(7), &path).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn gen_then_clear_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("s.json");
    let out = dir.path().join("out");
    let g = cli(&[
        "gen",
        "--scale",
        "3x1",
        "--seed",
        "1",
        "--out",
        scenario.to_str().unwrap(),
    ]);
    assert_eq!(g.status.code(), Some(0));
    assert_eq!(
        std::fs::read_to_string(&scenario).unwrap(),
        std::fs::read_to_string(FIXTURE).unwrap()
    );
    let c = cli(&[
        "clear",
        scenario.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        c.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&c.stderr)
    );
    for f in [
        "doe.csv",
        "dispatch.csv",
        "prices.csv",
        "voltages.csv",
        "report.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn tampered_dispatch_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = small_scenario(dir.path());
    let out = dir.path().join("out");
    let c = cli(&["clear", &scenario, "--out", out.to_str().unwrap()]);
    assert_eq!(
        c.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&c.stderr)
    );
    let dispatch = out.join("dispatch.csv");
    let prices = out.join("prices.csv");
    let args = |d: &Path| {
        cli(&[
            "verify",
            &scenario,
            "--dispatch",
            d.to_str().unwrap(),
            "--prices",
            prices.to_str().unwrap(),
        ])
    };
    assert_eq!(args(&dispatch).status.code(), Some(0));

    let mut rdr = csv::Reader::from_path(&dispatch).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "p").unwrap();
    let tampered = dir.path().join("tampered.csv");
    let mut w = csv::Writer::from_path(&tampered).unwrap();
    w.write_record(&headers).unwrap();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.unwrap();
        let row: Vec<String> = rec
            .iter()
            .enumerate()
            .map(|(j, v)| {
                if j == col && k == 0 {
                    (v.parse::<f64>().unwrap() + 0.5).to_string()
                } else {
                    v.to_owned()
                }
            })
            .collect();
        w.write_record(&row).unwrap();
    }
    w.flush().unwrap();
    let v = args(&tampered);
    assert_eq!(v.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&v.stdout).contains("FAIL"));
}

#[test]
fn bench_emits_delta_row() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = small_scenario(dir.path());
    let b = cli(&["bench", &scenario]);
    assert_eq!(
        b.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&b.stderr)
    );
    let text = String::from_utf8_lossy(&b.stdout);
    let mut lines = text.lines().skip_while(|l| !l.starts_with("scenario,"));
    assert_eq!(
        lines.next().unwrap(),
        "scenario,welfare_with_q,welfare_without_q,delta_percent,boundary_steps_with_q,boundary_steps_without_q"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 6);
    assert!(row[1].parse::<f64>().unwrap() >= row[2].parse::<f64>().unwrap() - 1e-9);
}

#[test]
fn missing_scenario_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let c = cli(&["clear", "no/such/file.json", "--out", out.to_str().unwrap()]);
    assert_eq!(c.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&c.stderr).contains("no/such/file.json"));
}

#[test]
fn bad_flag_is_rejected() {
    assert_eq!(cli(&["gen", "--scale", "three"]).status.code(), Some(2));
}
