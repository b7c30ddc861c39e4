use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use lsv_fd::experiment::{cmd_density, cmd_price, ExperimentConfig};

const SMALL: &str = r#"{
    "model": {"r": 0.05, "kappa": 1.5, "v_inf": 0.1, "xi": 0.3, "rho": 0.5, "s0": 100.0, "v0": 0.5},
    "scheme": {"scheme": "HV", "theta": 0.8, "n_steps": 10, "maturity": 0.5},
    "grid": {"ns": 16, "nv": 12, "s_max_mult": 8.0, "v_max_mult": 5.0},
    "option": {"kind": "call", "strike": 100.0, "strikes": [90.0, 100.0, 110.0]},
    "thetas": [0.3, 0.5, 1.0]
}"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p
}

fn engine(args: &[&str], config: &Path, out: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_engine"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn every_command_succeeds_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    for cmd in ["price", "density", "theta_sweep", "consistency_check"] {
        for format in ["csv", "json"] {
            let out = dir.path().join(format!("{cmd}.{format}"));
            assert_eq!(
                engine(&[cmd, "--format", format], &cfg, &out),
                0,
                "{cmd} {format}"
            );
            assert!(!fs::read_to_string(&out).unwrap().is_empty());
        }
    }
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("price.json")).unwrap()).unwrap();
    assert!(json["price"].as_f64().unwrap() > 0.0);
}

#[test]
fn density_csv_writes_price_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("field.csv");
    assert_eq!(engine(&["density"], &cfg, &out), 0);
    let field = fs::read_to_string(&out).unwrap();
    assert_eq!(field.lines().next(), Some("s,v,density"));
    assert_eq!(field.lines().count(), 1 + 16 * 12);
    let prices = fs::read_to_string(dir.path().join("field_prices.csv")).unwrap();
    let lines: Vec<&str> = prices.lines().collect();
    assert_eq!(lines[0], "strike,price");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("90,"));
}

#[test]
fn sweep_csv_layout_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    assert_eq!(engine(&["theta_sweep"], &cfg, &a), 0);
    assert_eq!(engine(&["theta_sweep"], &cfg, &b), 0);
    let text = fs::read(&a).unwrap();
    assert_eq!(text, fs::read(&b).unwrap());
    let text = String::from_utf8(text).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "theta,eps_bk,eps_fw,gap");
    assert_eq!(lines.len(), 4);
    for line in &lines[1..] {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 4);
        for c in &cols[1..] {
            assert_eq!(c.split('.').nth(1).unwrap().len(), 6, "{line}");
        }
    }
    assert!(lines[1].starts_with("0.3,"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.csv");

    let unknown_key = write_config(dir.path(), &SMALL.replace("\"thetas\"", "\"thetaz\""));
    assert_eq!(engine(&["price"], &unknown_key, &out), 2);

    let bad_theta = write_config(
        dir.path(),
        &SMALL.replace("\"theta\": 0.8", "\"theta\": 1.5"),
    );
    assert_eq!(engine(&["price"], &bad_theta, &out), 2);

    assert_eq!(
        engine(&["price"], &dir.path().join("missing.json"), &out),
        2
    );

    let cfg = write_config(dir.path(), SMALL);
    let status = Command::new(env!("CARGO_BIN_EXE_engine"))
        .args(["reprice", "--config"])
        .arg(&cfg)
        .args(["--out", "x"])
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(2));

    // the Fourier reference cannot be resolved once moments explode
    let long = write_config(
        dir.path(),
        &SMALL.replace("\"maturity\": 0.5", "\"maturity\": 300.0"),
    );
    assert_eq!(engine(&["theta_sweep"], &long, &out), 3);
}

#[test]
fn one_density_prices_every_strike() {
    let mut cfg = ExperimentConfig::from_json(SMALL).unwrap();
    cfg.grid.ns = 60;
    cfg.grid.nv = 30;
    cfg.scheme.n_steps = 50;
    let density = cmd_density(&cfg).unwrap();
    assert_eq!(density.prices.len(), 3);
    for p in &density.prices {
        let mut single = cfg.clone();
        single.option.strike = p.strike;
        let bk = cmd_price(&single).unwrap().price;
        assert!(
            (p.price - bk).abs() <= 2e-4 * bk,
            "K {}: {} vs {bk}",
            p.strike,
            p.price
        );
    }
}

#[test]
fn table_setting_price_is_close_to_reference() {
    let text = r#"{
        "model": {"r": 0.05, "kappa": 1.5, "v_inf": 0.1, "xi": 0.3, "rho": 0.8, "s0": 100.0, "v0": 0.5},
        "scheme": {"scheme": "HV", "theta": 0.8, "n_steps": 100, "maturity": 1.0},
        "option": {"kind": "call", "strike": 100.0}
    }"#;
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), text);
    let out = dir.path().join("price.json");
    assert_eq!(engine(&["price", "--format", "json"], &cfg, &out), 0);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let price = json["price"].as_f64().unwrap();
    assert!((price - 24.0047).abs() <= 2e-3 * 24.0047, "{price}");
}
