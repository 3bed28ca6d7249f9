use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cpmas::fit::load_buildup;
use cpmas::units::khz_to_rad_s;

fn cpmas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpmas"))
        .args(args)
        .output()
        .expect("cpmas binary runs")
}

fn data_file(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("data")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn report_value(report: &str, key: &str) -> Option<String> {
    report.lines().find_map(|l| {
        l.split_once(" = ")
            .filter(|(k, _)| *k == key)
            .map(|(_, v)| v.to_string())
    })
}

fn columns(csv: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut lines = csv.lines();
    let header: Vec<String> = lines
        .next()
        .unwrap()
        .split(',')
        .map(str::to_string)
        .collect();
    let mut cols = vec![Vec::new(); header.len()];
    for line in lines {
        for (c, v) in cols.iter_mut().zip(line.split(',')) {
            c.push(v.parse().unwrap());
        }
    }
    (header, cols)
}

fn crystallite() -> String {
    data_file("crystallite.conf")
}

#[test]
fn simulate_has_rotor_echo_at_one_period() {
    let out = cpmas(&[
        "simulate",
        "--config",
        &crystallite(),
        "--beta-deg",
        "63",
        "--gamma-deg",
        "20",
    ]);
    assert!(out.status.success());
    let (header, cols) = columns(&text(&out.stdout));
    assert_eq!(header, ["t_us", "eta"]);
    assert_eq!(cols[0][500], 500.0);
    assert!(cols[1][500].abs() <= 1e-9);
    assert!(cols[1].iter().any(|&v| v > 0.1));
}

#[test]
fn zero_length_grid_is_a_config_error_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eta.csv");
    let out = cpmas(&[
        "simulate",
        "--tmax-us",
        "0",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("tmax"));
    assert!(!path.exists());
}

#[test]
fn negative_durations_are_rejected() {
    assert_eq!(cpmas(&["simulate", "--dt-us=-1"]).status.code(), Some(1));
    assert_eq!(cpmas(&["powder", "--t1rho-ms=-2"]).status.code(), Some(1));
}

#[test]
fn aligned_crystallite_gives_zero_column() {
    let out = cpmas(&["simulate", "--beta-deg", "0", "--tmax-us", "200"]);
    let (_, cols) = columns(&text(&out.stdout));
    assert!(cols[1].iter().all(|&v| v == 0.0));
}

#[test]
fn compare_passes_at_default_threshold_and_fails_a_tight_one() {
    let out = cpmas(&["compare", "--config", &crystallite()]);
    assert_eq!(out.status.code(), Some(0));
    let report = text(&out.stderr);
    let max_dev: f64 = report_value(&report, "max_deviation")
        .unwrap()
        .parse()
        .unwrap();
    assert!(max_dev <= 0.02);
    let (header, _) = columns(&text(&out.stdout));
    assert_eq!(header, ["t_us", "eta_analytic", "sy_oracle"]);

    let tight = cpmas(&["compare", "--config", &crystallite(), "--threshold", "1e-6"]);
    assert_eq!(tight.status.code(), Some(2));
    assert!(text(&tight.stderr).contains("exceeds threshold"));
}

#[test]
fn compare_without_coupling_agrees_to_rounding() {
    let out = cpmas(&["compare", "--config", &crystallite(), "--d-khz", "0"]);
    assert_eq!(out.status.code(), Some(0));
    let max_dev: f64 = report_value(&text(&out.stderr), "max_deviation")
        .unwrap()
        .parse()
        .unwrap();
    assert!(max_dev < 1e-9, "{max_dev}");
}

#[test]
fn too_few_substeps_is_a_config_error() {
    let out = cpmas(&["oracle", "--config", &crystallite(), "--substeps", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("substeps"));
}

#[test]
fn oracle_emits_all_observables() {
    let out = cpmas(&["oracle", "--config", &crystallite(), "--tmax-us", "100"]);
    assert!(out.status.success());
    let (header, cols) = columns(&text(&out.stdout));
    assert_eq!(header, ["t_us", "sy", "iy", "dq_y"]);
    assert_eq!(cols[0].len(), 101);
    assert!((cols[2][0] - 1.0).abs() < 1e-12);
}

#[test]
fn shipped_dataset_fit_recovers_parameters() {
    let out = cpmas(&[
        "fit",
        "--config",
        &data_file("ch_buildup.conf"),
        "--data",
        &data_file("ch_buildup_synthetic.csv"),
        "--r-inv-us",
        "436.2",
        "--r1-inv-us",
        "206.85",
        "--t1rho-ms",
        "2.8005",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let report = text(&out.stderr);
    for (key, truth) in [
        ("fit_r_inv_us", 290.8),
        ("fit_r1_inv_us", 137.9),
        ("fit_t1rho_ms", 1.867),
    ] {
        let v: f64 = report_value(&report, key).unwrap().parse().unwrap();
        assert!((v - truth).abs() / truth < 0.02, "{key} = {v}");
    }
    let (header, cols) = columns(&text(&out.stdout));
    assert_eq!(header, ["time_us", "data", "model", "residual"]);
    for ((y, m), r) in cols[1].iter().zip(&cols[2]).zip(&cols[3]) {
        assert!((y - m - r).abs() < 1e-12);
    }
}

#[test]
fn missing_data_file_is_a_data_error() {
    let out = cpmas(&["fit", "--data", "/nonexistent/buildup.csv"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(text(&out.stderr).contains("/nonexistent/buildup.csv"));
}

#[test]
fn two_points_for_three_parameters_is_underdetermined() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("two.csv");
    std::fs::write(&path, "time_us,magnetization\n0,0\n100,0.4\n").unwrap();
    let out = cpmas(&[
        "fit",
        "--data",
        path.to_str().unwrap(),
        "--free",
        "r,r1,t1rho",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(text(&out.stderr).contains("under-determined"));
}

#[test]
fn malformed_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "time_us,magnetization\n0,0\n10,abc\n").unwrap();
    let out = cpmas(&["fit", "--data", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(text(&out.stderr).contains("line 3"));
}

#[test]
fn unidentifiable_amplitude_is_a_fit_error() {
    // zero coupling and no relaxation give M(t) = 0 for any M0
    let out = cpmas(&[
        "fit",
        "--data",
        &data_file("ch_buildup_synthetic.csv"),
        "--d-khz",
        "0",
        "--free",
        "m0",
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(text(&out.stderr).contains("m0"));
}

#[test]
fn powder_output_reparses_without_loss() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("powder.csv");
    let out = cpmas(&[
        "powder",
        "--config",
        &data_file("ch_buildup.conf"),
        "--tmax-us",
        "1000",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let data = load_buildup(&path).unwrap();
    let (_, cols) = columns(&std::fs::read_to_string(&path).unwrap());
    assert_eq!(data.times_us(), cols[0].as_slice());
    assert_eq!(data.magnetizations(), cols[1].as_slice());
    // report on stdout when the CSV goes to a file
    assert_eq!(
        report_value(&text(&out.stdout), "command").as_deref(),
        Some("powder")
    );
}

#[test]
fn echoed_units_round_trip() {
    let out = cpmas(&[
        "simulate",
        "--b1i-khz",
        "62.5",
        "--b1s-khz",
        "71.3",
        "--offset-i-khz",
        "-3.7",
        "--d-khz",
        "2.5",
        "--mas-khz",
        "12.345",
        "--beta-deg",
        "54.7356",
        "--gamma-deg",
        "123.4",
        "--tmax-us",
        "10",
    ]);
    assert!(out.status.success());
    let report = text(&out.stderr);
    for (key, input) in [
        ("b1i_khz", 62.5),
        ("b1s_khz", 71.3),
        ("offset_i_khz", -3.7),
        ("d_khz", 2.5),
        ("mas_khz", 12.345),
        ("beta_deg", 54.7356),
        ("gamma_deg", 123.4),
    ] {
        let echoed: f64 = report_value(&report, key).unwrap().parse().unwrap();
        assert!(
            (echoed - input).abs() <= 1e-12 * input.abs(),
            "{key}: {echoed}"
        );
    }
    let b1: f64 = report_value(&report, "b1i_khz").unwrap().parse().unwrap();
    assert!((khz_to_rad_s(b1) - khz_to_rad_s(62.5)).abs() <= 1e-12 * khz_to_rad_s(62.5));
}

#[test]
fn command_line_overrides_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let conf: PathBuf = dir.path().join("run.conf");
    std::fs::write(
        &conf,
        "# test\nmas_khz = 3\ndistance_a = 1.5\ntmax_us = 10\n",
    )
    .unwrap();
    let out = cpmas(&[
        "simulate",
        "--config",
        conf.to_str().unwrap(),
        "--mas-khz",
        "7",
        "--d-khz",
        "4",
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let report = text(&out.stderr);
    assert_eq!(report_value(&report, "mas_khz").as_deref(), Some("7"));
    assert_eq!(report_value(&report, "d_khz").as_deref(), Some("4"));
    assert_eq!(report_value(&report, "tmax_us").as_deref(), Some("10"));
}

#[test]
fn bad_config_line_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "mas_khz 3\n").unwrap();
    let out = cpmas(&["simulate", "--config", conf.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("bad.conf:1"));
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(cpmas(&["--help"]).status.code(), Some(0));
    assert_eq!(cpmas(&["fit", "--help"]).status.code(), Some(0));
    assert_eq!(cpmas(&[]).status.code(), Some(1));
    assert_eq!(
        cpmas(&["simulate", "--no-such-flag"]).status.code(),
        Some(1)
    );
    assert_eq!(
        cpmas(&["powder", "--orient-set", "zcw:99"]).status.code(),
        Some(1)
    );
}

#[test]
fn seeded_noise_is_reproducible_and_seed_dependent() {
    let run = |seed: &str| {
        cpmas(&[
            "powder",
            "--tmax-us",
            "300",
            "--dt-us",
            "5",
            "--noise",
            "0.02",
            "--seed",
            seed,
        ])
        .stdout
    };
    assert_eq!(run("9"), run("9"));
    assert_ne!(run("9"), run("10"));
}
