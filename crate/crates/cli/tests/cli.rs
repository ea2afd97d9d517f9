use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use daxs_cli::pipeline::AlignAverageReport;
use daxs_core::fit::FitResult;
use daxs_core::image::AxisSpec;
use daxs_core::model::{SignClass, Spectrum};
use daxs_core::sim::{dot_lines, LeadModel, LeadResonance, SimConfig};
use daxs_core::{CouplingName, ModelParams, SpectralImage};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn daxs<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_daxs"))
        .args(args)
        .output()
        .expect("daxs runs")
}

/// Fixture path as an argument.
fn fx(name: &str) -> String {
    fixture(name).to_str().unwrap().to_string()
}

macro_rules! argv {
    ($($a:expr),* $(,)?) => { Vec::<String>::from([$(String::from($a)),*]) };
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

fn truth() -> ModelParams {
    serde_json::from_str(&fs::read_to_string(fixture("params.json")).unwrap()).unwrap()
}

fn simulate(dir: &Path, name: &str, extra: &[String]) -> PathBuf {
    let out = dir.join(name);
    let mut args = argv!["simulate", "--params", fx("params.json"), "--out", p(&out)];
    if !extra.iter().any(|a| a == "--config") {
        args.extend(argv!["--config", fx("sim.json")]);
    }
    args.extend(extra.iter().map(|s| s.to_string()));
    ok(&daxs(&args));
    out
}

#[test]
fn simulate_reproduces_the_committed_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(dir.path(), "image.json", &[]);
    let written = fs::read(&out).unwrap();
    assert!(
        written == fs::read(fixture("image.json")).unwrap(),
        "fixture image differs from a fresh render"
    );
    let img = SpectralImage::from_json(std::str::from_utf8(&written).unwrap()).unwrap();
    assert_eq!(img.to_json().unwrap().as_bytes(), &written[..]);
}

#[test]
fn the_same_seed_gives_the_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("a.png");
    let a = simulate(
        dir.path(),
        "a.json",
        &argv!["--seed", "7", "--png", p(&png)],
    );
    let b = simulate(dir.path(), "b.json", &argv!["--seed", "7"]);
    let c = simulate(dir.path(), "c.json", &argv!["--seed", "8"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert!(fs::read(&png).unwrap().starts_with(b"\x89PNG"));
}

#[test]
fn malformed_json_exits_2_with_its_position() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("params.json");
    fs::write(&bad, "{\n  \"couplings\": {\n    \"t11\": 8.0,,\n").unwrap();
    let out = daxs(&argv![
        "simulate",
        "--params",
        p(&bad),
        "--config",
        fx("sim.json"),
        "--out",
        p(&dir.path().join("x.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("line 3 column"), "{msg}");
    assert!(!dir.path().join("x.json").exists());
}

#[test]
fn invalid_settings_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: SimConfig =
        serde_json::from_str(&fs::read_to_string(fixture("sim.json")).unwrap()).unwrap();
    cfg.linewidth = -1.0;
    let path = dir.path().join("sim.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = daxs(&argv![
        "simulate",
        "--params",
        fx("params.json"),
        "--config",
        p(&path),
        "--out",
        p(&dir.path().join("x.json"))
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("linewidth"));
}

fn run_fit(dir: &Path, extra: &[&str]) -> (FitResult, PathBuf) {
    let out = dir.join("fit.json");
    let tracks = dir.join("tracks.csv");
    let mut args = argv![
        "fit",
        "--image",
        fx("image.json"),
        "--seeds",
        fx("seeds.json"),
        "--config",
        fx("fit-config.json"),
        "--out",
        p(&out),
        "--tracks-out",
        p(&tracks),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    ok(&daxs(&args));
    (
        FitResult::from_json(&fs::read_to_string(&out).unwrap()).unwrap(),
        tracks,
    )
}

#[test]
fn fixture_fit_recovers_the_couplings() {
    let dir = tempfile::tempdir().unwrap();
    let (fit, tracks) = run_fit(dir.path(), &[]);
    let truth = truth();
    assert!(fit.converged);
    assert_eq!(fit.sign_class, SignClass::A);
    for c in CouplingName::ALL {
        let want = truth.couplings.get(c).magnitude;
        let got = fit.magnitude(c);
        assert!((got - want).abs() <= 0.03 * want, "{c}: {got} vs {want}");
    }
    assert!(
        (fit.s - 1.0).abs() < 5e-3 && fit.delta_offset.abs() < 0.1,
        "s {} offset {}",
        fit.s,
        fit.delta_offset
    );
    let csv = fs::read_to_string(tracks).unwrap();
    assert!(csv.starts_with("track_id,x,delta,delta_sigma,amplitude,width\n"));
}

#[test]
fn sign_class_flag_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let (fit, _) = run_fit(dir.path(), &["--sign-class", "b"]);
    assert_eq!(fit.sign_class, SignClass::B);
    assert!(fit.params.couplings.t21.value() < 0.0 && fit.params.couplings.t11.value() < 0.0);
}

#[test]
fn seeds_with_absent_branch_labels_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixture("seeds.json")).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["curves"][0]["branch"] =
        serde_json::json!({ "sector": "singlet", "index": 9, "spin_z": 0 });
    let seeds = dir.path().join("seeds.json");
    fs::write(&seeds, doc.to_string()).unwrap();
    let out = daxs(&argv![
        "fit",
        "--image",
        fx("image.json"),
        "--seeds",
        p(&seeds),
        "--config",
        fx("fit-config.json"),
        "--out",
        p(&dir.path().join("fit.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("S9"), "{}", stderr(&out));
}

fn align(dir: &Path, images: &[&Path]) -> Output {
    let mut args = argv!["align-average"];
    args.extend(images.iter().map(|i| p(i)));
    let (out, report) = (dir.join("avg.json"), dir.join("report.json"));
    args.extend(argv![
        "--seeds",
        fx("seeds.json"),
        "--track",
        "T1",
        "--window",
        "-110",
        "-45",
        "--linewidth",
        "4"
    ]);
    args.extend(argv!["--out", p(&out), "--report", p(&report)]);
    daxs(&args)
}

#[test]
fn a_single_image_cannot_be_averaged() {
    let dir = tempfile::tempdir().unwrap();
    let out = align(dir.path(), &[&fixture("image.json")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn averaging_identical_images_returns_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let copy = dir.path().join("copy.json");
    fs::copy(fixture("image.json"), &copy).unwrap();
    ok(&align(dir.path(), &[&fixture("image.json"), &copy]));
    assert!(
        fs::read(dir.path().join("avg.json")).unwrap() == fs::read(fixture("image.json")).unwrap()
    );
    let report: AlignAverageReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report.images.len(), 2);
    assert!(report.images.iter().all(|r| r.shift == [0, 0]));
    assert_eq!(report.images[1].image_id, "copy");
    assert_eq!(report.empty_pixels, 0);
}

#[test]
fn averaging_shuffled_lead_scans_suppresses_the_leads() {
    let dir = tempfile::tempdir().unwrap();
    let mut base: SimConfig =
        serde_json::from_str(&fs::read_to_string(fixture("sim.json")).unwrap()).unwrap();
    // Whole-pixel registration needs columns finer than the vertex uncertainty.
    base.eps_axis = AxisSpec::new(-150.0, 1.0, 326);
    let leads = LeadModel {
        resonances: [-70.0, 150.0]
            .map(|intercept| LeadResonance {
                intercept,
                slope: 1.5,
                linewidth: base.linewidth,
                amplitude: 0.8,
            })
            .to_vec(),
    };
    let leads_path = dir.path().join("leads.json");
    fs::write(&leads_path, serde_json::to_string(&leads).unwrap()).unwrap();
    let offsets = [0.0, 2.0, -1.0, 3.0];
    let voltage = |k: usize| 10.0 * k as f64;
    let mut scans = Vec::new();
    for (k, &o) in offsets.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.delta_offset = o;
        cfg.rng_seed = 100 + k as u64;
        let cfg_path = dir.path().join(format!("sim-{k}.json"));
        fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
        let v = voltage(k).to_string();
        scans.push(simulate(
            dir.path(),
            &format!("scan-{k}.json"),
            &argv![
                "--config",
                p(&cfg_path),
                "--leads",
                p(&leads_path),
                "--lead-voltage",
                v.as_str()
            ],
        ));
    }
    let refs: Vec<&Path> = scans.iter().map(PathBuf::as_path).collect();
    ok(&align(dir.path(), &refs));
    let report: AlignAverageReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let shifts: Vec<i64> = report.images.iter().map(|r| r.shift[1]).collect();
    assert_eq!(shifts, vec![0, -2, 1, -3]);
    assert!(report.images.iter().all(|r| r.shift[0].abs() <= 1));

    let read = |path: &Path| SpectralImage::from_json(&fs::read_to_string(path).unwrap()).unwrap();
    let avg = read(&dir.path().join("avg.json"));
    let first = read(&scans[0]);
    let truth = truth();
    let y = &avg.y_axis;
    // Columns where the row of each first-scan lead line is clear of dot lines.
    for r in &leads.resonances {
        let at = r.position(voltage(0));
        let iy = y.nearest(at).unwrap();
        let cols: Vec<usize> = (0..avg.width())
            .filter(|&ix| {
                dot_lines(&truth, &base, avg.x_axis.value(ix))
                    .iter()
                    .all(|l| l.amplitude == 0.0 || (l.center - at).abs() > 15.0)
            })
            .filter(|&ix| ix > 10)
            .collect();
        assert!(cols.len() > 20);
        let mean = |img: &SpectralImage| {
            cols.iter().map(|&ix| img.get(ix, iy)).sum::<f64>() / cols.len() as f64
        };
        let ratio = mean(&avg) / mean(&first);
        assert!(ratio <= 0.3, "lead at {at}: ratio {ratio}");
    }
    // The registered dot line keeps its height.
    let mut single = 0.0;
    let mut averaged = 0.0;
    for ix in (0..avg.width()).step_by(8) {
        let eps = avg.x_axis.value(ix);
        let e = Spectrum::compute(&truth, eps).triplet.states[0].energy;
        if leads.resonances.iter().any(|r| {
            offsets
                .iter()
                .enumerate()
                .any(|(k, _)| (r.position(voltage(k)) - e).abs() < 20.0)
        }) {
            continue;
        }
        let iy = y.nearest(e).unwrap();
        let peak = |img: &SpectralImage| (iy - 1..=iy + 1).map(|j| img.get(ix, j)).sum::<f64>();
        single += peak(&first);
        averaged += peak(&avg);
    }
    assert!(
        (averaged - single).abs() / single < 0.05,
        "dot height {averaged} vs {single}"
    );
}

#[test]
fn sign_compare_writes_a_budget_for_repeated_scans() {
    let dir = tempfile::tempdir().unwrap();
    let mut tracks = Vec::new();
    for seed in ["7", "8"] {
        let sub = dir.path().join(seed);
        fs::create_dir(&sub).unwrap();
        let img = simulate(&sub, "image.json", &argv!["--seed", seed]);
        let t = sub.join("tracks.csv");
        ok(&daxs(&argv![
            "fit",
            "--image",
            p(&img),
            "--seeds",
            fx("seeds.json"),
            "--config",
            fx("fit-config.json"),
            "--out",
            p(&sub.join("fit.json")),
            "--tracks-out",
            p(&t),
        ]));
        tracks.push(t);
    }
    let report = dir.path().join("compare.json");
    let budget = dir.path().join("budget.csv");
    let mut args = argv!["sign-compare"];
    for t in &tracks {
        args.extend(argv!["--tracks", p(t)]);
    }
    args.extend(argv![
        "--seeds",
        fx("seeds.json"),
        "--config",
        fx("fit-config.json")
    ]);
    args.extend(argv!["--out", p(&report), "--budget-out", p(&budget)]);
    ok(&daxs(&args));
    let csv = fs::read_to_string(&budget).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("coupling,mean,random_sigma,systematic_sigma,total_sigma,reliable")
    );
    assert_eq!(lines.count(), 8);
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(doc["scans"].as_array().unwrap().len(), 2);
    assert_eq!(doc["scans"][0]["fit_b"]["sign_class"], "b");

    let one = daxs(&argv![
        "sign-compare",
        "--tracks",
        p(&tracks[0]),
        "--seeds",
        fx("seeds.json"),
        "--config",
        fx("fit-config.json"),
        "--out",
        p(&report),
        "--budget-out",
        p(&budget)
    ]);
    assert_eq!(one.status.code(), Some(2));
}

#[test]
fn every_subcommand_has_help() {
    for cmd in ["simulate", "fit", "align-average", "sign-compare", "serve"] {
        let out = daxs(&argv![cmd, "--help"]);
        ok(&out);
        assert!(
            String::from_utf8_lossy(&out.stdout).contains("Usage: daxs"),
            "{cmd}"
        );
    }
    let out = daxs(&argv!["serve", "--help"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("DAXS_DATA_DIR"));
}
