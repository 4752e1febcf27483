use std::path::Path;
use std::process::{Command, Output};

use crc_core::neural::{self, Network, NetworkSpec, OutputActivation};
use crc_core::pricing::{bs_price, OptionKind};

fn crc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crc"))
        .args(args)
        .env_remove("CRC_CONFIG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn number(o: &Output) -> f64 {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    stdout(o).trim().parse().unwrap()
}

/// A config for networks small enough to train in a test.
fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let text = "\
[nn1]
width = 8
n_main_layers = 1

[nn1.train]
epochs = 2
batch_size = 10

[nn2]
width = 8
n_main_layers = 1

[nn2.train]
epochs = 2
batch_size = 10
";
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn unknown_config_keys_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[sim]\nstepz = 3\n").unwrap();
    let out = dir.path().join("d.csv");
    let o = crc(&["--config", cfg.to_str().unwrap(), "generate", "--n", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = crc(&["--config", dir.path().join("missing.toml").to_str().unwrap(), "price", "--strike", "100", "--tau", "1"]);
    assert_eq!(o.status.code(), Some(1));
    // usage errors share the configuration code
    assert_eq!(crc(&["price", "--tau", "1"]).status.code(), Some(2));
}

#[test]
fn generation_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        let o = crc(&["--json", "--threads", "1", "generate", "--n", "3", "--seed", "4", "--out", p.to_str().unwrap()]);
        assert!(o.status.success());
        let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        assert_eq!(v["requested"], 3);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(dir.path().join("a.manifest.toml").exists());
}

#[test]
fn degenerate_model_prices_like_black_scholes() {
    let args = [
        "price", "--strike", "105", "--tau", "0.5", "--spot", "100", "--v0", "0.04", "--theta", "0.04", "--sigma", "1e-6",
        "--lambda", "0", "--r", "0.02", "--q", "0.01",
    ];
    let got = number(&crc(&args));
    let bs = bs_price(100.0, 105.0, 0.5, 0.2, 0.02, 0.01, OptionKind::Call);
    assert!((got - bs).abs() < 1e-7 * bs, "{got} vs {bs}");
    let mut put = args.to_vec();
    put.push("--put");
    let got = number(&crc(&put));
    let bs = bs_price(100.0, 105.0, 0.5, 0.2, 0.02, 0.01, OptionKind::Put);
    assert!((got - bs).abs() < 1e-7 * bs, "{got} vs {bs}");
}

#[test]
fn vanishing_strike_is_worth_the_spot() {
    let got = number(&crc(&["price", "--strike", "1e-9", "--tau", "1", "--spot", "100", "--q", "0"]));
    assert!((got - 100.0).abs() < 1e-6, "{got}");
}

#[test]
fn implied_vol_round_trips_at_full_precision() {
    let price = bs_price(100.0, 90.0, 0.75, 0.31, 0.01, 0.02, OptionKind::Put);
    let text = format!("{price:e}");
    let o = crc(&["iv", "--price", &text, "--spot", "100", "--strike", "90", "--tau", "0.75", "--r", "0.01", "--q", "0.02", "--put"]);
    let vol = number(&o);
    assert!((vol - 0.31).abs() < 1e-10, "{vol}");
    // 17 significant digits
    let digits = stdout(&o).trim().split('e').next().unwrap().replace(['.', '-'], "");
    assert_eq!(digits.len(), 17);
}

#[test]
fn domain_errors_exit_with_three() {
    let o = crc(&["price", "--strike", "-5", "--tau", "1"]);
    assert_eq!(o.status.code(), Some(3));
    let o = crc(&["iv", "--price", "200", "--spot", "100", "--strike", "100", "--tau", "1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bound"));
    let o = crc(&["price", "--strike", "100", "--tau", "1", "--sigma", "2.0", "--theta", "0.01", "--kappa", "1"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn surface_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.csv");
    let o = crc(&["surface", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let surf = crc_core::surface::VolSurface::load_csv(&out, 100.0).unwrap();
    assert_eq!(surf.vols.len(), 130);
    let o = crc(&["surface"]);
    assert_eq!(stdout(&o).lines().count(), 131);
}

#[test]
fn pipeline_trains_and_simulates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let ok = |o: Output| assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    ok(crc(&["--config", cfg, "generate", "--n", "40", "--seed", "1", "--out", &p("d.csv")]));
    // the inverse network needs a forward one
    let o = crc(&["--config", cfg, "train", "nn2", "--data", &p("d.csv"), "--nn1", &p("none.txt"), "--out", &p("nn2.txt")]);
    assert_eq!(o.status.code(), Some(2));

    ok(crc(&["--config", cfg, "train", "nn1", "--data", &p("d.csv"), "--out", &p("nn1.txt")]));
    ok(crc(&["--config", cfg, "train", "nn1", "--data", &p("d.csv"), "--out", &p("nn1b.txt")]));
    assert_eq!(std::fs::read(p("nn1.txt")).unwrap(), std::fs::read(p("nn1b.txt")).unwrap());
    assert_eq!(std::fs::read_to_string(p("nn1.loss.csv")).unwrap().lines().count(), 3);
    ok(crc(&["--config", cfg, "train", "nn2", "--data", &p("d.csv"), "--nn1", &p("nn1.txt"), "--out", &p("nn2.txt")]));

    let o = crc(&["--config", cfg, "simulate", "--nn1", &p("nn1.txt"), "--nn2", &p("missing.txt"), "--out-dir", &p("run")]);
    assert_eq!(o.status.code(), Some(2));
    for run in ["run_a", "run_b"] {
        let o = crc(&["--config", cfg, "--json", "simulate", "--nn1", &p("nn1.txt"), "--nn2", &p("nn2.txt"), "--out-dir", &p(run), "--steps", "10", "--seed", "3"]);
        ok(o.clone());
        let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        assert_eq!(v["records"], 11);
    }
    let a = std::fs::read(dir.path().join("run_a/run.toml")).unwrap();
    let b = std::fs::read(dir.path().join("run_b/run.toml")).unwrap();
    assert_eq!(a, b);
    assert!(dir.path().join("run_a/surface_00010.csv").exists());
}

#[test]
fn zero_epochs_keep_the_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("d.csv");
    let out = dir.path().join("nn1.txt");
    let o = crc(&["--config", cfg.to_str().unwrap(), "generate", "--n", "5", "--out", data.to_str().unwrap()]);
    assert!(o.status.success());
    let o = crc(&[
        "--config", cfg.to_str().unwrap(), "train", "nn1", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--epochs", "0", "--seed", "12",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trained = neural::load(&out).unwrap();
    let spec = NetworkSpec {
        input_dim: 41,
        output_dim: 130,
        n_main_layers: 1,
        width: 8,
        residual: true,
        batch_norm: true,
        output: OutputActivation::Linear,
        input_box: crc_core::datagen::SamplingBounds::default().input_box(),
    };
    let init = Network::new(spec, 12).unwrap();
    assert_eq!(trained.params(), init.params());
}
