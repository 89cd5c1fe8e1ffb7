use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tenrec"));
    c.env_remove("TENREC_THREADS");
    c
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tenrec-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().unwrap();
    (
        status.code().unwrap(),
        String::from_utf8(stdout).unwrap(),
        String::from_utf8(stderr).unwrap(),
    )
}

fn kv(out: &str, key: &str) -> String {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {out}"))
        .to_string()
}

fn final_fit(trace: &Path) -> f64 {
    let text = fs::read_to_string(trace).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "fit").unwrap();
    text.lines().last().unwrap().split(',').nth(col).unwrap().parse().unwrap()
}

#[test]
fn gradcheck_seed_7_passes() {
    let (code, out, _) = run(bin().args(["gradcheck", "--seed", "7"]));
    assert_eq!(code, 0, "{out}");
    let errs: Vec<f64> = out
        .lines()
        .map(|l| l.rsplit(|c: char| c == ' ' || c == '=').next().unwrap().parse().unwrap())
        .collect();
    assert!(errs.len() > 5);
    assert!(errs.iter().all(|&e| e <= 1e-6), "{out}");
}

#[test]
fn gradcheck_with_kempf_ness() {
    let (code, out, _) = run(bin().args(["gradcheck", "--seed", "3", "--instances", "3", "--kempf-ness"]));
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("kempf-ness"));
}

#[test]
fn complete_synthetic_reaches_fit() {
    let dir = scratch("complete");
    let (code, out, err) = run(bin()
        .args(["complete", "--ranks", "3,3,3", "--iters", "50", "--seed", "0", "--out"])
        .arg(&dir));
    assert_eq!(code, 0, "{err}");
    let fit = final_fit(&dir.join("trace.csv"));
    assert!(fit >= 0.95, "fit {fit}");
    assert_eq!(kv(&out, "iters"), "50");
    assert_eq!(kv(&out, "n_observed"), "13500");
    for f in ["completed.dtns", "core.dtns", "factor_1.dtns", "factor_3.dtns", "truth.dtns", "mask.dmsk"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}

#[test]
fn complete_is_deterministic() {
    let (a, b) = (scratch("det-a"), scratch("det-b"));
    for d in [&a, &b] {
        let (code, _, err) = run(bin()
            .args(["complete", "--synthetic", "8,9,7", "--ranks", "2,2,2", "--iters", "6", "--seed", "4", "--out"])
            .arg(d));
        assert_eq!(code, 0, "{err}");
    }
    for f in ["trace.csv", "completed.dtns", "core.dtns", "factor_2.dtns"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn complete_from_files_then_eval() {
    let dir = scratch("files");
    let gen = dir.join("gen");
    let (code, _, err) = run(bin()
        .args(["complete", "--synthetic", "6,6,6", "--ranks", "2,2,2", "--iters", "2", "--out"])
        .arg(&gen));
    assert_eq!(code, 0, "{err}");
    let out = dir.join("run");
    let (code, stdout, err) = run(bin()
        .arg("complete")
        .arg("--tensor")
        .arg(gen.join("truth.dtns"))
        .arg("--mask")
        .arg(gen.join("mask.dmsk"))
        .args(["--ranks", "2,2,2", "--iters", "5", "--out"])
        .arg(&out));
    assert_eq!(code, 0, "{err}");

    let (code, ev, _) = run(bin()
        .arg("eval")
        .arg(gen.join("truth.dtns"))
        .arg(out.join("completed.dtns"))
        .arg("--mask")
        .arg(gen.join("mask.dmsk")));
    assert_eq!(code, 0);
    assert_eq!(kv(&ev, "fit"), kv(&stdout, "fit"));
    assert_eq!(kv(&ev, "n_missing"), kv(&stdout, "n_missing"));
}

#[test]
fn eval_identical_tensors() {
    let dir = scratch("eval");
    let t = dir.join("t.dtns");
    fs::write(&t, "dtns 1\n2\n2 3\n1 2 3 4 5 6\n").unwrap();
    let (code, out, _) = run(bin().arg("eval").arg(&t).arg(&t));
    assert_eq!(code, 0);
    assert_eq!(kv(&out, "fit"), "1.000000");
    assert_eq!(kv(&out, "n_observed"), "6");
    assert_eq!(kv(&out, "n_missing"), "0");
}

#[test]
fn decompose_evaluates_all_entries() {
    let dir = scratch("decompose");
    let t = dir.join("t.dtns");
    fs::write(&t, "dtns 1\n3\n2 2 2\n1 2 2 4 3 6 6 12\n").unwrap();
    let (code, out, err) = run(bin()
        .arg("decompose")
        .arg("--tensor")
        .arg(&t)
        .args(["--ranks", "1,1,1", "--iters", "20", "--rho", "1e-6", "--out"])
        .arg(dir.join("o")));
    assert_eq!(code, 0, "{err}");
    assert_eq!(kv(&out, "n_missing"), "0");
    let fit: f64 = kv(&out, "fit").parse().unwrap();
    assert!(fit > 0.999, "{out}");
}

#[test]
fn flags_override_config_file() {
    let dir = scratch("config");
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, "# settings\nranks = 2,2,2\nmax_iters = 3\n").unwrap();
    let base = ["complete", "--synthetic", "6,6,6", "--out"];
    let (code, out, err) = run(bin().args(base).arg(dir.join("a")).arg("--config").arg(&cfg));
    assert_eq!(code, 0, "{err}");
    assert_eq!(kv(&out, "iters"), "3");
    let (code, out, _) = run(bin()
        .args(base)
        .arg(dir.join("b"))
        .arg("--config")
        .arg(&cfg)
        .args(["--iters", "2"]));
    assert_eq!(code, 0);
    assert_eq!(kv(&out, "iters"), "2");

    fs::write(&cfg, "bogus = 1\n").unwrap();
    let (code, _, err) = run(bin().args(base).arg(dir.join("c")).arg("--config").arg(&cfg));
    assert_eq!(code, 1);
    assert!(err.contains("bogus"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run(bin().args(["complete", "--no-such-flag"])).0, 1);
    assert_eq!(run(&mut bin()).0, 1);
    assert_eq!(run(bin().args(["complete", "--ranks", "3,3", "--iters", "1"])).0, 1);
    assert_eq!(run(bin().args(["eval", "/nonexistent/a.dtns", "/nonexistent/b.dtns"])).0, 1);
    assert_eq!(run(bin().arg("--help")).0, 0);
}

#[test]
fn numeric_failure_exits_2() {
    let dir = scratch("numeric");
    let t = dir.join("big.dtns");
    fs::write(&t, "dtns 1\n3\n2 2 2\n1e300 1e300 1e300 1e300 1e300 1e300 1e300 1e300\n").unwrap();
    let (code, _, err) = run(bin()
        .arg("decompose")
        .arg("--tensor")
        .arg(&t)
        .args(["--ranks", "1,1,1", "--out"])
        .arg(dir.join("o")));
    assert_eq!(code, 2, "{err}");
}

#[test]
fn simulate_and_coupled() {
    let dir = scratch("coupled");
    let spec = dir.join("sim.txt");
    fs::write(&spec, "sizes: [8 9 10 6]\nmodes: {[1 2 3],[1,4]}\nrank: 2\nnoise: 0\nseed: 5\n").unwrap();

    let (code, out, err) = run(bin().arg("simulate").arg("--spec").arg(&spec).arg("--out").arg(dir.join("sim")));
    assert_eq!(code, 0, "{err}");
    assert_eq!(kv(&out, "tensor_dims"), "8,9,10");
    assert!(dir.join("sim/matrix_1.dtns").exists());

    let runs: Vec<Vec<u8>> = ["1", "2"]
        .iter()
        .map(|threads| {
            let o = dir.join(format!("c{threads}"));
            let (code, out, err) = run(bin()
                .env("TENREC_THREADS", threads)
                .arg("coupled")
                .arg("--spec")
                .arg(&spec)
                .args(["--seeds", "2", "--iters", "10", "--out"])
                .arg(&o));
            assert_eq!(code, 0, "{err}");
            assert_eq!(kv(&out, "runs"), "2");
            fs::read(o.join("results.csv")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    let csv = String::from_utf8(runs[0].clone()).unwrap();
    assert_eq!(csv.lines().next(), Some("seed,avg_err,congruence,iters"));
    assert_eq!(csv.lines().count(), 3);

    let (code, _, _) = run(bin().env("TENREC_THREADS", "0").arg("coupled").arg("--spec").arg(&spec));
    assert_eq!(code, 1);
}
