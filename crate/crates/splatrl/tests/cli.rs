use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 8] = [
    "--set",
    "train.iterations=300",
    "--set",
    "train.eval_interval=100",
    "--set",
    "train.densify_from=50",
    "--set",
    "train.densify_until=250",
];

fn splatrl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatrl")).args(args).current_dir(dir).output().expect("spawn splatrl")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path) {
    let o = splatrl(&["--seed", "4", "gen", "--recipe", "clutter", "--resolution", "64", "--cameras", "8", "--out", "data"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn fit(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["fit", "--data", "data", "--out", out];
    args.extend(SMALL);
    args.extend(extra);
    splatrl(&args, dir)
}

fn final_line(o: &Output) -> String {
    stdout(o).lines().find(|l| l.starts_with("final ")).expect("final line").to_string()
}

#[test]
fn gen_writes_the_data_layout() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path());
    for f in ["scene.json", "init.json", "cameras.json", "targets/000.png", "targets/007.png"] {
        assert!(tmp.path().join("data").join(f).exists(), "{f}");
    }
    assert!(!tmp.path().join("data/targets/008.png").exists());
}

#[test]
fn repeated_fits_print_the_same_final_line() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path());
    let a = fit(tmp.path(), "a", &[]);
    let b = fit(tmp.path(), "b", &[]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(final_line(&a), final_line(&b));
    assert!(final_line(&a).starts_with("final iteration=300 "));
    for f in ["log.csv", "lineage.csv", "scene.json", "eval.csv"] {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }
    let cfg = fs::read_to_string(tmp.path().join("a/config.toml")).unwrap();
    assert!(cfg.contains("iterations = 300"));
}

#[test]
fn paused_and_resumed_fit_matches_an_uninterrupted_one() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path());
    let full = fit(tmp.path(), "full", &[]);
    let paused = fit(tmp.path(), "part", &["--until", "150"]);
    assert!(stdout(&paused).contains("paused iteration=200"), "{}", stdout(&paused));
    let resumed = fit(tmp.path(), "part", &["--resume"]);
    assert!(resumed.status.success(), "{}", stderr(&resumed));
    assert_eq!(final_line(&full), final_line(&resumed));
    for f in ["log.csv", "lineage.csv", "scene.json"] {
        assert_eq!(fs::read(tmp.path().join("full").join(f)).unwrap(), fs::read(tmp.path().join("part").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resume_refuses_a_changed_config() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path());
    assert!(fit(tmp.path(), "run", &["--until", "100"]).status.success());
    let o = fit(tmp.path(), "run", &["--resume", "--set", "loss.lambda=0.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind=validation"), "{}", stderr(&o));
}

#[test]
fn truncated_checkpoint_is_a_decode_error() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path());
    assert!(fit(tmp.path(), "run", &["--until", "100"]).status.success());
    let bytes = fs::read(tmp.path().join("run/checkpoint.bin")).unwrap();
    fs::write(tmp.path().join("cut.bin"), &bytes[..bytes.len() / 2]).unwrap();
    let o = splatrl(&["eval", "--checkpoint", "cut.bin", "--data", "data"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind=decode"), "{}", stderr(&o));
}

#[test]
fn mis_sized_target_is_a_shape_error() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path());
    let small = image::RgbImage::new(10, 10);
    small.save(tmp.path().join("data/targets/002.png")).unwrap();
    let o = fit(tmp.path(), "run", &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind=shape"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path());
    fs::write(tmp.path().join("c.toml"), "[train]\niteratons = 5\n").unwrap();
    let o = splatrl(&["fit", "--config", "c.toml", "--data", "data"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind=config"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(splatrl(&["fit", "--bogus"], tmp.path()).status.code(), Some(2));
    assert_eq!(splatrl(&["gen", "--recipe", "nope", "--out", "x"], tmp.path()).status.code(), Some(2));
    assert_eq!(splatrl(&[], tmp.path()).status.code(), Some(2));
}

#[test]
fn render_and_eval_agree_with_the_fit() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path());
    let o = fit(tmp.path(), "run", &[]);
    assert!(o.status.success());
    let r = splatrl(&["render", "--scene", "run/scene.json", "--cameras", "data/cameras.json", "--out", "img", "--format", "ppm"], tmp.path());
    assert!(r.status.success(), "{}", stderr(&r));
    assert_eq!(fs::read_dir(tmp.path().join("img")).unwrap().count(), 8);
    let e = splatrl(&["eval", "--checkpoint", "run/checkpoint.bin", "--data", "data", "--csv", "e.csv"], tmp.path());
    assert!(e.status.success(), "{}", stderr(&e));
    assert_eq!(fs::read(tmp.path().join("e.csv")).unwrap(), fs::read(tmp.path().join("run/eval.csv")).unwrap());
}

#[test]
fn verify_suites_pass_at_small_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["verify", "sensitivity", "--trials", "8"][..], &["verify", "gradients", "--scenes", "2"], &["verify", "theory", "--seeds", "1"]] {
        let o = splatrl(args, tmp.path());
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
}
