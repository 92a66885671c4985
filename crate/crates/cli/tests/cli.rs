use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn thm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("run thm")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL_MODEL: &str = "d_model = 16\nn_heads = 2\nn_blocks = 1\nd_ff = 32\nwarmup = 50\ntoken_budget = 256\ndecode_max_len = 16\n";

fn synth(dir: &Path) {
    let o = thm(&["make-synth", "--seed", "3", "--out", "data", "--train-pairs", "120", "--eval-pairs", "12"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn train_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "train", "--config", "small.cfg", "--seed", "5", "--src", "data/train.src", "--tgt", "data/train.tgt",
        "--dev-src", "data/dev.src", "--dev-tgt", "data/dev.tgt", "--test-src", "data/test.src", "--test-tgt",
        "data/test.tgt", "--out", out, "--bpe-vocab", "40",
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn every_command_has_help_listing_its_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&str, &[&str]); 10] = [
        ("make-synth", &["--seed", "--task", "--out", "--config"]),
        ("learn-bpe", &["--src", "--tgt", "--out", "--vocab"]),
        ("apply-bpe", &["--bpe", "--src", "--out"]),
        ("train", &["--seed", "--src", "--tgt", "--out", "--preset", "--epochs", "--resume", "--config"]),
        ("translate", &["--checkpoint", "--src", "--out", "--beam"]),
        ("bleu", &["--hyp", "--ref"]),
        ("gradcheck", &["--seed", "--preset"]),
        ("param-count", &["--preset", "--vocab"]),
        ("select-model", &["--log", "--k"]),
        ("plot-loss", &["--log", "--out"]),
    ];
    for (cmd, flags) in cases {
        let o = thm(&[cmd, "--help"], dir.path());
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{cmd} help lacks {f}");
        }
    }
    assert_eq!(code(&thm(&["--help"], dir.path())), 0);
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&thm(&[], d)), 1);
    assert_eq!(code(&thm(&["frobnicate"], d)), 1);
    assert_eq!(code(&thm(&["bleu", "--hyp", "a", "--ref", "b", "--beam", "2"], d)), 1);
    assert_eq!(code(&thm(&["make-synth", "--out", "x"], d)), 1);
    assert_eq!(code(&thm(&["gradcheck", "--preset", "tiny"], d)), 1);
    assert_eq!(code(&thm(&["param-count", "--preset", "huge"], d)), 1);
    fs::write(d.join("bad.cfg"), "seed = 1\ncolour = blue\n").unwrap();
    let o = thm(&["make-synth", "--config", "bad.cfg", "--out", "x"], d);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&thm(&["bleu", "--hyp", "missing", "--ref", "missing"], d)), 2);
    fs::write(d.join("h"), "a b\nc\n").unwrap();
    fs::write(d.join("r"), "a b\n").unwrap();
    assert_eq!(code(&thm(&["bleu", "--hyp", "h", "--ref", "r"], d)), 2);
    fs::write(d.join("log"), "1 2 3\n").unwrap();
    assert_eq!(code(&thm(&["select-model", "--log", "log"], d)), 2);
}

#[test]
fn bleu_of_a_file_against_itself_is_100() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("f"), "the cat sat on the mat\na b c d\n").unwrap();
    let o = thm(&["bleu", "--hyp", "f", "--ref", "f"], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), "100.00");
}

#[test]
fn param_count_ratio() {
    let dir = tempfile::tempdir().unwrap();
    for preset in ["thm-base", "thm-big"] {
        let o = thm(&["param-count", "--preset", preset, "--vocab", "33712"], dir.path());
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        let ratio: f64 = text
            .lines()
            .find_map(|l| l.strip_prefix("ratio "))
            .expect("ratio line")
            .parse()
            .unwrap();
        assert!((1.80..=2.05).contains(&ratio), "{preset}: {ratio}");
        assert!(text.contains("total "));
    }
}

#[test]
fn gradcheck_on_tiny_preset_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = thm(&["gradcheck", "--preset", "tiny", "--seed", "7"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn make_synth_is_reproducible_and_config_seed_is_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("s.cfg"), "seed = 1\ntask = reverse\neval_pairs = 5\n").unwrap();
    assert_eq!(code(&thm(&["make-synth", "--config", "s.cfg", "--seed", "9", "--out", "a"], d)), 0);
    assert_eq!(code(&thm(&["make-synth", "--seed", "9", "--task", "reverse", "--eval-pairs", "5", "--out", "b"], d)), 0);
    assert_eq!(code(&thm(&["make-synth", "--config", "s.cfg", "--out", "c"], d)), 0);
    for f in ["train.src", "train.tgt", "dev.src", "test.tgt"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap());
    }
    assert_ne!(fs::read(d.join("a/train.src")).unwrap(), fs::read(d.join("c/train.src")).unwrap());
    let src = fs::read_to_string(d.join("a/dev.src")).unwrap();
    let tgt = fs::read_to_string(d.join("a/dev.tgt")).unwrap();
    assert_eq!(src.lines().count(), 5);
    for (s, t) in src.lines().zip(tgt.lines()) {
        let rev: Vec<&str> = s.split(' ').rev().collect();
        assert_eq!(t, rev.join(" "));
    }
}

#[test]
fn bpe_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("s"), "lower lowest\nnewer wider\n").unwrap();
    fs::write(d.join("t"), "low new\nwide\n").unwrap();
    assert_eq!(code(&thm(&["learn-bpe", "--src", "s", "--tgt", "t", "--out", "bpe", "--vocab", "30"], d)), 0);
    let o = thm(&["apply-bpe", "--bpe", "bpe", "--src", "s"], d);
    assert_eq!(code(&o), 0);
    let seg = stdout(&o);
    assert_eq!(seg.lines().count(), 2);
    assert_eq!(seg.lines().next().unwrap().replace("@@ ", ""), "lower lowest");
}

#[test]
fn train_translate_select_plot_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    fs::write(d.join("small.cfg"), SMALL_MODEL).unwrap();

    let o = thm(&train_args("run", &["--epochs", "3"]), d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(d.join("run/loss.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for e in 1..=3 {
        assert!(d.join(format!("run/epoch-{e:03}.ckpt")).exists());
    }

    let again = thm(&train_args("run2", &["--epochs", "3"]), d);
    assert_eq!(code(&again), 0);
    assert_eq!(fs::read(d.join("run2/loss.log")).unwrap(), log.as_bytes());

    let part = thm(&train_args("part", &["--epochs", "1"]), d);
    assert_eq!(code(&part), 0);
    let resumed = thm(&train_args("resumed", &["--epochs", "3", "--resume", "part/epoch-001.ckpt"]), d);
    assert_eq!(code(&resumed), 0, "{}", String::from_utf8_lossy(&resumed.stderr));
    assert_eq!(fs::read(d.join("resumed/loss.log")).unwrap(), log.as_bytes());

    let o = thm(
        &["translate", "--checkpoint", "run/epoch-003.ckpt", "--src", "data/test.src", "--out", "hyp"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(d.join("hyp")).unwrap().lines().count(), 12);
    let o = thm(
        &["translate", "--checkpoint", "run/epoch-003.ckpt", "--src", "data/test.src", "--beam", "3"],
        d,
    );
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().count(), 12);
    assert_eq!(code(&thm(&["bleu", "--hyp", "hyp", "--ref", "data/test.tgt"], d)), 0);

    let o = thm(&["select-model", "--log", "run/loss.log", "--k", "1,3"], d);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.starts_with("best epoch "));
    assert!(text.contains("top3 true"));

    assert_eq!(code(&thm(&["plot-loss", "--log", "run/loss.log", "--out", "loss.svg"], d)), 0);
    assert!(fs::read_to_string(d.join("loss.svg")).unwrap().starts_with("<svg"));
    assert_eq!(code(&thm(&["plot-loss", "--log", "run/loss.log", "--out", "loss.dat"], d)), 0);
    assert_eq!(fs::read_to_string(d.join("loss.dat")).unwrap().lines().count(), 4);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    fs::write(d.join("small.cfg"), SMALL_MODEL).unwrap();
    let o = thm(&train_args("run", &["--epochs", "2", "--lr-scale", "1e200"]), d);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}
