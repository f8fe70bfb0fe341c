use std::fs;
use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_memkern");

fn write_experiment(dir: &Path, out: &str) -> std::path::PathBuf {
    let model = fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs/chain_n20.model.toml"),
    )
    .unwrap();
    fs::write(dir.join("chain.toml"), model).unwrap();
    let cfg = dir.join(format!("{out}.toml"));
    fs::write(
        &cfg,
        format!(
            "schema_version = 1\nmodel = \"chain.toml\"\nbackend = \"gaussian\"\nshots = [1000, 100000]\nrepetitions = 3\nseed = 5\noutput_dir = \"{out}\"\n"
        ),
    )
    .unwrap();
    cfg
}

fn run(args: &[&str]) -> (i32, String) {
    let o = Command::new(BIN).args(args).output().unwrap();
    (
        o.status.code().unwrap(),
        String::from_utf8_lossy(&o.stdout).into_owned() + &String::from_utf8_lossy(&o.stderr),
    )
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn plan_run_report_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_a = write_experiment(dir.path(), "a");
    let cfg_b = write_experiment(dir.path(), "b");

    let (code, _) = run(&["plan", cfg_a.to_str().unwrap()]);
    assert_eq!(code, 0);
    let (code, text) = run(&["run", cfg_a.to_str().unwrap()]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("h"));
    assert_eq!(run(&["plan", cfg_b.to_str().unwrap()]).0, 0);
    let (code, _) = run(&["--workers", "2", "run", cfg_b.to_str().unwrap()]);
    assert_eq!(code, 0);

    // the two configs differ only in the output directory name, which is
    // part of the hashed text, so compare everything after the hash
    let strip = |b: &[u8]| -> String {
        let s = String::from_utf8(b.to_vec()).unwrap();
        s.lines()
            .map(|l| if l.contains("config_hash") { "" } else { l })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let a = files(&dir.path().join("a"));
    let b = files(&dir.path().join("b"));
    assert_eq!(a.len(), b.len());
    let names: Vec<&str> = a.iter().map(|f| f.0.as_str()).collect();
    for want in [
        "plan.json",
        "sweep.csv",
        "report_S1000.json",
        "summary_S100000.csv",
        "traces_S1000.csv",
    ] {
        assert!(names.contains(&want), "missing {want} in {names:?}");
    }
    for ((na, ba), (_, bb)) in a.iter().zip(&b) {
        assert_eq!(strip(ba), strip(bb), "{na} differs between identical runs");
        let text = String::from_utf8(ba.clone()).unwrap();
        assert!(
            text.contains("schema_version") && text.contains("config_hash"),
            "{na} lacks provenance"
        );
    }

    // rerunning the same config reproduces every byte
    let before = files(&dir.path().join("a"));
    assert_eq!(run(&["run", cfg_a.to_str().unwrap()]).0, 0);
    assert_eq!(before, files(&dir.path().join("a")));

    let (code, text) = run(&["report", dir.path().join("a").to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(text.contains("slope"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(
        &bad,
        "schema_version = 1\nmodel = \"missing.toml\"\nbackend = \"exact\"\n",
    )
    .unwrap();
    assert_eq!(run(&["run", bad.to_str().unwrap()]).0, 2);

    // gaussian backend on a spin model is a configuration error
    let spin =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs/two_qubit_mode.model.toml");
    fs::copy(spin, dir.path().join("spin.toml")).unwrap();
    let mismatch = dir.path().join("mismatch.toml");
    fs::write(
        &mismatch,
        "schema_version = 1\nmodel = \"spin.toml\"\nbackend = \"gaussian\"\n",
    )
    .unwrap();
    let (code, text) = run(&["plan", mismatch.to_str().unwrap()]);
    assert_eq!(code, 2, "{text}");

    let (code, text) = run(&["verify"]);
    assert_eq!(code, 0, "{text}");
    assert_eq!(text.matches("PASS").count(), 3);
}
