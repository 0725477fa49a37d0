use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chainshift::protocol::{Endpoint, ExternalScorer};
use chainshift_core::scoring::synthetic_scorer;
use chainshift_core::{gen_phantoms, MarginModel, Modality, Scorer, ZeroShotClassifier};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_chainshift")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("campaign.toml");
    fs::write(&path, body).unwrap();
    path
}

/// Phantoms written to disk and re-ingested through the labels CSV.
fn small_campaign(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = run(&["gen-phantoms", "--n", "4", "--seed", "3", "--out", data.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let labels = data.join("labels.csv");
    assert_eq!(fs::read_to_string(&labels).unwrap().lines().count(), 5);
    write_config(
        dir,
        &format!(
            "seed = 1\nworkers = 2\nout = {:?}\n[dataset]\nsource = \"labels\"\npath = {:?}\nmodality = \"xray-like\"\n\
             [scorer]\nkind = \"synthetic\"\nseed = 2024\n[attack]\ntaus = [0.8]\noptimizer = \"random\"\nbudget = 4\n\
             families = [\"A\", \"RD\"]\n",
            dir.join("archive"),
            labels
        ),
    )
}

#[test]
fn attack_verify_and_report_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_campaign(dir.path());
    let archive = dir.path().join("archive");
    let out = run(&["attack", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("archived 4 records"));

    let out = run(&["verify-archive", "--archive", archive.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}{}", String::from_utf8_lossy(&out.stdout), stderr(&out));

    let again = dir.path().join("again");
    let out = run(&["report", "--archive", archive.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for name in ["summary.csv", "family_success.csv", "ablation.csv", "report.txt"] {
        assert_eq!(fs::read(archive.join("report").join(name)).unwrap(), fs::read(again.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn incomplete_archive_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_campaign(dir.path());
    let archive = dir.path().join("archive");
    assert_eq!(code(&run(&["attack", "--config", cfg.to_str().unwrap()])), 0);
    let meta = archive.join("archive.json");
    let mut value: serde_json::Value = serde_json::from_slice(&fs::read(&meta).unwrap()).unwrap();
    value["complete"] = false.into();
    fs::write(&meta, value.to_string()).unwrap();
    let out = run(&["report", "--archive", archive.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(dir.path().join("archive/report/summary.csv").exists());
    assert_eq!(code(&run(&["verify-archive", "--archive", archive.to_str().unwrap()])), 3);
}

#[test]
fn corrupted_image_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_campaign(dir.path());
    let archive = dir.path().join("archive");
    assert_eq!(code(&run(&["attack", "--config", cfg.to_str().unwrap()])), 0);
    let png = fs::read_dir(archive.join("images")).unwrap().next().unwrap().unwrap().path();
    let mut bytes = fs::read(&png).unwrap();
    let last = bytes.len() - 20;
    bytes[last] ^= 0xff;
    fs::write(&png, bytes).unwrap();
    let out = run(&["verify-archive", "--archive", archive.to_str().unwrap()]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "[dataset]\nsource = \"phantoms\"\nn = 2\nseed = 0\nmodalities = [\"xray-like\"]\nbogus = 1\n[scorer]\nkind = \"synthetic\"\nseed = 1\n");
    assert_eq!(code(&run(&["attack", "--config", bad.to_str().unwrap()])), 2);
    let out_dir = dir.path().join("o");
    assert_eq!(code(&run(&["attack", "--tau", "1.5", "--out", out_dir.to_str().unwrap()])), 2);
    assert_eq!(code(&run(&["attack", "--families", "A,X", "--out", out_dir.to_str().unwrap()])), 2);
    assert_eq!(code(&run(&["repair-train", "--out", out_dir.to_str().unwrap()])), 2);
    assert_eq!(code(&run(&["serve-scorer"])), 2);
}

#[test]
fn unreachable_scorer_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let cfg = write_config(
        dir.path(),
        &format!(
            "out = {:?}\n[dataset]\nsource = \"phantoms\"\nn = 2\nseed = 0\nmodalities = [\"xray-like\"]\n\
             [scorer]\nkind = \"external\"\nendpoint = {{ tcp = \"{addr}\" }}\n",
            dir.path().join("archive")
        ),
    );
    let out = run(&["attack", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn loopback_margins_match_in_process() {
    let remote = ExternalScorer::connect(Endpoint::Command(vec![bin().into(), "serve-scorer".into(), "--stdio".into()])).unwrap();
    let local = synthetic_scorer(2024, 64).unwrap();
    assert_eq!(remote.name(), local.name());
    assert_eq!(remote.dim(), local.dim());
    let prompts = local.default_prompts(Modality::XrayLike).unwrap();
    let a = ZeroShotClassifier::from_prompts(&local, &prompts).unwrap();
    let b = ZeroShotClassifier::from_prompts(&remote, &prompts).unwrap();
    let mut worst: f64 = 0.0;
    for p in gen_phantoms(20, 5, Modality::XrayLike).unwrap() {
        worst = worst.max((a.margin(&p.image).unwrap() - b.margin(&p.image).unwrap()).abs());
    }
    assert!(worst <= 1e-5, "max margin difference {worst}");
}

#[test]
fn repair_train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let archive = dir.path().join("archive");
    let cfg = write_config(
        dir.path(),
        &format!(
            "out = {:?}\n[dataset]\nsource = \"phantoms\"\nn = 4\nseed = 2\nmodalities = [\"xray-like\"]\n\
             [scorer]\nkind = \"student\"\nseed = 7\n[attack]\ntaus = [0.8]\noptimizer = \"random\"\nbudget = 3\n\
             families = [\"A\"]\n[repair]\nepochs = 3\ntrain_n = 8\n",
            archive
        ),
    );
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&run(&["attack", "--config", c])), 0);
    let out = run(&["repair-train", "--config", c]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let adapter = archive.join("adapter.codaw");
    assert!(fs::read(&adapter).unwrap().starts_with(b"CODAW1"));
    let eval_out = dir.path().join("eval");
    let out = run(&[
        "repair-eval",
        "--config",
        c,
        "--archive",
        archive.to_str().unwrap(),
        "--adapter",
        adapter.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(eval_out.join("repair.csv")).unwrap();
    assert!(csv.lines().last().unwrap().starts_with("all,4,"), "{csv}");
}
