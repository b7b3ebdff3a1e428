use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use shadowdef::experiment::{Manifest, RunStatus};

const BASE: &str = r#"
attack_rounds = [1, 2]
[training]
rounds = 2
[partition]
client_sizes = [4, 4, 1]
batch_sizes = [2, 2, 1]
[metrics]
reference_epochs = 1
"#;

const ATTACK: &str = r#"
[[attacks]]
kind = "optimization"
iterations = 10
restarts = 1
"#;

const SHADOW: &str = r#"
[defense]
kind = "shadow"
latent_steps = 5
finetune_epochs = 1
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_shadowdef"))
}

fn shadowdef(args: &[&str]) -> Output {
    bin().args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    write_config_with(dir, name, body, "pretrain_steps = 10")
}

fn write_config_with(dir: &Path, name: &str, body: &str, generator: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, format!("{BASE}[generator]\n{generator}\n{body}")).unwrap();
    p
}

fn run(config: &Path, out: &Path) -> Output {
    let o = shadowdef(&["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(
        o.status.success(),
        "run failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn csvs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir.join("metrics"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn data_rows(path: &Path) -> usize {
    csv::Reader::from_path(path).unwrap().records().count()
}

#[test]
fn run_is_reproducible_and_reportable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "none.toml", ATTACK);
    let out = tmp.path().join("run");
    run(&cfg, &out);
    let first_csv = csvs(&out);
    let first_manifest = fs::read(out.join("manifest.json")).unwrap();
    assert_eq!(first_csv.len(), 4);

    let m = manifest(&out);
    assert_eq!(m.status, RunStatus::Complete);
    for f in &m.files {
        assert!(out.join(f).exists(), "{f} listed but missing");
    }
    for f in ["trace/trace.csv", "plots/f1.svg", "plots/rdlv_optimization.svg", "updates/round_001.json", "updates/round_002.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    // 1 attack × 2 scopes × 4 metrics
    assert_eq!(data_rows(&out.join("metrics/leakage.csv")), 8);

    let sheet = image::open(out.join("plots/contact_optimization.png")).unwrap();
    // 2 rounds × 3 clients of 16×16 cells at 4× with 2 px padding
    assert_eq!((sheet.width(), sheet.height()), (3 * 66 + 2, 2 * 66 + 2));

    run(&cfg, &out);
    assert_eq!(csvs(&out), first_csv);
    assert_eq!(fs::read(out.join("manifest.json")).unwrap(), first_manifest);

    for name in first_csv.keys() {
        fs::remove_file(out.join("metrics").join(name)).unwrap();
    }
    let o = shadowdef(&["report", "--run", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(csvs(&out), first_csv);
}

#[test]
fn empty_attack_set_gives_training_outputs_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "plain.toml", "");
    let out = tmp.path().join("run");
    run(&cfg, &out);
    assert!(out.join("plots/f1.svg").exists());
    assert!(out.join("trace/trace.csv").exists());
    assert!(!out.join("metrics/leakage.csv").exists());
    assert!(!out.join("recon").exists());
    let plots: Vec<_> = fs::read_dir(out.join("plots")).unwrap().collect();
    assert_eq!(plots.len(), 1);
    assert_eq!(data_rows(&out.join("trace/trace.csv")), 3);
}

#[test]
fn compare_has_one_row_per_method_and_scope() {
    let tmp = tempfile::tempdir().unwrap();
    let bodies = [
        ("none", ATTACK.to_string()),
        ("dp", format!("{ATTACK}\n[defense]\nkind = \"dp_gradient\"\n")),
        ("shadow", format!("{ATTACK}{SHADOW}")),
    ];
    let mut dirs = Vec::new();
    for (name, body) in &bodies {
        let cfg = write_config(tmp.path(), &format!("{name}.toml"), body);
        let out = tmp.path().join(name);
        run(&cfg, &out);
        dirs.push(out);
    }

    let (a, b) = (manifest(&dirs[0]), manifest(&dirs[1]));
    let differing: Vec<&String> = a
        .section_hashes
        .iter()
        .filter(|(k, v)| b.section_hashes.get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    assert_eq!(differing, ["defense"]);

    let table = tmp.path().join("table.csv");
    let mut args = vec!["compare".to_string()];
    args.extend(dirs.iter().map(|d| d.to_string_lossy().into_owned()));
    args.extend(["--out".into(), table.to_string_lossy().into_owned()]);
    let o = bin().args(&args).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(&table).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 6);
    for scope in ["whole", "target"] {
        let methods: Vec<&str> = rows.iter().filter(|r| &r[2] == scope).map(|r| &r[0]).collect();
        assert_eq!(methods, ["none", "dp_gradient", "shadow"]);
    }
}

#[test]
fn pretrained_checkpoint_and_snapshot_attack() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "shadow.toml", &format!("{ATTACK}{SHADOW}"));
    let ckpt = tmp.path().join("gen.json");
    let o = shadowdef(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ckpt.exists());

    let with_ckpt = write_config_with(
        tmp.path(),
        "ckpt.toml",
        &format!("{ATTACK}{SHADOW}"),
        &format!("checkpoint = {:?}", ckpt.to_str().unwrap()),
    );
    let out = tmp.path().join("run");
    run(&with_ckpt, &out);

    let snap = out.join("updates/round_002.json");
    let att = tmp.path().join("att");
    let o = shadowdef(&[
        "attack",
        "--config",
        cfg.to_str().unwrap(),
        "--update",
        snap.to_str().unwrap(),
        "--out",
        att.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let results: serde_json::Value = serde_json::from_str(&fs::read_to_string(att.join("results.json")).unwrap()).unwrap();
    assert_eq!(results.as_array().unwrap().len(), 3);
}

#[test]
fn failed_run_leaves_a_marker_and_stays_reportable() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no_such_checkpoint.json");
    let cfg = write_config_with(
        tmp.path(),
        "bad.toml",
        &format!("{ATTACK}{SHADOW}"),
        &format!("checkpoint = {:?}", missing.to_str().unwrap()),
    );
    let out = tmp.path().join("run");
    let o = shadowdef(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let m = manifest(&out);
    assert_eq!(m.status, RunStatus::Failed);
    assert!(m.failure.unwrap().contains("no_such_checkpoint"));
    assert!(out.join("gaps.txt").exists());
    let o = shadowdef(&["report", "--run", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn configuration_errors_exit_with_one() {
    let o = shadowdef(&["run", "--config", "missing.file"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.file"));

    let o = shadowdef(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());

    let o = shadowdef(&["run", "--config", "x.toml", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "[training]\nrounds = 2\nunknown_key = 1\n").unwrap();
    let o = shadowdef(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    fs::write(&cfg, "[defense]\nkind = \"soteria\"\n").unwrap();
    let o = shadowdef(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        let c = shadowdef::config::ExperimentConfig::load(&p).unwrap();
        c.validate().unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        for a in &c.attacks {
            if a.kind == shadowdef_core::attacks::AttackKind::ModelBased {
                assert_eq!(a.lr, shadowdef_core::attacks::AttackConfig::model_based().lr);
            }
        }
        n += 1;
    }
    assert!(n >= 3);
}
