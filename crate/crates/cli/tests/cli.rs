use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use coea_core::ingest::UserId;
use coea_core::pipeline::{GroupSet, PreparedData};
use coea_core::quantizer::GroupCsid;
use coea_core::store::{make_key, CategoryStore};

const TINY: &str = r#"
seed = 7

[ingest]
source = "synthetic"
format = "tsv"
tau = 1
split_policy = { day_boundaries = [20, 23] }

[synthetic]
users = 60
items = 200
categories = 12
groups = 3
core_per_group = 3
latent_per_group = 2
events_per_user = 30

[encoder]
d = 8
layers = 1
heads = 2
max_len = 12

[encoder_train]
steps = 5

[rqvae]
latent_dim = 4
hidden = 8
levels = 2
codebook_size = 4
steps = 20

[bootstrap]
sft_epochs = 5
rm_epochs = 5

[eval]
similarity_subset = 3
"#;

fn coea(dir: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coea"))
        .arg("--config")
        .arg(config)
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_one() {
    let o = Command::new(env!("CARGO_BIN_EXE_coea")).arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_coea")).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("pco-run"));
}

#[test]
fn unknown_config_keys_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[encoder]\nwidth = 3\n").unwrap();
    let o = coea(&tmp.path().join("run"), &cfg, &["ingest"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("width"), "{}", stderr(&o));
}

#[test]
fn missing_artifact_names_the_producing_verb() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let o = coea(&tmp.path().join("run"), &cfg, &["train-encoder"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run `ingest` first"), "{}", stderr(&o));
}

#[test]
fn malformed_input_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    fs::create_dir_all(&data).unwrap();
    fs::write(data.join("ratings.dat"), "1::10::5::978300760\n1::oops::5::978300761\n").unwrap();
    fs::write(data.join("movies.dat"), "10::Heat (1995)::Action|Crime\n").unwrap();
    let cfg = tmp.path().join("files.toml");
    fs::write(&cfg, format!("[ingest]\ndata_dir = {:?}\n", data.display().to_string())).unwrap();
    let o = coea(&tmp.path().join("run"), &cfg, &["ingest"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn unreachable_backend_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = tiny_config(tmp.path());
    for verb in ["ingest", "train-encoder", "train-rqvae", "group"] {
        assert!(coea(&run, &cfg, &[verb]).status.success(), "{verb}");
    }
    let http = tmp.path().join("http.toml");
    fs::write(
        &http,
        format!(
            "{TINY}\n[gateway]\nbackend = \"http\"\nendpoint = \"http://127.0.0.1:9/v1/chat/completions\"\nretries = 0\ntimeout_secs = 2.0\n"
        ),
    )
    .unwrap();
    let o = coea(&run, &http, &["profile"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn locked_run_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    fs::create_dir_all(&run).unwrap();
    fs::write(run.join(".coea.lock"), "").unwrap();
    let o = coea(&run, &tiny_config(tmp.path()), &["ingest"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("locked"));
}

#[test]
fn verbs_chain_and_rerun_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = tiny_config(tmp.path());
    let verbs = ["ingest", "train-encoder", "train-rqvae", "group", "profile", "bootstrap", "pco-run"];
    for verb in verbs {
        let o = coea(&run, &cfg, &[verb]);
        assert!(o.status.success(), "{verb}: {}", stderr(&o));
    }
    let o = coea(&run, &cfg, &["eval", "--k", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(run.join("eval/metrics.csv")).unwrap();
    for metric in ["C-H,5,", "C-N,5,", "NCP,5,", "CLTP,5,"] {
        assert!(csv.contains(metric), "{csv}");
    }
    let manifest = fs::read(run.join("manifest.json")).unwrap();
    for verb in verbs {
        assert!(coea(&run, &cfg, &[verb]).status.success());
    }
    assert!(coea(&run, &cfg, &["eval", "--k", "5"]).status.success());
    assert_eq!(fs::read(run.join("manifest.json")).unwrap(), manifest);
    assert_eq!(fs::read_to_string(run.join("eval/metrics.csv")).unwrap(), csv);
    assert!(!run.join(".coea.lock").exists());

    let export = coea(&run, &cfg, &["export"]);
    assert!(stdout(&export).starts_with("key\tcycle\tcategories\n"));
    let o = coea(&run, &cfg, &["compact"]);
    assert!(o.status.success());
}

#[test]
fn cold_start_query_uses_the_default_group() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = tiny_config(tmp.path());
    assert!(coea(&run, &cfg, &["run"]).status.success());
    let groups: GroupSet = serde_json::from_slice(&fs::read(run.join("groups/groups.json")).unwrap()).unwrap();
    let assignments: BTreeMap<UserId, GroupCsid> =
        serde_json::from_slice(&fs::read(run.join("rqvae/assignments.json")).unwrap()).unwrap();
    let prepared: PreparedData = serde_json::from_slice(&fs::read(run.join("ingest/prepared.json")).unwrap()).unwrap();
    let store = CategoryStore::open(&run.join("store")).unwrap();
    let default = &groups.default_csid;

    // Borrow the window of a default-group member whose key is stored.
    let member = prepared
        .users
        .iter()
        .find(|u| {
            assignments.get(&u.user_id) == Some(default)
                && store.get(&make_key(default, &u.short_categories)).is_some()
        })
        .expect("a stored member of the default group");
    let cats = member.short_categories.join(",");

    let o = coea(&run, &cfg, &["query", "--user", "no-such-user", "--categories", &cats]);
    assert!(o.status.success(), "{}", stderr(&o));
    let q: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(q["csid"].is_null());
    assert_eq!(q["used_default"], true);
    assert_eq!(q["key"].as_str().unwrap(), make_key(default, &member.short_categories).to_string());
    assert!(q["record"].is_object(), "{q}");
}

#[test]
fn desk_pipeline_is_reproducible_across_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let manifests: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let run = tmp.path().join(name);
            let o = Command::new(env!("CARGO_BIN_EXE_coea"))
                .args(["--preset", "desk", "--seed", "7", "--out-dir"])
                .arg(&run)
                .arg("run")
                .env("RUST_LOG", "warn")
                .output()
                .unwrap();
            assert!(o.status.success(), "{}", stderr(&o));
            fs::read(run.join("manifest.json")).unwrap()
        })
        .collect();
    assert_eq!(manifests[0], manifests[1]);
}
