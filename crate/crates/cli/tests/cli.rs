use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_atlas");

fn atlas(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("ATLAS_LOG_URL").env_remove("ATLAS_HOME").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn measure_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.bin");
    std::fs::write(&empty, b"").unwrap();
    let o = atlas(&["measure", s(&empty)]);
    assert!(o.status.success());
    let line = stdout(&o);
    assert!(
        line.starts_with("sha256:e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855  size 0"),
        "{line}"
    );

    let o = atlas(&["measure", s(&empty), "--format", "json", "--id", "x"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["size_bytes"], 0);
    assert_eq!(v["artifact_id"], "x");
}

#[test]
fn usage_and_io_errors_have_their_exit_codes() {
    assert_eq!(atlas(&["measure"]).status.code(), Some(2));
    assert_eq!(atlas(&["measure", "x", "--role", "bogus"]).status.code(), Some(2));
    assert_eq!(atlas(&["measure", "/nonexistent/file"]).status.code(), Some(3));
    let dir = tempfile::tempdir().unwrap();
    let home = dir.path().join("unprovisioned");
    assert_eq!(
        atlas(&["attest", "--home", s(&home), "--name", "a", "--output", "x", "--out", "m.json"]).status.code(),
        Some(2)
    );
    let o = atlas(&["audit", "--log", "http://127.0.0.1:9", "--home", s(&home)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn demo_exits_zero() {
    let o = atlas(&["demo", "--injections", "12", "--format", "json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["verdict"], "pass");
    assert_eq!(v["chain_length"], 20);
    assert_eq!(v["lineage"].as_array().unwrap().len(), 20);
    assert_eq!(v["injections"]["detected"], 12);
    assert_eq!(v["ok"], true);
}

struct LogService {
    child: Child,
    url: String,
}

impl LogService {
    fn start(home: &Path, log_dir: &Path) -> Self {
        let mut child = Command::new(BIN)
            .args(["serve-log", "--listen", "127.0.0.1:0", "--home", s(home), "--log-dir", s(log_dir)])
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stderr.as_mut().unwrap()).read_line(&mut line).unwrap();
        let url = line.trim().rsplit(' ').next().unwrap().to_owned();
        assert!(url.starts_with("http://"), "{line}");
        LogService { child, url }
    }
}

impl Drop for LogService {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn workflow_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let home = d.join("home");
    let log_dir = d.join("log");
    assert!(atlas(&["provision", "--home", s(&home), "--seed", "11"]).status.success());
    let svc = LogService::start(&home, &log_dir);
    let log = svc.url.as_str();
    // pin the log key
    assert!(atlas(&["provision", "--home", s(&home), "--log", log]).status.success());
    let cfg: serde_json::Value = serde_json::from_slice(&std::fs::read(home.join("deployment.json")).unwrap()).unwrap();
    assert!(cfg["log_key"].is_string());

    // source data with a golden value
    let data = write(d, "data.bin", b"training corpus v1");
    let o = atlas(&["measure", s(&data), "--publish", "--home", s(&home), "--log", log]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    // stage 1: preprocess
    let clean = write(d, "clean.bin", b"cleaned corpus");
    let m1 = d.join("prep.atlas.json");
    let o = atlas(&[
        "attest",
        "--home",
        s(&home),
        "--name",
        "preprocess",
        "--input",
        s(&data),
        "--output",
        s(&clean),
        "--output-role",
        "dataset",
        "--param",
        "lowercase=true",
        "--out",
        s(&m1),
        "--format",
        "json",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a1: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let a1 = a1["attestation"].as_str().unwrap().to_owned();
    // attest is idempotent
    let again = atlas(&[
        "attest",
        "--home",
        s(&home),
        "--name",
        "preprocess",
        "--input",
        s(&data),
        "--output",
        s(&clean),
        "--output-role",
        "dataset",
        "--param",
        "lowercase=true",
        "--out",
        s(&d.join("again.json")),
    ]);
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(d.join("again.json")).unwrap());
    assert!(stdout(&again).starts_with(&a1));
    assert!(atlas(&["submit", s(&m1), "--log", log, "--home", s(&home), "--publish-outputs"]).status.success());
    let dup = atlas(&["submit", s(&m1), "--log", log, "--home", s(&home)]);
    assert_eq!(dup.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&dup.stderr).contains("duplicate"));

    // stage 2: train, with a monitor event record
    let events = d.join("events.json");
    std::fs::write(&events, "[]").unwrap();
    let model = write(d, "model.bin", b"weights after training");
    let m2 = d.join("train.atlas.json");
    let o = atlas(&[
        "attest",
        "--home",
        s(&home),
        "--name",
        "train",
        "--input",
        s(&clean),
        "--output",
        s(&model),
        "--precursor",
        &a1,
        "--events",
        s(&events),
        "--out",
        s(&m2),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = atlas(&["submit", s(&m2), "--log", log, "--home", s(&home), "--publish-outputs", "--seal"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let expect = write(d, "expect.json", br#"{"required_stage_order":["preprocess","train"]}"#);
    let o = atlas(&["verify", "--artifact", s(&model), "--expect", s(&expect), "--log", log, "--home", s(&home)]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("PASS  chain_length 2"));

    let remote = atlas(&["verify", "--artifact", s(&model), "--log", log, "--remote", "--format", "json"]);
    assert_eq!(remote.status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_slice(&remote.stdout).unwrap();
    assert_eq!(r["verdict"], "pass");

    // tampered artifact, expectation naming the original digest
    let model_digest = stdout(&atlas(&["measure", s(&model)])).split_whitespace().next().unwrap().to_owned();
    let pinned = write(d, "pinned.json", format!(r#"{{"artifact_digest":"{model_digest}"}}"#).as_bytes());
    let tampered = write(d, "tampered.bin", b"weights after trainimg");
    let o = atlas(&["verify", "--artifact", s(&tampered), "--expect", s(&pinned), "--log", log, "--home", s(&home)]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.starts_with("FAIL"));
    assert!(text.lines().any(|l| l.contains("fail") && l.contains("golden-value") && l.contains("mismatch")), "{text}");

    // wrong stage order
    let reorder = write(d, "reorder.json", br#"{"required_stage_order":["train","preprocess"]}"#);
    let o = atlas(&["verify", "--artifact", s(&model), "--expect", s(&reorder), "--log", log, "--home", s(&home)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().any(|l| l.contains("fail") && l.contains("stage-order")));

    // audit twice: the second run proves consistency with the first
    let cp = d.join("checkpoint.json");
    let o = atlas(&["audit", "--log", log, "--home", s(&home), "--checkpoint", s(&cp)]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("2 trees chained"));
    let o = atlas(&["audit", "--log", log, "--home", s(&home), "--checkpoint", s(&cp), "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["ok"], true);
    assert!(v["trees"][0]["checkpoint_size"].is_u64());

    // the log survives a restart
    drop(svc);
    let svc = LogService::start(&home, &log_dir);
    let o = atlas(&["verify", "--artifact", s(&model), "--expect", s(&expect), "--log", &svc.url, "--home", s(&home)]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let o = atlas(&["audit", "--log", &svc.url, "--home", s(&home), "--checkpoint", s(&cp)]);
    assert!(o.status.success());
}

#[test]
fn keygen_writes_a_key_pair_once() {
    let dir = tempfile::tempdir().unwrap();
    let key = dir.path().join("id.pem");
    assert!(atlas(&["keygen", "--out", s(&key)]).status.success());
    assert!(std::fs::read_to_string(&key).unwrap().contains("PRIVATE KEY"));
    assert!(std::fs::read_to_string(dir.path().join("id.pem.pub")).unwrap().contains("PUBLIC KEY"));
    assert_eq!(atlas(&["keygen", "--out", s(&key)]).status.code(), Some(2));
}

#[cfg(unix)]
#[test]
fn monitor_records_bridge_events() {
    use std::os::unix::net::UnixStream;
    let dir = tempfile::tempdir().unwrap();
    let sock = dir.path().join("b.sock");
    let out = dir.path().join("events.json");
    let mut child = Command::new(BIN)
        .args(["monitor", "--socket", s(&sock), "--out", s(&out), "--duration", "1.5", "--format", "json"])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.as_mut().unwrap()).read_line(&mut line).unwrap();
    assert!(line.contains("bridge listening"));
    let mut conn = UnixStream::connect(&sock).unwrap();
    let mut reader = BufReader::new(conn.try_clone().unwrap());
    for frame in [
        r#"{"type":"gradient","magnitude":2.5,"norm":"l2","timestamp":"2024-01-01T00:00:01Z"}"#,
        r#"{"type":"layer_activation","layer_id":"fc1","stats":{"mean":0.25,"std":1.0},"timestamp":"2024-01-01T00:00:02Z"}"#,
    ] {
        writeln!(conn, "{frame}").unwrap();
        let mut reply = String::new();
        reader.read_line(&mut reply).unwrap();
        assert!(reply.contains("\"ok\":true"), "{reply}");
    }
    drop(reader);
    drop(conn);
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["events"], 2);
    assert_eq!(summary["acked_frames"], 2);
    let events: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(events.as_array().unwrap().len(), 2);
}
