use std::fs;
use std::hash::{BuildHasher, Hasher};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use atlas_core::canonical::canonical_bytes;
use atlas_core::crypto::{generate_identity, PublicKey};
use atlas_core::digest::Digest;
use atlas_core::http::{HttpLogClient, LogServer, ServiceState};
use atlas_core::log::{walk_chain, AdmissionError, LogEntry, LogError, LogReader, LogWriter, SignedRoot, Submission};
use atlas_core::merkle::verify_consistency;
use atlas_core::model::{measure_file, ArtifactMeasurement, ArtifactRole, GoldenValue, MonitorEvent};
use atlas_core::monitor::{Finalized, Monitor, MonitorConfig};
use atlas_core::scenario::StageRun;
use atlas_core::time::SystemClock;
use atlas_core::value::Value;
use atlas_core::verifier::{Expectation, Subject, Verifier, VerifyRequest};
use serde::Serialize;

use crate::home::{self, Home};
use crate::{output, Format, Refused, Usage};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse_role(s: &str) -> Result<ArtifactRole> {
    s.parse().map_err(usage)
}

fn parse_digest(s: &str) -> Result<Digest> {
    s.parse().map_err(|e| usage(format!("digest `{s}`: {e}")))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_canonical<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = canonical_bytes(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Submits, treating "already logged" as success.
fn submit_idempotent(log: &dyn LogWriter, entry: LogEntry) -> Result<Option<Submission>> {
    match log.submit(entry) {
        Ok(s) => Ok(Some(s)),
        Err(LogError::Rejected(AdmissionError::Duplicate(_))) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn wait_for_interrupt() -> Result<()> {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()?
        .block_on(tokio::signal::ctrl_c())
        .context("waiting for Ctrl-C")
}

pub fn keygen(out: &Path, force: bool, fmt: Format) -> Result<bool> {
    let public = PathBuf::from(format!("{}.pub", out.display()));
    if !force && (out.exists() || public.exists()) {
        return Err(usage(format!("{} exists; pass --force to overwrite", out.display())));
    }
    let id = generate_identity()?;
    fs::write(out, id.to_private_pem()).with_context(|| format!("writing {}", out.display()))?;
    fs::write(&public, id.to_public_pem()).with_context(|| format!("writing {}", public.display()))?;
    #[derive(Serialize)]
    struct Out<'a> {
        key_id: String,
        private: &'a Path,
        public: &'a Path,
    }
    match fmt {
        Format::Json => output::json(&Out { key_id: id.key_id().to_string(), private: out, public: &public })?,
        Format::Text => println!("{}  {}  {}", id.key_id(), out.display(), public.display()),
    }
    Ok(true)
}

pub fn provision(dir: &Path, seed: Option<u64>, log_url: Option<&str>, fmt: Format) -> Result<bool> {
    let seed = match seed {
        Some(s) => s,
        None => match Home::load(dir) {
            Ok(h) => h.config.seed,
            Err(_) => std::collections::hash_map::RandomState::new().build_hasher().finish(),
        },
    };
    let log_key = match log_url {
        Some(url) => Some(HttpLogClient::new(url).log_public_key()?),
        None => None,
    };
    let (home, changed) = home::provision(dir, seed, log_key)?;
    let dep = home.deployment()?;
    #[derive(Serialize)]
    struct Out {
        home: String,
        seed: u64,
        producer: String,
        platform: String,
        log_key: Option<PublicKey>,
        changed: bool,
    }
    let out = Out {
        home: dir.display().to_string(),
        seed,
        producer: dep.producer.key_id().to_string(),
        platform: dep.platform.key_id().to_string(),
        log_key: home.config.log_key,
        changed,
    };
    match fmt {
        Format::Json => output::json(&out)?,
        Format::Text => {
            println!("home      {}", out.home);
            println!("producer  {}", out.producer);
            println!("platform  {}", out.platform);
            if let Some(k) = out.log_key {
                println!("log key   {}", k.key_id());
            }
        }
    }
    Ok(true)
}

pub fn measure_cmd_output(m: &ArtifactMeasurement, fmt: Format) -> Result<()> {
    match fmt {
        Format::Json => output::json(m),
        Format::Text => {
            println!("{}  size {}  {}", m.digest, m.size_bytes, m.artifact_id);
            Ok(())
        }
    }
}

pub fn measure(
    file: &Path,
    role: &str,
    id: Option<String>,
    publish: Option<(&Path, &str)>,
    fmt: Format,
) -> Result<bool> {
    let role = parse_role(role)?;
    let m = match id {
        Some(id) => {
            let f = fs::File::open(file).with_context(|| format!("opening {}", file.display()))?;
            atlas_core::model::measure(std::io::BufReader::new(f), &id, role)?
        }
        None => measure_file(file, role)?,
    };
    measure_cmd_output(&m, fmt)?;
    if let Some((home, url)) = publish {
        let dep = Home::load(home)?.deployment()?;
        let g = GoldenValue::issue(m, &dep.producer, dep.clock.now());
        match submit_idempotent(&HttpLogClient::new(url), LogEntry::GoldenValue(g))? {
            Some(s) => log::info!("golden value logged at tree {} leaf {}", s.tree_id, s.leaf_index),
            None => log::info!("golden value already logged"),
        }
    }
    Ok(true)
}

pub struct AttestArgs {
    pub name: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub output_role: String,
    pub precursors: Vec<String>,
    pub events: Option<PathBuf>,
    pub params: Vec<String>,
    pub out: PathBuf,
}

pub fn attest(home: &Path, args: AttestArgs, fmt: Format) -> Result<bool> {
    let dep = Home::load(home)?.deployment()?;
    let out_role = parse_role(&args.output_role)?;
    let inputs = args.inputs.iter().map(|p| measure_file(p, ArtifactRole::Dataset)).collect::<Result<Vec<_>, _>>()?;
    let outputs = args.outputs.iter().map(|p| measure_file(p, out_role)).collect::<Result<Vec<_>, _>>()?;
    let precursors = args.precursors.iter().map(|s| parse_digest(s)).collect::<Result<Vec<_>>>()?;
    let events: Vec<MonitorEvent> = match &args.events {
        Some(p) => read_json(p)?,
        None => Vec::new(),
    };
    let mut parameters = Value::map();
    for kv in &args.params {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--param `{kv}` is not key=value")))?;
        let json = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_owned()));
        parameters = parameters.with(k, Value::from_json(json));
    }
    if parameters.has_non_finite() {
        return Err(usage("parameters must be finite"));
    }

    // same inputs, same manifest id
    let fingerprint =
        Digest::of(&canonical_bytes(&(&args.name, &inputs, &outputs, &precursors, &parameters, &events))?);
    let mut seed = [0u8; 8];
    seed.copy_from_slice(&fingerprint.0[..8]);
    dep.client.reseed_ids(u64::from_le_bytes(seed));

    let finalized =
        dep.finalize_stage(StageRun { name: args.name, parameters, inputs, outputs, precursors, events })?;
    write_canonical(&args.out, &finalized)?;
    #[derive(Serialize)]
    struct Out<'a> {
        attestation: Digest,
        manifest: &'a Path,
        manifest_id: &'a str,
    }
    let out = Out {
        attestation: finalized.digest(),
        manifest: &args.out,
        manifest_id: &finalized.attestation.claim.manifest_id,
    };
    match fmt {
        Format::Json => output::json(&out)?,
        Format::Text => println!("{}  {}", out.attestation, args.out.display()),
    }
    Ok(true)
}

pub fn submit(manifest: &Path, url: &str, home: &Path, publish_outputs: bool, seal: bool, fmt: Format) -> Result<bool> {
    let f: Finalized = read_json(manifest)?;
    let client = HttpLogClient::new(url);
    submit_idempotent(&client, LogEntry::PipelineMetadata(f.metadata.clone()))?;
    let sub = match client.submit(LogEntry::Attestation(f.attestation.clone())) {
        Ok(s) => s,
        Err(LogError::Rejected(e)) => return Err(Refused(format!("rejected: {e}")).into()),
        Err(e) => return Err(e.into()),
    };
    if publish_outputs {
        let dep = Home::load(home)?.deployment()?;
        for m in &f.attestation.claim.outputs {
            let g = GoldenValue::issue(m.clone(), &dep.producer, dep.clock.now());
            submit_idempotent(&client, LogEntry::GoldenValue(g))?;
        }
    }
    let sealed = if seal { Some(client.seal_and_chain()?.0) } else { None };
    #[derive(Serialize)]
    struct Out<'a> {
        submission: &'a Submission,
        sealed: Option<SignedRoot>,
    }
    match fmt {
        Format::Json => output::json(&Out { submission: &sub, sealed: sealed.clone() })?,
        Format::Text => {
            println!("{}  tree {} leaf {}", sub.digest, sub.tree_id, sub.leaf_index);
            println!("root {}  size {}", sub.signed_root.root, sub.signed_root.tree_size);
            if let Some(s) = sealed {
                println!("sealed tree {} at size {}", s.tree_id, s.tree_size);
            }
        }
    }
    Ok(true)
}

pub struct VerifyArgs {
    pub artifact: Option<PathBuf>,
    pub digest: Option<String>,
    pub expect: Option<PathBuf>,
    pub log_url: String,
    pub home: PathBuf,
    pub log_key: Option<PathBuf>,
    pub remote: bool,
}

pub fn verify(args: VerifyArgs, fmt: Format) -> Result<bool> {
    let measured = match (&args.artifact, &args.digest) {
        (Some(p), _) => measure_file(p, ArtifactRole::ModelWeights)?.digest,
        (None, Some(d)) => parse_digest(d)?,
        (None, None) => return Err(usage("one of --artifact, --digest is required")),
    };
    let expectation: Expectation = match &args.expect {
        Some(p) => {
            let mut v: serde_json::Value = read_json(p)?;
            if let Some(obj) = v.as_object_mut() {
                obj.entry("artifact_digest").or_insert_with(|| serde_json::Value::String(measured.to_string()));
            }
            serde_json::from_value(v).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => Expectation::for_digest(measured),
    };
    let client = HttpLogClient::new(&args.log_url);
    let subject = Subject::Digest(measured);
    let report = if args.remote {
        client.verify(&VerifyRequest { subject, expectation })?
    } else {
        let trust = Home::load(&args.home)?.trust(&client, args.log_key.as_deref())?;
        Verifier::new(trust).verify_artifact(&subject, &expectation, &client, None)
    };
    output::report(&report, fmt)?;
    Ok(report.passed())
}

#[derive(Serialize)]
struct AuditTree {
    tree_id: u64,
    tree_size: u64,
    root: Digest,
    /// Size recorded in the checkpoint this tree was proven consistent with.
    checkpoint_size: Option<u64>,
}

pub fn audit(url: &str, home: &Path, log_key: Option<&Path>, checkpoint: Option<&Path>, fmt: Format) -> Result<bool> {
    let client = HttpLogClient::new(url);
    let stored = Home::load(home).ok().and_then(|h| h.config.log_key);
    let key = home::resolve_log_key(stored, &client, log_key)?;
    let roots = client.signed_roots()?;
    let mut problems = Vec::new();
    if let Err(e) = walk_chain(&client, &key, &roots) {
        problems.push(e.to_string());
    }

    let previous: Vec<SignedRoot> = match checkpoint {
        Some(p) if p.exists() => read_json(p)?,
        _ => Vec::new(),
    };
    let mut trees: Vec<AuditTree> = roots
        .iter()
        .map(|r| AuditTree { tree_id: r.tree_id, tree_size: r.tree_size, root: r.root, checkpoint_size: None })
        .collect();
    for old in &previous {
        let t = old.tree_id;
        if !old.verify(&key) {
            problems.push(format!("checkpoint root of tree {t} is not signed by the log key"));
            continue;
        }
        let Some(now) = roots.get(t as usize) else {
            problems.push(format!("tree {t} from the checkpoint is gone"));
            continue;
        };
        let consistent = if old.tree_size > now.tree_size {
            Err(format!("shrank from {} to {}", old.tree_size, now.tree_size))
        } else if old.tree_size == now.tree_size {
            if old.root == now.root {
                Ok(())
            } else {
                Err("same size, different root".to_owned())
            }
        } else if old.tree_size == 0 {
            Ok(())
        } else {
            client
                .consistency_proof(t, old.tree_size, now.tree_size)
                .map_err(|e| e.to_string())
                .and_then(|p| verify_consistency(&p, &old.root, &now.root).map_err(|e| e.to_string()))
        };
        match consistent {
            Ok(()) => trees[t as usize].checkpoint_size = Some(old.tree_size),
            Err(e) => problems.push(format!("tree {t} inconsistent with checkpoint: {e}")),
        }
    }

    if problems.is_empty() {
        if let Some(p) = checkpoint {
            write_canonical(p, &roots)?;
        }
    }
    match fmt {
        Format::Json => {
            #[derive(Serialize)]
            struct Out<'a> {
                ok: bool,
                trees: &'a [AuditTree],
                problems: &'a [String],
            }
            output::json(&Out { ok: problems.is_empty(), trees: &trees, problems: &problems })?;
        }
        Format::Text => {
            for t in &trees {
                let cp = t.checkpoint_size.map(|s| format!("  consistent since size {s}")).unwrap_or_default();
                println!("tree {}  size {}  {}{cp}", t.tree_id, t.tree_size, t.root);
            }
            for p in &problems {
                println!("FAIL  {p}");
            }
            if problems.is_empty() {
                println!("OK  {} trees chained", trees.len());
            }
        }
    }
    Ok(problems.is_empty())
}

pub fn monitor(
    dir: Option<PathBuf>,
    socket: Option<PathBuf>,
    out: &Path,
    duration: Option<f64>,
    debounce_ms: u64,
    fmt: Format,
) -> Result<bool> {
    if dir.is_none() && socket.is_none() {
        return Err(usage("nothing to monitor: pass --dir and/or --socket"));
    }
    if let Some(d) = &dir {
        if !d.is_dir() {
            return Err(usage(format!("{} is not a directory", d.display())));
        }
    }
    let config = MonitorConfig {
        checkpoint_dir: dir,
        socket: socket.clone(),
        debounce: Duration::from_millis(debounce_ms),
        ..Default::default()
    };
    let m = Monitor::start(&config, Arc::new(SystemClock))?;
    if let Some(s) = &socket {
        eprintln!("bridge listening on {}", s.display());
    }
    match duration {
        Some(secs) if secs.is_finite() && secs >= 0.0 => std::thread::sleep(Duration::from_secs_f64(secs)),
        Some(_) => bail!(Usage("--duration must be a non-negative number".into())),
        None => wait_for_interrupt()?,
    }
    let drained = m.finish();
    write_canonical(out, &drained.events)?;
    #[derive(Serialize)]
    struct Out<'a> {
        events: usize,
        acked_frames: u64,
        out: &'a Path,
    }
    let o = Out { events: drained.events.len(), acked_frames: drained.acked_frames, out };
    match fmt {
        Format::Json => output::json(&o)?,
        Format::Text => {
            println!("{} events ({} bridge frames acknowledged)  {}", o.events, o.acked_frames, out.display())
        }
    }
    Ok(true)
}

pub fn serve_log(log_dir: &Path, listen: SocketAddr, home: &Path) -> Result<bool> {
    let dep = Home::load(home)?.deployment_with_log(log_dir)?;
    let key = dep.log.read().public_key();
    let state = ServiceState::with_verifier(dep.log.clone(), dep.verifier());
    let server = LogServer::spawn(listen, state).with_context(|| format!("binding {listen}"))?;
    eprintln!("log {} serving {} on {}", key.key_id(), log_dir.display(), server.url());
    wait_for_interrupt()?;
    server.stop();
    Ok(true)
}
