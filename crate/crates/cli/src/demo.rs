//! The end-to-end walk-through: provision a deployment, serve its log over
//! HTTP, run a synthetic pipeline whose training stage is monitored through
//! the bridge, attest and log every stage, seal the run, verify the final
//! model, then inject attacks and check each is caught by the right check.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use atlas_core::digest::Digest;
use atlas_core::http::{HttpLogClient, LogServer, ServiceState};
use atlas_core::scenario::attacks::{expectation_for, prepare, prepare_random, run_prepared, Attack, MutationField};
use atlas_core::scenario::training::TrainingSpec;
use atlas_core::scenario::{build_chain, extend_chain_monitored, Deployment};
use atlas_core::verifier::{Subject, VerificationCache, VerificationReport};
use serde::Serialize;

use crate::{output, Format, Usage};

const ARTIFACT_SIZE: usize = 4096;

pub struct DemoArgs {
    pub seed: u64,
    pub artifacts: usize,
    pub injections: usize,
    pub work_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct StageLine {
    pub stage: String,
    pub attestation: Digest,
    pub artifact: String,
    pub digest: Digest,
}

#[derive(Debug, Serialize)]
pub struct AttackLine {
    pub attack: &'static str,
    pub target: String,
    pub expected_check: &'static str,
    pub first_failure: Option<String>,
    pub detected: bool,
}

#[derive(Debug, Default, Serialize)]
pub struct Tally {
    pub total: usize,
    pub detected: usize,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub log_url: String,
    pub lineage: Vec<StageLine>,
    pub verdict: String,
    pub chain_length: usize,
    pub monitor_events: usize,
    pub acked_frames: u64,
    pub checkpoints: usize,
    pub attacks: Vec<AttackLine>,
    pub injections: Tally,
    pub injections_by_kind: BTreeMap<&'static str, Tally>,
    pub verify_cold_ms: f64,
    pub verify_warm_ms: f64,
    pub elapsed_ms: f64,
    pub ok: bool,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn target(a: &Attack) -> String {
    match a {
        Attack::ByteFlip { artifact, bit } => format!("artifact {artifact} bit {bit}"),
        Attack::AttestationMutation { hop, field, bit } => format!("hop {hop} {field:?} bit {bit}"),
        Attack::StageOmission { stage } => format!("skip stage {stage}"),
        Attack::StageReorder { stage } => format!("swap stages {stage},{}", stage + 1),
    }
}

pub fn execute(args: &DemoArgs) -> Result<Summary> {
    if args.artifacts < 3 {
        bail!(Usage("--artifacts must be at least 3".into()));
    }
    let started = Instant::now();
    let scratch;
    let work = match &args.work_dir {
        Some(d) => {
            std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
            d.clone()
        }
        None => {
            scratch = tempfile::tempdir()?;
            scratch.path().to_path_buf()
        }
    };
    let ckpt = work.join("checkpoints");
    std::fs::create_dir_all(&ckpt)?;
    let socket = work.join("bridge.sock");

    // 1. provisioning; 2. the log service
    let dep = Deployment::new(args.seed)?;
    let server = LogServer::spawn("127.0.0.1:0".parse()?, ServiceState::new(dep.log.clone()))?;
    let client = HttpLogClient::new(&server.url());
    let verifier = dep.verifier();

    // 3-4. the pipeline: preprocessing stages, then monitored training
    let mut chain = build_chain(&dep, "demo", args.artifacts - 1, ARTIFACT_SIZE, |_| Vec::new())?;
    let spec = TrainingSpec { checkpoint_dir: Some(ckpt), ..TrainingSpec::twenty_events(args.seed) };
    let trained = extend_chain_monitored(&dep, &mut chain, "train", &spec, &socket, Duration::from_millis(20))?;
    // 5. end of run
    dep.seal()?;

    // 6. verification of the deployed model
    let n = chain.len();
    let subject = Subject::Bytes(chain.final_artifact().bytes.clone());
    let expectation = expectation_for(&chain, n);
    let cache = VerificationCache::new();
    let cold: VerificationReport = verifier.verify_artifact(&subject, &expectation, &client, Some(&cache));
    let warm = verifier.verify_artifact(&subject, &expectation, &client, Some(&cache));

    let lineage = chain
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| StageLine {
            stage: s.clone(),
            attestation: chain.attestations[i],
            artifact: chain.artifacts[i + 1].measurement.artifact_id.clone(),
            digest: chain.artifacts[i + 1].digest(),
        })
        .collect();

    let named = [
        Attack::ByteFlip { artifact: n, bit: 7 },
        Attack::AttestationMutation { hop: n / 2, field: MutationField::ALL[0], bit: 3 },
        Attack::StageOmission { stage: n / 2 },
        Attack::StageReorder { stage: n / 3 },
    ];
    let mut attacks = Vec::new();
    for (i, a) in named.iter().enumerate() {
        let p = prepare(&dep, &chain, a, 10_000 + i)?;
        let o = run_prepared(&verifier, &client, std::slice::from_ref(&p), None).remove(0);
        attacks.push(AttackLine {
            attack: a.label(),
            target: target(a),
            expected_check: a.expected_check(),
            first_failure: o.first_failure().map(str::to_owned),
            detected: o.detected(),
        });
    }

    let prepared = prepare_random(&dep, &chain, args.injections, args.seed ^ 0x5eed)?;
    let outcomes = run_prepared(&verifier, &client, &prepared, None);
    let mut injections = Tally::default();
    let mut by_kind: BTreeMap<&'static str, Tally> = BTreeMap::new();
    for o in &outcomes {
        let t = by_kind.entry(o.attack.label()).or_default();
        t.total += 1;
        injections.total += 1;
        if o.detected() {
            t.detected += 1;
            injections.detected += 1;
        }
    }

    let ok = cold.passed()
        && cold.chain_length == n
        && warm.outcome() == cold.outcome()
        && attacks.iter().all(|a| a.detected)
        && injections.detected == injections.total;
    server.stop();
    Ok(Summary {
        seed: args.seed,
        log_url: client.base_url().to_owned(),
        lineage,
        verdict: if cold.passed() { "pass".into() } else { "fail".into() },
        chain_length: cold.chain_length,
        monitor_events: trained.drained.events.len(),
        acked_frames: trained.drained.acked_frames,
        checkpoints: trained.outcome.checkpoints.len(),
        attacks,
        injections,
        injections_by_kind: by_kind,
        verify_cold_ms: ms(cold.elapsed),
        verify_warm_ms: ms(warm.elapsed),
        elapsed_ms: ms(started.elapsed()),
        ok,
    })
}

fn print_text(s: &Summary) {
    println!("provenance chain: {} artifacts (log {})", s.lineage.len(), s.log_url);
    for (i, l) in s.lineage.iter().enumerate() {
        println!("  {:>3}  {:<14} {}  ->  {}  {}", i + 1, l.stage, l.attestation, l.artifact, l.digest);
    }
    println!(
        "training monitor: {} events, {} bridge frames acknowledged, {} checkpoints",
        s.monitor_events, s.acked_frames, s.checkpoints
    );
    println!(
        "verify: {}  chain_length {}  cold {:.1} ms  warm {:.1} ms",
        s.verdict.to_uppercase(),
        s.chain_length,
        s.verify_cold_ms,
        s.verify_warm_ms
    );
    for a in &s.attacks {
        println!(
            "attack {:<22} {:<24} -> fail {:<12} {}",
            a.attack,
            a.target,
            a.first_failure.as_deref().unwrap_or("-"),
            if a.detected { "detected" } else { "MISSED" }
        );
    }
    let kinds: Vec<String> =
        s.injections_by_kind.iter().map(|(k, t)| format!("{k} {}/{}", t.detected, t.total)).collect();
    println!("injections: {}/{} detected ({})", s.injections.detected, s.injections.total, kinds.join(", "));
    println!("{}  {:.0} ms", if s.ok { "OK" } else { "FAILED" }, s.elapsed_ms);
}

pub fn run(args: DemoArgs, fmt: Format) -> Result<bool> {
    let s = execute(&args)?;
    match fmt {
        Format::Json => output::json(&s)?,
        Format::Text => print_text(&s),
    }
    Ok(s.ok)
}
