//! Artifact verification by provenance-chain traversal.
//!
//! A verification runs in two phases. Discovery walks the precursor graph
//! depth-first from the attestation producing the artifact, fetching each
//! hop and consulting the cache. The cryptographic checks for every hop the
//! cache could not vouch for then run in parallel, and findings are folded
//! into a fixed list of checks in discovery order so the report does not
//! depend on scheduling.

mod batch;
mod cache;
mod report;

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use batch::VerifyRequest;
pub use cache::{CacheCounters, CachedHop, VerificationCache};
pub use report::{check_names, Check, Expectation, Status, Verdict, VerificationReport};

use crate::crypto::{KeyDirectory, PublicKey, QuoteVerdict, QuoteVerifier, TeeQuote, REGISTER_CODE};
use crate::digest::Digest;
use crate::log::{LogEntry, LogError, LogReader, SignedRoot};
use crate::merkle::{leaf_hash, verify_inclusion};
use crate::model::{client_quote_nonce, register_ids, system_quote_nonce, GoldenValue, TransformationAttestation};

/// Keys a verifier trusts out of band.
#[derive(Debug, Clone)]
pub struct TrustAnchors {
    pub log_key: PublicKey,
    pub producers: KeyDirectory,
    pub platforms: QuoteVerifier,
}

/// The artifact under verification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subject {
    Bytes(#[serde(with = "bytes_b64")] Vec<u8>),
    Digest(Digest),
}

impl Subject {
    pub fn measure(&self) -> Digest {
        match self {
            Subject::Bytes(b) => Digest::of(b),
            Subject::Digest(d) => *d,
        }
    }
}

mod bytes_b64 {
    use base64::engine::general_purpose::STANDARD as B64;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        B64.decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone)]
pub struct Verifier {
    trust: TrustAnchors,
}

/// Facts fetched once per verification.
struct Context {
    roots: Vec<SignedRoot>,
    client_goldens: [Vec<GoldenValue>; 2],
    system_goldens: [Vec<GoldenValue>; 2],
}

enum HopSource {
    Cached(CachedHop),
    Fetched { tree_id: u64, leaf_index: u64, attestation: TransformationAttestation },
    Broken(String),
}

struct Hop {
    digest: Digest,
    source: HopSource,
}

impl Hop {
    fn attestation(&self) -> Option<&TransformationAttestation> {
        match &self.source {
            HopSource::Cached(c) => Some(&c.attestation),
            HopSource::Fetched { attestation, .. } => Some(attestation),
            HopSource::Broken(_) => None,
        }
    }

    fn precursors(&self) -> &[Digest] {
        self.attestation().map_or(&[], |a| &a.claim.precursor_hashes)
    }
}

#[derive(Default)]
struct Findings {
    signature: Option<String>,
    lineage: Option<String>,
    quote: Option<String>,
    inclusion: Option<String>,
    code_hash: Option<Digest>,
    verified_under: Option<SignedRoot>,
}

impl Findings {
    fn ok(&self) -> bool {
        self.signature.is_none() && self.lineage.is_none() && self.quote.is_none() && self.inclusion.is_none()
    }
}

struct Discovery {
    /// Hops in depth-first preorder.
    hops: Vec<Hop>,
    /// Hop indices in postorder (precursors before dependents).
    postorder: Vec<usize>,
    cycle: Option<String>,
}

impl Verifier {
    pub fn new(trust: TrustAnchors) -> Self {
        Verifier { trust }
    }

    pub fn trust(&self) -> &TrustAnchors {
        &self.trust
    }

    pub fn verify_artifact(
        &self,
        subject: &Subject,
        expectation: &Expectation,
        reader: &dyn LogReader,
        cache: Option<&VerificationCache>,
    ) -> VerificationReport {
        let started = Instant::now();
        match self.run(subject, expectation, reader, cache) {
            Ok((checks, len)) => VerificationReport::from_checks(checks, len, started.elapsed()),
            Err(e) => VerificationReport::from_checks(
                vec![Check::new(check_names::LOG_AVAILABLE, Err(format!("log-unavailable: {e}")), false)],
                0,
                started.elapsed(),
            ),
        }
    }

    fn context(&self, reader: &dyn LogReader) -> Result<Context, LogError> {
        let roots = reader.signed_roots()?;
        let trusted = |id: &str| -> Result<Vec<GoldenValue>, LogError> {
            Ok(reader.goldens_for_artifact_id(id)?.into_iter().filter(|g| g.verify(&self.trust.producers)).collect())
        };
        Ok(Context {
            client_goldens: [trusted(register_ids::CLIENT_ENVIRONMENT)?, trusted(register_ids::CLIENT_CODE)?],
            system_goldens: [trusted(register_ids::SYSTEM_ENVIRONMENT)?, trusted(register_ids::SYSTEM_CODE)?],
            roots,
        })
    }

    fn run(
        &self,
        subject: &Subject,
        exp: &Expectation,
        reader: &dyn LogReader,
        cache: Option<&VerificationCache>,
    ) -> Result<(Vec<Check>, usize), LogError> {
        let ctx = self.context(reader)?;
        if let Some((i, _)) =
            ctx.roots.iter().enumerate().find(|(i, r)| r.tree_id != *i as u64 || !r.verify(&self.trust.log_key))
        {
            return Ok((
                vec![
                    Check::new(check_names::LOG_AVAILABLE, Ok(format!("{} trees", ctx.roots.len())), false),
                    Check::new(
                        check_names::SIGNATURE,
                        Err(format!("signed root of tree {i} does not verify under the log key")),
                        false,
                    ),
                ],
                0,
            ));
        }
        if let Some(cache) = cache {
            cache.refresh(&ctx.roots, reader)?;
        }

        // golden value for the expected digest
        let goldens = reader.goldens_for_digest(&exp.artifact_digest)?;
        let golden = goldens.iter().find(|g| g.verify(&self.trust.producers));
        let golden_sig: Result<(), String> = match (&golden, goldens.is_empty()) {
            (Some(_), _) | (None, true) => Ok(()),
            (None, false) => {
                Err(format!("golden value for {} is not signed by a trusted producer", exp.artifact_digest))
            }
        };
        let measured = subject.measure();
        let golden_value = match golden {
            None => Err(format!("no trusted golden value published for {}", exp.artifact_digest)),
            Some(_) if measured != exp.artifact_digest => Err(format!(
                "golden-value mismatch: artifact measures {measured}, golden value is {}",
                exp.artifact_digest
            )),
            Some(g) => Ok(format!("artifact matches golden value {}", g.measurement.artifact_id)),
        };

        // lineage discovery
        let producing = reader.attestations_producing(&exp.artifact_digest)?;
        let Some(root) = producing.last().copied() else {
            let checks = self.fold(
                exp,
                &ctx,
                golden_sig,
                golden_value,
                None,
                &[],
                Some("no attestation produces this artifact".into()),
            );
            return Ok((checks, 0));
        };
        let discovery = self.discover(root, reader, cache)?;

        let findings: Vec<Findings> = discovery
            .hops
            .par_iter()
            .map(|hop| match &hop.source {
                HopSource::Cached(c) => Ok(Findings { code_hash: c.code_hash, ..Findings::default() }),
                HopSource::Fetched { tree_id, leaf_index, attestation } => {
                    self.verify_hop(hop.digest, *tree_id, *leaf_index, attestation, reader, &ctx)
                }
                HopSource::Broken(reason) => Ok(Findings { lineage: Some(reason.clone()), ..Findings::default() }),
            })
            .collect::<Result<Vec<_>, LogError>>()?;

        let mut root_issue = None;
        if let Some(a) = discovery.hops[0].attestation() {
            if !a.claim.outputs.iter().any(|o| o.digest == exp.artifact_digest) {
                root_issue = Some(format!("attestation {root} does not list the artifact among its outputs"));
            }
        }
        if let Some(c) = &discovery.cycle {
            root_issue = Some(c.clone());
        }

        if let (Some(cache), None) = (cache, &discovery.cycle) {
            self.populate(cache, &discovery, &findings);
        }
        let len = discovery.hops.len();
        let checks = self.fold(exp, &ctx, golden_sig, golden_value, Some(&discovery), &findings, root_issue);
        Ok((checks, len))
    }

    fn discover(
        &self,
        root: Digest,
        reader: &dyn LogReader,
        cache: Option<&VerificationCache>,
    ) -> Result<Discovery, LogError> {
        let mut hops: Vec<Hop> = Vec::new();
        let mut index: HashMap<Digest, usize> = HashMap::new();
        let mut finished: HashSet<Digest> = HashSet::new();
        let mut postorder = Vec::new();
        let mut cycle = None;

        let load = |d: Digest| -> Result<Hop, LogError> {
            let source = match reader.entry(&d)? {
                None => HopSource::Broken(format!("attestation {d} is not in the log")),
                Some(stored) => match stored.entry {
                    LogEntry::Attestation(a) => match cache.and_then(|c| c.lookup(&d, &a)) {
                        Some(hit) => HopSource::Cached(hit),
                        None => HopSource::Fetched {
                            tree_id: stored.tree_id,
                            leaf_index: stored.leaf_index,
                            attestation: a,
                        },
                    },
                    other => HopSource::Broken(format!("{d} is a {} entry, not an attestation", other.kind())),
                },
            };
            Ok(Hop { digest: d, source })
        };

        index.insert(root, 0);
        hops.push(load(root)?);
        let mut stack: Vec<(usize, usize)> = vec![(0, 0)];
        while let Some((h, next)) = stack.last().copied() {
            let precursors = hops[h].precursors();
            if next < precursors.len() {
                let p = precursors[next];
                stack.last_mut().expect("non-empty").1 += 1;
                match index.get(&p) {
                    Some(_) if finished.contains(&p) => {}
                    Some(_) => {
                        cycle.get_or_insert_with(|| format!("cycle-detected: {p} is its own ancestor"));
                    }
                    None => {
                        index.insert(p, hops.len());
                        hops.push(load(p)?);
                        stack.push((hops.len() - 1, 0));
                    }
                }
            } else {
                finished.insert(hops[h].digest);
                postorder.push(h);
                stack.pop();
            }
        }
        Ok(Discovery { hops, postorder, cycle })
    }

    fn verify_hop(
        &self,
        digest: Digest,
        tree_id: u64,
        leaf_index: u64,
        a: &TransformationAttestation,
        reader: &dyn LogReader,
        ctx: &Context,
    ) -> Result<Findings, LogError> {
        let mut f = Findings::default();
        if !a.verify_signature() {
            f.signature = Some(format!("attestation {digest}: claim signature does not verify"));
        }
        let leaf_bytes = a.claim.canonical_bytes();
        if Digest::of(&leaf_bytes) != digest {
            f.lineage = Some(format!("log returned a different attestation for {digest}"));
        }

        if let QuoteVerdict::Rejected(r) = verify_register_quote(
            &self.trust.platforms,
            &a.claim.client_quote,
            &ctx.client_goldens,
            &client_quote_nonce(&a.claim.manifest_id),
        ) {
            f.quote = Some(format!("attestation {digest}: client quote {r}"));
        } else if !a.quote_binds_signer() {
            f.quote = Some(format!("attestation {digest}: client quote does not bind the signing key"));
        }

        let meta_hash = a.claim.pipeline_metadata_hash;
        match reader.entry(&meta_hash)?.map(|s| s.entry) {
            Some(LogEntry::PipelineMetadata(m)) => {
                if m.digest().ok() != Some(meta_hash) {
                    f.lineage.get_or_insert_with(|| format!("attestation {digest}: metadata does not match its hash"));
                }
                match verify_register_quote(
                    &self.trust.platforms,
                    &m.system_quote,
                    &ctx.system_goldens,
                    &system_quote_nonce(&a.claim.manifest_id),
                ) {
                    QuoteVerdict::Accepted => f.code_hash = m.system_quote.register(REGISTER_CODE).copied(),
                    QuoteVerdict::Rejected(r) => {
                        f.quote.get_or_insert_with(|| format!("attestation {digest}: system quote {r}"));
                    }
                }
            }
            _ => {
                f.lineage.get_or_insert_with(|| {
                    format!("attestation {digest}: pipeline metadata {meta_hash} is not in the log")
                });
            }
        }

        match ctx.roots.get(tree_id as usize) {
            None => f.inclusion = Some(format!("attestation {digest}: no signed root for tree {tree_id}")),
            Some(root) => {
                let proof = if leaf_index < root.tree_size {
                    reader.inclusion_proof(tree_id, leaf_index, root.tree_size).map_err(|e| e.to_string())
                } else {
                    Err(format!("leaf {leaf_index} is beyond the signed tree size {}", root.tree_size))
                };
                match proof
                    .and_then(|p| verify_inclusion(&p, &leaf_hash(&leaf_bytes), &root.root).map_err(|e| e.to_string()))
                {
                    Ok(()) => f.verified_under = Some(root.clone()),
                    Err(e) => f.inclusion = Some(format!("attestation {digest}: inclusion proof: {e}")),
                }
            }
        }
        Ok(f)
    }

    fn populate(&self, cache: &VerificationCache, d: &Discovery, findings: &[Findings]) {
        let mut good = vec![false; d.hops.len()];
        let index: HashMap<Digest, usize> = d.hops.iter().enumerate().map(|(i, h)| (h.digest, i)).collect();
        for &i in &d.postorder {
            let hop = &d.hops[i];
            let ancestors_good = hop.precursors().iter().all(|p| index.get(p).is_some_and(|&j| good[j]));
            good[i] = ancestors_good
                && match &hop.source {
                    HopSource::Cached(_) => true,
                    HopSource::Fetched { attestation, .. } if findings[i].ok() => {
                        let Some(root) = findings[i].verified_under.clone() else { continue };
                        cache.insert(
                            hop.digest,
                            CachedHop {
                                attestation: attestation.clone(),
                                verified_under: root,
                                code_hash: findings[i].code_hash,
                            },
                        );
                        true
                    }
                    _ => false,
                };
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn fold(
        &self,
        exp: &Expectation,
        ctx: &Context,
        golden_sig: Result<(), String>,
        golden_value: Result<String, String>,
        discovery: Option<&Discovery>,
        findings: &[Findings],
        root_issue: Option<String>,
    ) -> Vec<Check> {
        use check_names::*;
        let hops: &[Hop] = discovery.map_or(&[], |d| &d.hops);
        let any_cached = hops.iter().any(|h| matches!(h.source, HopSource::Cached(_)));
        let first = |pick: fn(&Findings) -> &Option<String>| findings.iter().find_map(|f| pick(f).clone());

        let signature = golden_sig
            .and_then(|()| first(|f| &f.signature).map_or(Ok(()), Err))
            .map(|()| format!("golden value and {} attestations verified", hops.len()));

        let quote = first(|f| &f.quote).map_or(Ok(format!("{} client and system quotes accepted", hops.len())), Err);

        let lineage = root_issue
            .or_else(|| first(|f| &f.lineage))
            .map_or(Ok(format!("{} attestations traversed", hops.len())), Err);

        let inclusion = first(|f| &f.inclusion)
            .map_or(Ok(format!("{} inclusion proofs verified against signed roots", hops.len())), Err);

        let pipeline = self.pipeline_check(exp, hops, findings);
        let stage_order = match &exp.required_stage_order {
            None => Ok("no stage order required".to_owned()),
            Some(order) => stage_order_check(order, hops),
        };

        vec![
            Check::new(LOG_AVAILABLE, Ok(format!("{} trees", ctx.roots.len())), false),
            Check::new(SIGNATURE, signature, any_cached),
            Check::new(GOLDEN_VALUE, golden_value, false),
            Check::new(QUOTE, quote, any_cached),
            Check::new(PIPELINE, pipeline, any_cached),
            Check::new(STAGE_ORDER, stage_order, any_cached),
            Check::new(LINEAGE, lineage, any_cached),
            Check::new(INCLUSION, inclusion, any_cached),
        ]
    }

    fn pipeline_check(&self, exp: &Expectation, hops: &[Hop], findings: &[Findings]) -> Result<String, String> {
        if let Some(want) = exp.required_pipeline_code_hash {
            match findings.first().and_then(|f| f.code_hash) {
                Some(got) if got == want => {}
                Some(got) => return Err(format!("pipeline code hash is {got}, expected {want}")),
                None => return Err("producing pipeline has no verified code measurement".into()),
            }
        }
        if let Some(required) = &exp.required_precursor_digests {
            let mut known: HashSet<Digest> = HashSet::new();
            for h in hops {
                known.insert(h.digest);
                if let Some(a) = h.attestation() {
                    known.extend(a.claim.inputs.iter().map(|m| m.digest));
                }
            }
            if let Some(missing) = required.iter().find(|d| !known.contains(d)) {
                return Err(format!("required precursor {missing} is not in the lineage"));
            }
        }
        Ok("pipeline expectations met".into())
    }
}

fn verify_register_quote(
    platforms: &QuoteVerifier,
    quote: &TeeQuote,
    goldens: &[Vec<GoldenValue>; 2],
    nonce: &[u8; 32],
) -> QuoteVerdict {
    // pick, per register, the golden value matching the quote if one exists
    let chosen: Vec<GoldenValue> = goldens
        .iter()
        .enumerate()
        .filter_map(|(i, gs)| {
            let want = quote.register(i);
            gs.iter().find(|g| Some(&g.measurement.digest) == want).or(gs.last()).cloned()
        })
        .collect();
    platforms.verify_quote(quote, &chosen, nonce)
}

/// Every hop performing stage `b` must have an earlier stage `a` either
/// before it in its own operations or in one of its ancestors.
fn stage_order_check(order: &[String], hops: &[Hop]) -> Result<String, String> {
    let index: HashMap<Digest, usize> = hops.iter().enumerate().map(|(i, h)| (h.digest, i)).collect();
    let performs = |i: usize, stage: &str| -> Option<usize> {
        hops[i].attestation().and_then(|a| a.claim.operations.iter().position(|op| op.name == stage))
    };
    for stage in order {
        if !(0..hops.len()).any(|i| performs(i, stage).is_some()) {
            return Err(format!("stage-order: required stage `{stage}` is missing from the lineage"));
        }
    }
    for pair in order.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        for i in 0..hops.len() {
            let Some(pos_b) = performs(i, b) else { continue };
            if performs(i, a).is_some_and(|pos_a| pos_a < pos_b) {
                continue;
            }
            // search strict ancestors
            let mut seen = HashSet::new();
            let mut stack: Vec<usize> = hops[i].precursors().iter().filter_map(|p| index.get(p).copied()).collect();
            let mut found = false;
            while let Some(j) = stack.pop() {
                if !seen.insert(j) {
                    continue;
                }
                if performs(j, a).is_some() {
                    found = true;
                    break;
                }
                stack.extend(hops[j].precursors().iter().filter_map(|p| index.get(p).copied()));
            }
            if !found {
                return Err(format!("stage-order: `{b}` in {} does not follow `{a}`", hops[i].digest));
            }
        }
    }
    Ok(format!("stages in order: {}", order.join(" > ")))
}
