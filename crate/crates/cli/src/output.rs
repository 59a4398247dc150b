use anyhow::Result;
use atlas_core::verifier::{Verdict, VerificationReport};
use serde::Serialize;

use crate::Format;

/// Prints `value` as one line of canonical JSON.
pub fn json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", atlas_core::canonical::canonical_string(value)?);
    Ok(())
}

fn verdict(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "pass",
        Verdict::Fail => "fail",
    }
}

pub fn report(r: &VerificationReport, fmt: Format) -> Result<()> {
    if fmt == Format::Json {
        return json(r);
    }
    println!(
        "{}  chain_length {}  {:.1} ms",
        verdict(r.verdict).to_uppercase(),
        r.chain_length,
        r.elapsed.as_secs_f64() * 1e3
    );
    let width = r.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &r.checks {
        let cached = if c.cache_hit { "  (cached)" } else { "" };
        println!("  {}  {:width$}  {}{cached}", verdict(c.status), c.name, c.detail);
    }
    Ok(())
}
