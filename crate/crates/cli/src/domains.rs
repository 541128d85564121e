//! Domain list files: one `target | source` pair per line.

use hyperdomain::{DomainDescriptor, Error, Result};

pub const DEFAULT_DOMAINS: &str = include_str!("../data/domains20.txt");

/// Parses a domain list. `#` starts a comment line; a line without `|` uses
/// `default_source` as its source text.
pub fn parse_domains(text: &str, default_source: &str) -> Result<Vec<DomainDescriptor>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (target, source) = match line.split_once('|') {
            Some((t, s)) => (t.trim(), s.trim()),
            None => (line, default_source),
        };
        if target.is_empty() || source.is_empty() {
            return Err(Error::Config(format!(
                "domains line {}: empty target or source",
                no + 1
            )));
        }
        out.push(DomainDescriptor::text(target, source));
    }
    if out.is_empty() {
        return Err(Error::Config("domain list is empty".into()));
    }
    Ok(out)
}
