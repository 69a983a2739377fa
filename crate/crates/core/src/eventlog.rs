//! Structured one-line event records for observing the FL process.
//!
//! Every event becomes a single line: ISO-8601 timestamp, role, phase,
//! round, event name, then `key=value` details. No embedded newlines,
//! so the stream stays machine-parseable. Lines are routed through the
//! `log` facade under the `fedmesh::event` target; binaries install a
//! plain formatter so the line appears verbatim.

use chrono::{SecondsFormat, Utc};

/// Formats one event line. Values containing whitespace or quotes are
/// double-quoted with minimal escaping.
pub fn format_line(
    timestamp: &str,
    role: &str,
    phase: &str,
    round: u64,
    event: &str,
    fields: &[(&str, String)],
) -> String {
    let mut line = format!("{timestamp} role={role} phase={phase} round={round} event={event}");
    for (key, value) in fields {
        let clean = value.replace(['\n', '\r'], " ");
        if clean.contains(char::is_whitespace) || clean.contains('"') {
            line.push_str(&format!(" {key}=\"{}\"", clean.replace('"', "\\\"")));
        } else {
            line.push_str(&format!(" {key}={clean}"));
        }
    }
    line
}

/// Emits one event line with the current UTC timestamp.
pub fn emit(role: &str, phase: &str, round: u64, event: &str, fields: &[(&str, String)]) {
    let ts = Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true);
    let line = format_line(&ts, role, phase, round, event, fields);
    log::info!(target: "fedmesh::event", "{line}");
}
