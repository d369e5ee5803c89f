use serde::Serialize;
use serde_json::Value;

use super::message::{ArraySchema, Payload, Transcript};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// 1-based transcript line.
    pub line: usize,
    /// JSON pointer to the offending value.
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub messages: usize,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

const IMAGE_KEYS: [&str; 3] = ["records", "images", "image_vectors"];

fn scan(v: &Value, path: &str, line: usize, out: &mut Vec<Violation>) {
    let mut flag = |reason: &str| {
        out.push(Violation {
            line,
            path: if path.is_empty() { "/".into() } else { path.to_string() },
            reason: reason.to_string(),
        })
    };
    match v {
        Value::Object(map) => {
            if let Some(Value::String(tag)) = map.get("schema") {
                if ArraySchema::IMAGE_LEVEL_TAGS.contains(&tag.as_str()) {
                    return flag(&format!("array declared as `{tag}`"));
                }
            }
            if map.contains_key("stages") {
                return flag("per-image feature record");
            }
            if ["pos", "neg", "ign"].iter().all(|k| map.contains_key(*k)) {
                return flag("anchor-group vectors");
            }
            for (k, child) in map {
                let p = format!("{path}/{k}");
                if IMAGE_KEYS.contains(&k.as_str()) {
                    out.push(Violation {
                        line,
                        path: p,
                        reason: format!("per-image field `{k}`"),
                    });
                    continue;
                }
                scan(child, &p, line, out);
            }
        }
        Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                scan(child, &format!("{path}/{i}"), line, out);
            }
        }
        _ => {}
    }
}

/// Scans every line of a transcript for image-level content and for
/// message kinds outside the protocol.
pub fn audit_privacy(t: &Transcript) -> Result<AuditReport> {
    let mut violations = Vec::new();
    for (i, line) in t.lines().iter().enumerate() {
        let n = i + 1;
        let v: Value = serde_json::from_str(line).map_err(|e| Error::Malformed {
            line: n,
            reason: e.to_string(),
        })?;
        let kind = v.pointer("/payload/type").and_then(Value::as_str);
        if !kind.is_some_and(|k| Payload::KINDS.contains(&k)) {
            violations.push(Violation {
                line: n,
                path: "/payload/type".into(),
                reason: format!("unknown message kind {kind:?}"),
            });
        }
        scan(&v, "", n, &mut violations);
    }
    Ok(AuditReport {
        messages: t.len(),
        violations,
    })
}
