//! Versioned JSONL report rows.

use serde::Serialize;

/// Bumped whenever a row layout changes.
pub const SCHEMA_VERSION: u32 = 1;

/// `v<crate version>-<git describe>` of the build, or `v<crate version>`
/// outside a git checkout.
pub fn version() -> &'static str {
    env!("BRANCHLAB_VERSION")
}

/// Provenance fields carried by every row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub schema: u32,
    pub version: &'static str,
    pub seed: u64,
    pub reps: u64,
    pub model_digest: String,
}

impl Provenance {
    pub fn new(seed: u64, reps: u64, model_digest: impl Into<String>) -> Self {
        Provenance { schema: SCHEMA_VERSION, version: version(), seed, reps, model_digest: model_digest.into() }
    }
}

#[derive(Serialize)]
struct Row<'a, T: Serialize> {
    #[serde(flatten)]
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: &'a T,
}

/// One JSON object per line, provenance fields first.
pub fn jsonl_line<T: Serialize>(provenance: &Provenance, body: &T) -> String {
    serde_json::to_string(&Row { provenance, body }).expect("rows serialise")
}
