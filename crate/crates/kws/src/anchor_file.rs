//! JSON anchor files.
//!
//! ```json
//! {"format_version": 1, "dim": 768, "source": "bert-layer-1",
//!  "anchors": {"yes": [0.01, ...], "no": [...]}}
//! ```
//!
//! Numbers are written with shortest round-trip formatting, so saving and
//! re-loading a store is bit-exact.

use std::fs;
use std::path::Path;

use kws_core::anchors::{AnchorFile, AnchorStore};

use crate::error::{Error, Result};

pub fn parse_anchors(path: &Path, text: &str) -> Result<AnchorStore> {
    let file: AnchorFile = serde_json::from_str(text)
        .map_err(|e| Error::format(path, format!("line {} column {}: {e}", e.line(), e.column())))?;
    AnchorStore::from_file(file).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_anchors(path: &Path) -> Result<AnchorStore> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_anchors(path, &text)
}

pub fn anchors_to_json(store: &AnchorStore) -> String {
    let mut s = serde_json::to_string(&store.to_file()).expect("anchor files always serialise");
    s.push('\n');
    s
}

pub fn save_anchors(path: &Path, store: &AnchorStore) -> Result<()> {
    fs::write(path, anchors_to_json(store)).map_err(|e| Error::io(path, e))
}
