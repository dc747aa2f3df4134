//! JSON report emission.
//!
//! Reports carry no timestamps or machine identifiers, so identical runs
//! serialize to identical bytes.

use std::path::Path;

use serde::Serialize;

use crate::error::MhdError;
use crate::Result;

pub fn report_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| MhdError::Config(format!("report serialization: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json_report<T: Serialize, P: AsRef<Path>>(path: P, value: &T) -> Result<()> {
    std::fs::write(path, report_string(value)?)?;
    Ok(())
}
