//! CSV rendering and all-or-nothing file output.

use std::io::Write;
use std::path::Path;

use crate::error::CliError;

/// Renders columns as CSV. Values use the shortest round-trip representation.
pub fn csv_columns(header: &[&str], columns: &[&[f64]]) -> String {
    debug_assert_eq!(header.len(), columns.len());
    let rows = columns.first().map_or(0, |c| c.len());
    debug_assert!(columns.iter().all(|c| c.len() == rows));
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..rows {
        let row: Vec<String> = columns.iter().map(|c| c[i].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory, so a failure never leaves a partial file behind.
pub fn write_atomically(path: &Path, contents: &str) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let fail =
        |e: std::io::Error| CliError::Config(format!("cannot write {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(contents.as_bytes()).map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}
