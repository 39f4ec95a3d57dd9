//! CSV output with embedded provenance.
//!
//! Every file starts with a `# config_hash=... seed=...` comment line and a
//! header row; floats use the shortest round-trip decimal form, so re-runs
//! with the same configuration and seed are bitwise identical.

use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

/// First 16 hex characters of the SHA-256 of the canonical config text.
pub fn config_hash(canonical: &str) -> String {
    let digest = Sha256::digest(canonical.as_bytes());
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Writes a CSV file with the provenance comment and header.
pub fn write_csv<I>(path: &Path, hash: &str, seed: u64, header: &str, rows: I) -> std::io::Result<()>
where
    I: IntoIterator<Item = String>,
{
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# config_hash={hash} seed={seed}")?;
    writeln!(f, "{header}")?;
    for row in rows {
        writeln!(f, "{row}")?;
    }
    f.flush()
}

/// Joins float cells with the round-trip `Display` form.
pub fn row(cells: &[String]) -> String {
    cells.join(",")
}

pub fn fmt(x: f64) -> String {
    format!("{x}")
}
