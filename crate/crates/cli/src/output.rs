//! Output files stamped with the config hash and master seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

/// A JSON record with the stamp fields first.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stamped<T> {
    #[serde(flatten)]
    pub stamp: Stamp,
    #[serde(flatten)]
    pub body: T,
}

impl Stamp {
    /// Prefixes `# config_hash:` and `# seed:` comment lines.
    pub fn csv(&self, body: &str) -> String {
        format!("# config_hash: {}\n# seed: {}\n{body}", self.config_hash, self.seed)
    }

    pub fn json<T: Serialize>(&self, body: T) -> CliResult<String> {
        let mut text = serde_json::to_string_pretty(&Stamped { stamp: self.clone(), body })
            .map_err(|e| CliError::Failed(format!("serializing output: {e}")))?;
        text.push('\n');
        Ok(text)
    }
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> CliResult<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

pub fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Drops the leading `#` comment lines of a stamped CSV.
pub fn strip_stamp(csv: &str) -> &str {
    let mut rest = csv;
    while rest.starts_with('#') {
        rest = rest.split_once('\n').map_or("", |(_, tail)| tail);
    }
    rest
}
