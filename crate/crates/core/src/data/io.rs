//! JSON-Lines persistence for listwise instances, one instance per line.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::ListwiseInstance;
use crate::error::{Error, Result};

pub fn save_instances(instances: &[ListwiseInstance], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads every line or nothing; a bad line fails the whole load.
pub fn load_instances(path: impl AsRef<Path>) -> Result<Vec<ListwiseInstance>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: ListwiseInstance = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        inst.validate().map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() })?;
        out.push(inst);
    }
    Ok(out)
}
