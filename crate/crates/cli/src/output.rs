use std::path::{Path, PathBuf};

use sled_core::archive::write_atomic;

use crate::error::{CliError, CliResult};

/// Fails before anything is written if an output exists and `force` is off.
pub fn check_outputs(paths: &[PathBuf], force: bool) -> CliResult<()> {
    if force {
        return Ok(());
    }
    if let Some(p) = paths.iter().find(|p| p.exists()) {
        return Err(CliError::Usage(format!(
            "refusing to overwrite {}; pass --force",
            p.display()
        )));
    }
    Ok(())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    write_atomic(path, bytes)?;
    Ok(())
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(sled_core::Error::from)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

/// `base.sled` with suffix `loss.csv` becomes `base.loss.csv`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Parses `0,0.5,1` into numbers.
pub fn parse_list(raw: &str) -> CliResult<Vec<f64>> {
    raw.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::Usage(format!("`{s}` is not a finite number")))
        })
        .collect()
}

pub fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn siblings_and_lists() {
        assert_eq!(sibling(Path::new("out/base.sled"), "loss.csv"), PathBuf::from("out/base.loss.csv"));
        assert_eq!(parse_list("0, 0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_list("0,x").is_err());
        assert!(parse_list("inf").is_err());
        assert_eq!(join(&[-0.5, 1.0]), "-0.5;1");
    }

    #[test]
    fn refuses_to_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        check_outputs(std::slice::from_ref(&p), false).unwrap();
        write_file(&p, b"{}").unwrap();
        assert!(check_outputs(std::slice::from_ref(&p), false).is_err());
        check_outputs(&[p], true).unwrap();
    }
}
