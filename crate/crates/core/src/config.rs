//! `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are
//! `mesh.<field>` for [`MeshConfig`] and `cal.<field>` for [`Calibration`];
//! anything missing keeps its default. `cal.mode` takes `calibrated` or
//! `counted`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::deploy::{Calibration, CostMode};
use crate::mesh::MeshConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub fn load_config(path: &Path) -> Result<(MeshConfig, Calibration), ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

fn number<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| ConfigError::Parse {
        line,
        message: format!("{key}: {e}"),
    })
}

pub fn parse_config(text: &str) -> Result<(MeshConfig, Calibration), ConfigError> {
    let mut mesh = MeshConfig::default();
    let mut cal = Calibration::default();
    let mut seen = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| ConfigError::Parse {
            line,
            message: format!("expected `key = value`, got {trimmed:?}"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::Parse {
                line,
                message: format!("duplicate key {key}"),
            });
        }
        match key {
            "mesh.rows" => mesh.rows = number(line, key, value)?,
            "mesh.cols" => mesh.cols = number(line, key, value)?,
            "mesh.local_mem_bytes" => mesh.local_mem_bytes = number(line, key, value)?,
            "mesh.hop_cycles" => mesh.hop_cycles = number(line, key, value)?,
            "mesh.link_bytes_per_cycle" => mesh.link_bytes_per_cycle = number(line, key, value)?,
            "mesh.clock_hz" => mesh.clock_hz = number(line, key, value)?,
            "cal.mode" => {
                cal.mode = match value {
                    "calibrated" => CostMode::Calibrated,
                    "counted" => CostMode::Counted,
                    other => {
                        return Err(ConfigError::Parse {
                            line,
                            message: format!("cal.mode must be calibrated or counted, got {other:?}"),
                        })
                    }
                }
            }
            "cal.ifft_cycles" => cal.ifft_cycles = number(line, key, value)?,
            "cal.deint_cycles" => cal.deint_cycles = number(line, key, value)?,
            "cal.demap_cycles" => cal.demap_cycles = number(line, key, value)?,
            "cal.wait_detect_cycles" => cal.wait_detect_cycles = number(line, key, value)?,
            "cal.barrier_detect_cycles" => cal.barrier_detect_cycles = number(line, key, value)?,
            "cal.butterfly_cycles" => cal.butterfly_cycles = number(line, key, value)?,
            "cal.deint_sample_cycles" => cal.deint_sample_cycles = number(line, key, value)?,
            "cal.demap_sample_cycles" => cal.demap_sample_cycles = number(line, key, value)?,
            _ => {
                return Err(ConfigError::Parse {
                    line,
                    message: format!("unknown key {key}"),
                })
            }
        }
    }
    mesh.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    cal.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok((mesh, cal))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let (mesh, cal) = parse_config("").unwrap();
        assert_eq!(mesh, MeshConfig::default());
        assert_eq!(cal, Calibration::default());
        assert_eq!(mesh.clock_hz, 600e6);
        assert_eq!(mesh.local_mem_bytes, 32 * 1024);
    }

    #[test]
    fn overrides_apply() {
        let text = "# costs\ncal.ifft_cycles = 20000\n\nmesh.hop_cycles=2\ncal.mode = counted\n";
        let (mesh, cal) = parse_config(text).unwrap();
        assert_eq!(cal.ifft_cycles, 20_000);
        assert_eq!(cal.mode, CostMode::Counted);
        assert_eq!(mesh.hop_cycles, 2);
    }

    #[test]
    fn errors_name_the_line() {
        let err = |t: &str| match parse_config(t) {
            Err(ConfigError::Parse { line, .. }) => line,
            other => panic!("{other:?}"),
        };
        assert_eq!(err("mesh.rows = 4\nmesh.bogus = 1\n"), 2);
        assert_eq!(err("\n\nno equals sign"), 3);
        assert_eq!(err("cal.ifft_cycles = lots"), 1);
        assert_eq!(err("mesh.rows = 4\nmesh.rows = 5"), 2);
        assert_eq!(err("cal.mode = guessed"), 1);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(matches!(parse_config("mesh.rows = 0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(
            parse_config("cal.wait_detect_cycles = 9"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_config(Path::new("/nonexistent/meshpipe.conf")),
            Err(ConfigError::Io { .. })
        ));
    }
}
