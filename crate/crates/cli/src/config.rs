//! Plain `key = value` config files and the flag/file/default
//! resolution used by every subcommand.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

/// Keys a config file may set. Flags use the same names, so a written
/// `resolved.cfg` can be fed back through `--config`.
pub const KNOWN_KEYS: [&str; 24] = [
    "batch", "beta", "classes", "dff", "dh", "dim", "dropout", "embed", "epochs", "heads",
    "informative", "lr", "mask", "nf", "noise", "param", "patience", "pq", "profile", "seed",
    "tfixed", "values", "variant", "workers",
];

/// A parsed config file: raw string values by key.
#[derive(Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    /// Reads `key = value` lines. Blank lines and lines starting with
    /// `#` are skipped; keys must be known and unique.
    pub fn load(path: &Path) -> Result<FileConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("config {}: {e}", path.display()))?;
        let mut values = BTreeMap::new();
        let mut first_line: BTreeMap<String, usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                format!(
                    "config {}: line {line_no}: expected `key = value`, got {line:?}",
                    path.display()
                )
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(format!(
                    "config {}: line {line_no}: unknown key `{key}`",
                    path.display()
                ));
            }
            if let Some(prev) = first_line.get(&key) {
                return Err(format!(
                    "config {}: duplicate key `{key}` on lines {prev} and {line_no}",
                    path.display()
                ));
            }
            first_line.insert(key.clone(), line_no);
            values.insert(key, value);
        }
        Ok(FileConfig { values })
    }

    /// One setting: the flag wins, then the file, then the default. The
    /// resolved `key = value` line is appended to `echo`.
    pub fn resolve<T>(
        &self,
        key: &str,
        flag: Option<T>,
        default: T,
        echo: &mut Vec<String>,
    ) -> Result<T, String>
    where
        T: FromStr + Display,
    {
        debug_assert!(KNOWN_KEYS.contains(&key), "unregistered key {key}");
        let value = match flag {
            Some(v) => v,
            None => match self.values.get(key) {
                Some(raw) => raw
                    .parse::<T>()
                    .map_err(|_| format!("config key `{key}`: cannot parse value {raw:?}"))?,
                None => default,
            },
        };
        echo.push(format!("{key} = {value}"));
        Ok(value)
    }

    /// Like `resolve`, but the raw string is kept for custom parsing.
    pub fn resolve_raw(&self, key: &str, flag: Option<String>, default: &str) -> String {
        debug_assert!(KNOWN_KEYS.contains(&key), "unregistered key {key}");
        flag.or_else(|| self.values.get(key).cloned())
            .unwrap_or_else(|| default.to_string())
    }
}

/// Parses a `(p, q)` schedule like `20:10,30:50`.
pub fn parse_schedule(raw: &str) -> Result<Vec<(f64, f64)>, String> {
    let mut out = Vec::new();
    for chunk in raw.split(',') {
        let (p, q) = chunk
            .split_once(':')
            .ok_or_else(|| format!("pq entry `{chunk}`: expected `<p>:<q>`"))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| format!("pq entry `{chunk}`: `{s}` is not a number"))
        };
        out.push((parse(p)?, parse(q)?));
    }
    if out.is_empty() {
        return Err("pq schedule is empty".to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_cfg(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn empty_file_yields_defaults() {
        let (_dir, path) = write_cfg("# only a comment\n\n");
        let cfg = FileConfig::load(&path).unwrap();
        let mut echo = Vec::new();
        let beta = cfg.resolve("beta", None, 0.5f64, &mut echo).unwrap();
        assert_eq!(beta, 0.5);
        assert_eq!(echo, ["beta = 0.5"]);
    }

    #[test]
    fn file_value_loses_to_flag_and_beats_default() {
        let (_dir, path) = write_cfg("beta = 0.25\n");
        let cfg = FileConfig::load(&path).unwrap();
        let mut echo = Vec::new();
        assert_eq!(cfg.resolve("beta", None, 0.5f64, &mut echo).unwrap(), 0.25);
        assert_eq!(
            cfg.resolve("beta", Some(0.75f64), 0.5, &mut echo).unwrap(),
            0.75
        );
    }

    #[test]
    fn duplicate_key_names_both_lines() {
        let (_dir, path) = write_cfg("beta = 0.5\nmask = 10\nbeta = 0.7\n");
        let err = FileConfig::load(&path).unwrap_err();
        assert!(err.contains("duplicate key `beta`"), "{err}");
        assert!(err.contains("lines 1 and 3"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let (_dir, path) = write_cfg("betaa = 0.5\n");
        let err = FileConfig::load(&path).unwrap_err();
        assert!(err.contains("unknown key `betaa`"), "{err}");
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn missing_equals_reports_the_line() {
        let (_dir, path) = write_cfg("beta = 0.5\njust words\n");
        let err = FileConfig::load(&path).unwrap_err();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn schedules_parse_and_reject_noise() {
        assert_eq!(
            parse_schedule("20:10,30:50").unwrap(),
            vec![(20.0, 10.0), (30.0, 50.0)]
        );
        assert!(parse_schedule("20-10").unwrap_err().contains("20-10"));
        assert!(parse_schedule("20:x").unwrap_err().contains("`x`"));
    }
}
