//! Flat `key=value` config files with `#` comments.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed `key=value` pairs in file order, each tagged with its line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    pub entries: Vec<(String, String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries: Vec<(String, String, usize)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: line_no,
                    msg: format!("expected key=value, got {line:?}"),
                });
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: line_no,
                    msg: "empty key".into(),
                });
            }
            if entries.iter().any(|(k, _, _)| *k == key) {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: line_no,
                    msg: format!("duplicate key {key:?}"),
                });
            }
            entries.push((key, value.trim().to_string(), line_no));
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// A config struct that can be updated one `key=value` pair at a time.
pub trait KeyValueConfig: Sized {
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Every field as `(key, value)` in a fixed order; values must parse back.
    fn to_pairs(&self) -> Vec<(&'static str, String)>;

    fn validate(&self) -> Result<()>;

    fn apply(&mut self, kv: &KeyValues, origin: &Path) -> Result<()> {
        for (k, v, line) in &kv.entries {
            self.set(k, v).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: *line,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {value:?} for {key}")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("expected a boolean for {key}, got {value:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blank_lines_and_whitespace() {
        let kv = KeyValues::parse("# header\n\n a = 1 # trailing\nb=two\n", Path::new("x")).unwrap();
        assert_eq!(
            kv.entries,
            vec![("a".into(), "1".into(), 3), ("b".into(), "two".into(), 4)]
        );
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = KeyValues::parse("a=1\nnot a pair\n", Path::new("cfg")).unwrap_err();
        assert!(err.to_string().starts_with("cfg:2:"), "{err}");
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert!(KeyValues::parse("a=1\na=2\n", Path::new("cfg")).is_err());
    }
}
