//! Plain-text configuration: `key = value` lines grouped under `[section]`
//! headers. `#` starts a comment. Keys before the first header belong to the
//! unnamed section `""`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub value: String,
    pub line: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigDoc {
    /// Where the text came from, for error messages.
    pub path: String,
    pub text: String,
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

impl ConfigDoc {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_string(),
            line,
            msg,
        };
        let mut sections: BTreeMap<String, BTreeMap<String, Entry>> = BTreeMap::new();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(line_no, format!("unterminated section header {line:?}")))?
                    .trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                    return Err(err(line_no, format!("invalid section name {name:?}")));
                }
                current = name.to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(line_no, format!("expected key = value, got {line:?}")))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(err(line_no, "empty key".into()));
            }
            let section = sections.entry(current.clone()).or_default();
            if let Some(prev) = section.get(key) {
                return Err(err(
                    line_no,
                    format!("duplicate key {key:?} (first set on line {})", prev.line),
                ));
            }
            section.insert(
                key.to_string(),
                Entry {
                    value: v.trim().to_string(),
                    line: line_no,
                },
            );
        }
        Ok(ConfigDoc {
            path: path.to_string(),
            text: text.to_string(),
            sections,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ConfigDoc::parse(&text, &path.display().to_string())
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    pub fn section<'a>(&'a self, section: &'a str) -> Section<'a> {
        Section {
            doc: self,
            name: section,
            entries: self.sections.get(section),
        }
    }

    pub fn sections(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(String::as_str)
    }
}

/// Typed accessors over one section.
#[derive(Clone, Copy)]
pub struct Section<'a> {
    doc: &'a ConfigDoc,
    name: &'a str,
    entries: Option<&'a BTreeMap<String, Entry>>,
}

impl<'a> Section<'a> {
    pub fn raw(&self, key: &str) -> Option<&'a Entry> {
        self.entries.and_then(|e| e.get(key))
    }

    fn error(&self, line: usize, msg: String) -> Error {
        Error::Parse {
            path: self.doc.path.clone(),
            line,
            msg: format!("[{}] {msg}", self.name),
        }
    }

    /// Parses `key` with `parse`, reporting failures at the key's line.
    pub fn get_with<T>(&self, key: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(e) => parse(&e.value)
                .map(Some)
                .map_err(|err| self.error(e.line, format!("{key}: {}", strip_prefix(&err)))),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get_with(key, |v| {
            v.parse::<T>()
                .map_err(|_| Error::InvalidArgument(format!("cannot parse {v:?}")))
        })
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::Parse {
            path: self.doc.path.clone(),
            line: 0,
            msg: format!("[{}] missing required key {key:?}", self.name),
        })
    }

    /// A real number, also accepting fractions such as `8/255`.
    pub fn real(&self, key: &str) -> Result<Option<f32>> {
        self.get_with(key, parse_real)
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.get_with(key, |v| {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<T>()
                        .map_err(|_| Error::InvalidArgument(format!("cannot parse list item {s:?}")))
                })
                .collect()
        })
    }

    /// Every key of the section, for passing through to other parsers.
    pub fn pairs(&self) -> Vec<(&'a str, &'a str)> {
        self.entries
            .map(|e| e.iter().map(|(k, v)| (k.as_str(), v.value.as_str())).collect())
            .unwrap_or_default()
    }

    /// Rejects keys outside `allowed`, naming the first offender and its line.
    pub fn only(&self, allowed: &[&str]) -> Result<()> {
        if let Some(entries) = self.entries {
            for (k, e) in entries {
                if !allowed.contains(&k.as_str()) {
                    return Err(self.error(e.line, format!("unknown key {k:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn line_of(&self, key: &str) -> usize {
        self.raw(key).map_or(0, |e| e.line)
    }

    pub fn fail(&self, key: &str, msg: impl Into<String>) -> Error {
        self.error(self.line_of(key), format!("{key}: {}", msg.into()))
    }
}

fn strip_prefix(err: &Error) -> String {
    match err {
        Error::InvalidArgument(m) | Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Parses `0.5`, `8/255` or `1e-3`.
pub fn parse_real(v: &str) -> Result<f32> {
    let bad = || Error::InvalidArgument(format!("{v:?} is not a number or fraction"));
    let out = match v.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| bad())?;
            let d: f64 = d.trim().parse().map_err(|_| bad())?;
            if d == 0.0 {
                return Err(bad());
            }
            (n / d) as f32
        }
        None => v.trim().parse::<f32>().map_err(|_| bad())?,
    };
    if out.is_finite() {
        Ok(out)
    } else {
        Err(bad())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "# desk run\nseed = 3\n[attack]\nepsilon = 8/255  # pixels\nsteps=5\nkinds = fgsm, pgd\n\n[model]\narch = vssm_hier\n";

    #[test]
    fn sections_and_values() {
        let doc = ConfigDoc::parse(TEXT, "run.cfg").unwrap();
        assert_eq!(doc.section("").require::<u64>("seed").unwrap(), 3);
        let a = doc.section("attack");
        assert_eq!(a.real("epsilon").unwrap(), Some(8.0 / 255.0));
        assert_eq!(a.get::<usize>("steps").unwrap(), Some(5));
        assert_eq!(a.list::<String>("kinds").unwrap().unwrap(), vec!["fgsm", "pgd"]);
        assert_eq!(doc.section("model").get::<String>("arch").unwrap().as_deref(), Some("vssm_hier"));
        assert_eq!(doc.section("missing").get::<usize>("x").unwrap(), None);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = ConfigDoc::parse("[a]\nx = 1\nbogus line\n", "f.cfg").unwrap_err();
        assert_eq!(err.to_string(), "f.cfg:3: expected key = value, got \"bogus line\"");
        let err = ConfigDoc::parse("[a]\nx = 1\nx = 2\n", "f.cfg").unwrap_err();
        assert!(err.to_string().starts_with("f.cfg:3: duplicate key"));
        let doc = ConfigDoc::parse("[a]\n\nn = five\n", "f.cfg").unwrap();
        let err = doc.section("a").get::<usize>("n").unwrap_err();
        assert!(err.to_string().starts_with("f.cfg:3: [a] n:"), "{err}");
        let err = doc.section("a").only(&["m"]).unwrap_err();
        assert!(err.to_string().contains("unknown key \"n\""));
    }

    #[test]
    fn fractions() {
        assert_eq!(parse_real("0.5").unwrap(), 0.5);
        assert_eq!(parse_real("1/255").unwrap(), 1.0 / 255.0);
        assert!(parse_real("1/0").is_err());
        assert!(parse_real("inf").is_err());
    }
}
