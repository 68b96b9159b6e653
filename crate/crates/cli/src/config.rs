//! Layered settings. A key resolves from, in order: command-line flag,
//! `TWINSTAGE_<KEY>` environment variable, the config file, the built-in
//! default. Config files are `key = value` lines; keys before any
//! `[section]` header apply to every subcommand, keys under
//! `[<subcommand>]` override them for that subcommand only.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "TWINSTAGE_";

/// Keys that name locations or execution mode rather than the experiment;
/// they appear in the snapshot but not in the configuration hash.
const NON_SEMANTIC: [&str; 3] = ["out", "config", "deterministic"];

/// Parse a config file into global and per-section maps.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, BTreeMap<String, String>>, CliError> {
    let mut out: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("config line {}: expected `key = value`", i + 1)))?;
        let key = normalize_key(k.trim());
        if key.is_empty() {
            return Err(CliError::config(format!("config line {}: empty key", i + 1)));
        }
        out.entry(section.clone()).or_default().insert(key, v.trim().to_string());
    }
    Ok(out)
}

fn normalize_key(k: &str) -> String {
    k.replace('-', "_").to_ascii_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Flag,
    Env,
    File,
    Default,
}

#[derive(Debug)]
pub struct Settings {
    command: String,
    flags: BTreeMap<String, String>,
    file: BTreeMap<String, String>,
    section_keys: BTreeSet<String>,
    env: BTreeMap<String, String>,
    resolved: BTreeMap<String, (String, Source)>,
    content_keys: BTreeSet<String>,
}

impl Settings {
    /// `flags` is any serializable struct whose fields are the flag values
    /// (`None` or `false` when not given).
    pub fn new(command: &str, flags: &impl Serialize, config: Option<&Path>) -> Result<Self, CliError> {
        let env: BTreeMap<String, String> = std::env::vars()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_ascii_lowercase(), v)))
            .collect();
        let config_path = config.map(Path::to_path_buf).or_else(|| env.get("config").map(Into::into));
        let (file, section_keys) = match &config_path {
            None => (BTreeMap::new(), BTreeSet::new()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
                let mut sections = parse_config(&text)?;
                let mut merged = sections.remove("").unwrap_or_default();
                let own = sections.remove(command).unwrap_or_default();
                let keys = own.keys().cloned().collect();
                merged.extend(own);
                (merged, keys)
            }
        };
        let mut s = Self {
            command: command.to_string(),
            flags: flag_map(flags),
            file,
            section_keys,
            env,
            resolved: BTreeMap::new(),
            content_keys: BTreeSet::new(),
        };
        if let Some(p) = config_path {
            s.resolved.insert("config".into(), (p.display().to_string(), Source::Flag));
        }
        Ok(s)
    }

    fn lookup(&self, key: &str) -> Option<(String, Source)> {
        if let Some(v) = self.flags.get(key) {
            return Some((v.clone(), Source::Flag));
        }
        if let Some(v) = self.env.get(key) {
            return Some((v.clone(), Source::Env));
        }
        self.file.get(key).map(|v| (v.clone(), Source::File))
    }

    /// Raw string value, recorded in the snapshot.
    pub fn raw(&mut self, key: &str) -> Option<String> {
        let hit = self.lookup(key)?;
        let v = hit.0.clone();
        self.resolved.insert(key.to_string(), hit);
        Some(v)
    }

    pub fn opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) if v.is_empty() || v == "none" => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| bad_value(key, &v, e)),
        }
    }

    pub fn get<T: FromStr>(&mut self, key: &str, default: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let (v, src) = self.lookup(key).unwrap_or_else(|| (default.to_string(), Source::Default));
        let parsed = v.parse().map_err(|e| bad_value(key, &v, e))?;
        self.resolved.insert(key.to_string(), (v, src));
        Ok(parsed)
    }

    pub fn required<T: FromStr>(&mut self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.opt(key)?.ok_or_else(|| {
            CliError::config(format!(
                "missing required setting `{key}` (flag --{}, env {ENV_PREFIX}{})",
                key.replace('_', "-"),
                key.to_ascii_uppercase()
            ))
        })
    }

    /// Comma-separated list.
    pub fn list(&mut self, key: &str) -> Vec<String> {
        self.raw(key)
            .map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
            .unwrap_or_default()
    }

    pub fn flag(&mut self, key: &str) -> Result<bool, CliError> {
        self.get::<String>(key, "false").and_then(|v| match v.as_str() {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            _ => Err(bad_value(key, &v, "expected a boolean")),
        })
    }

    /// Fails on keys in this subcommand's config section that were never read.
    pub fn finish(&self) -> Result<(), CliError> {
        let unknown: Vec<&str> =
            self.section_keys.iter().filter(|k| !self.resolved.contains_key(*k)).map(String::as_str).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::config(format!("unknown key(s) in [{}]: {}", self.command, unknown.join(", "))))
        }
    }

    /// Path-valued key whose file contents, not its location, enter the
    /// configuration hash.
    pub fn hash_by_content(&mut self, key: &str) {
        self.content_keys.insert(key.to_string());
    }

    /// Every resolved key in `key = value` form under the subcommand
    /// header, each annotated with where its value came from. The snapshot
    /// is itself a valid config file.
    pub fn snapshot(&self) -> String {
        let mut s = format!("[{}]\n", self.command);
        for (k, (v, src)) in &self.resolved {
            let src = match src {
                Source::Flag => "flag",
                Source::Env => "env",
                Source::File => "file",
                Source::Default => "default",
            };
            let _ = writeln!(s, "{k} = {v}  # {src}");
        }
        s
    }

    /// SHA-256 over the semantic part of the snapshot, truncated to 16 hex digits.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        for (k, (v, _)) in &self.resolved {
            if NON_SEMANTIC.contains(&k.as_str()) {
                continue;
            }
            let v = if self.content_keys.contains(k) {
                v.split(',').map(content_token).collect::<Vec<_>>().join(",")
            } else {
                v.clone()
            };
            h.update(format!("\n{k}={v}").as_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// `PATH` or `NAME=PATH` with the path replaced by its file digest when readable.
fn content_token(item: &str) -> String {
    let digest = |p: &str| {
        std::fs::read(p).ok().map(|b| Sha256::digest(&b).iter().map(|x| format!("{x:02x}")).collect::<String>())
    };
    if let Some(d) = digest(item) {
        return format!("sha256:{d}");
    }
    match item.split_once('=') {
        Some((name, path)) => match digest(path) {
            Some(d) => format!("{name}=sha256:{d}"),
            None => item.to_string(),
        },
        None => item.to_string(),
    }
}

fn bad_value(key: &str, v: &str, e: impl std::fmt::Display) -> CliError {
    CliError::config(format!("invalid value `{v}` for `{key}`: {e}"))
}

fn flag_map(flags: &impl Serialize) -> BTreeMap<String, String> {
    let value = serde_json::to_value(flags).expect("flag structs serialize");
    let mut out = BTreeMap::new();
    if let serde_json::Value::Object(m) = value {
        for (k, v) in m {
            let s = match v {
                serde_json::Value::Null | serde_json::Value::Bool(false) => continue,
                serde_json::Value::String(s) => s,
                serde_json::Value::Array(a) if a.is_empty() => continue,
                serde_json::Value::Array(a) => {
                    a.iter().map(|x| x.as_str().map_or_else(|| x.to_string(), String::from)).collect::<Vec<_>>().join(",")
                }
                other => other.to_string(),
            };
            out.insert(k, s);
        }
    }
    out
}
