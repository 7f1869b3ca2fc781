//! `--config` expansion: file entries become long flags inserted right after
//! the subcommand name, so anything typed on the command line overrides
//! them.

use std::ffi::OsString;
use std::path::Path;

use clap::Command;
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("--config needs a file path")]
    MissingPath,
    #[error("reading config {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("config key `{key}` is not a flag of `{command}`")]
    UnknownKey { key: String, command: String },
    #[error("config key `{key}` has an unsupported value")]
    BadValue { key: String },
}

fn load(path: &Path) -> Result<Value, ConfigError> {
    let err = |reason: String| ConfigError::Read { path: path.display().to_string(), reason };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    } else {
        let v: toml::Value = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
        serde_json::to_value(v).map_err(|e| err(e.to_string()))
    }
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn to_flags(key: &str, value: &Value, takes_value: bool) -> Result<Vec<OsString>, ConfigError> {
    let flag = OsString::from(format!("--{key}"));
    let bad = || ConfigError::BadValue { key: key.to_string() };
    Ok(match value {
        Value::Bool(true) if !takes_value => vec![flag],
        Value::Bool(false) if !takes_value => vec![],
        Value::Array(items) => {
            let parts = items.iter().map(scalar).collect::<Option<Vec<_>>>().ok_or_else(bad)?;
            vec![flag, parts.join(",").into()]
        }
        v => vec![flag, scalar(v).ok_or_else(bad)?.into()],
    })
}

/// Remove `--config FILE` from `raw` and splice the file's flags in after
/// the subcommand.
pub fn expand(raw: Vec<OsString>, cmd: &Command) -> Result<Vec<OsString>, ConfigError> {
    let mut args = Vec::with_capacity(raw.len());
    let mut config = None;
    let mut it = raw.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            config = Some(it.next().ok_or(ConfigError::MissingPath)?);
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(OsString::from(p));
        } else {
            args.push(a);
        }
    }
    let Some(config) = config else { return Ok(args) };
    let Some(pos) = args.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map(|p| p + 1) else {
        return Ok(args);
    };
    let name = args[pos].to_string_lossy().into_owned();
    let Some(sub) = cmd.find_subcommand(&name) else { return Ok(args) };
    let flags: Vec<(String, bool)> = sub
        .get_arguments()
        .filter_map(|a| a.get_long().map(|l| (l.to_string(), a.get_action().takes_values())))
        .collect();
    let lookup = |k: &str| flags.iter().find(|(l, _)| l == k).map(|f| f.1);

    let doc = load(Path::new(&config))?;
    let mut extra = Vec::new();
    if let Value::Object(top) = &doc {
        for (k, v) in top {
            if v.is_object() {
                continue;
            }
            // shared keys apply wherever the subcommand understands them
            if let Some(takes) = lookup(k) {
                extra.extend(to_flags(k, v, takes)?);
            }
        }
        if let Some(Value::Object(own)) = top.get(&name) {
            for (k, v) in own {
                let takes = lookup(k).ok_or_else(|| ConfigError::UnknownKey { key: k.clone(), command: name.clone() })?;
                extra.extend(to_flags(k, v, takes)?);
            }
        }
    }
    args.splice(pos + 1..pos + 1, extra);
    Ok(args)
}
