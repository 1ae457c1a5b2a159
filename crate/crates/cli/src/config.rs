//! Flat TOML config files. Each `key = value` pair becomes `--key value` right
//! after the subcommand, so flags given on the command line come later and win.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{ArgAction, CommandFactory};

use crate::args::Cli;

#[derive(Debug)]
pub enum ConfigError {
    Read(PathBuf, std::io::Error),
    Parse(PathBuf, String),
    Key(PathBuf, String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Read(p, e) => write!(f, "config {}: {e}", p.display()),
            ConfigError::Parse(p, e) => write!(f, "config {}: {e}", p.display()),
            ConfigError::Key(p, e) => write!(f, "config {}: {e}", p.display()),
        }
    }
}

/// Returns `argv` with the config file's options spliced in, or unchanged
/// when no `--config` is given.
pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>, ConfigError> {
    let Some(sub_pos) = argv.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map(|p| p + 1) else {
        return Ok(argv);
    };
    let Some(path) = find_config(&argv[sub_pos + 1..]) else {
        return Ok(argv);
    };
    let sub = argv[sub_pos].to_string_lossy().into_owned();
    let cmd = Cli::command();
    let Some(sub_cmd) = cmd.find_subcommand(&sub) else {
        return Ok(argv);
    };

    let text = fs::read_to_string(&path).map_err(|e| ConfigError::Read(path.clone(), e))?;
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(path.clone(), e.to_string()))?;
    let mut injected = Vec::new();
    for (key, value) in &table {
        let long = key.replace('_', "-");
        let arg = sub_cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(long.as_str()) && long != "config")
            .ok_or_else(|| ConfigError::Key(path.clone(), format!("unknown key `{key}` for `{sub}`")))?;
        let flag = matches!(arg.get_action(), ArgAction::SetTrue);
        let bad = |what: &str| ConfigError::Key(path.clone(), format!("`{key}`: {what}"));
        match value {
            toml::Value::Boolean(b) if flag => {
                if *b {
                    injected.push(OsString::from(format!("--{long}")));
                }
            }
            _ if flag => return Err(bad("expected true or false")),
            v => {
                injected.push(OsString::from(format!("--{long}")));
                injected.push(OsString::from(scalar_or_list(v).ok_or_else(|| bad("expected a string, number or list"))?));
            }
        }
    }
    let mut out = argv[..=sub_pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[sub_pos + 1..]);
    Ok(out)
}

fn find_config(args: &[OsString]) -> Option<PathBuf> {
    let mut path = None;
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = it.next().map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    path
}

fn scalar(v: &toml::Value) -> Option<String> {
    match v {
        toml::Value::String(s) => Some(s.clone()),
        toml::Value::Integer(i) => Some(i.to_string()),
        toml::Value::Float(x) => Some(x.to_string()),
        _ => None,
    }
}

fn scalar_or_list(v: &toml::Value) -> Option<String> {
    match v {
        toml::Value::Array(items) => items.iter().map(scalar).collect::<Option<Vec<_>>>().map(|v| v.join(",")),
        other => scalar(other),
    }
}
