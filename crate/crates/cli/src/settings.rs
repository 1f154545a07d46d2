//! Config files and the effective-config echo.
//!
//! A config file holds `key = value` lines whose keys are long flag names of
//! the chosen subcommand; `#` starts a comment. Flags given on the command line
//! win over the file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Command};
use wordalign::{Error, Result};

pub enum ParseError {
    Clap(clap::Error),
    Core(Error),
}

/// Settings left out of the echo: they do not change any result.
const NOT_ECHOED: [&str; 4] = ["config", "out", "workers", "help"];
const NOT_CONFIGURABLE: [&str; 2] = ["config", "help"];
/// Argument groups, which carry no value of their own.
const GROUPS: [&str; 2] = ["source", "reference"];

pub fn parse_config_text(text: &str, context: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{context}:{}: expected key=value", n + 1)))?;
        let (k, v) = (k.trim().replace('_', "-"), v.trim().to_string());
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(Error::Config(format!("{context}:{}: duplicate key `{k}`", n + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}

fn subcommand_args(cmd: &Command, name: &str) -> Vec<(String, bool)> {
    cmd.find_subcommand(name)
        .map(|sub| {
            sub.get_arguments()
                .filter_map(|a| {
                    let flag = matches!(a.get_action(), ArgAction::SetTrue);
                    a.get_long().map(|l| (l.to_string(), flag))
                })
                .collect()
        })
        .unwrap_or_default()
}

/// Parses the command line, folding in `--config` when present.
pub fn parse(cmd: Command, argv: Vec<OsString>) -> std::result::Result<ArgMatches, ParseError> {
    let strict = |argv: Vec<OsString>| cmd.clone().try_get_matches_from(argv).map_err(ParseError::Clap);
    let Ok(first) = cmd.clone().ignore_errors(true).try_get_matches_from(&argv) else {
        return strict(argv);
    };
    let Some((name, sub)) = first.subcommand() else {
        return strict(argv);
    };
    let Some(path) = sub.get_one::<std::path::PathBuf>("config").cloned() else {
        return strict(argv);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| ParseError::Core(Error::Config(format!("{}: {e}", path.display()))))?;
    let entries = parse_config_text(&text, &path.display().to_string()).map_err(ParseError::Core)?;
    let known = subcommand_args(&cmd, name);

    let mut extra: Vec<OsString> = Vec::new();
    for (key, value) in entries {
        let Some(&(_, is_flag)) = known
            .iter()
            .find(|(k, _)| *k == key && !NOT_CONFIGURABLE.contains(&k.as_str()))
        else {
            return Err(ParseError::Core(Error::Config(format!(
                "{}: unknown key `{key}` for `{name}`",
                path.display()
            ))));
        };
        let id = key.replace('-', "_");
        if sub.value_source(&id) == Some(ValueSource::CommandLine) {
            continue;
        }
        if is_flag {
            match value.as_str() {
                "true" => extra.push(format!("--{key}").into()),
                "false" => {}
                other => {
                    return Err(ParseError::Core(Error::Config(format!(
                        "{}: `{key}` expects true or false, got `{other}`",
                        path.display()
                    ))))
                }
            }
        } else {
            extra.push(format!("--{key}").into());
            extra.push(value.into());
        }
    }
    let mut full = argv;
    full.extend(extra);
    strict(full)
}

/// Every setting of the subcommand that affects results, as strings.
pub fn effective(matches: &ArgMatches) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let Some((_, sub)) = matches.subcommand() else {
        return out;
    };
    for id in sub.ids() {
        let id = id.as_str();
        if NOT_ECHOED.contains(&id) || GROUPS.contains(&id) || sub.value_source(id).is_none() {
            continue;
        }
        let Some(values) = sub.get_raw(id) else {
            continue;
        };
        let joined: Vec<String> = values.map(|v| v.to_string_lossy().into_owned()).collect();
        if joined.is_empty() {
            continue;
        }
        out.insert(id.replace('_', "-"), joined.join(","));
    }
    out
}

pub fn write_echo(dir: &Path, settings: &BTreeMap<String, String>) -> Result<()> {
    let mut text = String::new();
    for (k, v) in settings {
        text.push_str(&format!("{k} = {v}\n"));
    }
    let path = dir.join("config.txt");
    std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text() {
        let got = parse_config_text("# c\nlayer = 3\n\nskip_bad=true # x\n", "f").unwrap();
        assert_eq!(got, [("layer".into(), "3".into()), ("skip-bad".into(), "true".into())]);
        assert!(parse_config_text("layer 3", "f").is_err());
        assert!(parse_config_text("a=1\na=2", "f").is_err());
    }
}
