//! `key = value` config files, merged underneath command-line flags.

use std::fs;

use cdcd::{CdcdError, Result};

pub const SUBCOMMANDS: [&str; 5] = ["simulate", "fit", "predict", "benchmark", "report"];

/// Parses a config file into flag tokens. Keys are long flag names without
/// the leading dashes; `true` turns a switch on, `false` leaves it off.
pub fn parse_config(text: &str, source: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CdcdError::input(format!("{source}:{}: expected 'key = value', got '{line}'", lineno + 1))
        })?;
        let key = key.trim().trim_start_matches('-');
        let value = value.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(CdcdError::input(format!("{source}:{}: invalid key '{key}'", lineno + 1)));
        }
        match value {
            "true" => out.push(format!("--{key}")),
            "false" => {}
            v => {
                out.push(format!("--{key}"));
                out.push(v.trim_matches('"').to_string());
            }
        }
    }
    Ok(out)
}

/// Finds `--config <path>` / `--config=<path>` ahead of the subcommand.
fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        if SUBCOMMANDS.contains(&a.as_str()) {
            break;
        }
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

/// Inserts config-file flags right after the subcommand name so that any
/// flag repeated on the command line overrides them.
pub fn merge_config(args: Vec<String>) -> Result<Vec<String>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| CdcdError::io(&path, e))?;
    let extra = parse_config(&text, &path)?;
    let Some(pos) = args.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(args);
    };
    let mut merged = args[..=pos].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&args[pos + 1..]);
    Ok(merged)
}
