//! `key = value` config files layered under command-line flags.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::ArgMatches;

use crate::{CliError, Knobs};

/// Parsed lines as `(line number, key, value)`.
pub fn parse_config(text: &str) -> Result<Vec<(usize, String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("config line {}: expected `key = value`", i + 1))
        })?;
        out.push((i + 1, k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

fn set<T: FromStr>(slot: &mut T, line: usize, key: &str, value: &str) -> Result<(), CliError> {
    *slot = value.parse().map_err(|_| {
        CliError::Usage(format!(
            "config line {line}: bad value `{value}` for `{key}`"
        ))
    })?;
    Ok(())
}

/// Fills every knob that was not given on the command line from `--config`.
pub fn apply_config(knobs: &mut Knobs, matches: &ArgMatches) -> Result<(), CliError> {
    let Some(path) = knobs.config.clone() else {
        return Ok(());
    };
    let text = read_text(&path)?;
    for (line, key, value) in parse_config(&text)? {
        let given = matches
            .try_get_raw(&key)
            .ok()
            .and_then(|_| matches.value_source(&key))
            .is_some_and(|s| s == ValueSource::CommandLine);
        if given {
            continue;
        }
        let v = value.as_str();
        match key.as_str() {
            "theta" => set(&mut knobs.theta, line, &key, v)?,
            "np" => set(&mut knobs.np, line, &key, v)?,
            "lambda" => set(&mut knobs.lambda, line, &key, v)?,
            "iou" => set(&mut knobs.iou, line, &key, v)?,
            "k" => set(&mut knobs.k, line, &key, v)?,
            "lr" => knobs.lr = Some(parse_num(line, &key, v)?),
            "epochs" => knobs.epochs = Some(parse_num(line, &key, v)?),
            "seed" => set(&mut knobs.seed, line, &key, v)?,
            "spur_len" => set(&mut knobs.spur_len, line, &key, v)?,
            "gap_dist" => set(&mut knobs.gap_dist, line, &key, v)?,
            "dthr" => set(&mut knobs.dthr, line, &key, v)?,
            "dmatch" => set(&mut knobs.dmatch, line, &key, v)?,
            _ => {
                return Err(CliError::Usage(format!(
                    "config line {line}: unknown key `{key}`"
                )))
            }
        }
    }
    Ok(())
}

fn parse_num<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| {
        CliError::Usage(format!(
            "config line {line}: bad value `{value}` for `{key}`"
        ))
    })
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))
}
