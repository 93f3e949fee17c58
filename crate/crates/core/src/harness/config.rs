//! INI configuration files and `section.key=value` overrides for
//! [`ExperimentConfig`].

use std::path::Path;

use ini::Ini;
use serde_json::{Map, Value};

use super::pipeline::ExperimentConfig;
use crate::error::{Error, Result};

/// Keys outside any section, or in `[experiment]`, address top-level
/// fields; other sections address the nested field of the same name.
const TOP_SECTION: &str = "experiment";

fn parse_like(existing: &Value, raw: &str, key: &str) -> Result<Value> {
    let raw = raw.trim();
    let bad = || Error::Config(format!("cannot parse `{raw}` for `{key}`"));
    Ok(match existing {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().map_err(|_| bad())?.into(),
        Value::Number(_) => {
            let x: f64 = raw.parse().map_err(|_| bad())?;
            serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(bad)?
        }
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(_) => Value::Array(
            raw.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse::<u64>().map(Value::from).map_err(|_| bad()))
                .collect::<Result<_>>()?,
        ),
        Value::Null => match raw {
            "" | "none" => Value::Null,
            _ => {
                if let Ok(u) = raw.parse::<u64>() {
                    u.into()
                } else if let Some(n) = raw.parse::<f64>().ok().and_then(serde_json::Number::from_f64) {
                    Value::Number(n)
                } else {
                    Value::String(raw.to_string())
                }
            }
        },
        Value::Object(_) => return Err(Error::Config(format!("`{key}` is a section, not a key"))),
    })
}

fn set_path(root: &mut Value, path: &[&str], raw: &str, full: &str) -> Result<()> {
    let unknown = || Error::Config(format!("unknown config key `{full}`"));
    let (last, parents) = path.split_last().ok_or_else(unknown)?;
    let mut node = root;
    for p in parents {
        node = node.get_mut(*p).ok_or_else(unknown)?;
    }
    let obj: &mut Map<String, Value> = node.as_object_mut().ok_or_else(unknown)?;
    let slot = obj.get_mut(*last).ok_or_else(unknown)?;
    *slot = parse_like(slot, raw, full)?;
    Ok(())
}

/// Applies `key=value` overrides, e.g. `nmt.epochs=20` or `k=3`.
pub fn apply_overrides<S: AsRef<str>>(cfg: &ExperimentConfig, overrides: &[S]) -> Result<ExperimentConfig> {
    let mut v = serde_json::to_value(cfg)?;
    for o in overrides {
        let o = o.as_ref();
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        let key = key.trim();
        let path: Vec<&str> = key.split('.').collect();
        set_path(&mut v, &path, value, key)?;
    }
    let out: ExperimentConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
    Ok(out)
}

pub fn parse_ini(text: &str) -> Result<ExperimentConfig> {
    let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let mut overrides = Vec::new();
    for (section, props) in ini.iter() {
        for (k, val) in props.iter() {
            let key = match section {
                None | Some(TOP_SECTION) => k.to_string(),
                Some(s) => format!("{s}.{k}"),
            };
            overrides.push(format!("{key}={val}"));
        }
    }
    apply_overrides(&ExperimentConfig::default(), &overrides)
}

pub fn load_ini(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_ini(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Array(a) => a.iter().map(render).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// Renders the full configuration as INI text that [`parse_ini`] reads
/// back to the same value.
pub fn to_ini(cfg: &ExperimentConfig) -> Result<String> {
    let v = serde_json::to_value(cfg)?;
    let obj = v.as_object().expect("config serializes to an object");
    let mut top = String::from("[experiment]\n");
    let mut sections = String::new();
    for (k, val) in obj {
        match val {
            Value::Object(fields) => {
                sections.push_str(&format!("\n[{k}]\n"));
                for (fk, fv) in fields {
                    sections.push_str(&format!("{fk} = {}\n", render(fv)));
                }
            }
            other => top.push_str(&format!("{k} = {}\n", render(other))),
        }
    }
    Ok(top + &sections)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ini_round_trip_and_overrides() {
        let cfg = ExperimentConfig::default();
        assert_eq!(parse_ini(&to_ini(&cfg).unwrap()).unwrap(), cfg);
        let c = parse_ini("k = 3\nseeds = 4,5\n[nmt]\nepochs = 2\nclip_grad_norm = 1.5\n[cvae]\nlearning_rate = 0.01\n").unwrap();
        assert_eq!((c.k, c.seeds.clone(), c.nmt.epochs), (3, vec![4, 5], 2));
        assert_eq!(c.nmt.clip_grad_norm, Some(1.5));
        assert_eq!(c.cvae.learning_rate, 0.01);
        let d = apply_overrides(&c, &["phrase_source=regions", "translator.dropout=0.3"]).unwrap();
        assert_eq!(d.translator.dropout, 0.3);
        assert!(apply_overrides(&c, &["nmt.nope=1"]).is_err());
        assert!(apply_overrides(&c, &["nmt.epochs=x"]).is_err());
        assert!(apply_overrides(&c, &["phrase_source=bogus"]).is_err());
    }
}
