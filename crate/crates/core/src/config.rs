//! Plain-text `key=value` configuration maps.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type ConfigMap = BTreeMap<String, String>;

/// Parses `key=value` lines; `#` starts a comment, blank lines are ignored.
pub fn parse_config(text: &str) -> Result<ConfigMap> {
    let mut map = ConfigMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {raw:?}", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", lineno + 1)));
        }
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

pub fn render_config(map: &ConfigMap) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Overwrites `*slot` with the parsed value of `key` when present.
pub fn read_key<T>(map: &ConfigMap, key: &str, slot: &mut T) -> Result<()>
where
    T: FromStr,
    T::Err: Display,
{
    if let Some(v) = map.get(key) {
        *slot = v
            .parse()
            .map_err(|e| Error::config(format!("{key}={v}: {e}")))?;
    }
    Ok(())
}

pub fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "1" | "true" | "on" | "yes" => Ok(true),
        "0" | "false" | "off" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}={v}: expected a boolean"))),
    }
}

pub fn read_bool(map: &ConfigMap, key: &str, slot: &mut bool) -> Result<()> {
    if let Some(v) = map.get(key) {
        *slot = parse_bool(key, v)?;
    }
    Ok(())
}

/// Parses `AxBxC` extents.
pub fn parse_dims<const N: usize>(s: &str) -> Result<[usize; N]> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != N {
        return Err(Error::config(format!("expected {N} extents separated by 'x', got {s:?}")));
    }
    let mut out = [0usize; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("bad extent {p:?} in {s:?}")))?;
        if *o == 0 {
            return Err(Error::config(format!("zero extent in {s:?}")));
        }
    }
    Ok(out)
}

pub fn format_dims(d: &[usize]) -> String {
    d.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x")
}
