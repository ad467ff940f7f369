//! Flat `key = value` configuration files and flag resolution.
//!
//! Keys are the long flag names. A flag given on the command line wins over
//! the file, the file wins over the built-in default. Every resolved value is
//! recorded so the manifest can replay the run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use mdsvm_core::Error;

pub fn parse(text: &str) -> Result<BTreeMap<String, String>, Error> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key = value, got {raw:?}", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("config line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("config line {}: duplicate key {k}", n + 1)));
        }
    }
    Ok(out)
}

pub struct Resolver {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    snapshot: BTreeMap<String, String>,
}

impl Resolver {
    pub fn new(config: Option<&Path>) -> Result<Self, Error> {
        let file = match config {
            Some(p) => parse(&std::fs::read_to_string(p)?)?,
            None => BTreeMap::new(),
        };
        Ok(Self {
            file,
            used: BTreeSet::new(),
            snapshot: BTreeMap::new(),
        })
    }

    fn file_value<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, Error>
    where
        T::Err: fmt::Display,
    {
        self.used.insert(key.to_string());
        self.file
            .get(key)
            .map(|raw| raw.parse().map_err(|e| Error::Config(format!("config key {key}: {e}"))))
            .transpose()
    }

    /// Flag, else config file, else `default`.
    pub fn get<T: FromStr + fmt::Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, Error>
    where
        T::Err: fmt::Display,
    {
        let file = self.file_value(key)?;
        let v = flag.or(file).unwrap_or(default);
        self.snapshot.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Like [`Resolver::get`] for values without a default.
    pub fn opt<T: FromStr + fmt::Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, Error>
    where
        T::Err: fmt::Display,
    {
        let file = self.file_value(key)?;
        let v = flag.or(file);
        if let Some(v) = &v {
            self.snapshot.insert(key.to_string(), v.to_string());
        }
        Ok(v)
    }

    pub fn require<T: FromStr + fmt::Display>(&mut self, key: &str, flag: Option<T>) -> Result<T, Error>
    where
        T::Err: fmt::Display,
    {
        self.opt(key, flag)?
            .ok_or_else(|| Error::Config(format!("--{key} is required (flag or config key)")))
    }

    /// Rejects config keys no option consumed.
    pub fn finish(self) -> Result<BTreeMap<String, String>, Error> {
        if let Some(k) = self.file.keys().find(|k| !self.used.contains(*k)) {
            return Err(Error::Config(format!("unknown config key {k}")));
        }
        Ok(self.snapshot)
    }
}

/// Comma or space separated integers, e.g. `64,64,32`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dims(pub Vec<usize>);

impl FromStr for Dims {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|p| !p.is_empty())
            .map(|p| p.parse().map_err(|_| format!("not a non-negative integer: {p:?}")))
            .collect::<Result<Vec<_>, _>>()
            .map(Dims)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl Dims {
    pub fn triple(&self, key: &str) -> Result<[usize; 3], Error> {
        <[usize; 3]>::try_from(self.0.as_slice())
            .map_err(|_| Error::Config(format!("--{key} needs three extents, got {self}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn render(values: &BTreeMap<String, String>) -> String {
        values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    #[test]
    fn parses_comments_and_blank_lines() {
        let m = parse("# run\nepochs = 3\n\nlr=0.01 # fast\n").unwrap();
        assert_eq!(m["epochs"], "3");
        assert_eq!(m["lr"], "0.01");
        assert_eq!(parse(&render(&m)).unwrap(), m);
    }

    #[test]
    fn rejects_malformed_lines_and_duplicates() {
        assert!(parse("epochs 3").is_err());
        assert!(parse("a = 1\na = 2").is_err());
    }

    #[test]
    fn flags_win_over_the_file() {
        let mut r = Resolver {
            file: parse("epochs = 3\nlr = 0.5").unwrap(),
            used: BTreeSet::new(),
            snapshot: BTreeMap::new(),
        };
        assert_eq!(r.get("epochs", Some(7usize), 1).unwrap(), 7);
        assert_eq!(r.get("lr", None, 1e-3).unwrap(), 0.5);
        assert_eq!(r.get("seed", None, 4u64).unwrap(), 4);
        let snap = r.finish().unwrap();
        assert_eq!(snap["epochs"], "7");
        assert_eq!(snap["seed"], "4");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut r = Resolver {
            file: parse("epochz = 3").unwrap(),
            used: BTreeSet::new(),
            snapshot: BTreeMap::new(),
        };
        r.get("epochs", None, 1usize).unwrap();
        assert!(matches!(r.finish(), Err(Error::Config(_))));
    }

    #[test]
    fn dims_round_trip() {
        let d: Dims = "64, 64 32".parse().unwrap();
        assert_eq!(d, Dims(vec![64, 64, 32]));
        assert_eq!(d.to_string().parse::<Dims>().unwrap(), d);
        assert_eq!(d.triple("shape").unwrap(), [64, 64, 32]);
        assert!(Dims(vec![1, 2]).triple("shape").is_err());
    }
}
