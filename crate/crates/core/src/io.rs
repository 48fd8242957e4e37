//! Shared helpers for the line-oriented text formats.
//!
//! Floats are written with Rust's shortest round-trip formatting, so
//! `parse(format(x)) == x` bit for bit for every finite value.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// First 16 hex digits of the SHA-256 of the value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn open_lines(path: &Path) -> Result<LineReader> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(LineReader {
        path: path.to_path_buf(),
        lines: BufReader::new(file).lines(),
        line_no: 0,
    })
}

pub struct LineReader {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
}

impl LineReader {
    pub fn next_line(&mut self) -> Result<Option<String>> {
        match self.lines.next() {
            None => Ok(None),
            Some(Ok(l)) => {
                self.line_no += 1;
                Ok(Some(l))
            }
            Some(Err(e)) => Err(Error::io(&self.path, e)),
        }
    }

    pub fn expect_line(&mut self) -> Result<String> {
        self.next_line()?
            .ok_or_else(|| self.err("unexpected end of file"))
    }

    /// Reads `key value` and returns the value.
    pub fn field(&mut self, key: &str) -> Result<String> {
        let line = self.expect_line()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.to_string()),
            _ => Err(self.err(&format!("expected `{key} <value>`, got `{line}`"))),
        }
    }

    pub fn parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.field(key)?;
        v.parse()
            .map_err(|_| self.err(&format!("bad value for `{key}`: `{v}`")))
    }

    pub fn err(&self, msg: &str) -> Error {
        Error::format(&self.path, format!("line {}: {msg}", self.line_no))
    }
}

pub fn write_line(w: &mut impl Write, path: &Path, line: &str) -> Result<()> {
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

pub fn join_f64(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 20);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&v.to_string());
    }
    s
}

pub fn parse_f64s<'a>(fields: impl Iterator<Item = &'a str>) -> Option<Vec<f64>> {
    fields.map(|f| f.parse().ok()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_text_round_trip_is_exact() {
        let vals = [
            0.1,
            -0.0,
            1e-300,
            123456.789e10,
            f64::MIN_POSITIVE,
            1.0 / 3.0,
        ];
        let s = join_f64(&vals);
        let back = parse_f64s(s.split(' ')).unwrap();
        for (a, b) in vals.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        assert_eq!(config_hash(&(1, 2)), config_hash(&(1, 2)));
        assert_ne!(config_hash(&(1, 2)), config_hash(&(2, 1)));
        assert_eq!(config_hash(&1).len(), 16);
    }
}
