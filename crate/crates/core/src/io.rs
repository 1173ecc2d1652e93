//! Plain-text field container.
//!
//! ```text
//! kintomo N=3 B=8 Mz=33 A=1 sigma=0.5 h=0.125
//! meta kind=bundle
//! array G 3 9 9 33
//! <values, row-major, one line per innermost row>
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so write → read
//! reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &str = "kintomo";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Header {
    pub n: usize,
    pub b: usize,
    pub mz: usize,
    pub a: f64,
    pub sigma: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<Array>,
}

impl Container {
    pub fn new(header: Header) -> Self {
        Self {
            header,
            meta: BTreeMap::new(),
            arrays: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "array {name}: shape does not match data length"
        );
        assert!(!name.contains(char::is_whitespace) && !name.is_empty());
        self.arrays.push(Array {
            name: name.to_string(),
            shape,
            data,
        });
    }

    pub fn array(&self, name: &str) -> Result<&Array> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("missing meta key `{key}`")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        let s = self.meta_str(key)?;
        s.parse()
            .map_err(|_| Error::Format(format!("meta `{key}` is not a number: {s}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        let got = self.meta_str("kind")?;
        if got != kind {
            return Err(Error::Format(format!("expected a `{kind}` file, found `{got}`")));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let h = &self.header;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{MAGIC} N={} B={} Mz={} A={} sigma={} h={}",
            h.n, h.b, h.mz, h.a, h.sigma, h.h
        );
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta {k}={v}");
        }
        for arr in &self.arrays {
            s.push_str("array ");
            s.push_str(&arr.name);
            for d in &arr.shape {
                let _ = write!(s, " {d}");
            }
            s.push('\n');
            let row = arr.shape.last().copied().unwrap_or(1).max(1);
            for chunk in arr.data.chunks(row) {
                let mut first = true;
                for v in chunk {
                    if !first {
                        s.push(' ');
                    }
                    first = false;
                    let _ = write!(s, "{v}");
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty file".into()))?;
        let header = parse_header(first)?;
        let mut out = Container::new(header);
        let mut pending: Option<(String, Vec<usize>, Vec<f64>, usize)> = None;
        for (lineno, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some((name, _, data, total)) = pending.as_mut() {
                for tok in line.split_ascii_whitespace() {
                    data.push(tok.parse().map_err(|_| {
                        Error::Format(format!("line {}: bad number `{tok}`", lineno + 2))
                    })?);
                }
                if data.len() > *total {
                    return Err(Error::Format(format!("array `{name}` has too many values")));
                }
                if data.len() == *total {
                    let (name, shape, data, _) = pending.take().unwrap();
                    out.arrays.push(Array { name, shape, data });
                }
                continue;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| Error::Format(format!("bad meta line `{line}`")))?;
                out.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("array ") {
                let mut toks = rest.split_ascii_whitespace();
                let name = toks
                    .next()
                    .ok_or_else(|| Error::Format("array without a name".into()))?
                    .to_string();
                let shape = toks
                    .map(|t| {
                        t.parse::<usize>()
                            .map_err(|_| Error::Format(format!("bad dimension `{t}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let total: usize = shape.iter().product();
                if total == 0 {
                    out.arrays.push(Array {
                        name,
                        shape,
                        data: vec![],
                    });
                } else {
                    pending = Some((name, shape, Vec::with_capacity(total), total));
                }
            } else {
                return Err(Error::Format(format!("unexpected line {}: `{line}`", lineno + 2)));
            }
        }
        if let Some((name, _, data, total)) = pending {
            return Err(Error::Format(format!(
                "array `{name}` truncated: {} of {total} values",
                data.len()
            )));
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn parse_header(line: &str) -> Result<Header> {
    let mut toks = line.split_ascii_whitespace();
    if toks.next() != Some(MAGIC) {
        return Err(Error::Format("not a kintomo container".into()));
    }
    let mut kv = BTreeMap::new();
    for t in toks {
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header token `{t}`")))?;
        kv.insert(k, v);
    }
    let get = |k: &str| {
        kv.get(k)
            .copied()
            .ok_or_else(|| Error::Format(format!("header lacks `{k}`")))
    };
    let int = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("header `{k}` is not an integer")))
    };
    let real = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("header `{k}` is not a number")))
    };
    Ok(Header {
        n: int("N")?,
        b: int("B")?,
        mz: int("Mz")?,
        a: real("A")?,
        sigma: real("sigma")?,
        h: real("h")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header() -> Header {
        Header {
            n: 3,
            b: 8,
            mz: 33,
            a: 1.0,
            sigma: 0.5,
            h: 0.125,
        }
    }

    #[test]
    fn header_line_comes_first() {
        let c = Container::new(header()).with_meta("kind", "bundle");
        let text = c.to_text();
        assert!(text.starts_with("kintomo N=3 B=8 Mz=33 A=1 sigma=0.5 h=0.125\n"));
        assert_eq!(Container::parse(&text).unwrap(), c);
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let mut c = Container::new(header());
        c.push("x", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let text = c.to_text();
        let cut = &text[..text.len() - 4];
        assert!(Container::parse(cut).is_err());
        assert!(Container::parse("hello N=1").is_err());
        assert!(Container::parse("").is_err());
    }

    #[test]
    fn missing_items_are_reported() {
        let c = Container::new(header()).with_meta("kind", "medium");
        assert!(c.array("m").is_err());
        assert!(c.expect_kind("bundle").is_err());
        assert!(c.expect_kind("medium").is_ok());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            data in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 1..200),
            a in 0.01f64..10.0,
        ) {
            let mut h = header();
            h.a = a;
            let mut c = Container::new(h).with_meta("kind", "test");
            let len = data.len();
            c.push("v", vec![len], data.clone());
            c.push("empty", vec![0], vec![]);
            let back = Container::parse(&c.to_text()).unwrap();
            let got = &back.array("v").unwrap().data;
            prop_assert_eq!(back.header.a.to_bits(), a.to_bits());
            for (x, y) in got.iter().zip(&data) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
