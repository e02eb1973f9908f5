//! Plain-text parameter snapshots that round-trip bit for bit.
//!
//! ```text
//! FHA-LAB-CHECKPOINT 1
//! meta <key> <value>
//! block <name> <rank> <dim>...
//! <16 hex digits per f64, space separated>
//! end
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "FHA-LAB-CHECKPOINT 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    meta: Vec<(String, String)>,
    blocks: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: &str) {
        assert!(
            !key.contains(char::is_whitespace) && !value.contains('\n'),
            "checkpoint meta must be single-token keys and single-line values"
        );
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value.to_string(),
            None => self.meta.push((key.to_string(), value.to_string())),
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing meta `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("meta `{key}` has unparsable value `{raw}`")))
    }

    pub fn push_block(&mut self, name: &str, tensor: Tensor) {
        assert!(!name.contains(char::is_whitespace), "block names are single tokens");
        self.blocks.push((name.to_string(), tensor));
    }

    pub fn block(&self, name: &str) -> Result<&Tensor> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing block `{name}`")))
    }

    pub fn block_names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, t) in &self.blocks {
            let _ = write!(out, "block {name} {}", t.rank());
            for d in t.shape() {
                let _ = write!(out, " {d}");
            }
            out.push('\n');
            let words: Vec<String> = t.data().iter().map(|v| format!("{:016x}", v.to_bits())).collect();
            out.push_str(&words.join(" "));
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Checkpoint(format!("line {line}: {msg}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(bad(1, "missing header")),
        }
        let mut ckpt = Checkpoint::new();
        while let Some((no, line)) = lines.next() {
            if line == "end" {
                return Ok(ckpt);
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ckpt.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("block ") {
                let fields: Vec<&str> = rest.split_whitespace().collect();
                if fields.len() < 2 {
                    return Err(bad(no, "block header needs a name and rank"));
                }
                let rank: usize = fields[1].parse().map_err(|_| bad(no, "bad rank"))?;
                if fields.len() != 2 + rank {
                    return Err(bad(no, "block header dims do not match rank"));
                }
                let shape = fields[2..]
                    .iter()
                    .map(|d| d.parse::<usize>().map_err(|_| bad(no, "bad dimension")))
                    .collect::<Result<Vec<_>>>()?;
                let (dno, data_line) = lines.next().ok_or_else(|| bad(no, "block without data"))?;
                let data = data_line
                    .split_whitespace()
                    .map(|w| {
                        u64::from_str_radix(w, 16)
                            .map(f64::from_bits)
                            .map_err(|_| bad(dno, "bad hex word"))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let tensor = Tensor::new(shape, data).map_err(|_| bad(dno, "value count does not match shape"))?;
                ckpt.blocks.push((fields[0].to_string(), tensor));
            } else {
                return Err(bad(no, "unrecognised line"));
            }
        }
        Err(Error::Checkpoint("truncated: no `end` line".into()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
