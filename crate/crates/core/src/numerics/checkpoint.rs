//! Plain-text checkpoint format.
//!
//! ```text
//! gcl4sr-checkpoint 1
//! meta <key> <value>            (zero or more)
//! tensor <name> <rows> <cols>
//! <cols values>                 (one line per row)
//! ...
//! sha256 <hex digest of every preceding byte>
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a checkpoint
//! reloads bit-exactly.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{NumericsError, Tensor};

const MAGIC: &str = "gcl4sr-checkpoint 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> NumericsError {
    NumericsError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_text(&self) -> String {
        let mut body = String::new();
        body.push_str(MAGIC);
        body.push('\n');
        for (k, v) in &self.meta {
            body.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, t) in &self.tensors {
            body.push_str(&format!("tensor {name} {} {}\n", t.rows(), t.cols()));
            for r in 0..t.rows() {
                let line: Vec<String> = t.row_slice(r).iter().map(|v| format!("{v:?}")).collect();
                body.push_str(&line.join(" "));
                body.push('\n');
            }
        }
        let digest = hex::encode(Sha256::digest(body.as_bytes()));
        body.push_str(&format!("sha256 {digest}\n"));
        body
    }

    pub fn parse(text: &str) -> Result<Self, NumericsError> {
        let trailer_at = text
            .trim_end_matches('\n')
            .rfind('\n')
            .map(|i| i + 1)
            .ok_or_else(|| bad("truncated checkpoint"))?;
        let (body, trailer) = text.split_at(trailer_at);
        let expected = trailer
            .trim()
            .strip_prefix("sha256 ")
            .ok_or_else(|| bad("missing checksum line"))?;
        let actual = hex::encode(Sha256::digest(body.as_bytes()));
        if actual != expected {
            return Err(bad(format!("checksum mismatch: file says {expected}, content hashes to {actual}")));
        }

        let mut lines = body.lines().enumerate();
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => return Err(bad("not a gcl4sr checkpoint (bad magic line)")),
        }
        let mut ck = Checkpoint::default();
        while let Some((no, line)) = lines.next() {
            let mut parts = line.splitn(2, ' ');
            match parts.next() {
                Some("meta") => {
                    let rest = parts.next().unwrap_or("");
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.meta.push((k.to_string(), v.to_string()));
                }
                Some("tensor") => {
                    let fields: Vec<&str> = parts.next().unwrap_or("").split(' ').collect();
                    let [name, rows, cols] = fields[..] else {
                        return Err(bad(format!("line {}: malformed tensor header", no + 1)));
                    };
                    let rows: usize = rows.parse().map_err(|_| bad(format!("line {}: bad row count", no + 1)))?;
                    let cols: usize = cols.parse().map_err(|_| bad(format!("line {}: bad column count", no + 1)))?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (rno, row) = lines.next().ok_or_else(|| bad(format!("tensor {name}: missing rows")))?;
                        for tok in row.split_whitespace() {
                            let v: f64 = tok.parse().map_err(|_| bad(format!("line {}: bad value {tok:?}", rno + 1)))?;
                            data.push(v);
                        }
                    }
                    let t = Tensor::new(rows, cols, data).map_err(|_| bad(format!("tensor {name}: wrong value count")))?;
                    ck.tensors.push((name.to_string(), t));
                }
                _ => return Err(bad(format!("line {}: unexpected record", no + 1))),
            }
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<(), NumericsError> {
        fs::write(path, self.to_text()).map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, NumericsError> {
        let text = fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}
