//! `TPLW1` weight container.
//!
//! Layout: the 5-byte magic `TPLW1`, then zero or more records until end of
//! input. Each record is
//!
//! ```text
//! name_len: u16 LE | name: UTF-8 bytes | rows: u32 LE | cols: u32 LE | rows*cols f64 LE, row-major
//! ```

use std::io::Write;

use crate::adapters::{AdapterConfig, AnyAdapter, LoraAdapter, TopLoraAdapter};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 5] = b"TPLW1";

pub fn write_weights<W: Write>(out: &mut W, entries: &[(&str, &Matrix)]) -> Result<()> {
    out.write_all(MAGIC)?;
    for (name, m) in entries {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Validation(format!("matrix name too long: {} bytes", name.len())))?;
        let rows = u32::try_from(m.rows())
            .map_err(|_| Error::Validation("matrix too large for u32 rows".into()))?;
        let cols = u32::try_from(m.cols())
            .map_err(|_| Error::Validation("matrix too large for u32 cols".into()))?;
        out.write_all(&name_len.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&rows.to_le_bytes())?;
        out.write_all(&cols.to_le_bytes())?;
        for v in m.as_slice() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn encode_weights(entries: &[(&str, &Matrix)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_weights(&mut buf, entries)?;
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos,
                reason: format!(
                    "truncated {what}: need {n} bytes, {} available",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a `TPLW1` buffer into its named matrices, in file order.
pub fn decode_weights(bytes: &[u8]) -> Result<Vec<(String, Matrix)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, expected TPLW1".into(),
        });
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u16("name length")? as usize;
        let name_at = cur.pos;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|e| Error::Format {
                offset: name_at + e.valid_up_to(),
                reason: "name is not valid UTF-8".into(),
            })?
            .to_owned();
        let dims_at = cur.pos;
        let rows = cur.u32("rows")? as usize;
        let cols = cur.u32("cols")? as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::Format {
                offset: dims_at,
                reason: format!("matrix '{name}' has empty shape {rows}x{cols}"),
            });
        }
        let count = rows.checked_mul(cols).and_then(|c| c.checked_mul(8));
        let payload_at = cur.pos;
        let payload = match count {
            Some(c) => cur.take(c, "payload")?,
            None => {
                return Err(Error::Format {
                    offset: dims_at,
                    reason: format!("matrix '{name}' shape {rows}x{cols} overflows"),
                })
            }
        };
        let mut data = Vec::with_capacity(rows * cols);
        for (k, chunk) in payload.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            if !v.is_finite() {
                return Err(Error::Format {
                    offset: payload_at + 8 * k,
                    reason: format!("matrix '{name}' has a non-finite entry"),
                });
            }
            data.push(v);
        }
        let m = Matrix::new(rows, cols, data).expect("shape and finiteness checked");
        out.push((name, m));
    }
    Ok(out)
}

pub fn read_weights_file(path: &std::path::Path) -> Result<Vec<(String, Matrix)>> {
    decode_weights(&std::fs::read(path)?)
}

/// Rebuilds an adapter from `W`, `A`, `B` and optionally `Theta` records.
/// The presence of `Theta` selects the gated kind. `config.rank` must match
/// the row count of `A`.
pub fn adapter_from_entries(entries: Vec<(String, Matrix)>, config: AdapterConfig) -> Result<AnyAdapter> {
    let mut base = None;
    let mut a = None;
    let mut b = None;
    let mut theta = None;
    for (name, m) in entries {
        let slot = match name.as_str() {
            "W" => &mut base,
            "A" => &mut a,
            "B" => &mut b,
            "Theta" => &mut theta,
            other => {
                return Err(Error::Validation(format!("unexpected matrix '{other}' in weight file")))
            }
        };
        if slot.replace(m).is_some() {
            return Err(Error::Validation(format!("duplicate matrix '{name}' in weight file")));
        }
    }
    let missing = |n: &str| Error::Validation(format!("weight file lacks matrix '{n}'"));
    let base = base.ok_or_else(|| missing("W"))?;
    let a = a.ok_or_else(|| missing("A"))?;
    let b = b.ok_or_else(|| missing("B"))?;
    Ok(match theta {
        Some(t) => TopLoraAdapter::from_parts(config, base, a, b, t)?.into(),
        None => LoraAdapter::from_parts(config, base, a, b)?.into(),
    })
}
