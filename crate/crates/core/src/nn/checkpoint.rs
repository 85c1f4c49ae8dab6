//! `WNN1` checkpoint format, little-endian:
//!
//! ```text
//! magic "WNN1" | version u16 | config_len u32 | config JSON (UTF-8)
//! n_groups u16
//! per group:  name_len u8 | name | trainable u8 | n_tensors u32
//!   per tensor: rank u8 | rank x u32 dims | f32 values
//! ```

use crate::error::{Error, Result};

use super::tensor::{ParamGroup, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"WNN1";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint(config_json: &str, groups: &[ParamGroup]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = config_json.as_bytes();
    let cfg_len = u32::try_from(cfg.len()).map_err(|_| Error::ShapeOverflow("config JSON too large".into()))?;
    out.extend_from_slice(&cfg_len.to_le_bytes());
    out.extend_from_slice(cfg);
    let n_groups = u16::try_from(groups.len()).map_err(|_| Error::ShapeOverflow("too many groups".into()))?;
    out.extend_from_slice(&n_groups.to_le_bytes());
    for g in groups {
        let name = g.name.as_bytes();
        let name_len = u8::try_from(name.len()).map_err(|_| Error::arg("group name longer than 255 bytes"))?;
        out.push(name_len);
        out.extend_from_slice(name);
        out.push(g.trainable as u8);
        out.extend_from_slice(&(g.tensors.len() as u32).to_le_bytes());
        for t in &g.tensors {
            let rank = u8::try_from(t.shape().len()).map_err(|_| Error::ShapeOverflow("tensor rank".into()))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::ShapeOverflow(format!("dimension {d}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(Error::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Returns the config JSON and the parameter groups (tensor names empty).
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(String, Vec<ParamGroup>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let cfg_len = r.u32("config")? as usize;
    let config = std::str::from_utf8(r.take(cfg_len, "config")?)
        .map_err(|e| Error::arg(format!("config is not UTF-8: {e}")))?
        .to_owned();
    let n_groups = r.u16("groups")?;
    let mut groups = Vec::with_capacity(n_groups as usize);
    for _ in 0..n_groups {
        let len = r.u8("group name")? as usize;
        let name = std::str::from_utf8(r.take(len, "group name")?)
            .map_err(|e| Error::arg(format!("group name is not UTF-8: {e}")))?
            .to_owned();
        let mut g = ParamGroup::new(name);
        g.trainable = r.u8("group")? != 0;
        let n_tensors = r.u32("group")?;
        for _ in 0..n_tensors {
            let rank = r.u8("tensor")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("tensor")? as usize);
            }
            let size = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|s| s.checked_mul(4).map(|_| s))
                .ok_or_else(|| Error::ShapeOverflow(format!("tensor shape {shape:?}")))?;
            let raw = r.take(size * 4, "tensor values")?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            g.push("", Tensor::new(shape, data)?);
        }
        groups.push(g);
    }
    if r.pos != bytes.len() {
        return Err(Error::arg("trailing bytes after checkpoint"));
    }
    Ok((config, groups))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_errors() {
        let mut g = ParamGroup::new("encoder");
        g.push("w", Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.25, 3.0, 0.0, -0.125]).unwrap());
        let mut d = ParamGroup::new("decoder");
        d.trainable = false;
        d.push("b", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let bytes = encode_checkpoint("{\"a\":1}", &[g.clone(), d.clone()]).unwrap();
        let (cfg, back) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(cfg, "{\"a\":1}");
        assert!(back[0].same_values(&g));
        assert!(back[1].same_values(&d));
        assert!(!back[1].trainable);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 2]), Err(Error::Truncated(_))));
    }
}
