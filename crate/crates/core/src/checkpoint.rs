//! Bit-exact binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TSMD" | version u32 | group count u32
//! group:  name | tensor count u32 | tensor*
//! tensor: name | rank u32 | extents u32[rank] | f64[numel]
//! name:   length u32 | utf-8 bytes
//! ```
//!
//! Parameter sets and optimizer moments are ordinary groups. Counters (step,
//! seed, optimizer step counts, ...) live in the `state` group as scalars
//! whose 64 bits carry the integer unchanged.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::meta::OptimState;
use crate::params::ParamSet;

const MAGIC: &[u8; 4] = b"TSMD";
const VERSION: u32 = 1;
const STATE: &str = "state";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    groups: Vec<(String, ParamSet)>,
    state: BTreeMap<String, u64>,
}

fn format_err(record: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Format {
        record: record.into(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn set_group(&mut self, name: &str, params: ParamSet) {
        assert_ne!(name, STATE, "reserved group name");
        match self.groups.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = params,
            None => self.groups.push((name.to_string(), params)),
        }
    }

    pub fn group(&self, name: &str) -> Option<&ParamSet> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn require(&self, name: &str) -> Result<&ParamSet> {
        self.group(name)
            .ok_or_else(|| format_err(format!("group {name}"), "missing from checkpoint"))
    }

    pub fn group_names(&self) -> impl Iterator<Item = &str> {
        self.groups.iter().map(|(n, _)| n.as_str())
    }

    pub fn set_u64(&mut self, key: &str, v: u64) {
        self.state.insert(key.to_string(), v);
    }

    pub fn set_f64(&mut self, key: &str, v: f64) {
        self.set_u64(key, v.to_bits());
    }

    pub fn u64(&self, key: &str) -> Option<u64> {
        self.state.get(key).copied()
    }

    pub fn f64(&self, key: &str) -> Option<f64> {
        self.u64(key).map(f64::from_bits)
    }

    pub fn require_u64(&self, key: &str) -> Result<u64> {
        self.u64(key)
            .ok_or_else(|| format_err(format!("state {key}"), "missing from checkpoint"))
    }

    /// Stores the moments under `{prefix}.adam_m` / `{prefix}.adam_v` and
    /// the step count under `{prefix}.optim_step`.
    pub fn set_optim(&mut self, prefix: &str, state: &OptimState) {
        self.set_u64(&format!("{prefix}.optim_step"), state.step);
        if let (Some(m), Some(v)) = (&state.m, &state.v) {
            self.set_group(&format!("{prefix}.adam_m"), m.clone());
            self.set_group(&format!("{prefix}.adam_v"), v.clone());
        }
    }

    pub fn optim(&self, prefix: &str) -> OptimState {
        OptimState {
            step: self.u64(&format!("{prefix}.optim_step")).unwrap_or(0),
            m: self.group(&format!("{prefix}.adam_m")).cloned(),
            v: self.group(&format!("{prefix}.adam_v")).cloned(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, (self.groups.len() + 1) as u32);
        for (name, params) in &self.groups {
            put_name(&mut out, name);
            put_u32(&mut out, params.len() as u32);
            for (n, t) in params.iter() {
                put_tensor(&mut out, n, t.shape(), t.data().iter().copied());
            }
        }
        put_name(&mut out, STATE);
        put_u32(&mut out, self.state.len() as u32);
        for (k, &v) in &self.state {
            put_tensor(&mut out, k, &[], [f64::from_bits(v)]);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "header")? != MAGIC {
            return Err(format_err("header", "bad magic, not a checkpoint"));
        }
        let version = r.u32("header")?;
        if version != VERSION {
            return Err(format_err("header", format!("unsupported version {version}")));
        }
        let mut ck = Checkpoint::new();
        for g in 0..r.u32("header")? {
            let group = r.name(&format!("group {g}"))?;
            let count = r.u32(&group)?;
            let mut entries = Vec::with_capacity(count as usize);
            for i in 0..count {
                let what = format!("{group} tensor {i}");
                let name = r.name(&what)?;
                let rank = r.u32(&what)?;
                let shape = (0..rank)
                    .map(|_| r.u32(&what).map(|d| d as usize))
                    .collect::<Result<Vec<_>>>()?;
                let n: usize = shape.iter().product();
                let data = r.take(
                    n.checked_mul(8).ok_or_else(|| format_err(&what, "extents overflow"))?,
                    &what,
                )?;
                let values = data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                entries.push((name, shape, values));
            }
            if group == STATE {
                for (name, shape, values) in entries {
                    let values: Vec<f64> = values;
                    if !shape.is_empty() {
                        return Err(format_err(format!("state {name}"), "expected a scalar"));
                    }
                    ck.state.insert(name, values[0].to_bits());
                }
            } else {
                let tensors = entries
                    .into_iter()
                    .map(|(name, shape, values)| Ok((name, Tensor::new(shape, values)?)))
                    .collect::<Result<Vec<_>>>()?;
                ck.groups.push((group, ParamSet::new(tensors)?));
            }
        }
        if r.pos != bytes.len() {
            return Err(format_err(
                "trailer",
                format!("{} unexpected trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(ck)
    }

    /// Writes atomically through a temporary file in the same directory.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Checkpoint::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: impl IntoIterator<Item = f64>) {
    put_name(out, name);
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u32(out, d as u32);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(what, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn name(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| format_err(what, "name is not utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let p = ParamSet::new(vec![
            (
                "w".into(),
                Tensor::new(vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 0.1]).unwrap(),
            ),
            ("b".into(), Tensor::scalar(std::f64::consts::PI)),
        ])
        .unwrap();
        let mut ck = Checkpoint::new();
        ck.set_group("student", p.clone());
        ck.set_optim(
            "student",
            &OptimState {
                step: 7,
                m: Some(p.scale(0.5)),
                v: Some(p.map(|x| x * x)),
            },
        );
        ck.set_u64("seed", u64::MAX);
        ck.set_f64("best_val_acc", 0.123456789);
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert!(back.require("student").unwrap().bits_eq(ck.group("student").unwrap()));
        assert_eq!(back.optim("student"), ck.optim("student"));
        assert_eq!(back.u64("seed"), Some(u64::MAX));
        assert_eq!(back.f64("best_val_acc"), Some(0.123456789));
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn header_layout() {
        let bytes = Checkpoint::new().to_bytes();
        assert_eq!(&bytes[..4], b"TSMD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
        assert!(matches!(
            Checkpoint::load(dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
