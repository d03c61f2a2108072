//! Dataset file format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "TSFS"  u32 version  u32 rank  u32 extents[rank]  u32 n_classes
//! u8 split_tag[n_classes]                 (0 train, 1 val, 2 test)
//! { u32 class  f32 values[prod(extents)] }  repeated until end of file
//! ```

use std::path::Path;

use rand::seq::index;
use rand::Rng;

use super::{stream_rng, Family, Split};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TSFS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub input_shape: Vec<usize>,
    pub splits: Vec<Split>,
    /// Class id of each record, in file order.
    pub labels: Vec<usize>,
    /// Record values, `labels.len() × prod(input_shape)`, all exactly
    /// representable as `f32`.
    pub values: Vec<f64>,
    by_class: Vec<Vec<usize>>,
}

fn format_err(record: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Format {
        record: record.into(),
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(what, format!("truncated at byte {}", self.bytes.len())))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl Dataset {
    pub fn new(input_shape: Vec<usize>, splits: Vec<Split>, labels: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let width: usize = input_shape.iter().product();
        if input_shape.is_empty() || width == 0 {
            return Err(Error::invalid(format!("invalid input shape {input_shape:?}")));
        }
        if values.len() != labels.len() * width {
            return Err(Error::invalid(format!(
                "{} values for {} records of width {width}",
                values.len(),
                labels.len()
            )));
        }
        if values.iter().any(|&v| (v as f32) as f64 != v) {
            return Err(Error::invalid("dataset values must be representable as f32"));
        }
        let mut by_class = vec![Vec::new(); splits.len()];
        for (i, &c) in labels.iter().enumerate() {
            by_class
                .get_mut(c)
                .ok_or_else(|| format_err(format!("record {i}"), format!("class {c} out of range")))?
                .push(i);
        }
        Ok(Dataset {
            input_shape,
            splits,
            labels,
            values,
            by_class,
        })
    }

    /// `per_class` canonical-frame examples of every class of `family`,
    /// rounded to `f32`.
    pub fn export(family: &Family, per_class: usize, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, u64::MAX);
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for class in 0..family.n_classes() {
            family.draw(&mut rng, class, per_class, &super::TaskStyle::File, &mut values)?;
            labels.extend(std::iter::repeat_n(class, per_class));
        }
        let values = values.into_iter().map(|v| v as f32 as f64).collect();
        Dataset::new(family.input_shape(), family.splits().to_vec(), labels, values)
    }

    pub fn width(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.by_class[class].len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.splits.len() + self.labels.len() * 4 + self.values.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((self.input_shape.len() as u32).to_le_bytes());
        for &d in &self.input_shape {
            out.extend((d as u32).to_le_bytes());
        }
        out.extend((self.splits.len() as u32).to_le_bytes());
        out.extend(self.splits.iter().map(|s| s.tag()));
        for (i, &c) in self.labels.iter().enumerate() {
            out.extend((c as u32).to_le_bytes());
            for &v in &self.values[i * self.width()..(i + 1) * self.width()] {
                out.extend((v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "header")? != MAGIC {
            return Err(format_err("header", "bad magic, expected TSFS"));
        }
        let version = r.u32("header")?;
        if version != VERSION {
            return Err(format_err("header", format!("unsupported version {version}")));
        }
        let rank = r.u32("header")? as usize;
        if rank == 0 || rank > 8 {
            return Err(format_err("header", format!("implausible rank {rank}")));
        }
        let input_shape = (0..rank)
            .map(|_| r.u32("header").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n_classes = r.u32("header")? as usize;
        let tags = r
            .take(n_classes, "split metadata")
            .map_err(|_| format_err("header", "missing split metadata"))?;
        let splits = tags
            .iter()
            .enumerate()
            .map(|(c, &t)| {
                Split::from_tag(t)
                    .ok_or_else(|| format_err(format!("split tag of class {c}"), format!("invalid tag {t}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let width: usize = input_shape.iter().product();
        if width == 0 {
            return Err(format_err("header", "zero-sized input shape"));
        }
        let mut labels = Vec::new();
        let mut values = Vec::new();
        while r.pos < bytes.len() {
            let name = format!("record {}", labels.len());
            let class = r.u32(&name)? as usize;
            if class >= n_classes {
                return Err(format_err(
                    name,
                    format!("class {class} out of range (n_classes = {n_classes})"),
                ));
            }
            let raw = r.take(width * 4, &name)?;
            values.extend(
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64),
            );
            labels.push(class);
        }
        Dataset::new(input_shape, splits, labels, values)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Dataset::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width()..(i + 1) * self.width()]
    }

    pub(super) fn draw<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        class: usize,
        count: usize,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        let records = &self.by_class[class];
        if records.len() < count {
            return Err(Error::invalid(format!(
                "class {class} has {} examples, episode needs {count}",
                records.len()
            )));
        }
        for i in index::sample(rng, records.len(), count) {
            out.extend_from_slice(self.row(records[i]));
        }
        Ok(())
    }

    pub(super) fn extend_all(&self, class: usize, out: &mut Vec<f64>) {
        for &i in &self.by_class[class] {
            out.extend_from_slice(self.row(i));
        }
    }
}
