//! Binary checkpoints.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "QNOA" version
//! repeated until end of file:
//!     name_len name(UTF-8) rank dim_0 .. dim_{rank-1} values(f64 LE, row-major)
//! ```
//!
//! Network parameters are stored under `policy/`, `value/`, `target_value/`
//! and `prior_policy/`; scalars needed to resume live under `meta/`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::flow::{FlowConfig, FlowPolicy};
use crate::nn::ParamTree;
use crate::softq::{SoftQ, ValueFunction};
use crate::Error;

pub const MAGIC: &[u8; 4] = b"QNOA";
pub const VERSION: u32 = 1;

pub const POLICY_PREFIX: &str = "policy/";
pub const VALUE_PREFIX: &str = "value/";
pub const TARGET_PREFIX: &str = "target_value/";
pub const PRIOR_PREFIX: &str = "prior_policy/";
const META_PREFIX: &str = "meta/";

/// One named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl Entry {
    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self { name: name.into(), dims: vec![1], values: vec![value] }
    }
}

fn to_u32(x: usize, what: &str) -> Result<u32, Error> {
    u32::try_from(x).map_err(|_| Error::Format(format!("{what} {x} does not fit in u32")))
}

pub fn write_entries<W: Write>(out: &mut W, entries: &[Entry]) -> Result<(), Error> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for e in entries {
        let count: usize = e.dims.iter().product();
        if count != e.values.len() {
            return Err(Error::Format(format!("entry {:?} has {} values for dims {:?}", e.name, e.values.len(), e.dims)));
        }
        out.write_all(&to_u32(e.name.len(), "name length")?.to_le_bytes())?;
        out.write_all(e.name.as_bytes())?;
        out.write_all(&to_u32(e.dims.len(), "rank")?.to_le_bytes())?;
        for &d in &e.dims {
            out.write_all(&to_u32(d, "dimension")?.to_le_bytes())?;
        }
        for v in &e.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads `u32` or reports a clean end of file as `None`.
fn read_u32_or_eof<R: Read>(input: &mut R) -> Result<Option<u32>, Error> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match input.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(Error::Format("truncated length field".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(u32::from_le_bytes(buf)))
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<(), Error> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(input: &mut R, what: &str) -> Result<u32, Error> {
    let mut buf = [0u8; 4];
    read_exact(input, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_entries<R: Read>(input: &mut R) -> Result<Vec<Entry>, Error> {
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic, "header")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(input, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut entries = Vec::new();
    while let Some(len) = read_u32_or_eof(input)? {
        let mut name = vec![0u8; len as usize];
        read_exact(input, &mut name, "entry name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let rank = read_u32(input, "rank")?;
        let dims = (0..rank).map(|_| read_u32(input, "dimension").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let count = count.ok_or_else(|| Error::Format(format!("entry {name:?} is too large")))?;
        let mut raw = vec![0u8; count.checked_mul(8).ok_or_else(|| Error::Format("entry too large".into()))?];
        read_exact(input, &mut raw, "values")?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        entries.push(Entry { name, dims, values });
    }
    Ok(entries)
}

/// Entries for every parameter of `tree`, names prefixed.
pub fn tree_entries(prefix: &str, tree: &ParamTree) -> Vec<Entry> {
    tree.iter()
        .map(|(name, shape, values)| Entry { name: format!("{prefix}{name}"), dims: shape.to_vec(), values: values.to_vec() })
        .collect()
}

/// Collects the entries under `prefix` into a tree, in file order.
pub fn entries_to_tree(prefix: &str, entries: &[Entry]) -> Result<ParamTree, Error> {
    let mut tree = ParamTree::new();
    for e in entries.iter().filter(|e| e.name.starts_with(prefix)) {
        tree.insert(&e.name[prefix.len()..], e.dims.clone(), e.values.clone())?;
    }
    if tree.is_empty() {
        return Err(Error::Format(format!("no entries under {prefix:?}")));
    }
    Ok(tree)
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub nets: SoftQ,
    pub flow: FlowConfig,
    pub step: u64,
    pub alpha: f64,
}

impl Checkpoint {
    pub fn entries(&self) -> Vec<Entry> {
        let policy = self.nets.policy();
        let mut out = vec![
            Entry::scalar("meta/step", self.step as f64),
            Entry::scalar("meta/alpha", self.alpha),
            Entry::scalar("meta/state_dim", policy.state_dim() as f64),
            Entry::scalar("meta/action_dim", policy.action_dim() as f64),
            Entry::scalar("meta/coupling_layers", self.flow.coupling_layers as f64),
            Entry::scalar("meta/scale_bound", self.flow.scale_bound),
            Entry::scalar("meta/boundary_eps", self.flow.boundary_eps),
        ];
        out.extend(tree_entries(POLICY_PREFIX, policy.params()));
        out.extend(tree_entries(VALUE_PREFIX, self.nets.value_fn().params()));
        out.extend(tree_entries(TARGET_PREFIX, self.nets.target().params()));
        out.extend(tree_entries(PRIOR_PREFIX, self.nets.prior().params()));
        out
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self, Error> {
        let meta = |key: &str| -> Result<f64, Error> {
            let name = format!("{META_PREFIX}{key}");
            entries
                .iter()
                .find(|e| e.name == name)
                .and_then(|e| e.values.first().copied())
                .ok_or_else(|| Error::Format(format!("missing {name}")))
        };
        let count = |key: &str| -> Result<usize, Error> {
            let x = meta(key)?;
            if x >= 0.0 && x.fract() == 0.0 && x < u32::MAX as f64 {
                Ok(x as usize)
            } else {
                Err(Error::Format(format!("meta/{key} = {x} is not a count")))
            }
        };
        let (state_dim, action_dim) = (count("state_dim")?, count("action_dim")?);
        let first = entries_to_tree(POLICY_PREFIX, entries)?;
        let mut hidden: Vec<usize> = (0..)
            .map_while(|k| first.index_of(&format!("coupling0/scale/layer{k}/v")))
            .map(|i| first.shape(i)[0])
            .collect();
        hidden.pop();
        let flow = FlowConfig {
            coupling_layers: count("coupling_layers")?,
            hidden,
            scale_bound: meta("scale_bound")?,
            boundary_eps: meta("boundary_eps")?,
        };
        let flow_from = |prefix| -> Result<FlowPolicy, Error> {
            FlowPolicy::from_params(action_dim, state_dim, &flow, entries_to_tree(prefix, entries)?)
        };
        let nets = SoftQ::from_parts(
            flow_from(POLICY_PREFIX)?,
            flow_from(PRIOR_PREFIX)?,
            ValueFunction::from_params(entries_to_tree(VALUE_PREFIX, entries)?)?,
            ValueFunction::from_params(entries_to_tree(TARGET_PREFIX, entries)?)?,
        )?;
        let alpha = meta("alpha")?;
        Ok(Self { nets, flow, step: count("step")? as u64, alpha })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_entries(&mut buf, &self.entries()).expect("in-memory write");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, Error> {
        Self::from_entries(&read_entries(&mut bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_entry_layout() {
        let mut buf = Vec::new();
        write_entries(&mut buf, &[Entry { name: "x".into(), dims: vec![2], values: vec![1.0, -2.5] }]).unwrap();
        let mut expected = b"QNOA".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(b"x");
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        expected.extend((-2.5f64).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(read_entries(&mut buf.as_slice()).unwrap()[0].values, vec![1.0, -2.5]);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(matches!(read_entries(&mut &b"QNOB\x01\0\0\0"[..]), Err(Error::Format(_))));
        assert!(matches!(read_entries(&mut &b"QNOA\x02\0\0\0"[..]), Err(Error::Format(_))));
        assert!(matches!(read_entries(&mut &b"QNOA\x01\0\0\0\x05\0"[..]), Err(Error::Format(_))));
        assert!(matches!(read_entries(&mut &b"QN"[..]), Err(Error::Format(_))));
    }
}
