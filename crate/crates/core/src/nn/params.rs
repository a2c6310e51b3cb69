use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tape, Tensor, Var, DTYPE_NAME};

const MAGIC: &[u8; 4] = b"DYNW";
const VERSION: u32 = 1;
const DTYPE_CODE: u8 = if cfg!(feature = "f64") { 1 } else { 0 };
const ELEM_BYTES: usize = std::mem::size_of::<Elem>();

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

/// Tape handles for the parameters of one store, looked up by name.
#[derive(Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn extend(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bound { vars: iter.into_iter().collect() }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Marks parameters non-trainable. `pattern` is an exact name, a
    /// prefix ending in `*`, or `*` for everything. A pattern that matches
    /// nothing is a usage error. Returns the number of matched parameters.
    pub fn freeze(&mut self, pattern: &str) -> Result<usize> {
        self.set_trainable(pattern, false)
    }

    pub fn unfreeze(&mut self, pattern: &str) -> Result<usize> {
        self.set_trainable(pattern, true)
    }

    fn set_trainable(&mut self, pattern: &str, trainable: bool) -> Result<usize> {
        let matches = |name: &str| match pattern.strip_suffix('*') {
            Some(prefix) => name.starts_with(prefix),
            None => name == pattern,
        };
        let mut n = 0;
        for (name, p) in self.params.iter_mut() {
            if matches(name) {
                p.trainable = trainable;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Usage(format!("no parameter matches `{pattern}`")));
        }
        Ok(n)
    }

    /// Records every parameter as a tape leaf. Only trainable parameters
    /// track gradients, and only when `track` is set.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone(), track && p.trainable)))
            .collect();
        Bound { vars }
    }

    /// Bitwise equality of names, flags, shapes and data.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((na, a), (nb, b))| {
                na == nb && a.trainable == b.trainable && a.value.bit_eq(&b.value)
            })
    }

    /// Serializes into the `DYNW` weight format (little-endian).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + self.numel() * ELEM_BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(DTYPE_CODE);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in &self.params {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Usage(format!("parameter name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.trainable as u8);
            let rank = u8::try_from(p.value.rank())
                .map_err(|_| Error::Usage(format!("rank too large for `{name}`")))?;
            out.push(rank);
            for &d in p.value.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Usage(format!("dimension too large in `{name}`")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format { offset: 0, message: "bad magic, expected DYNW".into() });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format { offset: 4, message: format!("unsupported version {version}") });
        }
        match r.u8("dtype")? {
            c if c == DTYPE_CODE => {}
            0 => return Err(Error::Dtype { expected: DTYPE_NAME, found: "f32" }),
            1 => return Err(Error::Dtype { expected: DTYPE_NAME, found: "f64" }),
            other => return Err(Error::Format { offset: 8, message: format!("unknown dtype code {other}") }),
        }
        let count = r.u32("tensor count")?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_at = r.pos;
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Format { offset: name_at as u64 + 2, message: "name is not UTF-8".into() })?
                .to_owned();
            let flag_at = r.pos;
            let trainable = match r.u8("trainable flag")? {
                0 => false,
                1 => true,
                f => return Err(Error::Format { offset: flag_at as u64, message: format!("bad trainable flag {f}") }),
            };
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let data_at = r.pos;
            let n: usize = shape.iter().product();
            let raw = r.take(n * ELEM_BYTES, "tensor data")?;
            let data = raw
                .chunks_exact(ELEM_BYTES)
                .map(|c| Elem::from_le_bytes(c.try_into().expect("chunk has element width")))
                .collect();
            let value = Tensor::new(shape, data)
                .map_err(|e| Error::Format { offset: data_at as u64, message: e.to_string() })?;
            store
                .insert(name, value, trainable)
                .map_err(|e| Error::Format { offset: name_at as u64, message: e.to_string() })?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format { offset: r.pos as u64, message: "trailing bytes".into() });
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            }),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::from_fn(vec![2, 3], |i| i as Elem * 0.1 - 0.2), true).unwrap();
        s.insert("a.bias", Tensor::zeros(vec![2]), false).unwrap();
        s
    }

    #[test]
    fn exact_header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[0..4], b"DYNW");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(bytes[8], DTYPE_CODE);
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(&bytes[13..15], &8u16.to_le_bytes());
        assert_eq!(&bytes[15..23], b"a.weight");
        assert_eq!(bytes[23], 1);
        assert_eq!(bytes[24], 2);
        assert_eq!(&bytes[25..29], &2u32.to_le_bytes());
        assert_eq!(&bytes[29..33], &3u32.to_le_bytes());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let back = ParamStore::from_bytes(&s.to_bytes().unwrap()).unwrap();
        assert!(back.bit_eq(&s));
        assert_eq!(back, s);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 10, 20, bytes.len() - 1] {
            match ParamStore::from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(ParamStore::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(ParamStore::from_bytes(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn other_dtype_is_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 1 - DTYPE_CODE;
        assert!(matches!(ParamStore::from_bytes(&bytes), Err(Error::Dtype { .. })));
    }

    #[test]
    fn freeze_patterns() {
        let mut s = sample();
        assert_eq!(s.freeze("a.*").unwrap(), 2);
        assert!(s.iter().all(|(_, p)| !p.trainable));
        assert_eq!(s.unfreeze("a.weight").unwrap(), 1);
        assert!(matches!(s.freeze("b.*"), Err(Error::Usage(_))));
        assert!(matches!(s.freeze("a.w"), Err(Error::Usage(_))));
        assert_eq!(s.freeze("*").unwrap(), 2);
    }
}
