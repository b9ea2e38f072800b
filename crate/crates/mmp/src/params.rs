use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorOf;

const CHECKPOINT_MAGIC: &[u8; 4] = b"MMPC";
const CHECKPOINT_VERSION: u16 = 1;

struct Param<F: Scalar> {
    value: TensorOf<F>,
    grad: Vec<F>,
}

/// Named parameter tensors with per-parameter gradient slots.
///
/// Iteration order is insertion order, so identical construction sequences
/// iterate identically.
pub struct ParameterStoreOf<F: Scalar> {
    params: IndexMap<String, Param<F>>,
}

impl<F: Scalar> Default for ParameterStoreOf<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParameterStoreOf<F> {
    pub fn new() -> Self {
        ParameterStoreOf {
            params: IndexMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: TensorOf<F>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!(
                "parameter {name:?} registered twice"
            )));
        }
        let grad = vec![F::zero(); value.len()];
        self.params.insert(
            name.to_string(),
            Param {
                value: value.detach().with_grad(true),
                grad,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&TensorOf<F>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn grad(&self, name: &str) -> Result<&[F]> {
        self.params
            .get(name)
            .map(|p| p.grad.as_slice())
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub(crate) fn set_grad(&mut self, name: &str, grad: &[F]) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        if p.grad.len() != grad.len() {
            return Err(Error::Contract(format!(
                "gradient slot for {name:?} has length {}, got {}",
                p.grad.len(),
                grad.len()
            )));
        }
        p.grad.copy_from_slice(grad);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(F::zero());
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// In-place update of a parameter's raw values; shape is fixed at
    /// registration.
    pub fn update<U: FnOnce(&mut [F], &[F])>(&mut self, name: &str, f: U) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        let grad = p.grad.clone();
        f(p.value.data_mut(), &grad);
        Ok(())
    }

    pub fn set_value(&mut self, name: &str, data: &[F]) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        if p.value.len() != data.len() {
            return Err(Error::Contract(format!(
                "parameter {name:?} has {} values, got {}",
                p.value.len(),
                data.len()
            )));
        }
        p.value.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<(String, Vec<F>)> {
        self.params
            .iter()
            .map(|(n, p)| (n.clone(), p.value.data().to_vec()))
            .collect()
    }

    pub fn restore(&mut self, snap: &[(String, Vec<F>)]) -> Result<()> {
        for (name, data) in snap {
            self.set_value(name, data)?;
        }
        Ok(())
    }
}

impl ParameterStoreOf<f64> {
    /// Serialize to the MMPC checkpoint format. Round-trips bitwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, p) in &self.params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(p.value.shape().len() as u8);
            for &e in p.value.shape() {
                buf.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let magic = r.take_exact(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let version = r.read_u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let mut store = ParameterStoreOf::new();
        while !r.at_end() {
            let name_len = r.read_u32()? as usize;
            let name_bytes = r.take_exact(name_len, "parameter name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::format(r.pos, "parameter name is not UTF-8"))?
                .to_string();
            let rank = r.take_exact(1, "rank")?[0] as usize;
            if rank > 3 {
                return Err(Error::format(r.pos, format!("rank {rank} exceeds 3")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u64()? as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(f64::from_le_bytes(
                    r.take_exact(8, "float payload")?.try_into().unwrap(),
                ));
            }
            store.register(&name, TensorOf::new(&shape, data)?)?;
        }
        Ok(store)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn at_end(&self) -> bool {
        self.pos as usize >= self.bytes.len()
    }

    fn take_exact(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let start = self.pos as usize;
        if start + n > self.bytes.len() {
            return Err(Error::format(self.pos, format!("truncated while reading {what}")));
        }
        self.pos += n as u64;
        Ok(&self.bytes[start..start + n])
    }

    fn read_u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take_exact(2, "u16")?.try_into().unwrap(),
        ))
    }

    fn read_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take_exact(4, "u32")?.try_into().unwrap(),
        ))
    }

    fn read_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take_exact(8, "u64")?.try_into().unwrap(),
        ))
    }
}
