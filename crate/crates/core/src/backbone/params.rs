use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Init, ParamDecl};
use crate::tensor::{Graph, Tensor};

const MAGIC: &[u8; 4] = b"ELGS";
const VERSION: u16 = 1;

/// Named network parameters.
///
/// Values are kept representable in single precision: initial values are
/// drawn rounded, and a trained set is rounded once at the end. Checkpoints
/// therefore round-trip exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn init(layout: &[ParamDecl], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for decl in layout {
            let n = decl.shape.iter().product();
            let data = match decl.init {
                Init::Zeros => vec![0.0; n],
                Init::Glorot { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a) as f32 as f64).collect()
                }
            };
            let t = Tensor::new(decl.shape.clone(), data)?.with_requires_grad(true);
            if tensors.insert(decl.name.clone(), t).is_some() {
                return Err(Error::contract(format!("duplicate parameter '{}'", decl.name)));
            }
        }
        Ok(Self { tensors })
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        let tensors = tensors.into_iter().map(|(k, t)| (k, t.with_requires_grad(true))).collect();
        Self { tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, t)| (k.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, t)| (k.as_str(), t))
    }

    /// Checks names and shapes against a layout.
    pub fn check_layout(&self, layout: &[ParamDecl]) -> Result<()> {
        if layout.len() != self.tensors.len() {
            return Err(Error::contract(format!(
                "parameter count {} does not match the network's {}",
                self.tensors.len(),
                layout.len()
            )));
        }
        for decl in layout {
            match self.tensors.get(&decl.name) {
                None => return Err(Error::contract(format!("missing parameter '{}'", decl.name))),
                Some(t) if t.shape() != decl.shape.as_slice() => {
                    return Err(Error::dim("check_layout", t.shape(), &decl.shape));
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let mut bound = Bound::default();
        for (name, t) in &self.tensors {
            let v = if t.requires_grad() { g.param(name, t) } else { g.constant(t) };
            bound.insert(name.clone(), v);
        }
        bound
    }

    pub fn clear_grads(&mut self) {
        for t in self.tensors.values_mut() {
            t.clear_grad();
        }
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Format("too many parameters".into()))?;
        w.write_all(&count.to_le_bytes())?;
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
            w.write_all(&[rank])?;
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
                w.write_all(&d.to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(read_array(r)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = u32::from_le_bytes(read_array(r)?);
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(read_array(r)?) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let [rank] = read_array::<1, _>(r)?;
            let shape = (0..rank)
                .map(|_| Ok(u32::from_le_bytes(read_array(r)?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("parameter '{name}': {e}")))?;
            if tensors.insert(name.clone(), t.with_requires_grad(true)).is_some() {
                return Err(Error::Format(format!("duplicate parameter '{name}'")));
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice()).map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
                Error::Format(format!("{}: truncated checkpoint", path.display()))
            }
            e => e,
        })
    }
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}
