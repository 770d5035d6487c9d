//! Named parameter tensors, gradient maps and the SRFT tensor file format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Tape, TapeGrads, Var};
use crate::error::{shape_err, Error, Result};

const SRFT_MAGIC: &[u8; 4] = b"SRFT";
const SRFT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if dims.iter().product::<usize>() != values.len() {
            return shape_err(format!("tensor {name}: dims {dims:?} vs {} values", values.len()));
        }
        Ok(Self { name, dims, values })
    }

    pub fn zeros(name: impl Into<String>, dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            name: name.into(),
            dims,
            values: vec![0.0; n],
        }
    }

    /// Layout on the tape: first dim as rows, the rest flattened; rank-1
    /// tensors become a single row.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.dims.len() {
            0 => (1, 1),
            1 => (1, self.dims[0]),
            _ => (self.dims[0], self.dims[1..].iter().product()),
        }
    }
}

/// Latent code (shape `θ` or appearance `φ`) of one object.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self((0..dim).map(|_| normal.sample(rng)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn mean<'a>(codes: impl IntoIterator<Item = &'a LatentCode>) -> Option<LatentCode> {
        let mut it = codes.into_iter();
        let first = it.next()?;
        let mut acc = first.0.clone();
        let mut n = 1.0;
        for c in it {
            acc.iter_mut().zip(&c.0).for_each(|(a, b)| *a += b);
            n += 1.0;
        }
        acc.iter_mut().for_each(|a| *a /= n);
        Some(LatentCode(acc))
    }

    pub fn as_tensor(&self, name: impl Into<String>) -> ParamTensor {
        ParamTensor {
            name: name.into(),
            dims: vec![self.dim()],
            values: self.0.clone(),
        }
    }
}

/// Ordered set of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: Vec<ParamTensor>,
    index: BTreeMap<String, usize>,
}

/// Tape handles for every tensor of a [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("no tape variable for {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Gradients keyed by tensor name. Latent codes appear under their table
/// names (`theta/<id>`, `phi/<id>`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub tensors: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.tensors.get(name).map(Vec::as_slice)
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Vec<f64>) {
        self.tensors.insert(name.into(), g);
    }

    /// Collects the gradients of every trainable tensor in `vars`.
    pub fn collect(&mut self, tape: &Tape, grads: &TapeGrads, vars: &ParamVars) {
        for (name, v) in vars.iter() {
            if tape.requires_grad(*v) {
                let len = tape.value(*v).len();
                self.tensors.insert(name.clone(), grads.get_or_zeros(*v, len));
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().flatten().all(|v| v.is_finite())
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, t: ParamTensor) -> Result<()> {
        if self.index.contains_key(&t.name) {
            return Err(Error::InvalidArgument(format!("duplicate tensor name {}", t.name)));
        }
        self.index.insert(t.name.clone(), self.tensors.len());
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.index.get(name).map(|i| &self.tensors[*i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.index.get(name).map(|i| &mut self.tensors[*i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flat_map(|t| &t.values).all(|v| v.is_finite())
    }

    /// Places every tensor on the tape as a leaf.
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let (r, c) = t.matrix_shape();
                (t.name.clone(), tape.leaf(t.values.clone(), r, c, trainable))
            })
            .collect();
        ParamVars { vars }
    }

    /// Zero-filled copy with identical names and dims.
    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for t in &self.tensors {
            out.insert(ParamTensor::zeros(t.name.clone(), t.dims.clone())).expect("unique names");
        }
        out
    }

    pub fn fill(&mut self, v: f64) {
        self.tensors.iter_mut().for_each(|t| t.values.fill(v));
    }

    /// Uniform fan-in initialization: weights in `±sqrt(6 / fan_in)`, biases zero.
    pub fn kaiming_uniform<R: Rng + ?Sized>(&mut self, fan_in: &BTreeMap<String, usize>, rng: &mut R) {
        for t in &mut self.tensors {
            match fan_in.get(&t.name) {
                Some(f) => {
                    let bound = (6.0 / *f as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                    t.values.iter_mut().for_each(|v| *v = dist.sample(rng));
                }
                None => t.values.fill(0.0),
            }
        }
    }
}

pub fn write_srft<'a, W: Write>(mut w: W, tensors: impl IntoIterator<Item = &'a ParamTensor>) -> Result<()> {
    let tensors: Vec<&ParamTensor> = tensors.into_iter().collect();
    w.write_all(SRFT_MAGIC)?;
    w.write_all(&SRFT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {}", t.name)))?;
        let rank = u8::try_from(t.dims.len()).map_err(|_| Error::Format("tensor rank above 255".into()))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[rank])?;
        for d in &t.dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in &t.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_srft<R: Read>(mut r: R) -> Result<Vec<ParamTensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SRFT_MAGIC {
        return Err(Error::Format("not an SRFT file".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != SRFT_VERSION {
        return Err(Error::Format(format!("unsupported SRFT version {version}")));
    }
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            r.read_exact(&mut b4)?;
            dims.push(u32::from_le_bytes(b4) as usize);
        }
        let n: usize = dims.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(ParamTensor { name, dims, values });
    }
    Ok(out)
}

pub fn save_srft<'a>(path: &Path, tensors: impl IntoIterator<Item = &'a ParamTensor>) -> Result<()> {
    let mut buf = Vec::new();
    write_srft(&mut buf, tensors)?;
    crate::io::write_atomic(path, &buf)
}

pub fn load_srft(path: &Path) -> Result<Vec<ParamTensor>> {
    read_srft(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn srft_layout() {
        let t = ParamTensor::new("ab", vec![2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_srft(&mut buf, [&t]).unwrap();
        let mut expect = b"SRFT".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u16.to_le_bytes());
        expect.extend(b"ab");
        expect.push(1);
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f64.to_le_bytes());
        expect.extend((-2.5f64).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamSet::new();
        s.insert(ParamTensor::zeros("w", vec![2])).unwrap();
        assert!(s.insert(ParamTensor::zeros("w", vec![3])).is_err());
        assert!(ParamTensor::new("x", vec![2, 2], vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn srft_round_trip(
            values in proptest::collection::vec(proptest::num::f64::ANY, 0..40),
            name in "[a-z/0-9._-]{1,20}",
        ) {
            let n = values.len();
            let t = ParamTensor::new(name, vec![n], values).unwrap();
            let mut buf = Vec::new();
            write_srft(&mut buf, [&t]).unwrap();
            let back = read_srft(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].name, &t.name);
            prop_assert!(back[0].values.iter().zip(&t.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
