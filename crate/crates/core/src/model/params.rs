use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Which side of the frozen/trainable split a parameter sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Part of the pre-trained denoiser; frozen while the conditioning is trained.
    Base,
    /// Conditioning branch: spatial encoder, zero cross-attention, channel expansion, exemplar embedder.
    Adapter,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub var: Var,
    pub role: ParamRole,
}

impl ParamEntry {
    /// Layer-level group: the name without its final component.
    pub fn group(&self) -> &str {
        self.name.rsplit_once('.').map_or(self.name.as_str(), |(g, _)| g)
    }
}

/// Flat, ordered collection of named parameters.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    entries: Vec<ParamEntry>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self { dtype, device, entries: Vec::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.var.elem_count()).sum()
    }

    pub fn vars_with_role(&self, role: ParamRole) -> Vec<Var> {
        self.entries.iter().filter(|e| e.role == role).map(|e| e.var.clone()).collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.entries.iter().map(|e| e.var.clone()).collect()
    }

    fn add(&mut self, name: String, role: ParamRole, value: Tensor) -> Result<Tensor> {
        if self.get(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&value)?;
        let t = var.as_tensor().clone();
        self.entries.push(ParamEntry { name, var, role });
        Ok(t)
    }

    /// Flattened f64 copy of one parameter.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let e = self.get(name).ok_or_else(|| Error::InvalidArgument(format!("no parameter {name}")))?;
        Ok(e.var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
    }

    /// Overwrite a parameter in place from f64 values.
    pub fn set_values(&self, name: &str, values: &[f64]) -> Result<()> {
        let e = self.get(name).ok_or_else(|| Error::InvalidArgument(format!("no parameter {name}")))?;
        let shape = e.var.shape().clone();
        if shape.elem_count() != values.len() {
            return Err(Error::Shape(format!("{name}: {} values for shape {shape:?}", values.len())));
        }
        let t = Tensor::from_slice(values, shape, &self.device)?.to_dtype(self.dtype)?;
        e.var.set(&t)?;
        Ok(())
    }

    /// Bitwise snapshot of every parameter with `role`.
    pub fn snapshot(&self, role: ParamRole) -> Result<Vec<(String, Vec<f64>)>> {
        self.entries
            .iter()
            .filter(|e| e.role == role)
            .map(|e| Ok((e.name.clone(), self.values(&e.name)?)))
            .collect()
    }

    /// Largest absolute change since `snapshot`.
    pub fn max_change(&self, snapshot: &[(String, Vec<f64>)]) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (name, before) in snapshot {
            let now = self.values(name)?;
            for (a, b) in now.iter().zip(before) {
                // NaN-safe: any difference, including a NaN, counts as infinite change
                let d = (a - b).abs();
                worst = if d.is_nan() { f64::INFINITY } else { worst.max(d) };
            }
        }
        Ok(worst)
    }
}

/// Scoped parameter creation with deterministic initialization.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: String,
    role: ParamRole,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, role: ParamRole) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: String::new(), role }
    }

    /// Run `f` with `name` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() { name.to_string() } else { format!("{saved}.{name}") };
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn with_role<T>(&mut self, role: ParamRole, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let saved = self.role;
        self.role = role;
        let out = f(self);
        self.role = saved;
        out
    }

    /// Reseed so that a structurally identical build reproduces the same values.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.store.add(full, self.role, t)
    }
}
