use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{contract, Result};

/// Named, ordered collection of trainable tensors belonging to one network.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(contract!("parameter {name} registered twice"));
        }
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    /// Registers a parameter drawn from `N(0, std^2)`.
    pub fn normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        self.insert(name, values, shape)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![0.0; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Detached copies of every parameter, keyed `prefix + name`.
    pub fn export(&self, prefix: &str) -> Result<HashMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((format!("{prefix}{k}"), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites every parameter with the tensor stored under `prefix + name`.
    pub fn import(&self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (k, v) in &self.vars {
            let key = format!("{prefix}{k}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| crate::error::Error::Data(format!("missing tensor {key}")))?;
            if t.dims() != v.dims() {
                return Err(crate::error::Error::Data(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    t.dims(),
                    v.dims()
                )));
            }
            v.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        self.import(&other.export("")?, "")
    }

    /// SHA-256 over names, shapes and little-endian values, in name order.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.vars {
            h.update(k.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// `shadow <- beta * shadow + (1 - beta) * live`, parameter by parameter.
pub fn ema_update(shadow: &ParamStore, live: &ParamStore, beta: f64) -> Result<()> {
    if shadow.len() != live.len() {
        return Err(contract!(
            "EMA shadow has {} parameters, live network {}",
            shadow.len(),
            live.len()
        ));
    }
    for ((ks, s), (kl, l)) in shadow.vars.iter().zip(live.vars.iter()) {
        if ks != kl {
            return Err(contract!("EMA parameter mismatch: {ks} vs {kl}"));
        }
        let next = ((s.as_tensor().detach() * beta)? + (l.as_tensor().detach() * (1.0 - beta))?)?;
        s.set(&next)?;
    }
    Ok(())
}
