use candle_core::{Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::ops::{device, DTYPE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Uniform(f64),
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl ParamStore {
    pub(crate) fn init<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut names = Vec::with_capacity(specs.len());
        let mut vars = Vec::with_capacity(specs.len());
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f64> = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform(a) => {
                    let dist = Uniform::new_inclusive(-a, a)
                        .map_err(|e| Error::Config(format!("bad init range: {e}")))?;
                    (0..n).map(|_| dist.sample(rng)).collect()
                }
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std)
                        .map_err(|e| Error::Config(format!("bad init std: {e}")))?;
                    (0..n).map(|_| dist.sample(rng)).collect()
                }
            };
            names.push(spec.name.clone());
            vars.push(Var::from_vec(data, spec.shape.as_slice(), &device())?);
        }
        Ok(Self { names, vars })
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn scalar_count(&self) -> usize {
        self.vars.iter().map(|v| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i].as_tensor())
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn to_arrays(&self) -> Result<Vec<NamedArray>> {
        self.names
            .iter()
            .zip(&self.vars)
            .map(|(name, var)| {
                Ok(NamedArray {
                    name: name.clone(),
                    shape: var.dims().to_vec(),
                    data: var.flatten_all()?.to_vec1::<f64>()?,
                })
            })
            .collect()
    }

    /// Overwrites every parameter from `arrays`, which must match names
    /// and shapes exactly.
    pub fn load_arrays(&self, arrays: &[NamedArray]) -> Result<()> {
        if arrays.len() != self.vars.len() {
            return Err(Error::Shape(format!(
                "checkpoint holds {} arrays, model expects {}",
                arrays.len(),
                self.vars.len()
            )));
        }
        for ((name, var), arr) in self.names.iter().zip(&self.vars).zip(arrays) {
            if &arr.name != name || arr.shape != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter {name} {:?} does not match checkpoint entry {} {:?}",
                    var.dims(),
                    arr.name,
                    arr.shape
                )));
            }
            if arr.data.len() != var.elem_count() {
                return Err(Error::Shape(format!("parameter {name} has the wrong element count")));
            }
            var.set(&Tensor::from_vec(arr.data.clone(), arr.shape.as_slice(), &device())?)?;
        }
        Ok(())
    }

    /// Deep copy with independent storage.
    pub fn duplicate(&self) -> Result<Self> {
        let vars = self
            .vars
            .iter()
            .map(|v| Var::from_tensor(&v.as_tensor().copy()?))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            names: self.names.clone(),
            vars,
        })
    }

    pub(crate) fn check_dtype(&self) -> Result<()> {
        if self.vars.iter().any(|v| v.dtype() != DTYPE) {
            return Err(Error::Config("parameters must be f64".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}
