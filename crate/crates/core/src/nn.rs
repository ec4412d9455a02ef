//! Named parameters and the small set of layers the networks are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::{self, Padding};

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, var: Var) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, var);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|v| v.elem_count()).sum()
    }

    pub fn extend(&mut self, other: &ParamStore) -> Result<()> {
        for (k, v) in other.iter() {
            self.insert(k.clone(), v.clone())?;
        }
        Ok(())
    }

    /// Snapshot of every parameter value, detached from the graph.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Overwrite parameter values in place; every name must be present
    /// with a matching shape.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.entries {
            let value = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if value.dims() != var.dims() {
                return Err(Error::dim(format!("parameter {name}"), var.dims(), value.dims()));
            }
            var.set(&value.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

/// Weight initialization scheme for convolution and linear layers.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitScheme {
    /// N(0, std²) for weights, zero biases.
    Normal { std: f64 },
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::Normal { std: 0.02 }
    }
}

/// Creates parameters under a name prefix, drawing initial values from a
/// seeded generator so that construction is reproducible.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    scheme: InitScheme,
    device: Device,
}

impl<'a> Init<'a> {
    pub fn new(
        store: &'a mut ParamStore,
        rng: &'a mut ChaCha8Rng,
        prefix: &str,
        scheme: InitScheme,
    ) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
            scheme,
            device: Device::Cpu,
        }
    }

    fn name(&self, local: &str) -> String {
        if self.prefix.is_empty() {
            local.to_string()
        } else {
            format!("{}.{local}", self.prefix)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn tensor(&mut self, local: &str, value: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&value.to_dtype(DType::F32)?)?;
        self.store.insert(self.name(local), var.clone())?;
        Ok(var)
    }

    pub fn weights(&mut self, local: &str, dims: &[usize]) -> Result<Var> {
        let n: usize = dims.iter().product();
        let values: Vec<f32> = match self.scheme {
            InitScheme::Normal { std } => {
                let dist = Normal::new(0.0f32, std as f32)
                    .map_err(|e| Error::Config(format!("init std: {e}")))?;
                (0..n).map(|_| dist.sample(self.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, dims, &self.device)?;
        self.tensor(local, t)
    }

    pub fn constant(&mut self, local: &str, dims: &[usize], value: f32) -> Result<Var> {
        let t = Tensor::full(value, dims, &self.device)?;
        self.tensor(local, t)
    }

    pub fn conv(
        &mut self,
        local: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        pad: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Conv2d> {
        let weight = self.weights(&format!("{local}.weight"), &[out_c, in_c, kernel, kernel])?;
        let bias = self.constant(&format!("{local}.bias"), &[out_c], 0.0)?;
        Ok(Conv2d {
            weight,
            bias,
            pad,
            stride,
            padding,
        })
    }

    pub fn linear(&mut self, local: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
        let weight = self.weights(&format!("{local}.weight"), &[out_dim, in_dim])?;
        let bias = self.constant(&format!("{local}.bias"), &[out_dim], 0.0)?;
        Ok(Linear { weight, bias })
    }

    pub fn layer_norm(&mut self, local: &str, dim: usize) -> Result<LayerNorm> {
        let gamma = self.constant(&format!("{local}.weight"), &[dim], 1.0)?;
        let beta = self.constant(&format!("{local}.bias"), &[dim], 0.0)?;
        Ok(LayerNorm { gamma, beta })
    }

    /// Draws a fresh seed for a sub-component from this initializer's stream.
    pub fn fork_seed(&mut self) -> u64 {
        self.rng.random()
    }
}

/// Whether a forward pass should let gradients reach the layer's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grad {
    Track,
    Frozen,
}

fn param(var: &Var, grad: Grad) -> Tensor {
    match grad {
        Grad::Track => var.as_tensor().clone(),
        Grad::Frozen => var.as_tensor().detach(),
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub pad: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor, grad: Grad) -> Result<Tensor> {
        ops::conv2d(
            x,
            &param(&self.weight, grad),
            Some(&param(&self.bias, grad)),
            self.pad,
            self.stride,
            self.padding,
        )
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Sets the weight to the identity (square layers only) and the bias to 0.
    pub fn set_identity(&self) -> Result<()> {
        let (o, i) = (self.out_dim(), self.in_dim());
        if o != i {
            return Err(Error::Config(format!("identity init needs a square layer, got {o}x{i}")));
        }
        self.weight.set(&Tensor::eye(o, DType::F32, &Device::Cpu)?)?;
        self.bias.set(&Tensor::zeros(o, DType::F32, &Device::Cpu)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, self.gamma.as_tensor(), self.beta.as_tensor())
    }
}
