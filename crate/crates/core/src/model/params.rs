use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Named trainable parameters with seeded initialization.
pub struct ParamStore {
    vars: Vec<(String, Var)>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

pub enum Init {
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    Const(f64),
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        ParamStore { vars: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed), dtype, device }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> candle_core::Result<Tensor> {
        debug_assert!(self.vars.iter().all(|(n, _)| n != name), "duplicate parameter {name}");
        let count: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..count).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Const(v) => vec![v; count],
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.push((name.to_string(), var));
        Ok(out)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn count(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn save(&self, path: &Path) -> candle_core::Result<()> {
        let map: HashMap<String, Tensor> =
            self.vars.iter().map(|(n, v)| (n.clone(), v.as_tensor().clone())).collect();
        candle_core::safetensors::save(&map, path)
    }

    /// Overwrite every parameter from a safetensors file; names and shapes must match.
    pub fn load(&self, path: &Path) -> candle_core::Result<()> {
        let mut map = candle_core::safetensors::load(path, &self.device)?;
        for (name, var) in &self.vars {
            let t = map
                .remove(name)
                .ok_or_else(|| candle_core::Error::Msg(format!("checkpoint lacks parameter {name}")))?;
            if t.dims() != var.dims() {
                candle_core::bail!("parameter {name}: checkpoint shape {:?}, model shape {:?}", t.dims(), var.dims());
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = map.keys().next() {
            candle_core::bail!("checkpoint has unexpected parameter {extra}");
        }
        Ok(())
    }
}
