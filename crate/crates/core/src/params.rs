//! Seeded parameter storage.
//!
//! Candle's CPU random generator cannot be seeded, so parameters are created through this
//! store instead of `candle_nn::VarMap`. Every variable is drawn from a ChaCha stream owned by
//! the store, which makes model initialization a pure function of (seed, construction order).

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{FanInOut, NormalOrUniform};
use candle_nn::{Init, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// A named collection of trainable tensors with deterministic initialization.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
        }
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    /// All variables sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().vars.get(name).cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_elements(&self) -> usize {
        self.inner
            .lock()
            .unwrap()
            .vars
            .values()
            .map(|v| v.elem_count())
            .sum()
    }

    /// Overwrites the value of an existing variable, keeping its identity in the graph.
    pub fn assign(&self, name: &str, value: &Tensor) -> crate::Result<()> {
        let var = self.get(name).ok_or_else(|| {
            crate::Error::Checkpoint(format!("unknown parameter `{name}`"))
        })?;
        if var.dims() != value.dims() {
            return Err(crate::error::shape_err!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            ));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    fn sample(
        rng: &mut ChaCha8Rng,
        shape: &Shape,
        init: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up)).collect(),
            Init::Randn { mean, stdev } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    mean + stdev * z
                })
                .collect(),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let fan = fan_for(fan, shape) as f64;
                let std = non_linearity.gain() / fan.sqrt();
                match dist {
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                    NormalOrUniform::Normal => (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(rng);
                            std * z
                        })
                        .collect(),
                }
            }
        };
        Tensor::from_vec(values, shape.clone(), dev)?.to_dtype(dtype)
    }
}

fn fan_for(fan: FanInOut, shape: &Shape) -> usize {
    let dims = shape.dims();
    let receptive: usize = dims.iter().skip(2).product();
    match (fan, dims.len()) {
        (_, 0) => 1,
        (_, 1) => dims[0],
        (FanInOut::FanIn, _) => dims[1] * receptive,
        (FanInOut::FanOut, _) => dims[0] * receptive,
    }
}

impl candle_nn::var_builder::SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(v) = inner.vars.get(name) {
            let t = v.as_tensor();
            if t.shape() != &s {
                candle_core::bail!(
                    "shape mismatch for {name}: stored {:?}, requested {:?}",
                    t.shape(),
                    s
                );
            }
            return t.to_dtype(dtype);
        }
        let value = Self::sample(&mut inner.rng, &s, h, dtype, dev)?;
        let var = Var::from_tensor(&value)?;
        let t = var.as_tensor().clone();
        inner.vars.insert(name.to_string(), var);
        Ok(t)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.inner.lock().unwrap().vars.get(name) {
            Some(v) => v.as_tensor().to_dtype(dtype),
            None => candle_core::bail!("no parameter named {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.inner.lock().unwrap().vars.contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let dev = Device::Cpu;
        let a = ParamStore::new(7);
        let b = ParamStore::new(7);
        let la = candle_nn::linear(4, 3, a.var_builder(DType::F32, &dev).pp("l")).unwrap();
        let lb = candle_nn::linear(4, 3, b.var_builder(DType::F32, &dev).pp("l")).unwrap();
        let wa: Vec<f32> = la.weight().flatten_all().unwrap().to_vec1().unwrap();
        let wb: Vec<f32> = lb.weight().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(wa, wb);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn different_seed_different_values() {
        let dev = Device::Cpu;
        let a = ParamStore::new(1);
        let b = ParamStore::new(2);
        let la = candle_nn::linear(4, 3, a.var_builder(DType::F32, &dev)).unwrap();
        let lb = candle_nn::linear(4, 3, b.var_builder(DType::F32, &dev)).unwrap();
        let wa: Vec<f32> = la.weight().flatten_all().unwrap().to_vec1().unwrap();
        let wb: Vec<f32> = lb.weight().flatten_all().unwrap().to_vec1().unwrap();
        assert_ne!(wa, wb);
    }

    #[test]
    fn assign_rejects_wrong_shape() {
        let dev = Device::Cpu;
        let p = ParamStore::new(0);
        let _ = candle_nn::linear(2, 2, p.var_builder(DType::F32, &dev).pp("x")).unwrap();
        let bad = Tensor::zeros((3, 3), DType::F32, &dev).unwrap();
        assert!(p.assign("x.weight", &bad).is_err());
        let good = Tensor::zeros((2, 2), DType::F32, &dev).unwrap();
        p.assign("x.weight", &good).unwrap();
    }
}
