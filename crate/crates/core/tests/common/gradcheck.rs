//! Central finite differences in f64 against candle's backward pass.

use candle_core::{DType, Device, Tensor, Var};
use refseg::carafe::{reassemble, Carafe, CarafeConfig, ReassemblyKernels};
use refseg::decoder::{correlate, ProjectedKernel};
use refseg::intervention::{split, Masker};
use refseg::ParamStore;

use super::randn;

const H: f64 = 1e-5;

fn set_flat(var: &Var, values: &[f64]) {
    let t = Tensor::from_vec(values.to_vec(), var.dims(), &Device::Cpu).unwrap();
    var.set(&t).unwrap();
}

/// Largest relative error `|a − n| / max(|a|, |n|, 1e-6)` over up to `max_coords` coordinates
/// of every variable.
pub fn max_rel_error(vars: &[Var], loss: &dyn Fn() -> Tensor, max_coords: usize) -> f64 {
    let grads = loss().backward().unwrap();
    let mut worst = 0f64;
    for var in vars {
        let analytic: Vec<f64> = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1().unwrap())
            .unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let stride = base.len().div_ceil(max_coords).max(1);
        for i in (0..base.len()).step_by(stride) {
            let mut v = base.clone();
            v[i] = base[i] + H;
            set_flat(var, &v);
            let plus: f64 = loss().to_scalar().unwrap();
            v[i] = base[i] - H;
            set_flat(var, &v);
            let minus: f64 = loss().to_scalar().unwrap();
            set_flat(var, &base);
            let numeric = (plus - minus) / (2.0 * H);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

fn weighted_sum(t: &Tensor, seed: u64) -> Tensor {
    let r = randn(t.dims(), seed);
    (t * r).unwrap().sum_all().unwrap()
}

pub fn correlate_error() -> f64 {
    let w = Var::from_tensor(&randn(&[2, 3, 3, 3], 1)).unwrap();
    let b = Var::from_tensor(&randn(&[2], 2)).unwrap();
    let f = Var::from_tensor(&randn(&[2, 3, 5, 6], 3)).unwrap();
    let loss = || {
        let k = ProjectedKernel {
            weights: w.as_tensor().clone(),
            bias: b.as_tensor().clone(),
        };
        weighted_sum(&correlate(&k, f.as_tensor()).unwrap(), 4)
    };
    max_rel_error(&[w.clone(), b.clone(), f.clone()], &loss, 60)
}

pub fn masks_and_split_error() -> f64 {
    let p = ParamStore::new(11);
    let masker = Masker::new(3, 4, p.var_builder(DType::F64, &Device::Cpu)).unwrap();
    let f = Var::from_tensor(&randn(&[1, 3, 4, 5], 5)).unwrap();
    let loss = || {
        let masks = masker.make_masks(f.as_tensor()).unwrap();
        let (c, s) = split(f.as_tensor(), &masks).unwrap();
        let total = (weighted_sum(&c, 6) + weighted_sum(&s, 7)).unwrap();
        (total + weighted_sum(&masks.mask, 8)).unwrap()
    };
    let mut vars: Vec<Var> = p.vars().into_iter().map(|(_, v)| v).collect();
    vars.push(f.clone());
    max_rel_error(&vars, &loss, 40)
}

pub fn carafe_error() -> f64 {
    let p = ParamStore::new(12);
    let cfg = CarafeConfig {
        k_up: 3,
        k_enc: 3,
        sigma: 2,
        compressed_channels: 4,
    };
    let carafe = Carafe::new(2, cfg, p.var_builder(DType::F64, &Device::Cpu)).unwrap();
    let f = Var::from_tensor(&randn(&[1, 2, 4, 4], 9)).unwrap();
    let loss = || weighted_sum(&carafe.forward(f.as_tensor()).unwrap(), 10);
    let mut vars: Vec<Var> = p.vars().into_iter().map(|(_, v)| v).collect();
    vars.push(f.clone());
    let module = max_rel_error(&vars, &loss, 40);

    // reassembly alone, differentiating through the kernel logits as well
    let raw = Var::from_tensor(&randn(&[1, 36, 3, 3], 13)).unwrap();
    let x = Var::from_tensor(&randn(&[1, 2, 3, 3], 14)).unwrap();
    let loss = || {
        let k = ReassemblyKernels::from_encoder_output(raw.as_tensor(), 3, 2).unwrap();
        weighted_sum(&reassemble(x.as_tensor(), &k).unwrap(), 15)
    };
    module.max(max_rel_error(&[raw.clone(), x.clone()], &loss, 60))
}
