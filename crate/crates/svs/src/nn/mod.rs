//! Tensor-layer plumbing shared by the model modules.
//!
//! Parameters live in a [`ParamStore`]: a named map of `candle` variables
//! with deterministic, name-keyed initialization (the CPU backend's own RNG
//! is not seedable). Stage logic, checkpointing and transfer reports all key
//! off these names.

pub mod fft;
pub mod layers;

use crate::error::{Result, SvsError};
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

/// Initialization recipe for a parameter tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with explicit std.
    Normal(f64),
    /// Normal with std `sqrt(1 / fan_in)`, fan_in = product of trailing dims.
    KaimingIn,
}

#[derive(Debug)]
struct StoreInner {
    device: Device,
    dtype: DType,
    seed: u64,
    vars: Mutex<BTreeMap<String, Var>>,
    buffers: Mutex<BTreeMap<String, Tensor>>,
}

/// Named, deterministically initialized parameter map. Cloning shares the
/// underlying storage; `pp` scopes a name prefix.
#[derive(Debug, Clone)]
pub struct ParamStore {
    inner: Arc<StoreInner>,
    prefix: String,
}

impl ParamStore {
    pub fn new(seed: u64, device: Device) -> Self {
        Self {
            inner: Arc::new(StoreInner {
                device,
                dtype: DType::F32,
                seed,
                vars: Mutex::new(BTreeMap::new()),
                buffers: Mutex::new(BTreeMap::new()),
            }),
            prefix: String::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.inner.device
    }

    pub fn dtype(&self) -> DType {
        self.inner.dtype
    }

    /// Sub-scope with `name` appended to the prefix.
    pub fn pp(&self, name: &str) -> ParamStore {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamStore {
            inner: self.inner.clone(),
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Fetches or creates a parameter. Initialization depends only on the
    /// store seed, the full name, and the recipe, so two runs (and two loads
    /// of the same architecture) agree.
    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let mut vars = self.inner.vars.lock().unwrap();
        if let Some(var) = vars.get(&full) {
            if var.dims() != shape {
                return Err(SvsError::shape(format!(
                    "parameter {full}: requested {shape:?}, stored {:?}",
                    var.dims()
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values = init_values(n, shape, init, self.inner.seed, &full);
        let tensor = Tensor::from_vec(values, shape, &self.inner.device)?
            .to_dtype(self.inner.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        vars.insert(full, var);
        Ok(out)
    }

    /// Stores a non-trainable named tensor (saved in checkpoints, never
    /// given to an optimizer).
    pub fn set_buffer(&self, name: &str, tensor: &Tensor) -> Result<()> {
        let full = self.full_name(name);
        self.inner
            .buffers
            .lock()
            .unwrap()
            .insert(full, tensor.clone());
        Ok(())
    }

    pub fn get_buffer(&self, name: &str) -> Option<Tensor> {
        self.inner
            .buffers
            .lock()
            .unwrap()
            .get(&self.full_name(name))
            .cloned()
    }

    /// All parameters, sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.inner
            .vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn named_buffers(&self) -> Vec<(String, Tensor)> {
        self.inner
            .buffers
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Parameters under any of the given top-level prefixes, sorted by name.
    pub fn vars_under(&self, prefixes: &[&str]) -> Vec<Var> {
        self.named_vars()
            .into_iter()
            .filter(|(name, _)| prefixes.iter().any(|p| name_under(name, p)))
            .map(|(_, v)| v)
            .collect()
    }

    /// Overwrites one parameter's values; the error names the parameter on
    /// any mismatch.
    pub fn load_value(&self, name: &str, value: &Tensor) -> Result<()> {
        let vars = self.inner.vars.lock().unwrap();
        let var = vars
            .get(name)
            .ok_or_else(|| SvsError::Checkpoint(format!("no parameter named {name}")))?;
        if var.dims() != value.dims() {
            return Err(SvsError::Checkpoint(format!(
                "parameter {name}: checkpoint shape {:?} does not match model shape {:?}",
                value.dims(),
                var.dims()
            )));
        }
        var.set(value)?;
        Ok(())
    }

    pub fn has_var(&self, name: &str) -> bool {
        self.inner.vars.lock().unwrap().contains_key(name)
    }
}

pub fn name_under(name: &str, prefix: &str) -> bool {
    name == prefix || name.starts_with(&format!("{prefix}."))
}

fn init_values(n: usize, shape: &[usize], init: Init, seed: u64, name: &str) -> Vec<f32> {
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal(std) => normal_vec(&mut rng_for(seed, name), n, std),
        Init::KaimingIn => {
            let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
            normal_vec(&mut rng_for(seed, name), n, (1.0 / fan_in as f64).sqrt())
        }
    }
}

fn fnv1a(text: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// RNG stream derived from a base seed and a tag; different tags give
/// independent, reproducible streams.
pub fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(tag))
}

/// Standard-normal draws scaled by `std` (Box-Muller).
pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push((r * theta.cos() * std) as f32);
        if out.len() < n {
            out.push((r * theta.sin() * std) as f32);
        }
    }
    out
}

pub fn normal_tensor(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    std: f64,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Ok(Tensor::from_vec(normal_vec(rng, n, std), shape, device)?)
}

/// `[B, T]` mask with 1.0 on the first `lens[b]` frames.
pub fn frame_mask(lens: &[usize], max_len: usize, device: &Device) -> Result<Tensor> {
    let mut data = vec![0.0f32; lens.len() * max_len];
    for (b, &l) in lens.iter().enumerate() {
        for slot in data.iter_mut().skip(b * max_len).take(l.min(max_len)) {
            *slot = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (lens.len(), max_len), device)?)
}

/// Leaky ReLU built from `maximum` so the gradient path is explicit.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Mean over entries where `mask` (broadcastable to `x`) is 1.
pub fn masked_mean(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let masked = x.broadcast_mul(mask)?;
    let total = masked.sum_all()?;
    let count = mask.sum_all()?;
    let per_entry = x.elem_count() as f64 / mask.elem_count() as f64;
    Ok((total / (count * per_entry)?)?)
}
