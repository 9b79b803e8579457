//! Invertible map between the posterior latent space and the prior space.
//!
//! A stack of affine coupling layers with condition-injected convolutions.
//! Output layers are zero-initialized so training starts from the identity.
//! Training uses the forward KL (flowed posterior sample scored under the
//! prior) plus a down-weighted reverse KL (inverse-flowed prior sample
//! scored under the posterior), reducing the train/inference mismatch.

use crate::error::{Result, SvsError};
use crate::nn::layers::{conv1d, conv1d_zero};
use crate::nn::ParamStore;
use crate::posterior::LatentPosterior;
use crate::prior::PriorDistribution;
use candle_core::{Tensor, D};
use candle_nn::Module;

const LOG_SCALE_CAP: f64 = 7.0;

struct Coupling {
    pre: candle_nn::Conv1d,
    cond_proj: candle_nn::Conv1d,
    mid: candle_nn::Conv1d,
    out: candle_nn::Conv1d,
    flip: bool,
}

impl Coupling {
    fn new(ps: &ParamStore, dim: usize, hidden: usize, kernel: usize, flip: bool) -> Result<Self> {
        let half = dim / 2;
        Ok(Self {
            pre: conv1d(ps, "pre", half, hidden, 1, 1)?,
            cond_proj: conv1d(ps, "cond", dim, hidden, 1, 1)?,
            mid: conv1d(ps, "mid", hidden, hidden, kernel, 1)?,
            out: conv1d_zero(ps, "out", hidden, 2 * half, 1)?,
            flip,
        })
    }

    /// Affine parameters predicted from the untouched half and the condition.
    /// Inputs `[B, half, T]` / `[B, C, T]`; outputs `(log_s, t)` as
    /// `[B, half, T]`.
    fn params(&self, za: &Tensor, cond: &Tensor, mask_ct: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = (self.pre.forward(za)? + self.cond_proj.forward(cond)?)?.relu()?;
        let h = self.mid.forward(&h.broadcast_mul(mask_ct)?)?.relu()?;
        let st = self.out.forward(&h)?;
        let half = st.dim(1)? / 2;
        let log_s = st.narrow(1, 0, half)?.clamp(-LOG_SCALE_CAP, LOG_SCALE_CAP)?;
        let t = st.narrow(1, half, half)?;
        Ok((log_s, t))
    }

    fn split(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let half = z.dim(1)? / 2;
        let a = z.narrow(1, 0, half)?;
        let b = z.narrow(1, half, half)?;
        if self.flip {
            Ok((b, a))
        } else {
            Ok((a, b))
        }
    }

    fn merge(&self, za: &Tensor, zb: &Tensor) -> Result<Tensor> {
        if self.flip {
            Ok(Tensor::cat(&[zb, za], 1)?)
        } else {
            Ok(Tensor::cat(&[za, zb], 1)?)
        }
    }
}

/// The coupling stack. All tensors are `[B, T, C]` at the interface;
/// conditions are frame-aligned with the latent.
pub struct FlowStack {
    couplings: Vec<Coupling>,
}

impl FlowStack {
    pub fn new(
        ps: &ParamStore,
        dim: usize,
        hidden: usize,
        kernel: usize,
        layers: usize,
    ) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(SvsError::Config("flow dim must be even".into()));
        }
        let couplings = (0..layers)
            .map(|i| Coupling::new(&ps.pp(&format!("coupling{i}")), dim, hidden, kernel, i % 2 == 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { couplings })
    }

    fn check(&self, z: &Tensor, cond: &Tensor, mask: &Tensor) -> Result<()> {
        if z.dims() != cond.dims() {
            return Err(SvsError::shape(format!(
                "cond {:?} not aligned with z {:?}",
                cond.dims(),
                z.dims()
            )));
        }
        let (b, t, _) = z.dims3()?;
        if mask.dims() != [b, t] {
            return Err(SvsError::shape(format!(
                "mask {:?} for z {:?}",
                mask.dims(),
                z.dims()
            )));
        }
        Ok(())
    }

    /// Posterior -> prior direction. Returns the transformed latent and the
    /// per-item log-determinant `[B]`.
    pub fn forward(&self, z: &Tensor, cond: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(z, cond, mask)?;
        let (b, t, _) = z.dims3()?;
        let mask_ct = mask.reshape((b, 1, t))?;
        let cond_ct = cond.transpose(1, 2)?.contiguous()?;
        let mut h = z.transpose(1, 2)?.contiguous()?; // [B, C, T]
        let mut logdet = Tensor::zeros(b, h.dtype(), h.device())?;
        for coupling in &self.couplings {
            let (za, zb) = coupling.split(&h)?;
            let (log_s, tr) = coupling.params(&za, &cond_ct, &mask_ct)?;
            let zb = ((zb * log_s.exp()?)? + tr)?.broadcast_mul(&mask_ct)?;
            logdet = (logdet + log_s.broadcast_mul(&mask_ct)?.sum((1, 2))?)?;
            h = coupling.merge(&za, &zb)?;
        }
        Ok((h.transpose(1, 2)?.contiguous()?, logdet))
    }

    /// Prior -> posterior direction; exact inverse of [`FlowStack::forward`].
    pub fn inverse(&self, y: &Tensor, cond: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(y, cond, mask)?;
        let (b, t, _) = y.dims3()?;
        let mask_ct = mask.reshape((b, 1, t))?;
        let cond_ct = cond.transpose(1, 2)?.contiguous()?;
        let mut h = y.transpose(1, 2)?.contiguous()?;
        let mut logdet = Tensor::zeros(b, h.dtype(), h.device())?;
        for coupling in self.couplings.iter().rev() {
            let (za, zb) = coupling.split(&h)?;
            let (log_s, tr) = coupling.params(&za, &cond_ct, &mask_ct)?;
            let zb = ((zb - tr)? * log_s.neg()?.exp()?)?.broadcast_mul(&mask_ct)?;
            logdet = (logdet - log_s.broadcast_mul(&mask_ct)?.sum((1, 2))?)?;
            h = coupling.merge(&za, &zb)?;
        }
        Ok((h.transpose(1, 2)?.contiguous()?, logdet))
    }
}

/// Elementwise log N(x; mean, exp(log_var)).
pub fn gaussian_log_density(x: &Tensor, mean: &Tensor, log_var: &Tensor) -> Result<Tensor> {
    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
    let centered = (x - mean)?;
    let quad = (centered.sqr()? * 0.5)?.mul(&log_var.neg()?.exp()?)?;
    Ok(((log_var * 0.5)?.neg()? - quad)?.affine(1.0, -HALF_LN_2PI)?)
}

/// Loss terms of the bidirectional objective, each a 0-rank tensor averaged
/// per unmasked latent element.
pub struct KlLoss {
    pub forward: Tensor,
    pub reverse: Option<Tensor>,
    pub total: Tensor,
}

/// `reverse_eps`, when the weight is positive, supplies the standard-normal
/// draw for the prior sample (already scaled by any sampling temperature).
/// With `reverse_weight == 0` the reverse pass is skipped entirely and the
/// total equals the uni-directional forward KL bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn bidirectional_kl(
    posterior: &LatentPosterior,
    prior: &PriorDistribution,
    flow: &FlowStack,
    cond: &Tensor,
    mask: &Tensor,
    reverse_weight: f64,
    reverse_eps: Option<&Tensor>,
) -> Result<KlLoss> {
    if !(0.0..=1.0).contains(&reverse_weight) {
        return Err(SvsError::Config(format!(
            "reverse KL weight {reverse_weight} outside [0, 1]"
        )));
    }
    let (b, t, c) = posterior.z.dims3()?;
    if prior.mean.dims() != [b, t, c] {
        return Err(SvsError::shape(format!(
            "prior {:?} vs posterior {:?}",
            prior.mean.dims(),
            posterior.z.dims()
        )));
    }
    let mask3 = mask.reshape((b, t, 1))?;
    let n_elems = (mask.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?
        * c as f64)
        .max(1.0);

    // Forward: flow the posterior sample, score under the prior.
    let (fz, logdet_f) = flow.forward(&posterior.z, cond, mask)?;
    let log_q = gaussian_log_density(&posterior.z, &posterior.mean, &posterior.log_var)?;
    let log_p = gaussian_log_density(&fz, &prior.mean, &prior.log_var)?;
    let diff = (log_q - log_p)?.broadcast_mul(&mask3)?.sum_all()?;
    let kl_forward = ((diff - logdet_f.sum_all()?)? / n_elems)?;

    if reverse_weight == 0.0 {
        return Ok(KlLoss {
            total: kl_forward.clone(),
            forward: kl_forward,
            reverse: None,
        });
    }

    // Reverse: sample the prior, pull back through the inverse flow, score
    // under the posterior.
    let eps = reverse_eps.ok_or_else(|| {
        SvsError::Config("reverse_weight > 0 requires a reverse sample".into())
    })?;
    if eps.dims() != [b, t, c] {
        return Err(SvsError::shape(format!(
            "reverse eps {:?}, expected [{b}, {t}, {c}]",
            eps.dims()
        )));
    }
    let y = ((&prior.mean + ((prior.log_var.clone() * 0.5)?.exp()? * eps)?)?)
        .broadcast_mul(&mask3)?;
    let (zr, logdet_r) = flow.inverse(&y, cond, mask)?;
    let log_p_y = gaussian_log_density(&y, &prior.mean, &prior.log_var)?;
    let log_q_z = gaussian_log_density(&zr, &posterior.mean, &posterior.log_var)?;
    let diff_r = (log_p_y - log_q_z)?.broadcast_mul(&mask3)?.sum_all()?;
    let kl_reverse = ((diff_r - logdet_r.sum_all()?)? / n_elems)?;

    let total = (&kl_forward + (&kl_reverse * reverse_weight)?)?;
    Ok(KlLoss {
        forward: kl_forward,
        reverse: Some(kl_reverse),
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{frame_mask, normal_tensor, rng_for, ParamStore};
    use candle_core::Device;

    fn make_flow(ps: &ParamStore, dim: usize) -> FlowStack {
        FlowStack::new(&ps.pp("flow"), dim, 16, 3, 4).unwrap()
    }

    /// Overwrites the zero-initialized coupling outputs so the stack is a
    /// non-identity map.
    pub(crate) fn randomize(ps: &ParamStore, seed: u64) {
        for (name, var) in ps.named_vars() {
            if name.contains("out.") {
                let t = normal_tensor(
                    &mut rng_for(seed, &name),
                    var.dims(),
                    0.5,
                    var.device(),
                )
                .unwrap();
                var.set(&t).unwrap();
            }
        }
    }

    #[test]
    fn identity_at_initialization() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(4, dev.clone());
        let flow = make_flow(&ps, 8);
        let z = normal_tensor(&mut rng_for(1, "z"), &[2, 5, 8], 1.0, &dev).unwrap();
        let cond = normal_tensor(&mut rng_for(1, "c"), &[2, 5, 8], 1.0, &dev).unwrap();
        let mask = frame_mask(&[5, 5], 5, &dev).unwrap();
        let (fz, logdet) = flow.forward(&z, &cond, &mask).unwrap();
        let diff = (fz - &z)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(diff, 0.0);
        let ld = logdet.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn inverse_recovers_input_after_randomization() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(4, dev.clone());
        let flow = make_flow(&ps, 8);
        randomize(&ps, 99);
        let z = normal_tensor(&mut rng_for(2, "z"), &[2, 6, 8], 1.0, &dev).unwrap();
        let cond = normal_tensor(&mut rng_for(2, "c"), &[2, 6, 8], 1.0, &dev).unwrap();
        let mask = frame_mask(&[6, 6], 6, &dev).unwrap();
        let (fz, logdet_f) = flow.forward(&z, &cond, &mask).unwrap();
        let (back, logdet_i) = flow.inverse(&fz, &cond, &mask).unwrap();
        let err = (back - &z)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(err <= 1e-4, "round trip error {err}");
        let ld_sum = (logdet_f + logdet_i)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(ld_sum <= 1e-4, "logdet sum {ld_sum}");

        // other direction: forward(inverse(y)) == y
        let y = normal_tensor(&mut rng_for(3, "y"), &[2, 6, 8], 1.0, &dev).unwrap();
        let (iy, _) = flow.inverse(&y, &cond, &mask).unwrap();
        let (fy, _) = flow.forward(&iy, &cond, &mask).unwrap();
        let err2 = (fy - &y)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(err2 <= 1e-4, "{err2}");
    }

    #[test]
    fn batch_matches_per_item_processing() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(4, dev.clone());
        let flow = make_flow(&ps, 8);
        randomize(&ps, 7);
        let z = normal_tensor(&mut rng_for(5, "z"), &[2, 4, 8], 1.0, &dev).unwrap();
        let cond = normal_tensor(&mut rng_for(5, "c"), &[2, 4, 8], 1.0, &dev).unwrap();
        let mask = frame_mask(&[4, 4], 4, &dev).unwrap();
        let (joint, _) = flow.forward(&z, &cond, &mask).unwrap();
        for i in 0..2 {
            let zi = z.narrow(0, i, 1).unwrap();
            let ci = cond.narrow(0, i, 1).unwrap();
            let mi = frame_mask(&[4], 4, &dev).unwrap();
            let (solo, _) = flow.forward(&zi, &ci, &mi).unwrap();
            let err = (joint.narrow(0, i, 1).unwrap() - solo)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert!(err < 1e-6, "item {i} differs by {err}");
        }
    }

    #[test]
    fn closed_form_gaussian_kl_monte_carlo() {
        // q = N(0,1), p = N(1,1), identity flow: KL = 0.5 per dimension.
        let dev = Device::Cpu;
        let ps = ParamStore::new(4, dev.clone());
        let flow = make_flow(&ps, 8);
        let n = 1250; // frames; 1250 * 8 dims = 10k scalar samples
        let zeros = Tensor::zeros((1, n, 8), candle_core::DType::F32, &dev).unwrap();
        let eps = normal_tensor(&mut rng_for(10, "mc"), &[1, n, 8], 1.0, &dev).unwrap();
        let post = LatentPosterior {
            mean: zeros.clone(),
            log_var: zeros.clone(),
            z: eps.clone(),
        };
        let prior = PriorDistribution {
            mean: zeros.ones_like().unwrap(),
            log_var: zeros.clone(),
        };
        let mask = frame_mask(&[n], n, &dev).unwrap();
        let cond = zeros.clone();
        let kl = bidirectional_kl(&post, &prior, &flow, &cond, &mask, 0.0, None).unwrap();
        let v = kl.total.to_scalar::<f32>().unwrap();
        assert!((v - 0.5).abs() < 0.05 * 0.5 + 0.02, "MC estimate {v}");
    }

    #[test]
    fn zero_weight_matches_unidirectional_bitwise() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(4, dev.clone());
        let flow = make_flow(&ps, 8);
        randomize(&ps, 13);
        let mk = |tag: &str| normal_tensor(&mut rng_for(21, tag), &[1, 7, 8], 0.7, &dev).unwrap();
        let post = LatentPosterior {
            mean: mk("m"),
            log_var: (mk("lv") * 0.1).unwrap(),
            z: mk("z"),
        };
        let prior = PriorDistribution {
            mean: mk("pm"),
            log_var: (mk("plv") * 0.1).unwrap(),
        };
        let cond = mk("c");
        let mask = frame_mask(&[7], 7, &dev).unwrap();
        let eps = mk("eps");
        let with_zero =
            bidirectional_kl(&post, &prior, &flow, &cond, &mask, 0.0, Some(&eps)).unwrap();
        let uni = with_zero.forward.to_scalar::<f32>().unwrap();
        let total = with_zero.total.to_scalar::<f32>().unwrap();
        assert_eq!(uni.to_bits(), total.to_bits());
        assert!(with_zero.reverse.is_none());

        let bi = bidirectional_kl(&post, &prior, &flow, &cond, &mask, 0.5, Some(&eps)).unwrap();
        assert!(bi.reverse.is_some());
        assert!(bidirectional_kl(&post, &prior, &flow, &cond, &mask, 1.5, Some(&eps)).is_err());
    }

    #[test]
    fn identical_distributions_identity_flow_is_near_zero_in_expectation() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(4, dev.clone());
        let flow = make_flow(&ps, 4);
        let n = 2500; // 10k scalar samples over 4 dims
        let zeros = Tensor::zeros((1, n, 4), candle_core::DType::F32, &dev).unwrap();
        let eps = normal_tensor(&mut rng_for(31, "mc0"), &[1, n, 4], 1.0, &dev).unwrap();
        let post = LatentPosterior {
            mean: zeros.clone(),
            log_var: zeros.clone(),
            z: eps,
        };
        let prior = PriorDistribution {
            mean: zeros.clone(),
            log_var: zeros.clone(),
        };
        let mask = frame_mask(&[n], n, &dev).unwrap();
        let rev_eps = normal_tensor(&mut rng_for(32, "mc1"), &[1, n, 4], 1.0, &dev).unwrap();
        let kl = bidirectional_kl(&post, &prior, &flow, &zeros, &mask, 0.5, Some(&rev_eps))
            .unwrap();
        let v = kl.total.to_scalar::<f32>().unwrap();
        assert!(v.is_finite());
        // estimator of KL(q||q) has mean 0; with 10k samples the draw stays
        // well inside a few standard errors
        assert!(v.abs() < 0.05, "estimate {v}");
    }
}
