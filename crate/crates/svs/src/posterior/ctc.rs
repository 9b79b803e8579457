//! Connectionist temporal classification loss.
//!
//! Log-domain forward recursion over the blank-interleaved label sequence,
//! built from differentiable tensor ops so gradients reach the
//! log-probability matrix. Log-zero is a large negative constant rather than
//! -inf so the max/exp/log chain stays NaN-free.

use crate::error::{Result, SvsError};
use crate::score::BLANK_ID;
use candle_core::{DType, Tensor, D};

fn log_zero(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => -1e30,
        _ => -1e10,
    }
}

/// `log_probs`: `[T, C]` frame-level log-probabilities (blank at index
/// [`BLANK_ID`]). `target`: label ids without blanks. Returns the negative
/// log marginal probability of all alignments as a 0-rank tensor.
pub fn ctc_loss(
    log_probs: &Tensor,
    target: &[usize],
    input_len: usize,
    target_len: usize,
) -> Result<Tensor> {
    let (t_total, n_classes) = log_probs.dims2()?;
    if input_len == 0 || input_len > t_total {
        return Err(SvsError::shape(format!(
            "input_len {input_len} outside [1, {t_total}]"
        )));
    }
    if target_len == 0 || target_len > target.len() {
        return Err(SvsError::shape(format!(
            "target_len {target_len} outside [1, {}]",
            target.len()
        )));
    }
    let target = &target[..target_len];
    if target.iter().any(|&t| t == BLANK_ID) {
        return Err(SvsError::InfeasibleTarget(
            "target contains the blank token".into(),
        ));
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= n_classes) {
        return Err(SvsError::shape(format!(
            "target id {bad} outside class range {n_classes}"
        )));
    }
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    if input_len < target_len + repeats {
        return Err(SvsError::InfeasibleTarget(format!(
            "target needs at least {} frames ({} labels, {} repeats), got {}",
            target_len + repeats,
            target_len,
            repeats,
            input_len
        )));
    }

    let device = log_probs.device();
    let dtype = log_probs.dtype();
    let neg = log_zero(dtype);

    // Blank-interleaved sequence l' of length S = 2L + 1.
    let s_len = 2 * target_len + 1;
    let mut lprime = vec![BLANK_ID as u32; s_len];
    for (i, &t) in target.iter().enumerate() {
        lprime[2 * i + 1] = t as u32;
    }
    let lprime_idx = Tensor::from_vec(lprime.clone(), (1, s_len), device)?;

    // Additive bias: 0 where the s-2 skip transition is legal, log-zero
    // elsewhere.
    let skip_bias_vec: Vec<f64> = (0..s_len)
        .map(|s| {
            if s >= 2 && lprime[s] != BLANK_ID as u32 && lprime[s] != lprime[s - 2] {
                0.0
            } else {
                neg
            }
        })
        .collect();
    let skip_bias = host_row(&skip_bias_vec, dtype, device)?;

    let neg_cell = |n: usize| -> Result<Tensor> {
        Ok(Tensor::full(neg, (1, n), device)?.to_dtype(dtype)?)
    };

    // Per-frame log-probs of l' symbols: [T, S] gathered once.
    let gathered = log_probs
        .index_select(&Tensor::from_vec(lprime, s_len, device)?, 1)?
        .contiguous()?;

    // alpha_0(s) = lp(0, l'_s) for s in {0, 1}, log-zero elsewhere.
    let init_bias_vec: Vec<f64> = (0..s_len).map(|s| if s < 2 { 0.0 } else { neg }).collect();
    let init_bias = host_row(&init_bias_vec, dtype, device)?;
    let mut alpha = (gathered.narrow(0, 0, 1)? + &init_bias)?;

    for t in 1..input_len {
        let shift1 = Tensor::cat(&[&neg_cell(1)?, &alpha.narrow(1, 0, s_len - 1)?], 1)?;
        let shift2 = if s_len >= 2 {
            let shifted = Tensor::cat(&[&neg_cell(2)?, &alpha.narrow(1, 0, s_len - 2)?], 1)?;
            (shifted + &skip_bias)?
        } else {
            neg_cell(s_len)?
        };
        let m = alpha.maximum(&shift1)?.maximum(&shift2)?;
        let sum = ((&alpha - &m)?.exp()?
            + (&shift1 - &m)?.exp()?)?
            .add(&(&shift2 - &m)?.exp()?)?;
        let lse = (m + sum.log()?)?;
        alpha = lse.add(&gathered.narrow(0, t, 1)?)?;
    }

    // Marginal ends in the last blank or the last label.
    let a_last = alpha.narrow(1, s_len - 1, 1)?;
    let total = if s_len >= 2 {
        let a_prev = alpha.narrow(1, s_len - 2, 1)?;
        let m = a_last.maximum(&a_prev)?;
        (((a_last - &m)?.exp()? + (a_prev - &m)?.exp()?)?.log()? + m)?
    } else {
        a_last
    };
    let loss = total.neg()?.reshape(())?;

    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if value > -neg * 0.5 {
        return Err(SvsError::InfeasibleTarget(
            "no alignment has nonzero probability".into(),
        ));
    }
    Ok(loss)
}

fn host_row(values: &[f64], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(values.to_vec(), (1, values.len()), device)?.to_dtype(dtype)?)
}

/// Collapses a best-path decode: argmax per frame, merge repeats, drop
/// blanks. Debugging aid, not a decoder.
pub fn greedy_decode(probs: &Tensor) -> Result<Vec<usize>> {
    let ids = probs.argmax(D::Minus1)?.to_dtype(DType::U32)?;
    let ids: Vec<u32> = ids.flatten_all()?.to_vec1()?;
    let mut out = Vec::new();
    let mut prev = u32::MAX;
    for id in ids {
        if id != prev && id as usize != BLANK_ID {
            out.push(id as usize);
        }
        prev = id;
    }
    Ok(out)
}
