use super::expect_rank;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with the running averages.
    Eval,
}

/// Per-channel batch normalization of a `(B, C, H, W)` tensor.
///
/// `running_mean` / `running_var` are plain buffers updated in place in
/// train mode: `r ← (1 − momentum)·r + momentum·batch_stat`, with the
/// unbiased variance feeding the running estimate.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm2d<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: BatchNormMode,
    momentum: f64,
    epsilon: f64,
) -> Result<Tensor<T>> {
    expect_rank("batch_norm2d", input, 4)?;
    let s = input.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.shape() != [c] {
            return Err(Error::Config(format!(
                "batch_norm2d: {name} shape {:?}, expected [{c}]",
                t.shape()
            )));
        }
    }
    let count = b * hw;
    if mode == BatchNormMode::Train && count < 2 {
        return Err(Error::DegenerateBatch(format!(
            "batch_norm2d needs at least 2 values per channel in train mode, got {count}"
        )));
    }
    let eps = T::from_f64_lossy(epsilon);
    let n = T::from_usize(count).unwrap();

    let (mean, var) = match mode {
        BatchNormMode::Train => {
            let x = input.data();
            let mut mean = vec![T::zero(); c];
            for (pi, plane) in x.chunks_exact(hw).enumerate() {
                mean[pi % c] += plane.iter().copied().sum::<T>();
            }
            mean.iter_mut().for_each(|m| *m = *m / n);
            let mut var = vec![T::zero(); c];
            for (pi, plane) in x.chunks_exact(hw).enumerate() {
                let m = mean[pi % c];
                var[pi % c] += plane.iter().map(|v| (*v - m) * (*v - m)).sum::<T>();
            }
            var.iter_mut().for_each(|v| *v = *v / n);

            let mom = T::from_f64_lossy(momentum);
            let unbias = n / (n - T::one());
            let mut rm = running_mean.data_mut();
            let mut rv = running_var.data_mut();
            for ch in 0..c {
                rm[ch] = (T::one() - mom) * rm[ch] + mom * mean[ch];
                rv[ch] = (T::one() - mom) * rv[ch] + mom * var[ch] * unbias;
            }
            (mean, var)
        }
        BatchNormMode::Eval => (running_mean.to_vec(), running_var.to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();

    let mut xhat = vec![T::zero(); input.numel()];
    let mut out = vec![T::zero(); input.numel()];
    {
        let x = input.data();
        let gm = gamma.data();
        let bt = beta.data();
        for (pi, plane) in x.chunks_exact(hw).enumerate() {
            let ch = pi % c;
            let (m, is) = (mean[ch], inv_std[ch]);
            let base = pi * hw;
            for (j, v) in plane.iter().enumerate() {
                let xh = (*v - m) * is;
                xhat[base + j] = xh;
                out[base + j] = gm[ch] * xh + bt[ch];
            }
        }
    }

    let gc = gamma.clone();
    Tensor::from_op(
        out,
        s,
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(move |grad| {
            let gm = gc.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for (pi, plane) in grad.chunks_exact(hw).enumerate() {
                let ch = pi % c;
                let base = pi * hw;
                for (j, g) in plane.iter().enumerate() {
                    dgamma[ch] += *g * xhat[base + j];
                    dbeta[ch] += *g;
                }
            }
            let mut dx = vec![T::zero(); grad.len()];
            match mode {
                BatchNormMode::Train => {
                    // dx = γ·σ⁻¹/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
                    for (pi, plane) in grad.chunks_exact(hw).enumerate() {
                        let ch = pi % c;
                        let k = gm[ch] * inv_std[ch] / n;
                        let base = pi * hw;
                        for (j, g) in plane.iter().enumerate() {
                            dx[base + j] =
                                k * (n * *g - dbeta[ch] - xhat[base + j] * dgamma[ch]);
                        }
                    }
                }
                BatchNormMode::Eval => {
                    for (pi, plane) in grad.chunks_exact(hw).enumerate() {
                        let ch = pi % c;
                        let k = gm[ch] * inv_std[ch];
                        let base = pi * hw;
                        for (j, g) in plane.iter().enumerate() {
                            dx[base + j] = k * *g;
                        }
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }),
        "batch_norm2d",
    )
}
