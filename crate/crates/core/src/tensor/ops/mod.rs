//! Differentiable tensor operations.

mod conv;
mod norm;

pub use conv::{conv2d, max_pool2d};
pub use norm::{batch_norm2d, BatchNormMode};

use rand::Rng;

use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Element>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Config(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub(crate) fn expect_rank<T: Element>(op: &str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::Config(format!(
            "{op}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| *x + *y).collect();
    Tensor::from_op(
        data,
        a.shape(),
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        "add",
    )
}

pub fn sub<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| *x - *y).collect();
    Tensor::from_op(
        data,
        a.shape(),
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -*v).collect())]),
        "sub",
    )
}

/// Elementwise product.
pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| *x * *y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        data,
        a.shape(),
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let da = g.iter().zip(bc.data().iter()).map(|(g, y)| *g * *y).collect();
            let db = g.iter().zip(ac.data().iter()).map(|(g, x)| *g * *x).collect();
            vec![Some(da), Some(db)]
        }),
        "mul",
    )
}

pub fn scale<T: Element>(a: &Tensor<T>, factor: T) -> Result<Tensor<T>> {
    let data = a.data().iter().map(|x| *x * factor).collect();
    Tensor::from_op(
        data,
        a.shape(),
        vec![a.clone()],
        Box::new(move |g| vec![Some(g.iter().map(|v| *v * factor).collect())]),
        "scale",
    )
}

pub fn relu<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let data = a.data().iter().map(|x| x.max(T::zero())).collect();
    let ac = a.clone();
    Tensor::from_op(
        data,
        a.shape(),
        vec![a.clone()],
        Box::new(move |g| {
            let x = ac.data();
            let d = g
                .iter()
                .zip(x.iter())
                .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                .collect();
            vec![Some(d)]
        }),
        "relu",
    )
}

/// Sum of all elements as a one-element tensor.
pub fn sum<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let total = a.data().iter().copied().sum();
    let n = a.numel();
    Tensor::from_op(
        vec![total],
        &[1],
        vec![a.clone()],
        Box::new(move |g| vec![Some(vec![g[0]; n])]),
        "sum",
    )
}

/// Same values under a new shape with equal element count.
pub fn reshape<T: Element>(a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if numel(shape) != a.numel() {
        return Err(Error::Config(format!(
            "reshape: {:?} cannot become {shape:?}",
            a.shape()
        )));
    }
    Tensor::from_op(
        a.to_vec(),
        shape,
        vec![a.clone()],
        Box::new(|g| vec![Some(g.to_vec())]),
        "reshape",
    )
}

/// Concatenates 4D tensors along the channel axis.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Config("concat_channels: no inputs".into()))?;
    expect_rank("concat_channels", first, 4)?;
    let (b, h, w) = (first.shape()[0], first.shape()[2], first.shape()[3]);
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        expect_rank("concat_channels", p, 4)?;
        let s = p.shape();
        if s[0] != b || s[2] != h || s[3] != w {
            return Err(Error::Config(format!(
                "concat_channels: {:?} incompatible with {:?}",
                s,
                first.shape()
            )));
        }
        channels.push(s[1]);
    }
    let hw = h * w;
    let total_c: usize = channels.iter().sum();
    let mut out = vec![T::zero(); b * total_c * hw];
    let mut offset = 0;
    for (p, &c) in parts.iter().zip(&channels) {
        let src = p.data();
        for bi in 0..b {
            let dst = (bi * total_c + offset) * hw;
            out[dst..dst + c * hw].copy_from_slice(&src[bi * c * hw..(bi + 1) * c * hw]);
        }
        offset += c;
    }
    let parents = parts.iter().map(|p| (*p).clone()).collect();
    Tensor::from_op(
        out,
        &[b, total_c, h, w],
        parents,
        Box::new(move |g| {
            let mut grads = Vec::with_capacity(channels.len());
            let mut offset = 0;
            for &c in &channels {
                let mut d = vec![T::zero(); b * c * hw];
                for bi in 0..b {
                    let src = (bi * total_c + offset) * hw;
                    d[bi * c * hw..(bi + 1) * c * hw].copy_from_slice(&g[src..src + c * hw]);
                }
                grads.push(Some(d));
                offset += c;
            }
            grads
        }),
        "concat_channels",
    )
}

/// Stacks tensors with identical trailing extents along the leading axis.
pub fn concat_batch<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Config("concat_batch: no inputs".into()))?;
    let tail = &first.shape()[1..];
    if let Some(bad) = parts.iter().find(|p| &p.shape()[1..] != tail) {
        return Err(Error::Config(format!(
            "concat_batch: {:?} incompatible with {:?}",
            bad.shape(),
            first.shape()
        )));
    }
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let mut out = Vec::with_capacity(numel(&shape));
    let mut lens = Vec::with_capacity(parts.len());
    for p in parts {
        out.extend_from_slice(&p.data());
        lens.push(p.numel());
    }
    let parents = parts.iter().map(|p| (*p).clone()).collect();
    Tensor::from_op(
        out,
        &shape,
        parents,
        Box::new(move |g| {
            let mut offset = 0;
            lens.iter()
                .map(|&len| {
                    let part = g[offset..offset + len].to_vec();
                    offset += len;
                    Some(part)
                })
                .collect()
        }),
        "concat_batch",
    )
}

/// Builds a tensor whose leading-axis slice `i` is `a[rows[i]]`, or zeros
/// when `rows[i]` is `None`.
pub fn gather_rows<T: Element>(a: &Tensor<T>, rows: &[Option<usize>]) -> Result<Tensor<T>> {
    let n = a.shape()[0];
    if let Some(bad) = rows.iter().flatten().find(|&&r| r >= n) {
        return Err(Error::Config(format!(
            "gather_rows: row {bad} out of range for {n}"
        )));
    }
    if rows.is_empty() {
        return Err(Error::Config("gather_rows: empty selection".into()));
    }
    let row_len = a.numel() / n;
    let mut shape = a.shape().to_vec();
    shape[0] = rows.len();
    let mut out = vec![T::zero(); rows.len() * row_len];
    {
        let src = a.data();
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = r {
                out[i * row_len..(i + 1) * row_len]
                    .copy_from_slice(&src[r * row_len..(r + 1) * row_len]);
            }
        }
    }
    let rows = rows.to_vec();
    Tensor::from_op(
        out,
        &shape,
        vec![a.clone()],
        Box::new(move |g| {
            let mut d = vec![T::zero(); n * row_len];
            for (i, r) in rows.iter().enumerate() {
                if let Some(r) = r {
                    for (dst, src) in d[r * row_len..(r + 1) * row_len]
                        .iter_mut()
                        .zip(&g[i * row_len..(i + 1) * row_len])
                    {
                        *dst += *src;
                    }
                }
            }
            vec![Some(d)]
        }),
        "gather_rows",
    )
}

/// (B, C, H, W) → (B, C) spatial mean.
pub fn global_avg_pool<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("global_avg_pool", a, 4)?;
    let s = a.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let inv = T::one() / T::from_usize(hw).unwrap();
    let out = a
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_op(
        out,
        &[b, c],
        vec![a.clone()],
        Box::new(move |g| {
            let mut d = Vec::with_capacity(b * c * hw);
            for v in g {
                d.extend(std::iter::repeat_n(*v * inv, hw));
            }
            vec![Some(d)]
        }),
        "global_avg_pool",
    )
}

/// Affine map `x · Wᵀ + b` with `x: (B, in)`, `weight: (out, in)`.
pub fn linear<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    expect_rank("linear", x, 2)?;
    expect_rank("linear", weight, 2)?;
    let (b, fin) = (x.shape()[0], x.shape()[1]);
    let fout = weight.shape()[0];
    if weight.shape()[1] != fin {
        return Err(Error::Config(format!(
            "linear: input features {fin} vs weight {:?}",
            weight.shape()
        )));
    }
    if let Some(bias) = bias {
        if bias.shape() != [fout] {
            return Err(Error::Config(format!(
                "linear: bias shape {:?}, expected [{fout}]",
                bias.shape()
            )));
        }
    }
    let mut out = vec![T::zero(); b * fout];
    T::gemm(b, fin, fout, &x.data(), false, &weight.data(), true, &mut out, false);
    if let Some(bias) = bias {
        let bv = bias.data();
        for row in out.chunks_exact_mut(fout) {
            for (o, bb) in row.iter_mut().zip(bv.iter()) {
                *o += *bb;
            }
        }
    }
    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(bias) = bias {
        parents.push(bias.clone());
    }
    let (xc, wc, has_bias) = (x.clone(), weight.clone(), bias.is_some());
    Tensor::from_op(
        out,
        &[b, fout],
        parents,
        Box::new(move |g| {
            let dx = xc.requires_grad().then(|| {
                let mut dx = vec![T::zero(); b * fin];
                T::gemm(b, fout, fin, g, false, &wc.data(), false, &mut dx, false);
                dx
            });
            let dw = wc.requires_grad().then(|| {
                let mut dw = vec![T::zero(); fout * fin];
                T::gemm(fout, b, fin, g, true, &xc.data(), false, &mut dw, false);
                dw
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                let mut db = vec![T::zero(); fout];
                for row in g.chunks_exact(fout) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += *v;
                    }
                }
                grads.push(Some(db));
            }
            grads
        }),
        "linear",
    )
}

/// Inverted dropout: kept units are scaled by `1 / keep` during training.
/// Identity when `train` is false or `keep == 1`.
pub fn dropout<T: Element, R: Rng + ?Sized>(
    x: &Tensor<T>,
    keep: f64,
    train: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::Config(format!(
            "dropout: keep probability {keep} outside (0, 1]"
        )));
    }
    if !train || keep == 1.0 {
        return Tensor::from_op(
            x.to_vec(),
            x.shape(),
            vec![x.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
            "dropout",
        );
    }
    let factor = T::from_f64_lossy(1.0 / keep);
    let mask: Vec<T> = (0..x.numel())
        .map(|_| {
            if rng.random::<f64>() < keep {
                factor
            } else {
                T::zero()
            }
        })
        .collect();
    let out = x.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
    Tensor::from_op(
        out,
        x.shape(),
        vec![x.clone()],
        Box::new(move |g| vec![Some(g.iter().zip(&mask).map(|(g, m)| *g * *m).collect())]),
        "dropout",
    )
}

/// Averages consecutive groups of `group` rows: `(B·group, C) → (B, C)`.
pub fn group_mean<T: Element>(x: &Tensor<T>, group: usize) -> Result<Tensor<T>> {
    expect_rank("group_mean", x, 2)?;
    let (rows, c) = (x.shape()[0], x.shape()[1]);
    if group == 0 || rows % group != 0 {
        return Err(Error::Config(format!(
            "group_mean: {rows} rows not divisible into groups of {group}"
        )));
    }
    let b = rows / group;
    let inv = T::one() / T::from_usize(group).unwrap();
    let mut out = vec![T::zero(); b * c];
    {
        let data = x.data();
        for (r, row) in data.chunks_exact(c).enumerate() {
            let dst = &mut out[(r / group) * c..(r / group + 1) * c];
            for (d, v) in dst.iter_mut().zip(row) {
                *d += *v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::from_op(
        out,
        &[b, c],
        vec![x.clone()],
        Box::new(move |g| {
            let mut d = Vec::with_capacity(rows * c);
            for r in 0..rows {
                d.extend(g[(r / group) * c..(r / group + 1) * c].iter().map(|v| *v * inv));
            }
            vec![Some(d)]
        }),
        "group_mean",
    )
}

/// Row-wise softmax of a `(B, C)` tensor, outside the graph.
pub fn softmax_rows<T: Element>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|v| (*v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    expect_rank("softmax_cross_entropy", logits, 2)?;
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::Input(format!(
            "softmax_cross_entropy: {} labels for batch {b}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Input(format!(
            "softmax_cross_entropy: label {bad} outside [0, {c})"
        )));
    }
    let probs = softmax_rows(&logits.data(), c);
    let bt = T::from_usize(b).unwrap();
    let mut loss = T::zero();
    {
        let data = logits.data();
        for (i, row) in data.chunks_exact(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|v| (*v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[labels[i]];
        }
    }
    let labels = labels.to_vec();
    Tensor::from_op(
        vec![loss / bt],
        &[1],
        vec![logits.clone()],
        Box::new(move |g| {
            let scale = g[0] / bt;
            let mut d: Vec<T> = probs.iter().map(|p| *p * scale).collect();
            for (i, &l) in labels.iter().enumerate() {
                d[i * c + l] -= scale;
            }
            vec![Some(d)]
        }),
        "softmax_cross_entropy",
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::param(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = t(&[-1.0, 0.0, 2.0], &[3]);
        assert_eq!(relu(&x).unwrap().to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn concat_shape_arithmetic() {
        let a = Tensor::<f32>::zeros(&[1, 3, 4, 4]).unwrap();
        let b = Tensor::<f32>::zeros(&[1, 5, 4, 4]).unwrap();
        assert_eq!(concat_channels(&[&a, &b]).unwrap().shape(), &[1, 8, 4, 4]);
        let c = Tensor::<f32>::zeros(&[1, 5, 3, 4]).unwrap();
        assert!(matches!(concat_channels(&[&a, &c]), Err(Error::Config(_))));
    }

    #[test]
    fn concat_interleaves_per_batch_item() {
        let a = t(&[1.0, 2.0], &[2, 1, 1, 1]);
        let b = t(&[3.0, 4.0, 5.0, 6.0], &[2, 2, 1, 1]);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = t(&[0.0, 0.0], &[1, 2]);
        let loss = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let logits = Tensor::<f32>::new(vec![1000.0, 0.0], &[1, 2]).unwrap();
        let loss = softmax_cross_entropy(&logits, &[0]).unwrap().item();
        assert!(loss.is_finite() && loss.abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = t(&[0.0, 0.0], &[1, 2]);
        assert!(matches!(softmax_cross_entropy(&logits, &[2]), Err(Error::Input(_))));
    }

    #[test]
    fn cross_entropy_gradient_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..15).map(|_| rng.random_range(-3.0..3.0)).collect();
        let logits = t(&data, &[3, 5]);
        softmax_cross_entropy(&logits, &[0, 4, 2]).unwrap().backward().unwrap();
        for row in logits.grad().unwrap().chunks(5) {
            assert!(row.iter().sum::<f64>().abs() < 1e-6);
        }
    }

    #[test]
    fn dropout_eval_is_identity_and_train_rescales() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = t(&[1.0; 1000], &[10, 100]);
        assert_eq!(dropout(&x, 0.5, false, &mut rng).unwrap().to_vec(), x.to_vec());
        let y = dropout(&x, 0.5, true, &mut rng).unwrap().to_vec();
        assert!(y.iter().all(|v| *v == 0.0 || *v == 2.0));
        let kept = y.iter().filter(|v| **v > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn group_mean_averages_snippets() {
        let x = t(&[2.0, 0.0, 0.0, 2.0], &[2, 2]);
        assert_eq!(group_mean(&x, 2).unwrap().to_vec(), vec![1.0, 1.0]);
        assert!(group_mean(&x, 3).is_err());
    }

    #[test]
    fn gather_rows_zero_fills_missing() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let y = gather_rows(&x, &[Some(1), None, Some(1)]).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 4.0, 0.0, 0.0, 3.0, 4.0]);
        sum(&y).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn linear_rejects_feature_mismatch() {
        let x = t(&[1.0, 2.0], &[1, 2]);
        let w = t(&[1.0, 2.0, 3.0], &[1, 3]);
        assert!(matches!(linear(&x, &w, None), Err(Error::Config(_))));
    }
}
