use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

use crate::error::Result;

/// Element-wise square root whose gradient is defined as zero at the origin.
///
/// Norms of differences hit exactly zero whenever two inputs coincide (identical images,
/// anchor equal to positive...). Plain `sqrt` would propagate `inf * 0 = NaN` there.
struct SafeSqrt;

impl CustomOp1 for SafeSqrt {
    fn name(&self) -> &'static str {
        "safe-sqrt"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let Some((start, end)) = layout.contiguous_offsets() else {
            bail!("safe-sqrt expects a contiguous operand");
        };
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].iter().map(|x| x.max(0.0).sqrt()).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].iter().map(|x| x.max(0.0).sqrt()).collect()),
            _ => bail!("safe-sqrt supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let positive = res.gt(0.0)?;
        let denom = (res.maximum(f64::MIN_POSITIVE)? * 2.0)?;
        let g = (grad / denom)?;
        Ok(Some(positive.where_cond(&g, &g.zeros_like()?)?))
    }
}

pub fn safe_sqrt(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SafeSqrt)?)
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => bail!("{op} expects a contiguous operand"),
    }
}

struct LeakyRelu(f64);

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => {
                let a = self.0 as f32;
                let v = contiguous_slice(v, layout, "leaky-relu")?;
                CpuStorage::F32(v.iter().map(|&x| if x >= 0.0 { x } else { a * x }).collect())
            }
            CpuStorage::F64(v) => {
                let a = self.0;
                let v = contiguous_slice(v, layout, "leaky-relu")?;
                CpuStorage::F64(v.iter().map(|&x| if x >= 0.0 { x } else { a * x }).collect())
            }
            _ => bail!("leaky-relu supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &LeakyReluGrad(self.0))?))
    }
}

/// `(x, grad) -> grad * (x >= 0 ? 1 : slope)`.
struct LeakyReluGrad(f64);

impl CustomOp2 for LeakyReluGrad {
    fn name(&self) -> &'static str {
        "leaky-relu-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                let a = self.0 as f32;
                let (x, g) = (contiguous_slice(x, l1, "leaky-relu")?, contiguous_slice(g, l2, "leaky-relu")?);
                CpuStorage::F32(x.iter().zip(g).map(|(&x, &g)| if x >= 0.0 { g } else { a * g }).collect())
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                let a = self.0;
                let (x, g) = (contiguous_slice(x, l1, "leaky-relu")?, contiguous_slice(g, l2, "leaky-relu")?);
                CpuStorage::F64(x.iter().zip(g).map(|(&x, &g)| if x >= 0.0 { g } else { a * g }).collect())
            }
            _ => bail!("leaky-relu supports matching f32 or f64 operands only"),
        };
        Ok((out, l1.shape().clone()))
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(LeakyRelu(slope))?)
}

/// Nearest-neighbour 2x upsampling of `(B, C, H, W)`.
struct Upsample2;

fn upsample_plane<T: Copy>(src: &[T], h: usize, w: usize, dst: &mut Vec<T>) {
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for _ in 0..2 {
            for &v in row {
                dst.push(v);
                dst.push(v);
            }
        }
    }
}

fn downsum_plane<T: Copy + std::ops::Add<Output = T>>(src: &[T], h: usize, w: usize, dst: &mut Vec<T>) {
    let w2 = 2 * w;
    for y in 0..h {
        let (r0, r1) = (&src[2 * y * w2..(2 * y + 1) * w2], &src[(2 * y + 1) * w2..(2 * y + 2) * w2]);
        for x in 0..w {
            dst.push(r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
        }
    }
}

impl CustomOp1 for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        let out = match storage {
            CpuStorage::F32(v) => {
                let v = contiguous_slice(v, layout, "upsample2")?;
                let mut out = Vec::with_capacity(v.len() * 4);
                for plane in v.chunks_exact(h * w) {
                    upsample_plane(plane, h, w, &mut out);
                }
                CpuStorage::F32(out)
            }
            CpuStorage::F64(v) => {
                let v = contiguous_slice(v, layout, "upsample2")?;
                let mut out = Vec::with_capacity(v.len() * 4);
                for plane in v.chunks_exact(h * w) {
                    upsample_plane(plane, h, w, &mut out);
                }
                CpuStorage::F64(out)
            }
            _ => bail!("upsample2 supports f32 and f64 only"),
        };
        Ok((out, Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Downsum2)?))
    }
}

/// Sums every 2x2 block: the adjoint of [`Upsample2`].
struct Downsum2;

impl CustomOp1 for Downsum2 {
    fn name(&self) -> &'static str {
        "downsum2"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h2, w2) = layout.shape().dims4()?;
        let (h, w) = (h2 / 2, w2 / 2);
        let out = match storage {
            CpuStorage::F32(v) => {
                let v = contiguous_slice(v, layout, "downsum2")?;
                let mut out = Vec::with_capacity(v.len() / 4);
                for plane in v.chunks_exact(h2 * w2) {
                    downsum_plane(plane, h, w, &mut out);
                }
                CpuStorage::F32(out)
            }
            CpuStorage::F64(v) => {
                let v = contiguous_slice(v, layout, "downsum2")?;
                let mut out = Vec::with_capacity(v.len() / 4);
                for plane in v.chunks_exact(h2 * w2) {
                    downsum_plane(plane, h, w, &mut out);
                }
                CpuStorage::F64(out)
            }
            _ => bail!("downsum2 supports f32 and f64 only"),
        };
        Ok((out, Shape::from((b, c, h, w))))
    }
}

pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Upsample2)?)
}

/// Adds a per-channel bias `(C,)` to a `(B, C, H, W)` map.
struct ChannelBias;

fn add_bias<T: Copy + std::ops::Add<Output = T>>(x: &[T], b: &[T], plane: usize) -> Vec<T> {
    let c = b.len();
    let mut out = Vec::with_capacity(x.len());
    for (i, chunk) in x.chunks_exact(plane).enumerate() {
        let bias = b[i % c];
        out.extend(chunk.iter().map(|&v| v + bias));
    }
    out
}

fn channel_sums<T: Copy + std::ops::Add<Output = T> + Default>(g: &[T], c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::default(); c];
    for (i, chunk) in g.chunks_exact(plane).enumerate() {
        out[i % c] = chunk.iter().fold(out[i % c], |acc, &v| acc + v);
    }
    out
}

impl CustomOp2 for ChannelBias {
    fn name(&self) -> &'static str {
        "channel-bias"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, h, w) = l1.shape().dims4()?;
        if l2.dims() != [c] {
            bail!("channel bias of shape {:?} for {c} channels", l2.dims());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(b)) => CpuStorage::F32(add_bias(
                contiguous_slice(x, l1, "channel-bias")?,
                contiguous_slice(b, l2, "channel-bias")?,
                h * w,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(b)) => CpuStorage::F64(add_bias(
                contiguous_slice(x, l1, "channel-bias")?,
                contiguous_slice(b, l2, "channel-bias")?,
                h * w,
            )),
            _ => bail!("channel-bias supports matching f32 or f64 operands only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        _x: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        Ok((Some(grad.clone()), Some(grad.apply_op1_no_bwd(&ChannelSum)?)))
    }
}

/// `(B, C, H, W) -> (C,)` sums.
struct ChannelSum;

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, h, w) = layout.shape().dims4()?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(channel_sums(contiguous_slice(v, layout, "channel-sum")?, c, h * w)),
            CpuStorage::F64(v) => CpuStorage::F64(channel_sums(contiguous_slice(v, layout, "channel-sum")?, c, h * w)),
            _ => bail!("channel-sum supports f32 and f64 only"),
        };
        Ok((out, Shape::from(c)))
    }
}

pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&bias.contiguous()?, ChannelBias)?)
}

/// `log(1 + exp(x))`, evaluated without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Mean negative log-likelihood of `labels` under the row-wise softmax of `logits` (`(B, K)`).
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b || labels.iter().any(|&l| l >= k) {
        return Err(crate::error::contract!(
            "cross entropy over {k} classes with {} labels for batch {b}",
            labels.len()
        ));
    }
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let log_probs = shifted.broadcast_sub(&lse)?;
    let mut onehot = vec![0.0f64; b * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (b, k), logits.device())?.to_dtype(logits.dtype())?;
    Ok((log_probs * onehot)?.sum_all()?.neg()?.affine(1.0 / b as f64, 0.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn safe_sqrt_has_zero_gradient_at_origin() {
        let x = Var::new(&[0.0f64, 4.0], &Device::Cpu).unwrap();
        let y = safe_sqrt(&x).unwrap();
        assert_eq!(y.to_vec1::<f64>().unwrap(), vec![0.0, 2.0]);
        let grads = y.sum_all().unwrap().backward().unwrap();
        let g = grads.get(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(g, vec![0.0, 0.25]);
    }

    #[test]
    fn softplus_is_stable() {
        let x = Tensor::new(&[-800.0f64, 0.0, 800.0], &Device::Cpu).unwrap();
        let y = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(y[2], 800.0);
    }

    #[test]
    fn leaky_and_upsample_match_stock_ops() {
        use candle_core::Var;
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| ((i * 7) % 11) as f64 - 5.5).collect();
        let x = Var::from_tensor(&Tensor::from_vec(data, (2, 3, 4, 5), &Device::Cpu).unwrap()).unwrap();
        let probe_data: Vec<f64> = (0..2 * 3 * 8 * 10).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
        let probe = Tensor::from_vec(probe_data, (2, 3, 8, 10), &Device::Cpu).unwrap();
        let ours = (upsample2(&leaky_relu(&x, 0.2).unwrap()).unwrap() * &probe).unwrap();
        let x2 = x.as_tensor();
        let stock = (x2.maximum(&(x2 * 0.2).unwrap()).unwrap().upsample_nearest2d(8, 10).unwrap() * &probe).unwrap();
        let diff = (&ours - &stock).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
        let g1 = ours.sum_all().unwrap().backward().unwrap();
        let g2 = stock.sum_all().unwrap().backward().unwrap();
        let d = (g1.get(&x).unwrap() - g2.get(&x).unwrap()).unwrap().abs().unwrap();
        assert!(d.max_all().unwrap().to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn channel_bias_matches_broadcast_add() {
        use candle_core::Var;
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| i as f64 * 0.5).collect();
        let x = Var::from_tensor(&Tensor::from_vec(data, (2, 3, 2, 2), &Device::Cpu).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0, 3.0], &Device::Cpu).unwrap()).unwrap();
        let probe = (x.as_tensor() * 0.3).unwrap().cos().unwrap();
        let ours = (add_channel_bias(&x, &b).unwrap() * &probe).unwrap();
        let stock = (x.broadcast_add(&b.reshape((1, 3, 1, 1)).unwrap()).unwrap() * &probe).unwrap();
        let d = (&ours - &stock).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 0.0);
        let g1 = ours.sum_all().unwrap().backward().unwrap();
        let g2 = stock.sum_all().unwrap().backward().unwrap();
        for v in [&x, &b] {
            let d = (g1.get(v).unwrap() - g2.get(v).unwrap()).unwrap().abs().unwrap();
            assert!(d.max_all().unwrap().to_scalar::<f64>().unwrap() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros((3, 4), candle_core::DType::F64, &Device::Cpu).unwrap();
        let l = cross_entropy(&logits, &[0, 1, 3]).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&logits, &[0, 1, 4]).is_err());
    }
}
