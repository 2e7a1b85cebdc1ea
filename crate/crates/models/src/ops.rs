//! Differentiable tensor operations built on the core kernels.

use candle_core::{bail, CpuStorage, CustomOp2, DType, Device, Layout, Shape, Tensor, WithDType};
use cariface_core::warp::{interpolation_matrix, kernels};
use cariface_core::{Exec, Image, Planar};
use num_traits::Float;

use crate::error::{ModelError, Result};

/// Bilinear backward warp of `(B, C, H, W)` images by `(B, 2, H, W)` flows in
/// normalized coordinates, with analytic gradients for both inputs.
struct GridSample;

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => bail!("grid-sample expects contiguous inputs"),
    }
}

fn grid_forward<T: Float + Send + Sync>(img: &[T], flow: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (b, c, h, w) = dims;
    let (ni, nf) = (c * h * w, 2 * h * w);
    let mut out = vec![T::zero(); b * ni];
    for i in 0..b {
        kernels::bilinear_forward(
            Exec::default(),
            &img[i * ni..(i + 1) * ni],
            c,
            h,
            w,
            &flow[i * nf..(i + 1) * nf],
            &mut out[i * ni..(i + 1) * ni],
        );
    }
    out
}

fn grid_backward<T: Float + WithDType + Send + Sync>(
    img: &Tensor,
    flow: &Tensor,
    upstream: &Tensor,
) -> candle_core::Result<(Tensor, Tensor)> {
    let (b, c, h, w) = img.dims4()?;
    let iv = img.flatten_all()?.to_vec1::<T>()?;
    let fv = flow.flatten_all()?.to_vec1::<T>()?;
    let uv = upstream.flatten_all()?.to_vec1::<T>()?;
    let (ni, nf) = (c * h * w, 2 * h * w);
    let mut gi = vec![T::zero(); b * ni];
    let mut gf = vec![T::zero(); b * nf];
    for i in 0..b {
        kernels::bilinear_backward(
            Exec::default(),
            &iv[i * ni..(i + 1) * ni],
            c,
            h,
            w,
            &fv[i * nf..(i + 1) * nf],
            &uv[i * ni..(i + 1) * ni],
            &mut gi[i * ni..(i + 1) * ni],
            &mut gf[i * nf..(i + 1) * nf],
        );
    }
    Ok((
        Tensor::from_vec(gi, (b, c, h, w), img.device())?,
        Tensor::from_vec(gf, (b, 2, h, w), flow.device())?,
    ))
}

impl CustomOp2 for GridSample {
    fn name(&self) -> &'static str {
        "grid-sample"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        let (fb, two, fh, fw) = l2.shape().dims4()?;
        if (fb, two, fh, fw) != (dims.0, 2, dims.2, dims.3) {
            bail!("grid-sample: image {:?} and flow {:?} disagree", l1.shape(), l2.shape());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(f)) => {
                CpuStorage::F32(grid_forward(contiguous(a, l1)?, contiguous(f, l2)?, dims))
            }
            (CpuStorage::F64(a), CpuStorage::F64(f)) => {
                CpuStorage::F64(grid_forward(contiguous(a, l1)?, contiguous(f, l2)?, dims))
            }
            _ => bail!("grid-sample supports matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        img: &Tensor,
        flow: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (gi, gf) = match img.dtype() {
            DType::F32 => grid_backward::<f32>(img, flow, grad)?,
            DType::F64 => grid_backward::<f64>(img, flow, grad)?,
            d => bail!("grid-sample backward: unsupported dtype {d:?}"),
        };
        Ok((Some(gi), Some(gf)))
    }
}

/// Warps `img` (B, C, H, W) with `flow` (B, 2, H, W): `out(p) = img(p + flow(p))`.
pub fn warp(img: &Tensor, flow: &Tensor) -> Result<Tensor> {
    Ok(img.contiguous()?.apply_op2(&flow.contiguous()?, GridSample)?)
}

fn matrix(rows: usize, cols: usize, data: Vec<f64>, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, (rows, cols), device)?.to_dtype(dtype)?)
}

/// Applies `row_op` (H_out x H) along height and `col_op` (W_out x W) along
/// width of a `(B, C, H, W)` tensor, using only 2-D matmuls.
pub fn separable(x: &Tensor, row_op: &Tensor, col_op: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (ho, hr) = row_op.dims2()?;
    let (wo, wc) = col_op.dims2()?;
    if hr != h || wc != w {
        return Err(ModelError::arg(format!(
            "separable operator {ho}x{hr} / {wo}x{wc} does not fit {h}x{w}"
        )));
    }
    let y = x.contiguous()?.reshape((b * c * h, w))?.matmul(&col_op.t()?)?;
    let y = y.reshape((b, c, h, wo))?.transpose(2, 3)?.contiguous()?;
    let y = y.reshape((b * c * wo, h))?.matmul(&row_op.t()?)?;
    Ok(y.reshape((b, c, wo, ho))?.transpose(2, 3)?.contiguous()?)
}

/// Corner-aligned bilinear resize of a `(B, C, h, w)` tensor.
pub fn resize(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let rh = matrix(height, h, interpolation_matrix(height, h), x.dtype(), x.device())?;
    let rw = matrix(width, w, interpolation_matrix(width, w), x.dtype(), x.device())?;
    separable(x, &rh, &rw)
}

/// Averaging weights of adaptive pooling from `n` cells into `bins`; bin `i`
/// covers `[floor(i n / bins), ceil((i + 1) n / bins))`.
pub fn adaptive_pool_matrix(bins: usize, n: usize) -> Vec<f64> {
    let mut m = vec![0.0; bins * n];
    for i in 0..bins {
        let lo = i * n / bins;
        let hi = ((i + 1) * n).div_ceil(bins);
        for j in lo..hi {
            m[i * n + j] = 1.0 / (hi - lo) as f64;
        }
    }
    m
}

pub fn adaptive_avg_pool(x: &Tensor, bins: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let ph = matrix(bins, h, adaptive_pool_matrix(bins, h), x.dtype(), x.device())?;
    let pw = matrix(bins, w, adaptive_pool_matrix(bins, w), x.dtype(), x.device())?;
    separable(x, &ph, &pw)
}

/// Gaussian smoothing weights over `n` cells; rows are renormalized at the
/// border so constants are preserved.
pub fn gaussian_matrix(n: usize, sigma: f64) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    let radius = (3.0 * sigma).ceil() as isize;
    for i in 0..n {
        let mut total = 0.0;
        for d in -radius..=radius {
            let j = i as isize + d;
            if j >= 0 && (j as usize) < n {
                let v = (-(d * d) as f64 / (2.0 * sigma * sigma)).exp();
                m[i * n + j as usize] = v;
                total += v;
            }
        }
        for j in 0..n {
            m[i * n + j] /= total;
        }
    }
    m
}

pub fn gaussian_blur(x: &Tensor, sigma: f64) -> Result<Tensor> {
    if sigma <= 0.0 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    let gh = matrix(h, h, gaussian_matrix(h, sigma), x.dtype(), x.device())?;
    let gw = matrix(w, w, gaussian_matrix(w, sigma), x.dtype(), x.device())?;
    separable(x, &gh, &gw)
}

/// `(B, K, H, W)` planes where plane `conds[b]` of sample `b` is all ones.
pub fn condition_planes(conds: &[usize], k: usize, height: usize, width: usize, dtype: DType) -> Result<Tensor> {
    if let Some(&bad) = conds.iter().find(|&&c| c >= k) {
        return Err(ModelError::arg(format!("condition {bad} out of range for {k} entries")));
    }
    let mut onehot = vec![0f32; conds.len() * k];
    for (i, &c) in conds.iter().enumerate() {
        onehot[i * k + c] = 1.0;
    }
    let t = Tensor::from_vec(onehot, (conds.len(), k, 1, 1), &Device::Cpu)?;
    Ok(t.broadcast_as((conds.len(), k, height, width))?
        .contiguous()?
        .to_dtype(dtype)?)
}

/// Stacks channel-major rasters of equal size into a `(B, C, H, W)` tensor.
pub fn planar_batch(items: &[&Planar<f32>], dtype: DType) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| ModelError::arg("empty batch"))?;
    let (c, h, w) = first.dims();
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for p in items {
        if p.dims() != (c, h, w) {
            return Err(ModelError::arg(format!(
                "batch mixes sizes {:?} and {:?}",
                (c, h, w),
                p.dims()
            )));
        }
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::from_vec(data, (items.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn image_batch(images: &[&Image], dtype: DType) -> Result<Tensor> {
    let planes: Vec<&Planar<f32>> = images.iter().map(|i| i.pixels()).collect();
    planar_batch(&planes, dtype)
}

/// Splits a `(B, C, H, W)` tensor back into channel-major rasters.
pub fn unbatch(t: &Tensor) -> Result<Vec<Planar<f32>>> {
    let (b, c, h, w) = t.dims4()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let n = c * h * w;
    (0..b)
        .map(|i| Ok(Planar::new(c, h, w, v[i * n..(i + 1) * n].to_vec())?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use cariface_core::warp::sample_bilinear;
    use cariface_core::DenseFlow;

    fn t64(data: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn warp_matches_core_sampler() {
        let img = Planar::from_fn(2, 5, 6, |c, y, x| ((c * 31 + y * 7 + x * 3) % 11) as f64 / 10.0);
        let flow = Planar::from_fn(2, 5, 6, |c, y, x| 0.07 * ((c + y + 2 * x) as f64).sin());
        let expected = sample_bilinear(&img, &DenseFlow::new(flow.clone()).unwrap()).unwrap();
        let out = warp(
            &t64(img.data().to_vec(), (1, 2, 5, 6)),
            &t64(flow.data().to_vec(), (1, 2, 5, 6)),
        )
        .unwrap();
        assert_eq!(out.flatten_all().unwrap().to_vec1::<f64>().unwrap(), expected.data());
    }

    #[test]
    fn warp_gradients_flow_through_autodiff() {
        let img = candle_core::Var::from_tensor(&t64((0..24).map(|i| (i as f64 * 0.37).cos()).collect(), (1, 1, 4, 6)))
            .unwrap();
        let flow = candle_core::Var::from_tensor(&t64(vec![0.05; 48], (1, 2, 4, 6))).unwrap();
        let loss = warp(img.as_tensor(), flow.as_tensor())
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let gf = grads.get(flow.as_tensor()).unwrap();
        assert_eq!(gf.dims(), &[1, 2, 4, 6]);
        assert!(gf.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap() > 0.0);
    }

    #[test]
    fn resize_keeps_corners_and_constants() {
        let x = t64(vec![1.0, 2.0, 3.0, 4.0], (1, 1, 2, 2));
        let y = resize(&x, 3, 3)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(y, vec![1.0, 1.5, 2.0, 2.0, 2.5, 3.0, 3.0, 3.5, 4.0]);
    }

    #[test]
    fn adaptive_pooling_bins() {
        let x = t64((0..36).map(|v| v as f64).collect(), (1, 1, 6, 6));
        let p1 = adaptive_avg_pool(&x, 1)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!((p1[0] - 17.5).abs() < 1e-12);
        let p3 = adaptive_avg_pool(&x, 3)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!((p3[0] - 3.5).abs() < 1e-12);
        let p6 = adaptive_avg_pool(&x, 6)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(p6, (0..36).map(|v| v as f64).collect::<Vec<_>>());
        // Overlapping bins when the size is not a multiple of the bin count.
        let m = adaptive_pool_matrix(3, 8);
        assert_eq!(&m[8..16], &[0.0, 0.0, 0.25, 0.25, 0.25, 0.25, 0.0, 0.0]);
    }

    #[test]
    fn blur_preserves_constants() {
        let x = t64(vec![0.3; 64], (1, 1, 8, 8));
        let y = gaussian_blur(&x, 1.5)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!(y.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn condition_planes_are_one_hot() {
        let t = condition_planes(&[2, 0], 3, 2, 2, DType::F32).unwrap();
        let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v.iter().sum::<f32>(), 8.0);
        assert_eq!(&v[8..12], &[1.0; 4]);
        assert_eq!(&v[12..16], &[1.0; 4]);
        assert!(condition_planes(&[3], 3, 2, 2, DType::F32).is_err());
    }
}
