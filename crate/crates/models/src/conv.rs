//! 2-D convolution as im2col followed by a matrix product, so both passes run
//! through the optimized GEMM instead of direct loops.

use candle_core::{bail, CpuStorage, CustomOp1, DType, Layout, Module, Shape, Tensor, WithDType};
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            kernel: 1,
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl ConvGeometry {
    /// Pointwise convolution with the given stride.
    pub fn pointwise(stride: usize) -> Self {
        ConvGeometry {
            stride,
            ..Default::default()
        }
    }

    /// `3 x 3` kernel padded to keep the size at stride 1.
    pub fn same3(stride: usize, dilation: usize) -> Self {
        ConvGeometry {
            kernel: 3,
            stride,
            padding: dilation,
            dilation,
        }
    }

    pub fn output_len(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }

    /// Source index along one axis for output position `o` and tap `k`.
    #[inline]
    fn source(&self, o: usize, k: usize, n: usize) -> Option<usize> {
        let s = (o * self.stride + k * self.dilation) as isize - self.padding as isize;
        (s >= 0 && (s as usize) < n).then_some(s as usize)
    }
}

/// `(B, C, H, W)` -> `(B, OH * OW, C * k * k)` patch matrix.
struct Im2Col {
    geo: ConvGeometry,
}

fn im2col<T: Float>(x: &[T], dims: (usize, usize, usize, usize), geo: ConvGeometry) -> Vec<T> {
    let (b, c, h, w) = dims;
    let (oh, ow, k) = (geo.output_len(h), geo.output_len(w), geo.kernel);
    let row = c * k * k;
    let mut out = vec![T::zero(); b * oh * ow * row];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut out[((bi * oh + oy) * ow + ox) * row..][..row];
                for ci in 0..c {
                    let plane = &x[(bi * c + ci) * h * w..][..h * w];
                    for ky in 0..k {
                        let Some(sy) = geo.source(oy, ky, h) else { continue };
                        for kx in 0..k {
                            if let Some(sx) = geo.source(ox, kx, w) {
                                dst[(ci * k + ky) * k + kx] = plane[sy * w + sx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Float>(cols: &[T], dims: (usize, usize, usize, usize), geo: ConvGeometry) -> Vec<T> {
    let (b, c, h, w) = dims;
    let (oh, ow, k) = (geo.output_len(h), geo.output_len(w), geo.kernel);
    let row = c * k * k;
    let mut out = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = &cols[((bi * oh + oy) * ow + ox) * row..][..row];
                for ci in 0..c {
                    let plane = &mut out[(bi * c + ci) * h * w..][..h * w];
                    for ky in 0..k {
                        let Some(sy) = geo.source(oy, ky, h) else { continue };
                        for kx in 0..k {
                            if let Some(sx) = geo.source(ox, kx, w) {
                                plane[sy * w + sx] = plane[sy * w + sx] + src[(ci * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im_tensor<T: Float + WithDType>(
    grad: &Tensor,
    dims: (usize, usize, usize, usize),
    geo: ConvGeometry,
) -> candle_core::Result<Tensor> {
    let g = grad.contiguous()?.flatten_all()?.to_vec1::<T>()?;
    Tensor::from_vec(col2im(&g, dims, geo), dims, grad.device())
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l.shape().dims4()?;
        let Some((start, end)) = l.contiguous_offsets() else {
            bail!("im2col expects a contiguous input")
        };
        let g = self.geo;
        let shape = Shape::from((
            dims.0,
            g.output_len(dims.2) * g.output_len(dims.3),
            dims.1 * g.kernel * g.kernel,
        ));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(&v[start..end], dims, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(&v[start..end], dims, g)),
            _ => bail!("im2col supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dims = arg.dims4()?;
        let g = match arg.dtype() {
            DType::F32 => col2im_tensor::<f32>(grad, dims, self.geo)?,
            DType::F64 => col2im_tensor::<f64>(grad, dims, self.geo)?,
            d => bail!("im2col backward: unsupported dtype {d:?}"),
        };
        Ok(Some(g))
    }
}

/// Convolution layer with `(C_out, C_in, k, k)` weights and optional bias.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    geo: ConvGeometry,
}

impl Conv {
    pub fn new(weight: Tensor, bias: Option<Tensor>, geo: ConvGeometry) -> Self {
        Conv { weight, bias, geo }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geo
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (cout, cin, k, _) = self.weight.dims4()?;
        if cin != c || k != self.geo.kernel {
            bail!("conv expects {cin} input channels and a {k}x{k} kernel, got {c} channels");
        }
        let (oh, ow) = (self.geo.output_len(h), self.geo.output_len(w));
        let wmat = self.weight.reshape((cout, cin * k * k))?.t()?;
        let y = if k == 1 && self.geo.stride == 1 && self.geo.padding == 0 {
            // Pointwise: no patch extraction needed.
            x.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?.matmul(&wmat)?
        } else {
            x.contiguous()?
                .apply_op1(Im2Col { geo: self.geo })?
                .reshape((b * oh * ow, c * k * k))?
                .matmul(&wmat)?
        };
        let y = y.reshape((b, oh, ow, cout))?.permute((0, 3, 1, 2))?;
        let y = match &self.bias {
            Some(bias) => y.broadcast_add(&bias.reshape((1, cout, 1, 1))?)?,
            None => y,
        };
        y.contiguous()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn ramp(n: usize, scale: f64, shape: &[usize]) -> Tensor {
        let v: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7311).sin() * scale).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn matches_reference_convolution() {
        for (k, stride, padding, dilation) in [
            (3, 1, 1, 1),
            (3, 2, 1, 1),
            (3, 1, 2, 2),
            (3, 1, 4, 4),
            (1, 2, 0, 1),
            (1, 1, 0, 1),
        ] {
            let x = ramp(2 * 3 * 9 * 10, 1.0, &[2, 3, 9, 10]);
            let w = ramp(4 * 3 * k * k, 0.5, &[4, 3, k, k]);
            let b = ramp(4, 0.1, &[4]);
            let geo = ConvGeometry {
                kernel: k,
                stride,
                padding,
                dilation,
            };
            let ours = Conv::new(w.clone(), Some(b.clone()), geo).forward(&x).unwrap();
            let reference = x
                .conv2d(&w, padding, stride, dilation, 1)
                .unwrap()
                .broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap())
                .unwrap();
            assert_eq!(ours.dims(), reference.dims());
            let diff = (ours - reference)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!(diff < 1e-12, "k={k} s={stride} p={padding} d={dilation}: {diff}");
        }
    }

    #[test]
    fn gradients_match_reference_backward() {
        let geo = ConvGeometry {
            kernel: 3,
            stride: 2,
            padding: 2,
            dilation: 2,
        };
        let x = Var::from_tensor(&ramp(2 * 2 * 7 * 7, 1.0, &[2, 2, 7, 7])).unwrap();
        let w = Var::from_tensor(&ramp(3 * 2 * 9, 0.5, &[3, 2, 3, 3])).unwrap();
        let up = ramp(2 * 3 * 4 * 4, 1.0, &[2, 3, 4, 4]);
        let ours = (Conv::new(w.as_tensor().clone(), None, geo)
            .forward(x.as_tensor())
            .unwrap()
            * &up)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let reference = (x.as_tensor().conv2d(w.as_tensor(), 2, 2, 2, 1).unwrap() * &up)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        for v in [&x, &w] {
            let a = ours.get(v.as_tensor()).unwrap();
            let b = reference.get(v.as_tensor()).unwrap();
            let diff = (a - b)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!(diff < 1e-10, "{diff}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let geo = ConvGeometry::same3(2, 1);
        let w = ramp(3 * 2 * 9, 0.5, &[3, 2, 3, 3]);
        let x0: Vec<f64> = (0..2 * 7 * 8).map(|i| (i as f64 * 0.377).cos()).collect();
        let up = ramp(3 * 4 * 4, 1.0, &[1, 3, 4, 4]);
        let conv = Conv::new(w, None, geo);
        let loss = |v: &[f64]| {
            let x = Tensor::from_slice(v, (1, 2, 7, 8), &Device::Cpu).unwrap();
            (conv.forward(&x).unwrap() * &up)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let x = Var::from_tensor(&Tensor::from_slice(&x0, (1, 2, 7, 8), &Device::Cpu).unwrap()).unwrap();
        let grads = (conv.forward(x.as_tensor()).unwrap() * &up)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let g = grads
            .get(x.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let eps = 1e-6;
        for i in 0..x0.len() {
            let (mut plus, mut minus) = (x0.clone(), x0.clone());
            plus[i] += eps;
            minus[i] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-6, "{i}: {fd} vs {}", g[i]);
        }
    }
}
