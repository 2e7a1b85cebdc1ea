//! Differentiable backward warping.
//!
//! A [`ControlGrid`] holds a coarse lattice of displacements anchored at the
//! image corners. It is bilinearly upsampled into a [`DenseFlow`], and images
//! are resampled by reading the source at `p + flow(p)`.
//!
//! Displacements are in normalized units: a displacement of `1.0` spans the
//! whole image (corner-aligned), so one pixel along x is `1 / (W - 1)`.
//! Out-of-range reads clamp to the border.

use num_traits::Float;

use crate::error::{CoreError, Result};
use crate::exec::Exec;
use crate::raster::{Image, LabelMap, Planar};

pub const DEFAULT_BOUND: f64 = 0.15;
pub const DEFAULT_GRID: usize = 8;

/// Coarse warp parameters: `2 x gh x gw` displacements (x plane, then y plane).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid<T> {
    gh: usize,
    gw: usize,
    offsets: Vec<T>,
    bound: T,
}

impl<T: Float> ControlGrid<T> {
    pub fn new(gh: usize, gw: usize, offsets: Vec<T>, bound: T) -> Result<Self> {
        if gh < 2 || gw < 2 {
            return Err(CoreError::arg(format!(
                "control grid must be at least 2x2, got {gh}x{gw}"
            )));
        }
        if !(bound > T::zero()) {
            return Err(CoreError::arg("control grid bound must be positive"));
        }
        if offsets.len() != 2 * gh * gw {
            return Err(CoreError::Shape {
                expected: format!("{} offsets", 2 * gh * gw),
                actual: format!("{} offsets", offsets.len()),
            });
        }
        if offsets.iter().any(|o| !(o.abs() <= bound)) {
            return Err(CoreError::arg("control grid offset exceeds its bound"));
        }
        Ok(ControlGrid { gh, gw, offsets, bound })
    }

    pub fn zeros(gh: usize, gw: usize, bound: T) -> Result<Self> {
        ControlGrid::new(gh, gw, vec![T::zero(); 2 * gh * gw], bound)
    }

    /// Squashes unconstrained values into `bound * tanh(raw)`.
    pub fn from_unbounded(gh: usize, gw: usize, raw: &[T], bound: T) -> Result<Self> {
        let offsets = raw.iter().map(|&r| bound * r.tanh()).collect();
        ControlGrid::new(gh, gw, offsets, bound)
    }

    pub fn rows(&self) -> usize {
        self.gh
    }

    pub fn cols(&self) -> usize {
        self.gw
    }

    pub fn bound(&self) -> T {
        self.bound
    }

    pub fn offsets(&self) -> &[T] {
        &self.offsets
    }

    /// Displacement `(dx, dy)` at lattice node `(i, j)`.
    pub fn offset(&self, i: usize, j: usize) -> (T, T) {
        let n = self.gh * self.gw;
        let k = i * self.gw + j;
        (self.offsets[k], self.offsets[n + k])
    }
}

/// A per-pixel backward displacement field, planes `(dx, dy)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFlow<T>(Planar<T>);

impl<T: Float> DenseFlow<T> {
    pub fn new(field: Planar<T>) -> Result<Self> {
        if field.channels() != 2 {
            return Err(CoreError::arg(format!("flow needs 2 planes, got {}", field.channels())));
        }
        if field.data().iter().any(|v| !v.is_finite()) {
            return Err(CoreError::arg("flow contains non-finite values"));
        }
        Ok(DenseFlow(field))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        DenseFlow(Planar::filled(2, height, width, T::zero()))
    }

    pub fn constant(height: usize, width: usize, dx: T, dy: T) -> Self {
        DenseFlow(Planar::from_fn(
            2,
            height,
            width,
            |c, _, _| if c == 0 { dx } else { dy },
        ))
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn field(&self) -> &Planar<T> {
        &self.0
    }

    pub fn at(&self, y: usize, x: usize) -> (T, T) {
        (self.0.get(0, y, x), self.0.get(1, y, x))
    }

    /// Euclidean distance between two flows of equal size.
    pub fn l2_distance(&self, other: &DenseFlow<T>) -> Result<T> {
        if self.0.dims() != other.0.dims() {
            return Err(shape_err(self.0.dims(), other.0.dims()));
        }
        let ss = self
            .0
            .data()
            .iter()
            .zip(other.0.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        Ok(ss.sqrt())
    }

    pub fn cast<U: Float>(&self) -> DenseFlow<U> {
        DenseFlow(self.0.map(|v| U::from(v).expect("float cast")))
    }
}

fn shape_err(a: (usize, usize, usize), b: (usize, usize, usize)) -> CoreError {
    CoreError::Shape {
        expected: format!("{}x{}", a.1, a.2),
        actual: format!("{}x{}", b.1, b.2),
    }
}

/// Row-major `n_out x n_grid` matrix of corner-anchored linear interpolation
/// weights: row `i` places output sample `i` at grid coordinate
/// `i * (n_grid - 1) / (n_out - 1)`.
///
/// Used both for control-grid upsampling and for resizing feature maps.
pub fn interpolation_matrix(n_out: usize, n_grid: usize) -> Vec<f64> {
    assert!(n_out >= 1 && n_grid >= 1);
    let mut m = vec![0.0; n_out * n_grid];
    for i in 0..n_out {
        let t = if n_out > 1 {
            (i * (n_grid - 1)) as f64 / (n_out - 1) as f64
        } else {
            0.0
        };
        let g0 = (t.floor() as usize).min(n_grid - 1);
        let g1 = (g0 + 1).min(n_grid - 1);
        let w1 = t - g0 as f64;
        m[i * n_grid + g0] += 1.0 - w1;
        m[i * n_grid + g1] += w1;
    }
    m
}

/// Bilinear upsampling of the control lattice to `height x width`.
pub fn dense_flow_from_control<T: Float>(cg: &ControlGrid<T>, height: usize, width: usize) -> Result<DenseFlow<T>> {
    if height < 2 || width < 2 {
        return Err(CoreError::arg(format!(
            "flow size must be at least 2x2, got {height}x{width}"
        )));
    }
    let (gh, gw) = (cg.gh, cg.gw);
    let ah: Vec<T> = interpolation_matrix(height, gh).into_iter().map(cast).collect();
    let aw: Vec<T> = interpolation_matrix(width, gw).into_iter().map(cast).collect();
    let mut data = Vec::with_capacity(2 * height * width);
    for c in 0..2 {
        let lattice = &cg.offsets[c * gh * gw..(c + 1) * gh * gw];
        // Interpolate along x first: gh x width.
        let mut rows = vec![T::zero(); gh * width];
        for g in 0..gh {
            for x in 0..width {
                let mut acc = T::zero();
                for k in 0..gw {
                    acc = acc + aw[x * gw + k] * lattice[g * gw + k];
                }
                rows[g * width + x] = acc;
            }
        }
        for y in 0..height {
            for x in 0..width {
                let mut acc = T::zero();
                for g in 0..gh {
                    acc = acc + ah[y * gh + g] * rows[g * width + x];
                }
                data.push(acc);
            }
        }
    }
    DenseFlow::new(Planar::new(2, height, width, data)?)
}

#[inline]
fn cast<T: Float>(v: f64) -> T {
    T::from(v).expect("float cast")
}

/// Source coordinate along one axis after clamping, plus whether the read was
/// strictly interior (so the coordinate is differentiable).
#[inline]
fn source_coord<T: Float>(pos: usize, disp: T, len: usize) -> (usize, usize, T, bool) {
    let hi = cast::<T>((len - 1) as f64);
    let s = cast::<T>(pos as f64) + disp * hi;
    let interior = s > T::zero() && s < hi;
    let s = s.max(T::zero()).min(hi);
    let i0 = s.floor().to_usize().unwrap_or(0).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, s - cast(i0 as f64), interior)
}

#[inline]
fn lerp<T: Float>(a: T, b: T, t: T) -> T {
    // a + t (b - a), pinned to [min(a,b), max(a,b)] so rounding never leaves the hull.
    (a + t * (b - a)).max(a.min(b)).min(a.max(b))
}

/// Raw slice kernels over channel-major buffers; the batched network ops call
/// these directly.
pub mod kernels {
    use super::*;

    /// Bilinear backward warp of a `channels x height x width` buffer by a
    /// `2 x height x width` flow.
    pub fn bilinear_forward<T: Float + Send + Sync>(
        exec: Exec,
        img: &[T],
        channels: usize,
        height: usize,
        width: usize,
        flow: &[T],
        out: &mut [T],
    ) {
        let n = height * width;
        assert_eq!(img.len(), channels * n);
        assert_eq!(flow.len(), 2 * n);
        assert_eq!(out.len(), channels * n);
        exec.for_each_chunk_mut(out, width, |row, dst| {
            let c = row / height;
            let y = row % height;
            let plane = &img[c * n..(c + 1) * n];
            for (x, o) in dst.iter_mut().enumerate() {
                let p = y * width + x;
                let (x0, x1, tx, _) = source_coord(x, flow[p], width);
                let (y0, y1, ty, _) = source_coord(y, flow[n + p], height);
                let top = lerp(plane[y0 * width + x0], plane[y0 * width + x1], tx);
                let bot = lerp(plane[y1 * width + x0], plane[y1 * width + x1], tx);
                *o = lerp(top, bot, ty);
            }
        });
    }

    /// Gradients of `sum(upstream * bilinear_forward(img, flow))` with respect
    /// to `img` and `flow`. Both outputs are overwritten.
    #[allow(clippy::too_many_arguments)]
    pub fn bilinear_backward<T: Float + Send + Sync>(
        exec: Exec,
        img: &[T],
        channels: usize,
        height: usize,
        width: usize,
        flow: &[T],
        upstream: &[T],
        grad_img: &mut [T],
        grad_flow: &mut [T],
    ) {
        let n = height * width;
        assert_eq!(upstream.len(), channels * n);
        assert_eq!(grad_img.len(), channels * n);
        assert_eq!(grad_flow.len(), 2 * n);
        let sx = cast::<T>((width - 1) as f64);
        let sy = cast::<T>((height - 1) as f64);
        let one = T::one();
        // Each channel scatters into its own plane; flow gradients are
        // per-channel partials summed afterwards in channel order.
        let partials = exec.map_range(channels, |c| {
            let plane = &img[c * n..(c + 1) * n];
            let up = &upstream[c * n..(c + 1) * n];
            let mut gi = vec![T::zero(); n];
            let mut gf = vec![T::zero(); 2 * n];
            for y in 0..height {
                for x in 0..width {
                    let p = y * width + x;
                    let g = up[p];
                    if g == T::zero() {
                        continue;
                    }
                    let (x0, x1, tx, in_x) = source_coord(x, flow[p], width);
                    let (y0, y1, ty, in_y) = source_coord(y, flow[n + p], height);
                    let v00 = plane[y0 * width + x0];
                    let v01 = plane[y0 * width + x1];
                    let v10 = plane[y1 * width + x0];
                    let v11 = plane[y1 * width + x1];
                    gi[y0 * width + x0] = gi[y0 * width + x0] + g * (one - ty) * (one - tx);
                    gi[y0 * width + x1] = gi[y0 * width + x1] + g * (one - ty) * tx;
                    gi[y1 * width + x0] = gi[y1 * width + x0] + g * ty * (one - tx);
                    gi[y1 * width + x1] = gi[y1 * width + x1] + g * ty * tx;
                    if in_x {
                        let d = (one - ty) * (v01 - v00) + ty * (v11 - v10);
                        gf[p] = g * d * sx;
                    }
                    if in_y {
                        let d = (one - tx) * (v10 - v00) + tx * (v11 - v01);
                        gf[n + p] = g * d * sy;
                    }
                }
            }
            (gi, gf)
        });
        grad_flow.iter_mut().for_each(|v| *v = T::zero());
        for (c, (gi, gf)) in partials.into_iter().enumerate() {
            grad_img[c * n..(c + 1) * n].copy_from_slice(&gi);
            for (acc, v) in grad_flow.iter_mut().zip(gf) {
                *acc = *acc + v;
            }
        }
    }

    /// Nearest-neighbour backward warp of a `height x width` label buffer.
    pub fn nearest_forward<T: Float + Send + Sync>(
        exec: Exec,
        labels: &[u8],
        height: usize,
        width: usize,
        flow: &[T],
        out: &mut [u8],
    ) {
        let n = height * width;
        assert_eq!(labels.len(), n);
        assert_eq!(flow.len(), 2 * n);
        let nearest = |pos: usize, disp: T, len: usize| -> usize {
            let hi = cast::<T>((len - 1) as f64);
            let s = (cast::<T>(pos as f64) + disp * hi).round().max(T::zero()).min(hi);
            s.to_usize().unwrap_or(0).min(len - 1)
        };
        exec.for_each_chunk_mut(out, width, |y, dst| {
            for (x, o) in dst.iter_mut().enumerate() {
                let p = y * width + x;
                let sx = nearest(x, flow[p], width);
                let sy = nearest(y, flow[n + p], height);
                *o = labels[sy * width + sx];
            }
        });
    }
}

fn check_same_size(h: usize, w: usize, flow_h: usize, flow_w: usize) -> Result<()> {
    if (h, w) != (flow_h, flow_w) {
        return Err(CoreError::Shape {
            expected: format!("{flow_h}x{flow_w} (flow size)"),
            actual: format!("{h}x{w}"),
        });
    }
    Ok(())
}

/// Bilinear backward warp: `out(p) = img(p + flow(p))`.
pub fn sample_bilinear<T: Float + Send + Sync>(img: &Planar<T>, flow: &DenseFlow<T>) -> Result<Planar<T>> {
    sample_bilinear_with(Exec::default(), img, flow)
}

pub fn sample_bilinear_with<T: Float + Send + Sync>(
    exec: Exec,
    img: &Planar<T>,
    flow: &DenseFlow<T>,
) -> Result<Planar<T>> {
    let (c, h, w) = img.dims();
    check_same_size(h, w, flow.height(), flow.width())?;
    let mut out = vec![T::zero(); c * h * w];
    kernels::bilinear_forward(exec, img.data(), c, h, w, flow.field().data(), &mut out);
    Planar::new(c, h, w, out)
}

/// Warps an RGB image; the result stays in [0, 1] because bilinear reads are
/// convex combinations.
pub fn warp_image(img: &Image, flow: &DenseFlow<f32>) -> Result<Image> {
    Image::new(sample_bilinear(img.pixels(), flow)?)
}

/// Nearest-neighbour backward warp of a label map; never invents classes.
pub fn sample_nearest<T: Float + Send + Sync>(lbl: &LabelMap, flow: &DenseFlow<T>) -> Result<LabelMap> {
    sample_nearest_with(Exec::default(), lbl, flow)
}

pub fn sample_nearest_with<T: Float + Send + Sync>(
    exec: Exec,
    lbl: &LabelMap,
    flow: &DenseFlow<T>,
) -> Result<LabelMap> {
    let (h, w) = (lbl.height(), lbl.width());
    check_same_size(h, w, flow.height(), flow.width())?;
    let mut out = vec![0u8; h * w];
    kernels::nearest_forward(exec, lbl.data(), h, w, flow.field().data(), &mut out);
    LabelMap::new(h, w, lbl.num_classes(), out)
}

/// Gradients of `sum(upstream * sample_bilinear(img, flow))` with respect to
/// the image and the flow.
pub fn flow_gradients<T: Float + Send + Sync>(
    img: &Planar<T>,
    flow: &DenseFlow<T>,
    upstream: &Planar<T>,
) -> Result<(Planar<T>, DenseFlow<T>)> {
    let (c, h, w) = img.dims();
    check_same_size(h, w, flow.height(), flow.width())?;
    if upstream.dims() != img.dims() {
        return Err(shape_err(img.dims(), upstream.dims()));
    }
    let mut gi = vec![T::zero(); c * h * w];
    let mut gf = vec![T::zero(); 2 * h * w];
    kernels::bilinear_backward(
        Exec::default(),
        img.data(),
        c,
        h,
        w,
        flow.field().data(),
        upstream.data(),
        &mut gi,
        &mut gf,
    );
    Ok((Planar::new(c, h, w, gi)?, DenseFlow::new(Planar::new(2, h, w, gf)?)?))
}
