//! Forward/backward kernels behind the graph ops. Feature maps are
//! channel-first `[C, D, W, H]` with H fastest.

use crate::tensor::{matmul, Scalar};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh form, evaluated as `x·σ(2u)` with
/// `u = √(2/π)(x + 0.044715x³)`.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    x * gelu_gate(x).0
}

#[inline]
fn gelu_gate<T: Scalar>(x: T) -> (T, T) {
    let x2 = x * x;
    let two_u = T::of(2.0 * SQRT_2_OVER_PI) * (x + T::of(GELU_CUBIC) * x2 * x);
    let s = T::one() / (T::one() + (-two_u).exp_kernel());
    let two_du = T::of(2.0 * SQRT_2_OVER_PI) * (T::one() + T::of(3.0 * GELU_CUBIC) * x2);
    (s, two_du)
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    gelu_with_grad(x).1
}

/// `(gelu(x), gelu'(x))`.
#[inline]
pub fn gelu_with_grad<T: Scalar>(x: T) -> (T, T) {
    let (s, two_du) = gelu_gate(x);
    (x * s, s + x * s * (T::one() - s) * two_du)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp_kernel())
}

/// Output extent of a 3×3×3 convolution with one voxel of padding.
pub fn conv_out_len(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

/// Source indices for each kernel tap along one axis; replicate padding
/// clamps out-of-range taps onto the border voxel.
fn tap_table(n_in: usize, n_out: usize, stride: usize) -> [Vec<usize>; 3] {
    let mut taps: [Vec<usize>; 3] = Default::default();
    for (k, tap) in taps.iter_mut().enumerate() {
        *tap = (0..n_out)
            .map(|o| {
                let i = (o * stride + k) as isize - 1;
                i.clamp(0, n_in as isize - 1) as usize
            })
            .collect();
    }
    taps
}

/// `(first index, length)` of each run of consecutive indices.
fn contiguous_runs(idx: &[usize]) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &i in idx {
        match runs.last_mut() {
            Some((start, len)) if *start + *len == i => *len += 1,
            _ => runs.push((i, 1)),
        }
    }
    runs
}

pub struct ConvGeometry {
    pub channels_in: usize,
    pub dims_in: [usize; 3],
    pub dims_out: [usize; 3],
    taps: [[Vec<usize>; 3]; 3],
}

impl ConvGeometry {
    pub fn new(channels_in: usize, dims_in: [usize; 3], stride: usize) -> Self {
        let dims_out = dims_in.map(|n| conv_out_len(n, stride));
        let taps = [0, 1, 2].map(|a| tap_table(dims_in[a], dims_out[a], stride));
        Self {
            channels_in,
            dims_in,
            dims_out,
            taps,
        }
    }

    pub fn out_voxels(&self) -> usize {
        self.dims_out.iter().product()
    }

    fn in_voxels(&self) -> usize {
        self.dims_in.iter().product()
    }

    /// Visit every (column row, output offset, input offset) triple in the
    /// im2col layout, one contiguous output row segment at a time.
    fn for_each_row<F: FnMut(usize, usize, usize, &[usize])>(&self, mut f: F) {
        let [_, wi, hi] = self.dims_in;
        let [dout, wout, _] = self.dims_out;
        let nin = self.in_voxels();
        for c in 0..self.channels_in {
            for kd in 0..3 {
                for kw in 0..3 {
                    for kh in 0..3 {
                        let row = ((c * 3 + kd) * 3 + kw) * 3 + kh;
                        let htaps = &self.taps[2][kh];
                        for od in 0..dout {
                            let id = self.taps[0][kd][od];
                            for ow in 0..wout {
                                let iw = self.taps[1][kw][ow];
                                let src = c * nin + (id * wi + iw) * hi;
                                let dst = (od * wout + ow) * htaps.len();
                                f(row, dst, src, htaps);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let no = self.out_voxels();
        let runs = self.taps[2].each_ref().map(|t| contiguous_runs(t));
        let mut cols = Vec::with_capacity(self.channels_in * 27 * no);
        // rows are visited in storage order, so the buffer is filled by appending
        self.for_each_row(|row, _, src, _| {
            for &(start, len) in &runs[row % 3] {
                cols.extend_from_slice(&x[src + start..src + start + len]);
            }
        });
        cols
    }

    pub fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let no = self.out_voxels();
        let runs = self.taps[2].each_ref().map(|t| contiguous_runs(t));
        self.for_each_row(|row, dst, src, _| {
            let mut seg = &cols[row * no + dst..];
            for &(start, len) in &runs[row % 3] {
                for (d, &v) in dx[src + start..src + start + len].iter_mut().zip(&seg[..len]) {
                    *d += v;
                }
                seg = &seg[len..];
            }
        });
    }
}

/// `out[Co, No] = w[Co, Ci·27] · im2col(x) + b`.
pub fn conv3d_forward<T: Scalar>(
    geo: &ConvGeometry,
    x: &[T],
    w: &[T],
    b: &[T],
    channels_out: usize,
) -> Vec<T> {
    let no = geo.out_voxels();
    let kk = geo.channels_in * 27;
    let cols = geo.im2col(x);
    let mut out = vec![T::zero(); channels_out * no];
    for (co, row) in out.chunks_mut(no).enumerate() {
        row.fill(b[co]);
    }
    matmul(w, &cols, &mut out, (channels_out, kk, no), false, false, true);
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv3d_backward<T: Scalar>(
    geo: &ConvGeometry,
    x: &[T],
    w: &[T],
    dout: &[T],
    channels_out: usize,
    need: [bool; 3],
) -> ConvGrads<T> {
    let no = geo.out_voxels();
    let kk = geo.channels_in * 27;
    let cols = if need[1] { Some(geo.im2col(x)) } else { None };
    let dw = cols.as_ref().map(|cols| {
        let mut dw = vec![T::zero(); channels_out * kk];
        matmul(dout, cols, &mut dw, (channels_out, no, kk), false, true, false);
        dw
    });
    let db = need[2].then(|| dout.chunks(no).map(|r| r.iter().copied().sum()).collect());
    let dx = need[0].then(|| {
        let mut dcols = vec![T::zero(); kk * no];
        matmul(w, dout, &mut dcols, (kk, channels_out, no), true, false, false);
        let mut dx = vec![T::zero(); geo.channels_in * geo.in_voxels()];
        geo.col2im(&dcols, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}

/// Linear interpolation weights along one axis, align-corners false.
#[derive(Clone, Debug)]
pub struct AxisInterp {
    pub n_in: usize,
    pub n_out: usize,
    taps: Vec<(usize, usize, f64)>,
}

impl AxisInterp {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let taps = (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect();
        Self { n_in, n_out, taps }
    }

    pub fn is_identity(&self) -> bool {
        self.n_in == self.n_out
    }

    /// Resample axis of a `[outer, n_in, inner]` view.
    pub fn forward<T: Scalar>(&self, x: &[T], outer: usize, inner: usize) -> Vec<T> {
        let mut out = vec![T::zero(); outer * self.n_out * inner];
        for o in 0..outer {
            let src = &x[o * self.n_in * inner..(o + 1) * self.n_in * inner];
            let dst = &mut out[o * self.n_out * inner..(o + 1) * self.n_out * inner];
            for (j, &(i0, i1, lam)) in self.taps.iter().enumerate() {
                let (l1, l0) = (T::of(lam), T::of(1.0 - lam));
                let a = &src[i0 * inner..(i0 + 1) * inner];
                let b = &src[i1 * inner..(i1 + 1) * inner];
                for ((d, &va), &vb) in dst[j * inner..(j + 1) * inner].iter_mut().zip(a).zip(b) {
                    *d = va * l0 + vb * l1;
                }
            }
        }
        out
    }

    pub fn backward<T: Scalar>(&self, dout: &[T], outer: usize, inner: usize) -> Vec<T> {
        let mut dx = vec![T::zero(); outer * self.n_in * inner];
        for o in 0..outer {
            let src = &dout[o * self.n_out * inner..(o + 1) * self.n_out * inner];
            let dst = &mut dx[o * self.n_in * inner..(o + 1) * self.n_in * inner];
            for (j, &(i0, i1, lam)) in self.taps.iter().enumerate() {
                let (l1, l0) = (T::of(lam), T::of(1.0 - lam));
                for t in 0..inner {
                    let g = src[j * inner + t];
                    dst[i0 * inner + t] += g * l0;
                    dst[i1 * inner + t] += g * l1;
                }
            }
        }
        dx
    }
}

/// Separable trilinear resize of a `[C, D, W, H]` map.
#[derive(Clone, Debug)]
pub struct Trilinear {
    pub channels: usize,
    pub from: [usize; 3],
    pub to: [usize; 3],
    axes: [AxisInterp; 3],
}

impl Trilinear {
    pub fn new(channels: usize, from: [usize; 3], to: [usize; 3]) -> Self {
        let axes = [0, 1, 2].map(|a| AxisInterp::new(from[a], to[a]));
        Self {
            channels,
            from,
            to,
            axes,
        }
    }

    /// (outer, inner) of the view used when resampling `axis`, given that
    /// axes before it are already at target size.
    fn view(&self, axis: usize) -> (usize, usize) {
        let outer = self.channels * self.to[..axis].iter().product::<usize>();
        let inner = self.from[axis + 1..].iter().product::<usize>();
        (outer, inner)
    }

    pub fn forward<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut cur = x.to_vec();
        for a in 0..3 {
            if !self.axes[a].is_identity() {
                let (outer, inner) = self.view(a);
                cur = self.axes[a].forward(&cur, outer, inner);
            }
        }
        cur
    }

    pub fn backward<T: Scalar>(&self, dout: &[T]) -> Vec<T> {
        let mut cur = dout.to_vec();
        for a in (0..3).rev() {
            if !self.axes[a].is_identity() {
                let (outer, inner) = self.view(a);
                cur = self.axes[a].backward(&cur, outer, inner);
            }
        }
        cur
    }
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-channel normalisation over the spatial axes. Returns
/// `(y, mean, inv_std)`.
pub fn instance_norm_forward<T: Scalar>(x: &[T], channels: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = x.len() / channels;
    let inv_n = T::one() / T::of(n as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(channels);
    let mut inv_stds = Vec::with_capacity(channels);
    for c in 0..channels {
        let xs = &x[c * n..(c + 1) * n];
        let mean = xs.iter().copied().sum::<T>() * inv_n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let inv_std = T::one() / (var + T::of(INSTANCE_NORM_EPS)).sqrt();
        for (o, &v) in y[c * n..(c + 1) * n].iter_mut().zip(xs) {
            *o = (v - mean) * inv_std;
        }
        means.push(mean);
        inv_stds.push(inv_std);
    }
    (y, means, inv_stds)
}

pub fn instance_norm_backward<T: Scalar>(y: &[T], dy: &[T], inv_std: &[T]) -> Vec<T> {
    let channels = inv_std.len();
    let n = y.len() / channels;
    let inv_n = T::one() / T::of(n as f64);
    let mut dx = vec![T::zero(); y.len()];
    for c in 0..channels {
        let ys = &y[c * n..(c + 1) * n];
        let gs = &dy[c * n..(c + 1) * n];
        let sum_g = gs.iter().copied().sum::<T>();
        let sum_gy = gs.iter().zip(ys).map(|(&g, &v)| g * v).sum::<T>();
        for ((d, &g), &v) in dx[c * n..(c + 1) * n].iter_mut().zip(gs).zip(ys) {
            *d = inv_std[c] * (g - inv_n * sum_g - v * inv_n * sum_gy);
        }
    }
    dx
}

/// Shared per-voxel gate perceptron with the hidden pre-activation split
/// into a voxel term `a[H, N]` and a per-call constant `c[H]`:
/// `out[x] = b2 + Σ_h w2[h] · gelu(a[h, x] + c[h])`.
pub fn gate_mlp_forward<T: Scalar>(a: &[T], c: &[T], w2: &[T], b2: T) -> Vec<T> {
    let hidden = c.len();
    let n = a.len() / hidden;
    let mut out = vec![b2; n];
    for h in 0..hidden {
        let (ch, wh) = (c[h], w2[h]);
        for (o, &v) in out.iter_mut().zip(&a[h * n..(h + 1) * n]) {
            *o += wh * gelu(v + ch);
        }
    }
    out
}

pub struct GateMlpGrads<T> {
    pub da: Vec<T>,
    pub dc: Vec<T>,
    pub dw2: Vec<T>,
    pub db2: T,
}

pub fn gate_mlp_backward<T: Scalar>(a: &[T], c: &[T], w2: &[T], dout: &[T]) -> GateMlpGrads<T> {
    let hidden = c.len();
    let n = dout.len();
    let mut da = vec![T::zero(); a.len()];
    let mut dc = vec![T::zero(); hidden];
    let mut dw2 = vec![T::zero(); hidden];
    const LANES: usize = 8;
    for h in 0..hidden {
        let (ch, wh) = (c[h], w2[h]);
        let mut sum_dz = [T::zero(); LANES];
        let mut sum_act = [T::zero(); LANES];
        let row = &a[h * n..(h + 1) * n];
        let da_row = &mut da[h * n..(h + 1) * n];
        let mut step = |d: &mut [T], v: &[T], g: &[T], lanes: usize| {
            for j in 0..lanes {
                let (act, slope) = gelu_with_grad(v[j] + ch);
                let dz = g[j] * wh * slope;
                d[j] = dz;
                sum_dz[j] += dz;
                sum_act[j] += g[j] * act;
            }
        };
        let body = n - n % LANES;
        for ((d, v), g) in da_row[..body]
            .chunks_exact_mut(LANES)
            .zip(row[..body].chunks_exact(LANES))
            .zip(dout[..body].chunks_exact(LANES))
        {
            step(d, v, g, LANES);
        }
        step(&mut da_row[body..], &row[body..], &dout[body..], n - body);
        dc[h] = sum_dz.iter().copied().sum();
        dw2[h] = sum_act.iter().copied().sum();
    }
    let db2 = dout.iter().copied().sum();
    GateMlpGrads { da, dc, dw2, db2 }
}
