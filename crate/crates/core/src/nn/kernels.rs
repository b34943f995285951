//! Dense kernels and the graph operations built on them.

use crate::autodiff::{softmax_in_place, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Geometry of a 2-d convolution. Padding is always "same":
/// `dilation * (kernel - 1) / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn dense(kernel: usize, stride: usize) -> Self {
        Self { kernel, stride, dilation: 1, groups: 1 }
    }

    pub fn depthwise(kernel: usize, stride: usize, dilation: usize, channels: usize) -> Self {
        Self { kernel, stride, dilation, groups: channels }
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn output_extent(&self, input: usize) -> usize {
        (input + 2 * self.padding() - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }

    /// Weight shape `(c_out, c_in / groups, k, k)`.
    pub fn weight_shape(&self, c_in: usize, c_out: usize) -> [usize; 4] {
        [c_out, c_in / self.groups, self.kernel, self.kernel]
    }

    fn validate(&self, c_in: usize, h: usize, w: usize, weight: &[usize]) -> Result<usize> {
        if self.kernel.is_multiple_of(2) || self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::invalid("conv2d", format!("unsupported geometry {self:?}")));
        }
        if !c_in.is_multiple_of(self.groups) {
            return Err(Error::invalid(
                "conv2d",
                format!("{c_in} input channels not divisible by {} groups", self.groups),
            ));
        }
        let span = self.dilation * (self.kernel - 1) + 1;
        if span > h + 2 * self.padding() || span > w + 2 * self.padding() {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel span {span} larger than padded input {h}x{w}"),
            ));
        }
        match weight {
            [c_out, cg, kh, kw]
                if *cg == c_in / self.groups
                    && *kh == self.kernel
                    && *kw == self.kernel
                    && c_out % self.groups == 0 =>
            {
                Ok(*c_out)
            }
            _ => Err(Error::shape("conv2d", &[c_in, h, w], weight)),
        }
    }
}

// ---- matrix products on row-major slices ----

/// Dot product with four interleaved partial sums (fixed order, so still
/// deterministic) to break the floating-point dependency chain.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

/// `da[m,k] += g[m,n] * b[k,n]^T`
pub fn matmul_grad_lhs(g: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            da[i * k + p] += dot(&g[i * n..(i + 1) * n], &b[p * n..(p + 1) * n]);
        }
    }
}

/// `db[k,n] += a[m,k]^T * g[m,n]`
pub fn matmul_grad_rhs(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                *d += av * gv;
            }
        }
    }
}

// ---- convolution ----
//
// Convolutions run on zero-padded input planes split into `s x s` stride
// phases: phase `(py, px)` holds padded pixels `(py + s*i, px + s*j)`. An
// output plane is laid out with the phase row pitch `wq`, which turns every
// kernel tap into one contiguous multiply-add of length `span`. The extra
// `wq - wo` columns per output row are scratch: dropped in the forward pass,
// held at zero in the backward pass.

struct PhaseLayout {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    pad: usize,
    s: usize,
    hq: usize,
    wq: usize,
    span: usize,
}

impl PhaseLayout {
    fn new(h: usize, w: usize, geom: &ConvGeometry) -> Self {
        let (pad, s) = (geom.padding(), geom.stride);
        let (ho, wo) = (geom.output_extent(h), geom.output_extent(w));
        let (hq, wq) = ((h + 2 * pad).div_ceil(s), (w + 2 * pad).div_ceil(s));
        Self { h, w, ho, wo, pad, s, hq, wq, span: (ho - 1) * wq + wo }
    }

    fn phase_plane(&self) -> usize {
        self.hq * self.wq
    }

    fn in_plane(&self) -> usize {
        self.s * self.s * self.phase_plane()
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wq
    }

    /// Offset inside a phase-split plane of padded pixel `(py, px)`.
    fn phase_index(&self, py: usize, px: usize) -> usize {
        ((py % self.s) * self.s + px % self.s) * self.phase_plane() + (py / self.s) * self.wq + px / self.s
    }

    /// Start of the contiguous run read by tap `(ky, kx)`.
    fn tap_offset(&self, ky: usize, kx: usize, dilation: usize) -> usize {
        self.phase_index(ky * dilation, kx * dilation)
    }

    /// Calls `f(row_in_x, dst_start, x_start)` for every run of input pixels
    /// that lands contiguously in one phase row: pixels `x_start, x_start + s,
    /// ..` of input row `row_in_x` go to `dst_start, dst_start + 1, ..`.
    fn runs(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let s = self.s;
        for y in 0..self.h {
            let py = y + self.pad;
            for phx in 0..s {
                // first column whose padded index falls in phase phx
                let x0 = (phx + s - self.pad % s) % s;
                if x0 >= self.w {
                    continue;
                }
                let len = (self.w - x0).div_ceil(s);
                let dst = ((py % s) * s + phx) * self.phase_plane() + (py / s) * self.wq + (x0 + self.pad) / s;
                f(y, dst, x0, len);
            }
        }
    }

    fn split(&self, x: &[f64]) -> Vec<f64> {
        let planes = x.len() / (self.h * self.w);
        let (ip, hw, s) = (self.in_plane(), self.h * self.w, self.s);
        let mut out = vec![0.0; planes * ip];
        for (src, dst) in x.chunks(hw).zip(out.chunks_mut(ip)) {
            self.runs(|y, d, x0, len| {
                let row = &src[y * self.w + x0..(y + 1) * self.w];
                for (o, v) in dst[d..d + len].iter_mut().zip(row.iter().step_by(s)) {
                    *o = *v;
                }
            });
        }
        out
    }

    /// Adds the interior of phase-split planes into `dx`.
    fn merge_into(&self, split: &[f64], dx: &mut [f64]) {
        let (ip, hw, s) = (self.in_plane(), self.h * self.w, self.s);
        for (dst, src) in dx.chunks_mut(hw).zip(split.chunks(ip)) {
            self.runs(|y, d, x0, len| {
                let row = &mut dst[y * self.w + x0..(y + 1) * self.w];
                for (o, v) in row.iter_mut().step_by(s).zip(&src[d..d + len]) {
                    *o += v;
                }
            });
        }
    }

    /// `(planes, ho, wo)` to `(planes, ho, wq)` with zero scratch columns.
    fn spread(&self, g: &[f64]) -> Vec<f64> {
        let planes = g.len() / (self.ho * self.wo);
        let mut out = vec![0.0; planes * self.out_plane()];
        for (src, dst) in g.chunks(self.wo).zip(out.chunks_mut(self.wq)) {
            dst[..self.wo].copy_from_slice(src);
        }
        out
    }

    /// Inverse of [`Self::spread`].
    fn gather(&self, full: &[f64]) -> Vec<f64> {
        full.chunks(self.wq).flat_map(|row| row[..self.wo].iter().copied()).collect()
    }
}

/// Visits `(out_plane, in_plane, widx, tap_offset)` for every term.
fn conv_taps(
    xs: [usize; 4],
    ws: &[usize],
    c_out: usize,
    geom: &ConvGeometry,
    lay: &PhaseLayout,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let [b, c_in, _, _] = xs;
    let cg = ws[1];
    let k = geom.kernel;
    let out_per_group = c_out / geom.groups;
    let offsets: Vec<usize> = (0..k * k).map(|t| lay.tap_offset(t / k, t % k, geom.dilation)).collect();
    for bi in 0..b {
        for oc in 0..c_out {
            let group = oc / out_per_group;
            for icl in 0..cg {
                let ic = group * cg + icl;
                let wbase = (oc * cg + icl) * k * k;
                for (t, &off) in offsets.iter().enumerate() {
                    f(bi * c_out + oc, bi * c_in + ic, wbase + t, off);
                }
            }
        }
    }
}

// Depthwise convolutions (one input channel per output channel) work on a
// batch-innermost copy of the input split into `s x s` stride phases:
// `(C, s, s, hq, wq, B)`. Phase `(py, px)` holds pixels `(py + s*i, px + s*j)`.
// Within a phase, a kernel tap reads a shifted window, so every tap is a set
// of contiguous runs at least `B` wide.

struct DepthwiseLayout {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    s: usize,
    hq: usize,
    wq: usize,
}

impl DepthwiseLayout {
    fn new([b, c, h, w]: [usize; 4], s: usize) -> Self {
        Self { b, c, h, w, s, hq: h.div_ceil(s), wq: w.div_ceil(s) }
    }

    fn len(&self) -> usize {
        self.c * self.s * self.s * self.hq * self.wq * self.b
    }

    /// Visits `(phase_row_start, image_row_start)` for every phase row: the
    /// phase row holds image pixels `start, start + s, ...` in `b`-wide cells.
    fn rows(&self, mut f: impl FnMut(usize, usize, usize)) {
        let s = self.s;
        for ch in 0..self.c {
            for py in 0..s.min(self.h) {
                for px in 0..s.min(self.w) {
                    let nx = (self.w - px).div_ceil(s);
                    let plane = ((ch * s + py) * s + px) * self.hq;
                    for (qy, y) in (py..self.h).step_by(s).enumerate() {
                        f((plane + qy) * self.wq, (ch * self.h + y) * self.w + px, nx);
                    }
                }
            }
        }
    }

    fn split(&self, x: &[f64]) -> Vec<f64> {
        let (b, s, chw) = (self.b, self.s, self.c * self.h * self.w);
        let mut out = vec![0.0; self.len()];
        self.rows(|q, i, n| {
            for (t, cell) in out[q * b..(q + n) * b].chunks_exact_mut(b).enumerate() {
                for (bi, d) in cell.iter_mut().enumerate() {
                    *d = x[bi * chw + i + t * s];
                }
            }
        });
        out
    }

    fn merge_into(&self, t: &[f64], dx: &mut [f64]) {
        let (b, s, chw) = (self.b, self.s, self.c * self.h * self.w);
        self.rows(|q, i, n| {
            for (j, cell) in t[q * b..(q + n) * b].chunks_exact(b).enumerate() {
                for (bi, v) in cell.iter().enumerate() {
                    dx[bi * chw + i + j * s] += v;
                }
            }
        });
    }
}

fn is_depthwise(xs: [usize; 4], os: [usize; 4], geom: &ConvGeometry) -> bool {
    geom.groups == xs[1] && os[1] == xs[1]
}

/// Visits `(widx, out_pos, in_pos, len)`: `len` consecutive output
/// positions (plain batch-innermost `(C, ho, wo, B)` layout) read `len`
/// consecutive phase positions, each position `B` values wide.
fn depthwise_runs(lay: &DepthwiseLayout, os: [usize; 4], geom: &ConvGeometry, mut f: impl FnMut(usize, usize, usize, usize)) {
    let [_, _, ho, wo] = os;
    let (k, s) = (geom.kernel, lay.s);
    let pad = geom.padding() as isize;
    // for a tap offset `t = k*d - pad`: phase `t mod s`, shift `floor(t / s)`,
    // and the number of rows that phase actually holds
    let split = |t: isize, extent: usize| {
        let phase = t.rem_euclid(s as isize) as usize;
        let shift = t.div_euclid(s as isize);
        let rows = if phase < extent { (extent - phase).div_ceil(s) } else { 0 };
        (phase, shift, rows)
    };
    let valid = |shift: isize, rows: usize, n_out: usize| {
        let lo = (-shift).max(0) as usize;
        let hi = (rows as isize - shift).clamp(0, n_out as isize) as usize;
        (lo, hi)
    };
    for ch in 0..lay.c {
        for ky in 0..k {
            let (py, sy, ny) = split((ky * geom.dilation) as isize - pad, lay.h);
            let (ylo, yhi) = valid(sy, ny, ho);
            for kx in 0..k {
                let (px, sx, nx) = split((kx * geom.dilation) as isize - pad, lay.w);
                let (xlo, xhi) = valid(sx, nx, wo);
                if xlo >= xhi {
                    continue;
                }
                let widx = (ch * k + ky) * k + kx;
                let plane = ((ch * s + py) * s + px) * lay.hq;
                for oy in ylo..yhi {
                    let qy = (oy as isize + sy) as usize;
                    let qx = (xlo as isize + sx) as usize;
                    f(widx, (ch * ho + oy) * wo + xlo, (plane + qy) * lay.wq + qx, xhi - xlo);
                }
            }
        }
    }
}

fn depthwise_forward(x: &[f64], wt: &[f64], xs: [usize; 4], os: [usize; 4], geom: &ConvGeometry) -> Vec<f64> {
    let lay = DepthwiseLayout::new(xs, geom.stride);
    let b = lay.b;
    let xt = lay.split(x);
    let mut ot = vec![0.0; os.iter().product()];
    depthwise_runs(&lay, os, geom, |wi, o, i, n| {
        let wv = wt[wi];
        for (d, v) in ot[o * b..(o + n) * b].iter_mut().zip(&xt[i * b..(i + n) * b]) {
            *d += wv * v;
        }
    });
    let mut out = vec![0.0; ot.len()];
    DepthwiseLayout::new(os, 1).merge_into(&ot, &mut out);
    out
}

fn depthwise_grad_input(g: &[f64], wt: &[f64], dx: &mut [f64], xs: [usize; 4], os: [usize; 4], geom: &ConvGeometry) {
    let lay = DepthwiseLayout::new(xs, geom.stride);
    let b = lay.b;
    let gt = DepthwiseLayout::new(os, 1).split(g);
    let mut dt = vec![0.0; lay.len()];
    depthwise_runs(&lay, os, geom, |wi, o, i, n| {
        let wv = wt[wi];
        for (d, v) in dt[i * b..(i + n) * b].iter_mut().zip(&gt[o * b..(o + n) * b]) {
            *d += wv * v;
        }
    });
    lay.merge_into(&dt, dx);
}

fn depthwise_grad_weight(g: &[f64], x: &[f64], dw: &mut [f64], xs: [usize; 4], os: [usize; 4], geom: &ConvGeometry) {
    let lay = DepthwiseLayout::new(xs, geom.stride);
    let b = lay.b;
    let xt = lay.split(x);
    let gt = DepthwiseLayout::new(os, 1).split(g);
    depthwise_runs(&lay, os, geom, |wi, o, i, n| {
        dw[wi] += dot(&xt[i * b..(i + n) * b], &gt[o * b..(o + n) * b]);
    });
}

/// Dense 1 x 1 stride-1 convolutions are per-sample matrix products.
fn is_pointwise(geom: &ConvGeometry) -> bool {
    geom.kernel == 1 && geom.stride == 1 && geom.groups == 1
}

pub fn conv2d_forward(x: &[f64], wt: &[f64], xs: [usize; 4], ws: &[usize], os: [usize; 4], geom: &ConvGeometry) -> Vec<f64> {
    if is_pointwise(geom) {
        let mut out = vec![0.0; os.iter().product()];
        let (c_in, c_out, hw) = (xs[1], os[1], xs[2] * xs[3]);
        for (xb, ob) in x.chunks(c_in * hw).zip(out.chunks_mut(c_out * hw)) {
            matmul_acc(wt, xb, ob, c_out, c_in, hw);
        }
        return out;
    }
    if is_depthwise(xs, os, geom) {
        return depthwise_forward(x, wt, xs, os, geom);
    }
    let lay = PhaseLayout::new(xs[2], xs[3], geom);
    let xq = lay.split(x);
    let (ip, op, span) = (lay.in_plane(), lay.out_plane(), lay.span);
    let mut full = vec![0.0; os[0] * os[1] * op];
    conv_taps(xs, ws, os[1], geom, &lay, |o, i, w, off| {
        let wv = wt[w];
        let src = &xq[i * ip + off..i * ip + off + span];
        for (d, v) in full[o * op..o * op + span].iter_mut().zip(src) {
            *d += wv * v;
        }
    });
    lay.gather(&full)
}

pub fn conv2d_grad_input(
    g: &[f64],
    wt: &[f64],
    dx: &mut [f64],
    xs: [usize; 4],
    ws: &[usize],
    os: [usize; 4],
    geom: &ConvGeometry,
) {
    if is_pointwise(geom) {
        let (c_in, c_out, hw) = (xs[1], os[1], xs[2] * xs[3]);
        for (gb, db) in g.chunks(c_out * hw).zip(dx.chunks_mut(c_in * hw)) {
            matmul_grad_rhs(wt, gb, db, c_out, c_in, hw);
        }
        return;
    }
    if is_depthwise(xs, os, geom) {
        return depthwise_grad_input(g, wt, dx, xs, os, geom);
    }
    let lay = PhaseLayout::new(xs[2], xs[3], geom);
    let gq = lay.spread(g);
    let (ip, op, span) = (lay.in_plane(), lay.out_plane(), lay.span);
    let mut dq = vec![0.0; xs[0] * xs[1] * ip];
    conv_taps(xs, ws, os[1], geom, &lay, |o, i, w, off| {
        let wv = wt[w];
        let src = &gq[o * op..o * op + span];
        for (d, v) in dq[i * ip + off..i * ip + off + span].iter_mut().zip(src) {
            *d += wv * v;
        }
    });
    lay.merge_into(&dq, dx);
}

pub fn conv2d_grad_weight(
    g: &[f64],
    x: &[f64],
    dw: &mut [f64],
    xs: [usize; 4],
    ws: &[usize],
    os: [usize; 4],
    geom: &ConvGeometry,
) {
    if is_pointwise(geom) {
        let (c_in, c_out, hw) = (xs[1], os[1], xs[2] * xs[3]);
        for (gb, xb) in g.chunks(c_out * hw).zip(x.chunks(c_in * hw)) {
            matmul_grad_lhs(gb, xb, dw, c_out, c_in, hw);
        }
        return;
    }
    if is_depthwise(xs, os, geom) {
        return depthwise_grad_weight(g, x, dw, xs, os, geom);
    }
    let lay = PhaseLayout::new(xs[2], xs[3], geom);
    let xq = lay.split(x);
    let gq = lay.spread(g);
    let (ip, op, span) = (lay.in_plane(), lay.out_plane(), lay.span);
    conv_taps(xs, ws, os[1], geom, &lay, |o, i, w, off| {
        dw[w] += dot(&xq[i * ip + off..i * ip + off + span], &gq[o * op..o * op + span]);
    });
}

// ---- pooling ----

fn pool_out(extent: usize, stride: usize) -> usize {
    (extent + 2 - 3) / stride + 1
}

pub fn pool2d_backward(
    g: &[f64],
    dx: &mut [f64],
    kind: PoolKind,
    argmax: &[usize],
    xs: [usize; 4],
    os: [usize; 4],
    stride: usize,
) {
    match kind {
        PoolKind::Max => {
            for (gi, &a) in g.iter().zip(argmax) {
                dx[a] += gi;
            }
        }
        PoolKind::Avg => {
            let [_, _, h, w] = xs;
            let [b, c, ho, wo] = os;
            for p in 0..b * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let (y0, y1) = window(oy, stride, h);
                        let (xs0, xs1) = window(ox, stride, w);
                        let count = ((y1 - y0) * (xs1 - xs0)) as f64;
                        let share = g[(p * ho + oy) * wo + ox] / count;
                        for iy in y0..y1 {
                            for ix in xs0..xs1 {
                                dx[(p * h + iy) * w + ix] += share;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Valid input range `[lo, hi)` of a 3-wide window with padding 1.
fn window(o: usize, stride: usize, extent: usize) -> (usize, usize) {
    let start = (o * stride) as isize - 1;
    let lo = start.max(0) as usize;
    let hi = ((start + 3) as usize).min(extent);
    (lo, hi)
}

#[allow(clippy::needless_range_loop)]
pub fn batch_norm_backward(g: &[f64], xhat: &[f64], inv_std: &[f64], dx: &mut [f64], dims: [usize; 4]) {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let n = (b * plane) as f64;
    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for bi in 0..b {
            let base = (bi * c + ch) * plane;
            for p in base..base + plane {
                sum_g += g[p];
                sum_gx += g[p] * xhat[p];
            }
        }
        let k = inv_std[ch] / n;
        for bi in 0..b {
            let base = (bi * c + ch) * plane;
            for p in base..base + plane {
                dx[p] += k * (n * g[p] - sum_g - xhat[p] * sum_gx);
            }
        }
    }
}

impl Graph {
    /// Cross-correlation with stride, dilation, groups and "same" padding.
    pub fn conv2d(&mut self, x: Var, weight: Var, geom: ConvGeometry) -> Result<Var> {
        let xs = self.value(x).dims4("conv2d")?;
        let ws = self.shape(weight).to_vec();
        let c_out = geom.validate(xs[1], xs[2], xs[3], &ws)?;
        let os = [xs[0], c_out, geom.output_extent(xs[2]), geom.output_extent(xs[3])];
        let out = conv2d_forward(self.value(x).values(), self.value(weight).values(), xs, &ws, os, &geom);
        let out = Tensor::new(&os, out)?;
        self.push(out, Op::Conv2d { x, w: weight, geom })
    }

    /// 3x3 pooling with padding 1. Average pooling excludes padded cells;
    /// max pooling routes gradients to the first maximal input in scan order.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::invalid("pool2d", "stride must be positive"));
        }
        let [b, c, h, w] = self.value(x).dims4("pool2d")?;
        let (ho, wo) = (pool_out(h, stride), pool_out(w, stride));
        let src = self.value(x).values();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::new();
        for p in 0..b * c {
            for oy in 0..ho {
                let (y0, y1) = window(oy, stride, h);
                for ox in 0..wo {
                    let (x0, x1) = window(ox, stride, w);
                    match kind {
                        PoolKind::Max => {
                            let mut best = f64::NEG_INFINITY;
                            let mut at = 0;
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    let idx = (p * h + iy) * w + ix;
                                    if src[idx] > best {
                                        best = src[idx];
                                        at = idx;
                                    }
                                }
                            }
                            out.push(best);
                            argmax.push(at);
                        }
                        PoolKind::Avg => {
                            let mut s = 0.0;
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    s += src[(p * h + iy) * w + ix];
                                }
                            }
                            out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[b, c, ho, wo], out)?;
        self.push(out, Op::Pool { x, kind, stride, argmax })
    }

    /// Reduces each channel plane to one value: `(B, C, 1, 1)`.
    pub fn global_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4("global-pool")?;
        let plane = h * w;
        let src = self.value(x).values();
        let mut out = Vec::with_capacity(b * c);
        let mut argmax = Vec::new();
        for p in 0..b * c {
            let vals = &src[p * plane..(p + 1) * plane];
            match kind {
                PoolKind::Avg => out.push(vals.iter().sum::<f64>() / plane as f64),
                PoolKind::Max => {
                    let mut at = 0;
                    for (i, v) in vals.iter().enumerate() {
                        if *v > vals[at] {
                            at = i;
                        }
                    }
                    out.push(vals[at]);
                    argmax.push(p * plane + at);
                }
            }
        }
        let out = Tensor::new(&[b, c, 1, 1], out)?;
        self.push(out, Op::GlobalPool { x, kind, argmax })
    }

    /// Per-channel standardization with batch statistics; no affine, no
    /// running averages.
    #[allow(clippy::needless_range_loop)]
    pub fn batch_norm(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4("batch-norm")?;
        if b < 2 {
            return Err(Error::invalid("batch-norm", "batch statistics need at least 2 samples"));
        }
        let plane = h * w;
        let n = (b * plane) as f64;
        let src = self.value(x).values();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let mut mean = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * plane;
                mean += src[base..base + plane].iter().sum::<f64>();
            }
            mean /= n;
            let mut var = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * plane;
                var += src[base..base + plane].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            }
            var /= n;
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = is;
            for bi in 0..b {
                let base = (bi * c + ch) * plane;
                for p in base..base + plane {
                    xhat[p] = (src[p] - mean) * is;
                }
            }
        }
        let out = Tensor::new(&[b, c, h, w], xhat.clone())?;
        self.push(out, Op::BatchNorm { x, xhat, inv_std })
    }

    /// `x W^T (+ b)` for `x: (N, in)`, `W: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let (n, fin, fout) = match (&xs[..], &ws[..]) {
            ([n, fin], [fout, fin2]) if fin == fin2 => (*n, *fin, *fout),
            _ => return Err(Error::shape("linear", &xs, &ws)),
        };
        if let Some(b) = bias {
            if self.shape(b) != [fout] {
                return Err(Error::shape("linear", &ws, self.shape(b)));
            }
        }
        let mut out = vec![0.0; n * fout];
        let (vx, vw) = (self.value(x).values(), self.value(weight).values());
        for i in 0..n {
            for o in 0..fout {
                out[i * fout + o] = vx[i * fin..(i + 1) * fin]
                    .iter()
                    .zip(&vw[o * fin..(o + 1) * fin])
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        if let Some(b) = bias {
            let vb = self.value(b).values();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(vb).for_each(|(o, bv)| *o += bv);
            }
        }
        let out = Tensor::new(&[n, fout], out)?;
        self.push(out, Op::Linear { x, w: weight, b: bias })
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let [b, n] = s[..] else {
            return Err(Error::invalid("cross-entropy", format!("logits must be 2-d, got {s:?}")));
        };
        if labels.len() != b {
            return Err(Error::invalid(
                "cross-entropy",
                format!("{} labels for a batch of {b}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::invalid("cross-entropy", format!("label {bad} out of range for {n} classes")));
        }
        let mut probs = self.value(logits).values().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(n).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        let out = Tensor::scalar(loss / b as f64);
        self.push(out, Op::CrossEntropy { logits, labels: labels.to_vec(), probs })
    }
}
