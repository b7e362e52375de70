//! Raw forward/backward kernels over flat `[N, C, D, H, W]` buffers.
//!
//! Two-dimensional tensors are handled as volumes with a unit depth axis, so
//! every kernel here is written once for three spatial axes.

/// Fully resolved geometry of one convolution call.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn k_len(&self) -> usize {
        self.cin_g() * self.kernel.iter().product::<usize>()
    }

    fn in_spatial(&self) -> usize {
        self.input.iter().product()
    }

    fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    /// Fills `col` (K x P, row-major) for sample `n`, group `g`.
    fn im2col(&self, x: &[f64], n: usize, g: usize, col: &mut [f64]) {
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let p = self.out_spatial();
        let cg = self.cin_g();
        let mut row = 0;
        for c in 0..cg {
            let plane = &x[((n * self.cin) + g * cg + c) * self.in_spatial()..][..self.in_spatial()];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let dst = &mut col[row * p..(row + 1) * p];
                        let mut idx = 0;
                        for oz in 0..od {
                            let iz = (oz * self.stride[0] + kz * self.dilation[0]) as isize
                                - self.padding[0] as isize;
                            for oy in 0..oh {
                                let iy = (oy * self.stride[1] + ky * self.dilation[1]) as isize
                                    - self.padding[1] as isize;
                                let seg = &mut dst[idx..idx + ow];
                                idx += ow;
                                if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                    seg.iter_mut().for_each(|v| *v = 0.0);
                                    continue;
                                }
                                let base = (iz as usize * ih + iy as usize) * iw;
                                for (ox, v) in seg.iter_mut().enumerate() {
                                    let ix = (ox * self.stride[2] + kx * self.dilation[2]) as isize
                                        - self.padding[2] as isize;
                                    *v = if ix < 0 || ix >= iw as isize {
                                        0.0
                                    } else {
                                        plane[base + ix as usize]
                                    };
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` (K x P) back into `gx` for sample `n`, group `g`.
    fn col2im(&self, col: &[f64], n: usize, g: usize, gx: &mut [f64]) {
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let p = self.out_spatial();
        let cg = self.cin_g();
        let sp = self.in_spatial();
        let mut row = 0;
        for c in 0..cg {
            let plane = &mut gx[((n * self.cin) + g * cg + c) * sp..][..sp];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let src = &col[row * p..(row + 1) * p];
                        let mut idx = 0;
                        for oz in 0..od {
                            let iz = (oz * self.stride[0] + kz * self.dilation[0]) as isize
                                - self.padding[0] as isize;
                            for oy in 0..oh {
                                let iy = (oy * self.stride[1] + ky * self.dilation[1]) as isize
                                    - self.padding[1] as isize;
                                let seg = &src[idx..idx + ow];
                                idx += ow;
                                if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                    continue;
                                }
                                let base = (iz as usize * ih + iy as usize) * iw;
                                for (ox, v) in seg.iter().enumerate() {
                                    let ix = (ox * self.stride[2] + kx * self.dilation[2]) as isize
                                        - self.padding[2] as isize;
                                    if ix >= 0 && ix < iw as isize {
                                        plane[base + ix as usize] += *v;
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

/// `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        let a_end = (m - 1) * rsa + (k - 1) * csa;
        let b_end = (k - 1) * rsb + (n - 1) * csb;
        assert!(a_end < a.len() && b_end < b.len(), "gemm operand out of bounds");
    }
    assert!((m - 1) * rsc + n - 1 < c.len(), "gemm output out of bounds");
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

pub(crate) fn conv_forward(geo: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let p = geo.out_spatial();
    let kl = geo.k_len();
    let cog = geo.cout_g();
    let mut out = vec![0.0; geo.n * geo.cout * p];
    let mut col = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kl * p]
    };
    for n in 0..geo.n {
        for g in 0..geo.groups {
            let wg = &w[g * cog * kl..(g + 1) * cog * kl];
            let og = &mut out[(n * geo.cout + g * cog) * p..(n * geo.cout + (g + 1) * cog) * p];
            if geo.is_pointwise() {
                let xg = &x[(n * geo.cin + g * geo.cin_g()) * p..][..kl * p];
                gemm(cog, kl, p, wg, kl, 1, xg, p, 1, 0.0, og, p);
            } else {
                geo.im2col(x, n, g, &mut col);
                gemm(cog, kl, p, wg, kl, 1, &col, p, 1, 0.0, og, p);
            }
        }
    }
    out
}

/// Accumulates input and weight gradients for one convolution.
pub(crate) fn conv_backward(
    geo: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
) {
    let p = geo.out_spatial();
    let kl = geo.k_len();
    let cog = geo.cout_g();
    let pointwise = geo.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0; kl * p] };
    let mut gcol = if pointwise { Vec::new() } else { vec![0.0; kl * p] };
    for n in 0..geo.n {
        for g in 0..geo.groups {
            let wg = &w[g * cog * kl..(g + 1) * cog * kl];
            let gyg = &gy[(n * geo.cout + g * cog) * p..(n * geo.cout + (g + 1) * cog) * p];
            let x_off = (n * geo.cin + g * geo.cin_g()) * p;
            if let Some(gw) = gw.as_deref_mut() {
                let gwg = &mut gw[g * cog * kl..(g + 1) * cog * kl];
                if pointwise {
                    let xg = &x[x_off..x_off + kl * p];
                    gemm(cog, p, kl, gyg, p, 1, xg, 1, p, 1.0, gwg, kl);
                } else {
                    geo.im2col(x, n, g, &mut col);
                    gemm(cog, p, kl, gyg, p, 1, &col, 1, p, 1.0, gwg, kl);
                }
            }
            if let Some(gx) = gx.as_deref_mut() {
                if pointwise {
                    let gxg = &mut gx[x_off..x_off + kl * p];
                    gemm(kl, cog, p, wg, 1, kl, gyg, p, 1, 1.0, gxg, p);
                } else {
                    gemm(kl, cog, p, wg, 1, kl, gyg, p, 1, 0.0, &mut gcol, p);
                    geo.col2im(&gcol, n, g, gx);
                }
            }
        }
    }
}

/// Per-axis sampling table for endpoint-aligned linear interpolation.
#[derive(Clone, Debug)]
pub(crate) struct AxisSampler {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisSampler {
    pub fn new(input: usize, output: usize) -> Self {
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for j in 0..output {
            let src = if output == 1 || input == 1 {
                0.0
            } else {
                (j * (input - 1)) as f64 / (output - 1) as f64
            };
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(src - i0 as f64);
        }
        Self { lo, hi, frac }
    }
}

pub(crate) fn interpolate_forward(
    x: &[f64],
    planes: usize,
    input: [usize; 3],
    output: [usize; 3],
) -> Vec<f64> {
    let [sd, sh, sw] = [
        AxisSampler::new(input[0], output[0]),
        AxisSampler::new(input[1], output[1]),
        AxisSampler::new(input[2], output[2]),
    ];
    let in_sp: usize = input.iter().product();
    let out_sp: usize = output.iter().product();
    let mut out = vec![0.0; planes * out_sp];
    for pl in 0..planes {
        let src = &x[pl * in_sp..(pl + 1) * in_sp];
        let dst = &mut out[pl * out_sp..(pl + 1) * out_sp];
        let mut o = 0;
        for z in 0..output[0] {
            let (z0, z1, tz) = (sd.lo[z], sd.hi[z], sd.frac[z]);
            for y in 0..output[1] {
                let (y0, y1, ty) = (sh.lo[y], sh.hi[y], sh.frac[y]);
                for xx in 0..output[2] {
                    let (x0, x1, tx) = (sw.lo[xx], sw.hi[xx], sw.frac[xx]);
                    let at = |z: usize, y: usize, x: usize| src[(z * input[1] + y) * input[2] + x];
                    let c00 = at(z0, y0, x0) * (1.0 - tx) + at(z0, y0, x1) * tx;
                    let c01 = at(z0, y1, x0) * (1.0 - tx) + at(z0, y1, x1) * tx;
                    let c10 = at(z1, y0, x0) * (1.0 - tx) + at(z1, y0, x1) * tx;
                    let c11 = at(z1, y1, x0) * (1.0 - tx) + at(z1, y1, x1) * tx;
                    let c0 = c00 * (1.0 - ty) + c01 * ty;
                    let c1 = c10 * (1.0 - ty) + c11 * ty;
                    dst[o] = c0 * (1.0 - tz) + c1 * tz;
                    o += 1;
                }
            }
        }
    }
    out
}

pub(crate) fn interpolate_backward(
    gy: &[f64],
    planes: usize,
    input: [usize; 3],
    output: [usize; 3],
    gx: &mut [f64],
) {
    let [sd, sh, sw] = [
        AxisSampler::new(input[0], output[0]),
        AxisSampler::new(input[1], output[1]),
        AxisSampler::new(input[2], output[2]),
    ];
    let in_sp: usize = input.iter().product();
    let out_sp: usize = output.iter().product();
    for pl in 0..planes {
        let src = &gy[pl * out_sp..(pl + 1) * out_sp];
        let dst = &mut gx[pl * in_sp..(pl + 1) * in_sp];
        let mut o = 0;
        for z in 0..output[0] {
            let (z0, z1, tz) = (sd.lo[z], sd.hi[z], sd.frac[z]);
            for y in 0..output[1] {
                let (y0, y1, ty) = (sh.lo[y], sh.hi[y], sh.frac[y]);
                for xx in 0..output[2] {
                    let (x0, x1, tx) = (sw.lo[xx], sw.hi[xx], sw.frac[xx]);
                    let g = src[o];
                    o += 1;
                    let mut put = |z: usize, y: usize, x: usize, wgt: f64| {
                        dst[(z * input[1] + y) * input[2] + x] += g * wgt;
                    };
                    put(z0, y0, x0, (1.0 - tz) * (1.0 - ty) * (1.0 - tx));
                    put(z0, y0, x1, (1.0 - tz) * (1.0 - ty) * tx);
                    put(z0, y1, x0, (1.0 - tz) * ty * (1.0 - tx));
                    put(z0, y1, x1, (1.0 - tz) * ty * tx);
                    put(z1, y0, x0, tz * (1.0 - ty) * (1.0 - tx));
                    put(z1, y0, x1, tz * (1.0 - ty) * tx);
                    put(z1, y1, x0, tz * ty * (1.0 - tx));
                    put(z1, y1, x1, tz * ty * tx);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Average,
    Max,
}

/// Stride-1 "same" pooling with window `k` per spatial axis (1 on unit axes).
/// Averages exclude padding. Returns the output and, for max pooling, the
/// flat source index of every output element.
pub(crate) fn pool_forward(
    x: &[f64],
    planes: usize,
    dims: [usize; 3],
    window: [usize; 3],
    kind: PoolKind,
) -> (Vec<f64>, Vec<usize>) {
    let sp: usize = dims.iter().product();
    let mut out = vec![0.0; planes * sp];
    let mut arg = if kind == PoolKind::Max {
        vec![0; planes * sp]
    } else {
        Vec::new()
    };
    let half = [window[0] / 2, window[1] / 2, window[2] / 2];
    for pl in 0..planes {
        let base = pl * sp;
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for xx in 0..dims[2] {
                    let mut acc = 0.0;
                    let mut count = 0usize;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for z2 in z.saturating_sub(half[0])..(z + half[0] + 1).min(dims[0]) {
                        for y2 in y.saturating_sub(half[1])..(y + half[1] + 1).min(dims[1]) {
                            for x2 in xx.saturating_sub(half[2])..(xx + half[2] + 1).min(dims[2]) {
                                let idx = base + (z2 * dims[1] + y2) * dims[2] + x2;
                                let v = x[idx];
                                acc += v;
                                count += 1;
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let o = base + (z * dims[1] + y) * dims[2] + xx;
                    match kind {
                        PoolKind::Average => out[o] = acc / count as f64,
                        PoolKind::Max => {
                            out[o] = best;
                            arg[o] = best_idx;
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn pool_backward(
    gy: &[f64],
    planes: usize,
    dims: [usize; 3],
    window: [usize; 3],
    kind: PoolKind,
    argmax: &[usize],
    gx: &mut [f64],
) {
    let sp: usize = dims.iter().product();
    if kind == PoolKind::Max {
        for (o, g) in gy.iter().enumerate() {
            gx[argmax[o]] += *g;
        }
        return;
    }
    let half = [window[0] / 2, window[1] / 2, window[2] / 2];
    for pl in 0..planes {
        let base = pl * sp;
        for z in 0..dims[0] {
            let zr = z.saturating_sub(half[0])..(z + half[0] + 1).min(dims[0]);
            for y in 0..dims[1] {
                let yr = y.saturating_sub(half[1])..(y + half[1] + 1).min(dims[1]);
                for xx in 0..dims[2] {
                    let xr = xx.saturating_sub(half[2])..(xx + half[2] + 1).min(dims[2]);
                    let count = zr.len() * yr.len() * xr.len();
                    let g = gy[base + (z * dims[1] + y) * dims[2] + xx] / count as f64;
                    for z2 in zr.clone() {
                        for y2 in yr.clone() {
                            for x2 in xr.clone() {
                                gx[base + (z2 * dims[1] + y2) * dims[2] + x2] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}
