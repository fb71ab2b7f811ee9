//! Raw numeric kernels shared by the tape and the standalone operator APIs.
//!
//! Everything here works on flat row-major slices. Forward kernels allocate
//! their output; adjoint kernels accumulate (`+=`) into caller-provided
//! gradient buffers so several consumers of one value can share a buffer.

/// `c[m×n] += a[m×k] · b[k×n]`, operands given with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    // SAFETY: the caller passes slices large enough for the described
    // layouts; every call site below derives strides from the same extents
    // it used to size the buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution with square kernel and "same"-style padding
/// `k / 2` (zero fill).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2dGeom {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }
    pub fn out_hw(&self) -> (usize, usize) {
        let p = self.pad();
        (
            (self.height + 2 * p - self.kernel) / self.stride + 1,
            (self.width + 2 * p - self.kernel) / self.stride + 1,
        )
    }
    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

fn im2col_2d(g: &Conv2dGeom, x: &[f64], cols: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let (k, s, p) = (g.kernel, g.stride, g.pad() as isize);
    let plane = ho * wo;
    for c in 0..g.in_ch {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * s) as isize + ky as isize - p;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - p;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_2d_acc(g: &Conv2dGeom, cols: &[f64], dx: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let (k, s, p) = (g.kernel, g.stride, g.pad() as isize);
    let plane = ho * wo;
    for c in 0..g.in_ch {
        let dxc = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..wo {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            dxc[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward 2-D convolution. Returns the output and the per-image column
/// buffers needed by the adjoint.
pub fn conv2d_forward(
    g: &Conv2dGeom,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let rows = g.col_rows();
    let mut cols = vec![0.0; g.batch * rows * plane];
    let mut out = vec![0.0; g.batch * g.out_ch * plane];
    let in_len = g.in_ch * g.height * g.width;
    for n in 0..g.batch {
        let cn = &mut cols[n * rows * plane..(n + 1) * rows * plane];
        im2col_2d(g, &x[n * in_len..(n + 1) * in_len], cn);
        let on = &mut out[n * g.out_ch * plane..(n + 1) * g.out_ch * plane];
        if let Some(b) = bias {
            for (co, chunk) in on.chunks_mut(plane).enumerate() {
                chunk.fill(b[co]);
            }
        }
        gemm_acc(
            g.out_ch,
            rows,
            plane,
            w,
            (rows as isize, 1),
            cn,
            (plane as isize, 1),
            on,
        );
    }
    (out, cols)
}

/// Adjoint of [`conv2d_forward`]: accumulates into `dx`, `dw` and `db`.
pub fn conv2d_backward(
    g: &Conv2dGeom,
    dout: &[f64],
    cols: &[f64],
    w: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let rows = g.col_rows();
    if let Some(dw) = dw {
        for n in 0..g.batch {
            let dn = &dout[n * g.out_ch * plane..(n + 1) * g.out_ch * plane];
            let cn = &cols[n * rows * plane..(n + 1) * rows * plane];
            // dW[co, r] += Σ_p dOut[co, p] · cols[r, p]
            gemm_acc(
                g.out_ch,
                plane,
                rows,
                dn,
                (plane as isize, 1),
                cn,
                (1, plane as isize),
                dw,
            );
        }
    }
    if let Some(db) = db {
        for n in 0..g.batch {
            let dn = &dout[n * g.out_ch * plane..(n + 1) * g.out_ch * plane];
            for (co, chunk) in dn.chunks(plane).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
    }
    if let Some(dx) = dx {
        let in_len = g.in_ch * g.height * g.width;
        let mut dcols = vec![0.0; rows * plane];
        for n in 0..g.batch {
            dcols.fill(0.0);
            let dn = &dout[n * g.out_ch * plane..(n + 1) * g.out_ch * plane];
            // dcols[r, p] = Σ_co W[co, r] · dOut[co, p]
            gemm_acc(
                rows,
                g.out_ch,
                plane,
                w,
                (1, rows as isize),
                dn,
                (plane as isize, 1),
                &mut dcols,
            );
            col2im_2d_acc(g, &dcols, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
}

/// Geometry of a stride-1, zero-filled "same" 3-D convolution over volumes
/// laid out as `[batch, channel, d0, d1, d2]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub dims: [usize; 3],
    pub out_ch: usize,
    pub kernel: [usize; 3],
}

impl Conv3dGeom {
    fn voxels(&self) -> usize {
        self.dims.iter().product()
    }
    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel.iter().product::<usize>()
    }
}

fn im2col_3d(g: &Conv3dGeom, x: &[f64], cols: &mut [f64], scatter: bool, dx: &mut [f64]) {
    let [d0, d1, d2] = g.dims;
    let [k0, k1, k2] = g.kernel;
    let (p0, p1, p2) = ((k0 / 2) as isize, (k1 / 2) as isize, (k2 / 2) as isize);
    let vox = g.voxels();
    for c in 0..g.in_ch {
        let base_c = c * vox;
        for a in 0..k0 {
            for b in 0..k1 {
                for e in 0..k2 {
                    let row = ((c * k0 + a) * k1 + b) * k2 + e;
                    let line = row * vox;
                    for i in 0..d0 {
                        let si = i as isize + a as isize - p0;
                        for j in 0..d1 {
                            let sj = j as isize + b as isize - p1;
                            let out_base = line + (i * d1 + j) * d2;
                            let inside_ij = si >= 0
                                && si < d0 as isize
                                && sj >= 0
                                && sj < d1 as isize;
                            for l in 0..d2 {
                                let sl = l as isize + e as isize - p2;
                                let inside = inside_ij && sl >= 0 && sl < d2 as isize;
                                if scatter {
                                    if inside {
                                        let src = base_c
                                            + (si as usize * d1 + sj as usize) * d2
                                            + sl as usize;
                                        dx[src] += cols[out_base + l];
                                    }
                                } else {
                                    cols[out_base + l] = if inside {
                                        x[base_c + (si as usize * d1 + sj as usize) * d2 + sl as usize]
                                    } else {
                                        0.0
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward(
    g: &Conv3dGeom,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let vox = g.voxels();
    let rows = g.col_rows();
    let mut cols = vec![0.0; g.batch * rows * vox];
    let mut out = vec![0.0; g.batch * g.out_ch * vox];
    let in_len = g.in_ch * vox;
    let mut unused: [f64; 0] = [];
    for n in 0..g.batch {
        let cn = &mut cols[n * rows * vox..(n + 1) * rows * vox];
        im2col_3d(g, &x[n * in_len..(n + 1) * in_len], cn, false, &mut unused);
        let on = &mut out[n * g.out_ch * vox..(n + 1) * g.out_ch * vox];
        if let Some(b) = bias {
            for (co, chunk) in on.chunks_mut(vox).enumerate() {
                chunk.fill(b[co]);
            }
        }
        gemm_acc(g.out_ch, rows, vox, w, (rows as isize, 1), cn, (vox as isize, 1), on);
    }
    (out, cols)
}

pub fn conv3d_backward(
    g: &Conv3dGeom,
    dout: &[f64],
    cols: &[f64],
    w: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let vox = g.voxels();
    let rows = g.col_rows();
    if let Some(dw) = dw {
        for n in 0..g.batch {
            let dn = &dout[n * g.out_ch * vox..(n + 1) * g.out_ch * vox];
            let cn = &cols[n * rows * vox..(n + 1) * rows * vox];
            gemm_acc(g.out_ch, vox, rows, dn, (vox as isize, 1), cn, (1, vox as isize), dw);
        }
    }
    if let Some(db) = db {
        for n in 0..g.batch {
            let dn = &dout[n * g.out_ch * vox..(n + 1) * g.out_ch * vox];
            for (co, chunk) in dn.chunks(vox).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
    }
    if let Some(dx) = dx {
        let in_len = g.in_ch * vox;
        let mut dcols = vec![0.0; rows * vox];
        for n in 0..g.batch {
            dcols.fill(0.0);
            let dn = &dout[n * g.out_ch * vox..(n + 1) * g.out_ch * vox];
            gemm_acc(rows, g.out_ch, vox, w, (1, rows as isize), dn, (vox as isize, 1), &mut dcols);
            im2col_3d(g, &[], &mut dcols, true, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
}

/// Corner set of a trilinear sample: up to eight `(flat index, weight)` pairs
/// plus the 1-D fractional parts. Corners outside the volume are dropped,
/// which is the zero-padding rule.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Trilinear {
    pub corners: [(usize, f64); 8],
    pub count: usize,
    /// Lower corner and fractional part along (y, x, t).
    pub base: [isize; 3],
    pub frac: [f64; 3],
}

/// Trilinear weights at fractional position `(py, px, pt)` inside an
/// `[h, w, t]` volume.
pub(crate) fn trilinear(dims: [usize; 3], pos: [f64; 3]) -> Trilinear {
    let mut base = [0isize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let f = pos[a].floor();
        base[a] = f as isize;
        frac[a] = pos[a] - f;
    }
    let mut corners = [(0usize, 0.0f64); 8];
    let mut count = 0;
    for cy in 0..2 {
        let iy = base[0] + cy;
        if iy < 0 || iy >= dims[0] as isize {
            continue;
        }
        let wy = if cy == 0 { 1.0 - frac[0] } else { frac[0] };
        for cx in 0..2 {
            let ix = base[1] + cx;
            if ix < 0 || ix >= dims[1] as isize {
                continue;
            }
            let wx = if cx == 0 { 1.0 - frac[1] } else { frac[1] };
            for ct in 0..2 {
                let it = base[2] + ct;
                if it < 0 || it >= dims[2] as isize {
                    continue;
                }
                let wt = if ct == 0 { 1.0 - frac[2] } else { frac[2] };
                let idx = (iy as usize * dims[1] + ix as usize) * dims[2] + it as usize;
                corners[count] = (idx, wy * wx * wt);
                count += 1;
            }
        }
    }
    Trilinear {
        corners,
        count,
        base,
        frac,
    }
}

/// Partial derivatives of a trilinear sample with respect to the sampling
/// position `(py, px, pt)`; right-sided at integer positions.
pub(crate) fn trilinear_position_grad(vol: &[f64], dims: [usize; 3], s: &Trilinear) -> [f64; 3] {
    let mut g = [0.0; 3];
    for cy in 0..2 {
        let iy = s.base[0] + cy;
        if iy < 0 || iy >= dims[0] as isize {
            continue;
        }
        let (wy, sy) = if cy == 0 { (1.0 - s.frac[0], -1.0) } else { (s.frac[0], 1.0) };
        for cx in 0..2 {
            let ix = s.base[1] + cx;
            if ix < 0 || ix >= dims[1] as isize {
                continue;
            }
            let (wx, sx) = if cx == 0 { (1.0 - s.frac[1], -1.0) } else { (s.frac[1], 1.0) };
            for ct in 0..2 {
                let it = s.base[2] + ct;
                if it < 0 || it >= dims[2] as isize {
                    continue;
                }
                let (wt, st) = if ct == 0 { (1.0 - s.frac[2], -1.0) } else { (s.frac[2], 1.0) };
                let v = vol[(iy as usize * dims[1] + ix as usize) * dims[2] + it as usize];
                g[0] += sy * wx * wt * v;
                g[1] += wy * sx * wt * v;
                g[2] += wy * wx * st * v;
            }
        }
    }
    g
}

/// Flat index of an integer position, `None` outside the volume.
pub(crate) fn voxel_index(dims: [usize; 3], pos: [isize; 3]) -> Option<usize> {
    if pos.iter().zip(dims.iter()).any(|(&p, &d)| p < 0 || p >= d as isize) {
        return None;
    }
    Some((pos[0] as usize * dims[1] + pos[1] as usize) * dims[2] + pos[2] as usize)
}
