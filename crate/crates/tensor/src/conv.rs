//! Convolutions expressed as rulebooks of (input row, output row) pairs per
//! kernel offset. Dense 2D image convolutions and sparse 3D voxel
//! convolutions share one kernel; a sparse convolution simply omits pairs
//! whose input site is inactive and leaves inactive output sites at zero.

use crate::mat::{gemm_nn, gemm_nt, gemm_tn};
use crate::Mat;

#[derive(Clone, Debug)]
pub struct Rulebook {
    in_rows: usize,
    out_rows: usize,
    pairs: Vec<Vec<(u32, u32)>>,
    active_out: Vec<u32>,
}

/// Spatial size of a 3D grid, `[depth, height, width]`, row index `(z*h + y)*w + x`.
pub type Dims3 = [usize; 3];

fn out_extent(n: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - kernel) / stride + 1
}

impl Rulebook {
    pub fn new(in_rows: usize, out_rows: usize, pairs: Vec<Vec<(u32, u32)>>, active_out: Vec<u32>) -> Self {
        Self { in_rows, out_rows, pairs, active_out }
    }

    /// Dense 2D convolution over an `h x w` grid. Returns the rulebook and
    /// output `(h, w)`.
    pub fn dense2d(h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> (Self, (usize, usize)) {
        let (oh, ow) = (out_extent(h, kernel, stride, pad), out_extent(w, kernel, stride, pad));
        let mut pairs = vec![Vec::new(); kernel * kernel];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (oy * ow + ox) as u32;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        pairs[ky * kernel + kx].push(((iy as usize * w + ix as usize) as u32, o));
                    }
                }
            }
        }
        let rb = Self { in_rows: h * w, out_rows: oh * ow, pairs, active_out: (0..(oh * ow) as u32).collect() };
        (rb, (oh, ow))
    }

    /// Sparse 3D convolution. An output site is active iff its receptive
    /// field contains an active input site.
    pub fn sparse3d(dims: Dims3, active_in: &[bool], kernel: usize, stride: usize, pad: usize) -> (Self, Dims3, Vec<bool>) {
        assert_eq!(active_in.len(), dims[0] * dims[1] * dims[2]);
        let od = [
            out_extent(dims[0], kernel, stride, pad),
            out_extent(dims[1], kernel, stride, pad),
            out_extent(dims[2], kernel, stride, pad),
        ];
        let out_rows = od[0] * od[1] * od[2];
        let mut pairs = vec![Vec::new(); kernel * kernel * kernel];
        let mut active_out = vec![false; out_rows];
        // Scatter from each active input to every output whose window holds it.
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let i = (z * dims[1] + y) * dims[2] + x;
                    if !active_in[i] {
                        continue;
                    }
                    let pos = [z, y, x];
                    let mut ranges = [(0usize, 0usize, 0usize); 3];
                    let mut empty = false;
                    for a in 0..3 {
                        // o*stride + k - pad = pos  =>  k = pos + pad - o*stride in [0, kernel)
                        let p = pos[a] + pad;
                        let lo = if p + 1 > kernel { (p + 1 - kernel).div_ceil(stride) } else { 0 };
                        let hi = (p / stride).min(od[a].saturating_sub(1));
                        if od[a] == 0 || lo > hi {
                            empty = true;
                            break;
                        }
                        ranges[a] = (lo, hi, p);
                    }
                    if empty {
                        continue;
                    }
                    for oz in ranges[0].0..=ranges[0].1 {
                        let kz = ranges[0].2 - oz * stride;
                        for oy in ranges[1].0..=ranges[1].1 {
                            let ky = ranges[1].2 - oy * stride;
                            for ox in ranges[2].0..=ranges[2].1 {
                                let kx = ranges[2].2 - ox * stride;
                                let o = (oz * od[1] + oy) * od[2] + ox;
                                active_out[o] = true;
                                pairs[(kz * kernel + ky) * kernel + kx].push((i as u32, o as u32));
                            }
                        }
                    }
                }
            }
        }
        let active_list = active_out.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i as u32).collect();
        (Self { in_rows: dims[0] * dims[1] * dims[2], out_rows, pairs, active_out: active_list }, od, active_out)
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn out_rows(&self) -> usize {
        self.out_rows
    }

    pub fn kernel_volume(&self) -> usize {
        self.pairs.len()
    }

    pub fn active_out(&self) -> &[u32] {
        &self.active_out
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    /// Weight layout: `(kernel_volume * c_in) x c_out`, offset-major.
    pub fn forward(&self, x: &Mat, w: &Mat, b: Option<&Mat>) -> Mat {
        let kv = self.kernel_volume();
        assert_eq!(x.rows(), self.in_rows, "conv input rows");
        let cin = x.cols();
        assert_eq!(w.rows(), kv * cin, "conv weight rows must be kernel_volume * c_in");
        let cout = w.cols();
        let mut out = Mat::zeros(self.out_rows, cout);
        if let Some(b) = b {
            for &o in &self.active_out {
                out.row_mut(o as usize).copy_from_slice(b.row(0));
            }
        }
        for (k, pairs) in self.pairs.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let gathered = gather_in(x, pairs);
            let wk = weight_block(w, k, cin);
            let mut prod = Mat::zeros(pairs.len(), cout);
            gemm_nn(&gathered, &wk, &mut prod, 0.0);
            for (p, &(_, o)) in pairs.iter().enumerate() {
                for (dst, src) in out.row_mut(o as usize).iter_mut().zip(prod.row(p)) {
                    *dst += src;
                }
            }
        }
        out
    }

    /// Gradients w.r.t. input, weight and bias given the output gradient.
    pub fn backward(&self, x: &Mat, w: &Mat, gout: &Mat, want_x: bool) -> (Option<Mat>, Mat, Mat) {
        let cin = x.cols();
        let cout = w.cols();
        let mut gx = want_x.then(|| Mat::zeros(self.in_rows, cin));
        let mut gw = Mat::zeros(w.rows(), cout);
        let mut gb = Mat::zeros(1, cout);
        for &o in &self.active_out {
            for (d, s) in gb.data_mut().iter_mut().zip(gout.row(o as usize)) {
                *d += s;
            }
        }
        for (k, pairs) in self.pairs.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let mut go = Mat::zeros(pairs.len(), cout);
            for (p, &(_, o)) in pairs.iter().enumerate() {
                go.row_mut(p).copy_from_slice(gout.row(o as usize));
            }
            let gathered = gather_in(x, pairs);
            let mut gwk = Mat::zeros(cin, cout);
            gemm_tn(&gathered, &go, &mut gwk, 0.0);
            let base = k * cin * cout;
            for (d, s) in gw.data_mut()[base..base + cin * cout].iter_mut().zip(gwk.data()) {
                *d += s;
            }
            if let Some(gx) = gx.as_mut() {
                let wk = weight_block(w, k, cin);
                let mut gin = Mat::zeros(pairs.len(), cin);
                gemm_nt(&go, &wk, &mut gin, 0.0);
                for (p, &(i, _)) in pairs.iter().enumerate() {
                    for (d, s) in gx.row_mut(i as usize).iter_mut().zip(gin.row(p)) {
                        *d += s;
                    }
                }
            }
        }
        (gx, gw, gb)
    }
}

fn gather_in(x: &Mat, pairs: &[(u32, u32)]) -> Mat {
    let mut g = Mat::zeros(pairs.len(), x.cols());
    for (p, &(i, _)) in pairs.iter().enumerate() {
        g.row_mut(p).copy_from_slice(x.row(i as usize));
    }
    g
}

fn weight_block(w: &Mat, k: usize, cin: usize) -> Mat {
    let cout = w.cols();
    Mat::from_vec(cin, cout, w.data()[k * cin * cout..(k + 1) * cin * cout].to_vec())
}
