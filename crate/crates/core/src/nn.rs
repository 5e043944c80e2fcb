//! Dense and 3×3-board convolution layers with hand-written backward passes.
//!
//! Activations are laid out `[batch][cell][channel]`. Every layer reads its
//! weights from one flat parameter buffer and accumulates into a gradient
//! buffer of the same length. Each sample is processed independently with a
//! fixed operation order, so results do not depend on how a batch is split.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::ops::{AddAssign, MulAssign};

use num_traits::Float;

use crate::game::CELLS;

pub trait Scalar:
    Float + Default + Debug + AddAssign + MulAssign + Send + Sync + 'static
{
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn as_f32(self) -> f32;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f32(self) -> f32 {
        self
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[inline]
pub(crate) fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// (kernel offset, neighbour cell) pairs for each cell of a zero-padded 3×3
/// convolution on the 3×3 board.
const fn build_neighbours() -> [[(u8, u8); 9]; CELLS] {
    let mut table = [[(255u8, 255u8); 9]; CELLS];
    let mut pos = 0;
    while pos < CELLS {
        let (r, c) = ((pos / 3) as i32, (pos % 3) as i32);
        let mut n = 0;
        let mut k = 0;
        while k < 9 {
            let (dr, dc) = (k / 3 - 1, k % 3 - 1);
            let (nr, nc) = (r + dr, c + dc);
            if nr >= 0 && nr < 3 && nc >= 0 && nc < 3 {
                table[pos][n] = (k as u8, (nr * 3 + nc) as u8);
                n += 1;
            }
            k += 1;
        }
        pos += 1;
    }
    table
}

const NEIGHBOURS: [[(u8, u8); 9]; CELLS] = build_neighbours();

fn neighbours(pos: usize, kernel3: bool) -> impl Iterator<Item = (usize, usize)> {
    let row = &NEIGHBOURS[pos];
    let center = if kernel3 { None } else { Some((0usize, pos)) };
    let iter3 = row
        .iter()
        .take_while(|&&(k, _)| k != 255)
        .map(|&(k, n)| (k as usize, n as usize));
    // a 1×1 kernel has a single offset that maps the cell onto itself
    center
        .into_iter()
        .chain(iter3.filter(move |_| kernel3))
}

/// Convolution over the 3×3 board. Weights are `[offset][cin][cout]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel3: bool,
}

impl Conv {
    pub fn kernel_len(&self) -> usize {
        if self.kernel3 {
            9
        } else {
            1
        }
    }

    pub fn weight_len(&self) -> usize {
        self.kernel_len() * self.cin * self.cout
    }

    pub fn fan_in(&self) -> usize {
        self.kernel_len() * self.cin
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &[T], batch: usize, out: &mut [T]) {
        let (cin, cout) = (self.cin, self.cout);
        debug_assert_eq!(x.len(), batch * CELLS * cin);
        debug_assert_eq!(out.len(), batch * CELLS * cout);
        let w = &p[self.w..self.w + self.weight_len()];
        let bias = &p[self.b..self.b + cout];
        for b in 0..batch {
            for pos in 0..CELLS {
                let row = &mut out[(b * CELLS + pos) * cout..(b * CELLS + pos + 1) * cout];
                row.copy_from_slice(bias);
                for (k, nb) in neighbours(pos, self.kernel3) {
                    let xin = &x[(b * CELLS + nb) * cin..(b * CELLS + nb + 1) * cin];
                    for (ci, &a) in xin.iter().enumerate() {
                        if a != T::zero() {
                            let wr = &w[(k * cin + ci) * cout..(k * cin + ci + 1) * cout];
                            axpy(row, a, wr);
                        }
                    }
                }
            }
        }
    }

    /// Accumulates weight/bias gradients into `g` and, when requested,
    /// input gradients into `dx`.
    pub fn backward<T: Scalar>(
        &self,
        p: &[T],
        x: &[T],
        dout: &[T],
        batch: usize,
        g: &mut [T],
        dx: Option<&mut [T]>,
    ) {
        let (cin, cout) = (self.cin, self.cout);
        let kl = self.kernel_len();
        {
            let (gw, gb) = split_grad(g, self.w, self.weight_len(), self.b, cout);
            for r in 0..batch * CELLS {
                let drow = &dout[r * cout..(r + 1) * cout];
                for (gbi, &d) in gb.iter_mut().zip(drow) {
                    *gbi += d;
                }
            }
            for b in 0..batch {
                for pos in 0..CELLS {
                    let drow = &dout[(b * CELLS + pos) * cout..(b * CELLS + pos + 1) * cout];
                    for (k, nb) in neighbours(pos, self.kernel3) {
                        let xin = &x[(b * CELLS + nb) * cin..(b * CELLS + nb + 1) * cin];
                        for (ci, &a) in xin.iter().enumerate() {
                            if a != T::zero() {
                                let gr = &mut gw[(k * cin + ci) * cout..(k * cin + ci + 1) * cout];
                                axpy(gr, a, drow);
                            }
                        }
                    }
                }
            }
        }
        if let Some(dx) = dx {
            // transposed weights: [cout][offset][cin]
            let w = &p[self.w..self.w + self.weight_len()];
            let mut wt = vec![T::zero(); self.weight_len()];
            for k in 0..kl {
                for ci in 0..cin {
                    for co in 0..cout {
                        wt[(co * kl + k) * cin + ci] = w[(k * cin + ci) * cout + co];
                    }
                }
            }
            for b in 0..batch {
                for pos in 0..CELLS {
                    let drow = &dout[(b * CELLS + pos) * cout..(b * CELLS + pos + 1) * cout];
                    for (k, nb) in neighbours(pos, self.kernel3) {
                        let dxr = &mut dx[(b * CELLS + nb) * cin..(b * CELLS + nb + 1) * cin];
                        for (co, &d) in drow.iter().enumerate() {
                            if d != T::zero() {
                                axpy(dxr, d, &wt[(co * kl + k) * cin..(co * kl + k + 1) * cin]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fully connected layer, weights `[din][dout]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
    pub din: usize,
    pub dout: usize,
}

impl Dense {
    pub fn weight_len(&self) -> usize {
        self.din * self.dout
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &[T], batch: usize, out: &mut [T]) {
        let (din, dout) = (self.din, self.dout);
        let w = &p[self.w..self.w + self.weight_len()];
        let bias = &p[self.b..self.b + dout];
        for b in 0..batch {
            let row = &mut out[b * dout..(b + 1) * dout];
            row.copy_from_slice(bias);
            for (i, &a) in x[b * din..(b + 1) * din].iter().enumerate() {
                if a != T::zero() {
                    axpy(row, a, &w[i * dout..(i + 1) * dout]);
                }
            }
        }
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &[T],
        x: &[T],
        dy: &[T],
        batch: usize,
        g: &mut [T],
        dx: Option<&mut [T]>,
    ) {
        let (din, dout) = (self.din, self.dout);
        {
            let (gw, gb) = split_grad(g, self.w, self.weight_len(), self.b, dout);
            for b in 0..batch {
                let drow = &dy[b * dout..(b + 1) * dout];
                for (gbi, &d) in gb.iter_mut().zip(drow) {
                    *gbi += d;
                }
                for (i, &a) in x[b * din..(b + 1) * din].iter().enumerate() {
                    if a != T::zero() {
                        axpy(&mut gw[i * dout..(i + 1) * dout], a, drow);
                    }
                }
            }
        }
        if let Some(dx) = dx {
            let w = &p[self.w..self.w + self.weight_len()];
            let mut wt = vec![T::zero(); self.weight_len()];
            for i in 0..din {
                for o in 0..dout {
                    wt[o * din + i] = w[i * dout + o];
                }
            }
            for b in 0..batch {
                let dxr = &mut dx[b * din..(b + 1) * din];
                for (o, &d) in dy[b * dout..(b + 1) * dout].iter().enumerate() {
                    if d != T::zero() {
                        axpy(dxr, d, &wt[o * din..(o + 1) * din]);
                    }
                }
            }
        }
    }
}

fn split_grad<T>(
    g: &mut [T],
    w: usize,
    wlen: usize,
    b: usize,
    blen: usize,
) -> (&mut [T], &mut [T]) {
    debug_assert!(w + wlen <= b, "bias must follow weights");
    let (head, tail) = g.split_at_mut(b);
    (&mut head[w..w + wlen], &mut tail[..blen])
}

pub fn relu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// `dx = dy` where the forward output was positive.
pub fn relu_backward<T: Scalar>(out: &[T], dy: &mut [T]) {
    for (d, &o) in dy.iter_mut().zip(out) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

pub const MINMAX_EPS: f64 = 1e-5;

/// Per-sample min-max scaling of `width` values into `[0, 1]`.
#[derive(Debug, Clone, Default)]
pub struct MinMaxCache<T> {
    argmin: Vec<usize>,
    argmax: Vec<usize>,
    range: Vec<T>,
    clamped: Vec<bool>,
}

pub fn minmax_forward<T: Scalar>(x: &[T], width: usize, out: &mut [T], cache: &mut MinMaxCache<T>) {
    let batch = x.len() / width;
    cache.argmin.clear();
    cache.argmax.clear();
    cache.range.clear();
    cache.clamped.clear();
    let eps = T::from_f64(MINMAX_EPS);
    for b in 0..batch {
        let xs = &x[b * width..(b + 1) * width];
        let (mut imin, mut imax) = (0, 0);
        for (i, &v) in xs.iter().enumerate() {
            if v < xs[imin] {
                imin = i;
            }
            if v > xs[imax] {
                imax = i;
            }
        }
        let span = xs[imax] - xs[imin];
        let (range, clamped) = if span < eps { (eps, true) } else { (span, false) };
        let mn = xs[imin];
        for (o, &v) in out[b * width..(b + 1) * width].iter_mut().zip(xs) {
            *o = (v - mn) / range;
        }
        cache.argmin.push(imin);
        cache.argmax.push(imax);
        cache.range.push(range);
        cache.clamped.push(clamped);
    }
}

/// Overwrites `dy` with the gradient with respect to the unscaled input.
pub fn minmax_backward<T: Scalar>(y: &[T], dy: &mut [T], width: usize, cache: &MinMaxCache<T>) {
    let batch = y.len() / width;
    for b in 0..batch {
        let ys = &y[b * width..(b + 1) * width];
        let ds = &mut dy[b * width..(b + 1) * width];
        let range = cache.range[b];
        let mut sum_d = T::zero();
        let mut sum_dy = T::zero();
        for (d, &v) in ds.iter().zip(ys) {
            sum_d += *d;
            sum_dy += *d * v;
        }
        // dL/drange = -sum(dy * y) / range
        let g_range = -sum_dy / range;
        for d in ds.iter_mut() {
            *d = *d / range;
        }
        let mut d_min = -sum_d / range;
        if !cache.clamped[b] {
            d_min += -g_range;
            ds[cache.argmax[b]] += g_range;
        }
        ds[cache.argmin[b]] += d_min;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct definition of a zero-padded 3×3 convolution, independent of the
    /// neighbour table.
    fn conv_reference(p: &[f64], c: &Conv, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; CELLS * c.cout];
        for r in 0..3i32 {
            for col in 0..3i32 {
                for co in 0..c.cout {
                    let mut acc = p[c.b + co];
                    for dr in -1..=1i32 {
                        for dc in -1..=1i32 {
                            if !c.kernel3 && (dr != 0 || dc != 0) {
                                continue;
                            }
                            let (nr, nc) = (r + dr, col + dc);
                            if !(0..3).contains(&nr) || !(0..3).contains(&nc) {
                                continue;
                            }
                            let k = if c.kernel3 { ((dr + 1) * 3 + dc + 1) as usize } else { 0 };
                            for ci in 0..c.cin {
                                let xv = x[(nr * 3 + nc) as usize * c.cin + ci];
                                acc += xv * p[c.w + (k * c.cin + ci) * c.cout + co];
                            }
                        }
                    }
                    out[(r * 3 + col) as usize * c.cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kernel3 in [true, false] {
            let c = Conv { w: 0, b: 0, cin: 3, cout: 4, kernel3 };
            let c = Conv { b: c.weight_len(), ..c };
            let p = rand_vec(&mut rng, c.weight_len() + c.cout);
            let x = rand_vec(&mut rng, CELLS * c.cin);
            let mut out = vec![0.0; CELLS * c.cout];
            c.forward(&p, &x, 1, &mut out);
            let r = conv_reference(&p, &c, &x);
            for (a, b) in out.iter().zip(&r) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn fd_check<F: Fn(&[f64], &[f64]) -> f64>(f: F, p: &[f64], x: &[f64], gp: &[f64], gx: &[f64]) {
        let h = 1e-6;
        for i in 0..p.len() {
            let mut pp = p.to_vec();
            pp[i] += h;
            let up = f(&pp, x);
            pp[i] -= 2.0 * h;
            let dn = f(&pp, x);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - gp[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", gp[i]);
        }
        for i in 0..x.len() {
            let mut xx = x.to_vec();
            xx[i] += h;
            let up = f(p, &xx);
            xx[i] -= 2.0 * h;
            let dn = f(p, &xx);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-6 * (1.0 + fd.abs()), "input {i}: {fd} vs {}", gx[i]);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kernel3 in [true, false] {
            let c = Conv { w: 0, b: 0, cin: 2, cout: 3, kernel3 };
            let c = Conv { b: c.weight_len(), ..c };
            let batch = 2;
            let p = rand_vec(&mut rng, c.weight_len() + c.cout);
            let x = rand_vec(&mut rng, batch * CELLS * c.cin);
            let proj = rand_vec(&mut rng, batch * CELLS * c.cout);
            let f = |p: &[f64], x: &[f64]| {
                let mut out = vec![0.0; batch * CELLS * c.cout];
                c.forward(p, x, batch, &mut out);
                out.iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>()
            };
            let mut g = vec![0.0; p.len()];
            let mut dx = vec![0.0; x.len()];
            c.backward(&p, &x, &proj, batch, &mut g, Some(&mut dx));
            fd_check(f, &p, &x, &g, &dx);
        }
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = Dense { w: 0, b: 12, din: 4, dout: 3 };
        let batch = 3;
        let p = rand_vec(&mut rng, 15);
        let x = rand_vec(&mut rng, batch * 4);
        let proj = rand_vec(&mut rng, batch * 3);
        let f = |p: &[f64], x: &[f64]| {
            let mut out = vec![0.0; batch * 3];
            d.forward(p, x, batch, &mut out);
            out.iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = vec![0.0; p.len()];
        let mut dx = vec![0.0; x.len()];
        d.backward(&p, &x, &proj, batch, &mut g, Some(&mut dx));
        fd_check(f, &p, &x, &g, &dx);
    }

    #[test]
    fn minmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let width = 6;
        let x = rand_vec(&mut rng, 2 * width);
        let proj = rand_vec(&mut rng, 2 * width);
        let f = |_: &[f64], x: &[f64]| {
            let mut out = vec![0.0; x.len()];
            minmax_forward(x, width, &mut out, &mut MinMaxCache::default());
            out.iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut out = vec![0.0; x.len()];
        let mut cache = MinMaxCache::default();
        minmax_forward(&x, width, &mut out, &mut cache);
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mut dy = proj.clone();
        minmax_backward(&out, &mut dy, width, &cache);
        fd_check(f, &[], &x, &[], &dy);
    }
}
