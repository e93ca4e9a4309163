//! 2-D convolution, stride-2 transposed convolution and 2×2 max pooling over
//! `batch×channels×height×width` buffers.

use rand::Rng;

use super::{Module, Param};
use crate::exec;

/// Spatial extent of one feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hw {
    pub h: usize,
    pub w: usize,
}

impl Hw {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }
    pub fn area(self) -> usize {
        self.h * self.w
    }
}

/// Odd-kernel convolution, stride 1, zero "same" padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// `out_ch × in_ch × k × k`
    pub weight: Param,
    pub bias: Param,
}

/// He-uniform bound `sqrt(6 / fan_in)` for weights feeding a ReLU. With the
/// plain `1/sqrt(fan_in)` bound, narrow stacks lose so much signal per layer
/// that whole layers start out dead and the image path never trains.
fn relu_weight_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(name: &str, in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "same-padding convolution needs an odd kernel");
        let bound = relu_weight_bound(in_ch * kernel * kernel);
        Self {
            in_ch,
            out_ch,
            kernel,
            weight: Param::uniform(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), &[out_ch], bound, rng),
        }
    }

    pub fn forward(&self, x: &[f64], batch: usize, hw: Hw) -> Vec<f64> {
        let (ci_n, co_n, k) = (self.in_ch, self.out_ch, self.kernel);
        let pad = (k / 2) as isize;
        let area = hw.area();
        debug_assert_eq!(x.len(), batch * ci_n * area);
        let mut out = vec![0.0; batch * co_n * area];
        let w = &self.weight.value;
        let b = &self.bias.value;
        exec::for_each_chunk_mut(&mut out, co_n * area, |n, o| {
            let xin = &x[n * ci_n * area..(n + 1) * ci_n * area];
            for co in 0..co_n {
                let omap = &mut o[co * area..(co + 1) * area];
                omap.iter_mut().for_each(|v| *v = b[co]);
                for ci in 0..ci_n {
                    let imap = &xin[ci * area..(ci + 1) * area];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = w[((co * ci_n + ci) * k + ky) * k + kx];
                            let dy = ky as isize - pad;
                            let dx = kx as isize - pad;
                            let (x0, x1) = valid_range(hw.w, dx);
                            for y in 0..hw.h {
                                let sy = y as isize + dy;
                                if sy < 0 || sy >= hw.h as isize {
                                    continue;
                                }
                                let irow = &imap[sy as usize * hw.w..(sy as usize + 1) * hw.w];
                                let orow = &mut omap[y * hw.w..(y + 1) * hw.w];
                                for xo in x0..x1 {
                                    orow[xo] += wv * irow[(xo as isize + dx) as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
        out
    }

    /// Accumulates weight/bias gradients; returns `dx` when `need_input_grad`.
    pub fn backward(&mut self, x: &[f64], dout: &[f64], batch: usize, hw: Hw, need_input_grad: bool) -> Option<Vec<f64>> {
        let (ci_n, co_n, k) = (self.in_ch, self.out_ch, self.kernel);
        let pad = (k / 2) as isize;
        let area = hw.area();

        // Weight gradient: one task per output channel, batch summed in order.
        let per_co = ci_n * k * k;
        let mut wgrad = vec![0.0; co_n * per_co];
        exec::for_each_chunk_mut(&mut wgrad, per_co, |co, g| {
            for n in 0..batch {
                let omap = &dout[(n * co_n + co) * area..(n * co_n + co + 1) * area];
                for ci in 0..ci_n {
                    let imap = &x[(n * ci_n + ci) * area..(n * ci_n + ci + 1) * area];
                    for ky in 0..k {
                        for kx in 0..k {
                            let dy = ky as isize - pad;
                            let dx = kx as isize - pad;
                            let (x0, x1) = valid_range(hw.w, dx);
                            let mut s = 0.0;
                            for y in 0..hw.h {
                                let sy = y as isize + dy;
                                if sy < 0 || sy >= hw.h as isize {
                                    continue;
                                }
                                let irow = &imap[sy as usize * hw.w..(sy as usize + 1) * hw.w];
                                let orow = &omap[y * hw.w..(y + 1) * hw.w];
                                for xo in x0..x1 {
                                    s += orow[xo] * irow[(xo as isize + dx) as usize];
                                }
                            }
                            g[(ci * k + ky) * k + kx] += s;
                        }
                    }
                }
            }
        });
        for (acc, g) in self.weight.grad.iter_mut().zip(&wgrad) {
            *acc += g;
        }
        for n in 0..batch {
            for co in 0..co_n {
                let s: f64 = dout[(n * co_n + co) * area..(n * co_n + co + 1) * area].iter().sum();
                self.bias.grad[co] += s;
            }
        }

        if !need_input_grad {
            return None;
        }
        let w = &self.weight.value;
        let mut dxbuf = vec![0.0; batch * ci_n * area];
        exec::for_each_chunk_mut(&mut dxbuf, ci_n * area, |n, dxs| {
            let dn = &dout[n * co_n * area..(n + 1) * co_n * area];
            for ci in 0..ci_n {
                let dmap = &mut dxs[ci * area..(ci + 1) * area];
                for co in 0..co_n {
                    let omap = &dn[co * area..(co + 1) * area];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = w[((co * ci_n + ci) * k + ky) * k + kx];
                            let dy = ky as isize - pad;
                            let dx = kx as isize - pad;
                            let (x0, x1) = valid_range(hw.w, dx);
                            for y in 0..hw.h {
                                let sy = y as isize + dy;
                                if sy < 0 || sy >= hw.h as isize {
                                    continue;
                                }
                                let orow = &omap[y * hw.w..(y + 1) * hw.w];
                                let drow = &mut dmap[sy as usize * hw.w..(sy as usize + 1) * hw.w];
                                for xo in x0..x1 {
                                    drow[(xo as isize + dx) as usize] += wv * orow[xo];
                                }
                            }
                        }
                    }
                }
            }
        });
        Some(dxbuf)
    }
}

/// Output columns `xo` for which `xo + dx` is inside `0..width`.
#[inline]
fn valid_range(width: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (width as isize - dx).min(width as isize).max(0) as usize;
    (lo.min(hi), hi)
}

impl Module for Conv2d {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// 3×3 transposed convolution with stride 2, padding 1 and output padding 1:
/// every application exactly doubles height and width.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `in_ch × out_ch × 3 × 3`
    pub weight: Param,
    pub bias: Param,
}

const UP_K: usize = 3;

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let bound = relu_weight_bound(in_ch * UP_K * UP_K);
        Self {
            in_ch,
            out_ch,
            weight: Param::uniform(format!("{name}.weight"), &[in_ch, out_ch, UP_K, UP_K], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), &[out_ch], bound, rng),
        }
    }

    pub fn output_hw(hw: Hw) -> Hw {
        Hw::new(hw.h * 2, hw.w * 2)
    }

    /// Output coordinate fed by input `i` through kernel tap `k`.
    #[inline]
    fn target(i: usize, k: usize, limit: usize) -> Option<usize> {
        let o = (2 * i + k) as isize - 1;
        (o >= 0 && (o as usize) < limit).then_some(o as usize)
    }

    pub fn forward(&self, x: &[f64], batch: usize, hw: Hw) -> Vec<f64> {
        let (ci_n, co_n) = (self.in_ch, self.out_ch);
        let ohw = Self::output_hw(hw);
        let (ia, oa) = (hw.area(), ohw.area());
        let w = &self.weight.value;
        let b = &self.bias.value;
        let mut out = vec![0.0; batch * co_n * oa];
        exec::for_each_chunk_mut(&mut out, co_n * oa, |n, o| {
            let xin = &x[n * ci_n * ia..(n + 1) * ci_n * ia];
            for co in 0..co_n {
                let omap = &mut o[co * oa..(co + 1) * oa];
                omap.iter_mut().for_each(|v| *v = b[co]);
                for ci in 0..ci_n {
                    let imap = &xin[ci * ia..(ci + 1) * ia];
                    for ky in 0..UP_K {
                        for kx in 0..UP_K {
                            let wv = w[((ci * co_n + co) * UP_K + ky) * UP_K + kx];
                            for iy in 0..hw.h {
                                let Some(oy) = Self::target(iy, ky, ohw.h) else { continue };
                                for ix in 0..hw.w {
                                    if let Some(ox) = Self::target(ix, kx, ohw.w) {
                                        omap[oy * ohw.w + ox] += wv * imap[iy * hw.w + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        out
    }

    pub fn backward(&mut self, x: &[f64], dout: &[f64], batch: usize, hw: Hw) -> Vec<f64> {
        let (ci_n, co_n) = (self.in_ch, self.out_ch);
        let ohw = Self::output_hw(hw);
        let (ia, oa) = (hw.area(), ohw.area());

        let per_ci = co_n * UP_K * UP_K;
        let mut wgrad = vec![0.0; ci_n * per_ci];
        exec::for_each_chunk_mut(&mut wgrad, per_ci, |ci, g| {
            for n in 0..batch {
                let imap = &x[(n * ci_n + ci) * ia..(n * ci_n + ci + 1) * ia];
                for co in 0..co_n {
                    let omap = &dout[(n * co_n + co) * oa..(n * co_n + co + 1) * oa];
                    for ky in 0..UP_K {
                        for kx in 0..UP_K {
                            let mut s = 0.0;
                            for iy in 0..hw.h {
                                let Some(oy) = Self::target(iy, ky, ohw.h) else { continue };
                                for ix in 0..hw.w {
                                    if let Some(ox) = Self::target(ix, kx, ohw.w) {
                                        s += imap[iy * hw.w + ix] * omap[oy * ohw.w + ox];
                                    }
                                }
                            }
                            g[(co * UP_K + ky) * UP_K + kx] += s;
                        }
                    }
                }
            }
        });
        for (acc, g) in self.weight.grad.iter_mut().zip(&wgrad) {
            *acc += g;
        }
        for n in 0..batch {
            for co in 0..co_n {
                let s: f64 = dout[(n * co_n + co) * oa..(n * co_n + co + 1) * oa].iter().sum();
                self.bias.grad[co] += s;
            }
        }

        let w = &self.weight.value;
        let mut dx = vec![0.0; batch * ci_n * ia];
        exec::for_each_chunk_mut(&mut dx, ci_n * ia, |n, dxs| {
            let dn = &dout[n * co_n * oa..(n + 1) * co_n * oa];
            for ci in 0..ci_n {
                let dmap = &mut dxs[ci * ia..(ci + 1) * ia];
                for co in 0..co_n {
                    let omap = &dn[co * oa..(co + 1) * oa];
                    for ky in 0..UP_K {
                        for kx in 0..UP_K {
                            let wv = w[((ci * co_n + co) * UP_K + ky) * UP_K + kx];
                            for iy in 0..hw.h {
                                let Some(oy) = Self::target(iy, ky, ohw.h) else { continue };
                                for ix in 0..hw.w {
                                    if let Some(ox) = Self::target(ix, kx, ohw.w) {
                                        dmap[iy * hw.w + ix] += wv * omap[oy * ohw.w + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        dx
    }
}

impl Module for ConvTranspose2d {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// 2×2 max pooling with stride 2. Returns the pooled maps and, for each
/// output cell, the flat input offset of the winning element (first maximum
/// in scan order).
pub fn max_pool2(x: &[f64], batch: usize, channels: usize, hw: Hw) -> (Vec<f64>, Vec<usize>) {
    let ohw = Hw::new(hw.h / 2, hw.w / 2);
    let (ia, oa) = (hw.area(), ohw.area());
    let maps = batch * channels;
    let mut out = vec![0.0; maps * oa];
    let mut arg = vec![0usize; maps * oa];
    for m in 0..maps {
        let imap = &x[m * ia..(m + 1) * ia];
        for oy in 0..ohw.h {
            for ox in 0..ohw.w {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let at = (2 * oy + dy) * hw.w + 2 * ox + dx;
                    if imap[at] > best {
                        best = imap[at];
                        best_at = at;
                    }
                }
                out[m * oa + oy * ohw.w + ox] = best;
                arg[m * oa + oy * ohw.w + ox] = m * ia + best_at;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(dout: &[f64], arg: &[usize], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (g, &at) in dout.iter().zip(arg) {
        dx[at] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct definition of a same-padded convolution, written independently.
    fn naive_conv(c: &Conv2d, x: &[f64], hw: Hw) -> Vec<f64> {
        let k = c.kernel as isize;
        let p = k / 2;
        let mut out = vec![0.0; c.out_ch * hw.area()];
        for co in 0..c.out_ch {
            for y in 0..hw.h as isize {
                for xx in 0..hw.w as isize {
                    let mut s = c.bias.value[co];
                    for ci in 0..c.in_ch {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y + ky - p, xx + kx - p);
                                if sy < 0 || sx < 0 || sy >= hw.h as isize || sx >= hw.w as isize {
                                    continue;
                                }
                                let wv = c.weight.value[((co * c.in_ch + ci) * c.kernel + ky as usize) * c.kernel + kx as usize];
                                s += wv * x[ci * hw.area() + sy as usize * hw.w + sx as usize];
                            }
                        }
                    }
                    out[co * hw.area() + y as usize * hw.w + xx as usize] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::new("c", 2, 3, 3, &mut rng);
        let hw = Hw::new(4, 5);
        let x: Vec<f64> = (0..2 * 20).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.4).collect();
        let fast = conv.forward(&x, 1, hw);
        let slow = naive_conv(&conv, &x, hw);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_doubles_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let up = ConvTranspose2d::new("u", 2, 2, &mut rng);
        let mut hw = Hw::new(15, 25);
        for _ in 0..3 {
            let x = vec![0.1; 2 * hw.area()];
            let y = up.forward(&x, 1, hw);
            hw = ConvTranspose2d::output_hw(hw);
            assert_eq!(y.len(), 2 * hw.area());
        }
        assert_eq!(hw, Hw::new(120, 200));
    }

    #[test]
    fn transposed_conv_single_pixel_scatter() {
        // One input pixel, 1→1 channel: output(oy,ox) = w[ky][kx] with oy = 2*0 + ky - 1.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut up = ConvTranspose2d::new("u", 1, 1, &mut rng);
        up.bias.value[0] = 0.0;
        up.weight.value = (1..=9).map(f64::from).collect();
        let y = up.forward(&[1.0], 1, Hw::new(1, 1));
        // Taps with ky=0 or kx=0 land at -1 and are cropped.
        assert_eq!(y, vec![5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn pool_picks_max_and_routes_gradient() {
        let x = [1.0, 3.0, 2.0, 0.0, 0.5, 0.5, 4.0, -1.0];
        // 2×4 map → 1×2
        let (y, arg) = max_pool2(&x, 1, 1, Hw::new(2, 4));
        assert_eq!(y, vec![3.0, 4.0]);
        let dx = max_pool2_backward(&[1.0, 2.0], &arg, x.len());
        assert_eq!(dx, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }
}
