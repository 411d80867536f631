//! Reverse-mode differentiation over single-channel image buffers.
//!
//! Each node stores its value and the op that produced it. `backward`
//! walks the nodes in reverse creation order, so the tape needs no explicit
//! topological sort. Border handling everywhere is clamp-to-edge.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sqrt(Var),
    Square(Var),
    /// `out(x, y) = src(clamp(x + dx), clamp(y + dy))`
    Shift(Var, isize, isize),
    /// Sum over a `(2r + 1)²` clamped window.
    BoxSum(Var, usize),
    /// Mean of 2x2 blocks.
    Downsample(Var),
    /// Bilinear upsampling to the node's size.
    Upsample(Var),
    /// Bilinear sample of `img` at `(x + u, y + v)`.
    Warp { img: Var, u: Var, v: Var },
    /// `Σ_o grad(x+o) · (b(x+o+f(x)) − a(x+o))` over a clamped window,
    /// with the whole window displaced by the center pixel's flow.
    WindowedResidual { grad: Var, a: Var, b: Var, u: Var, v: Var, radius: usize },
    /// Soft ternary census distance between two images.
    Census { a: Var, b: Var, radius: usize, tau: f64 },
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node {
    width: usize,
    height: usize,
    value: Vec<f64>,
    op: Op,
}

#[derive(Default, Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[inline]
fn clampi(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Bilinear corners and weights for a clamped sample position.
/// Also returns d(sample position)/d(requested position) (0 when clamped).
#[inline]
fn bilinear(sx: f64, n: usize) -> (usize, usize, f64, f64) {
    let max = (n - 1) as f64;
    let inside = (0.0..=max).contains(&sx);
    let s = sx.clamp(0.0, max);
    let i0 = (s.floor() as usize).min(n.saturating_sub(2));
    let i1 = (i0 + 1).min(n - 1);
    let f = s - i0 as f64;
    (i0, i1, f, if inside { 1.0 } else { 0.0 })
}

/// Soft census transform of one neighbor difference.
#[inline]
fn squash(d: f64, tau: f64) -> (f64, f64) {
    let s = (d * d + tau * tau).sqrt();
    (d / s, tau * tau / (s * s * s))
}

const CENSUS_HAMMING_EPS: f64 = 0.1;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, width: usize, height: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(value.len(), width * height);
        self.nodes.push(Node {
            width,
            height,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, width: usize, height: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), width * height, "leaf size");
        self.push(width, height, value, Op::Leaf)
    }

    pub fn constant(&mut self, width: usize, height: usize, v: f64) -> Var {
        self.push(width, height, vec![v; width * height], Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.width, n.height)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (w, h) = self.dims(a);
        assert_eq!((w, h), self.dims(b), "binary op size mismatch");
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(w, h, value, op)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (w, h) = self.dims(a);
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(w, h, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn shift(&mut self, a: Var, dx: isize, dy: isize) -> Var {
        let (w, h) = self.dims(a);
        let src = self.value(a);
        let mut value = Vec::with_capacity(w * h);
        for y in 0..h {
            let sy = clampi(y as isize + dy, h);
            for x in 0..w {
                value.push(src[sy * w + clampi(x as isize + dx, w)]);
            }
        }
        self.push(w, h, value, Op::Shift(a, dx, dy))
    }

    pub fn box_sum(&mut self, a: Var, radius: usize) -> Var {
        let (w, h) = self.dims(a);
        let src = self.value(a);
        let r = radius as isize;
        let mut value = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for j in -r..=r {
                    let sy = clampi(y as isize + j, h);
                    for i in -r..=r {
                        s += src[sy * w + clampi(x as isize + i, w)];
                    }
                }
                value[y * w + x] = s;
            }
        }
        self.push(w, h, value, Op::BoxSum(a, radius))
    }

    pub fn downsample(&mut self, a: Var) -> Var {
        let (w, h) = self.dims(a);
        let (nw, nh) = (w.div_ceil(2), h.div_ceil(2));
        let src = self.value(a);
        let mut value = vec![0.0; nw * nh];
        for y in 0..nh {
            for x in 0..nw {
                let mut s = 0.0;
                for (i, j) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let sx = (2 * x + i).min(w - 1);
                    let sy = (2 * y + j).min(h - 1);
                    s += src[sy * w + sx];
                }
                value[y * nw + x] = s / 4.0;
            }
        }
        self.push(nw, nh, value, Op::Downsample(a))
    }

    fn upsample_coord(x: usize, src_n: usize, dst_n: usize) -> f64 {
        (x as f64 + 0.5) * src_n as f64 / dst_n as f64 - 0.5
    }

    /// Bilinear upsampling of `a` to `width x height`.
    pub fn upsample(&mut self, a: Var, width: usize, height: usize) -> Var {
        let (w, h) = self.dims(a);
        let src = self.value(a);
        let mut value = vec![0.0; width * height];
        for y in 0..height {
            let (y0, y1, fy, _) = bilinear(Self::upsample_coord(y, h, height), h);
            for x in 0..width {
                let (x0, x1, fx, _) = bilinear(Self::upsample_coord(x, w, width), w);
                value[y * width + x] = (1.0 - fy) * ((1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1])
                    + fy * ((1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
            }
        }
        self.push(width, height, value, Op::Upsample(a))
    }

    pub fn warp(&mut self, img: Var, u: Var, v: Var) -> Var {
        let (w, h) = self.dims(img);
        assert_eq!(self.dims(u), (w, h));
        assert_eq!(self.dims(v), (w, h));
        let (src, uu, vv) = (self.value(img), self.value(u), self.value(v));
        let mut value = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (x0, x1, fx, _) = bilinear(x as f64 + uu[p], w);
                let (y0, y1, fy, _) = bilinear(y as f64 + vv[p], h);
                value[p] = (1.0 - fy) * ((1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1])
                    + fy * ((1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
            }
        }
        self.push(w, h, value, Op::Warp { img, u, v })
    }

    pub fn windowed_residual(&mut self, grad: Var, a: Var, b: Var, u: Var, v: Var, radius: usize) -> Var {
        let (w, h) = self.dims(a);
        for x in [grad, b, u, v] {
            assert_eq!(self.dims(x), (w, h), "windowed residual size mismatch");
        }
        let (gv, av, bv, uu, vv) = (self.value(grad), self.value(a), self.value(b), self.value(u), self.value(v));
        let r = radius as isize;
        let mut value = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let mut s = 0.0;
                for j in -r..=r {
                    let ny = clampi(y as isize + j, h);
                    let (y0, y1, fy, _) = bilinear(ny as f64 + vv[p], h);
                    for i in -r..=r {
                        let nx = clampi(x as isize + i, w);
                        let (x0, x1, fx, _) = bilinear(nx as f64 + uu[p], w);
                        let sample = (1.0 - fy) * ((1.0 - fx) * bv[y0 * w + x0] + fx * bv[y0 * w + x1])
                            + fy * ((1.0 - fx) * bv[y1 * w + x0] + fx * bv[y1 * w + x1]);
                        let n = ny * w + nx;
                        s += gv[n] * (sample - av[n]);
                    }
                }
                value[p] = s;
            }
        }
        self.push(w, h, value, Op::WindowedResidual { grad, a, b, u, v, radius })
    }

    /// Per-pixel soft census distance, normalized to [0, 1) by the number
    /// of neighbors.
    pub fn census(&mut self, a: Var, b: Var, radius: usize, tau: f64) -> Var {
        let (w, h) = self.dims(a);
        assert_eq!((w, h), self.dims(b));
        let (va, vb) = (self.value(a), self.value(b));
        let r = radius as isize;
        let neighbors = ((2 * radius + 1) * (2 * radius + 1) - 1) as f64;
        let mut value = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let mut s = 0.0;
                for j in -r..=r {
                    for i in -r..=r {
                        if i == 0 && j == 0 {
                            continue;
                        }
                        let n = clampi(y as isize + j, h) * w + clampi(x as isize + i, w);
                        let (ta, _) = squash(va[n] - va[p], tau);
                        let (tb, _) = squash(vb[n] - vb[p], tau);
                        let d = ta - tb;
                        s += d * d / (CENSUS_HAMMING_EPS + d * d);
                    }
                }
                value[p] = s / neighbors;
            }
        }
        self.push(w, h, value, Op::Census { a, b, radius, tau })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    /// Gradients of the scalar node `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.dims(output), (1, 1), "backward needs a scalar output");
        self.backward_with_seed(output, vec![1.0])
    }

    /// Reverse pass seeded with `seed` (same size as `output`).
    pub fn backward_with_seed(&self, output: Var, seed: Vec<f64>) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, n: usize) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }
        let (w, h) = (node.width, node.height);
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (d, gi) in acc(grads, a, g.len()).iter_mut().zip(g) {
                    *d += gi;
                }
                for (d, gi) in acc(grads, b, g.len()).iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::Sub(a, b) => {
                for (d, gi) in acc(grads, a, g.len()).iter_mut().zip(g) {
                    *d += gi;
                }
                for (d, gi) in acc(grads, b, g.len()).iter_mut().zip(g) {
                    *d -= gi;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                for (i, d) in acc(grads, a, g.len()).iter_mut().enumerate() {
                    *d += g[i] * vb[i];
                }
                for (i, d) in acc(grads, b, g.len()).iter_mut().enumerate() {
                    *d += g[i] * va[i];
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                for (i, d) in acc(grads, a, g.len()).iter_mut().enumerate() {
                    *d += g[i] / vb[i];
                }
                for (i, d) in acc(grads, b, g.len()).iter_mut().enumerate() {
                    *d -= g[i] * va[i] / (vb[i] * vb[i]);
                }
            }
            Op::Scale(a, s) => {
                for (d, gi) in acc(grads, a, g.len()).iter_mut().zip(g) {
                    *d += gi * s;
                }
            }
            Op::Offset(a) => {
                for (d, gi) in acc(grads, a, g.len()).iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::Sqrt(a) => {
                for (i, d) in acc(grads, a, g.len()).iter_mut().enumerate() {
                    *d += g[i] * 0.5 / node.value[i];
                }
            }
            Op::Square(a) => {
                let va = self.value(a);
                for (i, d) in acc(grads, a, g.len()).iter_mut().enumerate() {
                    *d += g[i] * 2.0 * va[i];
                }
            }
            Op::Shift(a, dx, dy) => {
                let d = acc(grads, a, w * h);
                for y in 0..h {
                    let sy = clampi(y as isize + dy, h);
                    for x in 0..w {
                        d[sy * w + clampi(x as isize + dx, w)] += g[y * w + x];
                    }
                }
            }
            Op::BoxSum(a, radius) => {
                let r = radius as isize;
                let d = acc(grads, a, w * h);
                for y in 0..h {
                    for x in 0..w {
                        let gi = g[y * w + x];
                        if gi == 0.0 {
                            continue;
                        }
                        for j in -r..=r {
                            let sy = clampi(y as isize + j, h);
                            for i in -r..=r {
                                d[sy * w + clampi(x as isize + i, w)] += gi;
                            }
                        }
                    }
                }
            }
            Op::Downsample(a) => {
                let (sw, sh) = self.dims(a);
                let d = acc(grads, a, sw * sh);
                for y in 0..h {
                    for x in 0..w {
                        let gi = g[y * w + x] / 4.0;
                        for (i, j) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                            let sx = (2 * x + i).min(sw - 1);
                            let sy = (2 * y + j).min(sh - 1);
                            d[sy * sw + sx] += gi;
                        }
                    }
                }
            }
            Op::Upsample(a) => {
                let (sw, sh) = self.dims(a);
                let d = acc(grads, a, sw * sh);
                for y in 0..h {
                    let (y0, y1, fy, _) = bilinear(Self::upsample_coord(y, sh, h), sh);
                    for x in 0..w {
                        let (x0, x1, fx, _) = bilinear(Self::upsample_coord(x, sw, w), sw);
                        let gi = g[y * w + x];
                        d[y0 * sw + x0] += gi * (1.0 - fy) * (1.0 - fx);
                        d[y0 * sw + x1] += gi * (1.0 - fy) * fx;
                        d[y1 * sw + x0] += gi * fy * (1.0 - fx);
                        d[y1 * sw + x1] += gi * fy * fx;
                    }
                }
            }
            Op::Warp { img, u, v } => {
                let src = self.value(img).to_vec();
                let (uu, vv) = (self.value(u).to_vec(), self.value(v).to_vec());
                let mut du = vec![0.0; w * h];
                let mut dv = vec![0.0; w * h];
                {
                    let d = acc(grads, img, w * h);
                    for y in 0..h {
                        for x in 0..w {
                            let p = y * w + x;
                            let gi = g[p];
                            if gi == 0.0 {
                                continue;
                            }
                            let (x0, x1, fx, kx) = bilinear(x as f64 + uu[p], w);
                            let (y0, y1, fy, ky) = bilinear(y as f64 + vv[p], h);
                            d[y0 * w + x0] += gi * (1.0 - fy) * (1.0 - fx);
                            d[y0 * w + x1] += gi * (1.0 - fy) * fx;
                            d[y1 * w + x0] += gi * fy * (1.0 - fx);
                            d[y1 * w + x1] += gi * fy * fx;
                            let (a00, a10, a01, a11) =
                                (src[y0 * w + x0], src[y0 * w + x1], src[y1 * w + x0], src[y1 * w + x1]);
                            du[p] = gi * kx * ((1.0 - fy) * (a10 - a00) + fy * (a11 - a01));
                            dv[p] = gi * ky * ((1.0 - fx) * (a01 - a00) + fx * (a11 - a10));
                        }
                    }
                }
                for (d, x) in acc(grads, u, w * h).iter_mut().zip(&du) {
                    *d += x;
                }
                for (d, x) in acc(grads, v, w * h).iter_mut().zip(&dv) {
                    *d += x;
                }
            }
            Op::WindowedResidual { grad, a, b, u, v, radius } => {
                let (gv, av, bv) = (self.value(grad), self.value(a), self.value(b));
                let (uu, vv) = (self.value(u), self.value(v));
                let r = radius as isize;
                let n_px = w * h;
                let (mut dg, mut da, mut db) = (vec![0.0; n_px], vec![0.0; n_px], vec![0.0; n_px]);
                let (mut du, mut dv) = (vec![0.0; n_px], vec![0.0; n_px]);
                for y in 0..h {
                    for x in 0..w {
                        let p = y * w + x;
                        let gp = g[p];
                        if gp == 0.0 {
                            continue;
                        }
                        for j in -r..=r {
                            let ny = clampi(y as isize + j, h);
                            let (y0, y1, fy, ky) = bilinear(ny as f64 + vv[p], h);
                            for i in -r..=r {
                                let nx = clampi(x as isize + i, w);
                                let (x0, x1, fx, kx) = bilinear(nx as f64 + uu[p], w);
                                let (b00, b10, b01, b11) =
                                    (bv[y0 * w + x0], bv[y0 * w + x1], bv[y1 * w + x0], bv[y1 * w + x1]);
                                let sample = (1.0 - fy) * ((1.0 - fx) * b00 + fx * b10) + fy * ((1.0 - fx) * b01 + fx * b11);
                                let n = ny * w + nx;
                                dg[n] += gp * (sample - av[n]);
                                let c = gp * gv[n];
                                da[n] -= c;
                                db[y0 * w + x0] += c * (1.0 - fy) * (1.0 - fx);
                                db[y0 * w + x1] += c * (1.0 - fy) * fx;
                                db[y1 * w + x0] += c * fy * (1.0 - fx);
                                db[y1 * w + x1] += c * fy * fx;
                                du[p] += c * kx * ((1.0 - fy) * (b10 - b00) + fy * (b11 - b01));
                                dv[p] += c * ky * ((1.0 - fx) * (b01 - b00) + fx * (b11 - b10));
                            }
                        }
                    }
                }
                for (var, d) in [(grad, dg), (a, da), (b, db), (u, du), (v, dv)] {
                    for (acc_v, x) in acc(grads, var, n_px).iter_mut().zip(&d) {
                        *acc_v += x;
                    }
                }
            }
            Op::Census { a, b, radius, tau } => {
                let (va, vb) = (self.value(a), self.value(b));
                let r = radius as isize;
                let neighbors = ((2 * radius + 1) * (2 * radius + 1) - 1) as f64;
                let mut da = vec![0.0; w * h];
                let mut db = vec![0.0; w * h];
                for y in 0..h {
                    for x in 0..w {
                        let p = y * w + x;
                        let gi = g[p] / neighbors;
                        if gi == 0.0 {
                            continue;
                        }
                        for j in -r..=r {
                            for i in -r..=r {
                                if i == 0 && j == 0 {
                                    continue;
                                }
                                let n = clampi(y as isize + j, h) * w + clampi(x as isize + i, w);
                                let (ta, sa) = squash(va[n] - va[p], tau);
                                let (tb, sb) = squash(vb[n] - vb[p], tau);
                                let d = ta - tb;
                                let den = CENSUS_HAMMING_EPS + d * d;
                                let dh = gi * 2.0 * d * CENSUS_HAMMING_EPS / (den * den);
                                da[n] += dh * sa;
                                da[p] -= dh * sa;
                                db[n] -= dh * sb;
                                db[p] += dh * sb;
                            }
                        }
                    }
                }
                for (d, x) in acc(grads, a, w * h).iter_mut().zip(&da) {
                    *d += x;
                }
                for (d, x) in acc(grads, b, w * h).iter_mut().zip(&db) {
                    *d += x;
                }
            }
            Op::Sum(a) => {
                let (sw, sh) = self.dims(a);
                for d in acc(grads, a, sw * sh).iter_mut() {
                    *d += g[0];
                }
            }
        }
    }
}

/// Adjoints from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, w: usize, h: usize, input: Vec<f64>) {
        let mut tape = Tape::new();
        let x = tape.leaf(w, h, input.clone());
        let y = build(&mut tape, x);
        let s = tape.sum(y);
        let g = tape.backward(s).get_or_zeros(x, w * h);
        let eval = |v: Vec<f64>| {
            let mut t = Tape::new();
            let x = t.leaf(w, h, v);
            let y = build(&mut t, x);
            let s = t.sum(y);
            t.value(s)[0]
        };
        let eps = 1e-6;
        for i in 0..input.len() {
            let mut a = input.clone();
            let mut b = input.clone();
            a[i] += eps;
            b[i] -= eps;
            let num = (eval(a) - eval(b)) / (2.0 * eps);
            assert!((num - g[i]).abs() <= 1e-6 * (1.0 + num.abs()), "i={i}: {num} vs {}", g[i]);
        }
    }

    fn ramp(w: usize, h: usize) -> Vec<f64> {
        (0..w * h).map(|i| ((i * 37 % 11) as f64 / 11.0) + 0.1).collect()
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        fd_check(
            |t, x| {
                let a = t.square(x);
                let b = t.offset(a, 0.3);
                let c = t.sqrt(b);
                let d = t.div(c, x);
                let e = t.mul(d, x);
                let f = t.scale(e, 1.7);
                t.sub(f, x)
            },
            3,
            3,
            ramp(3, 3),
        );
    }

    #[test]
    fn spatial_ops_match_finite_differences() {
        fd_check(
            |t, x| {
                let s = t.shift(x, 1, -1);
                let b = t.box_sum(s, 1);
                let m = t.mul(b, x);
                let d = t.downsample(m);
                let u = t.upsample(d, 5, 4);
                t.square(u)
            },
            5,
            4,
            ramp(5, 4),
        );
    }

    #[test]
    fn warp_matches_finite_differences() {
        let (w, h) = (5, 5);
        let img = ramp(w, h);
        // evaluate the flow-gradient path with the image held fixed
        fd_check(
            move |t, x| {
                let i = t.leaf(5, 5, img.clone());
                let v = t.scale(x, 0.5);
                t.warp(i, x, v)
            },
            w,
            h,
            (0..w * h).map(|i| 0.31 + 0.13 * (i % 3) as f64).collect(),
        );
        fd_check(
            |t, x| {
                let u = t.constant(5, 5, 0.4);
                let v = t.constant(5, 5, -0.7);
                t.warp(x, u, v)
            },
            w,
            h,
            ramp(w, h),
        );
    }

    #[test]
    fn windowed_residual_matches_finite_differences() {
        let (w, h) = (6, 5);
        let fixed = ramp(w, h);
        // one input varied at a time, the rest held on fixed leaves
        for which in 0..5 {
            let fixed = fixed.clone();
            fd_check(
                move |t, x| {
                    let mut vars: Vec<Var> = (0..5)
                        .map(|k| {
                            let vals: Vec<f64> = fixed.iter().map(|f| f * (1.0 + 0.3 * k as f64) - 0.4).collect();
                            t.leaf(6, 5, vals)
                        })
                        .collect();
                    vars[which] = if which >= 3 { t.scale(x, 0.8) } else { x };
                    t.windowed_residual(vars[0], vars[1], vars[2], vars[3], vars[4], 1)
                },
                w,
                h,
                (0..w * h).map(|i| 0.37 + 0.21 * (i % 4) as f64).collect(),
            );
        }
    }

    #[test]
    fn census_matches_finite_differences() {
        let other: Vec<f64> = ramp(6, 5).iter().map(|v| 1.0 - v * 0.8).collect();
        fd_check(
            move |t, x| {
                let b = t.leaf(6, 5, other.clone());
                t.census(x, b, 1, 0.05)
            },
            6,
            5,
            ramp(6, 5),
        );
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(2, 2, 1.0);
        let b = t.constant(2, 2, 2.0);
        let s = t.sum(a);
        let g = t.backward(s);
        assert!(g.get(b).is_none());
        assert_eq!(g.get(a).unwrap(), &[1.0; 4]);
    }
}
