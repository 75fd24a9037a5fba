use rand::Rng;

use super::{join, sgemm, Param, Stateful, Tensor};

/// Upper bound on the im2col scratch buffer, in floats.
const COLS_BUDGET: usize = 1 << 22;

/// Square-kernel 2-D convolution with zero padding, lowered to GEMM via im2col.
///
/// Weights are stored `[cout, k, k, cin]` so that one output channel's filter
/// is a contiguous row matching the im2col column order `(ky, kx, ci)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    /// The first layer never needs an input gradient.
    pub input_grad: bool,
    cached_input: Option<Tensor>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        // He-uniform: Var = 2 / fan_in.
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let weight = (0..cout * fan_in)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad,
            weight: Param::new(vec![cout, kernel, kernel, cin], weight),
            bias: bias.then(|| Param::new(vec![cout], vec![0.0; cout])),
            input_grad: true,
            cached_input: None,
        }
    }

    pub fn output_side(&self, side: usize) -> usize {
        (side + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn fan_in(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn chunk_samples(&self, x: &Tensor) -> usize {
        let (oh, ow) = (self.output_side(x.h), self.output_side(x.w));
        let per_sample = oh * ow * self.fan_in();
        (COLS_BUDGET / per_sample.max(1)).clamp(1, x.n.max(1))
    }

    /// Writes the im2col rows for samples `[start, start + count)`.
    fn im2col(&self, x: &Tensor, start: usize, count: usize, cols: &mut Vec<f32>) {
        let (oh, ow) = (self.output_side(x.h), self.output_side(x.w));
        let k = self.kernel;
        let cin = self.cin;
        cols.clear();
        cols.resize(count * oh * ow * self.fan_in(), 0.0);
        let mut row = 0;
        for s in start..start + count {
            let base = s * x.sample_len();
            for oy in 0..oh {
                for ox in 0..ow {
                    let dst = &mut cols[row * self.fan_in()..(row + 1) * self.fan_in()];
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let src = base + (iy as usize * x.w + ix as usize) * cin;
                            let off = (ky * k + kx) * cin;
                            dst[off..off + cin].copy_from_slice(&x.data[src..src + cin]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, dcols: &[f32], dx: &mut Tensor, start: usize, count: usize) {
        let (oh, ow) = (self.output_side(dx.h), self.output_side(dx.w));
        let k = self.kernel;
        let cin = self.cin;
        let sample_len = dx.sample_len();
        let mut row = 0;
        for s in start..start + count {
            let base = s * sample_len;
            for oy in 0..oh {
                for ox in 0..ow {
                    let src = &dcols[row * self.fan_in()..(row + 1) * self.fan_in()];
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= dx.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= dx.w as isize {
                                continue;
                            }
                            let dst = base + (iy as usize * dx.w + ix as usize) * cin;
                            let off = (ky * k + kx) * cin;
                            for (d, v) in dx.data[dst..dst + cin].iter_mut().zip(&src[off..off + cin]) {
                                *d += *v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (oh, ow) = (self.output_side(x.h), self.output_side(x.w));
        let mut out = Tensor::zeros(x.n, oh, ow, self.cout);
        let k = self.fan_in();
        let chunk = self.chunk_samples(x);
        let mut cols = Vec::new();
        let mut start = 0;
        while start < x.n {
            let count = chunk.min(x.n - start);
            self.im2col(x, start, count, &mut cols);
            let rows = count * oh * ow;
            let out_chunk = &mut out.data[start * oh * ow * self.cout..(start + count) * oh * ow * self.cout];
            if let Some(b) = &self.bias {
                for r in 0..rows {
                    out_chunk[r * self.cout..(r + 1) * self.cout].copy_from_slice(&b.value);
                }
            }
            let beta = if self.bias.is_some() { 1.0 } else { 0.0 };
            sgemm(
                rows,
                k,
                self.cout,
                1.0,
                &cols,
                (k, 1),
                &self.weight.value,
                (1, k),
                beta,
                out_chunk,
                (self.cout, 1),
            );
            start += count;
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let out = self.infer(x);
        self.cached_input = Some(x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Option<Tensor> {
        let x = self
            .cached_input
            .take()
            .expect("Conv2d::backward called without a training forward pass");
        let (oh, ow) = (dy.h, dy.w);
        let k = self.fan_in();
        let cout = self.cout;
        if let Some(b) = &mut self.bias {
            for row in dy.data.chunks_exact(cout) {
                for (g, v) in b.grad.iter_mut().zip(row) {
                    *g += *v;
                }
            }
        }
        let mut dx = self.input_grad.then(|| Tensor::zeros(x.n, x.h, x.w, x.c));
        let chunk = self.chunk_samples(&x);
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        let mut start = 0;
        while start < x.n {
            let count = chunk.min(x.n - start);
            let rows = count * oh * ow;
            let dy_chunk = &dy.data[start * oh * ow * cout..(start + count) * oh * ow * cout];
            self.im2col(&x, start, count, &mut cols);
            // dW[cout x k] += dy^T[cout x rows] * cols[rows x k]
            sgemm(
                cout,
                rows,
                k,
                1.0,
                dy_chunk,
                (1, cout),
                &cols,
                (k, 1),
                1.0,
                &mut self.weight.grad,
                (k, 1),
            );
            if let Some(dx) = dx.as_mut() {
                dcols.clear();
                dcols.resize(rows * k, 0.0);
                sgemm(
                    rows,
                    cout,
                    k,
                    1.0,
                    dy_chunk,
                    (cout, 1),
                    &self.weight.value,
                    (k, 1),
                    0.0,
                    &mut dcols,
                    (k, 1),
                );
                self.col2im(&dcols, dx, start, count);
            }
            start += count;
        }
        dx
    }
}

impl Stateful for Conv2d {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::gradcheck::{probe, rel_err};

    /// Direct nested-loop convolution, independent of the im2col path.
    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (oh, ow) = (conv.output_side(x.h), conv.output_side(x.w));
        let mut out = Tensor::zeros(x.n, oh, ow, conv.cout);
        let k = conv.kernel;
        for s in 0..x.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..conv.cout {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[co] as f64);
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                for ci in 0..conv.cin {
                                    let xv = x.data[((s * x.h + iy as usize) * x.w + ix as usize) * x.c + ci];
                                    let wv = conv.weight.value[((co * k + ky) * k + kx) * conv.cin + ci];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out.data[((s * oh + oy) * ow + ox) * conv.cout + co] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize) -> Tensor {
        let data = (0..n * h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(n, h, w, c, data)
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(cin, cout, k, stride, pad, side) in
            &[(1, 4, 3, 2, 1, 9), (3, 5, 3, 1, 1, 6), (2, 3, 1, 2, 0, 7), (2, 2, 7, 2, 3, 8)]
        {
            let mut conv = Conv2d::new(cin, cout, k, stride, pad, true, &mut rng);
            for b in conv.bias.as_mut().unwrap().value.iter_mut() {
                *b = rng.random_range(-0.5..0.5);
            }
            let x = random_tensor(&mut rng, 3, side, side, cin);
            let fast = conv.infer(&x);
            let slow = naive_conv(&conv, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut conv = Conv2d::new(2, 3, 3, 2, 1, true, &mut rng);
        let x = random_tensor(&mut rng, 2, 5, 5, 2);
        let out_len = conv.infer(&x).data.len();
        let probe_w: Vec<f32> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();

        conv.weight.zero_grad();
        conv.bias.as_mut().unwrap().zero_grad();
        let y = conv.forward(&x);
        let dy = Tensor::from_vec(y.n, y.h, y.w, y.c, probe_w.clone());
        let dx = conv.backward(&dy).unwrap();

        let eps = 1e-2f32;
        for i in [0usize, 7, 20, 53] {
            let mut plus = conv.clone();
            plus.weight.value[i] += eps;
            let mut minus = conv.clone();
            minus.weight.value[i] -= eps;
            let fd = (probe(&plus.infer(&x), &probe_w) - probe(&minus.infer(&x), &probe_w))
                / (2.0 * eps as f64);
            assert!(rel_err(fd, conv.weight.grad[i] as f64) < 1e-2);
        }
        for i in [0usize, 9, 31, 49] {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (probe(&conv.infer(&xp), &probe_w) - probe(&conv.infer(&xm), &probe_w))
                / (2.0 * eps as f64);
            assert!(rel_err(fd, dx.data[i] as f64) < 1e-2);
        }
        let bias_fd: f64 = probe_w.iter().skip(1).step_by(3).map(|v| *v as f64).sum();
        assert!(rel_err(bias_fd, conv.bias.as_ref().unwrap().grad[1] as f64) < 1e-4);
    }
}
