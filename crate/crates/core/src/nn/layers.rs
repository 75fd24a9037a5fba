use super::Tensor;

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn infer(x: &Tensor) -> Tensor {
        let mut y = x.clone();
        for v in y.data.iter_mut() {
            *v = v.max(0.0);
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        self.mask = Some(x.data.iter().map(|&v| v > 0.0).collect());
        Self::infer(x)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("Relu::backward without forward");
        let mut dx = dy.clone();
        for (g, keep) in dx.data.iter_mut().zip(mask) {
            if !keep {
                *g = 0.0;
            }
        }
        dx
    }
}

/// Max pooling; padded cells never win.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(usize, usize, usize, usize, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn output_side(&self, side: usize) -> usize {
        (side + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn run(&self, x: &Tensor) -> (Tensor, Vec<usize>) {
        let (oh, ow) = (self.output_side(x.h), self.output_side(x.w));
        let mut out = Tensor::zeros(x.n, oh, ow, x.c);
        let mut argmax = vec![0usize; out.data.len()];
        for s in 0..x.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..x.c {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = usize::MAX;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= x.w as isize {
                                    continue;
                                }
                                let idx = ((s * x.h + iy as usize) * x.w + ix as usize) * x.c + ch;
                                if x.data[idx] > best || best_idx == usize::MAX {
                                    best = x.data[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((s * oh + oy) * ow + ox) * x.c + ch;
                        out.data[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        (out, argmax)
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        self.run(x).0
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let (out, argmax) = self.run(x);
        self.cache = Some((x.n, x.h, x.w, x.c, argmax));
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (n, h, w, c, argmax) = self.cache.take().expect("MaxPool2d::backward without forward");
        let mut dx = Tensor::zeros(n, h, w, c);
        for (g, idx) in dy.data.iter().zip(argmax) {
            dx.data[idx] += *g;
        }
        dx
    }
}

/// Spatial mean over `h x w`; returns one `c`-vector per sample, row-major.
pub fn mean_pool(x: &Tensor) -> Vec<f32> {
    let hw = x.h * x.w;
    let mut out = vec![0f64; x.n * x.c];
    for s in 0..x.n {
        let acc = &mut out[s * x.c..(s + 1) * x.c];
        for px in x.data[s * x.sample_len()..(s + 1) * x.sample_len()].chunks_exact(x.c) {
            for (a, v) in acc.iter_mut().zip(px) {
                *a += *v as f64;
            }
        }
    }
    out.into_iter().map(|v| (v / hw as f64) as f32).collect()
}

pub fn mean_pool_backward(dz: &[f32], n: usize, h: usize, w: usize, c: usize) -> Tensor {
    assert_eq!(dz.len(), n * c);
    let scale = 1.0 / (h * w) as f32;
    let mut dx = Tensor::zeros(n, h, w, c);
    for s in 0..n {
        let g = &dz[s * c..(s + 1) * c];
        for px in dx.data[s * h * w * c..(s + 1) * h * w * c].chunks_exact_mut(c) {
            for (d, v) in px.iter_mut().zip(g) {
                *d = *v * scale;
            }
        }
    }
    dx
}
