use super::{join, Param, Stateful, Tensor};

const MOMENTUM: f64 = 0.1;
const EPS: f64 = 1e-5;

/// Per-channel batch normalization over `n x h x w`.
///
/// Training mode normalizes with batch statistics and updates the running
/// estimates; `infer` uses the running estimates only.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    cache: Option<(Vec<f32>, Vec<f64>)>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![channels], vec![1.0; channels]),
            beta: Param::new(vec![channels], vec![0.0; channels]),
            running_mean: Param::buffer(vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(vec![channels], vec![1.0; channels]),
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.channels);
        let c = self.channels;
        let scale: Vec<f32> = (0..c)
            .map(|i| {
                (self.gamma.value[i] as f64 / (self.running_var.value[i] as f64 + EPS).sqrt()) as f32
            })
            .collect();
        let shift: Vec<f32> = (0..c)
            .map(|i| self.beta.value[i] - self.running_mean.value[i] * scale[i])
            .collect();
        let mut y = x.clone();
        for px in y.data.chunks_exact_mut(c) {
            for ((v, s), b) in px.iter_mut().zip(&scale).zip(&shift) {
                *v = *v * s + b;
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.channels);
        let c = self.channels;
        let m = (x.n * x.h * x.w) as f64;
        let mut mean = vec![0f64; c];
        for px in x.data.chunks_exact(c) {
            for (a, v) in mean.iter_mut().zip(px) {
                *a += *v as f64;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![0f64; c];
        for px in x.data.chunks_exact(c) {
            for ((a, v), mu) in var.iter_mut().zip(px).zip(&mean) {
                let d = *v as f64 - mu;
                *a += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + EPS).sqrt()).collect();

        let mut xhat = vec![0f32; x.data.len()];
        let mut y = Tensor::zeros(x.n, x.h, x.w, c);
        for ((xp, hp), yp) in x
            .data
            .chunks_exact(c)
            .zip(xhat.chunks_exact_mut(c))
            .zip(y.data.chunks_exact_mut(c))
        {
            for i in 0..c {
                let h = ((xp[i] as f64 - mean[i]) * inv_std[i]) as f32;
                hp[i] = h;
                yp[i] = self.gamma.value[i] * h + self.beta.value[i];
            }
        }
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for i in 0..c {
            let rm = &mut self.running_mean.value[i];
            *rm = ((1.0 - MOMENTUM) * *rm as f64 + MOMENTUM * mean[i]) as f32;
            let rv = &mut self.running_var.value[i];
            *rv = ((1.0 - MOMENTUM) * *rv as f64 + MOMENTUM * var[i] * unbias) as f32;
        }
        self.cache = Some((xhat, inv_std));
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.take().expect("BatchNorm2d::backward without forward");
        let c = self.channels;
        let m = (dy.n * dy.h * dy.w) as f64;
        let mut sum_dy = vec![0f64; c];
        let mut sum_dy_xhat = vec![0f64; c];
        for (gp, hp) in dy.data.chunks_exact(c).zip(xhat.chunks_exact(c)) {
            for i in 0..c {
                sum_dy[i] += gp[i] as f64;
                sum_dy_xhat[i] += gp[i] as f64 * hp[i] as f64;
            }
        }
        for i in 0..c {
            self.gamma.grad[i] += sum_dy_xhat[i] as f32;
            self.beta.grad[i] += sum_dy[i] as f32;
        }
        let mut dx = Tensor::zeros(dy.n, dy.h, dy.w, c);
        for ((gp, hp), dp) in dy
            .data
            .chunks_exact(c)
            .zip(xhat.chunks_exact(c))
            .zip(dx.data.chunks_exact_mut(c))
        {
            for i in 0..c {
                let g = self.gamma.value[i] as f64;
                let v = g * inv_std[i] / m
                    * (m * gp[i] as f64 - sum_dy[i] - hp[i] as f64 * sum_dy_xhat[i]);
                dp[i] = v as f32;
            }
        }
        dx
    }
}

impl Stateful for BatchNorm2d {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}
