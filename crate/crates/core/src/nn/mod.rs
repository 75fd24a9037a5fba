//! Minimal CPU network engine: channels-last tensors, layers with explicit
//! forward/backward passes, and an Adam optimizer.
//!
//! Layers expose three entry points: `infer` (no caching, running statistics),
//! `forward` (training mode, caches what `backward` needs) and `backward`
//! (accumulates parameter gradients and returns the input gradient).

mod conv;
mod layers;
mod norm;
mod optim;
mod tensor;

pub use conv::Conv2d;
pub use layers::{mean_pool, mean_pool_backward, MaxPool2d, Relu};
pub use norm::BatchNorm2d;
pub use optim::{Adam, AdamConfig};
pub use tensor::{Param, Tensor};

/// Read-only access to every named parameter and buffer of a module.
pub trait Stateful {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);

    fn named_state(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn named_state_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.named_state_mut() {
            p.zero_grad();
        }
    }

    fn trainable_count(&self) -> usize {
        self.named_state()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.value.len())
            .sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `c = alpha * a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= extent(m, k, rsa, csa));
    assert!(b.len() >= extent(k, n, rsb, csb));
    assert!(c.len() >= extent(m, n, rsc, csc));
    // SAFETY: every index the kernel touches lies inside the asserted extents.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
