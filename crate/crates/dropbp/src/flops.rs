//! FLOPs accounting.
//!
//! Convention: one multiply-accumulate is 2 flops, so a matrix product
//! (m x k) * (k x n) costs 2mkn. Elementwise passes cost 1 flop per element
//! per pass; the per-kernel pass counts below are the single source of truth
//! shared by the live meters and the analytic cost model, so the two always
//! agree on what a given shape costs.

/// Running forward/backward flop counters for one training run.
/// Counters only ever grow.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopsMeter {
    forward: u64,
    backward: u64,
}

impl FlopsMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_forward(&mut self, flops: u64) {
        self.forward += flops;
    }

    pub fn add_backward(&mut self, flops: u64) {
        self.backward += flops;
    }

    pub fn forward(&self) -> u64 {
        self.forward
    }

    pub fn backward(&self) -> u64 {
        self.backward
    }

    pub fn total(&self) -> u64 {
        self.forward + self.backward
    }
}

pub fn matmul_fwd(m: usize, k: usize, n: usize) -> u64 {
    2 * (m as u64) * (k as u64) * (n as u64)
}

/// Both operand gradients of a matmul: grad wrt the left input plus grad wrt
/// the right input, each another 2mkn product.
pub fn matmul_bwd(m: usize, k: usize, n: usize) -> u64 {
    2 * matmul_fwd(m, k, n)
}

/// One side of a matmul backward (input gradient or parameter gradient).
pub fn matmul_grad_one(m: usize, k: usize, n: usize) -> u64 {
    matmul_fwd(m, k, n)
}

// Elementwise pass counts per kernel. `n` is the element count of the tensor
// the kernel walks.

pub fn layer_norm_fwd(n: usize) -> u64 {
    7 * n as u64 // mean, var (2), normalize (2), affine (2)
}

pub fn layer_norm_bwd(n: usize) -> u64 {
    11 * n as u64 // dbias, dscale (2), dxhat, two row reductions (3), recombine (4)
}

pub fn softmax_fwd(n: usize) -> u64 {
    5 * n as u64 // max, shift, exp, sum, div
}

pub fn softmax_bwd(n: usize) -> u64 {
    4 * n as u64 // row dot (2), subtract, scale by prob
}

pub fn gelu_fwd(n: usize) -> u64 {
    n as u64
}

pub fn gelu_bwd(n: usize) -> u64 {
    n as u64
}

/// Scaling a tensor by a constant (attention score scaling).
pub fn scale(n: usize) -> u64 {
    n as u64
}

/// Elementwise add of two tensors (residual and adapter merges).
pub fn add(n: usize) -> u64 {
    n as u64
}

/// Embedding lookup is a gather; no arithmetic.
pub fn embedding_fwd(_n: usize) -> u64 {
    0
}

/// Embedding backward scatter-adds the incoming gradient.
pub fn embedding_bwd(n: usize) -> u64 {
    n as u64
}

pub fn cross_entropy_fwd(n: usize) -> u64 {
    5 * n as u64 // max, shift, exp, sum, normalize
}

pub fn cross_entropy_bwd(n: usize) -> u64 {
    2 * n as u64 // subtract one-hot, scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meter_is_monotone() {
        let mut m = FlopsMeter::new();
        m.add_forward(10);
        m.add_backward(3);
        m.add_forward(1);
        assert_eq!(m.forward(), 11);
        assert_eq!(m.backward(), 3);
        assert_eq!(m.total(), 14);
    }

    #[test]
    fn matmul_convention() {
        // (4x8) * (8x2) forward is 2*4*8*2 = 128 flops.
        assert_eq!(matmul_fwd(4, 8, 2), 128);
        assert_eq!(matmul_bwd(4, 8, 2), 256);
    }
}
