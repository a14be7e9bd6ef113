//! Dense tensors, reverse-mode differentiation and the primitive layers used
//! by the fusion network.

pub mod gradcheck;
pub mod graph;
pub(crate) mod kernels;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use graph::{BatchStats, GradFault, Gradients, Graph, Var};
pub use rng::{Rng, RngState};
pub use tensor::{global_avg_pool, Layout, Tensor};

use crate::error::{Error, Result};

/// Sum of squares over the concatenation of every tensor in `group`.
pub fn group_sq_norm<'a>(group: impl IntoIterator<Item = &'a Tensor>) -> Result<f64> {
    let mut seen = false;
    let mut total = 0.0;
    for t in group {
        seen = true;
        total += t.sq_norm();
    }
    if !seen {
        return Err(Error::Empty { op: "group_sq_norm" });
    }
    Ok(total)
}

/// Uniform in `[-1/√fan_in, 1/√fan_in]`.
pub fn init_fan_in(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_norm_examples() {
        let g = [Tensor::vector(vec![3.0, 4.0])];
        assert_eq!(group_sq_norm(&g).unwrap(), 25.0);
        let g = [Tensor::vector(vec![1.0]), Tensor::vector(vec![2.0]), Tensor::vector(vec![2.0])];
        assert_eq!(group_sq_norm(&g).unwrap(), 9.0);
        assert_eq!(group_sq_norm(&[Tensor::zeros(&[4, 2])]).unwrap(), 0.0);
        assert!(group_sq_norm(&[] as &[Tensor]).is_err());
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = init_fan_in(&[16, 9], 9, &mut Rng::new(3));
        let b = init_fan_in(&[16, 9], 9, &mut Rng::new(3));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0 / 3.0));
    }
}
