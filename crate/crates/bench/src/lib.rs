//! Shared fixtures for the benchmarks.

use tformer_core::numerics::{SeededRng, Tensor};
use tformer_core::sampler::FrameTokenSequence;

pub fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).expect("matrix shape")
}

pub fn random_frames(rng: &mut SeededRng, n: usize, t_f: usize, d: usize) -> FrameTokenSequence {
    let data = (0..n * t_f * d).map(|_| rng.normal()).collect();
    FrameTokenSequence::new(Tensor::new(vec![n, t_f, d], data).expect("frame shape")).expect("finite frames")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_requested_shapes() {
        let mut rng = SeededRng::new(0);
        assert_eq!(random_matrix(&mut rng, 3, 4).shape(), &[3, 4]);
        let f = random_frames(&mut rng, 5, 2, 3);
        assert_eq!((f.n(), f.t_f(), f.d()), (5, 2, 3));
    }
}
