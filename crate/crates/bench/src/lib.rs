//! Fixtures shared by the criterion benches.

use comet_core::{Matrix, RngStream};

/// Standard-normal matrix from a fixed stream.
pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = RngStream::new(seed, 0);
    let data = (0..rows * cols).map(|_| rng.standard_normal() as f32).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}

/// Class labels cycling through `classes`.
pub fn cyclic_labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}
