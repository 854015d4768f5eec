#![allow(dead_code)]

pub mod checks;
pub mod criteria;
pub mod oracle;

use hsomrl::diffcore::Matrix;
use rand::Rng;

/// `n` random unit rows of width `d`.
pub fn unit_rows<R: Rng>(n: usize, d: usize, rng: &mut R) -> Matrix {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
        data.extend(row.iter().map(|x| x / norm));
    }
    Matrix::new(n, d, data).unwrap()
}

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Labels for a batch with 2..=max_tasks tasks and 2..=max_per_task samples each, shuffled.
pub fn random_labels<R: Rng>(max_tasks: usize, max_per_task: usize, rng: &mut R) -> Vec<usize> {
    let k = rng.gen_range(2..=max_tasks);
    let mut labels = Vec::new();
    for task in 0..k {
        for _ in 0..rng.gen_range(2..=max_per_task) {
            labels.push(task);
        }
    }
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.gen_range(0..=i));
    }
    labels
}
