#![allow(dead_code)]

use rand::Rng;
use survpath::matrix::Matrix;
use survpath::model::{ModelConfig, SurvPathModel};
use survpath::pathway::PathwayDefinition;
use survpath::rng::{seeded, SeededRng};

pub fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// `n_p` pathways over consecutive, overlapping windows of `n_genes` genes.
pub fn window_pathways(n_p: usize, n_genes: usize, width: usize) -> Vec<PathwayDefinition> {
    (0..n_p)
        .map(|i| {
            let start = (i * width / 2) % (n_genes - width + 1);
            let indices: Vec<usize> = (start..start + width).collect();
            PathwayDefinition {
                name: format!("P{i}"),
                members: indices.iter().map(|g| format!("g{g}")).collect(),
                indices,
            }
        })
        .collect()
}

pub fn small_model(
    config: ModelConfig,
    n_p: usize,
    n_genes: usize,
    embed: usize,
    seed: u64,
) -> SurvPathModel {
    SurvPathModel::new(
        config,
        window_pathways(n_p, n_genes, 3),
        n_genes,
        embed,
        seed,
    )
    .unwrap()
}

/// Largest elementwise `|a-b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn rng(seed: u64) -> SeededRng {
    seeded(seed)
}
