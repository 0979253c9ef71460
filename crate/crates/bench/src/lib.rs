//! Fixtures shared by the benchmarks in `benches/`, sized like the default
//! desk benchmark (D = 32, H = 4, L = 2, M = 4, 16×16 images).

use nsp2_core::harness::{ModelSettings, SyntheticTaskSpec};
use nsp2_core::rng::{normal_vec, SeedStream};
use nsp2_core::vit::{BackboneModel, Sample};
use nsp2_core::Matrix;

pub fn default_model(seed: u64) -> BackboneModel {
    let dims = ModelSettings::default().dims(&SyntheticTaskSpec::default());
    let mut model =
        BackboneModel::init(dims, 10.0, 1e-6, SeedStream::new(seed)).expect("valid dims");
    model.add_head(2, SeedStream::new(seed).child("head"));
    model
}

/// `count` embedded random images labelled 0 and 1 alternately.
pub fn samples(model: &BackboneModel, count: usize, seed: u64) -> Vec<Sample> {
    let px = model.dims.image_size * model.dims.image_size;
    (0..count)
        .map(|i| Sample {
            tokens: model
                .embed(&normal_vec(
                    &mut SeedStream::new(seed).index(i as u64).rng(),
                    px,
                    1.0,
                ))
                .expect("sized image"),
            label: i % 2,
        })
        .collect()
}

/// Gram matrix of `rows` random rows of width `dim`.
pub fn covariance(dim: usize, rows: usize, seed: u64) -> Matrix {
    let data = normal_vec(&mut SeedStream::new(seed).rng(), dim * rows, 1.0);
    Matrix::from_vec(rows, dim, data).expect("sized").gram()
}
