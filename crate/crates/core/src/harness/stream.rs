//! Synthetic class-incremental task streams.
//!
//! Each class owns one prototype image. Prototypes are orthonormal
//! directions in pixel space, rescaled to a per-pixel amplitude of
//! `signal` and placed on top of a `shared` background pattern common to
//! every class. A sample is its class prototype plus i.i.d. Gaussian pixel
//! noise. Orthogonality caps the number of classes at the pixel count.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::rng::{normal_vec, SeedStream};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub image_size: usize,
    pub patch_size: usize,
    pub classes_per_task: usize,
    pub tasks: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Per-pixel RMS amplitude of the class-specific pattern.
    pub signal: f64,
    /// Per-pixel RMS amplitude of the background shared by all classes.
    pub shared: f64,
    /// Standard deviation of the pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            classes_per_task: 2,
            tasks: 5,
            train_per_class: 100,
            test_per_class: 100,
            signal: 2.0,
            shared: 0.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    /// Largest class count the generator can produce.
    pub fn capacity(&self) -> usize {
        self.pixels()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.classes_per_task == 0 || self.tasks == 0 {
            return bad("classes_per_task and tasks must be positive".into());
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("train_per_class and test_per_class must be positive".into());
        }
        let total = self.classes_per_task * self.tasks;
        if total > self.capacity() {
            return bad(format!(
                "{total} classes requested, generator capacity is {}",
                self.capacity()
            ));
        }
        for (name, v) in [
            ("signal", self.signal),
            ("shared", self.shared),
            ("noise", self.noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// One labelled image. `label` is the global class id.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    /// Global ids, contiguous: `first_class .. first_class + classes`.
    pub classes: Vec<usize>,
    pub train: Vec<Image>,
    pub test: Vec<Image>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub classes_per_task: usize,
    pub seed: u64,
}

impl TaskStream {
    pub fn total_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.classes.len()).sum()
    }
}

/// Builds the stream. Identical specs give identical streams.
pub fn generate_task_stream(spec: &SyntheticTaskSpec) -> Result<TaskStream> {
    spec.validate()?;
    let root = SeedStream::new(spec.seed).child("stream");
    let px = spec.pixels();
    let total = spec.classes_per_task * spec.tasks;
    let amp = (px as f64).sqrt();

    let shared = normal_vec(&mut root.child("shared").rng(), px, spec.shared);
    let raw = Matrix::from_vec(
        total,
        px,
        normal_vec(&mut root.child("patterns").rng(), total * px, 1.0),
    )?;
    let basis = orthonormal_rows(&raw);

    // Class ids are dealt to tasks in a shuffled order so that task k does
    // not always get the same pattern indices across seeds.
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut root.child("class_order").rng());

    let mut tasks = Vec::with_capacity(spec.tasks);
    for t in 0..spec.tasks {
        let classes: Vec<usize> =
            (t * spec.classes_per_task..(t + 1) * spec.classes_per_task).collect();
        let task_seed = root.child("task").index(t as u64);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &classes {
            let pattern = basis.row(order[c]);
            let proto: Vec<f64> = shared
                .iter()
                .zip(pattern)
                .map(|(s, p)| s + spec.signal * amp * p)
                .collect();
            let class_seed = task_seed.index(c as u64);
            let draw = |purpose: &str, n: usize| -> Vec<Image> {
                let mut rng = class_seed.child(purpose).rng();
                (0..n)
                    .map(|_| {
                        let noise = normal_vec(&mut rng, px, spec.noise);
                        Image {
                            pixels: proto.iter().zip(&noise).map(|(a, b)| a + b).collect(),
                            label: c,
                        }
                    })
                    .collect()
            };
            train.extend(draw("train", spec.train_per_class));
            test.extend(draw("test", spec.test_per_class));
        }
        train.shuffle(&mut task_seed.child("train_order").rng());
        tasks.push(Task {
            classes,
            train,
            test,
        });
    }
    Ok(TaskStream {
        tasks,
        classes_per_task: spec.classes_per_task,
        seed: spec.seed,
    })
}

/// Modified Gram-Schmidt over rows. Rows are assumed independent, which
/// holds almost surely for Gaussian draws with `rows ≤ cols`.
fn orthonormal_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        for j in 0..i {
            let d: f64 = out.row(i).iter().zip(out.row(j)).map(|(a, b)| a * b).sum();
            let prev = out.row(j).to_vec();
            for (v, p) in out.row_mut(i).iter_mut().zip(&prev) {
                *v -= d * p;
            }
        }
        let n = out.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in out.row_mut(i) {
            *v /= n;
        }
    }
    out
}
