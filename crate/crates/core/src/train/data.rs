use serde::{Deserialize, Serialize};

use super::model::BaseModel;
use crate::error::{LorsError, Result};
use crate::tensor::{self, DenseMatrix, RngState};

/// Targets for a set of samples (one column / entry per sample).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Regression(DenseMatrix),
    Classes(Vec<usize>),
}

impl Target {
    pub fn len(&self) -> usize {
        match self {
            Target::Regression(t) => t.cols(),
            Target::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Target {
        match self {
            Target::Regression(t) => Target::Regression(t.select_columns(idx)),
            Target::Classes(c) => Target::Classes(idx.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// Inputs `x` (`C×L`, samples as columns) with matching targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: DenseMatrix,
    pub target: Target,
}

impl Batch {
    pub fn new(x: DenseMatrix, target: Target) -> Result<Self> {
        if x.cols() == 0 || target.len() != x.cols() {
            return Err(LorsError::arg(format!("batch has {} inputs but {} targets", x.cols(), target.len())));
        }
        Ok(Self { x, target })
    }

    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A whole labelled sample set; batches are column selections of it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Batch,
}

impl Dataset {
    pub fn new(x: DenseMatrix, target: Target) -> Result<Self> {
        Ok(Self { samples: Batch::new(x, target)? })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.x.rows()
    }

    pub fn all(&self) -> &Batch {
        &self.samples
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(LorsError::arg(format!("sample {bad} out of range for {} samples", self.len())));
        }
        Batch::new(self.samples.x.select_columns(idx), self.samples.target.select(idx))
    }

    /// First `n` samples and the rest.
    pub fn split(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(LorsError::arg(format!("cannot split {} samples at {n}", self.len())));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((Dataset { samples: self.batch(&head)? }, Dataset { samples: self.batch(&tail)? }))
    }
}

/// Options for the teacher-student regression task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherStudentConfig {
    pub samples: usize,
    /// Inputs lie on a random `latent_dim`-dimensional subspace.
    pub latent_dim: usize,
    /// Standard deviation of Gaussian noise added to teacher outputs.
    pub noise: f64,
}

impl Default for TeacherStudentConfig {
    fn default() -> Self {
        Self { samples: 2048, latent_dim: 16, noise: 0.0 }
    }
}

/// Inputs drawn from a low-dimensional Gaussian embedded in the teacher's
/// input space; targets are the teacher's outputs.
pub fn teacher_student(teacher: &BaseModel, cfg: &TeacherStudentConfig, rng: &mut RngState) -> Result<Dataset> {
    let c = teacher.input_dim();
    if cfg.samples == 0 || cfg.latent_dim == 0 || cfg.latent_dim > c {
        return Err(LorsError::arg(format!(
            "need samples >= 1 and 1 <= latent_dim <= {c}, got {} and {}",
            cfg.samples, cfg.latent_dim
        )));
    }
    let basis = DenseMatrix::random_normal(c, cfg.latent_dim, rng, 0.0, 1.0 / (cfg.latent_dim as f64).sqrt());
    let z = DenseMatrix::random_normal(cfg.latent_dim, cfg.samples, rng, 0.0, 1.0);
    let x = tensor::matmul(&basis, &z)?;
    let mut y = teacher.predict(&x)?;
    if cfg.noise > 0.0 {
        let eps = DenseMatrix::random_normal(y.rows(), y.cols(), rng, 0.0, cfg.noise);
        y = tensor::add(&y, &eps)?;
    }
    Dataset::new(x, Target::Regression(y))
}

/// `classes` Gaussian clusters with unit within-cluster variance and centres
/// drawn with standard deviation `separation`.
pub fn gaussian_clusters(dim: usize, samples: usize, classes: usize, separation: f64, rng: &mut RngState) -> Result<Dataset> {
    if dim == 0 || samples == 0 || classes < 2 {
        return Err(LorsError::arg("need dim >= 1, samples >= 1 and at least two classes"));
    }
    let centres = DenseMatrix::random_normal(dim, classes, rng, 0.0, separation);
    let labels: Vec<usize> = (0..samples).map(|_| rng.below(classes)).collect();
    let noise = DenseMatrix::random_normal(dim, samples, rng, 0.0, 1.0);
    let x = DenseMatrix::from_fn(dim, samples, |i, j| centres.get(i, labels[j]) + noise.get(i, j));
    Dataset::new(x, Target::Classes(labels))
}
