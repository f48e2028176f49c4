//! Deterministic, differentiable desk-scale problems with analytic
//! gradients, so optimizer behavior can be studied without any ML
//! framework. Gradients are pure functions of `(params, batch_seed)`,
//! which is what makes whole runs bit-reproducible.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{KronoptError, Result};
use crate::linalg::SymMatrix;
use crate::mat::Matrix;
use crate::rng::{normal_matrix_from, rng_from_seed};

/// A training problem: named parameter blocks, a full objective, and a
/// minibatch gradient driven by a seed.
pub trait Task: Send + Sync {
    fn name(&self) -> &str;
    fn shapes(&self) -> Vec<(usize, usize)>;
    fn param_names(&self) -> Vec<String>;
    fn init_params(&self, seed: u64) -> Vec<Matrix>;
    /// Full (deterministic) objective, used for telemetry and targets.
    fn loss(&self, params: &[Matrix]) -> f64;
    /// Objective over the minibatch selected by `batch_seed`.
    fn batch_loss(&self, params: &[Matrix], batch_seed: u64) -> f64;
    /// Analytic gradient of [`Task::batch_loss`] at the same seed.
    fn grad(&self, params: &[Matrix], batch_seed: u64) -> Vec<Matrix>;
}

fn combine_seeds(a: u64, b: u64) -> u64 {
    // splitmix64-style mix so (task seed, batch seed) pairs do not collide.
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// First `k` entries of a seeded permutation of `0..n` (batch selection).
fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = rng_from_seed(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Quadratic whose Hessian is exactly a Kronecker product:
/// `loss(W) = ½ tr((W−W*)ᵀ A (W−W*) B)` with seeded SPD `A`, `B`.
pub struct KronQuadratic {
    name: String,
    a: SymMatrix,
    b: SymMatrix,
    target: Matrix,
    noise_std: f64,
    seed: u64,
}

/// Seeded SPD matrix `MᵀM + 0.1 I` drawn from an existing stream.
fn spd_from(rng: &mut rand_chacha::ChaCha8Rng, dim: usize) -> SymMatrix {
    let m = normal_matrix_from(rng, dim, dim);
    let spd = &m.transpose().matmul(&m) + &Matrix::identity(dim).scale(0.1);
    SymMatrix::from_matrix(&spd).expect("finite square input")
}

impl KronQuadratic {
    pub fn new(m: usize, n: usize, seed: u64, noise_std: f64) -> Self {
        let mut rng = rng_from_seed(combine_seeds(seed, 0xA11CE));
        let a = spd_from(&mut rng, m);
        let b = spd_from(&mut rng, n);
        let target = normal_matrix_from(&mut rng, m, n);
        let task = Self {
            name: format!("kron_quadratic_{m}x{n}"),
            a,
            b,
            target,
            noise_std,
            seed,
        };
        #[cfg(debug_assertions)]
        if noise_std == 0.0 {
            debug_assert!(
                finite_diff_check(&task, seed, 2) <= 1e-5,
                "kron_quadratic gradient fails its finite-difference check"
            );
        }
        task
    }

    fn core_grad(&self, w: &Matrix) -> Matrix {
        let err = w - &self.target;
        self.a.as_matrix().matmul(&err).matmul(self.b.as_matrix())
    }
}

impl Task for KronQuadratic {
    fn name(&self) -> &str {
        &self.name
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        vec![self.target.shape()]
    }

    fn param_names(&self) -> Vec<String> {
        vec!["w".into()]
    }

    fn init_params(&self, seed: u64) -> Vec<Matrix> {
        let (m, n) = self.target.shape();
        let mut rng = rng_from_seed(combine_seeds(self.seed, combine_seeds(seed, 0x1717)));
        vec![normal_matrix_from(&mut rng, m, n)]
    }

    fn loss(&self, params: &[Matrix]) -> f64 {
        let err = &params[0] - &self.target;
        let aeb = self.a.as_matrix().matmul(&err).matmul(self.b.as_matrix());
        0.5 * err
            .data()
            .iter()
            .zip(aeb.data())
            .map(|(e, m)| e * m)
            .sum::<f64>()
    }

    fn batch_loss(&self, params: &[Matrix], _batch_seed: u64) -> f64 {
        self.loss(params)
    }

    fn grad(&self, params: &[Matrix], batch_seed: u64) -> Vec<Matrix> {
        let mut g = self.core_grad(&params[0]);
        if self.noise_std > 0.0 {
            let mut rng = rng_from_seed(combine_seeds(self.seed, batch_seed));
            let noise = normal_matrix_from(&mut rng, g.rows(), g.cols());
            g = &g + &noise.scale(self.noise_std);
        }
        vec![g]
    }
}

/// Linear least squares `loss(W) = ½ ‖X W − Y‖_F²` with seeded data and
/// optional row minibatching.
pub struct MatrixRegression {
    name: String,
    x: Matrix,
    y: Matrix,
    batch_size: usize,
    seed: u64,
}

impl MatrixRegression {
    pub fn new(m: usize, n: usize, k: usize, seed: u64, batch_size: usize) -> Self {
        let mut rng = rng_from_seed(combine_seeds(seed, 0xB0B));
        let x = normal_matrix_from(&mut rng, k, m);
        let y = normal_matrix_from(&mut rng, k, n);
        let task = Self {
            name: format!("matrix_regression_{m}x{n}"),
            x,
            y,
            batch_size: batch_size.clamp(1, k),
            seed,
        };
        #[cfg(debug_assertions)]
        debug_assert!(
            finite_diff_check(&task, seed, 2) <= 1e-5,
            "matrix_regression gradient fails its finite-difference check"
        );
        task
    }

    fn rows_for(&self, batch_seed: u64) -> Vec<usize> {
        sample_indices(
            self.x.rows(),
            self.batch_size,
            combine_seeds(self.seed, batch_seed),
        )
    }

    fn residual_rows(&self, w: &Matrix, rows: &[usize]) -> (Matrix, Matrix) {
        let xb = Matrix::from_fn(rows.len(), self.x.cols(), |i, j| self.x[(rows[i], j)]);
        let yb = Matrix::from_fn(rows.len(), self.y.cols(), |i, j| self.y[(rows[i], j)]);
        let res = &xb.matmul(w) - &yb;
        (xb, res)
    }
}

impl Task for MatrixRegression {
    fn name(&self) -> &str {
        &self.name
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        vec![(self.x.cols(), self.y.cols())]
    }

    fn param_names(&self) -> Vec<String> {
        vec!["w".into()]
    }

    fn init_params(&self, seed: u64) -> Vec<Matrix> {
        let mut rng = rng_from_seed(combine_seeds(self.seed, combine_seeds(seed, 0x2323)));
        vec![normal_matrix_from(&mut rng, self.x.cols(), self.y.cols())]
    }

    fn loss(&self, params: &[Matrix]) -> f64 {
        let res = &self.x.matmul(&params[0]) - &self.y;
        0.5 * res.frobenius_norm().powi(2)
    }

    fn batch_loss(&self, params: &[Matrix], batch_seed: u64) -> f64 {
        let rows = self.rows_for(batch_seed);
        let (_, res) = self.residual_rows(&params[0], &rows);
        0.5 * res.frobenius_norm().powi(2)
    }

    fn grad(&self, params: &[Matrix], batch_seed: u64) -> Vec<Matrix> {
        let rows = self.rows_for(batch_seed);
        let (xb, res) = self.residual_rows(&params[0], &rows);
        vec![xb.transpose().matmul(&res)]
    }
}

/// Two-layer tanh MLP with softmax cross-entropy on a seeded 2D
/// Gaussian-mixture classification set. Provides the parameter-type
/// diversity (2D weights, 1D biases) that makes per-factor telemetry
/// interesting.
pub struct MlpToy {
    name: String,
    xs: Matrix,
    labels: Vec<usize>,
    hidden: usize,
    classes: usize,
    batch_size: usize,
    seed: u64,
}

impl MlpToy {
    pub const DEFAULT_POINTS: usize = 2048;

    pub fn new(hidden: usize, seed: u64, batch_size: usize) -> Self {
        let classes = 4;
        let n = Self::DEFAULT_POINTS;
        let mut rng = rng_from_seed(combine_seeds(seed, 0xM1 as u64));
        let mut xs = Matrix::zeros(n, 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % classes;
            let angle = std::f64::consts::FRAC_PI_4 + std::f64::consts::FRAC_PI_2 * class as f64;
            let (cx, cy) = (2.0 * angle.cos(), 2.0 * angle.sin());
            let dx: f64 = rng.random();
            xs[(i, 0)] = cx + 0.6 * dx;
            let dy: f64 = rng.random();
            xs[(i, 1)] = cy + 0.6 * dy;
            labels.push(class);
        }
        Self::from_dataset(xs, labels, hidden, seed, batch_size)
    }

    /// Build from an explicit dataset (used by CSV import).
    pub fn from_dataset(
        xs: Matrix,
        labels: Vec<usize>,
        hidden: usize,
        seed: u64,
        batch_size: usize,
    ) -> Self {
        let classes = labels.iter().max().map_or(2, |m| m + 1).max(2);
        let n = xs.rows();
        let task = Self {
            name: format!("mlp_toy_h{hidden}"),
            xs,
            labels,
            hidden,
            classes,
            batch_size: batch_size.clamp(1, n),
            seed,
        };
        #[cfg(debug_assertions)]
        debug_assert!(
            finite_diff_check(&task, seed, 2) <= 1e-5,
            "mlp_toy gradient fails its finite-difference check"
        );
        task
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn points(&self) -> usize {
        self.xs.rows()
    }

    /// Loss and (optionally) gradients over an explicit subset of points.
    fn forward(&self, params: &[Matrix], batch: &[usize], want_grad: bool) -> (f64, Vec<Matrix>) {
        let (w1, b1, w2, b2) = (&params[0], &params[1], &params[2], &params[3]);
        let bsz = batch.len();
        let h = self.hidden;
        let c = self.classes;

        let xb = Matrix::from_fn(bsz, 2, |i, j| self.xs[(batch[i], j)]);
        // H = tanh(X W1 + 1 b1ᵀ)
        let mut z1 = xb.matmul(w1);
        for i in 0..bsz {
            for j in 0..h {
                z1[(i, j)] += b1[(j, 0)];
            }
        }
        let hid = z1.map(f64::tanh);
        // Logits = H W2 + 1 b2ᵀ
        let mut logits = hid.matmul(w2);
        for i in 0..bsz {
            for j in 0..c {
                logits[(i, j)] += b2[(j, 0)];
            }
        }

        let mut loss = 0.0;
        let mut dlogits = Matrix::zeros(bsz, c);
        for i in 0..bsz {
            let label = self.labels[batch[i]];
            let row_max = (0..c).fold(f64::MIN, |m, j| m.max(logits[(i, j)]));
            let mut sum_exp = 0.0;
            for j in 0..c {
                sum_exp += (logits[(i, j)] - row_max).exp();
            }
            let log_z = row_max + sum_exp.ln();
            loss += log_z - logits[(i, label)];
            if want_grad {
                for j in 0..c {
                    let p = (logits[(i, j)] - log_z).exp();
                    dlogits[(i, j)] = (p - if j == label { 1.0 } else { 0.0 }) / bsz as f64;
                }
            }
        }
        loss /= bsz as f64;

        if !want_grad {
            return (loss, Vec::new());
        }

        let dw2 = hid.transpose().matmul(&dlogits);
        let db2 = Matrix::from_fn(c, 1, |j, _| (0..bsz).map(|i| dlogits[(i, j)]).sum());
        let dhid = dlogits.matmul(&w2.transpose());
        let dz1 = dhid.zip_map(&hid, |d, t| d * (1.0 - t * t));
        let dw1 = xb.transpose().matmul(&dz1);
        let db1 = Matrix::from_fn(h, 1, |j, _| (0..bsz).map(|i| dz1[(i, j)]).sum());
        (loss, vec![dw1, db1, dw2, db2])
    }

    fn batch_for(&self, batch_seed: u64) -> Vec<usize> {
        sample_indices(
            self.xs.rows(),
            self.batch_size,
            combine_seeds(self.seed, batch_seed),
        )
    }

    /// Write the dataset as `x1,x2,label` CSV.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "x1,x2,label")?;
        for i in 0..self.xs.rows() {
            writeln!(
                file,
                "{},{},{}",
                self.xs[(i, 0)],
                self.xs[(i, 1)],
                self.labels[i]
            )?;
        }
        Ok(())
    }

    /// Rebuild a task from an exported dataset CSV.
    pub fn from_csv(path: &Path, hidden: usize, seed: u64, batch_size: usize) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut xs = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if lineno == 0 {
                continue; // header
            }
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(KronoptError::ConfigError(format!(
                    "dataset line {lineno}: expected 3 fields, got {}",
                    parts.len()
                )));
            }
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| {
                    KronoptError::ConfigError(format!("dataset line {lineno}: {e}"))
                })
            };
            xs.push([parse(parts[0])?, parse(parts[1])?]);
            labels.push(parts[2].trim().parse::<usize>().map_err(|e| {
                KronoptError::ConfigError(format!("dataset line {lineno}: {e}"))
            })?);
        }
        let n = xs.len();
        if n == 0 {
            return Err(KronoptError::ConfigError("empty dataset".into()));
        }
        let mat = Matrix::from_fn(n, 2, |i, j| xs[i][j]);
        Ok(Self::from_dataset(mat, labels, hidden, seed, batch_size))
    }
}

impl Task for MlpToy {
    fn name(&self) -> &str {
        &self.name
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        vec![
            (2, self.hidden),
            (self.hidden, 1),
            (self.hidden, self.classes),
            (self.classes, 1),
        ]
    }

    fn param_names(&self) -> Vec<String> {
        vec!["w1".into(), "b1".into(), "w2".into(), "b2".into()]
    }

    fn init_params(&self, seed: u64) -> Vec<Matrix> {
        let mut rng = rng_from_seed(combine_seeds(self.seed, combine_seeds(seed, 0x5A5A)));
        let w1 = normal_matrix_from(&mut rng, 2, self.hidden).scale(1.0 / 2.0_f64.sqrt());
        let b1 = Matrix::zeros(self.hidden, 1);
        let w2 = normal_matrix_from(&mut rng, self.hidden, self.classes)
            .scale(1.0 / (self.hidden as f64).sqrt());
        let b2 = Matrix::zeros(self.classes, 1);
        vec![w1, b1, w2, b2]
    }

    fn loss(&self, params: &[Matrix]) -> f64 {
        let all: Vec<usize> = (0..self.xs.rows()).collect();
        self.forward(params, &all, false).0
    }

    fn batch_loss(&self, params: &[Matrix], batch_seed: u64) -> f64 {
        self.forward(params, &self.batch_for(batch_seed), false).0
    }

    fn grad(&self, params: &[Matrix], batch_seed: u64) -> Vec<Matrix> {
        self.forward(params, &self.batch_for(batch_seed), true).1
    }
}

/// Worst relative gradient error against central finite differences of
/// `batch_loss`, over all parameter blocks, at one parameter point.
pub fn finite_diff_max_rel_error(task: &dyn Task, params: &[Matrix], batch_seed: u64) -> f64 {
    let analytic = task.grad(params, batch_seed);
    let mut worst = 0.0_f64;
    let mut probe: Vec<Matrix> = params.to_vec();
    for (b, g) in analytic.iter().enumerate() {
        let mut fd = Matrix::zeros(g.rows(), g.cols());
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let theta = params[b][(i, j)];
                let h = 1e-5 * (1.0 + theta.abs());
                probe[b][(i, j)] = theta + h;
                let up = task.batch_loss(&probe, batch_seed);
                probe[b][(i, j)] = theta - h;
                let down = task.batch_loss(&probe, batch_seed);
                probe[b][(i, j)] = theta;
                fd[(i, j)] = (up - down) / (2.0 * h);
            }
        }
        let rel = (g - &fd).frobenius_norm() / (1.0 + fd.frobenius_norm());
        worst = worst.max(rel);
    }
    worst
}

/// Run the finite-difference comparison at `points` random parameter
/// settings; returns the worst relative error seen.
pub fn finite_diff_check(task: &dyn Task, seed: u64, points: usize) -> f64 {
    let mut worst = 0.0_f64;
    for p in 0..points {
        let mut params = task.init_params(seed.wrapping_add(1000 + p as u64));
        // Jitter so biases initialized at zero are probed off-origin too.
        let mut rng = rng_from_seed(combine_seeds(seed, 7777 + p as u64));
        for block in &mut params {
            let jitter = normal_matrix_from(&mut rng, block.rows(), block.cols());
            *block = &*block + &jitter.scale(0.3);
        }
        worst = worst.max(finite_diff_max_rel_error(task, &params, 11 + p as u64));
    }
    worst
}
