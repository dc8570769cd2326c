//! Small fully-connected classifier with hand-written backpropagation.
//!
//! Parameters live in one flat vector so that a model update is simply the
//! difference of two such vectors. Layout, layer by layer: the weight matrix
//! (`out x in`, row-major) followed by the bias (`out`). Hidden layers use
//! ReLU; the output layer feeds a softmax cross-entropy loss.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::Error;

/// Layer widths, input first, number of classes last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    widths: Vec<usize>,
}

impl Mlp {
    pub fn new(widths: &[usize]) -> Result<Self, Error> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!("bad layer widths {widths:?}")));
        }
        Ok(Self { widths: widths.to_vec() })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Uniform initialisation in `[-scale, scale]`.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64) -> Vec<f64> {
        (0..self.num_params()).map(|_| rng.random_range(-scale..=scale)).collect()
    }

    /// Mean cross-entropy over `batch` and its gradient.
    pub fn loss_grad(&self, params: &[f64], data: &Dataset, batch: &[usize]) -> (f64, Vec<f64>) {
        assert_eq!(params.len(), self.num_params());
        let layers = self.widths.len() - 1;
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        // activations[l] is the input to layer l.
        let mut acts: Vec<Vec<f64>> = self.widths.iter().map(|&w| vec![0.0; w]).collect();
        let mut deltas: Vec<Vec<f64>> = self.widths[1..].iter().map(|&w| vec![0.0; w]).collect();
        let offsets = self.offsets();

        for &i in batch {
            acts[0].copy_from_slice(data.x(i));
            for l in 0..layers {
                let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
                let (w, b) = self.layer(params, &offsets, l);
                let (head, tail) = acts.split_at_mut(l + 1);
                let (input, out) = (&head[l], &mut tail[0]);
                for o in 0..fan_out {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    let z = b[o] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>();
                    out[o] = if l + 1 < layers { z.max(0.0) } else { z };
                }
            }
            // Softmax cross-entropy on the logits.
            let logits = &acts[layers];
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let y = data.label(i);
            loss += total.ln() + max - logits[y];
            for (c, d) in deltas[layers - 1].iter_mut().enumerate() {
                *d = exps[c] / total - if c == y { 1.0 } else { 0.0 };
            }
            // Backward pass.
            for l in (0..layers).rev() {
                let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
                let (w_off, b_off) = offsets[l];
                for o in 0..fan_out {
                    let d = deltas[l][o];
                    grad[b_off + o] += d;
                    let gw = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                    for (g, x) in gw.iter_mut().zip(&acts[l]) {
                        *g += d * x;
                    }
                }
                if l > 0 {
                    let (w, _) = self.layer(params, &offsets, l);
                    let (lower, upper) = deltas.split_at_mut(l);
                    let (prev, cur) = (&mut lower[l - 1], &upper[0]);
                    for (j, p) in prev.iter_mut().enumerate() {
                        let back: f64 = (0..fan_out).map(|o| w[o * fan_in + j] * cur[o]).sum();
                        // ReLU derivative at the hidden activation.
                        *p = if acts[l][j] > 0.0 { back } else { 0.0 };
                    }
                }
            }
        }
        let scale = 1.0 / batch.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        (loss * scale, grad)
    }

    /// Mean cross-entropy over `batch`.
    pub fn loss(&self, params: &[f64], data: &Dataset, batch: &[usize]) -> f64 {
        self.loss_grad(params, data, batch).0
    }

    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut at = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let o = (at, at + w[0] * w[1]);
                at += w[0] * w[1] + w[1];
                o
            })
            .collect()
    }

    fn layer<'a>(&self, params: &'a [f64], offsets: &[(usize, usize)], l: usize) -> (&'a [f64], &'a [f64]) {
        let (w_off, b_off) = offsets[l];
        (&params[w_off..b_off], &params[b_off..b_off + self.widths[l + 1]])
    }
}

/// A labelled dataset stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Self {
        assert_eq!(features.len(), dim * labels.len());
        Self { dim, features, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
}

/// Gaussian blobs, one centre per class, shared across users.
#[derive(Clone, Debug)]
pub struct BlobTask {
    centres: Vec<Vec<f64>>,
}

impl BlobTask {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, classes: usize) -> Self {
        let centres = (0..classes)
            .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        Self { centres }
    }

    /// `size` examples for one user. Each user's inputs are shifted by a
    /// private offset drawn with standard deviation `user_shift`, so users'
    /// updates differ from one another.
    pub fn user_dataset<R: Rng + ?Sized>(&self, rng: &mut R, size: usize, user_shift: f64) -> Dataset {
        let dim = self.centres[0].len();
        let shift_dist = Normal::new(0.0, user_shift).expect("finite shift");
        let shift: Vec<f64> = (0..dim).map(|_| shift_dist.sample(rng)).collect();
        let mut features = Vec::with_capacity(size * dim);
        let mut labels = Vec::with_capacity(size);
        for _ in 0..size {
            let y = rng.random_range(0..self.centres.len());
            for (c, s) in self.centres[y].iter().zip(&shift) {
                features.push(c + s + rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(y);
        }
        Dataset::new(dim, features, labels)
    }
}

/// Local training hyper-parameters used by [`local_update`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub data_fraction: f64,
    pub momentum: f64,
    pub learning_rate: f64,
}

/// Runs `epochs` of mini-batch SGD from `start` on (a fresh subsample of)
/// `data` and returns `weights_after - weights_before`.
pub fn local_update<R: Rng + ?Sized>(
    model: &Mlp,
    start: &[f64],
    data: &Dataset,
    cfg: &LocalTraining,
    rng: &mut R,
) -> Result<Vec<f64>, Error> {
    if cfg.batch_size > data.len() {
        return Err(Error::BatchExceedsDataset { batch: cfg.batch_size, dataset: data.len() });
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    if cfg.data_fraction < 1.0 {
        let keep = ((cfg.data_fraction * data.len() as f64).round() as usize).max(1);
        idx.shuffle(rng);
        idx.truncate(keep);
    }
    let mut w = start.to_vec();
    let mut velocity = vec![0.0; w.len()];
    // A single full batch is order-independent; skipping the shuffle keeps
    // repeated fixed-model updates bitwise identical.
    let one_batch = idx.len() <= cfg.batch_size;
    for epoch in 0..cfg.epochs {
        if !one_batch {
            idx.shuffle(rng);
        }
        for (step, batch) in idx.chunks(cfg.batch_size).enumerate() {
            let (loss, grad) = model.loss_grad(&w, data, batch);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss {loss} at epoch {epoch}, step {step} (lr {})",
                    cfg.learning_rate
                )));
            }
            for ((wi, vi), gi) in w.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *vi = cfg.momentum * *vi + gi;
                *wi -= cfg.learning_rate * *vi;
            }
        }
    }
    Ok(w.iter().zip(start).map(|(a, b)| a - b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, widths: &[usize], size: usize) -> (Mlp, Vec<f64>, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Mlp::new(widths).unwrap();
        let task = BlobTask::new(&mut rng, widths[0], model.classes());
        let data = task.user_dataset(&mut rng, size, 0.5);
        // Larger init than the simulator's so the finite-difference check
        // exercises non-trivial activations.
        let params = model.init(&mut rng, 0.5);
        (model, params, data)
    }

    #[test]
    fn parameter_count() {
        assert_eq!(Mlp::new(&[16, 32, 2]).unwrap().num_params(), 16 * 32 + 32 + 32 * 2 + 2);
    }

    #[test]
    fn gradient_matches_central_differences() {
        // 6 -> 12 -> 3: 84 + 39 = 123 parameters.
        let (model, params, data) = setup(3, &[6, 12, 3], 20);
        assert!(model.num_params() <= 200);
        let all: Vec<usize> = (0..data.len()).collect();
        let (_, grad) = model.loss_grad(&params, &data, &all);
        let h = 1e-5;
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus[i] += h;
            let mut minus = params.clone();
            minus[i] -= h;
            let fd = (model.loss(&plus, &data, &all) - model.loss(&minus, &data, &all)) / (2.0 * h);
            let tol = 1e-4 * fd.abs().max(grad[i].abs()).max(1e-3);
            assert!((fd - grad[i]).abs() <= tol, "param {i}: fd {fd} vs analytic {}", grad[i]);
        }
    }

    #[test]
    fn single_full_batch_epoch_is_one_gradient_step() {
        let (model, params, data) = setup(4, &[6, 12, 3], 16);
        let cfg = LocalTraining { epochs: 1, batch_size: 16, data_fraction: 1.0, momentum: 0.0, learning_rate: 0.05 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let upd = local_update(&model, &params, &data, &cfg, &mut rng).unwrap();
        let all: Vec<usize> = (0..16).collect();
        let (_, grad) = model.loss_grad(&params, &data, &all);
        for (u, g) in upd.iter().zip(&grad) {
            assert!((u + 0.05 * g).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_gives_zero_update() {
        let (model, params, data) = setup(5, &[4, 8, 2], 32);
        let cfg = LocalTraining { epochs: 3, batch_size: 8, data_fraction: 0.5, momentum: 0.9, learning_rate: 0.0 };
        let upd = local_update(&model, &params, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(upd.iter().all(|&u| u == 0.0));
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let (model, params, data) = setup(6, &[4, 8, 2], 8);
        let cfg = LocalTraining { epochs: 1, batch_size: 9, data_fraction: 1.0, momentum: 0.0, learning_rate: 0.1 };
        let err = local_update(&model, &params, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, Error::BatchExceedsDataset { batch: 9, dataset: 8 }));
    }

    #[test]
    fn divergence_is_reported() {
        let (model, params, data) = setup(7, &[4, 8, 2], 16);
        let cfg = LocalTraining { epochs: 50, batch_size: 4, data_fraction: 1.0, momentum: 0.99, learning_rate: 1e200 };
        let err = local_update(&model, &params, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)), "{err}");
    }

    /// Mean squared deviation of repeated updates from their average.
    fn update_spread(epochs: usize) -> f64 {
        let (model, _, data) = setup(8, &[16, 32, 2], 64);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = model.init(&mut rng, 0.1);
        let cfg = LocalTraining { epochs, batch_size: 8, data_fraction: 0.9, momentum: 0.0, learning_rate: 0.01 };
        let runs: Vec<Vec<f64>> = (0..30).map(|_| local_update(&model, &params, &data, &cfg, &mut rng).unwrap()).collect();
        let d = params.len();
        let mean: Vec<f64> = (0..d).map(|j| runs.iter().map(|r| r[j]).sum::<f64>() / runs.len() as f64).collect();
        let var: f64 = runs.iter().map(|r| r.iter().zip(&mean).map(|(a, m)| (a - m).powi(2)).sum::<f64>()).sum::<f64>()
            / runs.len() as f64;
        var
    }

    #[test]
    fn update_noise_grows_with_epochs() {
        let spreads: Vec<f64> = [1, 2, 4, 8].iter().map(|&e| update_spread(e)).collect();
        assert!(spreads.windows(2).all(|w| w[1] > w[0]), "{spreads:?}");
    }
}
