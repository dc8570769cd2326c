//! Federated-learning simulator.
//!
//! Produces exactly what a secure-aggregation server observes: one summed
//! update per round. Ground truth (who participated, what each user
//! submitted) is kept alongside for scoring.

pub mod mlp;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::DenseMatrix;
use crate::Error;
use mlp::{BlobTask, Dataset, LocalTraining, Mlp};

// Independent random streams derived from one seed.
const STREAM_PARTICIPANTS: u64 = 1;
const STREAM_GRADIENTS: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_DATA: u64 = 4;
const STREAM_TRAINING: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// How users' submitted updates are produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum UpdateModel {
    /// The same Gaussian vector every round.
    FixedGaussian,
    /// The user's Gaussian vector plus fresh `N(0, sigma)` noise each round.
    GaussianPlusNoise { sigma: f64 },
    /// Local FedAvg training on a small MLP; see [`FedAvgConfig`].
    Fedavg,
}

/// How participants are picked each round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Every (round, user) entry is an independent coin flip.
    #[default]
    Bernoulli,
    /// User `r % u` alone trains in round `r`; a test fixture.
    Cyclic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub num_users: usize,
    pub num_rounds: usize,
    pub participation_rate: f64,
    /// Update dimension for the Gaussian models; FedAvg uses the model size.
    pub gradient_dim: usize,
    pub update_model: UpdateModel,
    pub selection: Selection,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            num_users: 16,
            num_rounds: 64,
            participation_rate: 0.1,
            gradient_dim: 64,
            update_model: UpdateModel::FixedGaussian,
            selection: Selection::Bernoulli,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.num_users == 0 || self.num_rounds == 0 || self.gradient_dim == 0 {
            return Err(Error::InvalidArgument("users, rounds and dimension must be >= 1".into()));
        }
        if !(self.participation_rate > 0.0 && self.participation_rate < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "participation rate {} not in (0, 1)",
                self.participation_rate
            )));
        }
        if let UpdateModel::GaussianPlusNoise { sigma } = self.update_model {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::InvalidArgument(format!("noise sigma {sigma} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Whether the server keeps the global model fixed across rounds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelMode {
    #[default]
    FixedModel,
    /// The global model moves by the mean update after every round.
    HonestButCurious,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedAvgConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub dataset_size: usize,
    pub data_fraction: f64,
    pub momentum: f64,
    pub learning_rate: f64,
    /// Layer widths, input first.
    pub model_spec: Vec<usize>,
    pub model_mode: ModelMode,
    /// Step applied to the mean round update in honest-but-curious mode.
    pub server_learning_rate: f64,
    /// Spread of the per-user input shift in the synthetic task.
    pub user_shift: f64,
    /// Half-width of the uniform weight initialisation.
    pub init_scale: f64,
}

impl Default for FedAvgConfig {
    fn default() -> Self {
        Self {
            local_epochs: 4,
            batch_size: 16,
            dataset_size: 64,
            data_fraction: 1.0,
            momentum: 0.0,
            learning_rate: 0.01,
            model_spec: vec![16, 32, 2],
            model_mode: ModelMode::FixedModel,
            server_learning_rate: 1.0,
            user_shift: 0.5,
            init_scale: 0.1,
        }
    }
}

impl FedAvgConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.batch_size > self.dataset_size {
            return Err(Error::BatchExceedsDataset { batch: self.batch_size, dataset: self.dataset_size });
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be >= 1".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!("data fraction {} not in (0, 1]", self.data_fraction)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be finite and >= 0".into()));
        }
        Mlp::new(&self.model_spec)?;
        Ok(())
    }

    pub fn model(&self) -> Result<Mlp, Error> {
        Mlp::new(&self.model_spec)
    }

    fn local(&self) -> LocalTraining {
        LocalTraining {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            data_fraction: self.data_fraction,
            momentum: self.momentum,
            learning_rate: self.learning_rate,
        }
    }
}

/// Binary `rounds x users` participation matrix, stored round-major.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ParticipantMatrix {
    rounds: usize,
    users: usize,
    bits: Vec<u8>,
}

impl ParticipantMatrix {
    pub fn zeros(rounds: usize, users: usize) -> Self {
        Self { rounds, users, bits: vec![0; rounds * users] }
    }

    /// From round-major 0/1 entries.
    pub fn from_bits(rounds: usize, users: usize, bits: Vec<u8>) -> Result<Self, Error> {
        if bits.len() != rounds * users {
            return Err(Error::Shape(format!("{rounds}x{users} needs {} bits", rounds * users)));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("participant entries must be 0 or 1".into()));
        }
        Ok(Self { rounds, users, bits })
    }

    pub fn from_columns(cols: &[Vec<u8>]) -> Self {
        let users = cols.len();
        let rounds = cols.first().map_or(0, Vec::len);
        let mut p = Self::zeros(rounds, users);
        for (k, col) in cols.iter().enumerate() {
            assert_eq!(col.len(), rounds, "ragged columns");
            for (r, &b) in col.iter().enumerate() {
                p.set(r, k, b != 0);
            }
        }
        p
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn get(&self, round: usize, user: usize) -> bool {
        self.bits[round * self.users + user] != 0
    }

    pub fn set(&mut self, round: usize, user: usize, on: bool) {
        self.bits[round * self.users + user] = on as u8;
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn column(&self, user: usize) -> Vec<u8> {
        (0..self.rounds).map(|r| self.bits[r * self.users + user]).collect()
    }

    pub fn set_column(&mut self, user: usize, col: &[u8]) {
        for (r, &b) in col.iter().enumerate() {
            self.set(r, user, b != 0);
        }
    }

    pub fn selected(&self, round: usize) -> Vec<usize> {
        (0..self.users).filter(|&k| self.get(round, k)).collect()
    }

    pub fn participations(&self, user: usize) -> usize {
        (0..self.rounds).filter(|&r| self.get(r, user)).count()
    }

    /// Users who never trained; their columns cannot be recovered.
    pub fn never_participating(&self) -> Vec<usize> {
        (0..self.users).filter(|&k| self.participations(k) == 0).collect()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.rounds, self.users, |r, k| self.get(r, k) as u8 as f64)
    }
}

/// Draws the participant matrix for `cfg`.
pub fn sample_participants(cfg: &SimulationConfig) -> ParticipantMatrix {
    let (n, u) = (cfg.num_rounds, cfg.num_users);
    match cfg.selection {
        Selection::Bernoulli => {
            let mut rng = stream(cfg.seed, STREAM_PARTICIPANTS);
            let bits = (0..n * u).map(|_| rng.random_bool(cfg.participation_rate) as u8).collect();
            ParticipantMatrix { rounds: n, users: u, bits }
        }
        Selection::Cyclic => {
            let mut p = ParticipantMatrix::zeros(n, u);
            for r in 0..n {
                p.set(r, r % u, true);
            }
            p
        }
    }
}

/// Per-user base vectors, i.i.d. standard normal, `users x dim`.
pub fn gen_user_gradients(cfg: &SimulationConfig) -> DenseMatrix {
    let mut rng = stream(cfg.seed, STREAM_GRADIENTS);
    DenseMatrix::from_fn(cfg.num_users, cfg.gradient_dim, |_, _| rng.sample(StandardNormal))
}

/// What each user builds its per-round update from.
#[derive(Clone, Copy, Debug)]
pub enum UpdateSource<'a> {
    Gradients(&'a DenseMatrix),
    Fedavg(&'a FedAvgConfig),
}

/// One round as seen by the simulator.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub aggregate: Vec<f64>,
    pub selected: Vec<usize>,
    /// Submitted updates, in the order of `selected`.
    pub true_updates: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct SimulationOutput {
    /// `rounds x dim`; row `r` is the sum of that round's updates.
    pub aggregate: DenseMatrix,
    /// `users x dim`; each user's mean submitted update (zero if it never
    /// trained).
    pub true_avg: DenseMatrix,
    pub logs: Vec<RoundLog>,
    /// Users with no participation at all.
    pub never_participating: Vec<usize>,
}

/// Plays all rounds of `p` and sums the submitted updates.
pub fn run_rounds(cfg: &SimulationConfig, p: &ParticipantMatrix, source: UpdateSource<'_>) -> Result<SimulationOutput, Error> {
    cfg.validate()?;
    if p.rounds() != cfg.num_rounds || p.users() != cfg.num_users {
        return Err(Error::Shape(format!(
            "participant matrix is {}x{}, config wants {}x{}",
            p.rounds(),
            p.users(),
            cfg.num_rounds,
            cfg.num_users
        )));
    }
    match (cfg.update_model, source) {
        (UpdateModel::FixedGaussian, UpdateSource::Gradients(g)) => gaussian_rounds(cfg, p, g, 0.0),
        (UpdateModel::GaussianPlusNoise { sigma }, UpdateSource::Gradients(g)) => gaussian_rounds(cfg, p, g, sigma),
        (UpdateModel::Fedavg, UpdateSource::Fedavg(f)) => fedavg_rounds(cfg, p, f),
        (model, _) => Err(Error::InvalidArgument(format!("update source does not match {model:?}"))),
    }
}

fn gaussian_rounds(cfg: &SimulationConfig, p: &ParticipantMatrix, base: &DenseMatrix, sigma: f64) -> Result<SimulationOutput, Error> {
    if base.rows() != cfg.num_users {
        return Err(Error::Shape(format!("{} base vectors for {} users", base.rows(), cfg.num_users)));
    }
    let d = base.cols();
    let mut rng = stream(cfg.seed, STREAM_NOISE);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut sums = Accumulator::new(cfg.num_users, d);
    let mut logs = Vec::with_capacity(cfg.num_rounds);
    for r in 0..cfg.num_rounds {
        let selected = p.selected(r);
        let updates: Vec<Vec<f64>> = selected
            .iter()
            .map(|&k| {
                let row = base.row(k);
                if sigma == 0.0 {
                    row
                } else {
                    row.into_iter().map(|v| v + noise.sample(&mut rng)).collect()
                }
            })
            .collect();
        logs.push(sums.record(selected, updates));
    }
    let mut out = sums.finish(logs, p)?;
    if sigma == 0.0 {
        // Averaging k identical vectors can round; the truth is the base.
        let mut truth = base.clone().into_nalgebra();
        for &k in &out.never_participating {
            truth.row_mut(k).fill(0.0);
        }
        out.true_avg = DenseMatrix::from_nalgebra(truth)?;
    }
    Ok(out)
}

fn fedavg_rounds(cfg: &SimulationConfig, p: &ParticipantMatrix, f: &FedAvgConfig) -> Result<SimulationOutput, Error> {
    f.validate()?;
    let model = f.model()?;
    let mut data_rng = stream(cfg.seed, STREAM_DATA);
    let task = BlobTask::new(&mut data_rng, model.input_dim(), model.classes());
    let datasets: Vec<Dataset> =
        (0..cfg.num_users).map(|_| task.user_dataset(&mut data_rng, f.dataset_size, f.user_shift)).collect();
    let mut global = model.init(&mut data_rng, f.init_scale);

    let mut train_rng = stream(cfg.seed, STREAM_TRAINING);
    let local = f.local();
    let mut sums = Accumulator::new(cfg.num_users, model.num_params());
    let mut logs = Vec::with_capacity(cfg.num_rounds);
    for r in 0..cfg.num_rounds {
        let selected = p.selected(r);
        let updates = selected
            .iter()
            .map(|&k| mlp::local_update(&model, &global, &datasets[k], &local, &mut train_rng))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| match e {
                Error::Diverged(msg) => Error::Diverged(format!("round {r}: {msg}")),
                other => other,
            })?;
        if f.model_mode == ModelMode::HonestButCurious {
            honest_but_curious_step(&mut global, &updates, f.server_learning_rate);
        }
        logs.push(sums.record(selected, updates));
    }
    sums.finish(logs, p)
}

/// Advances the global model by `server_lr` times the mean of the round's
/// updates. A round without participants leaves it unchanged.
pub fn honest_but_curious_step(global: &mut [f64], round_updates: &[Vec<f64>], server_lr: f64) {
    if round_updates.is_empty() {
        return;
    }
    let scale = server_lr / round_updates.len() as f64;
    for upd in round_updates {
        for (g, u) in global.iter_mut().zip(upd) {
            *g += scale * u;
        }
    }
}

/// Running per-user sums for the ground-truth averages.
struct Accumulator {
    dim: usize,
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl Accumulator {
    fn new(users: usize, dim: usize) -> Self {
        Self { dim, sums: vec![vec![0.0; dim]; users], counts: vec![0; users] }
    }

    fn record(&mut self, selected: Vec<usize>, updates: Vec<Vec<f64>>) -> RoundLog {
        let mut aggregate = vec![0.0; self.dim];
        for (&k, upd) in selected.iter().zip(&updates) {
            for ((a, s), v) in aggregate.iter_mut().zip(self.sums[k].iter_mut()).zip(upd) {
                *a += v;
                *s += v;
            }
            self.counts[k] += 1;
        }
        RoundLog { aggregate, selected, true_updates: updates }
    }

    fn finish(self, logs: Vec<RoundLog>, p: &ParticipantMatrix) -> Result<SimulationOutput, Error> {
        let rows: Vec<f64> = logs.iter().flat_map(|l| l.aggregate.iter().copied()).collect();
        let aggregate = DenseMatrix::from_row_major(logs.len(), self.dim, &rows)?;
        let avg: Vec<f64> = self
            .sums
            .iter()
            .zip(&self.counts)
            .flat_map(|(s, &c)| s.iter().map(move |v| if c == 0 { 0.0 } else { v / c as f64 }))
            .collect();
        let true_avg = DenseMatrix::from_row_major(self.counts.len(), self.dim, &avg)?;
        Ok(SimulationOutput { aggregate, true_avg, logs, never_participating: p.never_participating() })
    }
}

/// Samples participants and runs all rounds for `cfg`.
pub fn simulate(cfg: &SimulationConfig, fedavg: Option<&FedAvgConfig>) -> Result<(ParticipantMatrix, SimulationOutput), Error> {
    cfg.validate()?;
    let p = sample_participants(cfg);
    let out = match cfg.update_model {
        UpdateModel::Fedavg => {
            let f = fedavg.ok_or_else(|| Error::InvalidArgument("fedavg update model needs a fedavg config".into()))?;
            run_rounds(cfg, &p, UpdateSource::Fedavg(f))?
        }
        _ => {
            let g = gen_user_gradients(cfg);
            run_rounds(cfg, &p, UpdateSource::Gradients(&g))?
        }
    };
    Ok((p, out))
}
