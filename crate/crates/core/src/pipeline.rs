//! One experiment end to end: simulate, derive analytics, attack, score.

use serde::{Deserialize, Serialize};

use crate::analytics::{derive, AnalyticsConfig, ConstraintSet};
use crate::attack::{disaggregate, evaluate, AttackConfig, DisaggregationResult, Metrics};
use crate::flsim::{simulate, FedAvgConfig, ParticipantMatrix, SimulationConfig, UpdateModel};
use crate::linalg::DenseMatrix;
use crate::Error;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Experiment {
    pub simulation: SimulationConfig,
    pub fedavg: Option<FedAvgConfig>,
    pub analytics: AnalyticsConfig,
    pub attack: AttackConfig,
}

impl Experiment {
    pub fn validate(&self) -> Result<(), Error> {
        self.simulation.validate()?;
        if self.simulation.update_model == UpdateModel::Fedavg {
            self.fedavg
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("fedavg update model needs a [fedavg] section".into()))?
                .validate()?;
        }
        let a = &self.analytics;
        if a.granularity == 0 {
            return Err(Error::InvalidArgument("granularity must be >= 1".into()));
        }
        if !(a.kept_fraction > 0.0 && a.kept_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!("kept_fraction {} not in (0, 1]", a.kept_fraction)));
        }
        if !(a.count_noise_sigma >= 0.0 && a.count_noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument("count_noise_sigma must be >= 0".into()));
        }
        self.attack_config().validate()
    }

    /// Attack settings with the user count taken from the simulation.
    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig { num_users: self.simulation.num_users, ..self.attack.clone() }
    }

    /// The same experiment with every seed derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut e = self.clone();
        e.simulation.seed = seed;
        e.attack.seed = seed;
        e
    }
}

/// Everything the simulated server and its analytics would expose, plus the
/// ground truth used for scoring.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub p_true: ParticipantMatrix,
    pub g_agg: DenseMatrix,
    pub g_true_avg: DenseMatrix,
    pub constraints: ConstraintSet,
}

/// Simulates the federation and derives the analytics counts. Seeds come from
/// `exp.simulation.seed`.
pub fn simulate_artifacts(exp: &Experiment) -> Result<Artifacts, Error> {
    exp.validate()?;
    let (p_true, out) = simulate(&exp.simulation, exp.fedavg.as_ref())?;
    let constraints = derive(&p_true, &exp.analytics, exp.simulation.seed);
    Ok(Artifacts { p_true, g_agg: out.aggregate, g_true_avg: out.true_avg, constraints })
}

#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub artifacts: Artifacts,
    pub result: DisaggregationResult,
    pub metrics: Metrics,
}

/// Attacks previously produced artifacts and scores the result.
pub fn attack_artifacts(art: &Artifacts, cfg: &AttackConfig) -> Result<(DisaggregationResult, Metrics), Error> {
    let result = disaggregate(&art.g_agg, &art.constraints, cfg)?;
    let metrics = evaluate(&result, &art.p_true, &art.g_true_avg)?;
    Ok((result, metrics))
}

/// Simulate, attack and score with all seeds set to `seed`.
pub fn run_trial(exp: &Experiment, seed: u64) -> Result<TrialOutcome, Error> {
    let exp = exp.with_seed(seed);
    let artifacts = simulate_artifacts(&exp)?;
    let (result, metrics) = attack_artifacts(&artifacts, &exp.attack_config())?;
    Ok(TrialOutcome { artifacts, result, metrics })
}
