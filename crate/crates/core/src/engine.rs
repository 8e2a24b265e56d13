//! The federated training loop and its algorithm variants.

use std::path::Path;

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, LambdaInit, RunConfig};
use crate::error::{invalid, mismatch, Error, Result};
use crate::metrics::{evaluate_groups, Level, MetricsReport, ThetaStep};
use crate::models::{Batch, Objective};
use crate::rng::{keyed_stream, Purpose, Stream, SERVER};
use crate::simplex::{mirror_step_masked, momentum_params, momentum_weights, project_simplex, tilt_weights_kl};
use crate::types::{ClientData, FederatedDataset, GroupIndex, ModelParams, SimplexWeights};

/// Largest dataset for which the per-sample reweighting baseline refreshes
/// every sample of the evaluated clients; above it only minibatch samples are
/// refreshed.
pub const INDA_EXACT_LIMIT: usize = 100_000;

/// Weight above which a concentration warning is logged.
pub const CONCENTRATION_WARNING: f64 = 0.99;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Environment variable capping the worker threads of a run.
pub const THREADS_ENV: &str = "FAIRFED_THREADS";

/// Per-sample state of the reweighting baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights {
    /// Weights over all samples, clients concatenated in order.
    pub weights: SimplexWeights,
    /// Most recent loss seen for each sample.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub theta: ModelParams,
    /// Aggregate of the previous round before momentum.
    pub theta_tilde_prev: ModelParams,
    /// Weights over subgroups; over clients holding data for `drfa_client`.
    pub lambda: SimplexWeights,
    pub round: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<SampleWeights>,
}

/// How a client draws its local minibatches.
#[derive(Debug, Clone, Copy)]
pub enum LocalSampler<'a> {
    /// Uniform minibatches over all of the client's samples.
    Uniform,
    /// Pick a subgroup by weight, then a uniform minibatch inside it.
    Groups { weights: &'a [f64], members: &'a [&'a [usize]] },
    /// Minibatches drawn with replacement proportionally to per-sample weights.
    Samples { weights: &'a [f64] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult {
    pub last: ModelParams,
    /// Iterate after `snapshot_at` steps, when requested.
    pub snapshot: Option<ModelParams>,
}

/// Up to `batch` distinct positions of `pool`; the whole pool when it is not larger.
fn uniform_minibatch(pool: &[usize], batch: usize, stream: &mut Stream) -> Vec<usize> {
    if batch >= pool.len() {
        return pool.to_vec();
    }
    rand::seq::index::sample(stream, pool.len(), batch).iter().map(|p| pool[p]).collect()
}

fn weighted(weights: &[f64]) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(weights.iter().copied()).map_err(|e| invalid(format!("sampling weights: {e}")))
}

/// Runs `local_iters` SGD steps `θ ← θ − η ∇ℓ(θ; batch)` on one client.
#[allow(clippy::too_many_arguments)]
pub fn local_sgd(
    model: &dyn Objective,
    theta: &ModelParams,
    client: &ClientData,
    dim: usize,
    sampler: LocalSampler<'_>,
    local_iters: usize,
    eta: f64,
    batch_size: usize,
    snapshot_at: Option<usize>,
    stream: &mut Stream,
) -> Result<LocalResult> {
    if client.is_empty() {
        return Err(Error::Data(format!("client {} has no data", client.client_id)));
    }
    if batch_size == 0 {
        return Err(invalid("batch size must be >= 1"));
    }
    let all: Vec<usize> = (0..client.len()).collect();
    let (group_dist, sample_dist) = match sampler {
        LocalSampler::Uniform => (None, None),
        LocalSampler::Groups { weights, members } => {
            if weights.len() != members.len() {
                return Err(mismatch("group weights vs group members"));
            }
            (Some(weighted(weights)?), None)
        }
        LocalSampler::Samples { weights } => {
            if weights.len() != client.len() {
                return Err(mismatch("sample weights vs client size"));
            }
            (None, Some(weighted(weights)?))
        }
    };
    let mut theta = theta.clone();
    let mut grad = vec![0.0; theta.len()];
    let mut snapshot = None;
    for step in 1..=local_iters {
        let picked = match (&sampler, &group_dist, &sample_dist) {
            (LocalSampler::Groups { members, .. }, Some(d), _) => {
                let g = d.sample(stream);
                uniform_minibatch(members[g], batch_size, stream)
            }
            (LocalSampler::Samples { .. }, _, Some(d)) => (0..batch_size).map(|_| d.sample(stream)).collect(),
            _ => uniform_minibatch(&all, batch_size, stream),
        };
        let batch = Batch::gather(&client.features, &client.labels, dim, &picked);
        model.loss_grad(theta.as_slice(), &batch, &mut grad)?;
        for (t, g) in theta.as_mut_slice().iter_mut().zip(&grad) {
            *t -= eta * g;
        }
        if snapshot_at == Some(step) {
            snapshot = Some(theta.clone());
        }
    }
    if !theta.is_finite() {
        return Err(Error::Numerical(format!("local model of client {} diverged", client.client_id)));
    }
    Ok(LocalResult { last: theta, snapshot })
}

fn lexicographic(a: &ModelParams, b: &ModelParams) -> std::cmp::Ordering {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

fn mean_in_order(models: &[&ModelParams]) -> Result<ModelParams> {
    let first = models.first().ok_or_else(|| invalid("cannot aggregate an empty model list"))?;
    let mut sum = vec![0.0; first.len()];
    for m in models {
        first.check_len(m)?;
        for (s, v) in sum.iter_mut().zip(m.as_slice()) {
            *s += v;
        }
    }
    let k = models.len() as f64;
    ModelParams::new(sum.into_iter().map(|s| s / k).collect())
}

/// Coordinate-wise mean. Inputs are summed in a canonical (lexicographic)
/// order, so any permutation of the list gives the same bits.
pub fn aggregate(models: &[ModelParams]) -> Result<ModelParams> {
    let mut order: Vec<&ModelParams> = models.iter().collect();
    order.sort_by(|a, b| lexicographic(a, b));
    mean_in_order(&order)
}

/// Mean of per-client models, summed in ascending client id (ties by content).
pub fn aggregate_by_client(models: &[(usize, ModelParams)]) -> Result<ModelParams> {
    let mut order: Vec<&(usize, ModelParams)> = models.iter().collect();
    order.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| lexicographic(&a.1, &b.1)));
    mean_in_order(&order.iter().map(|(_, m)| m).collect::<Vec<_>>())
}

/// `k` client ids drawn i.i.d. with replacement, proportionally to `marginals`.
pub fn sample_clients(marginals: &[f64], k: usize, stream: &mut Stream) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(invalid("K must be >= 1"));
    }
    if marginals.iter().any(|m| !(m.is_finite() && *m >= 0.0)) || !marginals.iter().any(|&m| m > 0.0) {
        return Err(invalid("all client marginals are zero"));
    }
    let dist = weighted(marginals)?;
    Ok((0..k).map(|_| dist.sample(stream)).collect())
}

/// `k` distinct ids from `pool` drawn uniformly, returned ascending; the whole
/// pool when `k` is not smaller.
pub fn sample_eval_clients(pool: &[usize], k: usize, stream: &mut Stream) -> Vec<usize> {
    let mut out = uniform_minibatch(pool, k, stream);
    out.sort_unstable();
    out
}

/// Minibatch losses of the subgroups of the `evaluated` clients.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLosses {
    /// Mean loss per indexed subgroup; zero where unevaluated.
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    /// Evaluated `(entry, sample position, loss)` triples.
    pub samples: Vec<(usize, usize, f64)>,
}

/// Mean loss of `theta` on a uniform minibatch of size `min(loss_batch, n^u)`
/// of every subgroup held by the evaluated clients. Each subgroup draws from
/// its own `(seed, round, client, attribute)` stream.
#[allow(clippy::too_many_arguments)]
pub fn group_losses(
    model: &dyn Objective,
    theta: &ModelParams,
    index: &GroupIndex,
    data: &FederatedDataset,
    loss_batch: usize,
    evaluated: &[usize],
    seed: u64,
    round: u64,
) -> Result<GroupLosses> {
    let mut out = GroupLosses {
        values: vec![0.0; index.group_count()],
        mask: vec![false; index.group_count()],
        samples: Vec::new(),
    };
    for &i in evaluated {
        let c = &data.clients[i];
        for j in index.client_entries(i) {
            let e = &index.entries[j];
            let mut stream = keyed_stream(seed, round, i as u64, Purpose::GroupLoss, e.attribute as u32);
            let picked = uniform_minibatch(&e.indices, loss_batch, &mut stream);
            let batch = Batch::gather(&c.features, &c.labels, data.feature_dim, &picked);
            let evals = model.evaluate(theta.as_slice(), &batch)?;
            out.values[j] = evals.iter().map(|s| s.loss).sum::<f64>() / evals.len() as f64;
            out.mask[j] = true;
            out.samples.extend(picked.iter().zip(&evals).map(|(&p, s)| (j, p, s.loss)));
        }
    }
    Ok(out)
}

/// What happened in one round, beyond the new state.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub sampled: Vec<usize>,
    pub t_prime: usize,
    pub evaluated: Vec<usize>,
    /// Group loss vector `v` and its evaluation mask (empty for `fedavg`).
    pub v: Vec<f64>,
    pub mask: Vec<bool>,
    pub theta_step: ThetaStep,
}

/// Per-round trace entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub theta_digest: String,
    pub lambda: Vec<f64>,
    pub v: Vec<f64>,
    pub mask: Vec<bool>,
    pub sampled: Vec<usize>,
    pub t_prime: usize,
    pub attribute: MetricsReport,
    pub client: MetricsReport,
    /// Largest subgroup mean loss on the evaluation data.
    pub max_group_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub records: Vec<RoundRecord>,
    pub final_state: ServerState,
    /// Per-round server parameters, when requested.
    pub theta_steps: Vec<ThetaStep>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    /// Data the per-round metrics are computed on; the training data when absent.
    pub eval: Option<&'a FederatedDataset>,
    pub record_theta: bool,
}

/// JSON checkpoint of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub algorithm: Algorithm,
    pub round: u64,
    pub theta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub group_index_digest: String,
    pub config_digest: String,
    /// Seed the per-round streams are keyed from.
    pub rng_key: u64,
    pub theta_tilde_prev: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<SampleWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<crate::models::ModelSpec>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Data(format!("checkpoint: {e}")))?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {}", ckpt.format_version)));
        }
        Ok(ckpt)
    }
}

/// Thread count requested through the environment, if any.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// A configured run over one dataset.
pub struct Trainer<'a> {
    cfg: RunConfig,
    model: &'a dyn Objective,
    data: &'a FederatedDataset,
    index: GroupIndex,
    active: Vec<usize>,
    /// Start of each client's samples in the concatenated sample order.
    sample_offsets: Vec<usize>,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: RunConfig, model: &'a dyn Objective, data: &'a FederatedDataset) -> Result<Self> {
        data.validate()?;
        cfg.validate_for(data.client_count())?;
        if data.feature_dim != model.feature_dim() {
            return Err(mismatch(format!("dataset width {} vs model input {}", data.feature_dim, model.feature_dim())));
        }
        let index = GroupIndex::build(data);
        let active = index.active_clients();
        let mut sample_offsets = vec![0];
        for c in &data.clients {
            sample_offsets.push(sample_offsets.last().unwrap() + c.len());
        }
        let mut t = Trainer { cfg, model, data, index, active, sample_offsets, pool: None };
        if let Some(n) = threads_from_env() {
            t = t.with_threads(n)?;
        }
        Ok(t)
    }

    /// Runs client updates on a dedicated pool of `threads` workers.
    pub fn with_threads(mut self, threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        self.pool = Some(pool);
        Ok(self)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn index(&self) -> &GroupIndex {
        &self.index
    }

    fn initial_lambda(&self) -> SimplexWeights {
        let uniform = self.cfg.lambda_init == LambdaInit::Uniform;
        match self.cfg.algorithm {
            Algorithm::DrfaClient => {
                if uniform {
                    SimplexWeights::uniform(self.active.len())
                } else {
                    let n = self.index.total_samples() as f64;
                    SimplexWeights::from_positive(
                        self.active.iter().map(|&i| self.index.client_size(i) as f64 / n).collect(),
                    )
                    .expect("active clients hold data")
                }
            }
            Algorithm::Fedavg => self.index.size_proportional(),
            _ if uniform => SimplexWeights::uniform(self.index.group_count()),
            _ => self.index.size_proportional(),
        }
    }

    fn all_sample_losses(&self, theta: &ModelParams) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.index.total_samples());
        for c in &self.data.clients {
            if c.is_empty() {
                continue;
            }
            let batch = Batch::gather(&c.features, &c.labels, self.data.feature_dim, &(0..c.len()).collect::<Vec<_>>());
            out.extend(self.model.evaluate(theta.as_slice(), &batch)?.iter().map(|s| s.loss));
        }
        Ok(out)
    }

    /// `θ⁽⁰⁾` from the seeded init stream and the configured initial weights.
    pub fn init_state(&self) -> Result<ServerState> {
        let mut stream = keyed_stream(self.cfg.seed, 0, SERVER, Purpose::Init, 0);
        let theta = self.model.init_params(&mut stream);
        let samples = if self.cfg.algorithm == Algorithm::Inda {
            Some(SampleWeights {
                weights: SimplexWeights::uniform(self.index.total_samples()),
                losses: self.all_sample_losses(&theta)?,
            })
        } else {
            None
        };
        let lambda = match &samples {
            Some(s) => self.group_mass(s.weights.as_slice()),
            None => self.initial_lambda(),
        };
        Ok(ServerState { theta_tilde_prev: theta.clone(), theta, lambda, round: 0, samples })
    }

    /// Subgroup totals of per-sample weights.
    fn group_mass(&self, w: &[f64]) -> SimplexWeights {
        let v = self
            .index
            .entries
            .iter()
            .map(|e| e.indices.iter().map(|&s| w[self.sample_offsets[e.client] + s]).sum())
            .collect();
        SimplexWeights::from_positive(v).expect("sample weights have positive mass")
    }

    /// Client sampling probabilities (unnormalized) for the current state.
    pub fn client_marginals(&self, state: &ServerState) -> Vec<f64> {
        let lam = state.lambda.as_slice();
        match self.cfg.algorithm {
            Algorithm::Fedavg => (0..self.data.client_count()).map(|i| self.index.client_size(i) as f64).collect(),
            Algorithm::DrfaClient => {
                let mut m = vec![0.0; self.data.client_count()];
                for (j, &i) in self.active.iter().enumerate() {
                    m[i] = lam[j];
                }
                m
            }
            Algorithm::Inda => {
                let w = state.samples.as_ref().expect("inda state").weights.as_slice();
                (0..self.data.client_count())
                    .map(|i| w[self.sample_offsets[i]..self.sample_offsets[i + 1]].iter().sum())
                    .collect()
            }
            _ => self.index.client_marginals(lam),
        }
    }

    fn local_update(
        &self,
        state: &ServerState,
        client: usize,
        occurrence: u32,
        local_iters: usize,
        eta: f64,
        snapshot_at: Option<usize>,
    ) -> Result<LocalResult> {
        let c = &self.data.clients[client];
        let mut stream = keyed_stream(self.cfg.seed, state.round, client as u64, Purpose::Local, occurrence);
        let range = self.index.client_entries(client);
        let members: Vec<&[usize]> = self.index.entries[range.clone()].iter().map(|e| e.indices.as_slice()).collect();
        let group_weights: Vec<f64> =
            state.lambda.as_slice().get(range.clone()).map(<[f64]>::to_vec).unwrap_or_default();
        let sampler = match self.cfg.algorithm {
            Algorithm::Fedavg | Algorithm::DrfaClient => LocalSampler::Uniform,
            Algorithm::Inda => LocalSampler::Samples {
                weights: &state.samples.as_ref().expect("inda state").weights.as_slice()
                    [self.sample_offsets[client]..self.sample_offsets[client + 1]],
            },
            _ => LocalSampler::Groups { weights: &group_weights, members: &members },
        };
        local_sgd(
            self.model,
            &state.theta,
            c,
            self.data.feature_dim,
            sampler,
            local_iters,
            eta,
            self.cfg.batch_size,
            snapshot_at,
            &mut stream,
        )
    }

    fn sampled_with_occurrence(sampled: &[usize]) -> Vec<(usize, u32)> {
        let mut seen = std::collections::HashMap::new();
        sampled
            .iter()
            .map(|&i| {
                let n = seen.entry(i).or_insert(0u32);
                *n += 1;
                (i, *n - 1)
            })
            .collect()
    }

    fn run_parallel<T: Send>(&self, f: impl Fn() -> T + Send) -> T {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    /// One round of the configured variant; advances `state` in place.
    pub fn run_round(&self, state: &mut ServerState) -> Result<RoundOutcome> {
        let cfg = &self.cfg;
        let (beta_theta, beta_lambda) = cfg.effective_momentum();
        let round = state.round;
        let marginals = self.client_marginals(state);
        let sampled = sample_clients(
            &marginals,
            cfg.clients_per_round,
            &mut keyed_stream(cfg.seed, round, SERVER, Purpose::ClientSampling, 0),
        )?;
        let t_prime =
            keyed_stream(cfg.seed, round, SERVER, Purpose::SnapshotIndex, 0).random_range(1..=cfg.local_iters);

        let jobs = Self::sampled_with_occurrence(&sampled);
        let snapshot_at = (cfg.algorithm != Algorithm::Fedavg).then_some(t_prime);
        let shared: &ServerState = state;
        let results: Vec<Result<(usize, LocalResult)>> = self.run_parallel(|| {
            jobs.par_iter()
                .map(|&(i, occ)| {
                    self.local_update(shared, i, occ, cfg.local_iters, cfg.eta, snapshot_at).map(|r| (i, r))
                })
                .collect()
        });
        let results: Vec<(usize, LocalResult)> = results.into_iter().collect::<Result<_>>()?;

        let finals: Vec<(usize, ModelParams)> = results.iter().map(|(i, r)| (*i, r.last.clone())).collect();
        let theta_tilde = aggregate_by_client(&finals)?;
        let before = state.theta.as_slice().to_vec();
        let theta = momentum_params(&theta_tilde, &state.theta_tilde_prev, beta_theta)?;
        let theta_step =
            ThetaStep { before, aggregated: theta_tilde.as_slice().to_vec(), after: theta.as_slice().to_vec() };
        state.theta = theta;
        state.theta_tilde_prev = theta_tilde;

        let mut outcome =
            RoundOutcome { sampled, t_prime, evaluated: Vec::new(), v: Vec::new(), mask: Vec::new(), theta_step };
        if cfg.algorithm != Algorithm::Fedavg {
            let snaps: Vec<(usize, ModelParams)> =
                results.iter().map(|(i, r)| (*i, r.snapshot.clone().expect("snapshot requested"))).collect();
            let theta_snap = aggregate_by_client(&snaps)?;
            let evaluated = sample_eval_clients(
                &self.active,
                cfg.clients_per_round,
                &mut keyed_stream(cfg.seed, round, SERVER, Purpose::EvalSampling, 0),
            );
            let losses = group_losses(
                self.model,
                &theta_snap,
                &self.index,
                self.data,
                cfg.loss_batch,
                &evaluated,
                cfg.seed,
                round,
            )?;
            self.update_weights(state, &losses, &evaluated, beta_lambda, &theta_snap)?;
            outcome.evaluated = evaluated;
            outcome.v = losses.values;
            outcome.mask = losses.mask;
        }
        state.round += 1;
        Ok(outcome)
    }

    fn update_weights(
        &self,
        state: &mut ServerState,
        losses: &GroupLosses,
        evaluated: &[usize],
        beta_lambda: f64,
        theta_snap: &ModelParams,
    ) -> Result<()> {
        let cfg = &self.cfg;
        let step = cfg.gamma * cfg.local_iters as f64;
        let tilde = match cfg.algorithm {
            Algorithm::Fmda | Algorithm::FmdaM => {
                mirror_step_masked(&state.lambda, &losses.values, step, &losses.mask)?.weights
            }
            Algorithm::DrfaGroup => {
                let lam = state.lambda.as_slice();
                project_simplex(&lam.iter().zip(&losses.values).map(|(l, v)| l + step * v).collect::<Vec<_>>())?
            }
            Algorithm::DrfaClient => {
                let lam = state.lambda.as_slice();
                let shifted: Vec<f64> = self
                    .active
                    .iter()
                    .enumerate()
                    .map(|(j, &i)| {
                        let v: f64 = self
                            .index
                            .client_entries(i)
                            .map(|g| {
                                self.index.entries[g].size as f64 / self.index.client_size(i) as f64 * losses.values[g]
                            })
                            .sum();
                        lam[j] + step * v
                    })
                    .collect();
                project_simplex(&shifted)?
            }
            Algorithm::Inda => return self.update_sample_weights(state, losses, evaluated, beta_lambda, theta_snap),
            Algorithm::Fedavg => return Ok(()),
        };
        state.lambda = momentum_weights(&state.lambda, &tilde, beta_lambda)?;
        Ok(())
    }

    fn update_sample_weights(
        &self,
        state: &mut ServerState,
        losses: &GroupLosses,
        evaluated: &[usize],
        beta_lambda: f64,
        theta_snap: &ModelParams,
    ) -> Result<()> {
        let samples = state.samples.as_mut().expect("inda state");
        if self.index.total_samples() <= INDA_EXACT_LIMIT {
            for &i in evaluated {
                let c = &self.data.clients[i];
                let batch =
                    Batch::gather(&c.features, &c.labels, self.data.feature_dim, &(0..c.len()).collect::<Vec<_>>());
                for (s, e) in self.model.evaluate(theta_snap.as_slice(), &batch)?.iter().enumerate() {
                    samples.losses[self.sample_offsets[i] + s] = e.loss;
                }
            }
        } else {
            for &(j, s, loss) in &losses.samples {
                samples.losses[self.sample_offsets[self.index.entries[j].client] + s] = loss;
            }
        }
        let base = SimplexWeights::uniform(samples.losses.len());
        let tilde = tilt_weights_kl(&base, &samples.losses, self.cfg.ind_radius)?;
        samples.weights = momentum_weights(&samples.weights, &tilde, beta_lambda)?;
        let mass = self.group_mass(samples.weights.as_slice());
        state.lambda = mass;
        Ok(())
    }

    /// One draw of the round's stochastic aggregate gradient at a frozen state:
    /// `K` clients sampled as in training, one minibatch gradient each, averaged.
    pub fn sampled_gradient(&self, state: &ServerState, draw: u64) -> Result<Vec<f64>> {
        let marginals = self.client_marginals(state);
        let mut stream = keyed_stream(self.cfg.seed, draw, SERVER, Purpose::ClientSampling, 1);
        let sampled = sample_clients(&marginals, self.cfg.clients_per_round, &mut stream)?;
        let probe = ServerState { round: draw, ..state.clone() };
        let mut sum = vec![0.0; state.theta.len()];
        for (i, occ) in Self::sampled_with_occurrence(&sampled) {
            // one unit step: θ − θ' is the minibatch gradient
            let r = self.local_update(&probe, i, occ, 1, 1.0, None)?;
            for ((s, before), after) in sum.iter_mut().zip(state.theta.as_slice()).zip(r.last.as_slice()) {
                *s += before - after;
            }
        }
        let k = sampled.len() as f64;
        Ok(sum.into_iter().map(|s| s / k).collect())
    }

    /// `Σ_j λ_j ∇f_j(θ)` with full-subgroup gradients.
    pub fn exact_weighted_gradient(&self, state: &ServerState) -> Result<Vec<f64>> {
        let mut out = vec![0.0; state.theta.len()];
        let mut grad = vec![0.0; state.theta.len()];
        for (e, &l) in self.index.entries.iter().zip(state.lambda.as_slice()) {
            let c = &self.data.clients[e.client];
            let batch = Batch::gather(&c.features, &c.labels, self.data.feature_dim, &e.indices);
            self.model.loss_grad(state.theta.as_slice(), &batch, &mut grad)?;
            for (o, g) in out.iter_mut().zip(&grad) {
                *o += l * g;
            }
        }
        Ok(out)
    }

    /// Runs `cfg.R` rounds from the initial state.
    pub fn train(&self, opts: TrainOptions<'_>) -> Result<RunTrace> {
        let state = self.init_state()?;
        self.train_from(state, self.cfg.rounds, opts)
    }

    /// Runs `rounds` further rounds from `state`.
    pub fn train_from(&self, mut state: ServerState, rounds: usize, opts: TrainOptions<'_>) -> Result<RunTrace> {
        let eval = opts.eval.unwrap_or(self.data);
        let mut records = Vec::with_capacity(rounds);
        let mut theta_steps = Vec::new();
        let mut warned = false;
        for _ in 0..rounds {
            let out = self.run_round(&mut state)?;
            if !warned && state.lambda.max() > CONCENTRATION_WARNING {
                warn!("round {}: a single weight exceeds {CONCENTRATION_WARNING}", state.round);
                warned = true;
            }
            let ev = evaluate_groups(self.model, &state.theta, eval)?;
            records.push(RoundRecord {
                round: state.round,
                theta_digest: state.theta.digest(),
                lambda: state.lambda.as_slice().to_vec(),
                v: out.v,
                mask: out.mask,
                sampled: out.sampled,
                t_prime: out.t_prime,
                attribute: ev.attribute_report()?,
                client: ev.client_report()?,
                max_group_loss: ev.max_group_loss(),
            });
            if opts.record_theta {
                theta_steps.push(out.theta_step);
            }
        }
        Ok(RunTrace { records, final_state: state, theta_steps })
    }

    pub fn checkpoint(&self, state: &ServerState) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            algorithm: self.cfg.algorithm,
            round: state.round,
            theta: state.theta.as_slice().to_vec(),
            lambda: state.lambda.as_slice().to_vec(),
            group_index_digest: self.index.digest(),
            config_digest: self.cfg.digest(),
            rng_key: self.cfg.seed,
            theta_tilde_prev: state.theta_tilde_prev.as_slice().to_vec(),
            samples: state.samples.clone(),
            model: None,
        }
    }

    /// Rebuilds the state stored in `ckpt`, refusing a checkpoint written for
    /// different data or a different configuration.
    pub fn resume(&self, ckpt: &Checkpoint) -> Result<ServerState> {
        if ckpt.group_index_digest != self.index.digest() {
            return Err(Error::Data("checkpoint was written for a different dataset".into()));
        }
        if ckpt.config_digest != self.cfg.digest()
            || ckpt.algorithm != self.cfg.algorithm
            || ckpt.rng_key != self.cfg.seed
        {
            return Err(Error::Config("checkpoint was written for a different configuration".into()));
        }
        let theta = ModelParams::new(ckpt.theta.clone())?;
        let theta_tilde_prev = ModelParams::new(ckpt.theta_tilde_prev.clone())?;
        if theta.len() != self.model.param_len() || theta_tilde_prev.len() != theta.len() {
            return Err(mismatch("checkpoint parameters do not fit the model"));
        }
        let lambda = SimplexWeights::new(ckpt.lambda.clone())?;
        if lambda.len() != self.initial_lambda().len() {
            return Err(mismatch("checkpoint weights do not fit the group index"));
        }
        Ok(ServerState { theta, theta_tilde_prev, lambda, round: ckpt.round, samples: ckpt.samples.clone() })
    }
}

/// Convenience wrapper: `cfg.R` rounds with metrics on the training data.
pub fn train(cfg: &RunConfig, model: &dyn Objective, data: &FederatedDataset) -> Result<RunTrace> {
    Trainer::new(cfg.clone(), model, data)?.train(TrainOptions::default())
}

/// Per-client reports of `theta` on each named unseen setting.
pub fn evaluate_agnostic(
    model: &dyn Objective,
    theta: &ModelParams,
    settings: &[(String, &FederatedDataset)],
) -> Result<Vec<MetricsReport>> {
    settings
        .iter()
        .map(|(name, data)| {
            if theta.len() != model.param_len() {
                return Err(mismatch("parameters do not fit the model"));
            }
            let mut r = evaluate_groups(model, theta, data)?.report(Level::Agnostic)?;
            r.setting = Some(name.clone());
            Ok(r)
        })
        .collect()
}
