//! The FedAvg/FOFedAvg round engine: server state, client sampling, local
//! training, weighted aggregation, and byte-accurate communication metering.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{derive_stream, effective_step, lr_schedule, FracConfig};
use crate::objectives::{Objective, ParamVector};
use crate::optimizers::sgd_step;
use crate::partition::{epoch_batches, ClientShard, Dataset};

/// Algorithm selection with its own hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum AlgorithmCfg {
    /// Fractional-order client updates; round 0 bootstraps with plain SGD.
    FoFedAvg { frac: FracConfig },
    /// Plain local SGD with rate `eta`, or `eta / sqrt(t+1)` when decaying.
    FedAvg { eta: f64, eta_decay: bool },
    /// FedAvg plus a proximal pull toward the broadcast model.
    FedProx {
        eta: f64,
        eta_decay: bool,
        prox_mu: f64,
    },
}

impl AlgorithmCfg {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmCfg::FoFedAvg { .. } => "fofedavg",
            AlgorithmCfg::FedAvg { .. } => "fedavg",
            AlgorithmCfg::FedProx { .. } => "fedprox",
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            AlgorithmCfg::FoFedAvg { frac } => Some(frac.alpha()),
            _ => None,
        }
    }
}

/// Whether the server re-broadcasts the previous-round global model or
/// clients cache the last one they received.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommMode {
    ClientCachesPrev,
    BroadcastPrev,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub algorithm: AlgorithmCfg,
    pub num_clients: usize,
    pub client_fraction: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub rounds: u64,
    pub target_accuracy: Option<f64>,
    pub comm_mode: CommMode,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Usage("num_clients must be at least 1".into()));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(Error::Usage(format!(
                "client_fraction = {} must lie in (0, 1]",
                self.client_fraction
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::Usage("local_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Usage("batch_size must be at least 1".into()));
        }
        if let AlgorithmCfg::FedAvg { eta, .. } | AlgorithmCfg::FedProx { eta, .. } =
            &self.algorithm
        {
            if !(*eta > 0.0) {
                return Err(Error::Usage(format!("eta = {eta} must be positive")));
            }
        }
        if let AlgorithmCfg::FedProx { prox_mu, .. } = &self.algorithm {
            if !(*prox_mu >= 0.0) {
                return Err(Error::Usage(format!("prox_mu = {prox_mu} must be >= 0")));
            }
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Usage(format!(
                    "target_accuracy = {t} must lie in [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Server-side view between rounds. The previous-round global model is the
/// broadcast memory anchor; absent only at round 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub theta_global: ParamVector,
    pub theta_global_prev: Option<ParamVector>,
    pub round: u64,
}

/// What a client returns to the server after local training. `clipped_steps`
/// counts cap events, a fofedavg-only diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdateResult {
    pub client_id: usize,
    pub theta_local: ParamVector,
    pub n_k: usize,
    pub local_steps_taken: usize,
    pub bytes_up: u64,
    pub clipped_steps: u64,
}

/// Sample `m = max(floor(C*K), 1)` distinct clients from the round-labeled
/// stream; returned sorted by id.
pub fn sample_clients(k: usize, c: f64, round: u64, root_seed: u64) -> Vec<usize> {
    let m = (((c * k as f64).floor() as usize).max(1)).min(k);
    let mut pool: Vec<usize> = (0..k).collect();
    let mut rng = derive_stream(root_seed, "sample", round).rng();
    // partial Fisher-Yates
    for i in 0..m {
        let j = rand::Rng::random_range(&mut rng, i..pool.len());
        pool.swap(i, j);
    }
    let mut chosen = pool[..m].to_vec();
    chosen.sort_unstable();
    chosen
}

/// One client's local training pass for the current round.
///
/// Round 0 (and the fedavg/fedprox baselines) run plain SGD; from round 1 on,
/// fofedavg rescales every mini-batch step by the fractional factor, with the
/// trajectory norm recomputed against the previous-round global model before
/// each step.
pub fn client_update(
    shard: &ClientShard,
    server: &ServerState,
    cfg: &FedConfig,
    obj: &Objective,
    root_seed: u64,
) -> Result<ClientUpdateResult> {
    let t = server.round;
    let mut theta = server.theta_global.clone();
    let anchor = match (&cfg.algorithm, t) {
        (AlgorithmCfg::FoFedAvg { .. }, t) if t >= 1 => {
            Some(server.theta_global_prev.as_ref().ok_or_else(|| {
                Error::Usage(format!("round {t} is missing the previous global model"))
            })?)
        }
        _ => None,
    };

    let mut clipped = 0u64;
    let mut steps = 0usize;
    for epoch in 0..cfg.local_epochs {
        let stream = derive_stream(
            root_seed,
            &format!("batch.c{}.e{}", shard.client_id(), epoch),
            t,
        );
        for (batch_no, batch) in epoch_batches(shard.indices(), cfg.batch_size, &stream)
            .into_iter()
            .enumerate()
        {
            let tag_err = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!(
                    "client {} round {t} epoch {epoch} batch {batch_no}: {m}",
                    shard.client_id()
                )),
                other => other,
            };
            let mut grad = obj.eval(&theta, &batch).map_err(tag_err)?.grad;

            let lr = match &cfg.algorithm {
                AlgorithmCfg::FoFedAvg { frac } => {
                    if let Some(anchor) = anchor {
                        let s = theta.distance(anchor);
                        let es = effective_step(frac, t, s);
                        clipped += u64::from(es.clipped);
                        es.value
                    } else {
                        frac.mu0()
                    }
                }
                AlgorithmCfg::FedAvg { eta, eta_decay } => {
                    if *eta_decay {
                        lr_schedule(*eta, t)
                    } else {
                        *eta
                    }
                }
                AlgorithmCfg::FedProx {
                    eta,
                    eta_decay,
                    prox_mu,
                } => {
                    for ((g, local), global) in grad
                        .values_mut()
                        .iter_mut()
                        .zip(theta.values())
                        .zip(server.theta_global.values())
                    {
                        *g += prox_mu * (local - global);
                    }
                    if *eta_decay {
                        lr_schedule(*eta, t)
                    } else {
                        *eta
                    }
                }
            };
            theta = sgd_step(&theta, &grad, lr).map_err(tag_err)?;
            steps += 1;
        }
    }

    Ok(ClientUpdateResult {
        client_id: shard.client_id(),
        theta_local: theta,
        n_k: shard.n_k(),
        local_steps_taken: steps,
        bytes_up: (server.theta_global.dim() * 4) as u64,
        clipped_steps: clipped,
    })
}

/// `n_k`-weighted mean of client models, summed in client-id order.
pub fn aggregate(results: &[ClientUpdateResult]) -> Result<ParamVector> {
    if results.is_empty() {
        return Err(Error::Usage(
            "aggregate needs at least one client result".into(),
        ));
    }
    if results.len() == 1 {
        return Ok(results[0].theta_local.clone());
    }
    let dim = results[0].theta_local.dim();
    if results.iter().any(|r| r.theta_local.dim() != dim) {
        return Err(Error::Usage(
            "aggregate dimension mismatch across clients".into(),
        ));
    }
    let mut order: Vec<&ClientUpdateResult> = results.iter().collect();
    order.sort_by_key(|r| r.client_id);
    let total: usize = order.iter().map(|r| r.n_k).sum();
    let mut acc = vec![0.0f64; dim];
    for r in order {
        let w = r.n_k as f64 / total as f64;
        for (a, v) in acc.iter_mut().zip(r.theta_local.values()) {
            *a += w * v;
        }
    }
    ParamVector::new(acc)
}

/// Per-round wire bytes (32-bit floats on the wire).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommBytes {
    pub down: u64,
    pub up: u64,
}

impl CommBytes {
    pub fn total(&self) -> u64 {
        self.down + self.up
    }
}

/// Downlink is `m*d*4`, doubled from round 1 on in broadcast-prev mode
/// (the server ships both the current and the previous global model);
/// uplink is always `m*d*4`.
pub fn comm_meter(
    algorithm: &AlgorithmCfg,
    comm_mode: CommMode,
    t: u64,
    m: usize,
    d: usize,
) -> CommBytes {
    let unit = (m * d * 4) as u64;
    let down = match (algorithm, comm_mode) {
        (AlgorithmCfg::FoFedAvg { .. }, CommMode::BroadcastPrev) if t >= 1 => 2 * unit,
        _ => unit,
    };
    CommBytes { down, up: unit }
}

/// Metrics recorded after each communication round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub sampled: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub global_grad_norm: f64,
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub bytes_cumulative: u64,
    pub clipped_steps: u64,
    pub wall_millis: f64,
}

#[derive(Debug, Clone)]
pub struct FedRunOutput {
    pub records: Vec<RoundRecord>,
    /// Global model after each round (`rounds` entries).
    pub round_thetas: Vec<ParamVector>,
    pub final_theta: ParamVector,
    /// First round index whose test accuracy reached the target, if any.
    pub target_round: Option<u64>,
}

/// Drive `cfg.rounds` communication rounds. Client updates within a round run
/// on the ambient rayon pool; results are aggregated in client-id order, so
/// parallel and sequential execution agree bit for bit.
pub fn run_federation(
    obj: &Objective,
    test: &Dataset,
    shards: &[ClientShard],
    cfg: &FedConfig,
    seed: u64,
) -> Result<FedRunOutput> {
    cfg.validate()?;
    if shards.is_empty() {
        return Err(Error::Usage(
            "run_federation needs at least one shard".into(),
        ));
    }
    if shards.len() != cfg.num_clients {
        return Err(Error::Usage(format!(
            "cfg.num_clients = {} but {} shards were provided",
            cfg.num_clients,
            shards.len()
        )));
    }
    if let Some((i, s)) = shards.iter().enumerate().find(|(i, s)| s.client_id() != *i) {
        return Err(Error::Usage(format!(
            "shards must be ordered by client id: position {i} holds client {}",
            s.client_id()
        )));
    }
    let train_data = obj
        .data()
        .ok_or_else(|| Error::Usage("federation requires a data-bound objective".into()))?
        .clone();
    let test_obj = obj.rebind(std::sync::Arc::new(test.clone()))?;
    let full_train: Vec<usize> = (0..train_data.len()).collect();
    let full_test: Vec<usize> = (0..test.len()).collect();

    let mut server = ServerState {
        theta_global: obj.init_params(&derive_stream(seed, "init", 0)),
        theta_global_prev: None,
        round: 0,
    };

    let mut records = Vec::with_capacity(cfg.rounds as usize);
    let mut round_thetas = Vec::with_capacity(cfg.rounds as usize);
    let mut bytes_cumulative = 0u64;
    let mut target_round = None;

    for t in 0..cfg.rounds {
        let started = Instant::now();
        server.round = t;
        let selected = sample_clients(cfg.num_clients, cfg.client_fraction, t, seed);

        let results: Vec<Result<ClientUpdateResult>> = selected
            .par_iter()
            .map(|&cid| client_update(&shards[cid], &server, cfg, obj, seed))
            .collect();
        let mut updates = Vec::with_capacity(results.len());
        for r in results {
            updates.push(r?);
        }
        let clipped_steps: u64 = updates.iter().map(|u| u.clipped_steps).sum();

        let new_theta = aggregate(&updates)?;
        let comm = comm_meter(
            &cfg.algorithm,
            cfg.comm_mode,
            t,
            selected.len(),
            new_theta.dim(),
        );
        bytes_cumulative += comm.total();

        let train_eval = obj.eval(&new_theta, &full_train)?;
        let test_eval = test_obj.eval(&new_theta, &full_test)?;
        let test_accuracy = test_obj.accuracy(&new_theta)?;

        if target_round.is_none() {
            if let Some(target) = cfg.target_accuracy {
                if test_accuracy >= target {
                    target_round = Some(t);
                }
            }
        }

        server.theta_global_prev = Some(std::mem::replace(&mut server.theta_global, new_theta));
        round_thetas.push(server.theta_global.clone());

        records.push(RoundRecord {
            round: t,
            sampled: selected.len(),
            train_loss: train_eval.loss,
            test_loss: test_eval.loss,
            test_accuracy,
            global_grad_norm: train_eval.grad.norm(),
            bytes_down: comm.down,
            bytes_up: comm.up,
            bytes_cumulative,
            clipped_steps,
            wall_millis: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    Ok(FedRunOutput {
        final_theta: server.theta_global.clone(),
        records,
        round_thetas,
        target_round,
    })
}
