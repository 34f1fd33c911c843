//! Single-process federated learning round simulator.
//!
//! Clients hold index lists into a shared dataset. Each round: broadcast,
//! local SGD steps on sequential mini-batches, upload, average. The server
//! side estimates per-client gradients from parameter deltas; those estimates
//! are what every attack consumes. Round logs keep the true batches purely
//! for evaluation — nothing on the attack path reads them.

use crate::data::{Batch, Dataset};
use crate::defense::DefenseConfig;
use crate::error::{Error, Result};
use crate::metrics::image_tv;
use crate::model::{loss_and_param_grads, GradientVector, Model, ParameterSet};
use crate::rng::{derive_seed, Rng};
use alloc::format;
use alloc::vec::Vec;

/// How the dataset is split across clients.
#[derive(Debug, Clone, PartialEq)]
pub enum PartitionMode {
    Iid,
    /// Each client sees exactly this many distinct classes.
    LabelSkew { classes_per_client: usize },
    /// Explicit per-client sample counts; must sum to the dataset size.
    QuantitySkew { sizes: Vec<usize> },
    /// Clients are grouped into total-variation percentile bands.
    FeatureSkew { groups: usize },
    /// Class proportions per client drawn from Dirichlet(alpha).
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub clients: usize,
    pub seed: u64,
}

/// One client's view of the dataset.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

/// Assign every sample to exactly one client.
pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    let n = dataset.len();
    let k = spec.clients;
    if k == 0 {
        return Err(Error::infeasible("need at least one client"));
    }
    if n < k {
        return Err(Error::infeasible(format!("{n} samples for {k} clients")));
    }
    let mut rng = Rng::from_seed(derive_seed(spec.seed, "partition", 0));
    let assignments: Vec<Vec<usize>> = match &spec.mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            let mut out = vec![Vec::new(); k];
            for (pos, i) in idx.into_iter().enumerate() {
                out[pos % k].push(i);
            }
            out
        }
        PartitionMode::LabelSkew { classes_per_client } => {
            label_skew(dataset, k, *classes_per_client, &mut rng)?
        }
        PartitionMode::QuantitySkew { sizes } => {
            if sizes.len() != k {
                return Err(Error::infeasible("quantity skew needs one size per client"));
            }
            if sizes.iter().any(|&s| s == 0) {
                return Err(Error::infeasible("quantity skew sizes must be positive"));
            }
            if sizes.iter().sum::<usize>() != n {
                return Err(Error::infeasible(format!(
                    "quantity skew sizes sum to {}, dataset has {n}",
                    sizes.iter().sum::<usize>()
                )));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            let mut out = Vec::with_capacity(k);
            let mut cursor = 0;
            for &s in sizes {
                out.push(idx[cursor..cursor + s].to_vec());
                cursor += s;
            }
            out
        }
        PartitionMode::FeatureSkew { groups } => feature_skew(dataset, k, *groups, &mut rng)?,
        PartitionMode::Dirichlet { alpha } => {
            if *alpha <= 0.0 {
                return Err(Error::infeasible("dirichlet alpha must be > 0"));
            }
            dirichlet_split(dataset, k, *alpha, &mut rng)?
        }
    };
    let mut out = Vec::with_capacity(k);
    for (client_id, mut indices) in assignments.into_iter().enumerate() {
        indices.sort_unstable();
        if indices.is_empty() {
            return Err(Error::infeasible(format!("client {client_id} received no samples")));
        }
        out.push(ClientDataset { client_id, indices });
    }
    Ok(out)
}

fn label_skew(
    dataset: &Dataset,
    clients: usize,
    classes_per_client: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    let c = dataset.classes;
    if classes_per_client == 0 || classes_per_client > c {
        return Err(Error::infeasible(format!(
            "label skew of {classes_per_client} classes with {c} available"
        )));
    }
    // deal classes to clients round-robin over a shuffled class deck so every
    // class is owned by at least one client when clients*cpc >= classes
    let mut deck: Vec<usize> = (0..c).collect();
    rng.shuffle(&mut deck);
    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); clients];
    let mut deck_pos = 0usize;
    for client_classes in owned.iter_mut() {
        while client_classes.len() < classes_per_client {
            let class = deck[deck_pos % c];
            deck_pos += 1;
            if !client_classes.contains(&class) {
                client_classes.push(class);
            } else {
                // class deck exhausted for this client; reshuffle view
                let class = (0..c).find(|cl| !client_classes.contains(cl)).unwrap();
                client_classes.push(class);
            }
        }
    }
    // hand each sample to a uniformly chosen client that owns its class
    let mut out = vec![Vec::new(); clients];
    for (i, &label) in dataset.labels.iter().enumerate() {
        let owners: Vec<usize> =
            (0..clients).filter(|&cl| owned[cl].contains(&label)).collect();
        if owners.is_empty() {
            // no owner drew this class; give it to a deterministic client so
            // the partition stays exact
            out[label % clients].push(i);
        } else {
            out[owners[rng.below(owners.len())]].push(i);
        }
    }
    Ok(out)
}

fn feature_skew(
    dataset: &Dataset,
    clients: usize,
    groups: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    if groups == 0 || groups > clients {
        return Err(Error::infeasible(format!(
            "feature skew with {groups} groups for {clients} clients"
        )));
    }
    // sort samples by total variation, carve into percentile bands
    let mut by_tv: Vec<usize> = (0..dataset.len()).collect();
    let tvs: Vec<f64> = dataset
        .images
        .iter()
        .map(|img| image_tv(img))
        .collect::<Result<_>>()?;
    by_tv.sort_by(|&a, &b| {
        tvs[a].partial_cmp(&tvs[b]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let n = dataset.len();
    let mut out = vec![Vec::new(); clients];
    // clients are spread over groups round-robin; samples within a band are
    // dealt uniformly among that band's clients
    for (rank, &sample) in by_tv.iter().enumerate() {
        let group = (rank * groups / n).min(groups - 1);
        let members: Vec<usize> = (0..clients).filter(|cl| cl % groups == group).collect();
        out[members[rng.below(members.len())]].push(sample);
    }
    Ok(out)
}

fn dirichlet_split(
    dataset: &Dataset,
    clients: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); clients];
    for class in 0..dataset.classes {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == class)
            .collect();
        rng.shuffle(&mut members);
        let weights = rng.dirichlet(alpha, clients);
        // largest-remainder rounding keeps the split exact
        let m = members.len();
        let mut quota: Vec<(usize, f64)> = weights
            .iter()
            .enumerate()
            .map(|(cl, &w)| {
                let exact = w * m as f64;
                (cl, exact)
            })
            .collect();
        let mut counts: Vec<usize> =
            quota.iter().map(|&(_, e)| crate::math::floor(e) as usize).collect();
        let mut assigned: usize = counts.iter().sum();
        quota.sort_by(|a, b| {
            let fa = a.1 - crate::math::floor(a.1);
            let fb = b.1 - crate::math::floor(b.1);
            fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
        });
        let mut qi = 0;
        while assigned < m {
            counts[quota[qi % clients].0] += 1;
            assigned += 1;
            qi += 1;
        }
        let mut cursor = 0;
        for (cl, &count) in counts.iter().enumerate() {
            out[cl].extend_from_slice(&members[cursor..cursor + count]);
            cursor += count;
        }
    }
    // an empty client steals one sample from the largest, keeping the
    // partition exact and sizes positive
    loop {
        let empty = match out.iter().position(|v| v.is_empty()) {
            Some(e) => e,
            None => break,
        };
        let largest = (0..clients).max_by_key(|&cl| out[cl].len()).unwrap();
        if out[largest].len() <= 1 {
            return Err(Error::infeasible("dirichlet split cannot fill all clients"));
        }
        let moved = out[largest].pop().unwrap();
        out[empty].push(moved);
    }
    Ok(out)
}

/// Local SGD: `steps` sequential mini-batches without replacement, reshuffled
/// each epoch; the shuffle is fixed per (seed, client, epoch) so runs replay.
#[derive(Debug, Clone)]
pub struct LocalTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub client_id: usize,
    pub round: usize,
}

pub struct LocalTrainOutcome {
    pub params: ParameterSet,
    /// The mini-batches consumed, in order. Evaluation-only.
    pub batches: Vec<Batch>,
}

pub fn local_train(
    model: &Model,
    params: &ParameterSet,
    dataset: &Dataset,
    client: &ClientDataset,
    cfg: &LocalTrainConfig,
    defense: &DefenseConfig,
) -> Result<LocalTrainOutcome> {
    if client.indices.is_empty() {
        return Err(Error::infeasible("client has no data"));
    }
    if cfg.steps == 0 {
        return Err(Error::infeasible("local training needs at least one step"));
    }
    if cfg.batch_size == 0 || cfg.batch_size > client.indices.len() {
        return Err(Error::infeasible(format!(
            "batch size {} for client dataset of {}",
            cfg.batch_size,
            client.indices.len()
        )));
    }
    let mut w = params.clone();
    let mut batches = Vec::with_capacity(cfg.steps);
    let per_epoch = client.indices.len() / cfg.batch_size;
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0usize;
    let per_step = defense.applies_per_step();
    for step in 0..cfg.steps {
        let slot = step % per_epoch.max(1);
        if slot == 0 {
            order = client.indices.clone();
            let mut rng = Rng::from_seed(derive_seed(
                cfg.seed,
                "batch-order",
                ((cfg.round as u64) << 40) | ((cfg.client_id as u64) << 20) | epoch as u64,
            ));
            rng.shuffle(&mut order);
            epoch += 1;
        }
        let lo = slot * cfg.batch_size;
        let batch = dataset.batch_of(&order[lo..lo + cfg.batch_size])?;
        let lg = loss_and_param_grads(model, &w, &batch.images, &batch.labels)?;
        let mut gflat = lg.grads.flatten();
        if per_step {
            gflat = defense.apply(&gflat, cfg.round, step as u64)?;
        }
        let wflat = w.flatten();
        let new_flat: Vec<f64> =
            wflat.iter().zip(&gflat).map(|(&p, &g)| p - cfg.lr * g).collect();
        w = w.unflatten(&new_flat)?;
        batches.push(batch);
    }
    if !per_step && !matches!(defense.kind, crate::defense::DefenseKind::None) {
        // defend the outgoing update by treating the scaled delta as a
        // pseudo-gradient, then rebuilding the parameters from it
        let ghat = estimate_gradient(params, &w, cfg.lr, cfg.steps)?;
        let defended = defense.apply(&ghat.flatten(), cfg.round, u64::MAX)?;
        let scale = cfg.lr * cfg.steps as f64;
        let old = params.flatten();
        let new_flat: Vec<f64> =
            old.iter().zip(&defended).map(|(&p, &g)| p - scale * g).collect();
        w = params.unflatten(&new_flat)?;
    }
    Ok(LocalTrainOutcome { params: w, batches })
}

/// The server's first-order estimator: `(w_old - w_new) / (lr * steps)`.
/// Exact for one plain SGD step; the multi-step estimation error is exactly
/// what the local-step experiments measure.
pub fn estimate_gradient(
    w_old: &ParameterSet,
    w_new: &ParameterSet,
    lr: f64,
    steps: usize,
) -> Result<GradientVector> {
    if lr <= 0.0 || steps == 0 {
        return Err(Error::infeasible("estimate needs lr > 0 and steps >= 1"));
    }
    let scale = 1.0 / (lr * steps as f64);
    w_old.zip_with(w_new, |old, new| (old - new) * scale)
}

/// Element-wise mean of parameter sets.
pub fn aggregate(params: &[ParameterSet]) -> Result<ParameterSet> {
    if params.is_empty() {
        return Err(Error::infeasible("aggregate of empty list"));
    }
    let inv = 1.0 / params.len() as f64;
    let mut acc = params[0].map(|v| v * inv);
    for p in &params[1..] {
        acc = acc.zip_with(p, |a, b| a + b * inv)?;
    }
    Ok(acc)
}

/// Per-client record inside a logged round.
pub struct ClientRound {
    pub client_id: usize,
    pub w_new: ParameterSet,
    pub ghat: GradientVector,
    /// True data the client trained on. Evaluation only; the attack path
    /// never reads it.
    pub batches: Vec<Batch>,
}

/// Everything the server remembers about one attacked round.
pub struct RoundLog {
    pub round: usize,
    pub w_old: ParameterSet,
    pub clients: Vec<ClientRound>,
    pub aggregated: ParameterSet,
}

#[derive(Debug, Clone)]
pub struct FlConfig {
    pub rounds: usize,
    /// Clients drawn per round; `None` means all participate.
    pub participants: Option<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Rounds whose logs are retained for attack/evaluation.
    pub attack_rounds: Vec<usize>,
    pub seed: u64,
}

/// Run the FL protocol, returning logs for the configured attack rounds.
pub fn run_rounds(
    model: &Model,
    init: &ParameterSet,
    dataset: &Dataset,
    clients: &[ClientDataset],
    defense: &DefenseConfig,
    cfg: &FlConfig,
) -> Result<Vec<RoundLog>> {
    for &r in &cfg.attack_rounds {
        if r >= cfg.rounds {
            return Err(Error::infeasible(format!(
                "attack round {r} outside the {} simulated rounds",
                cfg.rounds
            )));
        }
    }
    let mut w = init.clone();
    let mut logs = Vec::new();
    for round in 0..cfg.rounds {
        let participant_ids: Vec<usize> = match cfg.participants {
            None => (0..clients.len()).collect(),
            Some(k) => {
                let k = k.min(clients.len());
                let mut rng =
                    Rng::from_seed(derive_seed(cfg.seed, "participants", round as u64));
                rng.sample_without_replacement(clients.len(), k)
            }
        };
        let mut uploads = Vec::with_capacity(participant_ids.len());
        let mut records = Vec::with_capacity(participant_ids.len());
        let log_this = cfg.attack_rounds.contains(&round);
        for &cid in &participant_ids {
            let ltc = LocalTrainConfig {
                steps: cfg.steps,
                batch_size: cfg.batch_size,
                lr: cfg.lr,
                seed: cfg.seed,
                client_id: cid,
                round,
            };
            let outcome = local_train(model, &w, dataset, &clients[cid], &ltc, defense)?;
            if log_this {
                let ghat = estimate_gradient(&w, &outcome.params, cfg.lr, cfg.steps)?;
                records.push(ClientRound {
                    client_id: cid,
                    w_new: outcome.params.clone(),
                    ghat,
                    batches: outcome.batches,
                });
            }
            uploads.push(outcome.params);
        }
        let aggregated = aggregate(&uploads)?;
        if log_this {
            logs.push(RoundLog { round, w_old: w.clone(), clients: records, aggregated: aggregated.clone() });
        }
        w = aggregated;
    }
    Ok(logs)
}
