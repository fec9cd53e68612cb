//! The simulation engine: round loop, client sampling, local federated
//! adversarial training with scheduled adversarial ratios, attack injection,
//! aggregation dispatch, evaluation cadence, metrics and checkpoints.

mod config;
mod metrics;

pub use config::{
    AttackSpec, DatasetSpec, ExperimentConfig, ExperimentError, MixSchedule, PartitionSpec,
    DATA_DIR_ENV,
};
pub use metrics::{read_records, write_record, RoundRecord, METRICS_SCHEMA_VERSION};

use crate::aggregation::{self, AggregationRule, ClientUpdate};
use crate::byzantine::{self, DistillationAttackConfig};
use crate::data::{Dataset, Partition};
use crate::evasion::{self, PgdConfig};
use crate::nn::{load_checkpoint, save_checkpoint, ModelParams};
use crate::optim::Optimizer;
use crate::seed;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;
use std::time::Instant;

/// One client's local training for one round: for each minibatch, the first
/// `round(ratio * N)` samples are replaced by PGD adversarial versions
/// crafted against the current local weights, then one optimizer step is
/// taken on the mixed batch. Returns the resulting full weight vector and
/// the client's sample count.
#[allow(clippy::too_many_arguments)]
pub fn local_fat_step(
    global: &ModelParams,
    ds: &Dataset,
    shard: &[usize],
    adv_ratio: f64,
    train_pgd: &PgdConfig,
    opt: &mut Optimizer,
    local_steps: usize,
    batch_size: usize,
    seed_value: u64,
) -> Result<(Vec<f32>, usize), ExperimentError> {
    if shard.is_empty() {
        return Err(ExperimentError::Runtime("empty client shard".into()));
    }
    let mut model = global.clone();
    let mut flat = model.flatten();
    for step in 0..local_steps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, &[step as u64]));
        let batch: Vec<usize> = if shard.len() > batch_size {
            rand::seq::index::sample(&mut rng, shard.len(), batch_size)
                .iter()
                .map(|i| shard[i])
                .collect()
        } else {
            let mut all = shard.to_vec();
            all.shuffle(&mut rng);
            all
        };
        let (mut x, y) = ds.gather(&batch);
        let n = batch.len();
        let k = ((adv_ratio * n as f64).round() as usize).min(n);
        if k > 0 && train_pgd.epsilon > 0.0 {
            let px = x.data.len() / n;
            let mut shape_k = x.shape.clone();
            shape_k[0] = k;
            let x_k = crate::autodiff::Tensor {
                shape: shape_k,
                data: x.data[..k * px].to_vec(),
                requires_grad: false,
                grad: None,
            };
            let adv = evasion::pgd_attack(
                &model,
                &x_k,
                &y[..k],
                train_pgd,
                seed::derive(seed_value, &[step as u64, 0x41]),
            )
            .map_err(|e| ExperimentError::Runtime(format!("train pgd: {e}")))?;
            x.data[..k * px].copy_from_slice(&adv.data);
        }
        let mut g = crate::autodiff::Graph::new();
        let pids = model.insert_leaves(&mut g, true);
        let xid = g.leaf(x);
        let z = model
            .arch
            .forward(&mut g, &pids, xid)
            .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
        let loss = g
            .cross_entropy_logits(z, &y)
            .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
        g.backward(loss).map_err(|e| ExperimentError::Runtime(format!("nan abort: {e}")))?;
        let grads = model.collect_flat_grads(&g, &pids);
        opt.step(&mut flat, &grads);
        model.set_flat(&flat).map_err(|e| ExperimentError::Runtime(e.to_string()))?;
    }
    Ok((flat, shard.len()))
}

/// Evaluation bundle for one model state.
#[derive(Debug, Clone, Copy)]
pub struct EvalOutcome {
    pub clean_acc: f64,
    pub clean_acc_client_avg: Option<f64>,
    pub adv_pgd: f64,
    pub adv_logit_scaled: Option<f64>,
    pub adv_transfer: Option<f64>,
}

/// Evaluate clean accuracy, PGD robustness, and the optional masking-aware
/// evaluators (logit-scaled PGD, black-box transfer) on a test set.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    params: &ModelParams,
    test: &Dataset,
    client_shards: Option<&Partition>,
    eval_pgd: &PgdConfig,
    logit_scale_t: Option<f64>,
    surrogate: Option<&ModelParams>,
    seed_value: u64,
    batch_size: usize,
) -> Result<EvalOutcome, ExperimentError> {
    let (clean, adv) =
        evasion::evaluate_robustness(params, test, eval_pgd, seed::derive(seed_value, &[0]), batch_size)
            .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
    let adv_logit = match logit_scale_t {
        Some(t) => {
            let cfg = eval_pgd.with_logit_scale(t);
            let (_, a) = evasion::evaluate_robustness(
                params,
                test,
                &cfg,
                seed::derive(seed_value, &[1]),
                batch_size,
            )
            .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
            Some(a)
        }
        None => None,
    };
    let adv_transfer = match surrogate {
        Some(s) => Some(
            evasion::transfer_attack(
                s,
                params,
                test,
                eval_pgd,
                seed::derive(seed_value, &[2]),
                batch_size,
            )
            .map_err(|e| ExperimentError::Runtime(e.to_string()))?,
        ),
        None => None,
    };
    let client_avg = match client_shards {
        Some(parts) => {
            let mut accs = Vec::with_capacity(parts.shards.len());
            for shard in &parts.shards {
                if shard.is_empty() {
                    continue;
                }
                let mut correct = 0usize;
                for chunk in shard.chunks(batch_size.max(1)) {
                    let (x, y) = test.gather(chunk);
                    let preds = ModelParams::argmax_rows(
                        &params.predict(&x).map_err(|e| ExperimentError::Runtime(e.to_string()))?,
                    );
                    correct += preds.iter().zip(&y).filter(|(&p, &l)| p == l).count();
                }
                accs.push(correct as f64 / shard.len() as f64);
            }
            Some(accs.iter().sum::<f64>() / accs.len().max(1) as f64)
        }
        None => None,
    };
    Ok(EvalOutcome {
        clean_acc: clean,
        clean_acc_client_avg: client_avg,
        adv_pgd: adv,
        adv_logit_scaled: adv_logit,
        adv_transfer,
    })
}

enum Role {
    Honest,
    /// Convergence colluder: computes a benign update first, then the
    /// rendezvous replaces it.
    ConvergenceColluder,
    /// Lowest-id active colluder computes the distillation update.
    DistillationLeader,
    /// Remaining colluders submit the leader's vector.
    DistillationFollower,
}

/// A running simulation: global model, per-client optimizer state, data
/// partitions, and the round counter.
pub struct Simulation {
    pub cfg: ExperimentConfig,
    train: Dataset,
    test: Dataset,
    train_parts: Partition,
    test_parts: Partition,
    pub global: ModelParams,
    optimizers: Vec<Option<Optimizer>>,
    surrogate: Option<ModelParams>,
    next_round: u64,
    /// Submissions of the most recent round (inspection and diagnostics).
    pub last_updates: Vec<ClientUpdate>,
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, ExperimentError> {
        cfg.validate()?;
        let (train, test) = cfg.load_datasets()?;
        let (train_parts, test_parts) = match cfg.partition {
            PartitionSpec::Iid => (
                crate::data::partition_iid(&train, cfg.n_clients, seed::derive(cfg.seed, &[2]))?,
                crate::data::partition_iid(&test, cfg.n_clients, seed::derive(cfg.seed, &[3]))?,
            ),
            PartitionSpec::LabelSkew { alpha } => (
                crate::data::partition_label_skew(
                    &train,
                    cfg.n_clients,
                    alpha,
                    seed::derive(cfg.seed, &[2]),
                )?,
                crate::data::partition_label_skew(
                    &test,
                    cfg.n_clients,
                    alpha,
                    seed::derive(cfg.seed, &[3]),
                )?,
            ),
        };
        let global = ModelParams::build(&cfg.arch, seed::derive(cfg.seed, &[4]))
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        let surrogate = match &cfg.eval_surrogate_ckpt {
            Some(path) => {
                let (model, _) = load_checkpoint(path)
                    .map_err(|e| ExperimentError::Config(format!("surrogate: {e}")))?;
                if model.arch.input != cfg.arch.input || model.arch.classes != cfg.arch.classes {
                    return Err(ExperimentError::Config(
                        "surrogate checkpoint shape does not match experiment arch".into(),
                    ));
                }
                Some(model)
            }
            None => None,
        };
        let n = cfg.n_clients;
        Ok(Simulation {
            cfg,
            train,
            test,
            train_parts,
            test_parts,
            global,
            optimizers: (0..n).map(|_| None).collect(),
            surrogate,
            next_round: 0,
            last_updates: Vec::new(),
        })
    }

    pub fn round(&self) -> u64 {
        self.next_round
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    fn fresh_optimizer(&self) -> Optimizer {
        Optimizer::new(self.cfg.optimizer, self.global.param_count())
    }

    /// Execute one communication round: sample clients, run honest local
    /// training and attack behaviours, rendezvous colluders, aggregate, and
    /// replace the global weights. Evaluation fields stay empty here.
    pub fn run_round(&mut self) -> Result<RoundRecord, ExperimentError> {
        let started = Instant::now();
        let r = self.next_round;
        self.next_round += 1;
        let cfg = &self.cfg;
        let m = cfg.effective_clients_per_round();

        // seeded sampling without replacement, then ascending processing order
        let mut ids: Vec<u64> = (0..cfg.n_clients as u64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[5, r]));
        ids.shuffle(&mut rng);
        ids.truncate(m);
        ids.sort_unstable();

        let attack_active = !matches!(cfg.attack, AttackSpec::None) && r >= cfg.attack.start_round();
        let colluders: Vec<u64> = if attack_active {
            ids.iter().copied().filter(|id| cfg.attack.colluder_ids().contains(id)).collect()
        } else {
            Vec::new()
        };
        let leader = colluders.first().copied();

        let ratio = cfg.mix_schedule.ratio_at(r);
        let distill_cfg = match &cfg.attack {
            AttackSpec::Distillation {
                temperature, target_layer, teacher_epochs, student_epochs, ..
            } => Some(DistillationAttackConfig {
                temperature: *temperature,
                target_layer: target_layer.clone(),
                teacher_epochs: *teacher_epochs,
                student_epochs: *student_epochs,
            }),
            _ => None,
        };

        struct Task {
            client: u64,
            role: Role,
            opt: Optimizer,
        }
        let mut tasks = Vec::with_capacity(ids.len());
        for &client in &ids {
            let role = if colluders.contains(&client) {
                match &cfg.attack {
                    AttackSpec::Convergence { .. } => Role::ConvergenceColluder,
                    AttackSpec::Distillation { .. } => {
                        if Some(client) == leader {
                            Role::DistillationLeader
                        } else {
                            Role::DistillationFollower
                        }
                    }
                    AttackSpec::None => Role::Honest,
                }
            } else {
                Role::Honest
            };
            let opt = if cfg.persist_optimizer_state {
                self.optimizers[client as usize].take().unwrap_or_else(|| self.fresh_optimizer())
            } else {
                self.fresh_optimizer()
            };
            tasks.push(Task { client, role, opt });
        }

        let global = &self.global;
        let train = &self.train;
        let parts = &self.train_parts;
        type ClientOut = (u64, Option<Result<(Vec<f32>, usize), ExperimentError>>, Optimizer);
        let results: Vec<ClientOut> = tasks
            .into_par_iter()
            .map(|mut task| {
                let shard = &parts.shards[task.client as usize];
                let out = match task.role {
                    Role::Honest | Role::ConvergenceColluder => Some(local_fat_step(
                        global,
                        train,
                        shard,
                        ratio,
                        &cfg.train_pgd,
                        &mut task.opt,
                        cfg.local_steps,
                        cfg.batch_size,
                        seed::derive(cfg.seed, &[6, task.client, r]),
                    )),
                    Role::DistillationLeader => {
                        let dcfg = distill_cfg.as_ref().expect("leader implies distillation");
                        Some(
                            byzantine::distillation_attack_update(
                                global,
                                train,
                                shard,
                                dcfg,
                                &cfg.optimizer,
                                cfg.batch_size,
                                seed::derive(cfg.seed, &[8, r]),
                            )
                            .map(|v| (v, shard.len()))
                            .map_err(|e| ExperimentError::Runtime(e.to_string())),
                        )
                    }
                    Role::DistillationFollower => None,
                };
                (task.client, out, task.opt)
            })
            .collect();

        // restore optimizer state and split outcomes, in ascending id order
        let mut benign: Vec<(u64, Vec<f32>, usize)> = Vec::new();
        let mut aborted: Vec<u64> = Vec::new();
        let mut leader_update: Option<Vec<f32>> = None;
        for (client, out, opt) in results {
            if cfg.persist_optimizer_state {
                self.optimizers[client as usize] = Some(opt);
            }
            match out {
                Some(Ok((vector, count))) => {
                    if Some(client) == leader && distill_cfg.is_some() {
                        leader_update = Some(vector);
                        let _ = count;
                    } else {
                        benign.push((client, vector, count));
                    }
                }
                Some(Err(_)) => aborted.push(client),
                None => {} // distillation follower, filled below
            }
        }

        // colluder rendezvous
        let mut updates: Vec<ClientUpdate> = Vec::with_capacity(ids.len());
        let mut malicious: Option<Vec<f32>> = None;
        let mut colluders_active = 0usize;
        match &cfg.attack {
            AttackSpec::Convergence { sigma_shift, .. } if attack_active => {
                let colluder_vectors: Vec<Vec<f32>> = benign
                    .iter()
                    .filter(|(id, _, _)| colluders.contains(id))
                    .map(|(_, v, _)| v.clone())
                    .collect();
                if colluder_vectors.len() >= 2 {
                    let vector = byzantine::convergence_attack_update(&colluder_vectors, *sigma_shift)
                        .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
                    malicious = Some(vector);
                }
                for (id, v, count) in benign {
                    if let (Some(mal), true) = (&malicious, colluders.contains(&id)) {
                        colluders_active += 1;
                        updates.push(ClientUpdate {
                            client_id: id,
                            vector: mal.clone(),
                            sample_count: count,
                        });
                    } else {
                        updates.push(ClientUpdate { client_id: id, vector: v, sample_count: count });
                    }
                }
            }
            AttackSpec::Distillation { .. } if attack_active => {
                for (id, v, count) in benign {
                    updates.push(ClientUpdate { client_id: id, vector: v, sample_count: count });
                }
                match leader_update {
                    Some(vector) => {
                        malicious = Some(vector.clone());
                        for &id in &colluders {
                            colluders_active += 1;
                            updates.push(ClientUpdate {
                                client_id: id,
                                vector: vector.clone(),
                                sample_count: parts.shards[id as usize].len(),
                            });
                        }
                        updates.sort_by_key(|u| u.client_id);
                    }
                    None => {
                        // leader aborted: every colluder submits nothing
                        for &id in &colluders {
                            if !aborted.contains(&id) {
                                aborted.push(id);
                            }
                        }
                        aborted.sort_unstable();
                    }
                }
            }
            _ => {
                for (id, v, count) in benign {
                    updates.push(ClientUpdate { client_id: id, vector: v, sample_count: count });
                }
            }
        }

        let malicious_l2 = match (&malicious, attack_active) {
            (Some(mal), true) => {
                let honest_vectors: Vec<Vec<f32>> = updates
                    .iter()
                    .filter(|u| !colluders.contains(&u.client_id))
                    .map(|u| u.vector.clone())
                    .collect();
                if honest_vectors.is_empty() {
                    None
                } else {
                    byzantine::l2_proximity(mal, &honest_vectors).ok()
                }
            }
            _ => None,
        };

        // aggregate; precondition failures and non-finite results skip the
        // round rather than crashing the experiment
        let n_upd = updates.len();
        let mut skipped = false;
        let mut selected_client = None;
        if n_upd >= self.cfg.aggregation.min_updates() {
            match aggregation::aggregate(&self.cfg.aggregation, &updates) {
                Ok((vector, selected)) => {
                    if vector.iter().all(|v| v.is_finite()) {
                        self.global
                            .set_flat(&vector)
                            .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
                        selected_client = selected;
                    } else {
                        skipped = true;
                    }
                }
                Err(_) => skipped = true,
            }
        } else {
            skipped = true;
        }
        let kept = match self.cfg.aggregation.rule {
            AggregationRule::TrimmedMean => Some(n_upd.saturating_sub(2 * self.cfg.aggregation.f)),
            AggregationRule::Bulyan => {
                Some(n_upd.saturating_sub(4 * self.cfg.aggregation.f))
            }
            _ => None,
        };

        self.last_updates = updates;
        Ok(RoundRecord {
            v: METRICS_SCHEMA_VERSION,
            round: r,
            rule: self.cfg.aggregation.rule,
            participants: ids,
            selected_client,
            kept_per_coordinate: kept,
            attack_active,
            colluders_active,
            aborted_clients: aborted,
            skipped,
            malicious_l2,
            clean_acc: None,
            clean_acc_client_avg: None,
            adv_acc_pgd: None,
            adv_acc_logit_scaled: None,
            adv_acc_transfer: None,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }

    /// Evaluate the current global model with the configured evaluators.
    pub fn evaluate(&self) -> Result<EvalOutcome, ExperimentError> {
        evaluate_model(
            &self.global,
            &self.test,
            Some(&self.test_parts),
            &self.cfg.eval_pgd,
            self.cfg.eval_logit_scale_t,
            self.surrogate.as_ref(),
            seed::derive(self.cfg.seed, &[9, self.next_round]),
            self.cfg.eval_batch_size,
        )
    }
}

/// Run a full experiment: all rounds, evaluation at the configured cadence,
/// a metrics.jsonl stream plus final and best checkpoints under `out_dir`
/// when given. `on_record` observes every completed round.
pub fn run_experiment(
    cfg: ExperimentConfig,
    out_dir: Option<&Path>,
    mut on_record: impl FnMut(&RoundRecord),
) -> Result<Vec<RoundRecord>, ExperimentError> {
    let mut sim = Simulation::new(cfg)?;
    let mut writer = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let rounds = sim.cfg.rounds;
    let eval_every = sim.cfg.eval_every;
    let mut records = Vec::with_capacity(rounds as usize);
    let mut best: Option<(f64, u64, Vec<f32>)> = None;
    for _ in 0..rounds {
        let mut rec = sim.run_round()?;
        if (rec.round + 1) % eval_every == 0 {
            let eval_started = Instant::now();
            let outcome = sim.evaluate()?;
            rec.clean_acc = Some(outcome.clean_acc);
            rec.clean_acc_client_avg = outcome.clean_acc_client_avg;
            rec.adv_acc_pgd = Some(outcome.adv_pgd);
            rec.adv_acc_logit_scaled = outcome.adv_logit_scaled;
            rec.adv_acc_transfer = outcome.adv_transfer;
            rec.wall_ms += eval_started.elapsed().as_millis() as u64;
            let is_better = best
                .as_ref()
                .map(|(adv, _, _)| outcome.adv_pgd > *adv)
                .unwrap_or(true);
            if is_better {
                best = Some((outcome.adv_pgd, rec.round, sim.global.flatten()));
            }
        }
        if let Some(w) = writer.as_mut() {
            write_record(w, &rec)?;
        }
        on_record(&rec);
        records.push(rec);
    }
    if let Some(dir) = out_dir {
        if let Some(w) = writer.as_mut() {
            use std::io::Write;
            w.flush()?;
        }
        save_checkpoint(&sim.global, rounds, &dir.join("final.ckpt"))
            .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
        match &best {
            Some((_, round, flat)) => {
                let mut model = sim.global.clone();
                model.set_flat(flat).map_err(|e| ExperimentError::Runtime(e.to_string()))?;
                save_checkpoint(&model, *round, &dir.join("best.ckpt"))
                    .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
            }
            None => {
                save_checkpoint(&sim.global, rounds, &dir.join("best.ckpt"))
                    .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
            }
        }
    }
    Ok(records)
}
