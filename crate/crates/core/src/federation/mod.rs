//! Client lifecycle, local training, and the federated training loop.
//!
//! Each global epoch every client runs its local phase on its own data
//! only, then a synchronous communication round recomputes every shared
//! prompt from one snapshot of the published local prompts and accuracies.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::config::{Ablation, ConfigError, LossWeights, RunConfig};
use crate::data::{split, Batch, ClientDataset, Sample, Splits};
use crate::losses::{client_loss, LossValues};
use crate::model::{
    client_forward, count_params, AnswerHead, Backbone, ClientPrompts, Modality, ModalityPair, ModelError,
    ParamAccounting, PromptKind, PromptSet,
};
use crate::numerics::{DropoutMask, Gradients, NumericsError, Tape, Tensor, Var};
use crate::rng;

mod communication;
mod history;

pub use communication::{aggregate_shared, communication_round, reliability, PromptMessage, ReliabilityVector};
pub use history::{EpochRecord, RoundRecord, RunHistory};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FederationError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("communication needs at least 2 clients, got {0}")]
    TooFewClients(usize),
    #[error("no message from client {0}")]
    UnknownClient(usize),
    #[error("client {client} published prompts of a different shape")]
    PromptShapeMismatch { client: usize },
    #[error("client {client} reported accuracy {acc} outside [0, 1]")]
    InvalidAccuracy { client: usize, acc: f64 },
    #[error("reliability weights for client {0} are not on the simplex")]
    InvalidReliability(usize),
    #[error("{split} split of client {client} is empty")]
    EmptySplit { client: usize, split: &'static str },
    #[error("non-finite loss {loss} at client {client}, epoch {epoch}, lr {lr}")]
    NonFiniteLoss { client: usize, epoch: usize, lr: f64, loss: f64 },
    #[error("{0} datasets supplied for {1} clients")]
    DatasetCount(usize, usize),
}

impl From<NumericsError> for FederationError {
    fn from(e: NumericsError) -> Self {
        FederationError::Model(e.into())
    }
}

/// The trainable and communicated state of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientParams {
    pub id: usize,
    pub local: ModalityPair<PromptSet>,
    pub shared: ModalityPair<PromptSet>,
    pub head: AnswerHead,
    /// Validation accuracy after the most recent local phase.
    pub acc: f64,
}

impl ClientParams {
    pub fn init(id: usize, backbone: &Backbone, answers: usize, rng: &mut ChaCha8Rng) -> Self {
        let c = backbone.config();
        let local = ModalityPair::from_fn(|m| {
            PromptSet::random(c.blocks, c.prompt_len, c.width, c.prompt_init_std, m, PromptKind::Local, rng)
        });
        let shared = ModalityPair::from_fn(|m| PromptSet::zeros(c.blocks, c.prompt_len, c.width, m, PromptKind::Shared));
        let head = AnswerHead::init(c.width, c.head_hidden, answers, c.head_dropout, rng);
        Self { id, local, shared, head, acc: 0.0 }
    }

    pub fn prompts(&self, ablation: &Ablation) -> ClientPrompts<'_> {
        ClientPrompts {
            local: &self.local,
            shared: &self.shared,
            active: ModalityPair { image: ablation.image_prompt(), text: ablation.text_prompt() },
        }
    }

    /// Snapshot published in a communication round.
    pub fn message(&self, ablation: &Ablation) -> PromptMessage {
        PromptMessage {
            from: self.id,
            image: ablation.image_prompt().then(|| self.local.image.clone()),
            text: ablation.text_prompt().then(|| self.local.text.clone()),
            acc: self.acc,
        }
    }
}

/// A client's private data, split once at start-up.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub splits: Splits,
    pub num_answers: usize,
}

impl ClientData {
    /// Samples used for the accuracy that drives reliability; falls back to
    /// the train split when there is no validation split.
    pub fn val_or_train(&self) -> &[Sample] {
        if self.splits.val.is_empty() {
            &self.splits.train
        } else {
            &self.splits.val
        }
    }
}

/// Client state owned by the training loop.
#[derive(Debug, Clone)]
pub struct Client {
    pub params: ClientParams,
    data: ClientData,
    rng: ChaCha8Rng,
}

impl Client {
    pub fn new(params: ClientParams, data: ClientData, rng: ChaCha8Rng) -> Self {
        Self { params, data, rng }
    }

    pub fn data(&self) -> &ClientData {
        &self.data
    }
}

/// Training hyperparameters for one local step.
#[derive(Debug, Clone, Copy)]
pub struct StepSettings {
    pub lr: f64,
    pub epoch: usize,
    pub weights: LossWeights,
    pub ablation: Ablation,
}

fn sgd(target: &mut Tensor, grad: Option<&[f64]>, lr: f64) {
    if let Some(g) = grad {
        target.data_mut().iter_mut().zip(g).for_each(|(w, d)| *w -= lr * d);
    }
}

fn apply_updates(params: &mut ClientParams, grads: &Gradients, local: &ModalityPair<Option<Var>>, head: [Var; 4], lr: f64) {
    for m in Modality::ALL {
        if let Some(v) = *local.get(m) {
            sgd(params.local.get_mut(m).values_mut(), grads.wrt(v), lr);
        }
    }
    for (t, v) in params.head.tensors_mut().into_iter().zip(head) {
        sgd(t, grads.wrt(v), lr);
    }
}

/// One SGD step on the client's active local prompts and answer head.
///
/// The batch must come from the client's own train split; the backbone and
/// shared prompts are read-only.
pub fn local_step(
    params: &mut ClientParams,
    backbone: &Backbone,
    batch: &Batch,
    settings: &StepSettings,
    rng: &mut ChaCha8Rng,
) -> Result<LossValues, FederationError> {
    let hidden = params.head.hidden();
    let dropout = DropoutMask::sample(batch.len() * hidden, params.head.dropout, rng);
    let (values, grads, local, head) = {
        let mut tape = Tape::new();
        let (fwd, loss) = client_loss(
            &mut tape,
            backbone,
            params.prompts(&settings.ablation),
            &params.head,
            batch,
            &dropout,
            &settings.weights,
            true,
        )?;
        let values = loss.values(&tape);
        if !values.total.is_finite() {
            return Err(FederationError::NonFiniteLoss {
                client: params.id,
                epoch: settings.epoch,
                lr: settings.lr,
                loss: values.total,
            });
        }
        let grads = tape.backward(loss.total)?;
        (values, grads, fwd.local, [fwd.head.w1, fwd.head.b1, fwd.head.w2, fwd.head.b2])
    };
    if settings.lr != 0.0 {
        apply_updates(params, &grads, &local, head, settings.lr);
    }
    Ok(values)
}

/// Logits of every sample, in order, with dropout disabled.
pub fn predict(
    params: &ClientParams,
    backbone: &Backbone,
    samples: &[Sample],
    ablation: &Ablation,
    batch_size: usize,
) -> Result<Vec<usize>, FederationError> {
    let text_len = backbone.config().text_seq_len;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk, text_len);
        let mut tape = Tape::new();
        let dropout = DropoutMask::identity(batch.len() * params.head.hidden());
        let fwd = client_forward(
            &mut tape,
            backbone,
            params.prompts(ablation),
            &params.head,
            &batch.image,
            &batch.text,
            &dropout,
            false,
        )?;
        let logits = tape.value(fwd.logits);
        for row in logits.data().chunks(logits.last_dim()) {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn evaluate(
    params: &ClientParams,
    backbone: &Backbone,
    samples: &[Sample],
    ablation: &Ablation,
    batch_size: usize,
) -> Result<f64, FederationError> {
    if samples.is_empty() {
        return Err(ConfigError::new("evaluate", "split is empty").into());
    }
    let preds = predict(params, backbone, samples, ablation, batch_size)?;
    let correct = preds.iter().zip(samples).filter(|(p, s)| **p == s.answer as usize).count();
    Ok(correct as f64 / samples.len() as f64)
}

/// `local_epochs` shuffled passes over the train split, then evaluation.
/// Updates `acc` to the new validation accuracy.
pub fn local_phase(
    client: &mut Client,
    backbone: &Backbone,
    config: &RunConfig,
    epoch: usize,
) -> Result<EpochRecord, FederationError> {
    let sched = &config.schedule;
    let settings = StepSettings {
        lr: sched.lr_at(epoch),
        epoch,
        weights: config.losses,
        ablation: config.federation.ablation,
    };
    let text_len = backbone.config().text_seq_len;
    let train = &client.data.splits.train;
    if train.is_empty() {
        return Err(FederationError::EmptySplit { client: client.params.id, split: "train" });
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut sum = LossValues::default();
    let mut steps = 0usize;
    for _ in 0..sched.local_epochs {
        order.shuffle(&mut client.rng);
        for chunk in order.chunks(sched.batch_size) {
            let batch = Batch::new(chunk.iter().map(|&i| &train[i]), text_len);
            let v = local_step(&mut client.params, backbone, &batch, &settings, &mut client.rng)?;
            sum.total += v.total;
            sum.ce += v.ce;
            sum.distance += v.distance;
            sum.reg += v.reg;
            steps += 1;
        }
    }
    let ablation = &config.federation.ablation;
    let val_acc = evaluate(&client.params, backbone, client.data.val_or_train(), ablation, sched.batch_size)?;
    let test = &client.data.splits.test;
    if test.is_empty() {
        return Err(FederationError::EmptySplit { client: client.params.id, split: "test" });
    }
    let test_acc = evaluate(&client.params, backbone, test, ablation, sched.batch_size)?;
    client.params.acc = val_acc;
    let n = steps as f64;
    Ok(EpochRecord {
        epoch,
        client: client.params.id,
        train_loss: sum.total / n,
        ce: sum.ce / n,
        ld: sum.distance / n,
        reg: sum.reg / n,
        val_acc,
        test_acc,
        lr: settings.lr,
    })
}

/// Runs a closure over every client, possibly in parallel. Results must be
/// returned in input order.
pub trait Executor {
    fn map_mut<T, R, F>(&self, items: &mut [T], f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(&mut T) -> R + Sync;
}

/// In-order, single-threaded executor.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map_mut<T, R, F>(&self, items: &mut [T], f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(&mut T) -> R + Sync,
    {
        items.iter_mut().map(f).collect()
    }
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub history: RunHistory,
    pub clients: Vec<ClientParams>,
    pub backbone: Backbone,
    pub backbone_hash_before: [u8; 32],
    pub backbone_hash_after: [u8; 32],
    pub accounting: ParamAccounting,
}

/// An aborted run with the history recorded up to the failure.
#[derive(Debug, Clone, thiserror::Error)]
#[error("{error}")]
pub struct RunFailure {
    pub error: FederationError,
    pub history: RunHistory,
}

impl From<FederationError> for RunFailure {
    fn from(error: FederationError) -> Self {
        Self { error, history: RunHistory::default() }
    }
}

/// Train/val/test ratios the config applies to its datasets.
pub fn split_ratios(config: &RunConfig) -> [f64; 3] {
    if config.data.jsonl.is_empty() {
        config.data.synth.split
    } else {
        config.data.split
    }
}

/// Backbone and freshly initialized clients for a run.
pub fn setup(config: &RunConfig, datasets: Vec<ClientDataset>) -> Result<(Backbone, Vec<Client>), FederationError> {
    config.validate()?;
    if datasets.len() != config.federation.clients {
        return Err(FederationError::DatasetCount(datasets.len(), config.federation.clients));
    }
    let backbone = Backbone::init(&config.model, config.seed)?;
    let ratios = split_ratios(config);
    let mut clients = Vec::with_capacity(datasets.len());
    for (t, ds) in datasets.into_iter().enumerate() {
        let splits = split(&ds, ratios, config.seed.wrapping_add(t as u64))?;
        let mut rng = rng::stream(config.seed, t as u64);
        let params = ClientParams::init(t, &backbone, ds.num_answers, &mut rng);
        clients.push(Client::new(params, ClientData { splits, num_answers: ds.num_answers }, rng));
    }
    Ok((backbone, clients))
}

/// Full federated training. `observe` sees every round's messages, which
/// are the only data that crosses client boundaries.
pub fn run_observed<E: Executor>(
    config: &RunConfig,
    datasets: Vec<ClientDataset>,
    executor: &E,
    mut observe: impl FnMut(usize, &[PromptMessage]),
) -> Result<RunOutcome, RunFailure> {
    let (backbone, mut clients) = setup(config, datasets)?;
    let hash_before = backbone.content_hash();
    let ablation = config.federation.ablation;
    let mut history = RunHistory::default();
    for epoch in 1..=config.schedule.global_epochs {
        let results = executor.map_mut(&mut clients, |c| local_phase(c, &backbone, config, epoch));
        for r in results {
            match r {
                Ok(rec) => history.records.push(rec),
                Err(error) => return Err(RunFailure { error, history }),
            }
        }
        if !ablation.communicates() {
            continue;
        }
        let messages: Vec<PromptMessage> = clients.iter().map(|c| c.params.message(&ablation)).collect();
        observe(epoch, &messages);
        let round = communication_round(&messages).map_err(|error| RunFailure { error, history: history.clone() })?;
        let t = clients.len();
        let mut eta = alloc::vec![alloc::vec![0.0; t]; t];
        let mut degenerate = Vec::with_capacity(t);
        for (client, (rel, shared)) in clients.iter_mut().zip(round) {
            for (&peer, &w) in rel.peers.iter().zip(&rel.weights) {
                eta[client.params.id][peer] = w;
            }
            degenerate.push(rel.degenerate_uniform);
            for m in Modality::ALL {
                if let Some(p) = shared.get(m) {
                    *client.params.shared.get_mut(m) = p.clone();
                }
            }
        }
        let payload_bytes = messages.iter().map(PromptMessage::payload_bytes).sum();
        history.rounds.push(RoundRecord { epoch, eta, degenerate, payload_bytes });
    }
    let params: Vec<ClientParams> = clients.into_iter().map(|c| c.params).collect();
    let heads: Vec<AnswerHead> = params.iter().map(|p| p.head.clone()).collect();
    let accounting = count_params(&backbone, &heads);
    let hash_after = backbone.content_hash();
    Ok(RunOutcome {
        history,
        clients: params,
        backbone,
        backbone_hash_before: hash_before,
        backbone_hash_after: hash_after,
        accounting,
    })
}

pub fn run<E: Executor>(config: &RunConfig, datasets: Vec<ClientDataset>, executor: &E) -> Result<RunOutcome, RunFailure> {
    run_observed(config, datasets, executor, |_, _| {})
}
