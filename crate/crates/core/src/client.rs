//! Client-side state and local training.
//!
//! Every client keeps a full copy of the model. Shared blocks are
//! overwritten by whatever the server dispatches; blocks the server
//! never dispatches stay private and evolve only through local
//! training. A client's returned update covers exactly the block ids
//! it was asked for, never its private blocks.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{score, Metric};
use crate::model::{BlockId, BlockParams, BlockedModel, BoundModel, ModalityMask};
use crate::seeds::sub_seed;
use crate::tape::{Gradients, Tape};

/// Local SGD settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 0.5,
            batch_size: 32,
            local_epochs: 2,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Spec(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.local_epochs == 0 {
            return Err(Error::Spec("batch size and local epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Block updates one client returns after local training.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub client_id: usize,
    /// Training-shard size, the aggregation weight.
    pub n_samples: usize,
    pub blocks: BTreeMap<BlockId, BlockParams<f64>>,
}

/// Peek into one optimizer step, for tests that audit gradients.
pub struct StepAudit<'a> {
    pub round: usize,
    pub client: usize,
    pub step: usize,
    pub bound: &'a BoundModel<f64>,
    pub grads: &'a Gradients<f64>,
}

/// One simulated participant.
#[derive(Debug, Clone)]
pub struct ClientState {
    id: usize,
    mask: ModalityMask,
    train: Dataset,
    eval: Dataset,
    model: BlockedModel<f64>,
    seed: u64,
}

impl ClientState {
    /// `init` seeds the whole local model, private blocks included, so
    /// private state never has to travel.
    pub fn new(
        id: usize,
        mask: ModalityMask,
        train: Dataset,
        eval: Dataset,
        init: &BlockedModel<f64>,
        seed: u64,
    ) -> Result<Self> {
        if train.n_samples() == 0 {
            return Err(Error::EmptyShard { client: id });
        }
        if mask.n_modalities() != init.spec().n_modalities() {
            return Err(Error::ModalityConfig(format!(
                "client {id} mask covers {} modalities, model has {}",
                mask.n_modalities(),
                init.spec().n_modalities()
            )));
        }
        Ok(Self {
            id,
            mask,
            train,
            eval,
            model: init.clone(),
            seed,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn mask(&self) -> &ModalityMask {
        &self.mask
    }

    pub fn n_train(&self) -> usize {
        self.train.n_samples()
    }

    pub fn n_eval(&self) -> usize {
        self.eval.n_samples()
    }

    pub fn model(&self) -> &BlockedModel<f64> {
        &self.model
    }

    /// Overwrite shared blocks with server state.
    pub fn install(&mut self, blocks: &BTreeMap<BlockId, BlockParams<f64>>) -> Result<()> {
        for (id, params) in blocks {
            self.model.set_block(*id, params.clone())?;
        }
        Ok(())
    }

    /// Run local SGD and return updates for `return_blocks` only.
    pub fn local_update(
        &mut self,
        round: usize,
        return_blocks: &[BlockId],
        hyper: &TrainHyper,
    ) -> Result<LocalUpdate> {
        self.local_update_with_audit(round, return_blocks, hyper, &mut |_| {})
    }

    /// Same as `local_update`, invoking `audit` after each step's
    /// backward pass and before the parameters move.
    pub fn local_update_with_audit(
        &mut self,
        round: usize,
        return_blocks: &[BlockId],
        hyper: &TrainHyper,
        audit: &mut dyn FnMut(&StepAudit),
    ) -> Result<LocalUpdate> {
        hyper.validate()?;
        let n = self.train.n_samples();
        let mut step = 0usize;
        for epoch in 0..hyper.local_epochs {
            let shuffle_seed = sub_seed(
                self.seed,
                "shuffle",
                (round * hyper.local_epochs + epoch) as u64,
            );
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
            for batch_idx in order.chunks(hyper.batch_size) {
                let batch = self.train.gather(batch_idx)?;
                let mut tape = Tape::new();
                let bound = self.model.bind(&mut tape);
                let out = bound.forward(&mut tape, &batch.features, &self.mask)?;
                let loss = tape.cross_entropy(out.logits, &batch.labels)?;
                let grads = tape.backward(loss)?;
                audit(&StepAudit {
                    round,
                    client: self.id,
                    step,
                    bound: &bound,
                    grads: &grads,
                });
                self.model.sgd_step(&bound, &grads, hyper.lr)?;
                step += 1;
            }
        }
        let mut blocks = BTreeMap::new();
        for id in return_blocks {
            blocks.insert(*id, self.model.block(*id)?.clone());
        }
        Ok(LocalUpdate {
            client_id: self.id,
            n_samples: n,
            blocks,
        })
    }

    /// Score the local model on the local eval slice, under the
    /// client's own modality mask. Returns the score and the number of
    /// eval samples (the group-average weight).
    pub fn evaluate(&self, metric: Metric) -> Result<(f64, usize)> {
        if self.eval.n_samples() == 0 {
            return Err(Error::Data(format!("client {} has an empty eval slice", self.id)));
        }
        let preds = self.model.predict(&self.eval.features, &self.mask)?;
        let s = score(metric, &preds, &self.eval.labels, self.eval.n_classes)?;
        Ok((s, self.eval.n_samples()))
    }

    /// Mean training loss over the local shard, for diagnostics.
    pub fn train_loss(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let out = bound.forward(&mut tape, &self.train.features, &self.mask)?;
        let loss = tape.cross_entropy(out.logits, &self.train.labels)?;
        Ok(tape.value(loss)?.data()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SynthTask, TaskKind};
    use crate::model::{FusionKind, ModelSpec};

    fn setup() -> (ModelSpec, Dataset, Dataset) {
        let task = SynthTask {
            kind: TaskKind::Redundant,
            n_classes: 3,
            input_dims: vec![5, 4],
            noise_scale: 0.3,
            noise_ratio: 1.0,
            n_samples: 60,
            leak: 0.0,
        };
        let data = task.generate(7).unwrap();
        let train = data.gather(&(0..40).collect::<Vec<_>>()).unwrap();
        let eval = data.gather(&(40..60).collect::<Vec<_>>()).unwrap();
        let spec = ModelSpec {
            n_classes: 3,
            input_dims: vec![5, 4],
            hidden_dim: 8,
            embed_dim: 6,
            fusion_dim: 6,
            fusion: FusionKind::Concat,
        };
        (spec, train, eval)
    }

    fn hyper() -> TrainHyper {
        TrainHyper {
            lr: 0.1,
            batch_size: 16,
            local_epochs: 1,
        }
    }

    #[test]
    fn update_returns_exactly_requested_blocks() {
        let (spec, train, eval) = setup();
        let init = BlockedModel::init(&spec, 1).unwrap();
        let mask = ModalityMask::full(2);
        let mut client = ClientState::new(0, mask, train, eval, &init, 99).unwrap();
        let keys = vec![BlockId::Encoder(0), BlockId::Fusion];
        let up = client.local_update(0, &keys, &hyper()).unwrap();
        assert_eq!(up.blocks.keys().copied().collect::<Vec<_>>(), keys);
        assert_eq!(up.n_samples, 40);
    }

    #[test]
    fn training_is_deterministic_per_seed_and_round() {
        let (spec, train, eval) = setup();
        let init = BlockedModel::init(&spec, 1).unwrap();
        let mask = ModalityMask::full(2);
        let run = |seed: u64, round: usize| {
            let mut c =
                ClientState::new(0, mask.clone(), train.clone(), eval.clone(), &init, seed)
                    .unwrap();
            c.local_update(round, &[BlockId::Head], &hyper()).unwrap()
        };
        let a = run(5, 0);
        let b = run(5, 0);
        assert_eq!(a.blocks, b.blocks);
        let c = run(5, 1);
        assert_ne!(a.blocks, c.blocks, "round changes the batch order");
        let d = run(6, 0);
        assert_ne!(a.blocks, d.blocks, "seed changes the batch order");
    }

    #[test]
    fn private_blocks_move_but_are_not_returned() {
        let (spec, train, eval) = setup();
        let init = BlockedModel::init(&spec, 1).unwrap();
        let mask = ModalityMask::full(2);
        let mut client = ClientState::new(0, mask, train, eval, &init, 3).unwrap();
        let keys = vec![BlockId::Encoder(0), BlockId::Encoder(1)];
        let up = client.local_update(0, &keys, &hyper()).unwrap();
        assert!(!up.blocks.contains_key(&BlockId::Head));
        // The private head still trained locally.
        assert_ne!(
            client.model().block(BlockId::Head).unwrap(),
            init.block(BlockId::Head).unwrap()
        );
    }

    #[test]
    fn absent_modality_encoder_never_moves() {
        let (spec, train, eval) = setup();
        let init = BlockedModel::init(&spec, 1).unwrap();
        let mask = ModalityMask::single(2, 0).unwrap();
        let mut client = ClientState::new(0, mask, train, eval, &init, 3).unwrap();
        for round in 0..3 {
            client
                .local_update(round, &[BlockId::Encoder(0)], &hyper())
                .unwrap();
        }
        assert_eq!(
            client.model().block(BlockId::Encoder(1)).unwrap(),
            init.block(BlockId::Encoder(1)).unwrap()
        );
        assert_ne!(
            client.model().block(BlockId::Encoder(0)).unwrap(),
            init.block(BlockId::Encoder(0)).unwrap()
        );
    }

    #[test]
    fn install_overwrites_only_given_blocks() {
        let (spec, train, eval) = setup();
        let init = BlockedModel::init(&spec, 1).unwrap();
        let other = BlockedModel::init(&spec, 2).unwrap();
        let mask = ModalityMask::full(2);
        let mut client = ClientState::new(0, mask, train, eval, &init, 3).unwrap();
        let mut blocks = BTreeMap::new();
        blocks.insert(BlockId::Fusion, other.block(BlockId::Fusion).unwrap().clone());
        client.install(&blocks).unwrap();
        assert_eq!(
            client.model().block(BlockId::Fusion).unwrap(),
            other.block(BlockId::Fusion).unwrap()
        );
        assert_eq!(
            client.model().block(BlockId::Head).unwrap(),
            init.block(BlockId::Head).unwrap()
        );
    }

    #[test]
    fn local_training_reduces_loss() {
        let (spec, train, eval) = setup();
        let init = BlockedModel::init(&spec, 1).unwrap();
        let mask = ModalityMask::full(2);
        let mut client = ClientState::new(0, mask, train, eval, &init, 3).unwrap();
        let before = client.train_loss().unwrap();
        for round in 0..5 {
            client.local_update(round, &[], &hyper()).unwrap();
        }
        let after = client.train_loss().unwrap();
        assert!(after < before, "loss {before} -> {after}");
        let (score, n) = client.evaluate(Metric::Accuracy).unwrap();
        assert_eq!(n, 20);
        assert!(score > 0.4, "redundant task should be learnable, got {score}");
    }

    #[test]
    fn audit_sees_every_step() {
        let (spec, train, eval) = setup();
        let init = BlockedModel::init(&spec, 1).unwrap();
        let mask = ModalityMask::full(2);
        let mut client = ClientState::new(4, mask, train, eval, &init, 3).unwrap();
        let mut steps = Vec::new();
        let h = TrainHyper {
            lr: 0.05,
            batch_size: 16,
            local_epochs: 2,
        };
        client
            .local_update_with_audit(2, &[], &h, &mut |a| steps.push((a.round, a.client, a.step)))
            .unwrap();
        // 40 samples, batch 16 -> 3 batches per epoch, 2 epochs.
        assert_eq!(steps.len(), 6);
        assert!(steps.iter().all(|(r, c, _)| *r == 2 && *c == 4));
        assert_eq!(steps.last().unwrap().2, 5);
    }

    #[test]
    fn empty_shard_is_rejected() {
        let (spec, train, eval) = setup();
        let init = BlockedModel::init(&spec, 1).unwrap();
        let empty = train.gather(&[]).unwrap();
        let err = ClientState::new(9, ModalityMask::full(2), empty, eval, &init, 1);
        assert!(err.is_err());
    }
}
