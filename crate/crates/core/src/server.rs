//! Server-side aggregation and the round protocol.
//!
//! The server holds only the blocks its mode shares. Encoders are
//! averaged over the clients that actually observe the matching
//! modality; fusion and head participation depends on the mode. All
//! aggregation walks clients in ascending id order and accumulates in
//! that order, making rounds bit-reproducible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::client::{ClientState, LocalUpdate, StepAudit, TrainHyper};
use crate::error::{Error, Result};
use crate::metrics::CommStats;
use crate::model::{BlockId, BlockParams, BlockedModel, ModalityMask, ModelSpec};
use crate::tensor::Tensor;

/// Which blocks stay private to clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Full model shared: encoders, fusion and head all aggregate.
    Fm,
    /// Private head: encoders and fusion aggregate.
    Ph,
    /// Private head and fusion: only encoders aggregate.
    Phf,
}

impl AggregationMode {
    pub const ALL: [AggregationMode; 3] = [
        AggregationMode::Fm,
        AggregationMode::Ph,
        AggregationMode::Phf,
    ];

    /// Is this block aggregated (and therefore held by the server)?
    pub fn shares(&self, id: BlockId) -> bool {
        match id {
            BlockId::Encoder(_) => true,
            BlockId::Fusion => !matches!(self, AggregationMode::Phf),
            BlockId::Head => matches!(self, AggregationMode::Fm),
        }
    }
}

impl std::fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AggregationMode::Fm => write!(f, "fm"),
            AggregationMode::Ph => write!(f, "ph"),
            AggregationMode::Phf => write!(f, "phf"),
        }
    }
}

impl std::str::FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fm" => Ok(AggregationMode::Fm),
            "ph" => Ok(AggregationMode::Ph),
            "phf" => Ok(AggregationMode::Phf),
            other => Err(Error::Config {
                path: "modes".into(),
                detail: format!("unknown mode `{other}` (expected fm, ph or phf)"),
            }),
        }
    }
}

/// Static per-run mapping of blocks to participating clients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregationPlan {
    /// Eligible client ids per shared block, ascending.
    pub participants: BTreeMap<BlockId, Vec<usize>>,
    /// Blocks dispatched to (and returned by) each client, sorted.
    pub dispatch: Vec<Vec<BlockId>>,
}

/// Derive the plan from the mode and the clients' modality masks.
/// Client `k`'s mask is `masks[k]`.
pub fn build_plan(
    mode: AggregationMode,
    masks: &[ModalityMask],
    spec: &ModelSpec,
) -> Result<AggregationPlan> {
    if masks.is_empty() {
        return Err(Error::Spec("plan needs at least one client".into()));
    }
    let m_count = spec.n_modalities();
    for (k, mask) in masks.iter().enumerate() {
        if mask.n_modalities() != m_count {
            return Err(Error::ModalityConfig(format!(
                "client {k} mask covers {} modalities, model has {m_count}",
                mask.n_modalities()
            )));
        }
    }
    let all: Vec<usize> = (0..masks.len()).collect();
    let mut participants = BTreeMap::new();
    for m in 0..m_count {
        let eligible: Vec<usize> = all
            .iter()
            .copied()
            .filter(|&k| masks[k].is_present(m))
            .collect();
        participants.insert(BlockId::Encoder(m), eligible);
    }
    if mode.shares(BlockId::Fusion) {
        participants.insert(BlockId::Fusion, all.clone());
    }
    if mode.shares(BlockId::Head) {
        participants.insert(BlockId::Head, all.clone());
    }
    let dispatch = masks
        .iter()
        .map(|mask| {
            let mut blocks: Vec<BlockId> = mask
                .present_indices()
                .into_iter()
                .map(BlockId::Encoder)
                .collect();
            if mode.shares(BlockId::Fusion) {
                blocks.push(BlockId::Fusion);
            }
            if mode.shares(BlockId::Head) {
                blocks.push(BlockId::Head);
            }
            blocks
        })
        .collect();
    Ok(AggregationPlan {
        participants,
        dispatch,
    })
}

/// Combines per-client block updates into a new shared block. The
/// `current` value allows server-side optimizers that move the global
/// block toward the average instead of replacing it.
pub trait Aggregator {
    fn name(&self) -> &'static str;

    /// `updates` come in ascending client id order as
    /// `(parameters, weight)` pairs with positive total weight.
    fn aggregate_block(
        &self,
        id: BlockId,
        current: &BlockParams<f64>,
        updates: &[(&BlockParams<f64>, f64)],
    ) -> Result<BlockParams<f64>>;
}

/// Plain weighted averaging: `theta = sum_c (w_c / sum w) theta_c`.
#[derive(Debug, Clone, Copy, Default)]
pub struct FedAvg;

impl Aggregator for FedAvg {
    fn name(&self) -> &'static str {
        "fedavg"
    }

    fn aggregate_block(
        &self,
        id: BlockId,
        current: &BlockParams<f64>,
        updates: &[(&BlockParams<f64>, f64)],
    ) -> Result<BlockParams<f64>> {
        if updates.is_empty() {
            return Ok(current.clone());
        }
        let total: f64 = updates.iter().map(|(_, w)| *w).sum();
        if !(total > 0.0) {
            return Err(Error::Protocol {
                round: 0,
                detail: format!("block `{id}` has non-positive total weight {total}"),
            });
        }
        let mut out: BlockParams<f64> = current
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        for (params, w) in updates {
            if params.len() != out.len() {
                return Err(Error::block_len(id, out.len(), params.len()));
            }
            let frac = *w / total;
            for (acc, p) in out.iter_mut().zip(params.iter()) {
                if acc.shape() != p.shape() {
                    return Err(Error::Block(format!(
                        "block `{id}` tensor shape {:?} does not match {:?}",
                        p.shape(),
                        acc.shape()
                    )));
                }
                for (a, v) in acc.data_mut().iter_mut().zip(p.data()) {
                    *a += frac * *v;
                }
            }
        }
        Ok(out)
    }
}

/// Server state: the shared blocks for one aggregation mode.
pub struct Server {
    spec: ModelSpec,
    mode: AggregationMode,
    plan: AggregationPlan,
    shared: BTreeMap<BlockId, BlockParams<f64>>,
    aggregator: Box<dyn Aggregator>,
}

impl Server {
    /// Keep only the blocks this mode shares; private blocks from the
    /// init model are dropped here and never re-enter server state.
    pub fn new(
        init: &BlockedModel<f64>,
        mode: AggregationMode,
        masks: &[ModalityMask],
        aggregator: Box<dyn Aggregator>,
    ) -> Result<Self> {
        let spec = init.spec().clone();
        let plan = build_plan(mode, masks, &spec)?;
        let mut shared = BTreeMap::new();
        for id in spec.block_ids() {
            if mode.shares(id) {
                shared.insert(id, init.block(id)?.clone());
            }
        }
        Ok(Self {
            spec,
            mode,
            plan,
            shared,
            aggregator,
        })
    }

    pub fn mode(&self) -> AggregationMode {
        self.mode
    }

    pub fn plan(&self) -> &AggregationPlan {
        &self.plan
    }

    pub fn aggregator_name(&self) -> &'static str {
        self.aggregator.name()
    }

    /// Every block currently in server memory.
    pub fn held_blocks(&self) -> Vec<BlockId> {
        self.shared.keys().copied().collect()
    }

    pub fn shared_block(&self, id: BlockId) -> Result<&BlockParams<f64>> {
        self.shared
            .get(&id)
            .ok_or_else(|| Error::Block(format!("server does not hold block `{id}`")))
    }

    /// Blocks to send to one client this round.
    pub fn dispatch_for(&self, client: usize) -> Result<BTreeMap<BlockId, BlockParams<f64>>> {
        let ids = self.plan.dispatch.get(client).ok_or_else(|| Error::Protocol {
            round: 0,
            detail: format!("client {client} is not part of the plan"),
        })?;
        let mut out = BTreeMap::new();
        for id in ids {
            out.insert(*id, self.shared_block(*id)?.clone());
        }
        Ok(out)
    }

    /// Fold the round's updates into the shared blocks. Updates must
    /// arrive in ascending client id order and carry exactly the
    /// dispatched block set; anything else is a protocol violation.
    pub fn apply_updates(&mut self, round: usize, updates: &[LocalUpdate]) -> Result<()> {
        let mut by_client: BTreeMap<usize, &LocalUpdate> = BTreeMap::new();
        for up in updates {
            let expected = self.plan.dispatch.get(up.client_id).ok_or_else(|| {
                Error::Protocol {
                    round,
                    detail: format!("update from unknown client {}", up.client_id),
                }
            })?;
            let got: Vec<BlockId> = up.blocks.keys().copied().collect();
            if &got != expected {
                return Err(Error::Protocol {
                    round,
                    detail: format!(
                        "client {} returned blocks {:?}, expected {:?}",
                        up.client_id,
                        got.iter().map(BlockId::to_string).collect::<Vec<_>>(),
                        expected.iter().map(BlockId::to_string).collect::<Vec<_>>()
                    ),
                });
            }
            if by_client.insert(up.client_id, up).is_some() {
                return Err(Error::Protocol {
                    round,
                    detail: format!("duplicate update from client {}", up.client_id),
                });
            }
        }
        let mut next = BTreeMap::new();
        for (&id, current) in &self.shared {
            let eligible = self.plan.participants.get(&id).ok_or_else(|| {
                Error::Protocol {
                    round,
                    detail: format!("shared block `{id}` missing from plan"),
                }
            })?;
            let mut incoming: Vec<(&BlockParams<f64>, f64)> = Vec::with_capacity(eligible.len());
            for &c in eligible {
                if let Some(up) = by_client.get(&c) {
                    let params = up.blocks.get(&id).ok_or_else(|| Error::Protocol {
                        round,
                        detail: format!("client {c} omitted block `{id}`"),
                    })?;
                    incoming.push((params, up.n_samples as f64));
                }
            }
            next.insert(id, self.aggregator.aggregate_block(id, current, &incoming)?);
        }
        self.shared = next;
        Ok(())
    }

    /// Parameter traffic for one full round with every client
    /// participating: dispatches plus returns (symmetric by protocol).
    pub fn round_comm(&self) -> Result<CommStats> {
        let mut one_way = 0u64;
        for ids in &self.plan.dispatch {
            for id in ids {
                one_way += self.spec.block_param_count(*id)? as u64;
            }
        }
        Ok(CommStats {
            dispatched_params: one_way,
            returned_params: one_way,
        })
    }
}

/// Run one synchronous round: dispatch, local training, aggregation.
pub fn run_round(
    server: &mut Server,
    clients: &mut [ClientState],
    round: usize,
    hyper: &TrainHyper,
) -> Result<CommStats> {
    run_round_with_audit(server, clients, round, hyper, &mut |_| {})
}

/// `run_round` with a per-step gradient audit hook.
pub fn run_round_with_audit(
    server: &mut Server,
    clients: &mut [ClientState],
    round: usize,
    hyper: &TrainHyper,
    audit: &mut dyn FnMut(&StepAudit),
) -> Result<CommStats> {
    let mut updates = Vec::with_capacity(clients.len());
    for client in clients.iter_mut() {
        let blocks = server.dispatch_for(client.id())?;
        client.install(&blocks)?;
        let keys: Vec<BlockId> = blocks.keys().copied().collect();
        updates.push(client.local_update_with_audit(round, &keys, hyper, audit)?);
    }
    server.apply_updates(round, &updates)?;
    server.round_comm()
}

/// Refresh every client's shared blocks from the server, without
/// training. Evaluation after this reflects the post-round state.
pub fn sync_clients(server: &Server, clients: &mut [ClientState]) -> Result<()> {
    for client in clients.iter_mut() {
        let blocks = server.dispatch_for(client.id())?;
        client.install(&blocks)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SynthTask, TaskKind};
    use crate::model::FusionKind;
    use proptest::prelude::*;

    fn spec() -> ModelSpec {
        ModelSpec {
            n_classes: 3,
            input_dims: vec![5, 4],
            hidden_dim: 6,
            embed_dim: 4,
            fusion_dim: 5,
            fusion: FusionKind::Concat,
        }
    }

    fn masks() -> Vec<ModalityMask> {
        vec![
            ModalityMask::single(2, 0).unwrap(),
            ModalityMask::single(2, 1).unwrap(),
            ModalityMask::full(2),
        ]
    }

    #[test]
    fn mode_block_sharing_matrix() {
        use AggregationMode::*;
        for mode in AggregationMode::ALL {
            assert!(mode.shares(BlockId::Encoder(0)));
        }
        assert!(Fm.shares(BlockId::Fusion) && Fm.shares(BlockId::Head));
        assert!(Ph.shares(BlockId::Fusion) && !Ph.shares(BlockId::Head));
        assert!(!Phf.shares(BlockId::Fusion) && !Phf.shares(BlockId::Head));
    }

    #[test]
    fn plan_routes_encoders_by_mask() {
        let plan = build_plan(AggregationMode::Ph, &masks(), &spec()).unwrap();
        assert_eq!(plan.participants[&BlockId::Encoder(0)], vec![0, 2]);
        assert_eq!(plan.participants[&BlockId::Encoder(1)], vec![1, 2]);
        assert_eq!(plan.participants[&BlockId::Fusion], vec![0, 1, 2]);
        assert!(!plan.participants.contains_key(&BlockId::Head));
        assert_eq!(plan.dispatch[0], vec![BlockId::Encoder(0), BlockId::Fusion]);
        assert_eq!(plan.dispatch[2], vec![BlockId::Encoder(0), BlockId::Encoder(1), BlockId::Fusion]);
    }

    #[test]
    fn server_holds_only_shared_blocks() {
        let init = BlockedModel::init(&spec(), 1).unwrap();
        let held = |mode| {
            Server::new(&init, mode, &masks(), Box::new(FedAvg))
                .unwrap()
                .held_blocks()
        };
        assert_eq!(
            held(AggregationMode::Fm),
            vec![BlockId::Encoder(0), BlockId::Encoder(1), BlockId::Fusion, BlockId::Head]
        );
        assert_eq!(
            held(AggregationMode::Ph),
            vec![BlockId::Encoder(0), BlockId::Encoder(1), BlockId::Fusion]
        );
        assert_eq!(
            held(AggregationMode::Phf),
            vec![BlockId::Encoder(0), BlockId::Encoder(1)]
        );
    }

    #[test]
    fn fedavg_matches_scalar_weighted_mean() {
        let s = spec();
        let a = BlockedModel::init(&s, 1).unwrap();
        let b = BlockedModel::init(&s, 2).unwrap();
        let c = BlockedModel::init(&s, 3).unwrap();
        let id = BlockId::Fusion;
        let updates = vec![
            (a.block(id).unwrap(), 10.0),
            (b.block(id).unwrap(), 30.0),
            (c.block(id).unwrap(), 60.0),
        ];
        let current = BlockedModel::zeros(&s).unwrap();
        let out = FedAvg
            .aggregate_block(id, current.block(id).unwrap(), &updates)
            .unwrap();
        for (t_idx, tensor) in out.iter().enumerate() {
            for (i, v) in tensor.data().iter().enumerate() {
                let expected = 0.1 * a.block(id).unwrap()[t_idx].data()[i]
                    + 0.3 * b.block(id).unwrap()[t_idx].data()[i]
                    + 0.6 * c.block(id).unwrap()[t_idx].data()[i];
                assert!((v - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fedavg_singleton_is_bitwise_identity() {
        let s = spec();
        let a = BlockedModel::init(&s, 4).unwrap();
        let current = BlockedModel::zeros(&s).unwrap();
        let id = BlockId::Encoder(0);
        let out = FedAvg
            .aggregate_block(id, current.block(id).unwrap(), &[(a.block(id).unwrap(), 7.0)])
            .unwrap();
        assert_eq!(&out, a.block(id).unwrap());
    }

    #[test]
    fn fedavg_empty_update_keeps_current() {
        let s = spec();
        let cur = BlockedModel::init(&s, 5).unwrap();
        let id = BlockId::Head;
        let out = FedAvg.aggregate_block(id, cur.block(id).unwrap(), &[]).unwrap();
        assert_eq!(&out, cur.block(id).unwrap());
    }

    fn make_clients(s: &ModelSpec, init: &BlockedModel<f64>) -> Vec<ClientState> {
        let task = SynthTask {
            kind: TaskKind::Redundant,
            n_classes: 3,
            input_dims: s.input_dims.clone(),
            noise_scale: 0.4,
            noise_ratio: 1.0,
            n_samples: 90,
            leak: 0.0,
        };
        let data = task.generate(11).unwrap();
        masks()
            .into_iter()
            .enumerate()
            .map(|(k, mask)| {
                let idx: Vec<usize> = (k * 30..(k + 1) * 30).collect();
                let train = data.gather(&idx[..24]).unwrap();
                let eval = data.gather(&idx[24..]).unwrap();
                ClientState::new(k, mask, train, eval, init, 100 + k as u64).unwrap()
            })
            .collect()
    }

    #[test]
    fn round_rejects_unsolicited_blocks() {
        let s = spec();
        let init = BlockedModel::init(&s, 1).unwrap();
        let mut server = Server::new(&init, AggregationMode::Ph, &masks(), Box::new(FedAvg)).unwrap();
        let mut clients = make_clients(&s, &init);
        let hyper = TrainHyper { lr: 0.05, batch_size: 8, local_epochs: 1 };
        // A well-formed round passes.
        run_round(&mut server, &mut clients, 0, &hyper).unwrap();
        // A forged update carrying the private head is rejected.
        let mut update = clients[0]
            .local_update(1, &[BlockId::Encoder(0), BlockId::Fusion], &hyper)
            .unwrap();
        update
            .blocks
            .insert(BlockId::Head, clients[0].model().block(BlockId::Head).unwrap().clone());
        let err = server.apply_updates(1, &[update]).unwrap_err();
        assert!(matches!(err, Error::Protocol { .. }));
    }

    #[test]
    fn rounds_are_deterministic() {
        let s = spec();
        let init = BlockedModel::init(&s, 1).unwrap();
        let hyper = TrainHyper { lr: 0.05, batch_size: 8, local_epochs: 1 };
        let run = || {
            let mut server =
                Server::new(&init, AggregationMode::Phf, &masks(), Box::new(FedAvg)).unwrap();
            let mut clients = make_clients(&s, &init);
            for round in 0..3 {
                run_round(&mut server, &mut clients, round, &hyper).unwrap();
            }
            (
                server.shared_block(BlockId::Encoder(0)).unwrap().clone(),
                clients[2].model().block(BlockId::Head).unwrap().clone(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn comm_volume_orders_by_mode() {
        let s = spec();
        let init = BlockedModel::init(&s, 1).unwrap();
        let comm = |mode| {
            Server::new(&init, mode, &masks(), Box::new(FedAvg))
                .unwrap()
                .round_comm()
                .unwrap()
                .total_params()
        };
        let fm = comm(AggregationMode::Fm);
        let ph = comm(AggregationMode::Ph);
        let phf = comm(AggregationMode::Phf);
        assert!(phf < ph && ph < fm, "phf {phf} ph {ph} fm {fm}");
    }

    #[test]
    fn sync_clients_installs_shared_state() {
        let s = spec();
        let init = BlockedModel::init(&s, 1).unwrap();
        let mut server = Server::new(&init, AggregationMode::Ph, &masks(), Box::new(FedAvg)).unwrap();
        let mut clients = make_clients(&s, &init);
        let hyper = TrainHyper { lr: 0.05, batch_size: 8, local_epochs: 1 };
        run_round(&mut server, &mut clients, 0, &hyper).unwrap();
        sync_clients(&server, &mut clients).unwrap();
        for client in &clients {
            assert_eq!(
                client.model().block(BlockId::Fusion).unwrap(),
                server.shared_block(BlockId::Fusion).unwrap()
            );
        }
    }

    proptest! {
        // Aggregation against an independent scalar-loop oracle over
        // random weights and parameter values.
        #[test]
        fn fedavg_equals_scalar_oracle(
            values in proptest::collection::vec(
                proptest::collection::vec(-5.0f64..5.0, 6),
                1..6
            ),
            raw_weights in proptest::collection::vec(1usize..500, 6),
        ) {
            let n = values.len();
            let weights: Vec<f64> = raw_weights[..n].iter().map(|w| *w as f64).collect();
            let blocks: Vec<BlockParams<f64>> = values
                .iter()
                .map(|v| vec![Tensor::matrix(2, 3, v.clone()).unwrap()])
                .collect();
            let updates: Vec<(&BlockParams<f64>, f64)> =
                blocks.iter().zip(weights.iter().copied()).collect();
            let current = vec![Tensor::zeros(vec![2, 3])];
            let out = FedAvg
                .aggregate_block(BlockId::Fusion, &current, &updates)
                .unwrap();
            let total: f64 = weights.iter().sum();
            for i in 0..6 {
                let mut expected = 0.0;
                for (v, w) in values.iter().zip(&weights) {
                    expected += v[i] * w / total;
                }
                prop_assert!((out[0].data()[i] - expected).abs() <= 1e-12);
            }
        }
    }
}
