//! Late-fusion multimodal classifier split into aggregation blocks.
//!
//! The parameter set is partitioned into named blocks: one encoder per
//! modality, a fusion block, and a classification head. Federated
//! aggregation operates on whole blocks, so every routine here that
//! walks parameters does it in the canonical order defined by
//! `BlockId`'s ordering and, inside a block, by the fixed tensor list
//! of `ModelSpec::tensor_shapes`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, ValueId};
use crate::tape::softmax_value;
use crate::tensor::{matmul_value, Tensor};

/// Identifier of an independently aggregatable parameter group.
///
/// The derived ordering (encoders by modality index, then fusion, then
/// head) is the canonical order for initialization draws, flattening,
/// checkpoints, and aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BlockId {
    Encoder(usize),
    Fusion,
    Head,
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockId::Encoder(m) => write!(f, "encoder{m}"),
            BlockId::Fusion => write!(f, "fusion"),
            BlockId::Head => write!(f, "head"),
        }
    }
}

impl FromStr for BlockId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(BlockId::Fusion),
            "head" => Ok(BlockId::Head),
            other => {
                let idx = other
                    .strip_prefix("encoder")
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| Error::Block(format!("unknown block id `{other}`")))?;
                Ok(BlockId::Encoder(idx))
            }
        }
    }
}

/// How per-modality embeddings are combined before the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Concat,
    Attention,
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionKind::Concat => write!(f, "concat"),
            FusionKind::Attention => write!(f, "attention"),
        }
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionKind::Concat),
            "attention" => Ok(FusionKind::Attention),
            other => Err(Error::Config {
                path: "fusion".into(),
                detail: format!("unknown fusion kind `{other}` (expected concat or attention)"),
            }),
        }
    }
}

/// Which modalities a client observes. At least one must be present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityMask {
    present: Vec<bool>,
}

impl ModalityMask {
    pub fn new(present: Vec<bool>) -> Result<Self> {
        if present.is_empty() || !present.iter().any(|p| *p) {
            return Err(Error::ModalityConfig(
                "a modality mask needs at least one present modality".into(),
            ));
        }
        Ok(Self { present })
    }

    pub fn full(n_modalities: usize) -> Self {
        Self {
            present: vec![true; n_modalities],
        }
    }

    pub fn single(n_modalities: usize, idx: usize) -> Result<Self> {
        if idx >= n_modalities {
            return Err(Error::ModalityConfig(format!(
                "modality {idx} out of range for {n_modalities} modalities"
            )));
        }
        let mut present = vec![false; n_modalities];
        present[idx] = true;
        Self::new(present)
    }

    pub fn n_modalities(&self) -> usize {
        self.present.len()
    }

    pub fn is_present(&self, m: usize) -> bool {
        self.present.get(m).copied().unwrap_or(false)
    }

    pub fn present_indices(&self) -> Vec<usize> {
        (0..self.present.len())
            .filter(|m| self.present[*m])
            .collect()
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.present {
            write!(f, "{}", if *p { '1' } else { '0' })?;
        }
        Ok(())
    }
}

/// Architecture description shared by every participant in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_classes: usize,
    /// Raw feature width of each modality, in modality order.
    pub input_dims: Vec<usize>,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub fusion_dim: usize,
    pub fusion: FusionKind,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Spec(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.input_dims.is_empty() {
            return Err(Error::Spec("need at least one modality".into()));
        }
        for (m, d) in self.input_dims.iter().enumerate() {
            if *d == 0 {
                return Err(Error::Spec(format!("modality {m} has zero input width")));
            }
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 || self.fusion_dim == 0 {
            return Err(Error::Spec("hidden, embed and fusion dims must be positive".into()));
        }
        Ok(())
    }

    pub fn n_modalities(&self) -> usize {
        self.input_dims.len()
    }

    /// All block ids in canonical order.
    pub fn block_ids(&self) -> Vec<BlockId> {
        let mut ids: Vec<BlockId> = (0..self.n_modalities()).map(BlockId::Encoder).collect();
        ids.push(BlockId::Fusion);
        ids.push(BlockId::Head);
        ids
    }

    /// Tensor shapes of one block, in canonical in-block order
    /// (weights before their bias, layers in forward order).
    pub fn tensor_shapes(&self, id: BlockId) -> Result<Vec<Vec<usize>>> {
        let m_count = self.n_modalities();
        let d = self.embed_dim;
        match id {
            BlockId::Encoder(m) => {
                let input = *self.input_dims.get(m).ok_or_else(|| {
                    Error::Block(format!("encoder {m} out of range for {m_count} modalities"))
                })?;
                let h = self.hidden_dim;
                Ok(vec![vec![input, h], vec![h], vec![h, d], vec![d]])
            }
            BlockId::Fusion => {
                let f = self.fusion_dim;
                match self.fusion {
                    FusionKind::Concat => Ok(vec![vec![m_count * d, f], vec![f]]),
                    FusionKind::Attention => {
                        let mut shapes: Vec<Vec<usize>> =
                            (0..m_count).map(|_| vec![d, 1]).collect();
                        shapes.push(vec![d, f]);
                        shapes.push(vec![f]);
                        Ok(shapes)
                    }
                }
            }
            BlockId::Head => Ok(vec![vec![self.fusion_dim, self.n_classes], vec![self.n_classes]]),
        }
    }

    /// Fan-in used for the init bound of each tensor in a block. A bias
    /// shares the fan-in of the weight feeding the same layer.
    fn tensor_fan_ins(&self, id: BlockId) -> Result<Vec<usize>> {
        let d = self.embed_dim;
        match id {
            BlockId::Encoder(m) => {
                let input = self.input_dims[m];
                let h = self.hidden_dim;
                Ok(vec![input, input, h, h])
            }
            BlockId::Fusion => match self.fusion {
                FusionKind::Concat => {
                    let fan = self.n_modalities() * d;
                    Ok(vec![fan, fan])
                }
                FusionKind::Attention => {
                    let mut fans = vec![d; self.n_modalities()];
                    fans.push(d);
                    fans.push(d);
                    Ok(fans)
                }
            },
            BlockId::Head => Ok(vec![self.fusion_dim, self.fusion_dim]),
        }
    }

    pub fn block_param_count(&self, id: BlockId) -> Result<usize> {
        Ok(self
            .tensor_shapes(id)?
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum())
    }

    pub fn total_param_count(&self) -> usize {
        self.block_ids()
            .into_iter()
            .map(|id| self.block_param_count(id).expect("own block ids are valid"))
            .sum()
    }
}

/// Parameters of one block in canonical tensor order.
pub type BlockParams<T> = Vec<Tensor<T>>;

/// Full parameter set keyed by block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockedModel<T> {
    spec: ModelSpec,
    blocks: BTreeMap<BlockId, BlockParams<T>>,
}

impl<T: Scalar> BlockedModel<T> {
    /// Initialize every tensor from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// drawing in canonical block and tensor order from a ChaCha8 stream
    /// so one seed fully determines the model.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = BTreeMap::new();
        for id in spec.block_ids() {
            let shapes = spec.tensor_shapes(id)?;
            let fans = spec.tensor_fan_ins(id)?;
            let mut tensors = Vec::with_capacity(shapes.len());
            for (shape, fan) in shapes.into_iter().zip(fans) {
                let bound = 1.0 / (fan as f64).sqrt();
                let n: usize = shape.iter().product();
                let mut data = Vec::with_capacity(n);
                for _ in 0..n {
                    data.push(T::from_f64(rng.random_range(-bound..bound)));
                }
                tensors.push(Tensor::new(shape, data)?);
            }
            blocks.insert(id, tensors);
        }
        Ok(Self {
            spec: spec.clone(),
            blocks,
        })
    }

    /// Build a model with every parameter zero (aggregation accumulator).
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut blocks = BTreeMap::new();
        for id in spec.block_ids() {
            let tensors = spec
                .tensor_shapes(id)?
                .into_iter()
                .map(Tensor::zeros)
                .collect();
            blocks.insert(id, tensors);
        }
        Ok(Self {
            spec: spec.clone(),
            blocks,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn block(&self, id: BlockId) -> Result<&BlockParams<T>> {
        self.blocks
            .get(&id)
            .ok_or_else(|| Error::Block(format!("model has no block `{id}`")))
    }

    pub fn blocks(&self) -> &BTreeMap<BlockId, BlockParams<T>> {
        &self.blocks
    }

    /// Replace one block, validating tensor count and shapes.
    pub fn set_block(&mut self, id: BlockId, params: BlockParams<T>) -> Result<()> {
        let shapes = self.spec.tensor_shapes(id)?;
        if shapes.len() != params.len() {
            return Err(Error::block_len(id, shapes.len(), params.len()));
        }
        for (expected, got) in shapes.iter().zip(&params) {
            if expected.as_slice() != got.shape() {
                return Err(Error::Block(format!(
                    "block `{id}` tensor shape {:?} does not match expected {:?}",
                    got.shape(),
                    expected
                )));
            }
        }
        self.blocks.insert(id, params);
        Ok(())
    }

    /// All parameters in canonical order as one flat vector.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for params in self.blocks.values() {
            for t in params {
                out.extend_from_slice(t.data());
            }
        }
        out
    }

    /// Rebuild a model from `flatten` output.
    pub fn from_flat(spec: &ModelSpec, flat: &[T]) -> Result<Self> {
        let mut model = Self::zeros(spec)?;
        let total = spec.total_param_count();
        if flat.len() != total {
            return Err(Error::Block(format!(
                "flat parameter vector has {} values, model needs {total}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for id in spec.block_ids() {
            let mut tensors = Vec::new();
            for shape in spec.tensor_shapes(id)? {
                let n: usize = shape.iter().product();
                tensors.push(Tensor::new(shape, flat[offset..offset + n].to_vec())?);
                offset += n;
            }
            model.blocks.insert(id, tensors);
        }
        Ok(model)
    }

    /// Record every parameter as a tape leaf, canonical order.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel<T> {
        let mut params = BTreeMap::new();
        for (id, tensors) in &self.blocks {
            let ids: Vec<ValueId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
            params.insert(*id, ids);
        }
        BoundModel {
            spec: self.spec.clone(),
            params,
            _scalar: std::marker::PhantomData,
        }
    }

    /// One SGD step over every block: `p <- p - lr * g`.
    pub fn sgd_step(&mut self, bound: &BoundModel<T>, grads: &Gradients<T>, lr: T) -> Result<()> {
        for (id, params) in self.blocks.iter_mut() {
            let leaves = bound
                .params
                .get(id)
                .ok_or_else(|| Error::Block(format!("bound model has no block `{id}`")))?;
            for (tensor, leaf) in params.iter_mut().zip(leaves) {
                let g = grads.get(*leaf)?;
                for (p, gv) in tensor.data_mut().iter_mut().zip(g.data()) {
                    *p = *p - lr * *gv;
                }
            }
        }
        Ok(())
    }

    /// Forward pass without recording a tape. Uses the same primitive
    /// routines in the same order as the recorded forward, so outputs
    /// are bit-identical to `BoundModel::forward`.
    pub fn forward_values(
        &self,
        xs: &[Tensor<T>],
        mask: &ModalityMask,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let m_count = self.spec.n_modalities();
        check_inputs(&self.spec, xs, mask)?;
        let batch = xs[0].dims2().0;
        let d = self.spec.embed_dim;

        let mut embeds = Vec::with_capacity(m_count);
        for m in 0..m_count {
            if mask.is_present(m) {
                let enc = self.block(BlockId::Encoder(m))?;
                let h1 = tanh_map(&add_bias_value(&matmul_value(&xs[m], &enc[0])?, &enc[1])?);
                let e = tanh_map(&add_bias_value(&matmul_value(&h1, &enc[2])?, &enc[3])?);
                embeds.push(e);
            } else {
                embeds.push(Tensor::zeros(vec![batch, d]));
            }
        }

        let fusion = self.block(BlockId::Fusion)?;
        let (fused, attention) = match self.spec.fusion {
            FusionKind::Concat => {
                let cat = concat_cols_value(&embeds)?;
                let z = tanh_map(&add_bias_value(
                    &matmul_value(&cat, &fusion[0])?,
                    &fusion[1],
                )?);
                (z, None)
            }
            FusionKind::Attention => {
                let mut score_cols = Vec::with_capacity(m_count);
                for (m, e) in embeds.iter().enumerate() {
                    score_cols.push(matmul_value(e, &fusion[m])?);
                }
                let scores = concat_cols_value(&score_cols)?;
                let alpha = softmax_value(&scores)?;
                let mut pooled = Tensor::zeros(vec![batch, d]);
                for (m, e) in embeds.iter().enumerate() {
                    let col = slice_cols_value(&alpha, m, 1)?;
                    let scaled = row_scale_value(e, &col)?;
                    pooled = add_value(&pooled, &scaled)?;
                }
                let z = tanh_map(&add_bias_value(
                    &matmul_value(&pooled, &fusion[m_count])?,
                    &fusion[m_count + 1],
                )?);
                (z, Some(alpha))
            }
        };

        let head = self.block(BlockId::Head)?;
        let logits = add_bias_value(&matmul_value(&fused, &head[0])?, &head[1])?;
        Ok((logits, attention))
    }

    /// Class predictions for a batch under a modality mask.
    pub fn predict(&self, xs: &[Tensor<T>], mask: &ModalityMask) -> Result<Vec<usize>> {
        let (logits, _) = self.forward_values(xs, mask)?;
        let (rows, _) = logits.dims2();
        Ok((0..rows).map(|i| logits.argmax_row(i)).collect())
    }
}

/// Tape-bound view of a model: leaf ids per block, canonical order.
#[derive(Debug)]
pub struct BoundModel<T> {
    spec: ModelSpec,
    params: BTreeMap<BlockId, Vec<ValueId>>,
    _scalar: std::marker::PhantomData<T>,
}

impl<T: Scalar> BoundModel<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn leaves(&self, id: BlockId) -> Result<&[ValueId]> {
        self.params
            .get(&id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Block(format!("bound model has no block `{id}`")))
    }

    /// Record the forward graph for a batch. Absent modalities feed a
    /// constant zero embedding, so their encoder leaves never enter the
    /// graph and keep exactly zero gradients.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        xs: &[Tensor<T>],
        mask: &ModalityMask,
    ) -> Result<ForwardOutput> {
        let m_count = self.spec.n_modalities();
        check_inputs(&self.spec, xs, mask)?;
        let batch = xs[0].dims2().0;
        let d = self.spec.embed_dim;

        let mut embeds = Vec::with_capacity(m_count);
        for m in 0..m_count {
            if mask.is_present(m) {
                let enc = self.leaves(BlockId::Encoder(m))?.to_vec();
                let x = tape.leaf(xs[m].clone());
                let z1 = tape.matmul(x, enc[0])?;
                let z1b = tape.add_bias(z1, enc[1])?;
                let h1 = tape.tanh(z1b)?;
                let z2 = tape.matmul(h1, enc[2])?;
                let z2b = tape.add_bias(z2, enc[3])?;
                embeds.push(tape.tanh(z2b)?);
            } else {
                embeds.push(tape.leaf(Tensor::zeros(vec![batch, d])));
            }
        }

        let fusion = self.leaves(BlockId::Fusion)?.to_vec();
        let (fused, attention) = match self.spec.fusion {
            FusionKind::Concat => {
                let cat = tape.concat_cols(&embeds)?;
                let zp = tape.matmul(cat, fusion[0])?;
                let zb = tape.add_bias(zp, fusion[1])?;
                (tape.tanh(zb)?, None)
            }
            FusionKind::Attention => {
                // Scores of absent modalities are zero but stay in the
                // softmax, so attention mass always spans all slots.
                let mut score_cols = Vec::with_capacity(m_count);
                for (m, e) in embeds.iter().enumerate() {
                    score_cols.push(tape.matmul(*e, fusion[m])?);
                }
                let scores = tape.concat_cols(&score_cols)?;
                let alpha = tape.softmax(scores)?;
                let mut pooled = tape.leaf(Tensor::zeros(vec![batch, d]));
                for (m, e) in embeds.iter().enumerate() {
                    let col = tape.slice_cols(alpha, m, 1)?;
                    let scaled = tape.row_scale(*e, col)?;
                    pooled = tape.add(pooled, scaled)?;
                }
                let zp = tape.matmul(pooled, fusion[m_count])?;
                let zb = tape.add_bias(zp, fusion[m_count + 1])?;
                (tape.tanh(zb)?, Some(alpha))
            }
        };

        let head = self.leaves(BlockId::Head)?.to_vec();
        let zh = tape.matmul(fused, head[0])?;
        let logits = tape.add_bias(zh, head[1])?;
        Ok(ForwardOutput { logits, attention })
    }
}

/// Result of a recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits: ValueId,
    /// Attention weights over modality slots, when the fusion has them.
    pub attention: Option<ValueId>,
}

fn check_inputs<T: Scalar>(spec: &ModelSpec, xs: &[Tensor<T>], mask: &ModalityMask) -> Result<()> {
    let m_count = spec.n_modalities();
    if xs.len() != m_count {
        return Err(Error::dimension(
            "forward",
            format!("{} input tensors for {m_count} modalities", xs.len()),
        ));
    }
    if mask.n_modalities() != m_count {
        return Err(Error::ModalityConfig(format!(
            "mask covers {} modalities, model has {m_count}",
            mask.n_modalities()
        )));
    }
    let batch = xs[0].dims2().0;
    if batch == 0 {
        return Err(Error::dimension("forward", "empty batch"));
    }
    for (m, x) in xs.iter().enumerate() {
        let (rows, cols) = x.dims2();
        if x.rank() != 2 || rows != batch || cols != spec.input_dims[m] {
            return Err(Error::dimension(
                "forward",
                format!(
                    "modality {m} input shape {:?}, expected [{batch}, {}]",
                    x.shape(),
                    spec.input_dims[m]
                ),
            ));
        }
    }
    Ok(())
}

fn tanh_map<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|v| v.tanh()).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

fn add_value<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::dimension("add", "shape mismatch"));
    }
    let data = a.data().iter().zip(b.data()).map(|(p, q)| *p + *q).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn add_bias_value<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = x.dims2();
    if b.numel() != cols {
        return Err(Error::dimension("add_bias", "bias width mismatch"));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(x.get(i, j) + b.data()[j]);
        }
    }
    Tensor::matrix(rows, cols, data)
}

fn concat_cols_value<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let rows = parts[0].dims2().0;
    let total: usize = parts.iter().map(|p| p.dims2().1).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::matrix(rows, total, data)
}

fn slice_cols_value<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (rows, cols) = x.dims2();
    if start + len > cols {
        return Err(Error::dimension("slice_cols", "range out of bounds"));
    }
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&x.row(r)[start..start + len]);
    }
    Tensor::matrix(rows, len, data)
}

fn row_scale_value<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = x.dims2();
    if s.numel() != rows {
        return Err(Error::dimension("row_scale", "scale length mismatch"));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let f = s.data()[i];
        for j in 0..cols {
            data.push(x.get(i, j) * f);
        }
    }
    Tensor::matrix(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(fusion: FusionKind) -> ModelSpec {
        ModelSpec {
            n_classes: 3,
            input_dims: vec![4, 5],
            hidden_dim: 6,
            embed_dim: 4,
            fusion_dim: 5,
            fusion,
        }
    }

    fn sample_inputs(spec: &ModelSpec, batch: usize, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        spec.input_dims
            .iter()
            .map(|d| {
                let data = (0..batch * d).map(|_| rng.random_range(-1.0..1.0)).collect();
                Tensor::matrix(batch, *d, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn block_order_is_encoders_fusion_head() {
        let s = spec(FusionKind::Concat);
        assert_eq!(
            s.block_ids(),
            vec![BlockId::Encoder(0), BlockId::Encoder(1), BlockId::Fusion, BlockId::Head]
        );
        assert!(BlockId::Encoder(1) < BlockId::Fusion);
        assert!(BlockId::Fusion < BlockId::Head);
    }

    #[test]
    fn block_id_string_roundtrip() {
        for id in [BlockId::Encoder(0), BlockId::Encoder(7), BlockId::Fusion, BlockId::Head] {
            assert_eq!(id.to_string().parse::<BlockId>().unwrap(), id);
        }
        assert!("encoderx".parse::<BlockId>().is_err());
    }

    #[test]
    fn param_counts_match_shapes() {
        let s = spec(FusionKind::Concat);
        // encoder0: 4*6 + 6 + 6*4 + 4 = 58
        assert_eq!(s.block_param_count(BlockId::Encoder(0)).unwrap(), 58);
        // fusion: (2*4)*5 + 5 = 45
        assert_eq!(s.block_param_count(BlockId::Fusion).unwrap(), 45);
        // head: 5*3 + 3 = 18
        assert_eq!(s.block_param_count(BlockId::Head).unwrap(), 18);
        let a = spec(FusionKind::Attention);
        // fusion: 2 score vectors (4 each) + 4*5 + 5 = 33
        assert_eq!(a.block_param_count(BlockId::Fusion).unwrap(), 33);
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let s = spec(FusionKind::Attention);
        let a = BlockedModel::<f64>::init(&s, 42).unwrap();
        let b = BlockedModel::<f64>::init(&s, 42).unwrap();
        let c = BlockedModel::<f64>::init(&s, 43).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        assert_ne!(a.flatten(), c.flatten());
        for id in s.block_ids() {
            let fans = s.tensor_fan_ins(id).unwrap();
            for (t, fan) in a.block(id).unwrap().iter().zip(fans) {
                let bound = 1.0 / (fan as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() < bound));
            }
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let s = spec(FusionKind::Concat);
        let m = BlockedModel::<f64>::init(&s, 9).unwrap();
        let flat = m.flatten();
        assert_eq!(flat.len(), s.total_param_count());
        let back = BlockedModel::from_flat(&s, &flat).unwrap();
        assert_eq!(m, back);
        assert!(BlockedModel::<f64>::from_flat(&s, &flat[1..]).is_err());
    }

    #[test]
    fn set_block_validates_shapes() {
        let s = spec(FusionKind::Concat);
        let mut m = BlockedModel::<f64>::init(&s, 1).unwrap();
        let head = m.block(BlockId::Head).unwrap().clone();
        assert!(m.set_block(BlockId::Head, head.clone()).is_ok());
        assert!(m.set_block(BlockId::Head, head[..1].to_vec()).is_err());
        let wrong = vec![Tensor::zeros(vec![2, 2]), Tensor::zeros(vec![3])];
        assert!(m.set_block(BlockId::Head, wrong).is_err());
    }

    #[test]
    fn recorded_and_plain_forward_agree_bitwise() {
        for fusion in [FusionKind::Concat, FusionKind::Attention] {
            let s = spec(fusion);
            let model = BlockedModel::<f64>::init(&s, 5).unwrap();
            let xs = sample_inputs(&s, 3, 11);
            let masks = [
                ModalityMask::full(2),
                ModalityMask::single(2, 0).unwrap(),
                ModalityMask::single(2, 1).unwrap(),
            ];
            for mask in masks {
                let (plain, _) = model.forward_values(&xs, &mask).unwrap();
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let out = bound.forward(&mut tape, &xs, &mask).unwrap();
                let taped = tape.value(out.logits).unwrap();
                assert_eq!(plain.data(), taped.data(), "fusion {fusion} mask {mask}");
            }
        }
    }

    #[test]
    fn logits_shape_and_attention_normalization() {
        let s = spec(FusionKind::Attention);
        let model = BlockedModel::<f64>::init(&s, 3).unwrap();
        let xs = sample_inputs(&s, 4, 7);
        let mask = ModalityMask::single(2, 0).unwrap();
        let (logits, attn) = model.forward_values(&xs, &mask).unwrap();
        assert_eq!(logits.shape(), &[4, 3]);
        let attn = attn.unwrap();
        assert_eq!(attn.shape(), &[4, 2]);
        for i in 0..4 {
            let total: f64 = attn.row(i).iter().sum();
            assert_relative_eq!(total, 1.0, epsilon = 1e-12);
            // The absent slot's score is zero, not excluded: its weight
            // stays strictly positive.
            assert!(attn.get(i, 1) > 0.0);
        }
    }

    #[test]
    fn concat_fusion_has_no_attention_output() {
        let s = spec(FusionKind::Concat);
        let model = BlockedModel::<f64>::init(&s, 3).unwrap();
        let xs = sample_inputs(&s, 2, 7);
        let (_, attn) = model.forward_values(&xs, &ModalityMask::full(2)).unwrap();
        assert!(attn.is_none());
    }

    #[test]
    fn absent_modality_gradients_are_exactly_zero() {
        for fusion in [FusionKind::Concat, FusionKind::Attention] {
            let s = spec(fusion);
            let model = BlockedModel::<f64>::init(&s, 8).unwrap();
            let xs = sample_inputs(&s, 3, 2);
            let mask = ModalityMask::single(2, 1).unwrap();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let out = bound.forward(&mut tape, &xs, &mask).unwrap();
            let loss = tape.cross_entropy(out.logits, &[0, 1, 2]).unwrap();
            let grads = tape.backward(loss).unwrap();
            for leaf in bound.leaves(BlockId::Encoder(0)).unwrap() {
                assert!(grads.get(*leaf).unwrap().data().iter().all(|g| *g == 0.0));
            }
            // The used encoder must receive signal somewhere.
            let used: f64 = bound
                .leaves(BlockId::Encoder(1))
                .unwrap()
                .iter()
                .map(|l| grads.get(*l).unwrap().data().iter().map(|g| g.abs()).sum::<f64>())
                .sum();
            assert!(used > 0.0);
        }
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let s = spec(FusionKind::Concat);
        let mut model = BlockedModel::<f64>::init(&s, 4).unwrap();
        let xs = sample_inputs(&s, 4, 3);
        let labels = vec![0, 1, 2, 0];
        let mask = ModalityMask::full(2);
        let loss_at = |m: &BlockedModel<f64>| {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape);
            let out = bound.forward(&mut tape, &xs, &mask).unwrap();
            let loss = tape.cross_entropy(out.logits, &labels).unwrap();
            tape.value(loss).unwrap().data()[0]
        };
        let before = loss_at(&model);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = bound.forward(&mut tape, &xs, &mask).unwrap();
        let loss = tape.cross_entropy(out.logits, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        model.sgd_step(&bound, &grads, 0.1).unwrap();
        assert!(loss_at(&model) < before);
    }

    #[test]
    fn mask_must_have_a_present_modality() {
        assert!(ModalityMask::new(vec![false, false]).is_err());
        assert!(ModalityMask::new(vec![]).is_err());
        assert!(ModalityMask::single(2, 2).is_err());
    }

    #[test]
    fn spec_validation_catches_degenerate_dims() {
        let mut s = spec(FusionKind::Concat);
        s.n_classes = 1;
        assert!(s.validate().is_err());
        let mut s2 = spec(FusionKind::Concat);
        s2.input_dims = vec![];
        assert!(s2.validate().is_err());
        let mut s3 = spec(FusionKind::Concat);
        s3.input_dims[1] = 0;
        assert!(s3.validate().is_err());
    }
}
