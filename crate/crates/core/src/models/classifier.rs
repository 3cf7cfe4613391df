//! A small residual MLP classifier whose hidden blocks can be wrapped in
//! the correction layer. The operator is built from whatever batch is
//! presented, so inference is transductive: the batch size used at test
//! time (m_infer) shapes the prediction.

use crate::error::Result;
use crate::graph::NodeId;
use crate::kernel::EpsilonPolicy;
use crate::layer::{tmd_forward, HeadKind, KernelSource, TmdLayerParams};
use crate::nn::{accuracy, argmax_rows, linear, ovr_logistic_loss, LinearParams};
use crate::params::{ParamStore, Recorder};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Correction-layer settings shared by the models.
#[derive(Debug, Clone, Copy)]
pub struct TmdSettings {
    pub latent_dim: usize,
    pub epsilon: EpsilonPolicy,
    pub kernel_source: KernelSource,
    pub freeze_delta_t: bool,
    pub delta_t_init: f64,
}

impl Default for TmdSettings {
    fn default() -> Self {
        TmdSettings {
            latent_dim: 16,
            epsilon: EpsilonPolicy::MedianPerBatch,
            kernel_source: KernelSource::InputFeatures,
            freeze_delta_t: false,
            delta_t_init: 0.0,
        }
    }
}

pub struct Block {
    pub lin: LinearParams,
    pub tmd: Option<TmdLayerParams>,
}

pub struct MlpClassifier {
    pub embed: LinearParams,
    pub blocks: Vec<Block>,
    pub head: LinearParams,
}

impl MlpClassifier {
    /// Base weights come from `rng`; correction-layer weights come from a
    /// separate stream so that models with and without the correction
    /// share identical base initializations.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut StreamRng,
        tmd_rng: &mut StreamRng,
        in_dim: usize,
        hidden_dim: usize,
        n_blocks: usize,
        classes: usize,
        tmd: Option<TmdSettings>,
    ) -> Self {
        let embed = LinearParams::init(store, rng, "embed", in_dim, hidden_dim, true);
        let mut blocks = Vec::with_capacity(n_blocks);
        for b in 0..n_blocks {
            let lin = LinearParams::init(store, rng, &format!("block{b}"), hidden_dim, hidden_dim, true);
            blocks.push(Block { lin, tmd: None });
        }
        let head = LinearParams::init(store, rng, "head", hidden_dim, classes, true);
        if let Some(settings) = tmd {
            for (b, block) in blocks.iter_mut().enumerate() {
                let mut params = TmdLayerParams::init(
                    store,
                    tmd_rng,
                    &format!("block{b}.tmd"),
                    hidden_dim,
                    settings.latent_dim,
                    settings.epsilon,
                    HeadKind::Linear,
                    settings.kernel_source,
                );
                params.freeze_delta_t = settings.freeze_delta_t;
                store.set(params.delta_t, Tensor::scalar(settings.delta_t_init).expect("finite"));
                block.tmd = Some(params);
            }
        }
        MlpClassifier { embed, blocks, head }
    }
}

/// Logits for one batch on an open recording; the correction (when
/// enabled and present) builds its operator over this whole batch.
pub fn classifier_logits(
    rec: &mut Recorder,
    model: &MlpClassifier,
    x: NodeId,
    use_tmd: bool,
) -> Result<NodeId> {
    let e = linear(rec, x, &model.embed)?;
    let mut h = rec.graph.relu(e)?;
    for block in &model.blocks {
        let lin = block.lin;
        let f = move |rec: &mut Recorder, v: NodeId| {
            let z = linear(rec, v, &lin)?;
            let r = rec.graph.relu(z)?;
            rec.graph.add(v, r)
        };
        h = match &block.tmd {
            Some(params) if use_tmd => tmd_forward(rec, &f, h, params)?,
            _ => f(rec, h)?,
        };
    }
    linear(rec, h, &model.head)
}

/// Batched inference: rows are processed in chunks of `m_infer`, and the
/// operator is rebuilt from each chunk. `m_infer = 1` reduces every
/// wrapped block to its plain function.
pub fn classifier_forward(
    store: &ParamStore,
    model: &MlpClassifier,
    batch: &Tensor,
    use_tmd: bool,
    m_infer: usize,
) -> Result<Tensor> {
    let m = batch.rows();
    assert!(m_infer >= 1 && m_infer <= m, "m_infer must be in 1..=batch rows");
    let mut logits_rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut start = 0;
    while start < m {
        let end = (start + m_infer).min(m);
        let chunk: Vec<Vec<f64>> = (start..end).map(|i| batch.row(i).to_vec()).collect();
        let mut rec = Recorder::new(store);
        let x = rec.constant(Tensor::from_rows(&chunk)?);
        let logits = classifier_logits(&mut rec, model, x, use_tmd)?;
        let values = rec.graph.value(logits);
        for i in 0..values.rows() {
            logits_rows.push(values.row(i).to_vec());
        }
        start = end;
    }
    Tensor::from_rows(&logits_rows)
}

/// Loss and accuracy over a labeled set, chunked like
/// [`classifier_forward`].
pub fn evaluate_classifier(
    store: &ParamStore,
    model: &MlpClassifier,
    x: &Tensor,
    y: &[usize],
    use_tmd: bool,
    m_infer: usize,
) -> Result<(f64, f64)> {
    let m = x.rows();
    assert_eq!(y.len(), m);
    let mut weighted_loss = 0.0;
    let mut predictions = Vec::with_capacity(m);
    let mut start = 0;
    while start < m {
        let end = (start + m_infer.min(m)).min(m);
        let chunk: Vec<Vec<f64>> = (start..end).map(|i| x.row(i).to_vec()).collect();
        let mut rec = Recorder::new(store);
        let xn = rec.constant(Tensor::from_rows(&chunk)?);
        let logits = classifier_logits(&mut rec, model, xn, use_tmd)?;
        let loss = ovr_logistic_loss(&mut rec, logits, &y[start..end])?;
        weighted_loss += rec.graph.value(loss).item() * (end - start) as f64;
        predictions.extend(argmax_rows(rec.graph.value(logits)));
        start = end;
    }
    Ok((weighted_loss / m as f64, accuracy(&predictions, y)))
}
