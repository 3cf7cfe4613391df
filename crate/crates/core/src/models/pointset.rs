//! Point-set classification: per-point embeddings, one correction block
//! over the points of the cloud, a symmetric smooth-max readout, and a
//! linear head. Predictions are invariant to point order because every
//! stage is either pointwise, permutation-equivariant, or symmetric.

use crate::error::Result;
use crate::graph::NodeId;
use crate::layer::{tmd_forward, HeadKind, TmdLayerParams};
use crate::nn::{linear, LinearParams};
use crate::params::{ParamStore, Recorder};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

use super::classifier::TmdSettings;

pub struct PointSetNet {
    pub embed1: LinearParams,
    pub embed2: LinearParams,
    /// The feed-forward layer inside the correction block.
    pub block_ff: LinearParams,
    pub tmd: Option<TmdLayerParams>,
    pub head: LinearParams,
}

impl PointSetNet {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut StreamRng,
        tmd_rng: &mut StreamRng,
        in_dim: usize,
        embed_dim: usize,
        classes: usize,
        tmd: Option<TmdSettings>,
    ) -> Self {
        let embed1 = LinearParams::init(store, rng, "embed1", in_dim, embed_dim, true);
        let embed2 = LinearParams::init(store, rng, "embed2", embed_dim, embed_dim, true);
        let block_ff = LinearParams::init(store, rng, "block", embed_dim, embed_dim, true);
        let head = LinearParams::init(store, rng, "cls", embed_dim, classes, true);
        let tmd = tmd.map(|settings| {
            let mut params = TmdLayerParams::init(
                store,
                tmd_rng,
                "block.tmd",
                embed_dim,
                settings.latent_dim,
                settings.epsilon,
                HeadKind::Linear,
                settings.kernel_source,
            );
            params.freeze_delta_t = settings.freeze_delta_t;
            store.set(params.delta_t, Tensor::scalar(settings.delta_t_init).expect("finite"));
            params
        });
        PointSetNet { embed1, embed2, block_ff, tmd, head }
    }
}

/// Smooth maximum over rows, one value per feature column: an exact
/// log-sum-exp computed by folding `lse(a, b) = a + softplus(b - a)`
/// across the rows. Symmetric up to floating-point summation order.
pub fn smooth_max_rows(rec: &mut Recorder, x: NodeId) -> Result<NodeId> {
    let m = rec.graph.value(x).rows();
    let select_row = |rec: &mut Recorder, i: usize| -> Result<NodeId> {
        let mut sel = vec![0.0; m];
        sel[i] = 1.0;
        let s = rec.constant(Tensor::matrix(1, m, sel)?);
        rec.graph.matmul(s, x)
    };
    let mut acc = select_row(rec, 0)?;
    for i in 1..m {
        let row = select_row(rec, i)?;
        let diff = rec.graph.sub(row, acc)?;
        let sp = rec.graph.softplus(diff)?;
        acc = rec.graph.add(acc, sp)?;
    }
    Ok(acc)
}

/// Class logits (1 x classes) for one cloud (points x features).
pub fn pointset_logits(
    rec: &mut Recorder,
    net: &PointSetNet,
    cloud: NodeId,
    use_tmd: bool,
) -> Result<NodeId> {
    let h = linear(rec, cloud, &net.embed1)?;
    let h = rec.graph.relu(h)?;
    let h = linear(rec, h, &net.embed2)?;
    let h = rec.graph.relu(h)?;

    let ff = net.block_ff;
    let f = move |rec: &mut Recorder, v: NodeId| {
        let z = linear(rec, v, &ff)?;
        rec.graph.relu(z)
    };
    let features = match &net.tmd {
        Some(params) if use_tmd => tmd_forward(rec, &f, h, params)?,
        _ => f(rec, h)?,
    };
    let pooled = smooth_max_rows(rec, features)?;
    linear(rec, pooled, &net.head)
}

/// One cloud in, one logit row out.
pub fn pointset_forward(
    store: &ParamStore,
    net: &PointSetNet,
    cloud: &Tensor,
    use_tmd: bool,
) -> Result<Tensor> {
    let mut rec = Recorder::new(store);
    let x = rec.constant(cloud.clone());
    let logits = pointset_logits(&mut rec, net, x, use_tmd)?;
    Ok(rec.graph.value(logits).clone())
}
