//! Deterministic training loops: SGD with momentum over the parameter
//! store, per-epoch metrics, and the experiment entry point.

use crate::error::{Error, Result};
use crate::nn::{accuracy, argmax_rows, ovr_logistic_loss};
use crate::params::{ParamStore, Recorder};
use crate::report::{fmt_g17, CsvWriter};
use crate::rng::StreamRng;
use crate::tensor::Tensor;
use std::io::Write;

use super::classifier::{
    classifier_logits, evaluate_classifier, MlpClassifier, TmdSettings,
};
use super::data::{gaussian_blobs, shape_cloud_set, two_moons};
use super::pointset::{pointset_forward, pointset_logits, PointSetNet};

/// Which synthetic classification dataset to train on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    TwoMoons,
    /// Three Gaussian blobs; the noise knob sets their spread.
    Blobs,
}

impl DatasetKind {
    pub fn classes(self) -> usize {
        match self {
            DatasetKind::TwoMoons => 2,
            DatasetKind::Blobs => 3,
        }
    }

    fn generate(self, n: usize, noise: f64, rng: &mut StreamRng) -> (Tensor, Vec<usize>) {
        match self {
            DatasetKind::TwoMoons => two_moons(n, noise, rng),
            DatasetKind::Blobs => {
                let centers = vec![vec![0.0, 1.2], vec![-1.0, -0.6], vec![1.0, -0.6]];
                gaussian_blobs(n, &centers, noise.max(0.05), rng)
            }
        }
    }
}

/// Plain SGD with momentum: v <- momentum v - lr g; w <- w + v.
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64, store: &ParamStore) -> Self {
        let velocity = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        SgdMomentum { learning_rate, momentum, velocity }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        assert_eq!(grads.len(), store.len());
        for (i, (id, _, value)) in store
            .iter()
            .map(|(id, n, v)| (id, n.to_string(), v.clone()))
            .collect::<Vec<_>>()
            .into_iter()
            .enumerate()
        {
            let v: Vec<f64> = self.velocity[i]
                .data()
                .iter()
                .zip(grads[i].data())
                .map(|(vel, g)| self.momentum * vel - self.learning_rate * g)
                .collect();
            let velocity = Tensor::new(value.shape().to_vec(), v)?;
            let updated = Tensor::new(
                value.shape().to_vec(),
                value.data().iter().zip(velocity.data()).map(|(w, v)| w + v).collect(),
            )?;
            self.velocity[i] = velocity;
            store.set(id, updated);
        }
        Ok(())
    }
}

/// One metrics record: `epoch,split,loss,metric_name,metric_value`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub metric_name: String,
    pub metric_value: f64,
}

pub fn write_metrics_csv(rows: &[MetricsRow], out: impl Write) -> Result<()> {
    let mut csv = CsvWriter::new(out, &["epoch", "split", "loss", "metric_name", "metric_value"])?;
    for r in rows {
        csv.row(&[
            r.epoch.to_string(),
            r.split.clone(),
            fmt_g17(r.loss),
            r.metric_name.clone(),
            fmt_g17(r.metric_value),
        ])?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ClassifierSpec {
    pub dataset: DatasetKind,
    pub train_size: usize,
    pub test_size: usize,
    pub train_noise: f64,
    /// Fresh input jitter drawn per training batch (both arms see the
    /// same stream); 0 disables augmentation.
    pub augment_noise: f64,
    pub hidden_dim: usize,
    pub blocks: usize,
    pub use_tmd: bool,
    pub tmd: TmdSettings,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub m_infer: usize,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec {
            dataset: DatasetKind::TwoMoons,
            train_size: 240,
            test_size: 200,
            train_noise: 0.15,
            augment_noise: 0.2,
            hidden_dim: 16,
            blocks: 1,
            use_tmd: true,
            tmd: TmdSettings::default(),
            batch_size: 30,
            epochs: 40,
            learning_rate: 0.15,
            momentum: 0.9,
            m_infer: 50,
        }
    }
}

pub struct TrainedClassifier {
    pub spec: ClassifierSpec,
    pub store: ParamStore,
    pub model: MlpClassifier,
    pub history: Vec<MetricsRow>,
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub test_x: Tensor,
    pub test_y: Vec<usize>,
}

/// Build the classifier for a spec with seeded initialization. Base
/// weights and correction weights come from separate streams, so the
/// with- and without-correction arms share base initializations.
pub fn build_classifier(spec: &ClassifierSpec, seed: u64, store: &mut ParamStore) -> MlpClassifier {
    let mut rng = StreamRng::new(seed, "init-model");
    let mut tmd_rng = StreamRng::new(seed, "init-tmd");
    MlpClassifier::init(
        store,
        &mut rng,
        &mut tmd_rng,
        2,
        spec.hidden_dim,
        spec.blocks,
        spec.dataset.classes(),
        spec.use_tmd.then_some(spec.tmd),
    )
}

pub fn train_classifier(spec: &ClassifierSpec, seed: u64) -> Result<TrainedClassifier> {
    let mut data_rng = StreamRng::new(seed, "data-train");
    let (train_x, train_y) = spec.dataset.generate(spec.train_size, spec.train_noise, &mut data_rng);
    let mut test_rng = StreamRng::new(seed, "data-test");
    let (test_x, test_y) = spec.dataset.generate(spec.test_size, spec.train_noise, &mut test_rng);

    let mut store = ParamStore::new();
    let model = build_classifier(spec, seed, &mut store);
    let mut opt = SgdMomentum::new(spec.learning_rate, spec.momentum, &store);
    let mut shuffle_rng = StreamRng::new(seed, "shuffle");
    let mut augment_rng = StreamRng::new(seed, "augment");

    let mut history = Vec::new();
    let record = |epoch: usize,
                      store: &ParamStore,
                      history: &mut Vec<MetricsRow>|
     -> Result<()> {
        for (split, x, y) in [("train", &train_x, &train_y), ("test", &test_x, &test_y)] {
            let (loss, acc) =
                evaluate_classifier(store, &model, x, y, spec.use_tmd, spec.m_infer.min(x.rows()))?;
            history.push(MetricsRow {
                epoch,
                split: split.to_string(),
                loss,
                metric_name: "accuracy".to_string(),
                metric_value: acc,
            });
        }
        Ok(())
    };
    record(0, &store, &mut history)?;

    let mut step = 0usize;
    for epoch in 1..=spec.epochs {
        let mut order: Vec<usize> = (0..spec.train_size).collect();
        shuffle_rng.shuffle(&mut order);
        let mut start = 0;
        while start < order.len() {
            let end = (start + spec.batch_size).min(order.len());
            let mut rows: Vec<Vec<f64>> =
                order[start..end].iter().map(|&i| train_x.row(i).to_vec()).collect();
            let labels: Vec<usize> = order[start..end].iter().map(|&i| train_y[i]).collect();
            if spec.augment_noise > 0.0 {
                for row in rows.iter_mut() {
                    for v in row.iter_mut() {
                        *v += augment_rng.normal(0.0, spec.augment_noise);
                    }
                }
            }

            let mut rec = Recorder::new(&store);
            let x = rec.constant(Tensor::from_rows(&rows)?);
            let logits = classifier_logits(&mut rec, &model, x, spec.use_tmd)?;
            let loss = ovr_logistic_loss(&mut rec, logits, &labels)?;
            let loss_value = rec.graph.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grads = rec.parameter_gradients(loss)?;
            drop(rec);
            opt.step(&mut store, &grads)?;
            step += 1;
            start = end;
        }
        record(epoch, &store, &mut history)?;
    }

    Ok(TrainedClassifier {
        spec: spec.clone(),
        store,
        model,
        history,
        train_x,
        train_y,
        test_x,
        test_y,
    })
}

#[derive(Debug, Clone)]
pub struct PointSetSpec {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub n_points: usize,
    pub jitter: f64,
    pub embed_dim: usize,
    pub use_tmd: bool,
    pub tmd: TmdSettings,
    pub clouds_per_batch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for PointSetSpec {
    fn default() -> Self {
        PointSetSpec {
            train_per_class: 40,
            test_per_class: 20,
            n_points: 64,
            jitter: 0.02,
            embed_dim: 24,
            use_tmd: true,
            tmd: TmdSettings { latent_dim: 8, ..Default::default() },
            clouds_per_batch: 6,
            epochs: 40,
            learning_rate: 0.02,
            momentum: 0.9,
        }
    }
}

pub struct TrainedPointSet {
    pub spec: PointSetSpec,
    pub store: ParamStore,
    pub net: PointSetNet,
    pub history: Vec<MetricsRow>,
    pub train: Vec<(Tensor, usize)>,
    pub test: Vec<(Tensor, usize)>,
}

pub fn build_pointset(spec: &PointSetSpec, seed: u64, store: &mut ParamStore) -> PointSetNet {
    let mut rng = StreamRng::new(seed, "init-model");
    let mut tmd_rng = StreamRng::new(seed, "init-tmd");
    PointSetNet::init(
        store,
        &mut rng,
        &mut tmd_rng,
        3,
        spec.embed_dim,
        3,
        spec.use_tmd.then_some(spec.tmd),
    )
}

pub fn evaluate_pointset(
    store: &ParamStore,
    net: &PointSetNet,
    set: &[(Tensor, usize)],
    use_tmd: bool,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut predictions = Vec::with_capacity(set.len());
    let labels: Vec<usize> = set.iter().map(|(_, l)| *l).collect();
    for (cloud, label) in set {
        let mut rec = Recorder::new(store);
        let x = rec.constant(cloud.clone());
        let logits = pointset_logits(&mut rec, net, x, use_tmd)?;
        let loss = ovr_logistic_loss(&mut rec, logits, &[*label])?;
        loss_sum += rec.graph.value(loss).item();
        predictions.push(argmax_rows(rec.graph.value(logits))[0]);
    }
    Ok((loss_sum / set.len() as f64, accuracy(&predictions, &labels)))
}

pub fn train_pointset(spec: &PointSetSpec, seed: u64) -> Result<TrainedPointSet> {
    let mut train_rng = StreamRng::new(seed, "clouds-train");
    let train = shape_cloud_set(spec.train_per_class, spec.n_points, spec.jitter, &mut train_rng);
    let mut test_rng = StreamRng::new(seed, "clouds-test");
    let test = shape_cloud_set(spec.test_per_class, spec.n_points, spec.jitter, &mut test_rng);

    let mut store = ParamStore::new();
    let net = build_pointset(spec, seed, &mut store);
    let mut opt = SgdMomentum::new(spec.learning_rate, spec.momentum, &store);
    let mut shuffle_rng = StreamRng::new(seed, "shuffle");

    let mut history = Vec::new();
    let record = |epoch: usize, store: &ParamStore, history: &mut Vec<MetricsRow>| -> Result<()> {
        for (split, set) in [("train", &train), ("test", &test)] {
            let (loss, acc) = evaluate_pointset(store, &net, set, spec.use_tmd)?;
            history.push(MetricsRow {
                epoch,
                split: split.to_string(),
                loss,
                metric_name: "accuracy".to_string(),
                metric_value: acc,
            });
        }
        Ok(())
    };
    record(0, &store, &mut history)?;

    let mut step = 0usize;
    for epoch in 1..=spec.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut start = 0;
        while start < order.len() {
            let end = (start + spec.clouds_per_batch).min(order.len());
            let mut rec = Recorder::new(&store);
            let mut batch_loss: Option<crate::graph::NodeId> = None;
            for &idx in &order[start..end] {
                let (cloud, label) = &train[idx];
                let x = rec.constant(cloud.clone());
                let logits = pointset_logits(&mut rec, &net, x, spec.use_tmd)?;
                let loss = ovr_logistic_loss(&mut rec, logits, &[*label])?;
                batch_loss = Some(match batch_loss {
                    None => loss,
                    Some(acc) => rec.graph.add(acc, loss)?,
                });
            }
            let total = batch_loss.expect("nonempty batch");
            let scale = rec.constant(Tensor::scalar(1.0 / (end - start) as f64)?);
            let mean_loss = rec.graph.scalar_mul(scale, total)?;
            let loss_value = rec.graph.value(mean_loss).item();
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grads = rec.parameter_gradients(mean_loss)?;
            drop(rec);
            opt.step(&mut store, &grads)?;
            step += 1;
            start = end;
        }
        record(epoch, &store, &mut history)?;
    }

    Ok(TrainedPointSet { spec: spec.clone(), store, net, history, train, test })
}

/// The experiment entry point: which model family to train.
#[derive(Debug, Clone)]
pub enum TrainSpec {
    Classifier(ClassifierSpec),
    PointSet(PointSetSpec),
}

pub enum TrainedModel {
    Classifier(Box<TrainedClassifier>),
    PointSet(Box<TrainedPointSet>),
}

impl TrainedModel {
    pub fn history(&self) -> &[MetricsRow] {
        match self {
            TrainedModel::Classifier(t) => &t.history,
            TrainedModel::PointSet(t) => &t.history,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            TrainedModel::Classifier(t) => &t.store,
            TrainedModel::PointSet(t) => &t.store,
        }
    }
}

/// Deterministic given (spec, seed); the history records the initial
/// metrics (epoch 0) and one row per split per epoch.
pub fn train(spec: &TrainSpec, seed: u64) -> Result<TrainedModel> {
    match spec {
        TrainSpec::Classifier(s) => Ok(TrainedModel::Classifier(Box::new(train_classifier(s, seed)?))),
        TrainSpec::PointSet(s) => Ok(TrainedModel::PointSet(Box::new(train_pointset(s, seed)?))),
    }
}

/// Evaluate a trained point-set model on fresh noisy copies of its test
/// set (utility for robustness probes).
pub fn pointset_test_accuracy(run: &TrainedPointSet) -> Result<f64> {
    let (_, acc) = evaluate_pointset(&run.store, &run.net, &run.test, run.spec.use_tmd)?;
    Ok(acc)
}

/// Quick probe of the per-forward overhead of the correction: time the
/// plain and corrected forwards on one batch and report the fraction of
/// the corrected forward spent on the correction.
pub fn classifier_overhead_fraction(run: &TrainedClassifier) -> Result<f64> {
    if !run.spec.use_tmd {
        return Ok(0.0);
    }
    let rows = run.spec.batch_size.min(run.train_x.rows());
    let chunk: Vec<Vec<f64>> = (0..rows).map(|i| run.train_x.row(i).to_vec()).collect();
    let batch = Tensor::from_rows(&chunk)?;
    let reps = 10;
    let timed = |use_tmd: bool| -> Result<f64> {
        let start = std::time::Instant::now();
        for _ in 0..reps {
            let mut rec = Recorder::new(&run.store);
            let x = rec.constant(batch.clone());
            let logits = classifier_logits(&mut rec, &run.model, x, use_tmd)?;
            let _ = rec.graph.value(logits);
        }
        Ok(start.elapsed().as_secs_f64())
    };
    let plain = timed(false)?;
    let with = timed(true)?;
    if with <= 0.0 {
        return Ok(0.0);
    }
    Ok(((with - plain) / with).max(0.0))
}

/// Convenience for robustness probes: forward a perturbed copy of the
/// test set and return accuracy.
pub fn classifier_noisy_test_accuracy(
    run: &TrainedClassifier,
    sigma: f64,
    noise_seed: u64,
    m_infer: usize,
) -> Result<f64> {
    let mut rng = StreamRng::new(noise_seed, "eval-noise");
    let noisy = super::data::add_noise(&run.test_x, sigma, &mut rng);
    let logits = super::classifier::classifier_forward(
        &run.store,
        &run.model,
        &noisy,
        run.spec.use_tmd,
        m_infer.min(noisy.rows()),
    )?;
    Ok(accuracy(&argmax_rows(&logits), &run.test_y))
}

/// Noisy-copy accuracy for point-set models.
pub fn pointset_noisy_test_accuracy(
    run: &TrainedPointSet,
    sigma: f64,
    noise_seed: u64,
) -> Result<f64> {
    let mut rng = StreamRng::new(noise_seed, "eval-noise");
    let labels: Vec<usize> = run.test.iter().map(|(_, l)| *l).collect();
    let mut predictions = Vec::with_capacity(run.test.len());
    for (cloud, _) in &run.test {
        let noisy = super::data::add_noise(cloud, sigma, &mut rng);
        let logits = pointset_forward(&run.store, &run.net, &noisy, run.spec.use_tmd)?;
        predictions.push(argmax_rows(&logits)[0]);
    }
    Ok(accuracy(&predictions, &labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_classifier_spec() -> ClassifierSpec {
        ClassifierSpec {
            train_size: 40,
            test_size: 30,
            epochs: 3,
            batch_size: 10,
            hidden_dim: 8,
            m_infer: 10,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_yield_initial_metrics_only() {
        let spec = ClassifierSpec { epochs: 0, ..tiny_classifier_spec() };
        let run = train_classifier(&spec, 0).unwrap();
        assert_eq!(run.history.len(), 2); // train + test at epoch 0
        assert!(run.history.iter().all(|r| r.epoch == 0));
    }

    #[test]
    fn classifier_training_reduces_loss() {
        let spec = ClassifierSpec { epochs: 8, ..tiny_classifier_spec() };
        let run = train_classifier(&spec, 1).unwrap();
        let first = run
            .history
            .iter()
            .find(|r| r.epoch == 0 && r.split == "train")
            .unwrap()
            .loss;
        let last = run
            .history
            .iter()
            .rev()
            .find(|r| r.split == "train")
            .unwrap()
            .loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let spec = tiny_classifier_spec();
        let a = train_classifier(&spec, 5).unwrap();
        let b = train_classifier(&spec, 5).unwrap();
        for ((_, _, ta), (_, _, tb)) in a.store.iter().zip(b.store.iter()) {
            assert!(ta.bit_eq(tb));
        }
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn metrics_csv_shape() {
        let rows = vec![MetricsRow {
            epoch: 0,
            split: "train".into(),
            loss: 0.5,
            metric_name: "accuracy".into(),
            metric_value: 0.75,
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,split,loss,metric_name,metric_value\n"));
        assert!(text.contains("0,train,"));
    }

    #[test]
    fn save_load_round_trip_preserves_evaluation() {
        let spec = tiny_classifier_spec();
        let run = train_classifier(&spec, 2).unwrap();
        let (loss_before, acc_before) = evaluate_classifier(
            &run.store,
            &run.model,
            &run.test_x,
            &run.test_y,
            spec.use_tmd,
            spec.m_infer.min(run.test_x.rows()),
        )
        .unwrap();

        let mut buf = Vec::new();
        run.store.save(&mut buf).unwrap();
        let mut fresh_store = ParamStore::new();
        let fresh_model = build_classifier(&spec, 2, &mut fresh_store);
        fresh_store.load_values(&mut buf.as_slice()).unwrap();

        let (loss_after, acc_after) = evaluate_classifier(
            &fresh_store,
            &fresh_model,
            &run.test_x,
            &run.test_y,
            spec.use_tmd,
            spec.m_infer.min(run.test_x.rows()),
        )
        .unwrap();
        assert_eq!(loss_before.to_bits(), loss_after.to_bits());
        assert_eq!(acc_before, acc_after);
    }

    #[test]
    fn pointset_smoke_train() {
        let spec = PointSetSpec {
            train_per_class: 4,
            test_per_class: 2,
            n_points: 12,
            epochs: 2,
            clouds_per_batch: 3,
            embed_dim: 8,
            tmd: TmdSettings { latent_dim: 4, ..Default::default() },
            ..Default::default()
        };
        let run = train_pointset(&spec, 0).unwrap();
        assert_eq!(run.history.len(), 2 * (spec.epochs + 1));
        let _ = pointset_test_accuracy(&run).unwrap();
    }
}
