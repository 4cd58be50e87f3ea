//! Training loop: Adam over the margin + reconstruction objective, per-epoch
//! evaluation, best-checkpoint tracking, and nested train-fraction subsets
//! for the small-training-set experiment.

use crate::checkpoint::{AdamState, EpochMetrics};
use crate::data::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::loss::{margin_loss_node, LossConfig};
use crate::metrics::{self, EvalReport};
use crate::network::{predict, Model};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossConfig,
    pub seed: u64,
    /// Fraction of the train split to use; subsets are nested (a smaller
    /// fraction is a prefix of a larger one under the same seed).
    pub train_fraction: f64,
    /// For 2D models on 3D datasets: slice axis (0 = x).
    pub slice_axis: Option<usize>,
    pub log: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossConfig::default(),
            seed: 1,
            train_fraction: 1.0,
            slice_axis: None,
            log: false,
        }
    }
}

pub struct BestSnapshot<T: Scalar> {
    pub epoch: usize,
    pub params: Vec<Tensor<T>>,
    pub adam: AdamState<T>,
}

pub struct TrainOutcome<T: Scalar> {
    pub history: Vec<EpochMetrics>,
    pub adam: AdamState<T>,
    /// State at the epoch with the best validation error (ties broken by
    /// lower validation loss).
    pub best: BestSnapshot<T>,
}

/// Margin(+reconstruction) loss and error rate over one split, using target
/// classes for the decoder input, as in training.
pub fn split_loss_and_error<T: Scalar>(
    model: &Model<T>,
    data: &DatasetManifest,
    split: Split,
    opts: &TrainOptions,
) -> Result<(f64, f64)> {
    let indices = data.indices_of(split);
    if indices.is_empty() {
        return Err(Error::InvalidArgument(format!("empty {split:?} split")));
    }
    let mut total_loss = 0.0;
    let mut errors = 0usize;
    for chunk in indices.chunks(opts.batch_size.max(1)) {
        let (batch, targets) = data.batch(chunk, opts.slice_axis)?;
        let input: Tensor<T> = batch.cast();
        let (loss, lengths) = batch_loss(model, &input, &targets, &opts.loss)?;
        total_loss += loss * chunk.len() as f64;
        for (p, &t) in predict(&lengths).iter().zip(&targets) {
            if *p != t {
                errors += 1;
            }
        }
    }
    Ok((
        total_loss / indices.len() as f64,
        100.0 * errors as f64 / indices.len() as f64,
    ))
}

/// Forward + objective for one batch without touching parameters.
fn batch_loss<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<T>,
    targets: &[usize],
    loss_cfg: &LossConfig,
) -> Result<(f64, Tensor<T>)> {
    let mut fwd = model.forward(input)?;
    let margin = margin_loss_node(&mut fwd.tape, fwd.lengths_id, targets, loss_cfg)?;
    let total = match model.attach_decoder(&mut fwd, targets)? {
        Some(recon) => {
            let target_img = fwd.tape.value(fwd.input_id).clone();
            let sse = fwd.tape.sum_sq_diff(recon, target_img)?;
            let alpha = loss_cfg.recon_weight / targets.len() as f64;
            fwd.tape.add_scaled(margin, sse, T::from_f64(alpha))?
        }
        None => margin,
    };
    let lengths = fwd.lengths().clone();
    Ok((fwd.tape.value(total).item().to_f64(), lengths))
}

/// Full classification report on a split (argmax predictions; PR curve over
/// the positive-class capsule length).
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &DatasetManifest,
    split: Split,
    batch_size: usize,
    slice_axis: Option<usize>,
) -> Result<EvalReport> {
    let indices = data.indices_of(split);
    if indices.is_empty() {
        return Err(Error::InvalidArgument(format!("empty {split:?} split")));
    }
    let mut predictions = Vec::with_capacity(indices.len());
    let mut scores = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, targets) = data.batch(chunk, slice_axis)?;
        let input: Tensor<T> = batch.cast();
        let fwd = model.forward(&input)?;
        let lengths = fwd.lengths();
        predictions.extend(predict(lengths));
        let j = model.config.classes;
        for row in lengths.data().chunks(j) {
            scores.push(row[1].to_f64()); // class 1 = nodule
        }
        labels.extend(targets);
    }
    metrics::eval_report(&predictions, &scores, &labels, 101)
}

/// Deterministic nested subset of the train split.
pub fn train_subset(data: &DatasetManifest, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0 < fraction && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut indices = data.indices_of(Split::Train);
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty train split".into()));
    }
    let mut rng = SplitMix64::new(seed).fork(0x737562736574); // "subset"
    rng.shuffle(&mut indices);
    let keep = ((fraction * indices.len() as f64).ceil() as usize).clamp(1, indices.len());
    indices.truncate(keep);
    Ok(indices)
}

/// Train in place. Returns per-epoch metrics and the best parameter snapshot.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &DatasetManifest,
    opts: &TrainOptions,
    mut adam: AdamState<T>,
    start_epoch: usize,
) -> Result<TrainOutcome<T>> {
    if opts.epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be >= 1".into()));
    }
    opts.loss.validate()?;
    let subset = train_subset(data, opts.train_fraction, opts.seed)?;
    let mut order = subset.clone();
    let mut epoch_rng = SplitMix64::new(opts.seed).fork(0x65706f6368); // "epoch"

    let mut history = Vec::with_capacity(opts.epochs);
    let mut best: Option<(f64, f64, BestSnapshot<T>)> = None;

    for e in 0..opts.epochs {
        let epoch = start_epoch + e + 1;
        epoch_rng.shuffle(&mut order);
        let mut train_loss = 0.0;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let (batch, targets) = data.batch(chunk, opts.slice_axis)?;
            let input: Tensor<T> = batch.cast();
            let loss = train_step(model, &input, &targets, opts, &mut adam)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            train_loss += loss * chunk.len() as f64;
        }
        train_loss /= order.len() as f64;

        let (val_loss, val_error) = split_loss_and_error(model, data, Split::Val, opts)
            .unwrap_or((f64::NAN, f64::NAN));
        let (test_loss, test_error) = split_loss_and_error(model, data, Split::Test, opts)
            .unwrap_or((f64::NAN, f64::NAN));

        let row = EpochMetrics {
            epoch,
            train_loss,
            test_loss,
            test_error_rate: test_error,
            val_loss,
            val_error_rate: val_error,
        };
        if opts.log {
            eprintln!(
                "epoch {epoch}: train {train_loss:.5} val {val_loss:.5}/{val_error:.2}% test {test_loss:.5}/{test_error:.2}%"
            );
        }
        history.push(row);

        let candidate_key = if val_error.is_nan() {
            (test_error, test_loss)
        } else {
            (val_error, val_loss)
        };
        let better = match &best {
            None => true,
            Some((be, bl, _)) => {
                candidate_key.0 < *be || (candidate_key.0 == *be && candidate_key.1 < *bl)
            }
        };
        if better {
            best = Some((
                candidate_key.0,
                candidate_key.1,
                BestSnapshot {
                    epoch,
                    params: model.params().iter().map(|p| p.tensor.clone()).collect(),
                    adam: adam.clone(),
                },
            ));
        }
    }

    let (_, _, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { history, adam, best })
}

/// One optimizer step over a batch; returns the batch objective.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    input: &Tensor<T>,
    targets: &[usize],
    opts: &TrainOptions,
    adam: &mut AdamState<T>,
) -> Result<f64> {
    let mut fwd = model.forward(input)?;
    let margin = margin_loss_node(&mut fwd.tape, fwd.lengths_id, targets, &opts.loss)?;
    let total = match model.attach_decoder(&mut fwd, targets)? {
        Some(recon) => {
            let target_img = fwd.tape.value(fwd.input_id).clone();
            let sse = fwd.tape.sum_sq_diff(recon, target_img)?;
            let alpha = opts.loss.recon_weight / targets.len() as f64;
            fwd.tape.add_scaled(margin, sse, T::from_f64(alpha))?
        }
        None => margin,
    };
    let loss_value = fwd.tape.value(total).item().to_f64();
    let grads = fwd.tape.backward(total)?;

    adam.step += 1;
    let t = adam.step as f64;
    let (b1, b2) = (opts.beta1, opts.beta2);
    let corr1 = 1.0 - b1.powf(t);
    let corr2 = 1.0 - b2.powf(t);
    let lr = T::from_f64(opts.learning_rate);
    let b1t = T::from_f64(b1);
    let b2t = T::from_f64(b2);
    let one_minus_b1 = T::from_f64(1.0 - b1);
    let one_minus_b2 = T::from_f64(1.0 - b2);
    let eps = T::from_f64(opts.adam_eps);
    let c1 = T::from_f64(corr1);
    let c2 = T::from_f64(corr2);

    for (i, id) in fwd.param_ids.iter().enumerate() {
        let Some(g) = grads.get_opt(*id) else { continue };
        let p = &mut model.params_mut()[i].tensor;
        let m = &mut adam.m[i];
        let v = &mut adam.v[i];
        for ((pv, gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = b1t * *mv + one_minus_b1 * *gv;
            *vv = b2t * *vv + one_minus_b2 * *gv * *gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(loss_value)
}

/// Render metric history in the cmd_train CSV layout.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,test_loss,error_rate,val_loss,val_error_rate\n");
    for m in history {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.4},{:.6},{:.4}\n",
            m.epoch, m.train_loss, m.test_loss, m.test_error_rate, m.val_loss, m.val_error_rate
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_nodules, SynthParams};
    use crate::network::{DecoderVariant, ModelConfig, Variant};

    fn tiny_data(n: usize, seed: u64) -> DatasetManifest {
        let mut m = synth_nodules(n, seed, &SynthParams::default()).unwrap();
        crate::data::split(&mut m, (0.7, 0.15, 0.15), seed).unwrap();
        m
    }

    fn tiny32_config() -> ModelConfig {
        let mut cfg = ModelConfig::preset(Variant::TinyTest);
        cfg.input_shape = vec![32, 32];
        cfg.decoder = DecoderVariant::None;
        cfg
    }

    #[test]
    fn nested_subsets_are_prefixes() {
        let data = tiny_data(40, 3);
        let small = train_subset(&data, 0.25, 9).unwrap();
        let large = train_subset(&data, 0.75, 9).unwrap();
        assert!(small.len() < large.len());
        assert_eq!(&large[..small.len()], &small[..]);
        assert!(train_subset(&data, 0.0, 9).is_err());
    }

    #[test]
    fn one_train_step_lowers_batch_loss() {
        let data = tiny_data(16, 5);
        let mut model = Model::<f32>::build(tiny32_config(), 7).unwrap();
        let opts = TrainOptions {
            slice_axis: Some(0),
            batch_size: 8,
            ..Default::default()
        };
        let mut adam = AdamState::new(&model).unwrap();
        let idx = data.indices_of(Split::Train);
        let (batch, targets) = data.batch(&idx[..8], Some(0)).unwrap();
        let input: Tensor<f32> = batch.cast();
        let before = train_step(&mut model, &input, &targets, &opts, &mut adam).unwrap();
        for _ in 0..10 {
            train_step(&mut model, &input, &targets, &opts, &mut adam).unwrap();
        }
        let after = train_step(&mut model, &input, &targets, &opts, &mut adam).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn short_training_improves_loss_and_reports_history() {
        let data = tiny_data(60, 8);
        let mut model = Model::<f32>::build(tiny32_config(), 3).unwrap();
        let opts = TrainOptions {
            epochs: 3,
            batch_size: 8,
            slice_axis: Some(0),
            seed: 4,
            ..Default::default()
        };
        let adam = AdamState::new(&model).unwrap();
        let out = train(&mut model, &data, &opts, adam, 0).unwrap();
        assert_eq!(out.history.len(), 3);
        assert_eq!(out.history[0].epoch, 1);
        assert!(out.history[2].train_loss < out.history[0].train_loss);
        // CSV layout
        let csv = metrics_csv(&out.history);
        assert!(csv.starts_with("epoch,train_loss,test_loss,error_rate"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn rejects_zero_epochs() {
        let data = tiny_data(10, 2);
        let mut model = Model::<f32>::build(tiny32_config(), 3).unwrap();
        let opts = TrainOptions {
            epochs: 0,
            ..Default::default()
        };
        let adam = AdamState::new(&model).unwrap();
        assert!(train(&mut model, &data, &opts, adam, 0).is_err());
    }
}
