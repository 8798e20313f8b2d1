use rayon::prelude::*;

use super::{scale_loss, AdamState, Result, TrainConfig, TrainError};
use crate::features::{perturb, PerturbationSpec, Sample};
use crate::model::{init_reference, BoundModel, ModelConfig, ReferenceBank, Reconstructor};
use crate::rng::CounterRng;
use crate::tensor::{Graph, Tensor, TensorError};

const SHUFFLE_STREAM: u64 = 0x7368_7566;
const NOISE_STREAM: u64 = 0x6e6f_6973;

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Reconstructor<f32>,
    pub bank: ReferenceBank<f32>,
    /// Moments for the network parameters followed by the bank parameters.
    pub optimizer: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Mean training loss of each completed epoch.
    pub history: Vec<f32>,
    pub seed: u64,
}

impl TrainState {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let model = Reconstructor::new(config)?;
        let bank = init_reference(config, config.seed)?;
        let optimizer = AdamState::new(model.params().tensors().iter().chain(bank.params().tensors()));
        Ok(Self {
            model,
            bank,
            optimizer,
            epoch: 0,
            history: Vec::new(),
            seed,
        })
    }
}

/// Per-scale noise std: `relative` times the std of all training features at
/// that scale.
pub fn noise_sigmas(samples: &[Sample], relative: f64) -> Vec<f64> {
    let scales = samples.first().map_or(0, |s| s.tokens.len());
    (0..scales)
        .map(|j| {
            let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
            for s in samples {
                for &v in s.tokens[j].data() {
                    n += 1;
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            let mean = sum / n as f64;
            relative * (sq / n as f64 - mean * mean).max(0.0).sqrt()
        })
        .collect()
}

/// Loss and parameter gradients (network then bank) for one record.
pub fn record_gradients(
    model: &Reconstructor<f32>,
    bank: &ReferenceBank<f32>,
    inputs: &[Tensor<f32>],
    targets: &[Tensor<f32>],
    squared: bool,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let bound = BoundModel::new(&mut g, model, bank, true);
    let mut total = None;
    for (j, (x, t)) in inputs.iter().zip(targets).enumerate() {
        let xv = g.leaf(x.clone(), false);
        let tv = g.leaf(t.clone(), false);
        let out = bound.forward_scale(&mut g, j, xv)?;
        let l = scale_loss(&mut g, out, tv, squared)?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| TrainError::Data("record without scales".into()))?;
    g.backward(total)?;
    let loss = g.value(total).data()[0] as f64;
    let vars: Vec<_> = bound.net_vars().iter().chain(bound.bank_vars()).copied().collect();
    let grads = vars
        .into_iter()
        .map(|v| {
            let shape = g.value(v).shape().to_vec();
            g.take_grad(v).unwrap_or_else(|| Tensor::zeros(&shape))
        })
        .collect();
    Ok((loss, grads))
}

fn validate_samples(samples: &[Sample], config: &ModelConfig) -> Result<()> {
    if samples.is_empty() {
        return Err(TrainError::Data("training set is empty".into()));
    }
    let anomalous: Vec<&str> = samples
        .iter()
        .filter(|s| s.is_anomalous)
        .map(|s| s.image_id.as_str())
        .collect();
    if !anomalous.is_empty() {
        return Err(TrainError::Data(format!(
            "training set contains anomalous records: {}",
            anomalous.join(", ")
        )));
    }
    for s in samples {
        let ok = s.tokens.len() == config.scales.len()
            && s.tokens
                .iter()
                .zip(&config.scales)
                .all(|(t, c)| t.shape() == [c.tokens(), c.channels]);
        if !ok {
            return Err(TrainError::Data(format!(
                "record {} does not match the model's scale layout",
                s.image_id
            )));
        }
    }
    Ok(())
}

fn is_non_finite(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Tensor(TensorError::NonFinite { .. })
            | TrainError::Model(crate::model::ModelError::Tensor(TensorError::NonFinite { .. }))
    )
}

/// Trains from `state.epoch` up to `config.epochs`, calling `on_epoch` after
/// each completed epoch. Batches run their records in parallel; gradients are
/// reduced in record order, so results do not depend on the thread count.
pub fn fit(
    state: &mut TrainState,
    samples: &[Sample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    validate_samples(samples, state.model.config())?;
    if state.seed != config.seed {
        return Err(TrainError::Config(format!(
            "state was trained with seed {}, config asks for {}",
            state.seed, config.seed
        )));
    }
    let sigmas = noise_sigmas(samples, config.noise.relative_sigma);
    let adam = config.adam();
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        CounterRng::stream(config.seed, &[SHUFFLE_STREAM, epoch as u64]).shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let model = &state.model;
            let bank = &state.bank;
            let results: Vec<Result<(f64, Vec<Tensor<f32>>)>> = batch
                .par_iter()
                .map(|&idx| {
                    let s = &samples[idx];
                    let inputs: Vec<Tensor<f32>> = s
                        .tokens
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let spec = PerturbationSpec {
                                sigma: sigmas[j],
                                enabled: config.noise.enabled,
                            };
                            let key = CounterRng::stream(config.seed, &[NOISE_STREAM, epoch as u64, idx as u64, j as u64])
                                .next_u64();
                            perturb(t, &spec, key)
                        })
                        .collect();
                    record_gradients(model, bank, &inputs, &s.tokens, config.squared_distance)
                })
                .collect();
            let ids = || {
                batch
                    .iter()
                    .map(|&i| samples[i].image_id.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            let mut sum: Option<Vec<Tensor<f32>>> = None;
            let mut batch_loss = 0.0f64;
            for r in results {
                let (loss, grads) = match r {
                    Ok(v) => v,
                    Err(e) if is_non_finite(&e) => {
                        return Err(TrainError::NonFinite { epoch, batch: b, records: ids() })
                    }
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                    return Err(TrainError::NonFinite { epoch, batch: b, records: ids() });
                }
                batch_loss += loss;
                match &mut sum {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.add_assign(g)?;
                        }
                    }
                    None => sum = Some(grads),
                }
            }
            epoch_loss += batch_loss;
            let mut grads = sum.expect("batches are non-empty");
            let inv = 1.0 / batch.len() as f32;
            for g in &mut grads {
                g.scale_inplace(inv);
            }
            let mut params: Vec<&mut Tensor<f32>> = Vec::new();
            let (model, bank) = (&mut state.model, &mut state.bank);
            params.extend(model.params_mut().tensors_mut().iter_mut());
            params.extend(bank.params_mut().tensors_mut().iter_mut());
            state.optimizer.update(&adam, &mut params, &grads);
        }
        state.history.push((epoch_loss / samples.len() as f64) as f32);
        state.epoch += 1;
        on_epoch(state)?;
    }
    Ok(())
}
