//! Deep-supervised training with Adam and polynomial decay.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::optim::{Adam, AdamConfig};
use crate::harness::synth::VolumeSample;
use crate::loss::{LossConfig, Supervision};
use crate::metrics::{argmax_labels, metrics};
use crate::net::{preset_plan, Network, NetworkPlan};
use crate::nn::{apply_bn_updates, Ctx, Mode, ParamStore};
use crate::ssm::ScanMode;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Preset name or path to a plan file.
    pub plan: String,
    pub loss: LossConfig,
    pub classes: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub poly_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub scan_mode: ScanMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics_csv: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            plan: "toy".into(),
            loss: LossConfig::default(),
            classes: 2,
            epochs: 1,
            steps_per_epoch: 1,
            learning_rate: 1e-4,
            poly_power: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            scan_mode: ScanMode::default(),
            checkpoint: None,
            metrics_csv: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::config("epochs and steps_per_epoch must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.poly_power >= 0.0) {
            return Err(Error::config("learning_rate must be positive and poly_power non-negative"));
        }
        if self.classes < 2 {
            return Err(Error::config("at least two classes"));
        }
        self.loss.validate()
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    /// Resolves `plan` as a preset, else as a file.
    pub fn resolve_plan(&self) -> Result<NetworkPlan> {
        match preset_plan(&self.plan) {
            Ok(p) => Ok(p),
            Err(_) if Path::new(&self.plan).exists() => NetworkPlan::load(Path::new(&self.plan)),
            Err(e) => Err(e),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            power: self.poly_power,
            total_steps: self.total_steps() as u64,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Mean foreground DSC of the step's full-resolution prediction.
    pub dsc: f64,
}

pub const EPOCH_CSV_HEADER: [&str; 6] = ["epoch", "step", "lr", "mean_loss", "last_loss", "train_dsc"];

pub struct TrainOutcome {
    pub network: Network,
    pub params: ParamStore,
    pub adam: Adam,
    pub steps: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            plan: self.network.plan.clone(),
            in_channels: self.network.in_channels,
            classes: self.network.classes,
            params: self.params.clone(),
            optimizer: self.adam.state.clone(),
            step: self.adam.state.step,
        }
    }

    pub fn final_dsc(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.dsc)
    }
}

/// Stacks samples into `[B, C, D, H, W]` and `[B, D, H, W]` labels.
pub fn batch_of(samples: &[&VolumeSample]) -> Result<(Tensor, Vec<usize>)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (c, e) = (first.channels(), first.extents());
    let mut data = Vec::with_capacity(samples.len() * first.image.len());
    let mut labels = Vec::with_capacity(samples.len() * first.labels.len());
    for s in samples {
        if s.channels() != c || s.extents() != e {
            return Err(Error::Data(format!("sample `{}` differs in shape from `{}`", s.id, first.id)));
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.labels);
    }
    Ok((Tensor::new(&[samples.len(), c, e[0], e[1], e[2]], data)?, labels))
}

fn check_data(net: &Network, classes: usize, data: &[VolumeSample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    for s in data {
        if s.extents() != net.plan.patch_size || s.channels() != net.in_channels {
            return Err(Error::Data(format!(
                "sample `{}` is {:?} with {} channels; the plan expects {:?} with {}",
                s.id,
                s.extents(),
                s.channels(),
                net.plan.patch_size,
                net.in_channels
            )));
        }
        if let Some(&l) = s.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("sample `{}` has label {l} ≥ {classes} classes", s.id)));
        }
    }
    Ok(())
}

/// Trains from a fresh seeded initialisation.
pub fn train(cfg: &TrainConfig, plan: &NetworkPlan, data: &[VolumeSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let in_channels = data.first().map_or(1, VolumeSample::channels);
    let network = Network::new(plan, in_channels, cfg.classes)?;
    let params = network.init(cfg.seed)?;
    let adam = Adam::new(cfg.adam_config())?;
    resume(cfg, network, params, adam, data)
}

/// Continues training from the given state until `cfg.total_steps()`.
pub fn resume(
    cfg: &TrainConfig,
    network: Network,
    mut params: ParamStore,
    mut adam: Adam,
    data: &[VolumeSample],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(&network, cfg.classes, data)?;
    let plan = &network.plan;
    let heads = network.heads.len();
    let extents: Vec<[usize; 3]> = plan.stage_extents().into_iter().take(heads).collect();
    let mut supervision = Supervision::new(cfg.loss.clone(), cfg.classes, &extents)?;
    let batch = plan.batch_size.max(1);
    let mut csv = match &cfg.metrics_csv {
        Some(p) => {
            let mut w = csv::Writer::from_path(p)?;
            w.write_record(EPOCH_CSV_HEADER)?;
            Some(w)
        }
        None => None,
    };
    let mut steps = Vec::with_capacity(cfg.total_steps());
    let mut last_good: Option<PathBuf> = None;
    let start = adam.state.step as usize;
    for step in start..cfg.total_steps() {
        let epoch = step / cfg.steps_per_epoch;
        let picked: Vec<&VolumeSample> = (0..batch).map(|j| &data[(step * batch + j) % data.len()]).collect();
        let (x, labels) = batch_of(&picked)?;
        let diverged = |loss: f64| Error::Diverged { step, loss, last_good: last_good.clone() };
        let outcome = (|| -> Result<_> {
            let mut ctx = Ctx::with_scan_mode(&params, Mode::Train, cfg.scan_mode);
            let xv = ctx.tape.constant(x);
            let logits = network.forward(&mut ctx, xv)?;
            if logits.iter().any(|&v| !ctx.tape.value(v).all_finite()) {
                return Err(Error::NonFinite { index: 0 });
            }
            let loss = supervision.loss(&mut ctx.tape, &logits, &labels)?;
            let loss_value = ctx.tape.value(loss).item()?;
            let pred = argmax_labels(ctx.tape.value(logits[0]))?;
            let dsc = metrics(&pred, &labels, cfg.classes)?.mean_dsc();
            if !loss_value.is_finite() {
                return Err(diverged(loss_value));
            }
            let (grads, bn) = ctx.finish(loss)?;
            if grads.iter().any(|(_, g)| !g.all_finite()) {
                return Err(diverged(loss_value));
            }
            Ok((loss_value, dsc, grads, bn))
        })();
        // a non-finite intermediate surfaces from tensor construction
        let as_divergence = |e: Error, loss: f64| match e {
            Error::NonFinite { .. } => diverged(loss),
            e => e,
        };
        let (loss_value, dsc, grads, bn) = outcome.map_err(|e| as_divergence(e, f64::NAN))?;
        let mut next = params.clone();
        apply_bn_updates(&mut next, &bn);
        let lr = adam.step(&mut next, &grads).map_err(|e| as_divergence(e, loss_value))?;
        params = next;
        steps.push(StepRecord { step, epoch, lr, loss: loss_value, dsc });

        if (step + 1) % cfg.steps_per_epoch == 0 {
            supervision.end_epoch();
            let epoch_steps = &steps[steps.len().saturating_sub(cfg.steps_per_epoch)..];
            if let Some(w) = csv.as_mut() {
                let mean = epoch_steps.iter().map(|s| s.loss).sum::<f64>() / epoch_steps.len() as f64;
                w.write_record([
                    epoch.to_string(),
                    (step + 1).to_string(),
                    lr.to_string(),
                    mean.to_string(),
                    loss_value.to_string(),
                    dsc.to_string(),
                ])?;
                w.flush()?;
            }
            if let Some(path) = &cfg.checkpoint {
                Checkpoint {
                    plan: network.plan.clone(),
                    in_channels: network.in_channels,
                    classes: network.classes,
                    params: params.clone(),
                    optimizer: adam.state.clone(),
                    step: adam.state.step,
                }
                .save(path)?;
                last_good = Some(path.clone());
            }
        }
    }
    Ok(TrainOutcome { network, params, adam, steps })
}

/// Per-step CSV: `step,epoch,lr,loss,dsc`.
pub fn write_steps_csv<W: Write>(steps: &[StepRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "epoch", "lr", "loss", "dsc"])?;
    for s in steps {
        w.write_record([s.step.to_string(), s.epoch.to_string(), s.lr.to_string(), s.loss.to_string(), s.dsc.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::SynthSpec;
    use crate::net::micro_plan;

    fn data() -> Vec<VolumeSample> {
        let spec = SynthSpec { extents: [8, 8, 8], radius: [1.5, 3.0], tw_band: [0.01, 0.5], seed: 9, ..Default::default() };
        vec![spec.sample(0).unwrap()]
    }

    fn cfg() -> TrainConfig {
        TrainConfig { plan: "micro".into(), epochs: 2, steps_per_epoch: 2, learning_rate: 1e-2, ..Default::default() }
    }

    #[test]
    fn deterministic_and_resumable() {
        let d = data();
        let a = train(&cfg(), &micro_plan(), &d).unwrap();
        let b = train(&cfg(), &micro_plan(), &d).unwrap();
        let bits = |o: &TrainOutcome| o.steps.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.params, b.params);
        assert_eq!(a.steps.len(), 4);
        assert!(a.steps[3].lr < a.steps[0].lr);
    }

    #[test]
    fn shape_mismatch_is_data_error() {
        let spec = SynthSpec { extents: [6, 8, 8], radius: [1.5, 3.0], tw_band: [0.01, 0.5], ..Default::default() };
        let d = vec![spec.sample(0).unwrap()];
        assert!(matches!(train(&cfg(), &micro_plan(), &d), Err(Error::Data(_))));
    }

    #[test]
    fn divergence_reported() {
        let mut d = data();
        // finite input whose activations overflow
        d[0].image = d[0].image.map(|v| v * 1e306);
        let r = train(&cfg(), &micro_plan(), &d);
        assert!(matches!(r, Err(Error::Diverged { step: 0, .. })), "{:?}", r.err());
    }

    #[test]
    fn config_toml_round_trip() {
        let c = TrainConfig { checkpoint: Some("ck.mckp".into()), ..cfg() };
        let text = c.to_toml().unwrap();
        assert!(text.contains("learning_rate"));
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
        assert!(TrainConfig::from_toml("epochz = 3").is_err());
    }
}
