use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    adam_step, combined_loss, cross_entropy_loss, disc_loss, gen_adv_loss, AdamConfig, AdamState, LossReport,
    Result, TrainConfig, TrainError, UNTAGGED,
};
use crate::data::SliceSample;
use crate::network::{derive_seed, Discriminator, Mode, NetworkError, Trace, UNet};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

/// Tape nodes of the segmenter objective `L_cls − λ · L_Gen`.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorObjective {
    pub l_cls: Var,
    pub l_gen: Var,
    /// The quantity minimized by the segmenter update.
    pub objective: Var,
}

/// Builds the segmenter objective on `tape` from its logits and softmax
/// probabilities. The discriminator's parameters are bound as constants.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective<T: Real>(
    tape: &mut Tape<T>,
    disc: &Discriminator<T>,
    x: Var,
    logits: Var,
    probs: Var,
    labels: &Tensor<T>,
    weights: &[T],
    adv_weight: f64,
) -> Result<GeneratorObjective> {
    let l_cls = cross_entropy_loss(tape, logits, labels, Some(weights))?;
    let bound = disc.bind(tape, false);
    let mut trace = Trace::new(false);
    let fake = disc.forward(tape, &bound, x, probs, Mode::Train, &mut trace)?;
    let l_gen = gen_adv_loss(tape, fake, Some(weights))?;
    // With λ = 0 the objective is L_cls itself, so backpropagation never
    // enters the discriminator nodes recorded after it.
    let objective = if adv_weight > 0.0 {
        let scaled = tape.mul_scalar(l_gen, T::lit(-adv_weight))?;
        tape.add(l_cls, scaled)?
    } else {
        l_cls
    };
    Ok(GeneratorObjective {
        l_cls,
        l_gen,
        objective,
    })
}

/// Alternating optimizer state over a fixed pool of training samples.
pub struct Trainer<'a> {
    config: TrainConfig,
    samples: &'a [SliceSample],
    weights: Vec<f32>,
    domains: Vec<String>,
    rng: ChaCha8Rng,
    unet_state: AdamState<f32>,
    disc_state: AdamState<f32>,
    iteration: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainConfig,
        samples: &'a [SliceSample],
        unet: &UNet<f32>,
        disc: &Discriminator<f32>,
    ) -> Result<Self> {
        config.validate()?;
        let first = samples.first().ok_or(TrainError::EmptyDataset)?;
        let (img, lbl) = (first.image.shape().to_vec(), first.label.shape().to_vec());
        if let Some(s) = samples.iter().find(|s| s.image.shape() != img || s.label.shape() != lbl) {
            return Err(TrainError::Config(format!(
                "sample {}:{} has shape {:?}/{:?}, expected {img:?}/{lbl:?}",
                s.volume_id,
                s.slice,
                s.image.shape(),
                s.label.shape()
            )));
        }
        let cfg = unet.config();
        if img[0] != cfg.in_channels || lbl[0] != cfg.num_classes || img[1..] != lbl[1..] {
            return Err(NetworkError::ChannelMismatch {
                what: "training samples",
                expected: cfg.in_channels,
                got: img[0],
            }
            .into());
        }
        unet.check_input(&[1, img[0], img[1], img[2]])?;
        if disc.config().in_channels != img[0] + lbl[0] {
            return Err(NetworkError::ChannelMismatch {
                what: "discriminator input",
                expected: disc.config().in_channels,
                got: img[0] + lbl[0],
            }
            .into());
        }
        let weights = samples
            .iter()
            .map(|s| config.domain_weight(s.domain_tag.as_deref()) as f32)
            .collect();
        let domains = samples
            .iter()
            .map(|s| s.domain_tag.clone().unwrap_or_else(|| UNTAGGED.to_string()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x5A3F)),
            config,
            samples,
            weights,
            domains,
            unet_state: AdamState::default(),
            disc_state: AdamState::default(),
            iteration: 0,
        })
    }

    /// Sorted domain tags present in the pool, for CSV columns.
    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// One discriminator phase followed by one segmenter update.
    pub fn step(&mut self, unet: &mut UNet<f32>, disc: &mut Discriminator<f32>) -> Result<LossReport> {
        let iteration = self.iteration;
        self.iteration += 1;
        self.step_inner(iteration, unet, disc).map_err(|e| match e {
            TrainError::Tensor(TensorError::NonFinite { .. })
            | TrainError::Network(NetworkError::Tensor(TensorError::NonFinite { .. })) => TrainError::NonFinite {
                iteration,
                l_cls: f64::NAN,
                l_gen: f64::NAN,
                l_disc: f64::NAN,
                detail: e.to_string(),
            },
            other => other,
        })
    }

    fn step_inner(&mut self, iteration: usize, unet: &mut UNet<f32>, disc: &mut Discriminator<f32>) -> Result<LossReport> {
        let picks: Vec<usize> = (0..self.config.batch_size)
            .map(|_| self.rng.random_range(0..self.samples.len()))
            .collect();
        let mut domain_counts = BTreeMap::new();
        for &i in &picks {
            let tag = self.samples[i].domain_tag.as_deref().unwrap_or(UNTAGGED);
            *domain_counts.entry(tag.to_string()).or_insert(0) += 1;
        }
        let x = Tensor::stack(&picks.iter().map(|&i| &self.samples[i].image).collect::<Vec<_>>())?;
        let y = Tensor::stack(&picks.iter().map(|&i| &self.samples[i].label).collect::<Vec<_>>())?;
        let weights: Vec<f32> = picks.iter().map(|&i| self.weights[i]).collect();
        let adam = self.config.adam();

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let seg = unet.forward(&mut tape, xv, Mode::Train, true, false)?;
        let probs = tape.softmax_channels(seg.logits)?;
        let fake_labels = tape.value(probs).clone();

        let mut l_disc = f64::NAN;
        for k in 0..self.config.disc_steps_per_gen {
            let value = disc_update(disc, &mut self.disc_state, &adam, &x, &y, &fake_labels, &weights)?;
            if k == 0 {
                l_disc = value;
            }
        }

        let obj = generator_objective(
            &mut tape,
            disc,
            xv,
            seg.logits,
            probs,
            &y,
            &weights,
            self.config.adv_weight,
        )?;
        let l_cls = tape.scalar(obj.l_cls) as f64;
        let l_gen = tape.scalar(obj.l_gen) as f64;
        if !(l_cls.is_finite() && l_gen.is_finite() && l_disc.is_finite()) {
            return Err(TrainError::NonFinite {
                iteration,
                l_cls,
                l_gen,
                l_disc,
                detail: String::new(),
            });
        }
        tape.backward(obj.objective)?;
        let grads = seg.bound.grads(&tape);
        adam_step(unet.params_mut().tensors_mut(), &grads, &mut self.unet_state, &adam)?;
        unet.commit(&seg.trace);
        Ok(LossReport {
            iteration,
            l_cls,
            l_gen,
            l_disc,
            l_total: combined_loss(l_cls, l_gen, self.config.adv_weight)?,
            domain_counts,
        })
    }
}

/// Ascends `E[D(u)] + E[1 − D(û)]` once; returns its pre-update value.
fn disc_update(
    disc: &mut Discriminator<f32>,
    state: &mut AdamState<f32>,
    adam: &AdamConfig,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    fake: &Tensor<f32>,
    weights: &[f32],
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = disc.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let real_labels = tape.constant(y.clone());
    let fake_labels = tape.constant(fake.clone());
    let mut trace = Trace::new(false);
    let real = disc.forward(&mut tape, &bound, xv, real_labels, Mode::Train, &mut trace)?;
    let fake = disc.forward(&mut tape, &bound, xv, fake_labels, Mode::Train, &mut trace)?;
    let loss = disc_loss(&mut tape, real, fake, Some(weights))?;
    let ascent = tape.mul_scalar(loss, -1.0)?;
    tape.backward(ascent)?;
    let grads = bound.grads(&tape);
    adam_step(disc.params_mut().tensors_mut(), &grads, state, adam)?;
    disc.commit(&trace);
    Ok(tape.scalar(loss) as f64)
}

/// Runs `config.iterations` steps, handing every report to `on_step`
/// together with the freshly updated models.
pub fn train_loop<F>(
    unet: &mut UNet<f32>,
    disc: &mut Discriminator<f32>,
    samples: &[SliceSample],
    config: &TrainConfig,
    mut on_step: F,
) -> Result<()>
where
    F: FnMut(&LossReport, &[String], &UNet<f32>, &Discriminator<f32>) -> Result<()>,
{
    let mut trainer = Trainer::new(config.clone(), samples, unet, disc)?;
    for _ in 0..config.iterations {
        let report = trainer.step(unet, disc)?;
        on_step(&report, trainer.domains(), unet, disc)?;
    }
    Ok(())
}
