use super::{Result, TrainError};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Mean pixel-wise softmax cross-entropy against one-hot labels. Optional
/// per-sample weights scale each sample's mean before averaging over the
/// batch.
pub fn cross_entropy_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &Tensor<T>,
    weights: Option<&[T]>,
) -> Result<Var> {
    Ok(tape.softmax_cross_entropy(logits, labels, weights)?)
}

fn check_scores<T: Real>(tape: &Tape<T>, scores: Var, what: &str) -> Result<usize> {
    let shape = tape.shape(scores);
    if shape.len() != 2 || shape[1] != 1 {
        return Err(TrainError::Config(format!("{what} scores must be [B, 1], got {shape:?}")));
    }
    if let Some(s) = tape.value(scores).data().iter().find(|s| !(**s >= T::zero() && **s <= T::one())) {
        return Err(TrainError::Config(format!("{what} score {s} outside [0, 1]")));
    }
    Ok(shape[0])
}

/// `mean_b(w_b · s_b)`, or the plain mean without weights.
fn weighted_mean<T: Real>(tape: &mut Tape<T>, scores: Var, weights: Option<&[T]>) -> Result<Var> {
    let scores = match weights {
        Some(w) => {
            let b = tape.shape(scores)[0];
            if w.len() != b {
                return Err(TrainError::Config(format!("{} sample weights for a batch of {b}", w.len())));
            }
            let wv = tape.constant(Tensor::new(vec![b, 1], w.to_vec())?);
            tape.mul(scores, wv)?
        }
        None => scores,
    };
    Ok(tape.mean(scores)?)
}

/// `E[D(u)] + E[1 − D(û)]`, which the discriminator maximizes.
pub fn disc_loss<T: Real>(tape: &mut Tape<T>, real: Var, fake: Var, weights: Option<&[T]>) -> Result<Var> {
    let b = check_scores(tape, real, "real")?;
    if check_scores(tape, fake, "fake")? != b {
        return Err(TrainError::Config("real and fake score batches differ in size".into()));
    }
    let r = weighted_mean(tape, real, weights)?;
    let inverted = tape.mul_scalar(fake, -T::one())?;
    let inverted = tape.add_scalar(inverted, T::one())?;
    let f = weighted_mean(tape, inverted, weights)?;
    Ok(tape.add(r, f)?)
}

/// `E[D(û)]`, which the segmenter maximizes.
pub fn gen_adv_loss<T: Real>(tape: &mut Tape<T>, fake: Var, weights: Option<&[T]>) -> Result<Var> {
    check_scores(tape, fake, "fake")?;
    weighted_mean(tape, fake, weights)
}

/// `L_cls + λ · L_Gen`.
pub fn combined_loss(l_cls: f64, l_gen: f64, adv_weight: f64) -> Result<f64> {
    if !(adv_weight >= 0.0) {
        return Err(TrainError::Config(format!("adversarial weight must be non-negative, got {adv_weight}")));
    }
    Ok(l_cls + adv_weight * l_gen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(tape: &mut Tape<f64>, v: &[f64]) -> Var {
        tape.constant(Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap())
    }

    fn disc(real: &[f64], fake: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let (r, f) = (scores(&mut tape, real), scores(&mut tape, fake));
        let l = disc_loss(&mut tape, r, f, None).unwrap();
        tape.scalar(l)
    }

    fn gen(fake: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let f = scores(&mut tape, fake);
        let l = gen_adv_loss(&mut tape, f, None).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn combined_examples() {
        assert_eq!(combined_loss(1.0, 0.0, 0.001).unwrap(), 1.0);
        assert_eq!(combined_loss(0.5, 2.0, 0.001).unwrap(), 0.502);
        assert_eq!(combined_loss(0.0, 0.0, 0.001).unwrap(), 0.0);
        assert!(combined_loss(1.0, 1.0, -0.1).is_err());
        let a = combined_loss(0.7, 3.0, 0.001).unwrap();
        let b = combined_loss(0.7, 6.0, 0.001).unwrap();
        assert!((b - a - 0.003).abs() < 1e-15);
    }

    #[test]
    fn disc_examples() {
        assert_eq!(disc(&[1.0, 1.0], &[0.0, 0.0]), 2.0);
        assert_eq!(disc(&[0.5; 3], &[0.5; 3]), 1.0);
        assert_eq!(disc(&[0.0], &[1.0]), 0.0);
        for (r, f) in [(0.3, 0.9), (0.12, 0.77), (1.0, 0.25)] {
            assert!((disc(&[r], &[f]) + disc(&[f], &[r]) - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gen_examples() {
        assert_eq!(gen(&[1.0, 1.0]), 1.0);
        assert_eq!(gen(&[0.2, 0.8]), 0.5);
        assert_eq!(gen(&[0.0]), 0.0);
    }

    #[test]
    fn scores_must_be_probabilities() {
        let mut tape = Tape::<f64>::new();
        let (r, f) = (scores(&mut tape, &[1.5]), scores(&mut tape, &[0.5]));
        assert!(disc_loss(&mut tape, r, f, None).is_err());
        let neg = scores(&mut tape, &[-0.1]);
        assert!(gen_adv_loss(&mut tape, neg, None).is_err());
        let two = scores(&mut tape, &[0.1, 0.2]);
        assert!(disc_loss(&mut tape, f, two, None).is_err());
    }

    #[test]
    fn weights_scale_samples() {
        let mut tape = Tape::<f64>::new();
        let f = scores(&mut tape, &[0.2, 0.8]);
        let l = gen_adv_loss(&mut tape, f, Some(&[1.0, 0.0])).unwrap();
        assert_eq!(tape.scalar(l), 0.1);
        let ones = gen_adv_loss(&mut tape, f, Some(&[1.0, 1.0])).unwrap();
        assert_eq!(tape.scalar(ones), 0.5);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        for c in [2usize, 3, 4] {
            let mut tape = Tape::<f64>::new();
            let logits = tape.constant(Tensor::zeros(vec![2, c, 3, 3]));
            let mut y = vec![0.0; 2 * c * 9];
            for s in 0..2 {
                for p in 0..9 {
                    y[(s * c + (p % c)) * 9 + p] = 1.0;
                }
            }
            let labels = Tensor::new(vec![2, c, 3, 3], y).unwrap();
            let l = cross_entropy_loss(&mut tape, logits, &labels, None).unwrap();
            assert!((tape.scalar(l) - (c as f64).ln()).abs() < 1e-12);
        }
    }
}
