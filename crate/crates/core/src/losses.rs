//! Segmentation and adversarial objectives.
//!
//! * `L_ce`: pixel-mean multi-class cross-entropy
//! * `L_Dice`: one minus the mean soft Dice over foreground classes
//! * `L_ID = β₁·L_ce + (1−β₁)·L_Dice` against expert masks
//! * `L_DT = β₂·L_ce + (1−β₂)·L_Dice` against transferred pseudo masks
//! * `L_G  = λ·L_ID + (1−λ)·L_DT`
//! * `L_D  = E_S[log D(y|x)] + E_T[log D(y'|x')] + E_S[log(1−D(G(x)|x))] + E_T[log(1−D(G(x')|x'))]`
//! * `L_adv = L_D + L_G`
//!
//! `L_D` is the quantity the discriminator *maximizes*; it is ≤ 0.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: f64,
    pub dice_epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.9,
            lambda: 0.9,
            dice_epsilon: 1e-5,
        }
    }
}

impl LossWeights {
    /// Sets the cross-entropy/Dice mix `α` for both `β₁` and `β₂`.
    pub fn with_ce_dice_mix(mut self, alpha: f64) -> Self {
        self.beta1 = alpha;
        self.beta2 = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("lambda", self.lambda),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if !(self.dice_epsilon > 0.0) {
            return Err(Error::Config("dice_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Where a training sample's mask came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// Expert annotation (set S).
    Expert,
    /// Mask transferred from another modality (set T).
    Pseudo,
}

/// Per-sample tags of one batch, in batch order.
pub type BatchSupervision = Vec<Supervision>;

fn check_congruent<T: Real>(tape: &Tape<T>, probs: Var, target: Var) -> Result<[usize; 4]> {
    let dims = tape.value(probs).dims4()?;
    if tape.value(target).shape() != dims {
        return Err(shape_err!(
            "loss: prediction {:?} and target {:?} differ",
            dims,
            tape.value(target).shape()
        ));
    }
    Ok(dims)
}

fn check_one_hot<T: Real>(t: &Tensor<T>) -> Result<()> {
    let [b, c, h, w] = t.dims4()?;
    let plane = h * w;
    let d = t.data();
    for n in 0..b {
        for p in 0..plane {
            let mut ones = 0;
            for k in 0..c {
                let v = d[(n * c + k) * plane + p];
                if v == T::one() {
                    ones += 1;
                } else if v != T::zero() {
                    return Err(Error::InvalidArgument(format!(
                        "target is not one-hot: value {v} at sample {n}, class {k}, pixel {p}"
                    )));
                }
            }
            if ones != 1 {
                return Err(Error::InvalidArgument(format!(
                    "target is not one-hot: {ones} active classes at sample {n}, pixel {p}"
                )));
            }
        }
    }
    Ok(())
}

/// One-hot encodes a label map (`[B,H,W]` flattened) into `[B, classes, H, W]`.
pub fn one_hot<T: Real>(
    labels: &[u8],
    batch: usize,
    classes: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let plane = h * w;
    if labels.len() != batch * plane {
        return Err(shape_err!(
            "one_hot: {} labels for {batch}x{h}x{w}",
            labels.len()
        ));
    }
    let mut data = vec![T::zero(); batch * classes * plane];
    for n in 0..batch {
        for p in 0..plane {
            let l = labels[n * plane + p] as usize;
            if l >= classes {
                return Err(Error::InvalidArgument(format!(
                    "label {l} ≥ {classes} classes"
                )));
            }
            data[(n * classes + l) * plane + p] = T::one();
        }
    }
    Tensor::new([batch, classes, h, w], data)
}

/// Mean over batch and pixels of `−Σ_c t_c · log p_c`.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, probs: Var, target_onehot: Var) -> Result<Var> {
    let [b, _, h, w] = check_congruent(tape, probs, target_onehot)?;
    check_one_hot(tape.value(target_onehot))?;
    let clamped = tape.clamp(probs, T::of(PROB_FLOOR), T::infinity());
    let logp = tape.ln(clamped);
    let picked = tape.mul(logp, target_onehot)?;
    let total = tape.sum(picked);
    Ok(tape.affine(total, -T::one() / T::of((b * h * w) as f64), T::zero()))
}

/// `1 − mean_{c ≥ 1} (2Σ p_c g_c + ε) / (Σ p_c + Σ g_c + ε)`, sums over batch and pixels.
pub fn dice_loss<T: Real>(
    tape: &mut Tape<T>,
    probs: Var,
    target_onehot: Var,
    epsilon: f64,
) -> Result<Var> {
    let [_, c, _, _] = check_congruent(tape, probs, target_onehot)?;
    if c < 2 {
        return Err(shape_err!(
            "dice_loss: need a background and at least one foreground class"
        ));
    }
    let eps = T::of(epsilon);
    let overlap = tape.mul(probs, target_onehot)?;
    let inter = tape.channel_sums(overlap)?;
    let psum = tape.channel_sums(probs)?;
    let gsum = tape.channel_sums(target_onehot)?;
    let numer = tape.affine(inter, T::of(2.0), eps);
    let gsum_eps = tape.affine(gsum, T::one(), eps);
    let denom = tape.add(psum, gsum_eps)?;
    let ratio = tape.div(numer, denom)?;
    let foreground: Vec<usize> = (1..c).collect();
    let fg = tape.select_rows(ratio, &foreground)?;
    let mean = tape.mean(fg);
    Ok(tape.affine(mean, -T::one(), T::one()))
}

/// Components of a mixed cross-entropy/Dice loss.
#[derive(Clone, Copy, Debug)]
pub struct SegLoss {
    pub ce: Var,
    pub dice: Var,
    pub total: Var,
}

/// `β·L_ce + (1−β)·L_Dice`.
pub fn segmentation_loss<T: Real>(
    tape: &mut Tape<T>,
    probs: Var,
    target_onehot: Var,
    beta: f64,
    dice_epsilon: f64,
) -> Result<SegLoss> {
    let ce = cross_entropy(tape, probs, target_onehot)?;
    let dice = dice_loss(tape, probs, target_onehot, dice_epsilon)?;
    let total = mix(tape, ce, dice, beta)?;
    Ok(SegLoss { ce, dice, total })
}

/// `w·a + (1−w)·b`.
fn mix<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, w: f64) -> Result<Var> {
    let wa = tape.affine(a, T::of(w), T::zero());
    let wb = tape.affine(b, T::of(1.0 - w), T::zero());
    tape.add(wa, wb)
}

/// Individual-domain loss against expert masks.
pub fn loss_id<T: Real>(
    tape: &mut Tape<T>,
    probs: Var,
    gt_onehot: Var,
    w: &LossWeights,
) -> Result<SegLoss> {
    segmentation_loss(tape, probs, gt_onehot, w.beta1, w.dice_epsilon)
}

/// Domain-transfer loss against pseudo masks.
pub fn loss_dt<T: Real>(
    tape: &mut Tape<T>,
    probs: Var,
    pseudo_onehot: Var,
    w: &LossWeights,
) -> Result<SegLoss> {
    segmentation_loss(tape, probs, pseudo_onehot, w.beta2, w.dice_epsilon)
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    /// `L_ID` over the expert samples, if the batch had any.
    pub id: Option<SegLoss>,
    /// `L_DT` over the pseudo samples, if the batch had any.
    pub dt: Option<SegLoss>,
    pub total: Var,
}

/// `λ·L_ID + (1−λ)·L_DT` with `L_ID` over expert rows and `L_DT` over pseudo rows.
///
/// A term whose tag is absent from the batch contributes 0; the other keeps its weight.
pub fn loss_g<T: Real>(
    tape: &mut Tape<T>,
    probs: Var,
    targets_onehot: Var,
    tags: &[Supervision],
    w: &LossWeights,
) -> Result<GeneratorLoss> {
    let [b, ..] = check_congruent(tape, probs, targets_onehot)?;
    if tags.is_empty() || b == 0 {
        return Err(Error::InvalidArgument("loss_g: empty batch".into()));
    }
    if tags.len() != b {
        return Err(shape_err!("loss_g: {} tags for a batch of {b}", tags.len()));
    }
    let rows = |tag| -> Vec<usize> { (0..b).filter(|&i| tags[i] == tag).collect() };
    let (expert, pseudo) = (rows(Supervision::Expert), rows(Supervision::Pseudo));

    let subset = |tape: &mut Tape<T>, idx: &[usize]| -> Result<(Var, Var)> {
        if idx.len() == b {
            Ok((probs, targets_onehot))
        } else {
            Ok((
                tape.select_rows(probs, idx)?,
                tape.select_rows(targets_onehot, idx)?,
            ))
        }
    };

    let id = if expert.is_empty() {
        None
    } else {
        let (p, t) = subset(tape, &expert)?;
        Some(loss_id(tape, p, t, w)?)
    };
    let dt = if pseudo.is_empty() {
        None
    } else {
        let (p, t) = subset(tape, &pseudo)?;
        Some(loss_dt(tape, p, t, w)?)
    };
    let total = match (id, dt) {
        (Some(i), Some(d)) => mix(tape, i.total, d.total, w.lambda)?,
        (Some(i), None) => tape.affine(i.total, T::of(w.lambda), T::zero()),
        (None, Some(d)) => tape.affine(d.total, T::of(1.0 - w.lambda), T::zero()),
        (None, None) => unreachable!("batch is non-empty"),
    };
    Ok(GeneratorLoss { id, dt, total })
}

/// Discriminator outputs grouped by the four expectation terms of `L_D`.
/// Absent groups (e.g. no pseudo samples) contribute nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct DiscriminatorOutputs {
    pub real_s: Option<Var>,
    pub real_t: Option<Var>,
    pub fake_s: Option<Var>,
    pub fake_t: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorLoss {
    pub value: Var,
    /// Number of inputs that were outside the open interval (0, 1) before clamping.
    pub out_of_range: usize,
}

fn mean_log<T: Real>(tape: &mut Tape<T>, d: Var, fake: bool) -> Var {
    let hi = T::one() - T::of(PROB_FLOOR);
    let c = tape.clamp(d, T::of(PROB_FLOOR), hi);
    let arg = if fake {
        tape.affine(c, -T::one(), T::one())
    } else {
        c
    };
    let l = tape.ln(arg);
    tape.mean(l)
}

fn count_out_of_range<T: Real>(tape: &Tape<T>, d: Var) -> usize {
    tape.value(d)
        .data()
        .iter()
        .filter(|&&v| !(v > T::zero() && v < T::one()))
        .count()
}

pub fn loss_d<T: Real>(tape: &mut Tape<T>, d: &DiscriminatorOutputs) -> Result<DiscriminatorLoss> {
    let groups = [
        (d.real_s, false),
        (d.real_t, false),
        (d.fake_s, true),
        (d.fake_t, true),
    ];
    let mut out_of_range = 0;
    let mut value: Option<Var> = None;
    for (v, fake) in groups {
        let Some(v) = v else { continue };
        out_of_range += count_out_of_range(tape, v);
        let term = mean_log(tape, v, fake);
        value = Some(match value {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let value =
        value.ok_or_else(|| Error::InvalidArgument("loss_d: no discriminator outputs".into()))?;
    Ok(DiscriminatorLoss {
        value,
        out_of_range,
    })
}

/// The part of `L_adv` that depends on G through D's judgement of generated masks.
///
/// Saturating (default): `E_S[log(1−D(G(x)))] + E_T[log(1−D(G(x')))]`, which G minimizes.
/// Non-saturating: `−E[log D(G(·))]` over the same groups.
pub fn generator_adversarial_term<T: Real>(
    tape: &mut Tape<T>,
    fake_s: Option<Var>,
    fake_t: Option<Var>,
    non_saturating: bool,
) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for v in [fake_s, fake_t].into_iter().flatten() {
        let term = if non_saturating {
            let m = mean_log(tape, v, false);
            tape.affine(m, -T::one(), T::zero())
        } else {
            mean_log(tape, v, true)
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc)
}

/// `L_D + L_G`; both must be finite.
pub fn loss_adv<T: Real>(tape: &mut Tape<T>, l_d: Var, l_g: Var) -> Result<Var> {
    tape.ensure_finite(l_d, "L_D")?;
    tape.ensure_finite(l_g, "L_G")?;
    tape.add(l_d, l_g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    fn onehot(labels: &[u8], b: usize, h: usize, w: usize) -> Tensor<f64> {
        one_hot(labels, b, 4, h, w).unwrap()
    }

    #[test]
    fn ce_of_exact_prediction_is_zero_and_uniform_is_ln4() {
        let t = onehot(&[0, 1, 2, 3], 1, 2, 2);
        let mut tape = Tape::new();
        let (p, g) = (tape.constant(t.clone()), tape.constant(t));
        let ce = cross_entropy(&mut tape, p, g).unwrap();
        assert!(scalar(&tape, ce) < 1e-5);

        let u = tape.constant(Tensor::full([1, 4, 2, 2], 0.25));
        let ce = cross_entropy(&mut tape, u, g).unwrap();
        assert!((scalar(&tape, ce) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_non_one_hot_targets() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full([1, 4, 1, 1], 0.25));
        let g = tape.constant(Tensor::full([1, 4, 1, 1], 0.25));
        assert!(cross_entropy(&mut tape, p, g).is_err());
        let two = tape.constant(Tensor::new([1, 4, 1, 1], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
        assert!(cross_entropy(&mut tape, p, two).is_err());
    }

    #[test]
    fn dice_examples() {
        let t = onehot(&[0, 1, 2, 3, 1, 2, 3, 0, 0], 1, 3, 3);
        let mut tape = Tape::new();
        let (p, g) = (tape.constant(t.clone()), tape.constant(t));
        let d = dice_loss(&mut tape, p, g, 1e-5).unwrap();
        assert!(scalar(&tape, d) < 1e-4);

        let bg_only = onehot(&[0; 9], 1, 3, 3);
        let z = tape.constant(bg_only);
        let d = dice_loss(&mut tape, z, g, 1e-5).unwrap();
        assert!((scalar(&tape, d) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn dice_half_overlap_single_class() {
        // class 1 only: prediction {0,1}, reference {1,2}; other foreground classes exact-empty.
        let pred = onehot(&[1, 1, 0, 0], 1, 1, 4);
        let gt = onehot(&[0, 1, 1, 0], 1, 1, 4);
        let mut tape = Tape::new();
        let (p, g) = (tape.constant(pred), tape.constant(gt));
        let overlap = tape.mul(p, g).unwrap();
        let inter = tape.channel_sums(overlap).unwrap();
        assert_eq!(tape.value(inter).data()[1], 1.0);
        let d = dice_loss(&mut tape, p, g, 1e-5).unwrap();
        // class 1 term ≈ 0.5; classes 2 and 3 are empty in both (ε/ε = 1).
        let expected = 1.0 - (0.5 + 1.0 + 1.0) / 3.0;
        assert!((scalar(&tape, d) - expected).abs() < 1e-4);
    }

    #[test]
    fn mixes_are_linear() {
        let gt = onehot(&[0, 1, 2, 3], 1, 2, 2);
        let pr = Tensor::new(
            [1, 4, 2, 2],
            vec![
                0.4, 0.1, 0.3, 0.2, 0.2, 0.5, 0.1, 0.3, 0.2, 0.2, 0.4, 0.1, 0.2, 0.2, 0.2, 0.4,
            ],
        )
        .unwrap();
        let mut tape = Tape::new();
        let (p, g) = (tape.constant(pr), tape.constant(gt));
        let ce = cross_entropy(&mut tape, p, g).unwrap();
        let dice = dice_loss(&mut tape, p, g, 1e-5).unwrap();
        let (ce_v, dice_v) = (scalar(&tape, ce), scalar(&tape, dice));

        let w1 = LossWeights {
            beta1: 1.0,
            ..Default::default()
        };
        let l = loss_id(&mut tape, p, g, &w1).unwrap();
        assert_eq!(scalar(&tape, l.total), ce_v);
        let w0 = LossWeights {
            beta1: 0.0,
            beta2: 0.0,
            ..Default::default()
        };
        let l = loss_id(&mut tape, p, g, &w0).unwrap();
        assert_eq!(scalar(&tape, l.total), dice_v);
        let l = loss_dt(&mut tape, p, g, &w0).unwrap();
        assert_eq!(scalar(&tape, l.total), dice_v);

        let w = LossWeights::default();
        let a = loss_id(&mut tape, p, g, &w).unwrap();
        let b = loss_dt(&mut tape, p, g, &w).unwrap();
        assert_eq!(
            scalar(&tape, a.total).to_bits(),
            scalar(&tape, b.total).to_bits()
        );
        assert!((scalar(&tape, a.total) - (0.9 * ce_v + 0.1 * dice_v)).abs() < 1e-12);
    }

    #[test]
    fn loss_g_weighting_and_absent_terms() {
        let gt = onehot(&[0, 1, 2, 3, 3, 2, 1, 0], 2, 2, 2);
        let pr = Tensor::from_fn([2, 4, 2, 2], |i| 0.1 + 0.05 * (i % 7) as f64);
        let w = LossWeights::default();

        let mut tape = Tape::new();
        let (p, g) = (tape.constant(pr.clone()), tape.constant(gt.clone()));
        let all_expert = loss_g(&mut tape, p, g, &[Supervision::Expert; 2], &w).unwrap();
        let id = loss_id(&mut tape, p, g, &w).unwrap();
        assert!((scalar(&tape, all_expert.total) - 0.9 * scalar(&tape, id.total)).abs() < 1e-12);
        assert!(all_expert.dt.is_none());

        let tags = [Supervision::Expert, Supervision::Pseudo];
        let mixed = loss_g(&mut tape, p, g, &tags, &w).unwrap();
        let (i, d) = (mixed.id.unwrap().total, mixed.dt.unwrap().total);
        let want = 0.9 * scalar(&tape, i) + 0.1 * scalar(&tape, d);
        assert!((scalar(&tape, mixed.total) - want).abs() < 1e-12);

        let w1 = LossWeights { lambda: 1.0, ..w };
        let only_id = loss_g(&mut tape, p, g, &tags, &w1).unwrap();
        assert_eq!(
            scalar(&tape, only_id.total),
            scalar(&tape, only_id.id.unwrap().total)
        );

        assert!(loss_g(&mut tape, p, g, &[], &w).is_err());
    }

    #[test]
    fn loss_d_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let half = tape.constant(Tensor::full([3, 1], 0.5));
        let l = loss_d(
            &mut tape,
            &DiscriminatorOutputs {
                real_s: Some(half),
                real_t: Some(half),
                fake_s: Some(half),
                fake_t: Some(half),
            },
        )
        .unwrap();
        assert!((scalar(&tape, l.value) - 4.0 * 0.5f64.ln()).abs() < 1e-12);

        let real = tape.constant(Tensor::full([1, 1], 0.8));
        let fake = tape.constant(Tensor::full([1, 1], 0.3));
        let l = loss_d(
            &mut tape,
            &DiscriminatorOutputs {
                real_s: Some(real),
                fake_s: Some(fake),
                ..Default::default()
            },
        )
        .unwrap();
        assert!((scalar(&tape, l.value) - (0.8f64.ln() + 0.7f64.ln())).abs() < 1e-12);
        assert!((scalar(&tape, l.value) + 0.5798).abs() < 1e-4);

        let one = tape.constant(Tensor::full([2, 1], 1.0));
        let zero = tape.constant(Tensor::full([2, 1], 0.0));
        let l = loss_d(
            &mut tape,
            &DiscriminatorOutputs {
                real_s: Some(one),
                fake_s: Some(zero),
                ..Default::default()
            },
        )
        .unwrap();
        let v = scalar(&tape, l.value);
        assert!(v < 0.0 && v > -1e-6, "{v}");
        assert_eq!(l.out_of_range, 4);
    }

    #[test]
    fn loss_adv_is_sum_and_rejects_non_finite() {
        let mut tape = Tape::<f64>::new();
        let d = tape.constant(Tensor::scalar(-2.0));
        let g = tape.constant(Tensor::scalar(1.0));
        let a = loss_adv(&mut tape, d, g).unwrap();
        assert_eq!(scalar(&tape, a), -1.0);
        let bad = tape.constant(Tensor::scalar(f64::NAN));
        assert!(matches!(
            loss_adv(&mut tape, bad, g),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn weights_validate_range() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            lambda: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        let a = LossWeights::default().with_ce_dice_mix(0.7);
        assert_eq!((a.beta1, a.beta2), (0.7, 0.7));
    }
}
