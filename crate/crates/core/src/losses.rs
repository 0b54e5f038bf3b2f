//! Classification and segmentation losses plus the multi-task aggregate.
//!
//! Both classification losses are one-vs-rest over per-class sigmoids,
//! summed over classes, divided by the class count, and averaged over the
//! batch. Loss B weights the positive term by the class weight; loss A is
//! unweighted but shapes the two terms asymmetrically (focusing exponents
//! and a probability margin on the negative side).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, TensorId};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub murmur: [f64; 3],
    pub outcome: [f64; 2],
    pub lambda: (f64, f64, f64),
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            murmur: [5.0, 3.0, 1.0],
            outcome: [5.0, 1.0],
            lambda: (1.0, 1.0, 1.0),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all_pos = self.murmur.iter().chain(&self.outcome).all(|w| *w > 0.0);
        if !all_pos {
            return Err(Error::invalid("loss weights must be positive"));
        }
        let (a, b, c) = self.lambda;
        if a < 0.0 || b < 0.0 || c < 0.0 {
            return Err(Error::invalid("task mixing coefficients must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AslParams {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
}

impl Default for AslParams {
    fn default() -> Self {
        AslParams {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            margin: 0.05,
        }
    }
}

impl AslParams {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_pos < 0.0 || self.gamma_neg < 0.0 {
            return Err(Error::invalid("asymmetric loss: focusing exponents must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::invalid(format!(
                "asymmetric loss: margin {} outside [0, 1)",
                self.margin
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    A,
    B,
}

fn class_setup(g: &Graph, logits: TensorId, targets: &[usize]) -> Result<(usize, usize)> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::invalid(format!("loss: logits must be (N, K), got {shape:?}")));
    }
    let (n, k) = (shape[0], shape[1]);
    if !(2..=3).contains(&k) {
        return Err(Error::invalid(format!("loss: class count {k} must be 2 or 3")));
    }
    if targets.len() != n {
        return Err(Error::invalid(format!(
            "loss: {n} rows of logits but {} targets",
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| **t >= k) {
        return Err(Error::invalid(format!("loss: target {t} out of range for {k} classes")));
    }
    Ok((n, k))
}

fn one_hot(g: &mut Graph, n: usize, k: usize, targets: &[usize], scale: &[f64]) -> TensorId {
    let mut data = vec![0.0; n * k];
    for (row, &t) in targets.iter().enumerate() {
        data[row * k + t] = scale[t];
    }
    g.constant(&[n, k], data).unwrap()
}

fn inverted_one_hot(g: &mut Graph, n: usize, k: usize, targets: &[usize]) -> TensorId {
    let mut data = vec![1.0; n * k];
    for (row, &t) in targets.iter().enumerate() {
        data[row * k + t] = 0.0;
    }
    g.constant(&[n, k], data).unwrap()
}

/// Challenge-weighted one-vs-rest BCE, mean over batch, summed over classes
/// and divided by the class count.
pub fn loss_b(
    g: &mut Graph,
    logits: TensorId,
    targets: &[usize],
    weights: &[f64],
) -> Result<TensorId> {
    let (n, k) = class_setup(g, logits, targets)?;
    if weights.len() != k {
        return Err(Error::invalid(format!(
            "loss: {k} classes but {} weights",
            weights.len()
        )));
    }
    let neg_z = g.scale(logits, -1.0);
    let nlog_p = g.softplus(neg_z);
    let nlog_q = g.softplus(logits);
    let wy = one_hot(g, n, k, targets, weights);
    let y_not = inverted_one_hot(g, n, k, targets);
    let pos = g.mul(wy, nlog_p)?;
    let neg = g.mul(y_not, nlog_q)?;
    let both = g.add(pos, neg)?;
    let total = g.sum(both);
    Ok(g.scale(total, 1.0 / (n * k) as f64))
}

/// Asymmetric loss: positive term -(1-p)^g+ log p, negative term
/// -(p-m)_+^g- log(1 - (p-m)_+), reduced like `loss_b`. With both
/// exponents and the margin zero it reproduces unit-weight `loss_b`.
pub fn loss_a(
    g: &mut Graph,
    logits: TensorId,
    targets: &[usize],
    p: &AslParams,
) -> Result<TensorId> {
    p.validate()?;
    let (n, k) = class_setup(g, logits, targets)?;
    let neg_z = g.scale(logits, -1.0);
    let nlog_p = g.softplus(neg_z);
    let q = g.sigmoid(neg_z);
    let pos_factor = g.powf(q, p.gamma_pos);
    let pos_term = g.mul(pos_factor, nlog_p)?;

    let (p_shift, nlog_one_minus) = if p.margin == 0.0 {
        (g.sigmoid(logits), g.softplus(logits))
    } else {
        let prob = g.sigmoid(logits);
        let shifted = g.add_scalar(prob, -p.margin);
        let p_shift = g.clamp_min(shifted, 0.0);
        // 1 - p_shift stays >= margin, so the log is safe.
        let neg_p = g.scale(p_shift, -1.0);
        let one_minus = g.add_scalar(neg_p, 1.0);
        let log_om = g.ln(one_minus);
        (p_shift, g.scale(log_om, -1.0))
    };
    let neg_factor = g.powf(p_shift, p.gamma_neg);
    let neg_term = g.mul(neg_factor, nlog_one_minus)?;

    let y = one_hot(g, n, k, targets, &vec![1.0; k]);
    let y_not = inverted_one_hot(g, n, k, targets);
    let pos = g.mul(y, pos_term)?;
    let neg = g.mul(y_not, neg_term)?;
    let both = g.add(pos, neg)?;
    let total = g.sum(both);
    Ok(g.scale(total, 1.0 / (n * k) as f64))
}

/// Majority vote over non-overlapping blocks of `stride` per-sample states;
/// ties resolve to the smaller state id. A trailing partial block votes
/// among its remaining samples.
pub fn downsample_states(states: &[u8], stride: usize) -> Vec<u8> {
    assert!(stride > 0);
    states
        .chunks(stride)
        .map(|chunk| {
            let mut counts = [0usize; 5];
            for &s in chunk {
                counts[s as usize] += 1;
            }
            (0..5).max_by_key(|&s| (counts[s], std::cmp::Reverse(s))).unwrap() as u8
        })
        .collect()
}

/// Frame-level segmentation cross entropy over states 1-4. Frames whose
/// target is 0 (unannotated) are excluded from the mean; if every frame is
/// masked the loss is the constant 0.
pub fn loss_seg(g: &mut Graph, seg_logits: TensorId, frame_targets: &[u8]) -> Result<TensorId> {
    let shape = g.shape(seg_logits).to_vec();
    if shape.len() != 3 || shape[1] != 5 {
        return Err(Error::invalid(format!(
            "segmentation loss: logits must be (N, 5, L), got {shape:?}"
        )));
    }
    let (n, l) = (shape[0], shape[2]);
    if frame_targets.len() != n * l {
        return Err(Error::invalid(format!(
            "segmentation loss: {} frame targets for shape ({n}, {l})",
            frame_targets.len()
        )));
    }
    if let Some(t) = frame_targets.iter().find(|t| **t > 4) {
        return Err(Error::invalid(format!("segmentation loss: state {t} out of range")));
    }
    let annotated = frame_targets.iter().filter(|t| **t > 0).count();
    if annotated == 0 {
        return Ok(g.scalar(0.0));
    }
    let heart = g.narrow(seg_logits, 1, 1, 4)?;
    let logp = g.log_softmax(heart, 1)?;
    let mut hot = vec![0.0; n * 4 * l];
    for row in 0..n {
        for frame in 0..l {
            let t = frame_targets[row * l + frame];
            if t > 0 {
                hot[row * 4 * l + (t as usize - 1) * l + frame] = 1.0;
            }
        }
    }
    let mask = g.constant(&[n, 4, l], hot)?;
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / annotated as f64))
}

/// Per-batch targets for the three heads. `seg` is the flattened (N, L')
/// frame-state matrix and may be empty when the segmentation head is off.
#[derive(Clone, Debug, Default)]
pub struct BatchTargets {
    pub murmur: Vec<usize>,
    pub outcome: Vec<usize>,
    pub seg: Vec<u8>,
}

pub struct MtlLossTerms {
    pub total: TensorId,
    pub murmur: TensorId,
    pub outcome: TensorId,
    pub seg: Option<TensorId>,
}

/// Multi-task aggregate: lambda-weighted sum of the murmur, outcome, and
/// (when a segmentation head is present) segmentation losses.
#[allow(clippy::too_many_arguments)]
pub fn mtl_loss(
    g: &mut Graph,
    murmur_logits: TensorId,
    outcome_logits: TensorId,
    seg_logits: Option<TensorId>,
    targets: &BatchTargets,
    w: &LossWeights,
    kind: LossKind,
    asl: &AslParams,
) -> Result<MtlLossTerms> {
    w.validate()?;
    let murmur = match kind {
        LossKind::B => loss_b(g, murmur_logits, &targets.murmur, &w.murmur)?,
        LossKind::A => loss_a(g, murmur_logits, &targets.murmur, asl)?,
    };
    let outcome = match kind {
        LossKind::B => loss_b(g, outcome_logits, &targets.outcome, &w.outcome)?,
        LossKind::A => loss_a(g, outcome_logits, &targets.outcome, asl)?,
    };
    let seg = match seg_logits {
        Some(ids) => Some(loss_seg(g, ids, &targets.seg)?),
        None => None,
    };
    let (lm, lo, ls) = w.lambda;
    let m_part = g.scale(murmur, lm);
    let o_part = g.scale(outcome, lo);
    let mut total = g.add(m_part, o_part)?;
    if let Some(s) = seg {
        let s_part = g.scale(s, ls);
        total = g.add(total, s_part)?;
    }
    Ok(MtlLossTerms {
        total,
        murmur,
        outcome,
        seg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::check_grad_against_fd;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn eval(build: impl FnOnce(&mut Graph) -> TensorId) -> f64 {
        let mut g = Graph::new();
        let id = build(&mut g);
        g.data(id)[0]
    }

    #[test]
    fn loss_b_hand_example() {
        // All-zero logits give sigma = 0.5 everywhere; target 0 with
        // weights (5,3,1) costs (5+1+1)/3 * ln 2.
        let v = eval(|g| {
            let z = g.leaf(&[1, 3], vec![0.0; 3], false).unwrap();
            loss_b(g, z, &[0], &[5.0, 3.0, 1.0]).unwrap()
        });
        let want = 7.0 / 3.0 * std::f64::consts::LN_2;
        assert!((v - want).abs() < 1e-12, "{v} vs {want}");
    }

    #[test]
    fn loss_b_perfect_prediction_vanishes() {
        let v = eval(|g| {
            let z = g.leaf(&[1, 3], vec![40.0, -40.0, -40.0], false).unwrap();
            loss_b(g, z, &[0], &[5.0, 3.0, 1.0]).unwrap()
        });
        assert!(v < 1e-10, "{v}");
    }

    #[test]
    fn loss_b_unit_weights_is_plain_bce() {
        let mut rng = StdRng::seed_from_u64(2);
        let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let targets = [2usize, 0];
        let v = eval(|g| {
            let z = g.leaf(&[2, 3], logits.clone(), false).unwrap();
            loss_b(g, z, &targets, &[1.0, 1.0, 1.0]).unwrap()
        });
        // Direct host-side evaluation of unweighted one-vs-rest BCE.
        let mut want = 0.0;
        for row in 0..2 {
            for k in 0..3 {
                let z = logits[row * 3 + k];
                let sp = |x: f64| {
                    if x > 0.0 {
                        x + (-x).exp().ln_1p()
                    } else {
                        x.exp().ln_1p()
                    }
                };
                want += if targets[row] == k { sp(-z) } else { sp(z) };
            }
        }
        want /= 6.0;
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn loss_b_rejects_bad_targets_and_weights() {
        let mut g = Graph::new();
        let z = g.leaf(&[2, 3], vec![0.0; 6], false).unwrap();
        assert!(loss_b(&mut g, z, &[0, 3], &[1.0, 1.0, 1.0]).is_err());
        assert!(loss_b(&mut g, z, &[0], &[1.0, 1.0, 1.0]).is_err());
        assert!(loss_b(&mut g, z, &[0, 1], &[1.0, 1.0]).is_err());
        let z4 = g.leaf(&[1, 4], vec![0.0; 4], false).unwrap();
        assert!(loss_b(&mut g, z4, &[0], &[1.0; 4]).is_err());
    }

    #[test]
    fn loss_a_hand_example_negative_term() {
        // sigma(z1) = 0.9 on a negative class, margin 0.05, gamma- 4:
        // the term is 0.85^4 * (-ln 0.15). The target class logit is
        // saturated so its contribution is negligible.
        let z1 = (0.9f64 / 0.1).ln();
        let v = eval(|g| {
            let z = g.leaf(&[1, 2], vec![40.0, z1], false).unwrap();
            loss_a(g, z, &[0], &AslParams::default()).unwrap()
        });
        let want = 0.85f64.powi(4) * -(0.15f64.ln());
        assert!((2.0 * v - want).abs() < 1e-10, "{} vs {want}", 2.0 * v);
        // Sanity: the constant itself is about 0.990.
        assert!((want - 0.990).abs() < 1e-3);
    }

    #[test]
    fn loss_a_margin_zeroes_small_negatives() {
        // sigma(z1) exactly at the margin: the negative term must vanish.
        let m = 0.05f64;
        let z1 = (m / (1.0 - m)).ln();
        let v = eval(|g| {
            let z = g.leaf(&[1, 2], vec![40.0, z1], false).unwrap();
            loss_a(g, z, &[0], &AslParams::default()).unwrap()
        });
        assert!(v < 1e-12, "{v}");
    }

    #[test]
    fn loss_a_reduces_to_unit_loss_b() {
        let mut rng = StdRng::seed_from_u64(4);
        let logits: Vec<f64> = (0..9).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let targets = [1usize, 0, 2];
        let zeroed = AslParams {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            margin: 0.0,
        };
        let a = eval(|g| {
            let z = g.leaf(&[3, 3], logits.clone(), false).unwrap();
            loss_a(g, z, &targets, &zeroed).unwrap()
        });
        let b = eval(|g| {
            let z = g.leaf(&[3, 3], logits.clone(), false).unwrap();
            loss_b(g, z, &targets, &[1.0, 1.0, 1.0]).unwrap()
        });
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn loss_weight_monotonicity() {
        let mut rng = StdRng::seed_from_u64(6);
        let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let at = |w0: f64| {
            eval(|g| {
                let z = g.leaf(&[2, 3], logits.clone(), false).unwrap();
                loss_b(g, z, &[0, 0], &[w0, 3.0, 1.0]).unwrap()
            })
        };
        let mut prev = at(1.0);
        for w0 in [2.0, 3.5, 5.0, 8.0] {
            let cur = at(w0);
            assert!(cur > prev, "weight {w0}: {cur} <= {prev}");
            prev = cur;
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(8);
        let x0: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        check_grad_against_fd(
            &|g, x| {
                let z = g.leaf(&[2, 3], x.to_vec(), true).unwrap();
                let l = loss_b(g, z, &[0, 2], &[5.0, 3.0, 1.0]).unwrap();
                (z, l)
            },
            &x0,
            1e-5,
        );
        check_grad_against_fd(
            &|g, x| {
                let z = g.leaf(&[2, 3], x.to_vec(), true).unwrap();
                let l = loss_a(g, z, &[1, 0], &AslParams::default()).unwrap();
                (z, l)
            },
            &x0,
            1e-5,
        );
        check_grad_against_fd(
            &|g, x| {
                let z = g.leaf(&[2, 3], x.to_vec(), true).unwrap();
                let l = loss_a(
                    g,
                    z,
                    &[1, 0],
                    &AslParams {
                        gamma_pos: 1.5,
                        gamma_neg: 2.0,
                        margin: 0.0,
                    },
                )
                .unwrap();
                (z, l)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn downsample_states_majority_and_ties() {
        // 3 votes each for states 1 and 2: tie resolves to the smaller id.
        let frame = downsample_states(&[1, 1, 1, 2, 2, 2, 0, 0], 8);
        assert_eq!(frame, vec![1]);
        let frames = downsample_states(&[4, 4, 4, 4, 1, 1, 0, 0, 3, 3, 3], 8);
        assert_eq!(frames, vec![4, 3]);
        assert_eq!(downsample_states(&[0; 16], 8), vec![0, 0]);
    }

    #[test]
    fn loss_seg_uniform_and_masked() {
        // Uniform logits over the four annotated states cost ln 4.
        let v = eval(|g| {
            let z = g.leaf(&[1, 5, 4], vec![0.3; 20], false).unwrap();
            loss_seg(g, z, &[1, 2, 3, 4]).unwrap()
        });
        assert!((v - 4.0f64.ln()).abs() < 1e-12, "{v}");

        // Fully masked batch costs exactly 0.
        let v = eval(|g| {
            let z = g.leaf(&[1, 5, 4], vec![0.7; 20], false).unwrap();
            loss_seg(g, z, &[0, 0, 0, 0]).unwrap()
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn loss_seg_ignores_masked_frames() {
        let mut rng = StdRng::seed_from_u64(10);
        let mut logits_a = vec![0.0; 10];
        let mut logits_b = vec![0.0; 10];
        for i in 0..10 {
            let v = rng.gen_range(-1.0..1.0);
            logits_a[i] = v;
            // Same logits on the annotated frame, garbage on the masked one.
            logits_b[i] = if i % 2 == 0 { v } else { rng.gen_range(-9.0..9.0) };
        }
        let f = |data: Vec<f64>| {
            eval(move |g| {
                let z = g.leaf(&[1, 5, 2], data, false).unwrap();
                loss_seg(g, z, &[3, 0]).unwrap()
            })
        };
        assert_eq!(f(logits_a), f(logits_b));
    }

    #[test]
    fn loss_seg_perfect_prediction_vanishes() {
        let mut data = vec![-40.0; 5 * 3];
        // Frame targets 1, 2, 4: drive the matching channels high.
        data[1 * 3] = 40.0;
        data[2 * 3 + 1] = 40.0;
        data[4 * 3 + 2] = 40.0;
        let v = eval(|g| {
            let z = g.leaf(&[1, 5, 3], data, false).unwrap();
            loss_seg(g, z, &[1, 2, 4]).unwrap()
        });
        assert!(v < 1e-10, "{v}");
    }

    #[test]
    fn loss_seg_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(12);
        let x0: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        check_grad_against_fd(
            &|g, x| {
                let z = g.leaf(&[2, 5, 3], x.to_vec(), true).unwrap();
                let l = loss_seg(g, z, &[1, 0, 4, 2, 2, 3]).unwrap();
                (z, l)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn mtl_total_is_lambda_weighted_sum() {
        let mut rng = StdRng::seed_from_u64(14);
        let mz: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let oz: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sz: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let targets = BatchTargets {
            murmur: vec![0, 2],
            outcome: vec![1, 0],
            seg: vec![1, 3, 0, 2],
        };
        let w = LossWeights {
            lambda: (0.5, 2.0, 1.5),
            ..LossWeights::default()
        };
        let mut g = Graph::new();
        let m = g.leaf(&[2, 3], mz.clone(), false).unwrap();
        let o = g.leaf(&[2, 2], oz.clone(), false).unwrap();
        let s = g.leaf(&[2, 5, 2], sz.clone(), false).unwrap();
        let terms = mtl_loss(
            &mut g,
            m,
            o,
            Some(s),
            &targets,
            &w,
            LossKind::B,
            &AslParams::default(),
        )
        .unwrap();
        let total = g.data(terms.total)[0];
        let want = 0.5 * g.data(terms.murmur)[0]
            + 2.0 * g.data(terms.outcome)[0]
            + 1.5 * g.data(terms.seg.unwrap())[0];
        assert!((total - want).abs() < 1e-12);

        // Dropping the segmentation head equals setting its lambda to 0.
        let mut g2 = Graph::new();
        let m2 = g2.leaf(&[2, 3], mz, false).unwrap();
        let o2 = g2.leaf(&[2, 2], oz, false).unwrap();
        let two_head = mtl_loss(
            &mut g2,
            m2,
            o2,
            None,
            &targets,
            &w,
            LossKind::B,
            &AslParams::default(),
        )
        .unwrap();
        let want2 = 0.5 * g2.data(two_head.murmur)[0] + 2.0 * g2.data(two_head.outcome)[0];
        assert!((g2.data(two_head.total)[0] - want2).abs() < 1e-15);
    }
}
