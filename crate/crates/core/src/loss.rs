//! Winner-takes-all losses for multi-mode prediction.
//!
//! The regressed mode is the one whose final point points in the direction
//! closest to the ground truth's final point. The MTP loss adds the mean
//! pointwise L2 error of that mode to −log of its confidence; the
//! angle-scaled loss multiplies the MTP loss by `exp(|α| / 20)` where α is
//! the ground truth's final steering angle in degrees, so rare sharp turns
//! weigh more than the dominant straight-ahead samples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::net::Prediction;

/// Final points shorter than this have no direction.
pub const DEGENERATE_EPS: f64 = 1e-6;
/// Confidence floor before taking the log.
pub const CONFIDENCE_FLOOR: f64 = 1e-12;
/// Degrees of steering angle per e-fold of the penalty.
pub const PENALTY_DEGREES: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Mtp,
    AngleScaled,
}

impl LossVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mtp" => Ok(LossVariant::Mtp),
            "angle_scaled" | "angle-scaled" => Ok(LossVariant::AngleScaled),
            other => Err(Error::Argument(format!("unknown loss variant {other:?}"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LossVariant::Mtp => "MTP loss",
            LossVariant::AngleScaled => "Angle scaled loss",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossOptions {
    /// Mean of squared distances instead of mean distances.
    pub squared_regression: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub winner_index: usize,
    /// `None` when the winner came from the min-ADE fallback.
    pub angle_deg: Option<f64>,
    pub regression: f64,
    pub classification: f64,
    pub penalty: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Error, PartialEq)]
#[error("final point too close to the origin to define a direction")]
pub struct DegenerateAngle;

/// Angle in degrees between the final points of two trajectories.
pub fn angle_between(traj: &[Vec2], gt: &[Vec2]) -> std::result::Result<f64, DegenerateAngle> {
    let (a, b) = match (traj.last(), gt.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(DegenerateAngle),
    };
    let (na, nb) = (a.norm(), b.norm());
    if na <= DEGENERATE_EPS || nb <= DEGENERATE_EPS {
        return Err(DegenerateAngle);
    }
    let cos = (a.dot(b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(cos.acos().to_degrees())
}

fn mean_distance(traj: &[Vec2], gt: &[Vec2]) -> f64 {
    traj.iter().zip(gt).map(|(p, q)| p.distance(*q)).sum::<f64>() / gt.len() as f64
}

/// Index of the trajectory with the smallest final-point angle to `gt`.
///
/// Ties go to the lower index. Trajectories with a degenerate final point
/// never win on angle; if the ground truth itself is degenerate (or every
/// candidate is), the trajectory with the smallest mean distance wins.
pub fn select_winner(trajectories: &[Vec<Vec2>], gt: &[Vec2]) -> usize {
    let gt_degenerate = gt.last().is_none_or(|p| p.norm() <= DEGENERATE_EPS);
    if !gt_degenerate {
        let mut best: Option<(usize, f64)> = None;
        for (k, t) in trajectories.iter().enumerate() {
            if let Ok(theta) = angle_between(t, gt) {
                if best.is_none_or(|(_, b)| theta < b) {
                    best = Some((k, theta));
                }
            }
        }
        if let Some((k, _)) = best {
            return k;
        }
    }
    let mut best = (0, f64::INFINITY);
    for (k, t) in trajectories.iter().enumerate() {
        let d = mean_distance(t, gt);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Mean over time of the pointwise Euclidean distance (or squared distance).
pub fn regression_loss(traj: &[Vec2], gt: &[Vec2], opts: LossOptions) -> f64 {
    let t = gt.len() as f64;
    if opts.squared_regression {
        traj.iter()
            .zip(gt)
            .map(|(p, q)| {
                let d = *p - *q;
                d.dot(d)
            })
            .sum::<f64>()
            / t
    } else {
        mean_distance(traj, gt)
    }
}

/// −ln of the winner's confidence, floored at [`CONFIDENCE_FLOOR`].
pub fn classification_loss(confidences: &[f64], winner: usize) -> f64 {
    -confidences[winner].max(CONFIDENCE_FLOOR).ln()
}

/// Signed steering angle of the ground truth's final point, in degrees.
pub fn steering_angle_deg(gt: &[Vec2]) -> Option<f64> {
    let last = *gt.last()?;
    (last.norm() > DEGENERATE_EPS).then(|| last.y.atan2(last.x).to_degrees())
}

/// `exp(|α| / 20)`, or 1 when the final point is degenerate.
pub fn angle_penalty(gt: &[Vec2]) -> f64 {
    steering_angle_deg(gt).map_or(1.0, |a| (a.abs() / PENALTY_DEGREES).exp())
}

fn check_inputs(pred: &Prediction, gt: &[Vec2]) -> Result<()> {
    pred.validate()?;
    if gt.is_empty() {
        return Err(Error::Argument("empty ground truth".into()));
    }
    if pred.trajectories[0].len() != gt.len() {
        return Err(Error::Argument(format!(
            "prediction has {} points, ground truth {}",
            pred.trajectories[0].len(),
            gt.len()
        )));
    }
    Ok(())
}

pub fn mtp_loss(pred: &Prediction, gt: &[Vec2], opts: LossOptions) -> Result<LossBreakdown> {
    check_inputs(pred, gt)?;
    let winner = select_winner(&pred.trajectories, gt);
    let regression = regression_loss(&pred.trajectories[winner], gt, opts);
    let classification = classification_loss(&pred.confidences, winner);
    Ok(LossBreakdown {
        winner_index: winner,
        angle_deg: angle_between(&pred.trajectories[winner], gt).ok(),
        regression,
        classification,
        penalty: 1.0,
        total: regression + classification,
    })
}

pub fn angle_scaled_loss(pred: &Prediction, gt: &[Vec2], opts: LossOptions) -> Result<LossBreakdown> {
    let mut b = mtp_loss(pred, gt, opts)?;
    b.penalty = angle_penalty(gt);
    b.total *= b.penalty;
    Ok(b)
}

pub fn compute_loss(
    pred: &Prediction,
    gt: &[Vec2],
    variant: LossVariant,
    opts: LossOptions,
) -> Result<LossBreakdown> {
    match variant {
        LossVariant::Mtp => mtp_loss(pred, gt, opts),
        LossVariant::AngleScaled => angle_scaled_loss(pred, gt, opts),
    }
}

/// Loss value plus its gradient with respect to the predicted trajectories
/// and the pre-softmax confidence logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGradient {
    pub breakdown: LossBreakdown,
    pub d_trajectories: Vec<Vec<Vec2>>,
    pub d_logits: Vec<f64>,
}

/// The winner choice and the angle penalty are held fixed (piecewise constant in the outputs).
pub fn loss_gradient(
    pred: &Prediction,
    gt: &[Vec2],
    variant: LossVariant,
    opts: LossOptions,
) -> Result<LossGradient> {
    let breakdown = compute_loss(pred, gt, variant, opts)?;
    let w = breakdown.winner_index;
    let scale = breakdown.penalty;
    let t = gt.len() as f64;
    let mut d_trajectories: Vec<Vec<Vec2>> = pred
        .trajectories
        .iter()
        .map(|tr| vec![Vec2::ZERO; tr.len()])
        .collect();
    for (d, (p, q)) in d_trajectories[w]
        .iter_mut()
        .zip(pred.trajectories[w].iter().zip(gt))
    {
        let diff = *p - *q;
        *d = if opts.squared_regression {
            diff * (2.0 * scale / t)
        } else {
            let n = diff.norm();
            if n > 0.0 {
                diff * (scale / (t * n))
            } else {
                Vec2::ZERO
            }
        };
    }
    let d_logits = if pred.confidences[w] >= CONFIDENCE_FLOOR {
        pred.confidences
            .iter()
            .enumerate()
            .map(|(j, &p)| scale * (p - if j == w { 1.0 } else { 0.0 }))
            .collect()
    } else {
        vec![0.0; pred.confidences.len()]
    };
    Ok(LossGradient {
        breakdown,
        d_trajectories,
        d_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line_to(end: Vec2, t: usize) -> Vec<Vec2> {
        (1..=t).map(|i| end * (i as f64 / t as f64)).collect()
    }

    fn pred(trajs: Vec<Vec<Vec2>>, conf: Vec<f64>) -> Prediction {
        Prediction {
            trajectories: trajs,
            confidences: conf,
        }
    }

    #[test]
    fn angle_examples() {
        let a = line_to(Vec2::new(1.0, 0.0), 3);
        let b = line_to(Vec2::new(0.0, 1.0), 3);
        let c = line_to(Vec2::new(1.0, 1.0), 3);
        assert!((angle_between(&a, &b).unwrap() - 90.0).abs() < 1e-12);
        assert_eq!(angle_between(&a, &a).unwrap(), 0.0);
        assert!((angle_between(&c, &a).unwrap() - 45.0).abs() < 1e-12);
        assert_eq!(angle_between(&a, &[Vec2::ZERO]), Err(DegenerateAngle));
    }

    #[test]
    fn winner_by_angle() {
        let gt = line_to(Vec2::new(10.0, 0.0), 4);
        let at = |deg: f64| line_to(Vec2::from_angle(deg.to_radians()) * 10.0, 4);
        assert_eq!(select_winner(&[at(30.0), at(5.0), at(90.0)], &gt), 1);
        assert_eq!(select_winner(&[at(90.0), at(-20.0), at(20.0)], &gt), 1);
    }

    #[test]
    fn stationary_gt_falls_back_to_ade() {
        let gt = vec![Vec2::ZERO; 4];
        let trajs = vec![
            line_to(Vec2::new(4.0, 0.0), 4),
            line_to(Vec2::new(0.0, 1.0), 4),
            line_to(Vec2::new(-2.0, 0.0), 4),
        ];
        // Brute-force ADE: 2.5, 0.625, 1.25.
        let ades: Vec<f64> = trajs.iter().map(|t| mean_distance(t, &gt)).collect();
        let best = (0..3).min_by(|&a, &b| ades[a].total_cmp(&ades[b])).unwrap();
        assert_eq!(select_winner(&trajs, &gt), best);
        assert_eq!(best, 1);
    }

    #[test]
    fn regression_examples() {
        let gt = line_to(Vec2::new(8.0, 2.0), 4);
        assert_eq!(regression_loss(&gt, &gt, LossOptions::default()), 0.0);
        let shifted: Vec<Vec2> = gt.iter().map(|&p| p + Vec2::new(3.0, 4.0)).collect();
        assert!((regression_loss(&shifted, &gt, LossOptions::default()) - 5.0).abs() < 1e-12);
        let mixed: Vec<Vec2> = gt
            .iter()
            .enumerate()
            .map(|(i, &p)| p + Vec2::new(0.0, if i % 2 == 0 { 1.0 } else { 3.0 }))
            .collect();
        assert!((regression_loss(&mixed, &gt, LossOptions::default()) - 2.0).abs() < 1e-12);
        let sq = LossOptions {
            squared_regression: true,
        };
        assert!((regression_loss(&shifted, &gt, sq) - 25.0).abs() < 1e-12);
    }

    #[test]
    fn classification_examples() {
        assert_eq!(classification_loss(&[1.0, 0.0], 0), 0.0);
        assert!((classification_loss(&[0.5, 0.5], 1) - 2f64.ln()).abs() < 1e-15);
        assert!((classification_loss(&[1.0 / 12.0; 12], 3) - 12f64.ln()).abs() < 1e-12);
        assert!((classification_loss(&[1.0, 0.0], 1) - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn mtp_examples() {
        let gt = line_to(Vec2::new(10.0, 3.0), 6);
        let other = line_to(Vec2::new(-5.0, 8.0), 6);
        let p = pred(vec![other.clone(), gt.clone()], vec![0.0, 1.0]);
        let b = mtp_loss(&p, &gt, LossOptions::default()).unwrap();
        assert_eq!((b.winner_index, b.total, b.penalty), (1, 0.0, 1.0));

        let p = pred(vec![other.clone(), gt.clone(), other.clone()], vec![1.0 / 3.0; 3]);
        let b = mtp_loss(&p, &gt, LossOptions::default()).unwrap();
        assert!((b.total - 3f64.ln()).abs() < 1e-12);

        let off: Vec<Vec2> = gt.iter().map(|&q| q + Vec2::new(3.0, 4.0)).collect();
        let p = pred(vec![off, other], vec![0.5, 0.5]);
        let b = mtp_loss(&p, &gt, LossOptions::default()).unwrap();
        assert_eq!(b.winner_index, 0);
        assert!((b.total - (5.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(angle_penalty(&[Vec2::new(10.0, 0.0)]), 1.0);
        assert!((angle_penalty(&[Vec2::new(0.0, 10.0)]) - 4.5f64.exp()).abs() < 1e-12);
        assert!((angle_penalty(&[Vec2::new(0.0, 10.0)]) - 90.017).abs() < 1e-3);
        assert!((angle_penalty(&[Vec2::new(10.0, 10.0)]) - 9.4877).abs() < 1e-4);
        assert_eq!(angle_penalty(&[Vec2::new(10.0, -10.0)]), angle_penalty(&[Vec2::new(10.0, 10.0)]));
        assert_eq!(angle_penalty(&[Vec2::ZERO]), 1.0);
    }

    #[test]
    fn angle_scaled_examples() {
        let straight = line_to(Vec2::new(12.0, 0.0), 4);
        let guess = line_to(Vec2::new(11.0, 1.0), 4);
        let p = pred(vec![guess.clone(), straight.clone()], vec![0.3, 0.7]);
        let a = mtp_loss(&p, &straight, LossOptions::default()).unwrap();
        let b = angle_scaled_loss(&p, &straight, LossOptions::default()).unwrap();
        assert_eq!(a.total, b.total);

        // MTP total of exactly 2: constant offset of 2 m, confidence 1.
        let turn = line_to(Vec2::new(0.0, 10.0), 4);
        let off: Vec<Vec2> = turn.iter().map(|&q| q + Vec2::new(0.0, 2.0)).collect();
        let p = pred(vec![off], vec![1.0]);
        let b = angle_scaled_loss(&p, &turn, LossOptions::default()).unwrap();
        assert!((b.total - 2.0 * 4.5f64.exp()).abs() < 1e-9);
        assert!((b.total - 180.034).abs() < 1e-3);
    }

    #[test]
    fn gradient_is_penalty_times_mtp_gradient() {
        let gt = line_to(Vec2::new(6.0, 6.0), 5);
        let p = pred(
            vec![line_to(Vec2::new(5.0, 7.0), 5), line_to(Vec2::new(9.0, -1.0), 5)],
            vec![0.4, 0.6],
        );
        let a = loss_gradient(&p, &gt, LossVariant::Mtp, LossOptions::default()).unwrap();
        let b = loss_gradient(&p, &gt, LossVariant::AngleScaled, LossOptions::default()).unwrap();
        let pen = angle_penalty(&gt);
        for (x, y) in a.d_trajectories.iter().flatten().zip(b.d_trajectories.iter().flatten()) {
            assert!((x.x * pen - y.x).abs() < 1e-12 && (x.y * pen - y.y).abs() < 1e-12);
        }
        for (x, y) in a.d_logits.iter().zip(&b.d_logits) {
            assert!((x * pen - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_differences() {
        let gt = line_to(Vec2::new(7.0, 2.0), 3);
        let logits = [0.2, -0.4, 0.9];
        let softmax = |l: &[f64]| {
            let z: f64 = l.iter().map(|v| v.exp()).sum();
            l.iter().map(|v| v.exp() / z).collect::<Vec<_>>()
        };
        let trajs = vec![
            line_to(Vec2::new(6.0, 3.0), 3),
            line_to(Vec2::new(1.0, 7.0), 3),
            line_to(Vec2::new(-3.0, 1.0), 3),
        ];
        let base = pred(trajs.clone(), softmax(&logits));
        let g = loss_gradient(&base, &gt, LossVariant::AngleScaled, LossOptions::default()).unwrap();
        let eps = 1e-6;
        let total = |tr: Vec<Vec<Vec2>>, l: &[f64]| {
            angle_scaled_loss(&pred(tr, softmax(l)), &gt, LossOptions::default())
                .unwrap()
                .total
        };
        for j in 0..3 {
            let (mut lp, mut lm) = (logits, logits);
            lp[j] += eps;
            lm[j] -= eps;
            let num = (total(trajs.clone(), &lp) - total(trajs.clone(), &lm)) / (2.0 * eps);
            assert!((num - g.d_logits[j]).abs() < 1e-6);
        }
        for t in 0..3 {
            let (mut tp, mut tm) = (trajs.clone(), trajs.clone());
            tp[0][t].y += eps;
            tm[0][t].y -= eps;
            let num = (total(tp, &logits) - total(tm, &logits)) / (2.0 * eps);
            assert!((num - g.d_trajectories[0][t].y).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn angle_symmetric_and_scale_invariant(
            ax in -50.0..50.0f64, ay in -50.0..50.0f64,
            bx in -50.0..50.0f64, by in -50.0..50.0f64,
            s in 0.1..10.0f64,
        ) {
            let a = [Vec2::new(ax, ay)];
            let b = [Vec2::new(bx, by)];
            prop_assume!(a[0].norm() > 1e-3 && b[0].norm() > 1e-3);
            let ab = angle_between(&a, &b).unwrap();
            prop_assert!((ab - angle_between(&b, &a).unwrap()).abs() < 1e-9);
            prop_assert!((0.0..=180.0).contains(&ab));
            let scaled = [a[0] * s];
            prop_assert!((ab - angle_between(&scaled, &b).unwrap()).abs() < 1e-6);
        }

        #[test]
        fn penalty_monotone(a in 0.0..180.0f64, b in 0.0..180.0f64) {
            let at = |deg: f64| [Vec2::from_angle(deg.to_radians()) * 10.0];
            let (pa, pb) = (angle_penalty(&at(a)), angle_penalty(&at(b)));
            prop_assert!(pa >= 1.0 && pb >= 1.0);
            if a + 1e-6 < b {
                prop_assert!(pa < pb);
            }
        }

        #[test]
        fn mtp_nonnegative(
            pts in proptest::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 3 * 4),
            gts in proptest::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 4),
            raw in proptest::collection::vec(0.01..1.0f64, 3),
        ) {
            let z: f64 = raw.iter().sum();
            let conf = raw.iter().map(|v| v / z).collect();
            let trajs = pts.chunks(4).map(|c| c.iter().map(|&(x, y)| Vec2::new(x, y)).collect()).collect();
            let gt: Vec<Vec2> = gts.iter().map(|&(x, y)| Vec2::new(x, y)).collect();
            let p = pred(trajs, conf);
            let m = mtp_loss(&p, &gt, LossOptions::default()).unwrap();
            prop_assert!(m.total >= 0.0);
            let s = angle_scaled_loss(&p, &gt, LossOptions::default()).unwrap();
            if m.total > 0.0 {
                prop_assert!((s.total / m.total - angle_penalty(&gt)).abs() < 1e-9 * angle_penalty(&gt));
            }
        }
    }
}
