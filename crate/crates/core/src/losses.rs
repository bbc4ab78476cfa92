//! Training objectives.
//!
//! All three losses share one reduction: for every frame `t` and iterate
//! `k`, a per-coordinate penalty is summed over `x, y` and averaged over the
//! points valid at `t`; frames are weighted by `μ_t = γ_time^(T−t−1)` and
//! iterates by `w_k = γ_iter^(K−k)`, and everything is summed.
//!
//! Predictions are indexed `[t][k][point]` with one entry per frame of the
//! clip, frame 0 included (its iterates are normally the given points, so
//! it contributes nothing).

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Penalty, Var};
use crate::datamodel::{Point, PointSet, TrajectorySet};
use crate::error::{invalid, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub gamma_iter: f64,
    /// Time discount of the teacher loss.
    pub gamma_time: f64,
    /// Time discount of the simulation and zero-flow losses.
    pub sim_gamma_time: f64,
    pub huber_delta: f64,
    pub zero_flow_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { gamma_iter: 0.8, gamma_time: 0.95, sim_gamma_time: 1.0, huber_delta: 6.0, zero_flow_weight: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("gamma_iter", self.gamma_iter), ("gamma_time", self.gamma_time), ("sim_gamma_time", self.sim_gamma_time)] {
            if !(g > 0.0 && g <= 1.0) {
                return Err(invalid!("{name} must lie in (0, 1], got {g}"));
            }
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            return Err(invalid!("huber_delta must be positive, got {}", self.huber_delta));
        }
        if !(self.zero_flow_weight >= 0.0 && self.zero_flow_weight.is_finite()) {
            return Err(invalid!("zero_flow_weight must be non-negative, got {}", self.zero_flow_weight));
        }
        Ok(())
    }
}

/// Which objective a batch is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Teacher,
    Simulation,
    ZeroFlow,
}

impl LossKind {
    pub fn penalty(self, cfg: &LossConfig) -> Penalty {
        match self {
            LossKind::Teacher => Penalty::Huber { delta: cfg.huber_delta },
            LossKind::Simulation | LossKind::ZeroFlow => Penalty::L1,
        }
    }

    pub fn gamma_time(self, cfg: &LossConfig) -> f64 {
        match self {
            LossKind::Teacher => cfg.gamma_time,
            LossKind::Simulation | LossKind::ZeroFlow => cfg.sim_gamma_time,
        }
    }

    pub fn scale(self, cfg: &LossConfig) -> f64 {
        match self {
            LossKind::ZeroFlow => cfg.zero_flow_weight,
            _ => 1.0,
        }
    }
}

/// `w_k = γ^(K−k)` for `k = 0..=K`.
pub fn iteration_weights(k: usize, gamma_iter: f64) -> Vec<f64> {
    (0..=k).map(|i| math::powi(gamma_iter, (k - i) as i32)).collect()
}

/// `μ_t = γ^(T−t−1)` for `t = 0..T`.
pub fn time_weights(t: usize, gamma_time: f64) -> Vec<f64> {
    (0..t).map(|i| math::powi(gamma_time, (t - i - 1) as i32)).collect()
}

/// Record the loss of one frame's iterates on `g`; `mu` is that frame's time
/// weight. Returns `None` if no point is valid.
pub fn frame_loss(
    g: &mut Graph,
    iterates: &[Var],
    target: &[Point],
    valid: &[bool],
    kind: LossKind,
    cfg: &LossConfig,
    mu: f64,
) -> Option<Var> {
    if !valid.iter().any(|&v| v) {
        return None;
    }
    let k = iterates.len() - 1;
    let w = iteration_weights(k, cfg.gamma_iter);
    let tgt: Vec<f64> = target.iter().flat_map(|p| [p.x, p.y]).collect();
    let penalty = kind.penalty(cfg);
    let scale = mu * kind.scale(cfg);
    let terms: Vec<(Var, f64)> = iterates
        .iter()
        .zip(&w)
        .map(|(&p, &wk)| (g.point_loss(p, &tgt, valid, penalty, 1.0), wk * scale))
        .collect();
    Some(g.weighted_sum(&terms))
}

fn sequence_loss(pred: &[Vec<Vec<Point>>], gt: &TrajectorySet, kind: LossKind, cfg: &LossConfig) -> Result<f64> {
    let t = gt.num_frames();
    if pred.len() != t {
        return Err(invalid!("predictions cover {} frames, labels {}", pred.len(), t));
    }
    if !gt.any_valid() {
        return Err(invalid!("labels contain no valid entries"));
    }
    let k = pred.first().map(|f| f.len()).unwrap_or(0);
    if k == 0 || pred.iter().any(|f| f.len() != k || f.iter().any(|p| p.len() != gt.num_points())) {
        return Err(invalid!("every frame needs the same non-zero number of iterates over {} points", gt.num_points()));
    }
    let mu = time_weights(t, kind.gamma_time(cfg));
    let mut total = 0.0;
    for (ti, frame) in pred.iter().enumerate() {
        let valid: Vec<bool> = (0..gt.num_points()).map(|i| gt.is_valid(i, ti)).collect();
        let mut g = Graph::inference();
        let vars: Vec<Var> = frame.iter().map(|pts| g.input(points_tensor(pts), false)).collect();
        if let Some(l) = frame_loss(&mut g, &vars, &gt.frame(ti), &valid, kind, cfg, mu[ti]) {
            total += g.value(l).item();
        }
    }
    Ok(total)
}

fn points_tensor(pts: &[Point]) -> crate::Tensor {
    crate::Tensor::from_vec(&[pts.len(), 2], pts.iter().flat_map(|p| [p.x, p.y]).collect())
}

/// Huber loss against teacher labels with `γ_time`.
pub fn teacher_loss(pred: &[Vec<Vec<Point>>], gt: &TrajectorySet, cfg: &LossConfig) -> Result<f64> {
    sequence_loss(pred, gt, LossKind::Teacher, cfg)
}

/// L1 loss against simulator labels with uniform time weights.
pub fn sim_loss(pred: &[Vec<Vec<Point>>], gt: &TrajectorySet, cfg: &LossConfig) -> Result<f64> {
    sequence_loss(pred, gt, LossKind::Simulation, cfg)
}

/// Simulation loss against constant trajectories, times `zero_flow_weight`.
pub fn zero_flow_loss(pred: &[Vec<Vec<Point>>], initial: &PointSet, cfg: &LossConfig) -> Result<f64> {
    let gt = TrajectorySet::constant(initial, pred.len(), crate::TrajectorySource::Simulation);
    sequence_loss(pred, &gt, LossKind::ZeroFlow, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::TrajectorySource;
    use proptest::prelude::*;

    fn p(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    fn gt_one(points: &[Point]) -> TrajectorySet {
        TrajectorySet::from_frames(&points.iter().map(|&q| vec![q]).collect::<Vec<_>>(), TrajectorySource::Teacher).unwrap()
    }

    #[test]
    fn iteration_weight_values() {
        let w = iteration_weights(2, 0.8);
        assert!((w[0] - 0.64).abs() < 1e-15);
        assert_eq!(w[1], 0.8);
        assert_eq!(w[2], 1.0);
        assert_eq!(iteration_weights(5, 1.0), vec![1.0; 6]);
        for k in 0..=16 {
            let w = iteration_weights(k, 0.8);
            assert!(w.windows(2).all(|p| p[0] < p[1]));
            assert_eq!(*w.last().unwrap(), 1.0);
        }
    }

    #[test]
    fn time_weight_values() {
        let mu = time_weights(20, 0.95);
        assert!((mu[0] - 0.377_353_602_535_307_1).abs() < 1e-12);
        assert_eq!(mu[19], 1.0);
        assert_eq!(time_weights(7, 1.0), vec![1.0; 7]);
    }

    proptest! {
        #[test]
        fn last_time_weight_is_one(t in 1usize..200, g in 0.01f64..1.0) {
            prop_assert_eq!(*time_weights(t, g).last().unwrap(), 1.0);
        }
    }

    #[test]
    fn config_validation() {
        LossConfig::default().validate().unwrap();
        assert!(LossConfig { gamma_iter: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { gamma_time: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossConfig { huber_delta: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn teacher_loss_hand_value() {
        // T=1, K=0, residual (3,4), δ large: ½·9 + ½·16.
        let cfg = LossConfig { huber_delta: 100.0, ..Default::default() };
        let gt = gt_one(&[p(10.0, 10.0)]);
        let l = teacher_loss(&[vec![vec![p(13.0, 14.0)]]], &gt, &cfg).unwrap();
        assert!((l - 12.5).abs() < 1e-6);
        // Linear branch past δ = 2: 2·(3 − 1) + 2·(4 − 1).
        let cfg = LossConfig { huber_delta: 2.0, ..Default::default() };
        let l = teacher_loss(&[vec![vec![p(13.0, 14.0)]]], &gt, &cfg).unwrap();
        assert!((l - 10.0).abs() < 1e-12);
    }

    #[test]
    fn teacher_loss_weights_frames_and_iterates() {
        // T=2, K=1, one point; residual 1 in x on each iterate of frame 1 only.
        let cfg = LossConfig::default();
        let gt = gt_one(&[p(5.0, 5.0), p(6.0, 5.0)]);
        let pred = vec![vec![vec![p(5.0, 5.0)]; 2], vec![vec![p(7.0, 5.0)], vec![p(5.0, 5.0)]]];
        let l = teacher_loss(&pred, &gt, &cfg).unwrap();
        assert!((l - (0.8 * 0.5 + 1.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn quadratic_homogeneity() {
        let cfg = LossConfig::default();
        let gt = gt_one(&[p(5.0, 5.0), p(8.0, 9.0)]);
        let mk = |s: f64| vec![vec![vec![p(5.0 + 0.3 * s, 5.0 - 0.2 * s)]], vec![vec![p(8.0 + 0.5 * s, 9.0 + 0.1 * s)]]];
        let a = teacher_loss(&mk(1.0), &gt, &cfg).unwrap();
        let b = teacher_loss(&mk(2.0), &gt, &cfg).unwrap();
        assert!((b - 4.0 * a).abs() < 1e-12);
        let a = sim_loss(&mk(1.0), &gt, &cfg).unwrap();
        let b = sim_loss(&mk(2.0), &gt, &cfg).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn exact_prediction_is_zero_and_invalid_excluded() {
        let cfg = LossConfig::default();
        let mut gt = gt_one(&[p(1.0, 2.0), p(3.0, 4.0)]);
        let exact = vec![vec![vec![p(1.0, 2.0)]; 3], vec![vec![p(3.0, 4.0)]; 3]];
        assert_eq!(teacher_loss(&exact, &gt, &cfg).unwrap(), 0.0);
        assert_eq!(sim_loss(&exact, &gt, &cfg).unwrap(), 0.0);
        let off = vec![vec![vec![p(1.0, 2.0)]; 3], vec![vec![p(30.0, 4.0)]; 3]];
        assert!(teacher_loss(&off, &gt, &cfg).unwrap() > 0.0);
        gt.set(0, 1, p(3.0, 4.0), false);
        assert_eq!(teacher_loss(&off, &gt, &cfg).unwrap(), 0.0);
        gt.set(0, 0, p(1.0, 2.0), false);
        assert!(matches!(teacher_loss(&off, &gt, &cfg), Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn sim_loss_hand_value() {
        // K=1, two points, frame 1 only: iterate 0 residuals |1|+|2| and |0|+|4|, iterate 1 residuals 0.5 and 0.
        let cfg = LossConfig::default();
        let gt = TrajectorySet::from_frames(
            &[vec![p(0.0, 0.0), p(10.0, 10.0)], vec![p(1.0, 1.0), p(11.0, 11.0)]],
            TrajectorySource::Simulation,
        )
        .unwrap();
        let pred = vec![
            vec![vec![p(0.0, 0.0), p(10.0, 10.0)]; 2],
            vec![vec![p(2.0, 3.0), p(11.0, 15.0)], vec![p(1.5, 1.0), p(11.0, 11.0)]],
        ];
        let want = 0.8 * (3.0 + 4.0) / 2.0 + 1.0 * (0.5 + 0.0) / 2.0;
        assert!((sim_loss(&pred, &gt, &cfg).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn zero_flow_loss_values() {
        let cfg = LossConfig { zero_flow_weight: 0.7, ..Default::default() };
        let init = PointSet::new(vec![p(4.0, 4.0), p(9.0, 1.0)]).unwrap();
        let still = vec![vec![init.as_slice().to_vec()]; 5];
        assert_eq!(zero_flow_loss(&still, &init, &cfg).unwrap(), 0.0);
        let shifted: Vec<Point> = init.iter().map(|q| q.offset(1.0, 0.0)).collect();
        let pred = vec![vec![init.as_slice().to_vec()], vec![shifted]];
        assert!((zero_flow_loss(&pred, &init, &cfg).unwrap() - 0.7).abs() < 1e-12);
        let off = LossConfig { zero_flow_weight: 0.0, ..cfg };
        assert_eq!(zero_flow_loss(&pred, &init, &off).unwrap(), 0.0);
    }

    #[test]
    fn time_reversal_changes_teacher_loss() {
        let gt = gt_one(&[p(0.0, 0.0), p(0.0, 0.0), p(0.0, 0.0)]);
        let fwd = vec![vec![vec![p(0.0, 0.0)]], vec![vec![p(1.0, 0.0)]], vec![vec![p(3.0, 0.0)]]];
        let rev: Vec<_> = fwd.iter().rev().cloned().collect();
        let cfg = LossConfig::default();
        assert!((teacher_loss(&fwd, &gt, &cfg).unwrap() - teacher_loss(&rev, &gt, &cfg).unwrap()).abs() > 1e-3);
        let flat = LossConfig { gamma_time: 1.0, ..cfg };
        assert_eq!(teacher_loss(&fwd, &gt, &flat).unwrap(), teacher_loss(&rev, &gt, &flat).unwrap());
    }

    #[test]
    fn frame_loss_gradient_matches_finite_differences() {
        let cfg = LossConfig { huber_delta: 1.0, ..Default::default() };
        let target = [p(1.0, 2.0), p(-3.0, 0.5)];
        let valid = [true, true];
        let base = [0.3, 2.8, -1.2, 0.45, 1.9, 2.2, -3.4, 0.0];
        let eval = |v: &[f64]| {
            let mut g = Graph::new(false);
            let a = g.input(crate::Tensor::from_vec(&[2, 2], v[..4].to_vec()), true);
            let b = g.input(crate::Tensor::from_vec(&[2, 2], v[4..].to_vec()), true);
            let l = frame_loss(&mut g, &[a, b], &target, &valid, LossKind::Teacher, &cfg, 0.9).unwrap();
            g.backward(l);
            let mut grad = g.grad(a).unwrap().data().to_vec();
            grad.extend_from_slice(g.grad(b).unwrap().data());
            (g.value(l).item(), grad)
        };
        let (_, an) = eval(&base);
        let h = 1e-6;
        for j in 0..8 {
            let mut up = base;
            let mut dn = base;
            up[j] += h;
            dn[j] -= h;
            let fd = (eval(&up).0 - eval(&dn).0) / (2.0 * h);
            assert!((fd - an[j]).abs() <= 1e-3 * fd.abs().max(an[j].abs()).max(1e-6), "{j}: {fd} vs {}", an[j]);
        }
    }
}
