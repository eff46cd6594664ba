//! Reference-frame transforms and kinematic features of tracked poses.
//!
//! The agent frame has +x along the heading and +y to the left.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// Expresses a global point in this pose's frame.
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Inverse of [`Pose::to_local`].
    pub fn to_global(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// This pose seen from `origin`'s frame.
    pub fn relative_to(&self, origin: &Pose) -> Pose {
        let [x, y] = origin.to_local(self.position());
        Pose::new(x, y, self.yaw - origin.yaw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Global,
    Agent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub points: Vec<[f64; 2]>,
    pub frame: Frame,
    /// Seconds between consecutive points.
    pub period: f64,
}

impl Trajectory {
    pub fn new(points: Vec<[f64; 2]>, frame: Frame, period: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract("trajectory needs at least one point"));
        }
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::contract(format!("trajectory period {period} must be positive")));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory coordinates".into()));
        }
        Ok(Self { points, frame, period })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn to_agent_frame(traj: &Trajectory, origin: &Pose) -> Trajectory {
    Trajectory {
        points: traj.points.iter().map(|&p| origin.to_local(p)).collect(),
        frame: Frame::Agent,
        period: traj.period,
    }
}

pub fn from_agent_frame(traj: &Trajectory, origin: &Pose) -> Trajectory {
    Trajectory {
        points: traj.points.iter().map(|&p| origin.to_global(p)).collect(),
        frame: Frame::Global,
        period: traj.period,
    }
}

/// Speed, longitudinal acceleration and heading rate at one timestep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MotionState {
    pub v: f64,
    pub a: f64,
    pub yaw_rate: f64,
}

impl MotionState {
    pub fn to_array(self) -> [f64; 3] {
        [self.v, self.a, self.yaw_rate]
    }
}

/// Backward-difference kinematics. The first entries, which lack enough
/// predecessors, repeat the earliest computable value.
pub fn motion_features(poses: &[Pose], period: f64) -> Result<Vec<MotionState>> {
    if poses.len() < 3 {
        return Err(Error::InsufficientHistory {
            needed: 3,
            got: poses.len(),
        });
    }
    if !(period > 0.0) {
        return Err(Error::contract(format!("period {period} must be positive")));
    }
    let n = poses.len();
    let mut v = vec![0.0; n];
    let mut w = vec![0.0; n];
    for t in 1..n {
        let (p, q) = (&poses[t - 1], &poses[t]);
        v[t] = (q.x - p.x).hypot(q.y - p.y) / period;
        w[t] = wrap_angle(q.yaw - p.yaw) / period;
    }
    v[0] = v[1];
    w[0] = w[1];
    let mut a = vec![0.0; n];
    for t in 2..n {
        a[t] = (v[t] - v[t - 1]) / period;
    }
    a[0] = a[2];
    a[1] = a[2];
    Ok((0..n)
        .map(|t| MotionState {
            v: v[t],
            a: a[t],
            yaw_rate: w[t],
        })
        .collect())
}

/// Per-feature z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Features whose variance was zero; their divisor was replaced by 1.
    pub degenerate: [bool; 3],
}

impl FeatureStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
            degenerate: [false; 3],
        }
    }

    /// Population mean and standard deviation over all states.
    pub fn fit<'a>(states: impl IntoIterator<Item = &'a MotionState>) -> Result<Self> {
        let rows: Vec<[f64; 3]> = states.into_iter().map(|s| s.to_array()).collect();
        if rows.is_empty() {
            return Err(Error::contract("cannot fit statistics on no states"));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; 3];
        for r in &rows {
            for f in 0..3 {
                mean[f] += r[f] / n;
            }
        }
        let mut std = [0.0; 3];
        for r in &rows {
            for f in 0..3 {
                std[f] += (r[f] - mean[f]).powi(2) / n;
            }
        }
        let mut degenerate = [false; 3];
        for f in 0..3 {
            std[f] = std[f].sqrt();
            if !(std[f] > 1e-12) {
                log::warn!("motion feature {f} has zero variance; using unit divisor");
                std[f] = 1.0;
                degenerate[f] = true;
            }
        }
        Ok(Self { mean, std, degenerate })
    }
}

/// `[T, 3]` z-scored features.
pub fn standardize(states: &[MotionState], stats: &FeatureStats) -> Result<Tensor<f64>> {
    let data = states
        .iter()
        .flat_map(|s| {
            let r = s.to_array();
            (0..3).map(move |f| (r[f] - stats.mean[f]) / stats.std[f])
        })
        .collect();
    Tensor::new(&[states.len(), 3], data)
}

pub fn destandardize(z: &Tensor<f64>, stats: &FeatureStats) -> Vec<MotionState> {
    z.data()
        .chunks_exact(3)
        .map(|r| MotionState {
            v: r[0] * stats.std[0] + stats.mean[0],
            a: r[1] * stats.std[1] + stats.mean[1],
            yaw_rate: r[2] * stats.std[2] + stats.mean[2],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: [f64; 2], b: [f64; 2], tol: f64) -> bool {
        (a[0] - b[0]).abs() < tol && (a[1] - b[1]).abs() < tol
    }

    #[test]
    fn wraps_into_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(0.1 - 4.0 * PI) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn frame_hand_cases() {
        let id = Pose::new(0.0, 0.0, 0.0);
        assert_eq!(id.to_local([3.5, -2.0]), [3.5, -2.0]);
        let o = Pose::new(1.0, 1.0, PI / 2.0);
        assert!(close(o.to_local([1.0, 2.0]), [1.0, 0.0], 1e-12));
    }

    #[test]
    fn constant_velocity_line() {
        let poses: Vec<Pose> = (0..8).map(|i| Pose::new(2.5 * i as f64, 0.0, 0.0)).collect();
        for s in motion_features(&poses, 0.5).unwrap() {
            assert!((s.v - 5.0).abs() < 1e-12 && s.a.abs() < 1e-12 && s.yaw_rate == 0.0);
        }
    }

    #[test]
    fn circular_motion() {
        let (r, speed, dt) = (10.0, 5.0, 0.5);
        let omega = speed / r;
        let poses: Vec<Pose> = (0..10)
            .map(|i| {
                let th = omega * dt * i as f64;
                Pose::new(r * th.sin(), r - r * th.cos(), th)
            })
            .collect();
        for s in motion_features(&poses, dt).unwrap() {
            assert!((s.yaw_rate - 0.5).abs() < 1e-12);
            assert!(s.a.abs() < 1e-9);
            // Chord length over the arc: 2R sin(ωT/2) / T.
            assert!((s.v - 2.0 * r * (omega * dt / 2.0).sin() / dt).abs() < 1e-9);
        }
    }

    #[test]
    fn spline_features_track_symbolic_derivatives() {
        // x(t) = 3t + 0.2t², y(t) = 0.05t³; derivatives by hand.
        let dt = 0.05;
        let pos = |t: f64| [3.0 * t + 0.2 * t * t, 0.05 * t.powi(3)];
        let vel = |t: f64| [3.0 + 0.4 * t, 0.15 * t * t];
        let acc = |t: f64| [0.4, 0.3 * t];
        let poses: Vec<Pose> = (0..80)
            .map(|i| {
                let t = i as f64 * dt;
                let [vx, vy] = vel(t);
                let [x, y] = pos(t);
                Pose::new(x, y, vy.atan2(vx))
            })
            .collect();
        let feats = motion_features(&poses, dt).unwrap();
        for (i, s) in feats.iter().enumerate().skip(3) {
            // Backward differences approximate the derivative half a step back.
            let t = i as f64 * dt - dt / 2.0;
            let [vx, vy] = vel(t);
            let [ax, ay] = acc(t);
            let speed = vx.hypot(vy);
            let along = (vx * ax + vy * ay) / speed;
            let turn = (vx * ay - vy * ax) / (speed * speed);
            assert!((s.v - speed).abs() < 0.05 * speed);
            assert!((s.yaw_rate - turn).abs() < 0.05 * turn.abs().max(0.02));
            let t_acc = t - dt / 2.0;
            let [vx, vy] = vel(t_acc);
            let [ax, ay] = acc(t_acc);
            let along_acc = (vx * ax + vy * ay) / vx.hypot(vy);
            assert!((s.a - along_acc).abs() < 0.05 * along.abs().max(along_acc.abs()));
        }
    }

    #[test]
    fn too_few_poses() {
        let p = [Pose::new(0.0, 0.0, 0.0); 2];
        assert!(matches!(
            motion_features(&p, 0.5),
            Err(Error::InsufficientHistory { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn standardize_cases() {
        let states = vec![
            MotionState { v: 1.0, a: 2.0, yaw_rate: 0.0 },
            MotionState { v: 3.0, a: -2.0, yaw_rate: 0.0 },
            MotionState { v: 8.0, a: 0.5, yaw_rate: 0.0 },
        ];
        let stats = FeatureStats::fit(&states).unwrap();
        assert_eq!(stats.degenerate, [false, false, true]);
        let z = standardize(&states, &stats).unwrap();
        for f in 0..3 {
            let col: Vec<f64> = (0..3).map(|r| z.data()[r * 3 + f]).collect();
            let m = col.iter().sum::<f64>() / 3.0;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 3.0;
            assert!(m.abs() < 1e-12);
            if f < 2 {
                assert!((var.sqrt() - 1.0).abs() < 1e-12);
            }
        }
        let id = standardize(&states, &FeatureStats::identity()).unwrap();
        assert_eq!(id.data()[0..3], [1.0, 2.0, 0.0]);
        let at_mean = MotionState {
            v: stats.mean[0],
            a: stats.mean[1],
            yaw_rate: 0.0,
        };
        assert!(standardize(&[at_mean], &stats).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    fn pose_strategy() -> impl Strategy<Value = Pose> {
        (-500.0..500.0f64, -500.0..500.0f64, -PI..PI).prop_map(|(x, y, t)| Pose::new(x, y, t))
    }

    proptest! {
        #[test]
        fn frame_round_trip(o in pose_strategy(), px in -300.0..300.0f64, py in -300.0..300.0f64) {
            let t = Trajectory::new(vec![[px, py]], Frame::Global, 0.5).unwrap();
            let back = from_agent_frame(&to_agent_frame(&t, &o), &o);
            prop_assert!(close(back.points[0], [px, py], 1e-9));
        }

        #[test]
        fn frame_is_isometry(o in pose_strategy(), a in (-300.0..300.0f64, -300.0..300.0f64), b in (-300.0..300.0f64, -300.0..300.0f64)) {
            let la = o.to_local([a.0, a.1]);
            let lb = o.to_local([b.0, b.1]);
            let d0 = (a.0 - b.0).hypot(a.1 - b.1);
            let d1 = (la[0] - lb[0]).hypot(la[1] - lb[1]);
            prop_assert!((d0 - d1).abs() < 1e-9);
        }

        #[test]
        fn features_rigid_invariant(
            steps in proptest::collection::vec((0.0..3.0f64, -0.3..0.3f64), 3..12),
            rigid in pose_strategy(),
        ) {
            let mut poses = vec![Pose::new(0.0, 0.0, 0.0)];
            for (d, turn) in steps {
                let p = *poses.last().unwrap();
                let yaw = p.yaw + turn;
                poses.push(Pose::new(p.x + d * yaw.cos(), p.y + d * yaw.sin(), yaw));
            }
            let moved: Vec<Pose> = poses
                .iter()
                .map(|p| {
                    let [x, y] = rigid.to_global(p.position());
                    Pose::new(x, y, p.yaw + rigid.yaw)
                })
                .collect();
            let f0 = motion_features(&poses, 0.5).unwrap();
            let f1 = motion_features(&moved, 0.5).unwrap();
            for (s0, s1) in f0.iter().zip(&f1) {
                prop_assert!((s0.v - s1.v).abs() < 1e-9);
                prop_assert!((s0.a - s1.a).abs() < 1e-9);
                prop_assert!((s0.yaw_rate - s1.yaw_rate).abs() < 1e-9);
            }
        }

        #[test]
        fn standardize_inverts(rows in proptest::collection::vec((0.0..30.0f64, -4.0..4.0f64, -0.7..0.7f64), 2..20)) {
            let states: Vec<MotionState> = rows.iter().map(|&(v, a, w)| MotionState { v, a, yaw_rate: w }).collect();
            let stats = FeatureStats::fit(&states).unwrap();
            let back = destandardize(&standardize(&states, &stats).unwrap(), &stats);
            for (s, b) in states.iter().zip(&back) {
                prop_assert!((s.v - b.v).abs() < 1e-6 && (s.a - b.a).abs() < 1e-6 && (s.yaw_rate - b.yaw_rate).abs() < 1e-6);
            }
        }
    }
}
