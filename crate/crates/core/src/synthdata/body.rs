//! Procedural stick body and kinematic realization of motion scripts.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{BendDepth, Direction, MotionScript, Primitive, Side, Speed};
use crate::kinematics::{yaw_matrix, GlobalMotion, SkeletonConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyKind {
    /// 7-joint stick figure for fast experiments.
    Stick7,
    /// 23-joint layout following the Xsens joint order.
    Xsens23,
}

const THIGH: f64 = 0.45;
const SHIN: f64 = 0.45;
const LEG_EXTENSION: f64 = 0.93;
const HIP_WIDTH: f64 = 0.1;
const SWING_HEIGHT: f64 = 0.06;
const TOE_OFFSET: [f64; 2] = [0.14, -0.08];
const ARM_GAIN: f64 = 1.5;
const ARM_LIMIT: f64 = 0.5;
const SETTLE_DIST: f64 = 0.02;

/// Body geometry and joint indexing for one [`BodyKind`].
#[derive(Debug, Clone)]
pub struct Body {
    pub kind: BodyKind,
    pub parents: Vec<Option<usize>>,
    pub names: Vec<&'static str>,
    pub head: usize,
    pub feet: Vec<usize>,
    ankle_height: f64,
    hip_drop: f64,
    /// Spine chain above the pelvis as (joint, offset from the previous link in the bent torso frame).
    spine: Vec<(usize, f64)>,
}

struct LegJoints {
    hip: Option<usize>,
    knee: usize,
    ankle: usize,
    toe: Option<usize>,
}

struct ArmJoints {
    clavicle: usize,
    shoulder: usize,
    elbow: usize,
    wrist: usize,
}

impl Body {
    pub fn new(kind: BodyKind) -> Self {
        match kind {
            BodyKind::Stick7 => Self {
                kind,
                parents: vec![None, Some(0), Some(1), Some(0), Some(3), Some(0), Some(5)],
                names: vec!["pelvis", "chest", "head", "l_knee", "l_foot", "r_knee", "r_foot"],
                head: 2,
                feet: vec![4, 6],
                ankle_height: 0.0,
                hip_drop: 0.0,
                spine: vec![(1, 0.3), (2, 0.25)],
            },
            BodyKind::Xsens23 => Self {
                kind,
                parents: vec![
                    None,
                    Some(0),
                    Some(1),
                    Some(2),
                    Some(3),
                    Some(4),
                    Some(5),
                    Some(4),
                    Some(7),
                    Some(8),
                    Some(9),
                    Some(4),
                    Some(11),
                    Some(12),
                    Some(13),
                    Some(0),
                    Some(15),
                    Some(16),
                    Some(17),
                    Some(0),
                    Some(19),
                    Some(20),
                    Some(21),
                ],
                names: vec![
                    "pelvis", "l5", "l3", "t12", "t8", "neck", "head", "r_shoulder", "r_upper_arm", "r_forearm",
                    "r_hand", "l_shoulder", "l_upper_arm", "l_forearm", "l_hand", "r_upper_leg", "r_lower_leg",
                    "r_foot", "r_toe", "l_upper_leg", "l_lower_leg", "l_foot", "l_toe",
                ],
                head: 6,
                feet: vec![18, 22],
                ankle_height: -TOE_OFFSET[1],
                hip_drop: 0.05,
                spine: vec![(1, 0.1), (2, 0.1), (3, 0.1), (4, 0.1), (5, 0.15), (6, 0.12)],
            },
        }
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn skeleton(&self, fps: f32) -> SkeletonConfig {
        SkeletonConfig {
            num_joints: self.num_joints(),
            head_joint: self.head,
            foot_joints: self.feet.clone(),
            fps,
        }
    }

    fn hip_height(&self) -> f64 {
        self.ankle_height + LEG_EXTENSION * (THIGH + SHIN)
    }

    pub fn pelvis_height(&self) -> f64 {
        self.hip_height() + self.hip_drop
    }

    /// Index 0 is the left leg.
    fn leg(&self, side: usize) -> LegJoints {
        match (self.kind, side) {
            (BodyKind::Stick7, 0) => LegJoints { hip: None, knee: 3, ankle: 4, toe: None },
            (BodyKind::Stick7, _) => LegJoints { hip: None, knee: 5, ankle: 6, toe: None },
            (BodyKind::Xsens23, 0) => LegJoints { hip: Some(19), knee: 20, ankle: 21, toe: Some(22) },
            (BodyKind::Xsens23, _) => LegJoints { hip: Some(15), knee: 16, ankle: 17, toe: Some(18) },
        }
    }

    fn arm(&self, side: usize) -> Option<ArmJoints> {
        match (self.kind, side) {
            (BodyKind::Stick7, _) => None,
            (BodyKind::Xsens23, 0) => Some(ArmJoints { clavicle: 11, shoulder: 12, elbow: 13, wrist: 14 }),
            (BodyKind::Xsens23, _) => Some(ArmJoints { clavicle: 7, shoulder: 8, elbow: 9, wrist: 10 }),
        }
    }

    /// Lateral sign of a side in the heading frame; local +Z is the body's right.
    fn lateral(side: usize) -> f64 {
        if side == 0 {
            -1.0
        } else {
            1.0
        }
    }

    fn hip_position(&self, pelvis: Vector3<f64>, yaw: f64, side: usize) -> Vector3<f64> {
        let lateral = if self.kind == BodyKind::Stick7 { 0.0 } else { HIP_WIDTH * Self::lateral(side) };
        pelvis + yaw_matrix(yaw) * Vector3::new(0.0, -self.hip_drop, lateral)
    }

    /// Planted ankle position for `side` when the pelvis stands at `pelvis` facing `yaw`.
    fn home(&self, pelvis: Vector3<f64>, yaw: f64, side: usize) -> Vector3<f64> {
        let p = pelvis + yaw_matrix(yaw) * Vector3::new(0.0, 0.0, HIP_WIDTH * Self::lateral(side));
        Vector3::new(p.x, self.ankle_height, p.z)
    }
}

fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Two-bone solve with the knee pushed toward `pole`. Returns the knee
/// position and the (possibly clamped) ankle position.
fn solve_leg(hip: Vector3<f64>, target: Vector3<f64>, pole: Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let delta = target - hip;
    let reach = THIGH + SHIN - 1e-9;
    let mut d = delta.norm();
    let u = delta / d;
    let ankle = if d > reach {
        d = reach;
        hip + u * reach
    } else {
        target
    };
    let along = (THIGH * THIGH - SHIN * SHIN + d * d) / (2.0 * d);
    let perp = (THIGH * THIGH - along * along).max(0.0).sqrt();
    let w = pole - u * u.dot(&pole);
    let w = w.normalize();
    (hip + u * along + w * perp, ankle)
}

/// Per-frame body drivers derived from the script.
struct Drivers {
    pelvis: Vec<Vector3<f64>>,
    yaw: Vec<f64>,
    bend: Vec<f64>,
    stepping: Vec<bool>,
    /// `(side, start, duration)` kick windows.
    kicks: Vec<(usize, usize, usize)>,
}

fn drivers(script: &MotionScript, body: &Body, fps: f64) -> Drivers {
    let n = script.total_frames();
    let mut pelvis = Vec::with_capacity(n);
    let mut yaw = Vec::with_capacity(n);
    let mut bend = vec![0.0; n];
    let mut stepping = vec![false; n];
    let mut kicks = Vec::new();

    let mut p = Vector3::new(0.0, body.pelvis_height(), 0.0);
    let mut h = 0.0f64;
    let mut t = 0usize;
    for seg in &script.segments {
        let d = seg.frames;
        for i in 0..d {
            match seg.primitive {
                Primitive::Walk { dir, speed } if t > 0 => {
                    let local = match dir {
                        Direction::Forward => Vector3::new(1.0, 0.0, 0.0),
                        Direction::Backward => Vector3::new(-1.0, 0.0, 0.0),
                        Direction::Left => Vector3::new(0.0, 0.0, -1.0),
                        Direction::Right => Vector3::new(0.0, 0.0, 1.0),
                    };
                    p += yaw_matrix(h) * local * (speed.meters_per_second() / fps);
                }
                Primitive::Turn { degrees } => {
                    let total = (degrees as f64).to_radians();
                    // The first frame of the sequence is the rest heading.
                    let (k, steps) = if t == i { (i, d - 1) } else { (i + 1, d) };
                    h = seg_yaw_start(&yaw, t, i) + total * k as f64 / steps as f64;
                }
                Primitive::Bend { depth } => {
                    let u = (i as f64 + 0.5) / d as f64;
                    bend[t] = depth.radians() * (std::f64::consts::PI * u).sin().powi(2);
                }
                _ => {}
            }
            if matches!(seg.primitive, Primitive::Walk { .. } | Primitive::Turn { .. }) {
                stepping[t] = true;
            }
            pelvis.push(p);
            yaw.push(h);
            t += 1;
        }
        if let Primitive::Kick { side } = seg.primitive {
            kicks.push((side.index(), t - d, d));
        }
    }
    Drivers { pelvis, yaw, bend, stepping, kicks }
}

/// Heading at the start of the segment that contains frame `t` at offset `i`.
fn seg_yaw_start(yaw: &[f64], t: usize, i: usize) -> f64 {
    let start = t - i;
    if start == 0 {
        0.0
    } else {
        yaw[start - 1]
    }
}

#[derive(Clone, Copy)]
enum FootMotion {
    Planted,
    Swing { from: Vector3<f64>, to: Vector3<f64>, from_yaw: f64, to_yaw: f64, start: usize, len: usize },
    Kick { plant: Vector3<f64>, yaw: f64, start: usize, len: usize },
}

#[derive(Clone, Copy)]
struct Foot {
    plant: Vector3<f64>,
    yaw: f64,
    motion: FootMotion,
}

fn step_frames(script: &MotionScript, t: usize) -> usize {
    let prim = script.primitive_at(t);
    match prim {
        Primitive::Walk { speed, .. } => ((30.0 * 0.24 / speed.meters_per_second()).floor() as usize).clamp(6, 14),
        _ => 10,
    }
}

pub(super) fn realize(script: &MotionScript, body: &Body, fps: f32) -> GlobalMotion {
    let n = script.total_frames();
    let nj = body.num_joints();
    let dr = drivers(script, body, fps as f64);
    let mut feet: [Foot; 2] = std::array::from_fn(|side| Foot {
        plant: body.home(dr.pelvis[0], dr.yaw[0], side),
        yaw: dr.yaw[0],
        motion: FootMotion::Planted,
    });
    let mut next_side = 1usize;
    let mut kicked = vec![false; dr.kicks.len()];
    let mut positions = vec![0.0; n * nj * 3];

    for t in 0..n {
        // Finish swings that ended on the previous frame.
        for foot in feet.iter_mut() {
            match foot.motion {
                FootMotion::Swing { to, to_yaw, start, len, .. } if t >= start + len => {
                    foot.plant = to;
                    foot.yaw = to_yaw;
                    foot.motion = FootMotion::Planted;
                }
                FootMotion::Kick { start, len, .. } if t >= start + len => {
                    foot.motion = FootMotion::Planted;
                }
                _ => {}
            }
        }
        let idle = feet.iter().all(|f| matches!(f.motion, FootMotion::Planted));
        if idle {
            if let Some(k) = dr.kicks.iter().position(|&(_, s, l)| t >= s && t < s + l) {
                let (side, start, len) = dr.kicks[k];
                let remaining = start + len - t;
                if remaining >= 15 && !kicked[k] {
                    kicked[k] = true;
                    let kick_len = remaining.min(30);
                    let f = &mut feet[side];
                    f.motion = FootMotion::Kick { plant: f.plant, yaw: f.yaw, start: t, len: kick_len };
                }
            } else {
                let ts = step_frames(script, t);
                let lookahead = (t + ts + ts / 2).min(n - 1);
                let need = |side: usize| -> f64 {
                    (feet[side].plant - body.home(dr.pelvis[lookahead], dr.yaw[lookahead], side)).norm()
                };
                let moving = dr.stepping[t];
                let side = if moving {
                    Some(next_side)
                } else {
                    let (a, b) = (need(0), need(1));
                    if a.max(b) > SETTLE_DIST {
                        Some(if a >= b { 0 } else { 1 })
                    } else {
                        None
                    }
                };
                if let Some(side) = side {
                    let target_t = if moving { lookahead } else { (t + ts).min(n - 1) };
                    let to = body.home(dr.pelvis[target_t], dr.yaw[target_t], side);
                    let f = &mut feet[side];
                    f.motion = FootMotion::Swing {
                        from: f.plant,
                        to,
                        from_yaw: f.yaw,
                        to_yaw: dr.yaw[target_t],
                        start: t,
                        len: ts,
                    };
                    next_side = 1 - side;
                }
            }
        }

        let pelvis = dr.pelvis[t];
        let yaw = dr.yaw[t];
        let heading_rot = yaw_matrix(yaw);
        let torso = heading_rot * rot_z(-dr.bend[t]);
        let forward = heading_rot * Vector3::new(1.0, 0.0, 0.0);
        let frame = &mut positions[t * nj * 3..(t + 1) * nj * 3];
        let mut set = |j: usize, p: Vector3<f64>| frame[j * 3..j * 3 + 3].copy_from_slice(p.as_slice());

        set(0, pelvis);
        let mut top = pelvis;
        let mut spine_pos = vec![pelvis; nj];
        for &(j, len) in &body.spine {
            top += torso * Vector3::new(0.0, len, 0.0);
            spine_pos[j] = top;
            set(j, top);
        }

        let mut ankle_fwd = [0.0; 2];
        for side in 0..2 {
            let foot = feet[side];
            let (target, foot_yaw) = match foot.motion {
                FootMotion::Planted => (foot.plant, foot.yaw),
                FootMotion::Swing { from, to, from_yaw, to_yaw, start, len } => {
                    let u = ((t - start) as f64 + 1.0) / len as f64;
                    let s = u * u * (3.0 - 2.0 * u);
                    let mut p = from + (to - from) * s;
                    p.y = body.ankle_height + SWING_HEIGHT * (std::f64::consts::PI * u).sin();
                    (p, from_yaw + (to_yaw - from_yaw) * s)
                }
                FootMotion::Kick { plant, yaw, start, len } => {
                    let u = ((t - start) as f64 + 1.0) / len as f64;
                    let bump = (std::f64::consts::PI * u).sin();
                    let dir = yaw_matrix(yaw) * Vector3::new(1.0, 0.0, 0.0);
                    (plant + dir * (0.45 * bump) + Vector3::new(0.0, 0.25 * bump, 0.0), yaw)
                }
            };
            let legs = body.leg(side);
            let hip = body.hip_position(pelvis, yaw, side);
            if let Some(h) = legs.hip {
                set(h, hip);
            }
            let (knee, ankle) = solve_leg(hip, target, forward);
            set(legs.knee, knee);
            set(legs.ankle, ankle);
            if let Some(toe) = legs.toe {
                set(toe, ankle + yaw_matrix(foot_yaw) * Vector3::new(TOE_OFFSET[0], TOE_OFFSET[1], 0.0));
            }
            ankle_fwd[side] = (ankle - pelvis).dot(&forward);
        }

        for side in 0..2 {
            let Some(arm) = body.arm(side) else { continue };
            let lat = Body::lateral(side);
            let anchor = spine_pos[4];
            let clavicle = anchor + torso * Vector3::new(0.0, 0.12, 0.04 * lat);
            let shoulder = clavicle + torso * Vector3::new(0.0, 0.0, 0.14 * lat);
            // Arms counter-swing against the opposite leg.
            let swing = (ARM_GAIN * ankle_fwd[1 - side]).clamp(-ARM_LIMIT, ARM_LIMIT);
            let elbow = shoulder + torso * rot_z(swing) * Vector3::new(0.0, -0.28, 0.0);
            let wrist = elbow + torso * rot_z(1.2 * swing + 0.1) * Vector3::new(0.0, -0.25, 0.0);
            set(arm.clavicle, clavicle);
            set(arm.shoulder, shoulder);
            set(arm.elbow, elbow);
            set(arm.wrist, wrist);
        }
    }

    GlobalMotion { num_joints: nj, fps, positions, heading: dr.yaw }
}

impl Speed {
    pub fn meters_per_second(self) -> f64 {
        match self {
            Speed::Slow => 0.6,
            Speed::Normal => 1.0,
            Speed::Fast => 1.3,
        }
    }
}

impl BendDepth {
    pub fn radians(self) -> f64 {
        match self {
            BendDepth::Shallow => 30f64.to_radians(),
            BendDepth::Deep => 60f64.to_radians(),
        }
    }
}

impl Side {
    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }
}
