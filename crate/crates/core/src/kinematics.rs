//! Head-centric motion representation.
//!
//! Each frame of a [`HeadCentricSequence`] is laid out as
//!
//! ```text
//! [ v_xz (2) | r_delta (6) | p_local (3J) ]
//! ```
//!
//! * `v_xz`: planar displacement of the head since the previous frame, expressed
//!   in the previous frame's heading frame (local +X is forward, local +Z is lateral).
//! * `r_delta`: yaw change since the previous frame as the first two columns of
//!   the rotation matrix.
//! * `p_local`: joint positions relative to the head's ground projection,
//!   rotated into the current heading frame. Heights are kept absolute.
//!
//! Frame 0 carries zero displacement and the identity rotation so that the
//! representation has as many frames as the source motion.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the per-frame prefix before the joint block.
pub const ROOT_CHANNELS: usize = 8;

/// Feature width for a skeleton with `num_joints` joints.
pub fn feature_width(num_joints: usize) -> usize {
    3 * num_joints + ROOT_CHANNELS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonConfig {
    pub num_joints: usize,
    pub head_joint: usize,
    pub foot_joints: Vec<usize>,
    pub fps: f32,
}

impl SkeletonConfig {
    pub fn new(num_joints: usize, head_joint: usize, foot_joints: Vec<usize>, fps: f32) -> Result<Self> {
        let cfg = Self { num_joints, head_joint, foot_joints, fps };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_joints < 2 {
            return Err(Error::Config(format!("need at least 2 joints, got {}", self.num_joints)));
        }
        if self.head_joint >= self.num_joints {
            return Err(Error::Config(format!("head joint {} out of range", self.head_joint)));
        }
        if let Some(&f) = self.foot_joints.iter().find(|&&f| f >= self.num_joints) {
            return Err(Error::Config(format!("foot joint {f} out of range")));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {}", self.fps)));
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        feature_width(self.num_joints)
    }
}

/// World-space joint trajectories, Y up, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalMotion {
    pub num_joints: usize,
    pub fps: f32,
    /// Row-major `N x J x 3`.
    pub positions: Vec<f64>,
    /// Head yaw per frame, radians about +Y. Yaw 0 faces world +X.
    pub heading: Vec<f64>,
}

impl GlobalMotion {
    pub fn new(num_joints: usize, fps: f32, positions: Vec<f64>, heading: Vec<f64>) -> Result<Self> {
        let m = Self { num_joints, fps, positions, heading };
        m.validate_shape()?;
        Ok(m)
    }

    pub fn num_frames(&self) -> usize {
        self.heading.len()
    }

    pub fn joint(&self, t: usize, j: usize) -> Vector3<f64> {
        let o = (t * self.num_joints + j) * 3;
        Vector3::new(self.positions[o], self.positions[o + 1], self.positions[o + 2])
    }

    pub fn set_joint(&mut self, t: usize, j: usize, p: Vector3<f64>) {
        let o = (t * self.num_joints + j) * 3;
        self.positions[o..o + 3].copy_from_slice(p.as_slice());
    }

    fn validate_shape(&self) -> Result<()> {
        let n = self.heading.len();
        if self.positions.len() != n * self.num_joints * 3 {
            return Err(Error::Shape(format!(
                "positions has {} values, expected {} x {} x 3",
                self.positions.len(),
                n,
                self.num_joints
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if self.num_frames() < 2 {
            return Err(Error::TooShort { need: 2, got: self.num_frames() });
        }
        if !self.positions.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("positions"));
        }
        if !self.heading.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("heading"));
        }
        Ok(())
    }

    /// Applies a yaw rotation about the world origin followed by a planar translation.
    pub fn rigid_transform(&self, yaw: f64, dx: f64, dz: f64) -> GlobalMotion {
        let r = yaw_matrix(yaw);
        let offset = Vector3::new(dx, 0.0, dz);
        let mut out = self.clone();
        for t in 0..self.num_frames() {
            for j in 0..self.num_joints {
                out.set_joint(t, j, r * self.joint(t, j) + offset);
            }
        }
        for h in out.heading.iter_mut() {
            *h += yaw;
        }
        out
    }
}

/// `N x (3J+8)` feature frames.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCentricSequence {
    pub num_joints: usize,
    pub data: Vec<f32>,
}

impl HeadCentricSequence {
    pub fn new(num_joints: usize, data: Vec<f32>) -> Result<Self> {
        let width = feature_width(num_joints);
        if data.len() % width != 0 {
            return Err(Error::Shape(format!(
                "{} values is not a whole number of {width}-wide frames",
                data.len()
            )));
        }
        Ok(Self { num_joints, data })
    }

    pub fn width(&self) -> usize {
        feature_width(self.num_joints)
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / self.width()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let w = self.width();
        &self.data[t * w..(t + 1) * w]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let w = self.width();
        &mut self.data[t * w..(t + 1) * w]
    }
}

/// Rotation by `yaw` radians about +Y.
pub fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Yaw angle of a rotation, read from its first column.
pub fn yaw_of(r: &Matrix3<f64>) -> f64 {
    (-r[(2, 0)]).atan2(r[(0, 0)])
}

/// First two columns of the yaw rotation, column after column.
pub fn rot_to_6d(yaw: f64) -> [f64; 6] {
    let r = yaw_matrix(yaw);
    [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

const DEGENERATE_NORM: f64 = 1e-8;

/// Rotation matrix from a 6D vector via Gram-Schmidt.
pub fn rot6d_to_matrix(v: &[f64; 6]) -> Result<Matrix3<f64>> {
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("6D rotation"));
    }
    let a1 = Vector3::new(v[0], v[1], v[2]);
    let a2 = Vector3::new(v[3], v[4], v[5]);
    let n1 = a1.norm();
    if n1 < DEGENERATE_NORM {
        return Err(Error::DegenerateRotation(format!("first column norm {n1:e}")));
    }
    let b1 = a1 / n1;
    let p2 = a2 - b1 * b1.dot(&a2);
    let n2 = p2.norm();
    if n2 < DEGENERATE_NORM {
        return Err(Error::DegenerateRotation(format!("second column norm {n2:e} after projection")));
    }
    let b2 = p2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

fn check_skeleton(skel: &SkeletonConfig, num_joints: usize) -> Result<()> {
    skel.validate()?;
    if skel.num_joints != num_joints {
        return Err(Error::Shape(format!(
            "skeleton has {} joints, data has {num_joints}",
            skel.num_joints
        )));
    }
    Ok(())
}

pub fn to_headcentric(motion: &GlobalMotion, skel: &SkeletonConfig) -> Result<HeadCentricSequence> {
    motion.validate()?;
    check_skeleton(skel, motion.num_joints)?;
    let n = motion.num_frames();
    let nj = motion.num_joints;
    let width = feature_width(nj);
    let mut data = vec![0f32; n * width];
    let identity = rot_to_6d(0.0);

    for t in 0..n {
        let frame = &mut data[t * width..(t + 1) * width];
        let head = motion.joint(t, skel.head_joint);
        if t == 0 {
            frame[2..8].iter_mut().zip(identity).for_each(|(d, s)| *d = s as f32);
        } else {
            let prev_head = motion.joint(t - 1, skel.head_joint);
            let local = yaw_matrix(-motion.heading[t - 1]) * (head - prev_head);
            frame[0] = local.x as f32;
            frame[1] = local.z as f32;
            let r = rot_to_6d(motion.heading[t] - motion.heading[t - 1]);
            frame[2..8].iter_mut().zip(r).for_each(|(d, s)| *d = s as f32);
        }
        let origin = Vector3::new(head.x, 0.0, head.z);
        let to_local = yaw_matrix(-motion.heading[t]);
        for j in 0..nj {
            let p = to_local * (motion.joint(t, j) - origin);
            let o = ROOT_CHANNELS + 3 * j;
            frame[o] = p.x as f32;
            frame[o + 1] = p.y as f32;
            frame[o + 2] = p.z as f32;
        }
    }
    HeadCentricSequence::new(nj, data)
}

/// Integrates head-centric features back to world space.
///
/// Only the planar part of `init_head_position` is used: head height is carried
/// by the joint block itself.
pub fn from_headcentric(
    seq: &HeadCentricSequence,
    init_head_position: [f64; 3],
    init_heading: f64,
    skel: &SkeletonConfig,
) -> Result<GlobalMotion> {
    check_skeleton(skel, seq.num_joints)?;
    if seq.data.len() % skel.feature_width() != 0 {
        return Err(Error::Shape(format!("data is not a multiple of width {}", skel.feature_width())));
    }
    let n = seq.num_frames();
    let nj = seq.num_joints;
    let mut positions = vec![0f64; n * nj * 3];
    let mut heading = vec![0f64; n];
    let mut head_x = init_head_position[0];
    let mut head_z = init_head_position[2];
    let mut yaw = init_heading;

    for t in 0..n {
        let f = seq.frame(t);
        if t > 0 {
            let step = yaw_matrix(yaw) * Vector3::new(f[0] as f64, 0.0, f[1] as f64);
            head_x += step.x;
            head_z += step.z;
            let r6: [f64; 6] = std::array::from_fn(|i| f[2 + i] as f64);
            yaw += yaw_of(&rot6d_to_matrix(&r6)?);
        }
        heading[t] = yaw;
        let to_world = yaw_matrix(yaw);
        let origin = Vector3::new(head_x, 0.0, head_z);
        for j in 0..nj {
            let o = ROOT_CHANNELS + 3 * j;
            let local = Vector3::new(f[o] as f64, f[o + 1] as f64, f[o + 2] as f64);
            let p = to_world * local + origin;
            let d = (t * nj + j) * 3;
            positions[d..d + 3].copy_from_slice(p.as_slice());
        }
    }
    GlobalMotion::new(nj, skel.fps, positions, heading)
}
