//! Motion quality metrics: distribution distance, retrieval, foot-ground
//! plausibility and temporal smoothness.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{GlobalMotion, SkeletonConfig};

/// Diagonal loading applied to both covariances before the Fréchet distance.
pub const COV_EPS: f64 = 1e-6;
/// Most negative eigenvalue still treated as zero.
pub const PSD_TOL: f64 = -1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, n: usize) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Shape(format!("mean has {d} dims, cov is {}x{}", cov.nrows(), cov.ncols())));
        }
        if n < 2 {
            return Err(Error::Config(format!("need at least 2 samples, got {n}")));
        }
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > 1e-9 {
            return Err(Error::Config(format!("covariance asymmetric by {asym:e}")));
        }
        Ok(Self { mean, cov, n })
    }

    /// Sample mean and unbiased covariance of the rows.
    pub fn from_samples(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Config(format!("need at least 2 samples, got {n}")));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let cov = (&cov + cov.transpose()) * 0.5;
        Self::new(mean, cov, n)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.min();
    if min < PSD_TOL {
        return Err(Error::NotPsd(min));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
///
/// The trace of the product root is evaluated as `Tr((A^{1/2} B A^{1/2})^{1/2})`,
/// which only needs symmetric eigendecompositions.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("dims {} vs {}", a.dim(), b.dim())));
    }
    let d = a.dim();
    let eye = DMatrix::<f64>::identity(d, d) * COV_EPS;
    let sa = &a.cov + &eye;
    let sb = &b.cov + &eye;
    let ra = psd_sqrt(&sa)?;
    psd_sqrt(&sb)?;
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let min = eig.eigenvalues.min();
    if min < PSD_TOL {
        return Err(Error::NotPsd(min));
    }
    let tr_root: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let mean_term = (&a.mean - &b.mean).norm_squared();
    Ok(mean_term + sa.trace() + sb.trace() - 2.0 * tr_root)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Fraction of motions whose own condition ranks within the `k` nearest
/// conditions of its batch. Batches are drawn from a seeded shuffle; a trailing
/// partial batch is dropped.
pub fn r_precision(
    motion: &[Vec<f64>],
    cond: &[Vec<f64>],
    batch: usize,
    k: usize,
    seed: u64,
) -> Result<f64> {
    if motion.len() != cond.len() {
        return Err(Error::Shape(format!("{} motions vs {} conditions", motion.len(), cond.len())));
    }
    if batch == 0 || motion.len() < batch {
        return Err(Error::Config(format!("need at least {batch} pairs, got {}", motion.len())));
    }
    let mut order: Vec<usize> = (0..motion.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut hits = 0usize;
    let mut total = 0usize;
    for chunk in order.chunks_exact(batch) {
        for &i in chunk {
            let own = euclid(&motion[i], &cond[i]);
            let closer = chunk
                .iter()
                .filter(|&&j| j != i && euclid(&motion[i], &cond[j]) < own)
                .count();
            if closer < k {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

pub fn mm_dist(motion: &[Vec<f64>], cond: &[Vec<f64>]) -> Result<f64> {
    if motion.len() != cond.len() || motion.is_empty() {
        return Err(Error::Shape(format!("{} motions vs {} conditions", motion.len(), cond.len())));
    }
    Ok(motion.iter().zip(cond).map(|(m, c)| euclid(m, c)).sum::<f64>() / motion.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactThresholds {
    /// Maximum foot height for contact, meters.
    pub height: f64,
    /// Maximum vertical foot speed for contact, meters per frame.
    pub vertical_speed: f64,
}

impl Default for ContactThresholds {
    fn default() -> Self {
        Self { height: 0.05, vertical_speed: 0.005 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FootSliding {
    /// Mean planar foot displacement per consecutive contact-frame pair, m/frame.
    pub value: f64,
    /// Set when no consecutive contact frames were found (value is then 0).
    pub no_contact: bool,
}

/// Foot sliding over consecutive contact frames.
///
/// A foot is in contact at frame `t >= 1` when it is below `height` and its
/// vertical speed since `t-1` is below `vertical_speed`. Each pair of
/// consecutive contact frames contributes the planar displacement between them.
pub fn foot_sliding(m: &GlobalMotion, skel: &SkeletonConfig, th: ContactThresholds) -> Result<FootSliding> {
    if skel.foot_joints.is_empty() {
        return Err(Error::Config("skeleton has no foot joints".into()));
    }
    let n = m.num_frames();
    let contact = |t: usize, f: usize| -> bool {
        if t == 0 {
            return false;
        }
        let p = m.joint(t, f);
        let q = m.joint(t - 1, f);
        p.y < th.height && (p.y - q.y).abs() < th.vertical_speed
    };
    let mut sum = 0.0;
    let mut count = 0usize;
    for &f in &skel.foot_joints {
        for t in 2..n {
            if contact(t, f) && contact(t - 1, f) {
                let d = m.joint(t, f) - m.joint(t - 1, f);
                sum += (d.x * d.x + d.z * d.z).sqrt();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(FootSliding { value: 0.0, no_contact: true });
    }
    Ok(FootSliding { value: sum / count as f64, no_contact: false })
}

/// Mean `|y|` of the foot joints, in millimeters.
pub fn foot_contact(m: &GlobalMotion, skel: &SkeletonConfig) -> Result<f64> {
    if skel.foot_joints.is_empty() {
        return Err(Error::Config("skeleton has no foot joints".into()));
    }
    let n = m.num_frames();
    let mut sum = 0.0;
    for t in 0..n {
        for &f in &skel.foot_joints {
            sum += m.joint(t, f).y.abs();
        }
    }
    Ok(sum / (n * skel.foot_joints.len()) as f64 * 1000.0)
}

/// Mean acceleration (m/frame^2, central second difference) and jerk
/// (m/frame^3, third difference) norms over joints and frames.
pub fn accel_jerk(m: &GlobalMotion) -> Result<(f64, f64)> {
    let n = m.num_frames();
    if n < 4 {
        return Err(Error::TooShort { need: 4, got: n });
    }
    let nj = m.num_joints;
    let mut acc = 0.0;
    for t in 1..n - 1 {
        for j in 0..nj {
            acc += ((m.joint(t + 1, j) - m.joint(t, j)) - (m.joint(t, j) - m.joint(t - 1, j))).norm();
        }
    }
    let mut jerk = 0.0;
    for t in 1..n - 2 {
        for j in 0..nj {
            let d = (m.joint(t + 2, j) - m.joint(t - 1, j)) - 3.0 * (m.joint(t + 1, j) - m.joint(t, j));
            jerk += d.norm();
        }
    }
    Ok((acc / ((n - 2) * nj) as f64, jerk / ((n - 3) * nj) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub r_top1: f64,
    pub mm_dist: f64,
    /// m per contact frame.
    pub fs: f64,
    /// millimeters.
    pub fc: f64,
    /// m/frame^2.
    pub acce: f64,
    /// m/frame^3.
    pub jerk: f64,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let all = [self.fid, self.r_top1, self.mm_dist, self.fs, self.fc, self.acce, self.jerk];
        if !all.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("metric report"));
        }
        if [self.fs, self.fc, self.acce, self.jerk].iter().any(|&v| v < 0.0) {
            return Err(Error::Config("plausibility metrics must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn entries(&self) -> [(&'static str, f64); 7] {
        [
            ("fid", self.fid),
            ("r_top1", self.r_top1),
            ("mm_dist", self.mm_dist),
            ("fs", self.fs),
            ("fc", self.fc),
            ("acce", self.acce),
            ("jerk", self.jerk),
        ]
    }
}

/// Plausibility metrics averaged over a set of motions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PlausibilityStats {
    pub fs: f64,
    pub fc: f64,
    pub acce: f64,
    pub jerk: f64,
    pub no_contact: usize,
}

pub fn plausibility(motions: &[GlobalMotion], skel: &SkeletonConfig, th: ContactThresholds) -> Result<PlausibilityStats> {
    if motions.is_empty() {
        return Err(Error::Config("no motions".into()));
    }
    let mut s = PlausibilityStats::default();
    let mut fs_count = 0usize;
    for m in motions {
        let fs = foot_sliding(m, skel, th)?;
        if fs.no_contact {
            s.no_contact += 1;
        } else {
            s.fs += fs.value;
            fs_count += 1;
        }
        s.fc += foot_contact(m, skel)?;
        let (a, j) = accel_jerk(m)?;
        s.acce += a;
        s.jerk += j;
    }
    let n = motions.len() as f64;
    s.fs = if fs_count > 0 { s.fs / fs_count as f64 } else { 0.0 };
    s.fc /= n;
    s.acce /= n;
    s.jerk /= n;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn stats_1d(mu: f64, var: f64) -> GaussianStats {
        GaussianStats::new(DVector::from_element(1, mu), DMatrix::from_element(1, 1, var), 10).unwrap()
    }

    #[test]
    fn frechet_self_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rows: Vec<Vec<f64>> = (0..50).map(|_| (0..6).map(|_| rng.random::<f64>()).collect()).collect();
        let s = GaussianStats::from_samples(&rows).unwrap();
        assert!(frechet_distance(&s, &s).unwrap().abs() < 1e-6);
    }

    #[test]
    fn frechet_identity_mean_shift() {
        let d = 5;
        let a = GaussianStats::new(DVector::zeros(d), DMatrix::identity(d, d), 10).unwrap();
        let mu = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0, 3.0]);
        let b = GaussianStats::new(mu.clone(), DMatrix::identity(d, d), 10).unwrap();
        let fd = frechet_distance(&a, &b).unwrap();
        assert!((fd - mu.norm_squared()).abs() < 1e-6);
    }

    #[test]
    fn frechet_1d_closed_form() {
        // variances 1 and 4: 1 + (1 - 2)^2
        let fd = frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(1.0, 4.0)).unwrap();
        assert!((fd - 2.0).abs() < 1e-6, "{fd}");
    }

    #[test]
    fn frechet_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sample = |shift: f64| -> GaussianStats {
            let rows: Vec<Vec<f64>> = (0..40)
                .map(|_| (0..4).map(|i| rng.random::<f64>() * (i as f64 + 1.0) + shift).collect())
                .collect();
            GaussianStats::from_samples(&rows).unwrap()
        };
        let (a, b) = (sample(0.0), sample(0.7));
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-6);
    }

    #[test]
    fn frechet_rejects_bad_inputs() {
        let a = stats_1d(0.0, 1.0);
        let b = GaussianStats::new(DVector::zeros(2), DMatrix::identity(2, 2), 5).unwrap();
        assert!(matches!(frechet_distance(&a, &b), Err(Error::Shape(_))));
        let neg = stats_1d(0.0, -1.0);
        assert!(matches!(frechet_distance(&a, &neg), Err(Error::NotPsd(_))));
    }

    #[test]
    fn mm_dist_geometry() {
        let m = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let c = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!((mm_dist(&m, &c).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(mm_dist(&m, &m).unwrap(), 0.0);
        let v = [0.3, -0.4];
        let moved: Vec<Vec<f64>> = m.iter().map(|r| vec![r[0] + v[0], r[1] + v[1]]).collect();
        assert!(mm_dist(&moved, &c).unwrap() <= mm_dist(&m, &c).unwrap() + 0.5 + 1e-12);
    }

    #[test]
    fn r_precision_identity_and_full_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e: Vec<Vec<f64>> = (0..256).map(|_| (0..8).map(|_| rng.random::<f64>()).collect()).collect();
        assert_eq!(r_precision(&e, &e, 64, 1, 0).unwrap(), 1.0);
        let other: Vec<Vec<f64>> = (0..256).map(|_| (0..8).map(|_| rng.random::<f64>()).collect()).collect();
        assert_eq!(r_precision(&e, &other, 64, 64, 0).unwrap(), 1.0);
        assert!(r_precision(&e[..10], &e[..10], 64, 1, 0).is_err());
    }

    #[test]
    fn r_precision_chance_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 64 * 200;
        let m: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        let c: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        let p = 1.0 / 64.0;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let r = r_precision(&m, &c, 64, 1, 7).unwrap();
        assert!((r - p).abs() < 3.0 * sigma, "{r}");
    }

    fn feet_motion(n: usize, f: impl Fn(usize) -> [f64; 3]) -> (GlobalMotion, SkeletonConfig) {
        let mut pos = Vec::new();
        for t in 0..n {
            pos.extend([0.0, 1.6, 0.0]);
            pos.extend(f(t));
        }
        let skel = SkeletonConfig::new(2, 0, vec![1], 30.0).unwrap();
        (GlobalMotion::new(2, 30.0, pos, vec![0.0; n]).unwrap(), skel)
    }

    #[test]
    fn pinned_feet_do_not_slide() {
        let (m, skel) = feet_motion(20, |_| [0.1, 0.0, 0.2]);
        let fs = foot_sliding(&m, &skel, ContactThresholds::default()).unwrap();
        assert_eq!(fs.value, 0.0);
        assert!(!fs.no_contact);
        assert_eq!(foot_contact(&m, &skel).unwrap(), 0.0);
    }

    #[test]
    fn sliding_foot_rate() {
        let (m, skel) = feet_motion(10, |t| [0.01 * t as f64, 0.0, 0.0]);
        let fs = foot_sliding(&m, &skel, ContactThresholds::default()).unwrap();
        assert!((fs.value - 0.01).abs() < 1e-12);
    }

    #[test]
    fn airborne_has_no_contact() {
        let (m, skel) = feet_motion(10, |t| [0.01 * t as f64, 1.0, 0.0]);
        let fs = foot_sliding(&m, &skel, ContactThresholds::default()).unwrap();
        assert_eq!(fs.value, 0.0);
        assert!(fs.no_contact);
    }

    #[test]
    fn foot_contact_in_millimeters() {
        let (m, skel) = feet_motion(10, |_| [0.0, 0.005, 0.0]);
        assert!((foot_contact(&m, &skel).unwrap() - 5.0).abs() < 1e-9);
        let (m, skel) = feet_motion(10, |t| [0.0, if t % 2 == 0 { 0.0 } else { 0.01 }, 0.0]);
        assert!((foot_contact(&m, &skel).unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn smoothness_closed_forms() {
        let (m, _) = feet_motion(30, |t| [0.02 * t as f64, 0.1, -0.01 * t as f64]);
        let (a, j) = accel_jerk(&m).unwrap();
        assert!(a < 1e-12 && j < 1e-12);

        let acc = 0.003;
        let mut pos = Vec::new();
        for t in 0..30 {
            pos.extend([0.5 * acc * (t * t) as f64, 0.0, 0.0]);
        }
        let m = GlobalMotion::new(1, 30.0, pos, vec![0.0; 30]).unwrap();
        let (a, j) = accel_jerk(&m).unwrap();
        assert!((a - acc).abs() < 1e-12);
        assert!(j < 1e-12);
        assert!(accel_jerk(&GlobalMotion::new(1, 30.0, vec![0.0; 9], vec![0.0; 3]).unwrap()).is_err());
    }

    #[test]
    fn sinusoid_acceleration_matches_analytic() {
        let (amp, omega, n) = (0.2, 0.15, 150);
        let mut pos = Vec::new();
        for t in 0..n {
            pos.extend([amp * (omega * t as f64).sin(), 0.0, 0.0]);
        }
        let m = GlobalMotion::new(1, 30.0, pos, vec![0.0; n]).unwrap();
        let (a, j) = accel_jerk(&m).unwrap();
        let analytic_a = (1..n - 1).map(|t| amp * omega.powi(2) * (omega * t as f64).sin().abs()).sum::<f64>() / (n - 2) as f64;
        let analytic_j = (1..n - 2)
            .map(|t| amp * omega.powi(3) * (omega * (t as f64 + 0.5)).cos().abs())
            .sum::<f64>()
            / (n - 3) as f64;
        assert!((a / analytic_a - 1.0).abs() < 0.05, "{a} vs {analytic_a}");
        assert!((j / analytic_j - 1.0).abs() < 0.05, "{j} vs {analytic_j}");
    }
}
