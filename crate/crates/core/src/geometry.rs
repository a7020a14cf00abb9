//! Camera model and 2.5D pose representations.
//!
//! A 2.5D point is (x, y, d): pixel coordinates plus metric depth along the
//! optical axis. Poses are stored in star form: an absolute root joint and
//! per-joint offsets from it (the root's own offset is zero). Joint offsets
//! can be carried in two unit systems:
//!
//! * pixel offsets (Δx px, Δy px, Δd m), what a camera sees;
//! * normalized offsets (Δx·d/fx, Δy·d/fy, Δd), all in meters, which factor
//!   out focal length and person depth so that losses on them behave like 3D
//!   losses.

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum GeomError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("joint list is empty")]
    Empty,
}

pub type Result<T> = std::result::Result<T, GeomError>;

/// Pinhole intrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera<S> {
    pub fx: S,
    pub fy: S,
    pub cx: S,
    pub cy: S,
}

impl<S: Scalar> Camera<S> {
    pub fn new(fx: S, fy: S, cx: S, cy: S) -> Self {
        Camera { fx, fy, cx, cy }
    }

    /// Metric camera-frame point -> (x px, y px, depth m). The depth must be
    /// positive: the camera does not see behind itself.
    pub fn project(&self, p: [S; 3]) -> Result<[S; 3]> {
        let [x, y, z] = p;
        if z <= S::zero() {
            return Err(GeomError::NonPositiveDepth(z.f64()));
        }
        Ok([self.fx * x / z + self.cx, self.fy * y / z + self.cy, z])
    }

    /// (x px, y px, depth m) -> metric camera-frame point.
    pub fn lift(&self, p: [S; 3]) -> Result<[S; 3]> {
        let [x, y, d] = p;
        if d <= S::zero() {
            return Err(GeomError::NonPositiveDepth(d.f64()));
        }
        Ok([(x - self.cx) * d / self.fx, (y - self.cy) * d / self.fy, d])
    }

    /// Pixel offset from a root at depth `d` -> normalized (metric) offset.
    pub fn normalize_offset(&self, off: [S; 3], d: S) -> Result<[S; 3]> {
        if d <= S::zero() {
            return Err(GeomError::NonPositiveDepth(d.f64()));
        }
        Ok([off[0] * d / self.fx, off[1] * d / self.fy, off[2]])
    }

    /// Normalized (metric) offset -> pixel offset at root depth `d`.
    pub fn denormalize_offset(&self, off: [S; 3], d: S) -> Result<[S; 3]> {
        if d <= S::zero() {
            return Err(GeomError::NonPositiveDepth(d.f64()));
        }
        Ok([off[0] * self.fx / d, off[1] * self.fy / d, off[2]])
    }
}

/// One person in one frame: root joint in 2.5D, per-joint offsets from the
/// root (pixel units; `offsets[0]` is zero by construction), per-joint
/// visibility in [0, 1] and an occurrence probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose<S> {
    pub root: [S; 3],
    pub offsets: Vec<[S; 3]>,
    pub visibility: Vec<S>,
    pub occurrence: S,
}

impl<S: Scalar> Pose<S> {
    /// Star form from absolute 2.5D joints; joint 0 is the root.
    pub fn from_joints(joints: &[[S; 3]], visibility: Vec<S>, occurrence: S) -> Result<Self> {
        if joints.is_empty() {
            return Err(GeomError::Empty);
        }
        let root = joints[0];
        let offsets = joints
            .iter()
            .map(|j| [j[0] - root[0], j[1] - root[1], j[2] - root[2]])
            .collect();
        Ok(Pose {
            root,
            offsets,
            visibility,
            occurrence,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.offsets.len()
    }

    /// Absolute 2.5D joints (root + offset).
    pub fn joints(&self) -> Vec<[S; 3]> {
        self.offsets
            .iter()
            .map(|o| [self.root[0] + o[0], self.root[1] + o[1], self.root[2] + o[2]])
            .collect()
    }

    /// Absolute metric 3D joints.
    pub fn joints_3d(&self, cam: &Camera<S>) -> Result<Vec<[S; 3]>> {
        self.joints().into_iter().map(|j| cam.lift(j)).collect()
    }

    /// Root lifted to metric 3D.
    pub fn root_3d(&self, cam: &Camera<S>) -> Result<[S; 3]> {
        cam.lift(self.root)
    }
}

/// One person slot across a snippet: `T + T_f` pose slots, `None` where the
/// person is not present. Absent geometry simply does not exist, so it can
/// never be read by accident.
#[derive(Clone, Debug)]
pub struct Trajectory<S> {
    pub id: usize,
    pub poses: Vec<Option<Pose<S>>>,
}

impl<S: Scalar> Trajectory<S> {
    pub fn empty(id: usize, len: usize) -> Self {
        Trajectory {
            id,
            poses: vec![None; len],
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn present(&self, t: usize) -> bool {
        self.poses.get(t).map(|p| p.is_some()).unwrap_or(false)
    }

    /// Frames where the person is present.
    pub fn support(&self) -> Vec<usize> {
        (0..self.poses.len()).filter(|&t| self.present(t)).collect()
    }
}

/// Euclidean distance of two 3D points.
pub fn dist3<S: Scalar>(a: [S; 3], b: [S; 3]) -> S {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}
