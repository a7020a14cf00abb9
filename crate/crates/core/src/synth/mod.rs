//! Synthetic multi-person scenes: articulated stick figures wandering in
//! front of a fixed pinhole camera, rendered to small RGB frames with exact
//! 2.5D annotations. This stands in for motion-capture footage at a scale
//! where training on a single core is practical.
//!
//! Geometry lives in the camera frame: x right, y down, z away from the
//! camera, meters. People are upright; a per-person yaw turns them about the
//! vertical axis.

mod io;
mod render;
mod splits;

pub use io::{load, save};
pub use render::{render, FrameAnnot, PersonAnnot, RenderedSequence, SeqMeta};
pub use splits::{
    frame_image, heatmap_points, make_splits, snippet_targets, SnippetRef, SplitCfg, Splits,
};

use crate::geometry::Camera;
use crate::rng::Rng;

pub const NUM_JOINTS: usize = 15;

/// Joint indices: pelvis is the root; chains run neck-head, shoulders to
/// wrists, hips to ankles.
pub const PELVIS: usize = 0;
pub const NECK: usize = 1;
pub const HEAD: usize = 2;

/// Parent-child joint pairs, used for both articulation and rendering.
pub const BONES: [(usize, usize); 14] = [
    (0, 1),
    (1, 2),
    (1, 3),
    (3, 4),
    (4, 5),
    (1, 6),
    (6, 7),
    (7, 8),
    (0, 9),
    (9, 10),
    (10, 11),
    (0, 12),
    (12, 13),
    (13, 14),
];

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("bad scene config: {0}")]
    Config(String),
    #[error("joint behind the camera at frame {frame}, person {person}")]
    BehindCamera { frame: usize, person: usize },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionCfg {
    /// Root speed ceiling, meters per frame.
    pub root_speed: f64,
    /// Joint angle change ceiling, radians per frame.
    pub angular_vel: f64,
}

impl Default for MotionCfg {
    fn default() -> Self {
        MotionCfg {
            root_speed: 0.06,
            angular_vel: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Script {
    /// Independent wandering.
    Free,
    /// Everyone frozen at their spawn pose.
    Static,
    /// Persons 0 and 1 walk through each other at different depths, which
    /// forces a 2D occlusion mid-sequence.
    Crossing,
    /// Person 0 leaves partway through; person 1 enters before that, so the
    /// scene always has someone on stage.
    ExitEnter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneCfg {
    pub people: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub motion: MotionCfg,
    pub script: Script,
}

impl Default for SceneCfg {
    fn default() -> Self {
        SceneCfg {
            people: 2,
            frames: 12,
            width: 64,
            height: 64,
            seed: 1,
            motion: MotionCfg::default(),
            script: Script::Free,
        }
    }
}

/// Spawn slots: lateral offset and depth, meters. Bounds how many people a
/// scene can hold before they would stack on spawn.
const LANES: [(f64, f64); 8] = [
    (-0.9, 3.2),
    (0.9, 4.2),
    (-0.3, 5.0),
    (1.5, 3.6),
    (-1.5, 4.8),
    (0.3, 6.0),
    (1.2, 5.6),
    (-1.2, 6.4),
];

/// Nominal frame period; horizons quoted in milliseconds assume this.
pub const FRAME_MS: f64 = 166.0;

/// Crossing-script depths. The near passer-by fills most of the frame while
/// the far walker projects to a figure a few pixels wide, so around the meet
/// frame the near torso hides the far person completely.
const CROSS_NEAR_Z: f64 = 1.15;
const CROSS_FAR_Z: f64 = 6.6;

pub struct Person {
    pub id: usize,
    pub present: Vec<bool>,
    /// `joints[t][k]`, camera-frame meters; meaningful where present.
    pub joints: Vec<[[f64; 3]; NUM_JOINTS]>,
}

pub struct Scene {
    pub people: Vec<Person>,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub cam: Camera<f64>,
    pub seed: u64,
}

/// Fixed intrinsics for a given resolution: square pixels, principal point
/// at the image center, focal length equal to the image width (about a 53
/// degree horizontal field of view).
pub fn camera_for(width: usize, height: usize) -> Camera<f64> {
    Camera {
        fx: width as f64,
        fy: width as f64,
        cx: (width as f64 - 1.0) / 2.0,
        cy: (height as f64 - 1.0) / 2.0,
    }
}

/// Canonical bone lengths in meters, indexed like [`BONES`].
const BONE_CANON: [f64; 14] = [
    0.55, 0.24, 0.19, 0.30, 0.27, 0.19, 0.30, 0.27, 0.11, 0.44, 0.43, 0.11, 0.44, 0.43,
];

/// Limb articulation state: swing angles for shoulders and thighs, bend
/// angles for elbows and knees, all in the sagittal plane of the person.
#[derive(Clone, Copy)]
struct Angles {
    yaw: f64,
    arm: [f64; 2],
    elbow: [f64; 2],
    thigh: [f64; 2],
    knee: [f64; 2],
}

impl Angles {
    fn spawn(rng: &mut Rng) -> Angles {
        Angles {
            yaw: rng.range(-3.1, 3.1),
            arm: [rng.range(-0.6, 0.6), rng.range(-0.6, 0.6)],
            elbow: [rng.range(0.2, 1.2), rng.range(0.2, 1.2)],
            thigh: [rng.range(-0.5, 0.5), rng.range(-0.5, 0.5)],
            knee: [rng.range(0.1, 1.0), rng.range(0.1, 1.0)],
        }
    }

    /// Random-walk every angle, reflecting at its joint limit so one step
    /// never exceeds the configured angular velocity.
    fn advance(&mut self, rng: &mut Rng, vel: f64) {
        fn walk(a: &mut f64, rng: &mut Rng, vel: f64, lo: f64, hi: f64) {
            let mut next = *a + rng.range(-vel, vel);
            if next > hi {
                next = hi - (next - hi);
            }
            if next < lo {
                next = lo + (lo - next);
            }
            *a = next.clamp(lo, hi);
        }
        self.yaw += rng.range(-vel, vel) * 0.5;
        for s in 0..2 {
            walk(&mut self.arm[s], rng, vel, -1.1, 1.1);
            walk(&mut self.elbow[s], rng, vel, 0.05, 2.2);
            walk(&mut self.thigh[s], rng, vel, -0.8, 0.8);
            walk(&mut self.knee[s], rng, vel, 0.0, 2.0);
        }
    }

    /// Rein in limb swing for scripted walkers. Wrists and ankles then stay
    /// within about 0.4 m of the hip line sideways, narrow enough for a
    /// distant figure to disappear behind a near torso.
    fn clamp_gait(&mut self) {
        for s in 0..2 {
            self.arm[s] = self.arm[s].clamp(-0.4, 0.4);
            self.elbow[s] = self.elbow[s].clamp(0.05, 0.9);
            self.thigh[s] = self.thigh[s].clamp(-0.35, 0.35);
            self.knee[s] = self.knee[s].clamp(0.0, 0.3);
        }
    }
}

/// Place all 15 joints for a root position, yaw and limb angles. Bone
/// lengths are applied to unit direction vectors, so they hold exactly for
/// any angles.
fn skeleton(root: [f64; 3], bones: &[f64; 14], a: &Angles) -> [[f64; 3]; NUM_JOINTS] {
    let (sin, cos) = a.yaw.sin_cos();
    // Local frame: x lateral (person's right), y down, z the facing
    // direction. Vertical components pass through the yaw unchanged.
    let w = |x: f64, y: f64, z: f64| [cos * x + sin * z, y, -sin * x + cos * z];
    let add = |p: [f64; 3], o: [f64; 3]| [p[0] + o[0], p[1] + o[1], p[2] + o[2]];
    // A limb segment of length `l` swung by `ang` from straight down.
    let swing = |l: f64, ang: f64| w(0.0, l * ang.cos(), l * ang.sin());

    let mut j = [[0.0; 3]; NUM_JOINTS];
    j[PELVIS] = root;
    j[NECK] = add(root, [0.0, -bones[0], 0.0]);
    j[HEAD] = add(j[NECK], [0.0, -bones[1], 0.0]);
    for side in 0..2 {
        let (sx, sho, elb, wri, hip, kne, ank, boff) = if side == 0 {
            (-1.0, 3, 4, 5, 9, 10, 11, 2)
        } else {
            (1.0, 6, 7, 8, 12, 13, 14, 5)
        };
        j[sho] = add(j[NECK], w(sx * bones[boff], 0.0, 0.0));
        j[elb] = add(j[sho], swing(bones[boff + 1], a.arm[side]));
        j[wri] = add(j[elb], swing(bones[boff + 2], a.arm[side] + a.elbow[side]));
        j[hip] = add(root, w(sx * bones[8], 0.03, 0.0));
        j[kne] = add(j[hip], swing(bones[9], a.thigh[side]));
        j[ank] = add(j[kne], swing(bones[10], a.thigh[side] - a.knee[side]));
    }
    j
}

struct Walker {
    pos: [f64; 3],
    vel: [f64; 3],
    bones: [f64; 14],
    angles: Angles,
}

/// Wander box keeping everyone in front of the camera and roughly in frame.
const BOX_X: (f64, f64) = (-1.8, 1.8);
const BOX_Y: (f64, f64) = (-0.25, 0.25);
const BOX_Z: (f64, f64) = (2.8, 7.0);

impl Walker {
    fn advance(&mut self, rng: &mut Rng, m: &MotionCfg) {
        let accel = m.root_speed / 3.0;
        let caps = [m.root_speed, m.root_speed / 4.0, m.root_speed];
        let lims = [BOX_X, BOX_Y, BOX_Z];
        for a in 0..3 {
            self.vel[a] = (self.vel[a] + rng.range(-accel, accel)).clamp(-caps[a], caps[a]);
            self.pos[a] += self.vel[a];
            let (lo, hi) = lims[a];
            if self.pos[a] < lo || self.pos[a] > hi {
                self.pos[a] = self.pos[a].clamp(lo, hi);
                self.vel[a] = -self.vel[a];
            }
        }
        self.angles.advance(rng, m.angular_vel);
    }
}

pub fn generate_scene(cfg: &SceneCfg) -> Result<Scene> {
    if cfg.people == 0 || cfg.frames == 0 {
        return Err(SynthError::Config("empty scene".into()));
    }
    if cfg.people > LANES.len() {
        return Err(SynthError::Config(format!(
            "{} people exceed the {} spawn lanes",
            cfg.people,
            LANES.len()
        )));
    }
    if matches!(cfg.script, Script::Crossing | Script::ExitEnter) && cfg.people < 2 {
        return Err(SynthError::Config("scripted scenes need two people".into()));
    }
    if cfg.width < 16 || cfg.height < 16 {
        return Err(SynthError::Config("resolution below 16x16".into()));
    }

    let mut rng = Rng::seed_from(cfg.seed);
    let n = cfg.people;
    let f = cfg.frames;
    let last = (f - 1).max(1) as f64;

    let mut walkers: Vec<Walker> = (0..n)
        .map(|i| {
            let (x, z) = LANES[i];
            let scale = rng.range(0.92, 1.08);
            let mut bones = BONE_CANON;
            for b in &mut bones {
                *b *= scale * rng.range(0.97, 1.03);
            }
            Walker {
                pos: [x, rng.range(-0.1, 0.1), z],
                vel: [0.0; 3],
                bones,
                angles: Angles::spawn(&mut rng),
            }
        })
        .collect();

    // Presence windows. Contiguous by construction.
    let present_range: Vec<(usize, usize)> = (0..n)
        .map(|i| match cfg.script {
            Script::ExitEnter if i == 0 => (0, (f * 7).div_ceil(10)),
            Script::ExitEnter if i == 1 => (f * 3 / 10, f),
            _ => (0, f),
        })
        .collect();

    let mut people: Vec<Person> = (0..n)
        .map(|id| Person {
            id,
            present: Vec::with_capacity(f),
            joints: Vec::with_capacity(f),
        })
        .collect();

    for t in 0..f {
        for (i, wk) in walkers.iter_mut().enumerate() {
            match cfg.script {
                Script::Static => {}
                Script::Crossing if i < 2 => {
                    // Straight passes at separated depths, aligned so both
                    // roots sit on the optical axis at the middle frame. The
                    // far walker stands a head higher in the image (raised
                    // ground) to keep its ankles inside the near torso span.
                    let meet = ((f - 1) / 2) as f64;
                    let s = (t as f64 - meet) / last;
                    let (x, y, z, yaw) = if i == 0 {
                        (s, 0.22, CROSS_NEAR_Z, std::f64::consts::FRAC_PI_2)
                    } else {
                        (-s, -0.20, CROSS_FAR_Z, -std::f64::consts::FRAC_PI_2)
                    };
                    wk.pos = [x, y, z];
                    if t > 0 {
                        wk.angles.advance(&mut rng, cfg.motion.angular_vel);
                    }
                    wk.angles.yaw = yaw;
                    wk.angles.clamp_gait();
                }
                _ if t > 0 => wk.advance(&mut rng, &cfg.motion),
                _ => {}
            }
            let (lo, hi) = present_range[i];
            people[i].present.push(t >= lo && t < hi);
            people[i].joints.push(skeleton(wk.pos, &wk.bones, &wk.angles));
        }
    }

    Ok(Scene {
        people,
        frames: f,
        width: cfg.width,
        height: cfg.height,
        cam: camera_for(cfg.width, cfg.height),
        seed: cfg.seed,
    })
}

impl Scene {
    /// Lengths of every bone of one person at one frame, [`BONES`] order.
    pub fn bone_lengths(&self, person: usize, frame: usize) -> [f64; 14] {
        let j = &self.people[person].joints[frame];
        let mut out = [0.0; 14];
        for (b, &(p, c)) in BONES.iter().enumerate() {
            out[b] = ((j[p][0] - j[c][0]).powi(2)
                + (j[p][1] - j[c][1]).powi(2)
                + (j[p][2] - j[c][2]).powi(2))
            .sqrt();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_velocities_freeze_the_scene() {
        let cfg = SceneCfg {
            motion: MotionCfg {
                root_speed: 0.0,
                angular_vel: 0.0,
            },
            frames: 6,
            ..SceneCfg::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        for p in &scene.people {
            for t in 1..cfg.frames {
                assert_eq!(p.joints[t], p.joints[0]);
            }
        }

        let still = generate_scene(&SceneCfg {
            script: Script::Static,
            ..SceneCfg::default()
        })
        .unwrap();
        for p in &still.people {
            assert_eq!(p.joints[3], p.joints[0]);
        }
    }

    #[test]
    fn bone_lengths_hold_to_numerical_precision() {
        let cfg = SceneCfg {
            people: 3,
            frames: 20,
            seed: 42,
            ..SceneCfg::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        for p in 0..cfg.people {
            let first = scene.bone_lengths(p, 0);
            for t in 1..cfg.frames {
                let now = scene.bone_lengths(p, t);
                for b in 0..14 {
                    assert!(
                        (now[b] - first[b]).abs() < 1e-9,
                        "person {p} bone {b} drifted at {t}"
                    );
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let cfg = SceneCfg {
            seed: 777,
            frames: 9,
            ..SceneCfg::default()
        };
        let a = generate_scene(&cfg).unwrap();
        let b = generate_scene(&cfg).unwrap();
        for (pa, pb) in a.people.iter().zip(&b.people) {
            assert_eq!(pa.joints, pb.joints);
            assert_eq!(pa.present, pb.present);
        }
        let c = generate_scene(&SceneCfg { seed: 778, ..cfg }).unwrap();
        assert_ne!(a.people[0].joints, c.people[0].joints);
    }

    #[test]
    fn impossible_configs_are_rejected() {
        assert!(generate_scene(&SceneCfg { people: 9, ..SceneCfg::default() }).is_err());
        assert!(generate_scene(&SceneCfg { people: 0, ..SceneCfg::default() }).is_err());
        assert!(generate_scene(&SceneCfg { frames: 0, ..SceneCfg::default() }).is_err());
        assert!(generate_scene(&SceneCfg {
            people: 1,
            script: Script::Crossing,
            ..SceneCfg::default()
        })
        .is_err());
    }

    #[test]
    fn exit_enter_presence_is_contiguous_and_overlapping() {
        let cfg = SceneCfg {
            script: Script::ExitEnter,
            frames: 10,
            ..SceneCfg::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        for p in &scene.people {
            let first = p.present.iter().position(|&x| x).unwrap();
            let last = p.present.iter().rposition(|&x| x).unwrap();
            assert!(p.present[first..=last].iter().all(|&x| x));
        }
        assert!(!scene.people[0].present[9]);
        assert!(!scene.people[1].present[0]);
        // Both on stage somewhere in the middle.
        assert!((0..10).any(|t| scene.people[0].present[t] && scene.people[1].present[t]));
    }

    #[test]
    fn crossing_paths_meet_in_image_x_at_different_depths() {
        let cfg = SceneCfg {
            script: Script::Crossing,
            frames: 11,
            ..SceneCfg::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        let cam = scene.cam;
        let meet = (cfg.frames - 1) / 2;
        for t in 0..cfg.frames {
            assert!(scene.people[0].joints[t][PELVIS][2] < scene.people[1].joints[t][PELVIS][2]);
        }
        let a = cam.project(scene.people[0].joints[meet][PELVIS]).unwrap();
        let b = cam.project(scene.people[1].joints[meet][PELVIS]).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-9, "roots miss at the meet frame");
        // Opposite travel directions.
        let a0 = cam.project(scene.people[0].joints[0][PELVIS]).unwrap();
        let b0 = cam.project(scene.people[1].joints[0][PELVIS]).unwrap();
        assert!((a0[0] - a[0]) * (b0[0] - b[0]) < 0.0);
    }
}
