//! Procedural paired data: scripted motions on a stick body, a scene feature
//! vector and an instruction over a small fixed vocabulary.

mod body;
mod dataset;

pub use body::{Body, BodyKind};
pub use dataset::{build_dataset, load_dataset, regenerate, save_dataset, Dataset, Manifest, Sample};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::condition::ConditionBundle;
use crate::kinematics::GlobalMotion;

pub const SEQUENCE_FRAMES: usize = 150;
pub const FPS: f32 = 30.0;
pub const MIN_SEGMENT_FRAMES: usize = 20;
pub const IMAGE_FEATURE_DIM: usize = 16;
pub const MAX_TEXT_LEN: usize = 32;
const IMAGE_NOISE_STD: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speed {
    Slow,
    Normal,
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BendDepth {
    Shallow,
    Deep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Primitive {
    Idle,
    Walk { dir: Direction, speed: Speed },
    /// Positive angles turn left (counter-clockwise seen from above).
    Turn { degrees: i32 },
    Bend { depth: BendDepth },
    Kick { side: Side },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub primitive: Primitive,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionScript {
    pub segments: Vec<Segment>,
}

impl MotionScript {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    pub fn single(primitive: Primitive) -> Self {
        Self::new(vec![Segment { primitive, frames: SEQUENCE_FRAMES }])
    }

    pub fn total_frames(&self) -> usize {
        self.segments.iter().map(|s| s.frames).sum()
    }

    pub fn is_valid(&self) -> bool {
        !self.segments.is_empty()
            && self.segments.iter().all(|s| s.frames > 0)
            && self.total_frames() == SEQUENCE_FRAMES
    }

    pub fn primitive_at(&self, t: usize) -> Primitive {
        let mut end = 0;
        for s in &self.segments {
            end += s.frames;
            if t < end {
                return s.primitive;
            }
        }
        self.segments.last().map(|s| s.primitive).unwrap_or(Primitive::Idle)
    }

    /// Sum of scripted turns, degrees.
    pub fn total_turn_degrees(&self) -> i32 {
        self.segments
            .iter()
            .map(|s| match s.primitive {
                Primitive::Turn { degrees } => degrees,
                _ => 0,
            })
            .sum()
    }
}

/// Stand-in for the egocentric frame: where the goal lies and what is around.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// Bearing of the goal relative to the initial heading, in (-pi, pi].
    pub goal_bearing: f64,
    /// `[low_object, ball, open_path, blocked_ahead]`
    pub obstacles: [bool; 4],
}

pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

const PRIMITIVE_WEIGHTS: [(u8, u32); 5] = [(0, 1), (1, 4), (2, 3), (3, 2), (4, 2)];

fn sample_primitive<R: Rng + ?Sized>(rng: &mut R) -> Primitive {
    let total: u32 = PRIMITIVE_WEIGHTS.iter().map(|w| w.1).sum();
    let mut pick = rng.random_range(0..total);
    let mut kind = 0;
    for (k, w) in PRIMITIVE_WEIGHTS {
        if pick < w {
            kind = k;
            break;
        }
        pick -= w;
    }
    match kind {
        0 => Primitive::Idle,
        1 => Primitive::Walk {
            dir: *[Direction::Forward, Direction::Forward, Direction::Backward, Direction::Left, Direction::Right]
                .choose(rng)
                .unwrap(),
            speed: *[Speed::Slow, Speed::Normal, Speed::Fast].choose(rng).unwrap(),
        },
        2 => Primitive::Turn { degrees: *[-135, -90, -45, 45, 90, 135].choose(rng).unwrap() },
        3 => Primitive::Bend { depth: *[BendDepth::Shallow, BendDepth::Deep].choose(rng).unwrap() },
        _ => Primitive::Kick { side: *[Side::Left, Side::Right].choose(rng).unwrap() },
    }
}

/// Two to four primitives whose durations partition [`SEQUENCE_FRAMES`].
pub fn sample_script<R: Rng + ?Sized>(rng: &mut R) -> MotionScript {
    let count = rng.random_range(2..=4usize);
    let spare = SEQUENCE_FRAMES - count * MIN_SEGMENT_FRAMES;
    let mut cuts: Vec<usize> = (0..count - 1).map(|_| rng.random_range(0..=spare)).collect();
    cuts.sort_unstable();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(spare);
    let mut segments = Vec::with_capacity(count);
    let mut prev: Option<Primitive> = None;
    for w in bounds.windows(2) {
        let mut p = sample_primitive(rng);
        while prev == Some(p) {
            p = sample_primitive(rng);
        }
        prev = Some(p);
        segments.push(Segment { primitive: p, frames: MIN_SEGMENT_FRAMES + w[1] - w[0] });
    }
    MotionScript::new(segments)
}

/// Scene consistent with a script: the goal lies where the script ends up facing.
pub fn scene_for_script(script: &MotionScript) -> Scene {
    let has = |f: fn(&Primitive) -> bool| script.segments.iter().any(|s| f(&s.primitive));
    Scene {
        goal_bearing: wrap_angle((script.total_turn_degrees() as f64).to_radians()),
        obstacles: [
            has(|p| matches!(p, Primitive::Bend { .. })),
            has(|p| matches!(p, Primitive::Kick { .. })),
            has(|p| matches!(p, Primitive::Walk { .. })),
            !has(|p| matches!(p, Primitive::Walk { dir: Direction::Forward, .. })),
        ],
    }
}

pub fn realize(script: &MotionScript, body: &Body) -> GlobalMotion {
    body::realize(script, body, FPS)
}

pub const VOCABULARY: [&str; 41] = [
    "<pad>", "<bos>", "<eos>", "then", "stand", "still", "walk", "forward", "backward", "left", "right", "slowly",
    "briskly", "turn", "by", "45", "90", "135", "degrees", "bend", "down", "slightly", "deeply", "kick", "the", "ball",
    "with", "foot", "briefly", "for", "a", "while", "and", "steadily", "toward", "step", "sideways", "around", "look",
    "pause", "now",
];

pub fn word_id(word: &str) -> u16 {
    VOCABULARY
        .iter()
        .position(|w| *w == word)
        .unwrap_or_else(|| panic!("word {word:?} not in vocabulary")) as u16
}

pub fn instruction_words(script: &MotionScript) -> Vec<&'static str> {
    let mut words = Vec::new();
    for (i, seg) in script.segments.iter().enumerate() {
        if i > 0 {
            words.push("then");
        }
        match seg.primitive {
            Primitive::Idle => {
                words.extend(["stand", "still"]);
                if seg.frames < 40 {
                    words.push("briefly");
                } else {
                    words.extend(["for", "a", "while"]);
                }
            }
            Primitive::Walk { dir, speed } => {
                match dir {
                    Direction::Forward => words.extend(["walk", "forward"]),
                    Direction::Backward => words.extend(["walk", "backward"]),
                    Direction::Left => words.extend(["step", "sideways", "left"]),
                    Direction::Right => words.extend(["step", "sideways", "right"]),
                }
                words.push(match speed {
                    Speed::Slow => "slowly",
                    Speed::Normal => "steadily",
                    Speed::Fast => "briskly",
                });
            }
            Primitive::Turn { degrees } => {
                words.extend(["turn", if degrees > 0 { "left" } else { "right" }, "by"]);
                words.push(match degrees.abs() {
                    45 => "45",
                    90 => "90",
                    _ => "135",
                });
                words.push("degrees");
            }
            Primitive::Bend { depth } => {
                words.extend(["bend", "down"]);
                words.push(match depth {
                    BendDepth::Shallow => "slightly",
                    BendDepth::Deep => "deeply",
                });
            }
            Primitive::Kick { side } => {
                words.extend(["kick", "the", "ball", "with"]);
                words.push(match side {
                    Side::Left => "left",
                    Side::Right => "right",
                });
                words.push("foot");
            }
        }
    }
    words
}

pub fn tokenize_instruction(script: &MotionScript) -> Vec<u16> {
    instruction_words(script).into_iter().map(word_id).collect()
}

/// Scene feature vector: `[sin(bearing), cos(bearing), 4 obstacle flags, noise...]`.
pub fn image_feature<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> Vec<f32> {
    let mut v = vec![0f32; IMAGE_FEATURE_DIM];
    v[0] = scene.goal_bearing.sin() as f32;
    v[1] = scene.goal_bearing.cos() as f32;
    for (i, &flag) in scene.obstacles.iter().enumerate() {
        v[2 + i] = if flag { 1.0 } else { 0.0 };
    }
    let noise = Normal::new(0.0, IMAGE_NOISE_STD).unwrap();
    for slot in v.iter_mut().skip(6) {
        *slot = noise.sample(rng);
    }
    v
}

pub fn render_condition<R: Rng + ?Sized>(
    script: &MotionScript,
    scene: &Scene,
    first_frame: &[f32],
    rng: &mut R,
) -> ConditionBundle {
    ConditionBundle {
        image_feature: image_feature(scene, rng),
        instruction: tokenize_instruction(script),
        init_pose: first_frame.to_vec(),
    }
}
