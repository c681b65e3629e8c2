//! Synthetic image-text-pose triplets for desk-scale runs.
//!
//! Every record pairs a stick figure rendered in a 256² pose map with a
//! 64² photo-like image of the same figure and a prompt naming the person
//! and the action.

use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HcpError, Result};
use crate::imageio::{to_u8, write_png};
use crate::training::ManifestEntry;

pub const IMAGE_SIDE: usize = 64;
pub const PRIOR_IMAGE_SIDE: usize = 256;

type Point = (f64, f64);

/// Joint positions in unit coordinates (x right, y down).
#[derive(Debug, Clone, Copy)]
pub struct Pose {
    pub head: Point,
    pub neck: Point,
    pub hip: Point,
    pub hands: [Point; 2],
    pub elbows: [Point; 2],
    pub knees: [Point; 2],
    pub feet: [Point; 2],
}

impl Pose {
    fn shifted(&self, dx: f64, dy: f64) -> Self {
        let s = |p: Point| (p.0 + dx, p.1 + dy);
        Self {
            head: s(self.head),
            neck: s(self.neck),
            hip: s(self.hip),
            hands: self.hands.map(s),
            elbows: self.elbows.map(s),
            knees: self.knees.map(s),
            feet: self.feet.map(s),
        }
    }

    /// Limb segments with their pose-map colours.
    fn limbs(&self) -> Vec<(Point, Point, [f64; 3])> {
        vec![
            (self.neck, self.hip, [1.0, 0.0, 0.0]),
            (self.neck, self.elbows[0], [1.0, 0.6, 0.0]),
            (self.elbows[0], self.hands[0], [1.0, 1.0, 0.0]),
            (self.neck, self.elbows[1], [0.0, 1.0, 0.0]),
            (self.elbows[1], self.hands[1], [0.0, 1.0, 0.7]),
            (self.hip, self.knees[0], [0.0, 0.6, 1.0]),
            (self.knees[0], self.feet[0], [0.0, 0.0, 1.0]),
            (self.hip, self.knees[1], [0.6, 0.0, 1.0]),
            (self.knees[1], self.feet[1], [1.0, 0.0, 1.0]),
            (self.neck, self.head, [1.0, 0.3, 0.3]),
        ]
    }
}

pub fn action_pose(action: &str) -> Option<Pose> {
    let p = match action {
        "yoga" => Pose {
            head: (0.5, 0.2),
            neck: (0.5, 0.3),
            hip: (0.5, 0.55),
            elbows: [(0.4, 0.18), (0.6, 0.18)],
            hands: [(0.47, 0.06), (0.53, 0.06)],
            knees: [(0.5, 0.72), (0.66, 0.6)],
            feet: [(0.5, 0.9), (0.52, 0.66)],
        },
        "dancing" => Pose {
            head: (0.46, 0.2),
            neck: (0.48, 0.3),
            hip: (0.52, 0.55),
            elbows: [(0.32, 0.26), (0.64, 0.36)],
            hands: [(0.2, 0.16), (0.78, 0.3)],
            knees: [(0.4, 0.7), (0.66, 0.68)],
            feet: [(0.36, 0.9), (0.8, 0.78)],
        },
        "running" => Pose {
            head: (0.58, 0.2),
            neck: (0.55, 0.3),
            hip: (0.48, 0.55),
            elbows: [(0.68, 0.4), (0.4, 0.38)],
            hands: [(0.74, 0.3), (0.32, 0.48)],
            knees: [(0.64, 0.66), (0.36, 0.7)],
            feet: [(0.6, 0.86), (0.22, 0.78)],
        },
        "sitting" => Pose {
            head: (0.4, 0.32),
            neck: (0.4, 0.42),
            hip: (0.42, 0.66),
            elbows: [(0.5, 0.52), (0.32, 0.54)],
            hands: [(0.6, 0.58), (0.3, 0.66)],
            knees: [(0.64, 0.64), (0.62, 0.7)],
            feet: [(0.66, 0.88), (0.64, 0.9)],
        },
        _ => return None,
    };
    Some(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureRecord {
    pub id: String,
    pub prompt: String,
    pub action: String,
}

fn seg_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Pose map: coloured limbs and a head disc on black.
pub fn render_pose_map(pose: &Pose, side: usize) -> Array3<f64> {
    let limbs = pose.limbs();
    Array3::from_shape_fn((side, side, 3), |(y, x, c)| {
        let p = ((x as f64 + 0.5) / side as f64, (y as f64 + 0.5) / side as f64);
        if seg_distance(p, pose.head, pose.head) < 0.06 {
            return [1.0, 0.85, 0.7][c];
        }
        for (a, b, colour) in &limbs {
            if seg_distance(p, *a, *b) < 0.022 {
                return colour[c];
            }
        }
        0.0
    })
}

/// Image: the same figure in a body colour over a background colour with a
/// soft horizontal ground band.
pub fn render_image(pose: &Pose, side: usize, background: [f64; 3], body: [f64; 3]) -> Array3<f64> {
    let limbs = pose.limbs();
    Array3::from_shape_fn((side, side, 3), |(y, x, c)| {
        let p = ((x as f64 + 0.5) / side as f64, (y as f64 + 0.5) / side as f64);
        let on_body = seg_distance(p, pose.head, pose.head) < 0.07
            || limbs.iter().any(|(a, b, _)| seg_distance(p, *a, *b) < 0.04);
        if on_body {
            body[c]
        } else {
            let ground = if p.1 > 0.8 { 0.8 } else { 1.0 };
            background[c] * ground
        }
    })
}

const PEOPLE: [&str; 4] = ["woman", "man", "girl", "boy"];
const SCENES: [(&str, [f64; 3]); 4] = [
    ("on the beach", [0.9, 0.82, 0.6]),
    ("in a park", [0.45, 0.7, 0.4]),
    ("in a studio", [0.75, 0.75, 0.8]),
    ("by the lake", [0.45, 0.6, 0.85]),
];
const ACTIONS: [(&str, &str); 4] = [
    ("yoga", "doing yoga"),
    ("dancing", "dancing"),
    ("running", "running"),
    ("sitting", "sitting"),
];

/// Writes `images/`, `priors/`, `manifest.jsonl` and `prompts.txt` under
/// `dir`; returns the records in manifest order.
pub fn write_fixture(dir: &Path, records: usize, seed: u64) -> Result<Vec<FixtureRecord>> {
    if records == 0 {
        return Err(HcpError::Validation("fixture needs at least one record".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for sub in ["images", "priors"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| HcpError::io(&p, e))?;
    }
    let mut out = Vec::with_capacity(records);
    let mut manifest = Vec::new();
    for k in 0..records {
        let (action, phrase) = ACTIONS[k % ACTIONS.len()];
        let person = PEOPLE[k % PEOPLE.len()];
        let (scene, background) = SCENES[(k + k / ACTIONS.len()) % SCENES.len()];
        let dx = rng.random_range(-0.04..0.04);
        let dy = rng.random_range(-0.03..0.03);
        let pose = action_pose(action).expect("known action").shifted(dx, dy);
        let body = [
            rng.random_range(0.05..0.35),
            rng.random_range(0.05..0.35),
            rng.random_range(0.1..0.5),
        ];
        let id = format!("rec{k:03}");
        let prompt = format!("a {person} {phrase} {scene}");
        let image = render_image(&pose, IMAGE_SIDE, background, body);
        let prior = render_pose_map(&pose, PRIOR_IMAGE_SIDE);
        let image_rel = format!("images/{id}.png");
        let prior_rel = format!("priors/{id}.png");
        save_rgb(&dir.join(&image_rel), &image)?;
        save_rgb(&dir.join(&prior_rel), &prior)?;
        manifest.push(ManifestEntry {
            image: image_rel.into(),
            prompt: prompt.clone(),
            prior_image: prior_rel.into(),
            id: id.clone(),
            prior_kind: Default::default(),
        });
        out.push(FixtureRecord {
            id,
            prompt,
            action: action.into(),
        });
    }
    let path = dir.join("manifest.jsonl");
    let mut f = std::fs::File::create(&path).map_err(|e| HcpError::io(&path, e))?;
    for e in &manifest {
        writeln!(f, "{}", serde_json::to_string(e)?).map_err(|err| HcpError::io(&path, err))?;
    }
    let prompts_path = dir.join("prompts.txt");
    let prompts: String = out.iter().take(ACTIONS.len()).map(|r| format!("{}\n", r.prompt)).collect();
    std::fs::write(&prompts_path, prompts).map_err(|e| HcpError::io(&prompts_path, e))?;
    Ok(out)
}

fn save_rgb(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (h, w, _) = img.dim();
    let px: Vec<u8> = img.iter().map(|&v| to_u8(v)).collect();
    write_png(path, w as u32, h as u32, 3, &px)
}
