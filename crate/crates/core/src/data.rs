//! Synthetic pose data, PoseRecord files, input normalization and the
//! least-squares lifting baseline.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::mix_seed;
use crate::skeleton::Skeleton;
use crate::tensor::Tensor;

pub const FORMAT: &str = "pgformer-poses";
pub const FORMAT_VERSION: u32 = 1;

/// Maps pixels to `[−1, 1]` along x, keeping the aspect ratio:
/// `x' = 2x/w − 1`, `y' = 2y/w − h/w`.
pub fn normalize_2d(points: &[[f64; 2]], width: f64, height: f64) -> Vec<[f64; 2]> {
    points.iter().map(|[x, y]| [2.0 * x / width - 1.0, 2.0 * y / width - height / width]).collect()
}

pub fn denormalize_2d(points: &[[f64; 2]], width: f64, height: f64) -> Vec<[f64; 2]> {
    points.iter().map(|[x, y]| [(x + 1.0) * width / 2.0, (y + height / width) * width / 2.0]).collect()
}

/// Pinhole camera looking down +z; x right, y down, millimeters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub principal: [f64; 2],
    pub width: f64,
    pub height: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Self { focal: 1100.0, principal: [500.0, 500.0], width: 1000.0, height: 1000.0 }
    }
}

impl Camera {
    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        [self.principal[0] + self.focal * p[0] / p[2], self.principal[1] + self.focal * p[1] / p[2]]
    }

    pub fn contains(&self, px: [f64; 2]) -> bool {
        (0.0..=self.width).contains(&px[0]) && (0.0..=self.height).contains(&px[1])
    }
}

/// Joint-angle limits in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AngleRanges {
    pub yaw: [f64; 2],
    pub spine_lean: [f64; 2],
    pub hip_flex: [f64; 2],
    pub knee_flex: [f64; 2],
    pub shoulder_raise: [f64; 2],
    pub shoulder_abduct: [f64; 2],
    pub elbow_flex: [f64; 2],
}

impl Default for AngleRanges {
    fn default() -> Self {
        Self {
            yaw: [-180.0, 180.0],
            spine_lean: [-10.0, 35.0],
            hip_flex: [-30.0, 110.0],
            knee_flex: [0.0, 120.0],
            shoulder_raise: [-40.0, 170.0],
            shoulder_abduct: [0.0, 80.0],
            elbow_flex: [0.0, 130.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub samples: usize,
    pub seed: u64,
    pub skeleton: String,
    /// Length in millimeters of the bone ending at each named joint.
    pub bone_lengths: BTreeMap<String, f64>,
    pub angles: AngleRanges,
    pub camera: Camera,
    /// Range of the root's distance from the camera, millimeters.
    pub distance: [f64; 2],
    /// Standard deviation of the 2D pixel noise.
    pub jitter_px: f64,
    pub actions: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            samples: 5000,
            seed: 0,
            skeleton: "skeleton16".into(),
            bone_lengths: default_bone_lengths(),
            angles: AngleRanges::default(),
            camera: Camera::default(),
            distance: [4000.0, 6000.0],
            jitter_px: 1.0,
            actions: vec!["walk".into(), "sit".into(), "reach".into()],
        }
    }
}

pub fn default_bone_lengths() -> BTreeMap<String, f64> {
    [
        ("r_hip", 130.0),
        ("l_hip", 130.0),
        ("r_knee", 450.0),
        ("l_knee", 450.0),
        ("r_foot", 440.0),
        ("l_foot", 440.0),
        ("spine", 230.0),
        ("thorax", 250.0),
        ("nose", 110.0),
        ("head", 200.0),
        ("l_shoulder", 150.0),
        ("r_shoulder", 150.0),
        ("l_elbow", 280.0),
        ("r_elbow", 280.0),
        ("l_wrist", 250.0),
        ("r_wrist", 250.0),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Joint angles in degrees; pairs are `[right, left]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Articulation {
    pub yaw: f64,
    pub spine_lean: f64,
    pub hip_flex: [f64; 2],
    pub knee_flex: [f64; 2],
    pub shoulder_raise: [f64; 2],
    pub shoulder_abduct: [f64; 2],
    pub elbow_flex: [f64; 2],
}

type Mat3 = [[f64; 3]; 3];

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn rot_x(deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn apply(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

/// Forward kinematics along a skeleton tree in a y-up body frame, facing +z.
#[derive(Clone, Debug)]
pub struct Kinematics {
    parents: Vec<Option<usize>>,
    order: Vec<usize>,
    names: Vec<String>,
    /// Rest offset of each joint from its parent.
    offsets: Vec<[f64; 3]>,
}

fn rest_direction(name: &str) -> Option<[f64; 3]> {
    let unit = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        v.map(|x| x / n)
    };
    Some(match name {
        "r_hip" | "r_shoulder" => [-1.0, 0.0, 0.0],
        "l_hip" | "l_shoulder" => [1.0, 0.0, 0.0],
        "r_knee" | "l_knee" | "r_foot" | "l_foot" | "r_elbow" | "l_elbow" | "r_wrist" | "l_wrist" => [0.0, -1.0, 0.0],
        "spine" | "thorax" => [0.0, 1.0, 0.0],
        "nose" => unit([0.0, 0.6, 0.8]),
        _ => return None,
    })
}

impl Kinematics {
    pub fn new(skeleton: &Skeleton, lengths: &BTreeMap<String, f64>) -> Result<Self> {
        let g = &skeleton.graph;
        let has_nose = g.names().iter().any(|n| n == "nose");
        let mut offsets = vec![[0.0; 3]; g.n_joints()];
        for j in 0..g.n_joints() {
            if g.parents()[j].is_none() {
                continue;
            }
            let name = &g.names()[j];
            let dir = match name.as_str() {
                "head" if has_nose => {
                    let v: [f64; 3] = [0.0, 1.0, -0.3];
                    let n = (1.09f64).sqrt();
                    v.map(|x| x / n)
                }
                "head" => [0.0, 1.0, 0.0],
                other => {
                    rest_direction(other).ok_or_else(|| Error::Data(format!("no kinematic rule for joint {other}")))?
                }
            };
            let len = *lengths.get(name).ok_or_else(|| Error::Data(format!("no bone length for joint {name}")))?;
            if !(len > 0.0) {
                return Err(Error::Config(format!("bone length {len} for {name} must be positive")));
            }
            offsets[j] = dir.map(|d| d * len);
        }
        Ok(Self { parents: g.parents().to_vec(), order: g.topological_order(), names: g.names().to_vec(), offsets })
    }

    fn local_rotation(&self, j: usize, a: &Articulation) -> Mat3 {
        let side = |name: &str| usize::from(name.starts_with("l_"));
        let name = self.names[j].as_str();
        match name {
            _ if self.parents[j].is_none() => rot_y(a.yaw),
            "spine" => rot_x(a.spine_lean),
            "r_hip" | "l_hip" => rot_x(-a.hip_flex[side(name)]),
            "r_knee" | "l_knee" => rot_x(a.knee_flex[side(name)]),
            "r_shoulder" | "l_shoulder" => {
                let s = side(name);
                let sign = if s == 1 { 1.0 } else { -1.0 };
                mul(&rot_z(sign * a.shoulder_abduct[s]), &rot_x(-a.shoulder_raise[s]))
            }
            "r_elbow" | "l_elbow" => rot_x(-a.elbow_flex[side(name)]),
            _ => IDENTITY,
        }
    }

    /// Longest chain of bones from the root, an upper bound on any joint's
    /// distance from it.
    pub fn extent(&self) -> f64 {
        let mut reach = vec![0.0; self.parents.len()];
        for &j in &self.order {
            if let Some(p) = self.parents[j] {
                let o = self.offsets[j];
                reach[j] = reach[p] + (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
            }
        }
        reach.into_iter().fold(0.0, f64::max)
    }

    /// Joint positions with the root at the origin.
    pub fn solve(&self, a: &Articulation) -> Vec<[f64; 3]> {
        let n = self.parents.len();
        let mut pos = vec![[0.0; 3]; n];
        let mut frame = vec![IDENTITY; n];
        for &j in &self.order {
            let local = self.local_rotation(j, a);
            match self.parents[j] {
                None => frame[j] = local,
                Some(p) => {
                    let off = apply(&frame[p], self.offsets[j]);
                    pos[j] = [0, 1, 2].map(|c| pos[p][c] + off[c]);
                    frame[j] = mul(&frame[p], &local);
                }
            }
        }
        pos
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub id: String,
    /// Normalized image coordinates.
    pub joints2d: Vec<[f64; 2]>,
    /// Camera frame, millimeters.
    pub joints3d: Vec<[f64; 3]>,
    pub action_tag: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub skeleton: String,
    pub n_joints: usize,
    pub camera: Option<Camera>,
    /// Free-form record of how the file was produced, kept in the header.
    pub provenance: Option<serde_json::Value>,
    pub records: Vec<PoseRecord>,
}

fn draw(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..=range[1])
    } else {
        range[0]
    }
}

fn clamp(v: f64, range: [f64; 2]) -> f64 {
    v.clamp(range[0].min(range[1]), range[0].max(range[1]))
}

/// Joint angles for one of the motion families.
pub fn sample_action(action: &str, r: &AngleRanges, rng: &mut ChaCha8Rng) -> Result<Articulation> {
    let jitter = |rng: &mut ChaCha8Rng, s: f64| s * rng.sample::<f64, _>(StandardNormal);
    let mut a = Articulation { yaw: draw(rng, r.yaw), ..Articulation::default() };
    match action {
        "walk" => {
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(15.0..35.0);
            let sw = phase.sin();
            a.hip_flex = [amp * sw, -amp * sw];
            a.knee_flex = [
                5.0 + 40.0 * (phase + 1.0).sin().max(0.0),
                5.0 + 40.0 * (phase + 1.0 + std::f64::consts::PI).sin().max(0.0),
            ];
            a.shoulder_raise = [-0.7 * amp * sw, 0.7 * amp * sw];
            a.shoulder_abduct = [rng.random_range(5.0..15.0), rng.random_range(5.0..15.0)];
            a.elbow_flex = [rng.random_range(10.0..40.0), rng.random_range(10.0..40.0)];
            a.spine_lean = jitter(rng, 3.0);
        }
        "sit" => {
            let hip = rng.random_range(60.0..100.0);
            let knee = rng.random_range(60.0..100.0);
            a.hip_flex = [hip + jitter(rng, 5.0), hip + jitter(rng, 5.0)];
            a.knee_flex = [knee + jitter(rng, 5.0), knee + jitter(rng, 5.0)];
            a.spine_lean = rng.random_range(0.0..20.0);
            a.shoulder_raise = [rng.random_range(0.0..50.0), rng.random_range(0.0..50.0)];
            a.shoulder_abduct = [rng.random_range(0.0..20.0), rng.random_range(0.0..20.0)];
            a.elbow_flex = [rng.random_range(20.0..90.0), rng.random_range(20.0..90.0)];
        }
        "reach" => {
            let both = rng.random_bool(0.4);
            let side = rng.random_range(0..2);
            for s in 0..2 {
                if both || s == side {
                    a.shoulder_raise[s] = rng.random_range(30.0..160.0);
                    a.elbow_flex[s] = rng.random_range(0.0..60.0);
                } else {
                    a.shoulder_raise[s] = rng.random_range(-10.0..30.0);
                    a.elbow_flex[s] = rng.random_range(0.0..40.0);
                }
                a.shoulder_abduct[s] = rng.random_range(0.0..60.0);
            }
            a.spine_lean = rng.random_range(0.0..30.0);
            a.hip_flex = [jitter(rng, 8.0), jitter(rng, 8.0)];
            a.knee_flex = [rng.random_range(0.0..20.0), rng.random_range(0.0..20.0)];
        }
        other => return Err(Error::Config(format!("unknown action {other}"))),
    }
    a.spine_lean = clamp(a.spine_lean, r.spine_lean);
    for s in 0..2 {
        a.hip_flex[s] = clamp(a.hip_flex[s], r.hip_flex);
        a.knee_flex[s] = clamp(a.knee_flex[s], r.knee_flex);
        a.shoulder_raise[s] = clamp(a.shoulder_raise[s], r.shoulder_raise);
        a.shoulder_abduct[s] = clamp(a.shoulder_abduct[s], r.shoulder_abduct);
        a.elbow_flex[s] = clamp(a.elbow_flex[s], r.elbow_flex);
    }
    Ok(a)
}

/// Body frame (y up, facing +z) to camera frame (y down) at `depth`.
pub fn to_camera(body: &[[f64; 3]], depth: f64) -> Vec<[f64; 3]> {
    body.iter().map(|p| [p[0], -p[1], depth - p[2]]).collect()
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    let skel = Skeleton::by_name(&cfg.skeleton)?;
    let kin = Kinematics::new(&skel, &cfg.bone_lengths)?;
    if cfg.actions.is_empty() {
        return Err(Error::Config("no actions to sample".into()));
    }
    if !(cfg.distance[0] > 0.0 && cfg.distance[1] >= cfg.distance[0]) {
        return Err(Error::Config(format!("bad camera distance range {:?}", cfg.distance)));
    }
    let reach = kin.extent();
    if cfg.distance[0] <= reach {
        return Err(Error::Config(format!(
            "camera distance {} does not clear the skeleton extent {reach}",
            cfg.distance[0]
        )));
    }
    if !(cfg.jitter_px >= 0.0) {
        return Err(Error::Config(format!("jitter {} must be non-negative", cfg.jitter_px)));
    }
    let cam = cfg.camera;
    let mut records = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, i as u64));
        let action = &cfg.actions[rng.random_range(0..cfg.actions.len())];
        let mut attempts = 0;
        let (joints3d, pixels) = loop {
            let art = sample_action(action, &cfg.angles, &mut rng)?;
            let depth = draw(&mut rng, cfg.distance);
            let j3 = to_camera(&kin.solve(&art), depth);
            let px: Vec<[f64; 2]> = j3.iter().map(|p| cam.project(*p)).collect();
            if px.iter().all(|p| cam.contains(*p)) {
                break (j3, px);
            }
            attempts += 1;
            if attempts >= 100 {
                return Err(Error::Config("poses keep leaving the image; move the camera back".into()));
            }
        };
        let noisy: Vec<[f64; 2]> = pixels
            .iter()
            .map(|p| {
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                [p[0] + cfg.jitter_px * nx, p[1] + cfg.jitter_px * ny]
            })
            .collect();
        records.push(PoseRecord {
            id: format!("{i:06}"),
            joints2d: normalize_2d(&noisy, cam.width, cam.height),
            joints3d,
            action_tag: action.clone(),
        });
    }
    Ok(Dataset {
        skeleton: cfg.skeleton.clone(),
        n_joints: skel.n_joints(),
        camera: Some(cam),
        provenance: None,
        records,
    })
}

#[derive(Serialize, Deserialize)]
struct Units {
    joints2d: String,
    joints3d: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    skeleton: String,
    n_joints: usize,
    units: Units,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    camera: Option<Camera>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

impl Dataset {
    pub fn new(skeleton: &str, n_joints: usize) -> Self {
        Self { skeleton: skeleton.into(), n_joints, camera: None, provenance: None, records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self { records: idx.iter().map(|&i| self.records[i].clone()).collect(), ..self.clone_header() }
    }

    fn clone_header(&self) -> Self {
        Self {
            skeleton: self.skeleton.clone(),
            n_joints: self.n_joints,
            camera: self.camera,
            provenance: self.provenance.clone(),
            records: Vec::new(),
        }
    }

    /// Deterministic shuffle, then the first `train_fraction` for training.
    pub fn split(&self, seed: u64, train_fraction: f64) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        let cut = cut.min(self.len());
        (self.subset(&idx[..cut]), self.subset(&idx[cut..]))
    }

    /// `[B, N, 2]` normalized 2D inputs.
    pub fn inputs(&self) -> Tensor {
        let data = self.records.iter().flat_map(|r| r.joints2d.iter().flatten().copied()).collect();
        Tensor::new(vec![self.len(), self.n_joints, 2], data).expect("record sizes are validated")
    }

    /// `[B, N, 3]` camera-frame millimeters.
    pub fn joints3d_mm(&self) -> Tensor {
        let data = self.records.iter().flat_map(|r| r.joints3d.iter().flatten().copied()).collect();
        Tensor::new(vec![self.len(), self.n_joints, 3], data).expect("record sizes are validated")
    }

    /// `[B, N, 3]` root-relative meters, the model's output space.
    pub fn targets(&self, root: usize) -> Tensor {
        let n = self.n_joints;
        let mut t = self.joints3d_mm();
        for pose in t.data_mut().chunks_mut(n * 3) {
            let r = [pose[root * 3], pose[root * 3 + 1], pose[root * 3 + 2]];
            for (i, v) in pose.iter_mut().enumerate() {
                *v = (*v - r[i % 3]) / 1000.0;
            }
        }
        t
    }

    pub fn action_tags(&self) -> Vec<String> {
        self.records.iter().map(|r| r.action_tag.clone()).collect()
    }

    pub fn to_writer<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            skeleton: self.skeleton.clone(),
            n_joints: self.n_joints,
            units: Units { joints2d: "normalized".into(), joints3d: "mm".into() },
            camera: self.camera,
            provenance: self.provenance.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for r in &self.records {
            writeln!(w, "{}", serde_json::to_string(r)?)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let first = lines.next().ok_or_else(|| Error::Parse { line: 1, msg: "missing header".into() })??;
        let header: Header =
            serde_json::from_str(&first).map_err(|e| Error::Parse { line: 1, msg: format!("bad header: {e}") })?;
        if header.format != FORMAT {
            return Err(Error::Parse { line: 1, msg: format!("unknown format {}", header.format) });
        }
        let skel = Skeleton::by_name(&header.skeleton).map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
        if skel.n_joints() != header.n_joints {
            return Err(Error::Parse {
                line: 1,
                msg: format!(
                    "skeleton {} has {} joints, header says {}",
                    header.skeleton,
                    skel.n_joints(),
                    header.n_joints
                ),
            });
        }
        let mut ds = Dataset {
            skeleton: header.skeleton,
            n_joints: header.n_joints,
            camera: header.camera,
            provenance: header.provenance,
            records: Vec::new(),
        };
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PoseRecord =
                serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
            if rec.joints2d.len() != ds.n_joints || rec.joints3d.len() != ds.n_joints {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!(
                        "record {} has {}/{} joints, expected {}",
                        rec.id,
                        rec.joints2d.len(),
                        rec.joints3d.len(),
                        ds.n_joints
                    ),
                });
            }
            ds.records.push(rec);
        }
        Ok(ds)
    }
}

pub fn write_records(path: &Path, ds: &Dataset) -> Result<()> {
    ds.to_writer(std::io::BufWriter::new(fs::File::create(path)?))
}

pub fn read_records(path: &Path) -> Result<Dataset> {
    Dataset::from_reader(fs::File::open(path)?)
}

/// Affine least-squares map from flattened 2D inputs to flattened 3D targets.
#[derive(Clone, Debug)]
pub struct LinearBaseline {
    weights: DMatrix<f64>,
    n_joints: usize,
}

impl LinearBaseline {
    pub fn fit(inputs: &Tensor, targets: &Tensor) -> Result<Self> {
        let (b, n) = (inputs.shape()[0], inputs.shape()[1]);
        if targets.shape() != [b, n, 3] || inputs.shape() != [b, n, 2] {
            return Err(Error::shape("linear_baseline", inputs.shape(), targets.shape()));
        }
        if b == 0 {
            return Err(Error::Empty("no samples to fit".into()));
        }
        let x = Self::design(inputs);
        let y = DMatrix::from_row_slice(b, 3 * n, targets.data());
        let weights =
            x.svd(true, true).solve(&y, 1e-12).map_err(|e| Error::Numeric(format!("least squares failed: {e}")))?;
        Ok(Self { weights, n_joints: n })
    }

    fn design(inputs: &Tensor) -> DMatrix<f64> {
        let (b, n) = (inputs.shape()[0], inputs.shape()[1]);
        DMatrix::from_fn(b, 2 * n + 1, |r, c| if c == 2 * n { 1.0 } else { inputs.data()[r * 2 * n + c] })
    }

    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        let (b, n) = (inputs.shape()[0], inputs.shape()[1]);
        if n != self.n_joints || inputs.shape() != [b, n, 2] {
            return Err(Error::shape("linear_baseline", inputs.shape(), &[b, self.n_joints, 2]));
        }
        let y = Self::design(inputs) * &self.weights;
        let data = (0..b).flat_map(|r| (0..3 * n).map(move |c| (r, c))).map(|(r, c)| y[(r, c)]).collect();
        Tensor::new(vec![b, n, 3], data)
    }
}
