//! Pose datasets: the sample type, the line-oriented file format, 2D/3D
//! normalization helpers and a synthetic generator.
//!
//! File layout:
//!
//! ```text
//! GRFD v1 j=16 skeleton=human16
//! <id>,x0,y0,...,x15,y15,X0,Y0,Z0,...,X15,Y15,Z15
//! ```
//!
//! The id field may carry optional tags as `id|subject|action`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::SkeletonGraph;
use crate::rng::{self, stream};

pub const FORMAT_TAG: &str = "GRFD v1";

/// One 2D input / 3D target pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSample {
    pub id: String,
    /// `j x 2`, normalized image coordinates.
    pub joints_2d: Vec<f64>,
    /// `j x 3`, millimeters.
    pub joints_3d: Vec<f64>,
    pub subject: Option<String>,
    pub action: Option<String>,
}

impl PoseSample {
    pub fn joint_count(&self) -> usize {
        self.joints_2d.len() / 2
    }

    fn validate(&self, j: usize) -> std::result::Result<(), String> {
        if self.joints_2d.len() != 2 * j || self.joints_3d.len() != 3 * j {
            return Err(format!(
                "expected {} values for {j} joints, found {}",
                5 * j,
                self.joints_2d.len() + self.joints_3d.len()
            ));
        }
        if !self
            .joints_2d
            .iter()
            .chain(&self.joints_3d)
            .all(|v| v.is_finite())
        {
            return Err("non-finite coordinate".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub skeleton: SkeletonGraph,
    pub samples: Vec<PoseSample>,
    pub split: Split,
}

impl Dataset {
    pub fn new(skeleton: SkeletonGraph, samples: Vec<PoseSample>) -> Result<Self> {
        let j = skeleton.joint_count();
        for s in &samples {
            s.validate(j)
                .map_err(|m| Error::Config(format!("sample `{}`: {m}", s.id)))?;
        }
        Ok(Self {
            skeleton,
            samples,
            split: Split::All,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.skeleton.joint_count()
    }

    /// Gathers `[n, j, 2]` inputs and `[n, j, 3]` targets.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let j = self.joint_count();
        let mut x = Vec::with_capacity(indices.len() * j * 2);
        let mut y = Vec::with_capacity(indices.len() * j * 3);
        for &i in indices {
            x.extend_from_slice(&self.samples[i].joints_2d);
            y.extend_from_slice(&self.samples[i].joints_3d);
        }
        (
            Tensor::new(vec![indices.len(), j, 2], x).expect("validated sample sizes"),
            Tensor::new(vec![indices.len(), j, 3], y).expect("validated sample sizes"),
        )
    }

    pub fn all(&self) -> (Tensor, Tensor) {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Random disjoint train/eval partition with `n_eval` evaluation samples.
    pub fn split_holdout(&self, n_eval: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if n_eval >= self.len() {
            return Err(Error::Config(format!(
                "cannot hold out {n_eval} of {} samples",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::seeded(seed, stream::SPLIT));
        let (eval_idx, train_idx) = order.split_at(n_eval);
        let pick = |idx: &[usize], split| {
            let mut idx = idx.to_vec();
            idx.sort_unstable();
            Dataset {
                skeleton: self.skeleton.clone(),
                samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
                split,
            }
        };
        Ok((pick(train_idx, Split::Train), pick(eval_idx, Split::Eval)))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{FORMAT_TAG} j={} skeleton={}\n",
            self.joint_count(),
            self.skeleton.name()
        );
        for s in &self.samples {
            out.push_str(&s.id);
            if s.subject.is_some() || s.action.is_some() {
                let _ = write!(
                    out,
                    "|{}|{}",
                    s.subject.as_deref().unwrap_or(""),
                    s.action.as_deref().unwrap_or("")
                );
            }
            for v in s.joints_2d.iter().chain(&s.joints_3d) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Parses dataset text, validating every record against `skeleton`.
    pub fn parse(path: &Path, text: &str, skeleton: &SkeletonGraph) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let Some((_, header)) = lines.next() else {
            return Err(Error::NoSamples {
                path: path.to_path_buf(),
            });
        };
        let rest = header
            .strip_prefix(FORMAT_TAG)
            .ok_or_else(|| err(1, format!("expected header starting with `{FORMAT_TAG}`")))?;
        let mut header_j = None;
        for field in rest.split_whitespace() {
            if let Some(v) = field.strip_prefix("j=") {
                header_j = Some(
                    v.parse::<usize>()
                        .map_err(|_| err(1, format!("bad joint count `{v}`")))?,
                );
            }
        }
        let j = skeleton.joint_count();
        match header_j {
            Some(hj) if hj != j => {
                return Err(err(
                    1,
                    format!("header has j={hj} but skeleton has {j} joints"),
                ))
            }
            None => return Err(err(1, "header is missing `j=`".into())),
            _ => {}
        }

        let mut samples = Vec::new();
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let id_field = fields.next().unwrap_or_default();
            let mut tags = id_field.split('|');
            let id = tags.next().unwrap_or_default().to_string();
            let tag = |t: Option<&str>| t.filter(|s| !s.is_empty()).map(str::to_string);
            let subject = tag(tags.next());
            let action = tag(tags.next());
            let values = fields
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| err(ln, format!("`{t}` is not a number")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != 5 * j {
                return Err(err(
                    ln,
                    format!(
                        "record has {} values ({} joints), skeleton `{}` needs {} ({j} joints)",
                        values.len(),
                        values.len() as f64 / 5.0,
                        skeleton.name(),
                        5 * j
                    ),
                ));
            }
            let sample = PoseSample {
                id,
                joints_2d: values[..2 * j].to_vec(),
                joints_3d: values[2 * j..].to_vec(),
                subject,
                action,
            };
            sample.validate(j).map_err(|m| err(ln, m))?;
            samples.push(sample);
        }
        if samples.is_empty() {
            return Err(Error::NoSamples {
                path: path.to_path_buf(),
            });
        }
        Ok(Self {
            skeleton: skeleton.clone(),
            samples,
            split: Split::All,
        })
    }

    pub fn load(path: &Path, skeleton: &SkeletonGraph) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(path, &text, skeleton)
    }
}

/// Reads the `j=` and `skeleton=` fields of a dataset header.
pub fn read_header(path: &Path) -> Result<(usize, String)> {
    let text = std::fs::read_to_string(path)?;
    let header = text.lines().next().unwrap_or_default();
    let mut j = None;
    let mut name = String::new();
    for field in header.split_whitespace() {
        if let Some(v) = field.strip_prefix("j=") {
            j = v.parse().ok();
        } else if let Some(v) = field.strip_prefix("skeleton=") {
            name = v.to_string();
        }
    }
    match j {
        Some(j) if header.starts_with(FORMAT_TAG) => Ok((j, name)),
        _ => Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected `{FORMAT_TAG} j=<j> skeleton=<name>`"),
        }),
    }
}

/// Maps pixel coordinates (flat `x, y` pairs) to `((2x - w) / w, (2y - h) / w)`.
pub fn normalize_2d(pixels: &[f64], width: f64, height: f64) -> Vec<f64> {
    pixels
        .chunks(2)
        .flat_map(|p| [(2.0 * p[0] - width) / width, (2.0 * p[1] - height) / width])
        .collect()
}

/// Inverse of [`normalize_2d`].
pub fn denormalize_2d(normalized: &[f64], width: f64, height: f64) -> Vec<f64> {
    normalized
        .chunks(2)
        .flat_map(|p| [(p[0] * width + width) / 2.0, (p[1] * width + height) / 2.0])
        .collect()
}

/// Subtracts the root joint from every joint (flat `x, y, z` triples).
pub fn root_relative_3d(joints: &[f64], root: usize) -> Vec<f64> {
    let r = [joints[3 * root], joints[3 * root + 1], joints[3 * root + 2]];
    joints
        .chunks(3)
        .flat_map(|p| [p[0] - r[0], p[1] - r[1], p[2] - r[2]])
        .collect()
}

/// Pinhole camera looking down +Z, principal point at the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticCamera {
    /// Focal length in pixels.
    pub focal: f64,
    /// Distance of the root joint along the optical axis, millimeters.
    pub depth_mm: f64,
    pub image_width: f64,
    pub image_height: f64,
}

impl Default for SyntheticCamera {
    fn default() -> Self {
        Self {
            focal: 1000.0,
            depth_mm: 5000.0,
            image_width: 1000.0,
            image_height: 1000.0,
        }
    }
}

impl SyntheticCamera {
    /// Pixel coordinates of camera-frame points.
    pub fn project(&self, camera_points: &[f64]) -> Vec<f64> {
        camera_points
            .chunks(3)
            .flat_map(|p| {
                [
                    self.focal * p[0] / p[2] + self.image_width / 2.0,
                    self.focal * p[1] / p[2] + self.image_height / 2.0,
                ]
            })
            .collect()
    }
}

/// Largest random joint rotation, radians.
const MAX_JOINT_ANGLE: f64 = 0.8;
/// Largest global yaw of the whole body, radians.
const MAX_YAW: f64 = std::f64::consts::FRAC_PI_3;
const MAX_TILT: f64 = 0.15;

/// Bone vectors (child minus parent) in the rest pose, body frame, y up.
fn rest_offsets(skeleton: &SkeletonGraph, parents: &[Option<usize>]) -> Vec<Vector3<f64>> {
    let j = skeleton.joint_count();
    let human16 = *skeleton == SkeletonGraph::human16();
    let hand21 = *skeleton == SkeletonGraph::hand21();
    (0..j)
        .map(|i| {
            if human16 {
                let o: [f64; 3] = [
                    [0.0, 0.0, 0.0],
                    [-130.0, 0.0, 0.0],
                    [0.0, -440.0, 0.0],
                    [0.0, -440.0, 0.0],
                    [130.0, 0.0, 0.0],
                    [0.0, -440.0, 0.0],
                    [0.0, -440.0, 0.0],
                    [0.0, 230.0, 0.0],
                    [0.0, 250.0, 0.0],
                    [0.0, 200.0, 0.0],
                    [150.0, -20.0, 0.0],
                    [0.0, -280.0, 0.0],
                    [0.0, -250.0, 0.0],
                    [-150.0, -20.0, 0.0],
                    [0.0, -280.0, 0.0],
                    [0.0, -250.0, 0.0],
                ][i];
                Vector3::from(o)
            } else if hand21 {
                if i == 0 {
                    return Vector3::zeros();
                }
                let finger = (i - 1) / 4;
                let seg = (i - 1) % 4;
                if finger == 0 {
                    let thumb = [
                        [-30.0, 30.0, 0.0],
                        [-20.0, 25.0, 0.0],
                        [-15.0, 20.0, 0.0],
                        [-12.0, 15.0, 0.0],
                    ];
                    Vector3::from(thumb[seg])
                } else {
                    let base_x = [-20.0, 0.0, 20.0, 38.0][finger - 1];
                    let lengths = [90.0, 40.0, 28.0, 22.0];
                    if seg == 0 {
                        Vector3::new(base_x, lengths[0], 0.0)
                    } else {
                        Vector3::new(0.0, lengths[seg], 0.0)
                    }
                }
            } else if parents[i].is_none() {
                Vector3::zeros()
            } else {
                // Deterministic spread of 100 mm bones for custom trees.
                let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                let theta = golden * i as f64;
                let z = 1.0 - 2.0 * ((i as f64 + 0.5) / j as f64);
                let r = (1.0 - z * z).sqrt();
                Vector3::new(r * theta.cos(), z, r * theta.sin()) * 100.0
            }
        })
        .collect()
}

fn random_rotation<R: Rng>(rng: &mut R, max_angle: f64) -> Matrix3<f64> {
    let axis = loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break Unit::new_normalize(v);
        }
    };
    let angle = rng.gen_range(0.0..max_angle);
    *Rotation3::from_axis_angle(&axis, angle).matrix()
}

/// Camera-frame 3D poses (flat `x, y, z` per joint, millimeters) with the
/// root on the optical axis at `camera.depth_mm`. Requires a tree skeleton.
pub fn synthesize_camera_poses(
    skeleton: &SkeletonGraph,
    n_samples: usize,
    seed: u64,
    camera: &SyntheticCamera,
) -> Result<Vec<Vec<f64>>> {
    let j = skeleton.joint_count();
    let parents = skeleton.parents();
    let root = skeleton.root_index();
    let connected = parents
        .iter()
        .enumerate()
        .all(|(i, p)| i == root || p.is_some());
    if !connected || skeleton.edges().len() + 1 != j {
        return Err(Error::Config(format!(
            "synthetic poses need a tree skeleton; `{}` is not one",
            skeleton.name()
        )));
    }
    // Parents before children.
    let order: Vec<usize> = {
        let d = skeleton.distances_from(root);
        let mut o: Vec<usize> = (0..j).collect();
        o.sort_by_key(|&i| d[i]);
        o
    };
    let offsets = rest_offsets(skeleton, &parents);
    let mut rng = rng::seeded(seed, stream::SYNTHETIC);
    let mut poses = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let yaw = Rotation3::from_axis_angle(&Vector3::y_axis(), rng.gen_range(-MAX_YAW..MAX_YAW));
        let tilt =
            Rotation3::from_axis_angle(&Vector3::x_axis(), rng.gen_range(-MAX_TILT..MAX_TILT))
                * Rotation3::from_axis_angle(
                    &Vector3::z_axis(),
                    rng.gen_range(-MAX_TILT..MAX_TILT),
                );
        let mut global = vec![Matrix3::identity(); j];
        let mut pos = vec![Vector3::zeros(); j];
        global[root] = *(yaw * tilt).matrix();
        for &i in &order {
            if let Some(p) = parents[i] {
                let g = global[p] * random_rotation(&mut rng, MAX_JOINT_ANGLE);
                pos[i] = pos[p] + g * offsets[i];
                global[i] = g;
            }
        }
        // Body frame (y up, z toward the camera) to camera frame (y down, z forward).
        let cam: Vec<f64> = pos
            .iter()
            .flat_map(|p| [p.x, -p.y, camera.depth_mm - p.z])
            .collect();
        poses.push(cam);
    }
    Ok(poses)
}

/// Articulated poses projected through `camera`. The 2D inputs are the
/// normalized pixel coordinates; 3D targets are root-relative millimeters.
pub fn generate_synthetic(
    skeleton: &SkeletonGraph,
    n_samples: usize,
    seed: u64,
    camera: &SyntheticCamera,
) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let poses = synthesize_camera_poses(skeleton, n_samples, seed, camera)?;
    let root = skeleton.root_index();
    let samples = poses
        .iter()
        .enumerate()
        .map(|(i, cam)| PoseSample {
            id: format!("syn{i:06}"),
            joints_2d: normalize_2d(
                &camera.project(cam),
                camera.image_width,
                camera.image_height,
            ),
            joints_3d: root_relative_3d(cam, root),
            subject: None,
            action: None,
        })
        .collect();
    Dataset::new(skeleton.clone(), samples)
}
