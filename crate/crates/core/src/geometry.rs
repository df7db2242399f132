//! RGB-D back-projection, voxelization and per-entity 3D trajectories.
//!
//! Camera convention: pixel `(u = col, v = row)` with depth `d` maps to the
//! camera-space point `((u - cx) d / fx, (v - cy) d / fy, d)`; `cam_to_world`
//! then carries it into the world frame.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EntityNode, Tube};

/// Default maximum retained depth in meters.
pub const DEFAULT_LAMBDA: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (u32, u32),
        actual: (u32, u32),
    },
    #[error("depth threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("voxel size must be positive, got {0}")]
    InvalidVoxelSize(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("not a rigid transform: {0}")]
    NotRigid(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntrinsicsParts")]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Deserialize)]
struct IntrinsicsParts {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

impl TryFrom<IntrinsicsParts> for CameraIntrinsics {
    type Error = GeometryError;

    fn try_from(p: IntrinsicsParts) -> Result<Self, GeometryError> {
        Self::new(p.fx, p.fy, p.cx, p.cy, p.width, p.height)
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive"));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(GeometryError::InvalidIntrinsics("principal point outside the image"));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Camera-space point for pixel `(col, row)` at depth `d`.
    pub fn back_project(&self, col: f64, row: f64, depth: f64) -> Vector3<f64> {
        Vector3::new((col - self.cx) * depth / self.fx, (row - self.cy) * depth / self.fy, depth)
    }

    /// `(col, row, depth)` of a camera-space point.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy, p.z)
    }
}

/// Rigid 4×4 homogeneous transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform(Matrix4<f64>);

impl RigidTransform {
    pub const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    /// From 16 row-major entries.
    pub fn from_row_major(m: [f64; 16]) -> Result<Self, GeometryError> {
        Self::from_matrix(Matrix4::from_row_slice(&m))
    }

    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self, GeometryError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NotRigid("non-finite entry"));
        }
        if m.fixed_view::<1, 4>(3, 0) != Matrix4::<f64>::identity().fixed_view::<1, 4>(3, 0) {
            return Err(GeometryError::NotRigid("bottom row must be (0, 0, 0, 1)"));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > Self::ORTHONORMAL_TOLERANCE {
            return Err(GeometryError::NotRigid("rotation block is not orthonormal"));
        }
        Ok(Self(m))
    }

    pub fn from_rotation_translation(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self::from_matrix(m)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.0[(r, c)];
            }
        }
        out
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-rt * self.translation()));
        Self(m)
    }

    pub fn is_identity(&self) -> bool {
        self.0 == Matrix4::identity()
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

/// Depth map in meters; 0 marks a missing return.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub height: u32,
    pub width: u32,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn new(height: u32, width: u32, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height as usize * width as usize, "depth buffer size");
        Self { height, width, data }
    }

    pub fn get(&self, row: u32, col: u32) -> f64 {
        self.data[row as usize * self.width as usize + col as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: u32,
    pub width: u32,
    pub data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(height: u32, width: u32, data: Vec<[u8; 3]>) -> Self {
        assert_eq!(data.len(), height as usize * width as usize, "rgb buffer size");
        Self { height, width, data }
    }

    pub fn filled(height: u32, width: u32, color: [u8; 3]) -> Self {
        Self::new(height, width, vec![color; height as usize * width as usize])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColoredPoint {
    pub position: [f64; 3],
    pub color: [u8; 3],
}

/// Colored point cloud of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloudFrame {
    pub points: Vec<ColoredPoint>,
    /// `(row, col)` each point came from, when produced from a depth map.
    pub source_pixels: Option<Vec<(u32, u32)>>,
}

impl PointCloudFrame {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, transform: &RigidTransform) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| {
                let q = transform.apply(&Vector3::from(p.position));
                ColoredPoint {
                    position: [q.x, q.y, q.z],
                    color: p.color,
                }
            })
            .collect();
        Self {
            points,
            source_pixels: self.source_pixels.clone(),
        }
    }
}

/// Back-projects every pixel with depth in `(0, lambda]` into a colored world
/// point, in row-major scan order. `lambda` may be `+inf`.
pub fn depth_frame_to_points(
    depth: &DepthImage,
    rgb: &RgbImage,
    intrinsics: &CameraIntrinsics,
    cam_to_world: &RigidTransform,
    lambda: f64,
) -> Result<PointCloudFrame, GeometryError> {
    let expected = (intrinsics.height, intrinsics.width);
    for actual in [(depth.height, depth.width), (rgb.height, rgb.width)] {
        if actual != expected {
            return Err(GeometryError::DimensionMismatch { expected, actual });
        }
    }
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(GeometryError::InvalidThreshold(lambda));
    }
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    let rotation = cam_to_world.rotation();
    let translation = cam_to_world.translation();
    for row in 0..depth.height {
        for col in 0..depth.width {
            let i = row as usize * depth.width as usize + col as usize;
            let d = depth.data[i];
            if !(d > 0.0 && d <= lambda) {
                continue;
            }
            let world = rotation * intrinsics.back_project(col as f64, row as f64, d) + translation;
            points.push(ColoredPoint {
                position: [world.x, world.y, world.z],
                color: rgb.data[i],
            });
            pixels.push((row, col));
        }
    }
    Ok(PointCloudFrame {
        points,
        source_pixels: Some(pixels),
    })
}

/// Pixel coordinates `(col, row)` and camera depth of a world point.
pub fn world_to_pixel(
    point: &Vector3<f64>,
    intrinsics: &CameraIntrinsics,
    cam_to_world: &RigidTransform,
) -> (f64, f64, f64) {
    intrinsics.project(&cam_to_world.inverse().apply(point))
}

pub type Voxel = [i64; 3];

/// Occupied voxels `floor(p / voxel_size)`, deduplicated and sorted.
pub fn voxelize(frame: &PointCloudFrame, voxel_size: f64) -> Result<Vec<Voxel>, GeometryError> {
    voxelize_points(frame.points.iter().map(|p| p.position), voxel_size)
}

pub fn voxelize_points(
    points: impl IntoIterator<Item = [f64; 3]>,
    voxel_size: f64,
) -> Result<Vec<Voxel>, GeometryError> {
    if voxel_size.is_nan() || voxel_size <= 0.0 {
        return Err(GeometryError::InvalidVoxelSize(voxel_size));
    }
    let set: BTreeSet<Voxel> = points
        .into_iter()
        .map(|p| p.map(|c| (c / voxel_size).floor() as i64))
        .collect();
    Ok(set.into_iter().collect())
}

/// Per-frame depth and pose for an RGB-D video.
#[derive(Debug, Clone)]
pub struct DepthSequence {
    pub intrinsics: CameraIntrinsics,
    pub frames: BTreeMap<u32, (DepthImage, RigidTransform)>,
}

/// Frame data a tube can be lifted into 3D against.
#[derive(Debug, Clone, Copy)]
pub enum FrameSource<'a> {
    Depth(&'a DepthSequence),
    Points(&'a BTreeMap<u32, PointCloudFrame>),
}

/// 3D points covered by the entity's tube, per frame. RGB-D mode keeps only
/// mask pixels with positive depth; frames without any point are omitted.
pub fn tube_points(entity: &EntityNode, source: FrameSource<'_>) -> BTreeMap<u32, Vec<[f64; 3]>> {
    let mut out = BTreeMap::new();
    match (&entity.tube, source) {
        (Tube::Mask(tube), FrameSource::Depth(seq)) => {
            for (&frame, mask) in &tube.frames {
                let Some((depth, pose)) = seq.frames.get(&frame) else {
                    continue;
                };
                if mask.shape() != (depth.height, depth.width) {
                    continue;
                }
                let width = depth.width as u64;
                let pts: Vec<[f64; 3]> = mask
                    .pixel_indices()
                    .filter_map(|idx| {
                        let d = depth.data[idx as usize];
                        (d > 0.0).then(|| {
                            let (row, col) = ((idx / width) as f64, (idx % width) as f64);
                            let p = pose.apply(&seq.intrinsics.back_project(col, row, d));
                            [p.x, p.y, p.z]
                        })
                    })
                    .collect();
                if !pts.is_empty() {
                    out.insert(frame, pts);
                }
            }
        }
        (Tube::Points(tube), FrameSource::Points(clouds)) => {
            for (&frame, idx) in &tube.frames {
                let Some(cloud) = clouds.get(&frame) else {
                    continue;
                };
                let pts: Vec<[f64; 3]> = idx
                    .iter()
                    .filter_map(|&i| cloud.points.get(i as usize).map(|p| p.position))
                    .collect();
                if !pts.is_empty() {
                    out.insert(frame, pts);
                }
            }
        }
        // A tube of the other modality has nothing to lift.
        _ => {}
    }
    out
}

pub fn centroid(points: &[[f64; 3]]) -> [f64; 3] {
    let n = points.len() as f64;
    let sum = points.iter().fold([0.0; 3], |acc, p| [acc[0] + p[0], acc[1] + p[1], acc[2] + p[2]]);
    sum.map(|s| s / n)
}

/// Per-frame centroid of the entity's 3D support.
pub fn tube_trajectory(entity: &EntityNode, source: FrameSource<'_>) -> BTreeMap<u32, [f64; 3]> {
    tube_points(entity, source)
        .into_iter()
        .map(|(f, pts)| (f, centroid(&pts)))
        .collect()
}
