//! Point-cloud primitives and rigid transforms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Orthonormality / determinant tolerance for rotation matrices.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid rotation matrix: {0}")]
    InvalidRotation(String),
    #[error("attribute channel '{name}' has {len} entries for {points} points")]
    AttributeLength {
        name: String,
        len: usize,
        points: usize,
    },
}

/// A 3D point in meters. Coordinates are expected to be finite; parsers
/// drop non-finite records before constructing one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn sub(&self, other: &Point3) -> [f64; 3] {
        [self.x - other.x, self.y - other.y, self.z - other.z]
    }

    pub fn add_scaled(&self, dir: &[f64; 3], s: f64) -> Point3 {
        Point3::new(self.x + dir[0] * s, self.y + dir[1] * s, self.z + dir[2] * s)
    }

    pub fn dist(&self, other: &Point3) -> f64 {
        let d = self.sub(other);
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

/// A sensor-stamped set of points with optional per-point scalar channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    /// Sensor center expressed in the cloud's own frame.
    pub sensor_origin: Point3,
    pub frame_id: String,
    /// Optional scalar channels (e.g. intensity), keyed by name. Each
    /// channel must have exactly one entry per point.
    pub attributes: BTreeMap<String, Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        PointCloud {
            points,
            sensor_origin: Point3::ORIGIN,
            frame_id: String::new(),
            attributes: BTreeMap::new(),
        }
    }

    pub fn with_origin(mut self, origin: Point3) -> Self {
        self.sensor_origin = origin;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks the channel-length invariant.
    pub fn validate(&self) -> Result<(), GeometryError> {
        for (name, chan) in &self.attributes {
            if chan.len() != self.points.len() {
                return Err(GeometryError::AttributeLength {
                    name: name.clone(),
                    len: chan.len(),
                    points: self.points.len(),
                });
            }
        }
        Ok(())
    }
}

/// A proper rigid motion: rotation plus translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    /// Row-major 3x3 rotation, orthonormal with determinant +1.
    pub rotation: [[f64; 3]; 3],
    /// Translation in meters.
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        RigidTransform {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rotation about +Z by `yaw` radians.
    pub fn yaw(yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        RigidTransform {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    /// Verifies R^T R = I and det(R) = +1 within [`ROTATION_TOL`].
    pub fn validate(&self) -> Result<(), GeometryError> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > ROTATION_TOL {
                    return Err(GeometryError::InvalidRotation(format!(
                        "R^T R deviates from identity at ({i},{j}) by {:.3e}",
                        (dot - expect).abs()
                    )));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation(format!(
                "det(R) = {det}, expected +1"
            )));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        let r = &self.rotation;
        let t = &self.translation;
        Point3::new(
            r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z + t[0],
            r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z + t[1],
            r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z + t[2],
        )
    }

    /// self ∘ other: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i][j] = (0..3)
                    .map(|k| self.rotation[i][k] * other.rotation[k][j])
                    .sum();
            }
        }
        let ot = Point3::new(
            other.translation[0],
            other.translation[1],
            other.translation[2],
        );
        let t = self.apply(&ot);
        RigidTransform {
            rotation,
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i][j] = self.rotation[j][i];
            }
        }
        let t = &self.translation;
        let translation = [
            -(rotation[0][0] * t[0] + rotation[0][1] * t[1] + rotation[0][2] * t[2]),
            -(rotation[1][0] * t[0] + rotation[1][1] * t[1] + rotation[1][2] * t[2]),
            -(rotation[2][0] * t[0] + rotation[2][1] * t[1] + rotation[2][2] * t[2]),
        ];
        RigidTransform {
            rotation,
            translation,
        }
    }
}

/// Applies a rigid transform to every point and the sensor origin.
/// Attribute channels are carried over untouched.
pub fn transform_cloud(
    cloud: &PointCloud,
    transform: &RigidTransform,
) -> Result<PointCloud, GeometryError> {
    transform.validate()?;
    Ok(PointCloud {
        points: cloud.points.iter().map(|p| transform.apply(p)).collect(),
        sensor_origin: transform.apply(&cloud.sensor_origin),
        frame_id: cloud.frame_id.clone(),
        attributes: cloud.attributes.clone(),
    })
}
