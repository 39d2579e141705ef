//! FMCW LiDAR point clouds and their on-disk formats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::geom::{vec3_dot, vec3_normalize, vec3_scale, vec3_sub, Vec3};

pub const LRPC_MAGIC: &[u8; 4] = b"LRPC";
pub const LRPC_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic, not an LRPC file")]
    BadMagic { path: String },
    #[error("{path}: unsupported LRPC version {0}", .version)]
    BadVersion { path: String, version: u32 },
}

fn io_err(path: &Path, source: std::io::Error) -> CloudError {
    CloudError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A single FMCW return: position, radial (Doppler) velocity, intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub position: Vec3,
    /// Radial velocity relative to the sensor, m/s; negative = approaching.
    pub radial_velocity: f64,
    pub intensity: f64,
}

/// Timestamped LiDAR measurement in the ego frame of its capture time.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub timestamp: f64,
    /// Sensor origin in the same frame as the points.
    pub sensor_origin: Vec3,
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn empty(timestamp: f64, sensor_origin: Vec3) -> Self {
        Self {
            timestamp,
            sensor_origin,
            points: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Unit direction from the sensor to the point.
    pub fn ray_direction(&self, point: &LidarPoint) -> Vec3 {
        vec3_normalize(vec3_sub(point.position, self.sensor_origin))
    }

    /// World-frame radial velocity of the scene content at each point,
    /// resolved to a 3-vector along the ray and compensated for ego motion.
    ///
    /// FMCW measures the relative radial speed; adding back the ego velocity
    /// projection makes static structure come out as zero.
    pub fn resolved_velocities(&self, ego_velocity: Vec3) -> Vec<Vec3> {
        self.points
            .iter()
            .map(|p| {
                let dir = self.ray_direction(p);
                let radial_world = p.radial_velocity + vec3_dot(ego_velocity, dir);
                vec3_scale(dir, radial_world)
            })
            .collect()
    }

    /// Binary dump: magic "LRPC", u32 version, f64 timestamp, u32 count,
    /// then count x 5 little-endian f32 (x, y, z, v_r, intensity).
    pub fn save(&self, path: &Path) -> Result<(), CloudError> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        let res = (|| -> std::io::Result<()> {
            w.write_all(LRPC_MAGIC)?;
            w.write_u32::<LittleEndian>(LRPC_VERSION)?;
            w.write_f64::<LittleEndian>(self.timestamp)?;
            w.write_u32::<LittleEndian>(self.points.len() as u32)?;
            for p in &self.points {
                w.write_f32::<LittleEndian>(p.position[0] as f32)?;
                w.write_f32::<LittleEndian>(p.position[1] as f32)?;
                w.write_f32::<LittleEndian>(p.position[2] as f32)?;
                w.write_f32::<LittleEndian>(p.radial_velocity as f32)?;
                w.write_f32::<LittleEndian>(p.intensity as f32)?;
            }
            w.flush()
        })();
        res.map_err(|e| io_err(path, e))
    }

    /// The file format does not carry the sensor origin; it comes from the
    /// sensor extrinsics in the run configuration.
    pub fn load(path: &Path, sensor_origin: Vec3) -> Result<Self, CloudError> {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
        if &magic != LRPC_MAGIC {
            return Err(CloudError::BadMagic {
                path: path.display().to_string(),
            });
        }
        let version = r.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))?;
        if version != LRPC_VERSION {
            return Err(CloudError::BadVersion {
                path: path.display().to_string(),
                version,
            });
        }
        let timestamp = r.read_f64::<LittleEndian>().map_err(|e| io_err(path, e))?;
        let count = r.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
        let mut points = Vec::with_capacity(count);
        for _ in 0..count {
            let mut vals = [0.0f32; 5];
            for v in &mut vals {
                *v = r.read_f32::<LittleEndian>().map_err(|e| io_err(path, e))?;
            }
            points.push(LidarPoint {
                position: [vals[0] as f64, vals[1] as f64, vals[2] as f64],
                radial_velocity: vals[3] as f64,
                intensity: vals[4] as f64,
            });
        }
        Ok(Self {
            timestamp,
            sensor_origin,
            points,
        })
    }

    /// ASCII PLY export with per-vertex x, y, z, vr for external viewers.
    pub fn export_ply(&self, path: &Path) -> Result<(), CloudError> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        let res = (|| -> std::io::Result<()> {
            writeln!(w, "ply")?;
            writeln!(w, "format ascii 1.0")?;
            writeln!(w, "element vertex {}", self.points.len())?;
            writeln!(w, "property float x")?;
            writeln!(w, "property float y")?;
            writeln!(w, "property float z")?;
            writeln!(w, "property float vr")?;
            writeln!(w, "end_header")?;
            for p in &self.points {
                writeln!(
                    w,
                    "{} {} {} {}",
                    p.position[0] as f32,
                    p.position[1] as f32,
                    p.position[2] as f32,
                    p.radial_velocity as f32
                )?;
            }
            w.flush()
        })();
        res.map_err(|e| io_err(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_cloud() -> PointCloud {
        PointCloud {
            timestamp: 0.5,
            sensor_origin: [0.0, 0.0, 2.0],
            points: vec![
                LidarPoint {
                    position: [10.0, 1.0, 0.5],
                    radial_velocity: -3.25,
                    intensity: 0.75,
                },
                LidarPoint {
                    position: [50.0, -4.0, 1.0],
                    radial_velocity: 1.5,
                    intensity: 0.25,
                },
            ],
        }
    }

    #[test]
    fn lrpc_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cloud.lrpc");
        let cloud = sample_cloud();
        cloud.save(&path).unwrap();
        let loaded = PointCloud::load(&path, cloud.sensor_origin).unwrap();
        assert_eq!(loaded.timestamp, cloud.timestamp);
        assert_eq!(loaded.len(), cloud.len());
        for (a, b) in loaded.points.iter().zip(&cloud.points) {
            for i in 0..3 {
                assert!((a.position[i] - b.position[i]).abs() < 1e-6);
            }
            assert!((a.radial_velocity - b.radial_velocity).abs() < 1e-6);
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.lrpc");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            PointCloud::load(&path, [0.0; 3]),
            Err(CloudError::BadMagic { .. })
        ));
    }

    #[test]
    fn static_point_resolves_to_zero_velocity() {
        // Ego moving +x at 30; a static point straight ahead measures v_r = -30.
        let cloud = PointCloud {
            timestamp: 0.0,
            sensor_origin: [0.0; 3],
            points: vec![LidarPoint {
                position: [20.0, 0.0, 0.0],
                radial_velocity: -30.0,
                intensity: 1.0,
            }],
        };
        let resolved = cloud.resolved_velocities([30.0, 0.0, 0.0]);
        assert!(resolved[0].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn ply_header_is_well_formed() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cloud.ply");
        sample_cloud().export_ply(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\nelement vertex 2\n"));
        assert!(text.contains("property float vr"));
        assert_eq!(text.lines().count(), 8 + 2);
    }
}
