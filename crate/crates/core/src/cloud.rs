//! LiDAR point clouds and their on-disk forms (`OCFP` binary, CSV).

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3};

const MAGIC: &[u8; 4] = b"OCFP";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub position: Vec3,
    pub intensity: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
}

#[derive(Serialize, Deserialize)]
struct CsvRecord {
    x: f64,
    y: f64,
    z: f64,
    intensity: f64,
}

impl PointCloud {
    pub fn new(points: Vec<LidarPoint>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.points.iter().map(|p| p.position).collect()
    }

    pub fn write_ocfp<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.points.len() as u32).to_le_bytes())?;
        for p in &self.points {
            for v in [p.position.x, p.position.y, p.position.z, p.intensity] {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_ocfp<R: Read>(mut r: R) -> Result<Self> {
        let bad = |reason: &str| Error::format("OCFP", reason);
        let mut head = [0u8; 12];
        r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
        if &head[0..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        if u32::from_le_bytes(head[4..8].try_into().unwrap()) != VERSION {
            return Err(bad("unsupported version"));
        }
        let count = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let mut body = vec![0u8; count * 16];
        r.read_exact(&mut body).map_err(|_| bad("truncated point records"))?;
        let points = body
            .chunks_exact(16)
            .map(|rec| {
                let f = |i: usize| f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
                LidarPoint {
                    position: Vector3::new(f(0), f(1), f(2)),
                    intensity: f(3),
                }
            })
            .collect();
        Ok(PointCloud { points })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for p in &self.points {
            wr.serialize(CsvRecord {
                x: p.position.x,
                y: p.position.y,
                z: p.position.z,
                intensity: p.intensity,
            })
            .map_err(|e| Error::format("CSV", e.to_string()))?;
        }
        wr.flush().map_err(|e| Error::format("CSV", e.to_string()))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers().map_err(|e| Error::format("CSV", e.to_string()))?;
        if headers.iter().collect::<Vec<_>>() != ["x", "y", "z", "intensity"] {
            return Err(Error::format("CSV", "expected header x,y,z,intensity"));
        }
        let mut points = Vec::new();
        for rec in rd.deserialize::<CsvRecord>() {
            let rec = rec.map_err(|e| Error::format("CSV", e.to_string()))?;
            points.push(LidarPoint {
                position: Vector3::new(rec.x, rec.y, rec.z),
                intensity: rec.intensity,
            });
        }
        Ok(PointCloud { points })
    }

    /// Loads `.csv` files as CSV and anything else as `OCFP`.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            Self::read_csv(bytes.as_slice())
        } else {
            Self::read_ocfp(bytes.as_slice())
        }
    }

    pub fn save_ocfp(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + 16 * self.points.len());
        self.write_ocfp(&mut buf).expect("writing to a Vec cannot fail");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}
