//! Binary reference model file, little-endian throughout.
//!
//! ```text
//! magic          8 bytes  "AFTREFM\0"
//! version        u32
//! n_points       u64
//! k              u32      partition count
//! n_scales       u32
//! dims           u32 x n_scales
//! n_segments     u32
//! rest config    (kappa, phi, length) f64 x n_segments
//! current config (kappa, phi, length) f64 x n_segments
//! boundaries     f64 x (k + 1)
//! base sigmas    f64 x k
//! points, each:
//!   rest_position    f64 x 3
//!   sigma            f64
//!   partition        u16
//!   descriptors      f32 x dims[s], for every scale s in order
//!   current_position f64 x 3
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{Descriptor, Partitioning, ReferenceModel, ReferencePoint};
use crate::error::{Error, Result};
use crate::kinematics::{RobotConfig, SegmentConfig};
use crate::Vec3;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"AFTREFM\0";

fn write_vec3(w: &mut impl Write, v: &Vec3) -> Result<()> {
    for x in v.iter() {
        w.write_f64::<LE>(*x)?;
    }
    Ok(())
}

fn read_vec3(r: &mut impl Read) -> Result<Vec3> {
    Ok(Vec3::new(r.read_f64::<LE>()?, r.read_f64::<LE>()?, r.read_f64::<LE>()?))
}

fn write_config(w: &mut impl Write, c: &RobotConfig) -> Result<()> {
    for s in &c.segments {
        w.write_f64::<LE>(s.kappa)?;
        w.write_f64::<LE>(s.phi)?;
        w.write_f64::<LE>(s.length)?;
    }
    Ok(())
}

fn read_config(r: &mut impl Read, n: usize) -> Result<RobotConfig> {
    let segments = (0..n)
        .map(|_| Ok(SegmentConfig::new(r.read_f64::<LE>()?, r.read_f64::<LE>()?, r.read_f64::<LE>()?)))
        .collect::<Result<_>>()?;
    Ok(RobotConfig::new(segments))
}

/// Serializes a model. Descriptor components are narrowed to `f32`.
pub fn write_model(w: &mut impl Write, model: &ReferenceModel) -> Result<()> {
    let dims = model.descriptor_dims();
    let k = model.n_partitions();
    if k > u16::MAX as usize {
        return Err(Error::Format(format!("{k} partitions do not fit the u16 label")));
    }
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(MODEL_FORMAT_VERSION)?;
    w.write_u64::<LE>(model.points.len() as u64)?;
    w.write_u32::<LE>(k as u32)?;
    w.write_u32::<LE>(dims.len() as u32)?;
    for &d in &dims {
        w.write_u32::<LE>(d as u32)?;
    }
    w.write_u32::<LE>(model.rest_config.segments.len() as u32)?;
    write_config(w, &model.rest_config)?;
    write_config(w, &model.current_config)?;
    for b in &model.partitions.boundaries {
        w.write_f64::<LE>(*b)?;
    }
    for b in &model.partitions.base_sigmas {
        w.write_f64::<LE>(*b)?;
    }
    for p in &model.points {
        write_vec3(w, &p.rest_position)?;
        w.write_f64::<LE>(p.sigma)?;
        w.write_u16::<LE>(p.partition as u16)?;
        for scale in p.descriptor.scales() {
            for &x in scale {
                w.write_f32::<LE>(x as f32)?;
            }
        }
        write_vec3(w, &p.current_position)?;
    }
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<ReferenceModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a reference model file".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let n_points = r.read_u64::<LE>()? as usize;
    let k = r.read_u32::<LE>()? as usize;
    let n_scales = r.read_u32::<LE>()? as usize;
    if n_scales == 0 || n_scales > 64 || k > u16::MAX as usize {
        return Err(Error::Format("implausible model header".into()));
    }
    let dims: Vec<usize> = (0..n_scales)
        .map(|_| r.read_u32::<LE>().map(|d| d as usize))
        .collect::<std::io::Result<_>>()?;
    let n_segments = r.read_u32::<LE>()? as usize;
    if n_segments == 0 || n_segments > 1024 {
        return Err(Error::Format("implausible segment count".into()));
    }
    let rest_config = read_config(r, n_segments)?;
    let current_config = read_config(r, n_segments)?;
    let boundaries = (0..=k).map(|_| r.read_f64::<LE>()).collect::<std::io::Result<_>>()?;
    let base_sigmas = (0..k).map(|_| r.read_f64::<LE>()).collect::<std::io::Result<_>>()?;

    let mut points = Vec::with_capacity(n_points.min(1 << 20));
    for _ in 0..n_points {
        let rest_position = read_vec3(r)?;
        let sigma = r.read_f64::<LE>()?;
        let partition = r.read_u16::<LE>()? as usize;
        let scales = dims
            .iter()
            .map(|&d| (0..d).map(|_| r.read_f32::<LE>().map(f64::from)).collect())
            .collect::<std::io::Result<Vec<Vec<f64>>>>()?;
        let descriptor = Descriptor::new(scales).map_err(|e| Error::Format(e.to_string()))?;
        let current_position = read_vec3(r)?;
        points.push(ReferencePoint { rest_position, sigma, partition, descriptor, current_position });
    }
    let model = ReferenceModel {
        points,
        rest_config,
        current_config,
        partitions: Partitioning { boundaries, base_sigmas },
    };
    model.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_model() -> ReferenceModel {
        let rest = RobotConfig::straight(&[0.2, 0.2]);
        let points = (0..8)
            .map(|i| {
                let s = 0.025 + 0.05 * i as f64;
                let f = (i as f32 * 0.37 + 0.1) as f64;
                ReferencePoint {
                    rest_position: Vec3::new(0.02, 0.001 * i as f64, s),
                    sigma: s,
                    partition: (s / 0.1) as usize,
                    descriptor: Descriptor::new(vec![vec![f, 1.0], vec![0.5, -f, 0.25]]).unwrap(),
                    current_position: Vec3::new(0.021, 1.0 / 3.0, s),
                }
            })
            .collect();
        ReferenceModel {
            points,
            current_config: RobotConfig::new(vec![
                SegmentConfig::new(1.0 / 3.0, 0.1, 0.2),
                SegmentConfig::new(0.0, 0.0, 0.2),
            ]),
            rest_config: rest,
            partitions: Partitioning::uniform(0.4, 4).unwrap(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let model = sample_model();
        let mut buf = Vec::new();
        write_model(&mut buf, &model).unwrap();
        let back = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(back, model);
        let mut again = Vec::new();
        write_model(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_model(&mut buf, &sample_model()).unwrap();
        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(matches!(read_model(&mut wrong.as_slice()), Err(Error::Format(_))));
        let short = &buf[..buf.len() - 5];
        assert!(read_model(&mut &short[..]).is_err());
    }
}
