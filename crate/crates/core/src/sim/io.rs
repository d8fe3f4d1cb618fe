//! Binary frame file for replay, little-endian.
//!
//! ```text
//! magic      8 bytes "AFTFRAME"
//! version    u32
//! timestamp  f64
//! has_truth  u8; when 1: n_segments u32, then (kappa, phi, length) f64 per segment
//! n_points   u64
//! n_scales   u32
//! dims       u32 x n_scales
//! points, each: position f64 x 3, pixel f64 x 2, descriptors f32 per scale
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::ObservedFrame;
use crate::error::{Error, Result};
use crate::kinematics::{RobotConfig, SegmentConfig};
use crate::matching::ObservedPoint;
use crate::refmodel::Descriptor;
use crate::Vec3;

pub const FRAME_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"AFTFRAME";

pub fn write_frame(w: &mut impl Write, frame: &ObservedFrame) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(FRAME_FORMAT_VERSION)?;
    w.write_f64::<LE>(frame.timestamp)?;
    match &frame.truth {
        Some(c) => {
            w.write_u8(1)?;
            w.write_u32::<LE>(c.segments.len() as u32)?;
            for s in &c.segments {
                w.write_f64::<LE>(s.kappa)?;
                w.write_f64::<LE>(s.phi)?;
                w.write_f64::<LE>(s.length)?;
            }
        }
        None => w.write_u8(0)?,
    }
    let dims = frame.points.first().map(|p| p.descriptor.dims()).unwrap_or_default();
    w.write_u64::<LE>(frame.points.len() as u64)?;
    w.write_u32::<LE>(dims.len() as u32)?;
    for &d in &dims {
        w.write_u32::<LE>(d as u32)?;
    }
    for p in &frame.points {
        if p.descriptor.dims() != dims {
            return Err(Error::Format("frame mixes descriptor dimensions".into()));
        }
        for x in p.position.iter().chain(p.pixel.iter()) {
            w.write_f64::<LE>(*x)?;
        }
        for scale in p.descriptor.scales() {
            for &x in scale {
                w.write_f32::<LE>(x as f32)?;
            }
        }
    }
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<ObservedFrame> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a frame file".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != FRAME_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported frame version {version}")));
    }
    let timestamp = r.read_f64::<LE>()?;
    let truth = match r.read_u8()? {
        0 => None,
        1 => {
            let n = r.read_u32::<LE>()? as usize;
            if n == 0 || n > 1024 {
                return Err(Error::Format("implausible segment count".into()));
            }
            let segments = (0..n)
                .map(|_| Ok(SegmentConfig::new(r.read_f64::<LE>()?, r.read_f64::<LE>()?, r.read_f64::<LE>()?)))
                .collect::<Result<_>>()?;
            Some(RobotConfig::new(segments))
        }
        other => return Err(Error::Format(format!("bad truth flag {other}"))),
    };
    let n_points = r.read_u64::<LE>()? as usize;
    let n_scales = r.read_u32::<LE>()? as usize;
    if n_scales > 64 {
        return Err(Error::Format("implausible scale count".into()));
    }
    let dims: Vec<usize> = (0..n_scales)
        .map(|_| r.read_u32::<LE>().map(|d| d as usize))
        .collect::<std::io::Result<_>>()?;
    let mut points = Vec::with_capacity(n_points.min(1 << 20));
    for _ in 0..n_points {
        let position = Vec3::new(r.read_f64::<LE>()?, r.read_f64::<LE>()?, r.read_f64::<LE>()?);
        let pixel = [r.read_f64::<LE>()?, r.read_f64::<LE>()?];
        let scales = dims
            .iter()
            .map(|&d| (0..d).map(|_| r.read_f32::<LE>().map(f64::from)).collect())
            .collect::<std::io::Result<Vec<Vec<f64>>>>()?;
        let descriptor = Descriptor::new(scales).map_err(|e| Error::Format(e.to_string()))?;
        points.push(ObservedPoint { position, pixel, descriptor });
    }
    Ok(ObservedFrame { timestamp, points, truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_surface, render_frame, viewpoint_camera, NoiseSpec, OcclusionBar, RobotGeometry};

    #[test]
    fn rendered_frame_round_trips_exactly() {
        let g = RobotGeometry { rings_per_meter: 60.0, ..Default::default() };
        let surface = generate_surface(&g, 5).unwrap();
        let cam = viewpoint_camera("front-left", 0.7, 0.4).unwrap();
        let config = RobotConfig::new(vec![SegmentConfig::new(2.0, 0.3, 0.2), SegmentConfig::new(1.0, 2.0, 0.2)]);
        let frame = render_frame(&surface, &config, &cam, &OcclusionBar::none(), &NoiseSpec::default(), 3, 1.2).unwrap();
        let mut buf = Vec::new();
        write_frame(&mut buf, &frame).unwrap();
        assert_eq!(read_frame(&mut buf.as_slice()).unwrap(), frame);
    }

    #[test]
    fn empty_frame_without_truth() {
        let frame = ObservedFrame { timestamp: 0.0, points: vec![], truth: None };
        let mut buf = Vec::new();
        write_frame(&mut buf, &frame).unwrap();
        assert_eq!(read_frame(&mut buf.as_slice()).unwrap(), frame);
        buf[3] = 0;
        assert!(read_frame(&mut buf.as_slice()).is_err());
    }
}
