//! Binary motion files.
//!
//! * `M269`: `b"M269" | version u32 | T u32 | T × 269 f64`
//! * `JNT3`: `b"JNT3" | version u32 | T u32 | T × 22 × 3 f64`
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{JointSequence, MotionError, MotionRepr, JOINT_COUNT, REPR_DIM};

pub const FILE_VERSION: u32 = 1;

fn write_block<W: Write>(w: &mut W, magic: &[u8; 4], frames: usize, values: &[f64]) -> Result<(), MotionError> {
    w.write_all(magic)?;
    w.write_all(&FILE_VERSION.to_le_bytes())?;
    w.write_all(&(frames as u32).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_block<R: Read>(r: &mut R, magic: &[u8; 4], width: usize) -> Result<(usize, Vec<f64>), MotionError> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)?;
    if &head[..4] != magic {
        return Err(MotionError::Format(format!("bad magic {:?}, expected {:?}", &head[..4], magic)));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != FILE_VERSION {
        return Err(MotionError::Format(format!("unsupported version {version}")));
    }
    let frames = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; frames * width * 8];
    r.read_exact(&mut buf)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(MotionError::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok((frames, buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()))
}

pub fn write_motion<W: Write>(w: &mut W, m: &MotionRepr) -> Result<(), MotionError> {
    write_block(w, b"M269", m.frames(), m.data())
}

pub fn read_motion<R: Read>(r: &mut R) -> Result<MotionRepr, MotionError> {
    let (t, data) = read_block(r, b"M269", REPR_DIM)?;
    MotionRepr::new(t, data)
}

pub fn write_joints<W: Write>(w: &mut W, j: &JointSequence) -> Result<(), MotionError> {
    write_block(w, b"JNT3", j.len(), &j.to_flat())
}

pub fn read_joints<R: Read>(r: &mut R) -> Result<JointSequence, MotionError> {
    let (t, data) = read_block(r, b"JNT3", JOINT_COUNT * 3)?;
    JointSequence::from_flat(t, &data)
}

pub fn save_motion(path: &Path, m: &MotionRepr) -> Result<(), MotionError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_motion(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_motion(path: &Path) -> Result<MotionRepr, MotionError> {
    read_motion(&mut BufReader::new(File::open(path)?))
}

pub fn save_joints(path: &Path, j: &JointSequence) -> Result<(), MotionError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_joints(&mut w, j)?;
    w.flush()?;
    Ok(())
}

pub fn load_joints(path: &Path) -> Result<JointSequence, MotionError> {
    read_joints(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn m269_header_layout() {
        let m = MotionRepr::new(2, (0..2 * REPR_DIM).map(|i| i as f64).collect()).unwrap();
        let mut buf = Vec::new();
        write_motion(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], b"M269");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(buf.len(), 12 + 2 * REPR_DIM * 8);
        assert_eq!(read_motion(&mut buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn jnt3_round_trip_and_magic_check() {
        let j = JointSequence::from_flat(3, &(0..3 * 66).map(|i| i as f64 * 0.5).collect::<Vec<_>>()).unwrap();
        let mut buf = Vec::new();
        write_joints(&mut buf, &j).unwrap();
        assert_eq!(&buf[..4], b"JNT3");
        assert_eq!(read_joints(&mut buf.as_slice()).unwrap(), j);
        assert!(read_motion(&mut buf.as_slice()).is_err());
    }
}
