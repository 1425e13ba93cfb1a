//! On-disk formats. All binary formats are little-endian.
//!
//! Motion file (`.egom`):
//! ```text
//! magic  "EGOM1"          5 bytes
//! J      u32
//! N      u32
//! fps    f32
//! has_heading u8
//! positions f32 x N*J*3   row-major frame, joint, xyz
//! heading   f32 x N       present iff has_heading == 1
//! ```
//!
//! Token grid file (`.egot`):
//! ```text
//! magic  "EGOT1"          5 bytes
//! L      u32
//! N1     u32
//! K      u32
//! tokens u16 x L*N1       row-major level, timestep
//! ```
//!
//! Condition file (`.egoc`):
//! ```text
//! magic  "EGOC1"          5 bytes
//! n_image u32, n_instruction u32, n_pose u32
//! image_feature f32 x n_image
//! instruction   u16 x n_instruction
//! init_pose     f32 x n_pose
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::condition::ConditionBundle;
use crate::error::{Error, Result};
use crate::kinematics::GlobalMotion;
use crate::tokens::TokenGrid;

pub const MOTION_MAGIC: &[u8; 5] = b"EGOM1";
pub const TOKEN_MAGIC: &[u8; 5] = b"EGOT1";
pub const CONDITION_MAGIC: &[u8; 5] = b"EGOC1";

fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 5]) -> Result<()> {
    let mut m = [0u8; 5];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub fn write_motion<W: Write>(w: &mut W, m: &GlobalMotion) -> Result<()> {
    w.write_all(MOTION_MAGIC)?;
    w.write_u32::<LE>(m.num_joints as u32)?;
    w.write_u32::<LE>(m.num_frames() as u32)?;
    w.write_f32::<LE>(m.fps)?;
    w.write_u8(1)?;
    for &v in &m.positions {
        w.write_f32::<LE>(v as f32)?;
    }
    for &h in &m.heading {
        w.write_f32::<LE>(h as f32)?;
    }
    Ok(())
}

/// Reads a motion. Files without a heading block get zero heading.
pub fn read_motion<R: Read>(r: &mut R) -> Result<GlobalMotion> {
    expect_magic(r, MOTION_MAGIC)?;
    let j = r.read_u32::<LE>()? as usize;
    let n = r.read_u32::<LE>()? as usize;
    let fps = r.read_f32::<LE>()?;
    let has_heading = r.read_u8()?;
    let mut buf = vec![0f32; n * j * 3];
    r.read_f32_into::<LE>(&mut buf)?;
    let positions = buf.into_iter().map(f64::from).collect();
    let heading = match has_heading {
        0 => vec![0.0; n],
        1 => {
            let mut h = vec![0f32; n];
            r.read_f32_into::<LE>(&mut h)?;
            h.into_iter().map(f64::from).collect()
        }
        other => return Err(Error::Format(format!("has_heading must be 0 or 1, got {other}"))),
    };
    GlobalMotion::new(j, fps, positions, heading)
}

pub fn save_motion(path: &Path, m: &GlobalMotion) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_motion(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_motion(path: &Path) -> Result<GlobalMotion> {
    read_motion(&mut BufReader::new(File::open(path)?))
}

/// CSV mirror of the motion file: one row per frame,
/// `frame,heading,j0_x,j0_y,j0_z,...`, with J and fps recoverable from the header.
pub fn save_motion_csv(path: &Path, m: &GlobalMotion) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["frame".to_string(), format!("heading@fps={}", m.fps)];
    for j in 0..m.num_joints {
        for c in ["x", "y", "z"] {
            header.push(format!("j{j}_{c}"));
        }
    }
    w.write_record(&header)?;
    for t in 0..m.num_frames() {
        let mut row = vec![t.to_string(), m.heading[t].to_string()];
        let o = t * m.num_joints * 3;
        row.extend(m.positions[o..o + m.num_joints * 3].iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_motion_csv(path: &Path) -> Result<GlobalMotion> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let fps: f32 = header
        .get(1)
        .and_then(|h| h.strip_prefix("heading@fps="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("missing heading@fps= column".into()))?;
    if (header.len() - 2) % 3 != 0 {
        return Err(Error::Format(format!("{} columns is not frame,heading + 3J", header.len())));
    }
    let nj = (header.len() - 2) / 3;
    let mut positions = Vec::new();
    let mut heading = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s}: {e}")));
        heading.push(parse(&rec[1])?);
        for v in rec.iter().skip(2) {
            positions.push(parse(v)?);
        }
    }
    GlobalMotion::new(nj, fps, positions, heading)
}

pub fn write_tokens<W: Write>(w: &mut W, g: &TokenGrid) -> Result<()> {
    if g.codebook_size > u16::MAX as usize + 1 {
        return Err(Error::Format(format!("codebook size {} does not fit u16", g.codebook_size)));
    }
    w.write_all(TOKEN_MAGIC)?;
    w.write_u32::<LE>(g.levels as u32)?;
    w.write_u32::<LE>(g.len as u32)?;
    w.write_u32::<LE>(g.codebook_size as u32)?;
    for &t in &g.tokens {
        w.write_u16::<LE>(t as u16)?;
    }
    Ok(())
}

pub fn read_tokens<R: Read>(r: &mut R) -> Result<TokenGrid> {
    expect_magic(r, TOKEN_MAGIC)?;
    let l = r.read_u32::<LE>()? as usize;
    let n1 = r.read_u32::<LE>()? as usize;
    let k = r.read_u32::<LE>()? as usize;
    let mut buf = vec![0u16; l * n1];
    r.read_u16_into::<LE>(&mut buf)?;
    TokenGrid::new(l, n1, k, buf.into_iter().map(u32::from).collect())
}

pub fn save_tokens(path: &Path, g: &TokenGrid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tokens(&mut w, g)?;
    w.flush()?;
    Ok(())
}

pub fn load_tokens(path: &Path) -> Result<TokenGrid> {
    read_tokens(&mut BufReader::new(File::open(path)?))
}

pub fn save_condition(path: &Path, c: &ConditionBundle) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_condition(&mut w, c)?;
    w.flush()?;
    Ok(())
}

pub fn load_condition(path: &Path) -> Result<ConditionBundle> {
    read_condition(&mut BufReader::new(File::open(path)?))
}

pub fn write_condition<W: Write>(w: &mut W, c: &ConditionBundle) -> Result<()> {
    w.write_all(CONDITION_MAGIC)?;
    w.write_u32::<LE>(c.image_feature.len() as u32)?;
    w.write_u32::<LE>(c.instruction.len() as u32)?;
    w.write_u32::<LE>(c.init_pose.len() as u32)?;
    for &v in &c.image_feature {
        w.write_f32::<LE>(v)?;
    }
    for &v in &c.instruction {
        w.write_u16::<LE>(v)?;
    }
    for &v in &c.init_pose {
        w.write_f32::<LE>(v)?;
    }
    Ok(())
}

pub fn read_condition<R: Read>(r: &mut R) -> Result<ConditionBundle> {
    expect_magic(r, CONDITION_MAGIC)?;
    let ni = r.read_u32::<LE>()? as usize;
    let nt = r.read_u32::<LE>()? as usize;
    let np = r.read_u32::<LE>()? as usize;
    let mut image_feature = vec![0f32; ni];
    r.read_f32_into::<LE>(&mut image_feature)?;
    let mut instruction = vec![0u16; nt];
    r.read_u16_into::<LE>(&mut instruction)?;
    let mut init_pose = vec![0f32; np];
    r.read_f32_into::<LE>(&mut init_pose)?;
    Ok(ConditionBundle { image_feature, instruction, init_pose })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn motion_header_layout() {
        let m = GlobalMotion::new(2, 30.0, vec![0.5; 12], vec![0.25, -0.25]).unwrap();
        let mut buf = Vec::new();
        write_motion(&mut buf, &m).unwrap();
        assert_eq!(&buf[..5], b"EGOM1");
        assert_eq!(u32::from_le_bytes(buf[5..9].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[9..13].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(buf[13..17].try_into().unwrap()), 30.0);
        assert_eq!(buf[17], 1);
        assert_eq!(buf.len(), 18 + 4 * 12 + 4 * 2);
        assert_eq!(read_motion(&mut buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn motion_without_heading() {
        let mut buf = Vec::new();
        buf.extend(b"EGOM1");
        buf.extend(1u32.to_le_bytes());
        buf.extend(2u32.to_le_bytes());
        buf.extend(30f32.to_le_bytes());
        buf.push(0);
        for v in [1f32, 2.0, 3.0, 4.0, 5.0, 6.0] {
            buf.extend(v.to_le_bytes());
        }
        let m = read_motion(&mut buf.as_slice()).unwrap();
        assert_eq!(m.heading, vec![0.0, 0.0]);
        assert_eq!(m.positions[5], 6.0);
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"EGOX1\0\0\0\0".to_vec();
        assert!(matches!(read_motion(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = GlobalMotion::new(2, 30.0, (0..12).map(|i| i as f64 * 0.125).collect(), vec![0.5, 1.5]).unwrap();
        save_motion_csv(&p, &m).unwrap();
        assert_eq!(load_motion_csv(&p).unwrap(), m);
    }

    proptest! {
        #[test]
        fn token_file_round_trip(l in 1usize..7, n1 in 1usize..40, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = TokenGrid::new(l, n1, 512, (0..l * n1).map(|_| rng.random_range(0..512)).collect()).unwrap();
            let mut buf = Vec::new();
            write_tokens(&mut buf, &g).unwrap();
            prop_assert_eq!(buf.len(), 17 + 2 * l * n1);
            prop_assert_eq!(read_tokens(&mut buf.as_slice()).unwrap(), g);
        }

        #[test]
        fn condition_round_trip(img in proptest::collection::vec(-5f32..5.0, 0..20),
                                 ins in proptest::collection::vec(any::<u16>(), 0..30),
                                 pose in proptest::collection::vec(-5f32..5.0, 0..80)) {
            let c = ConditionBundle { image_feature: img, instruction: ins, init_pose: pose };
            let mut buf = Vec::new();
            write_condition(&mut buf, &c).unwrap();
            prop_assert_eq!(read_condition(&mut buf.as_slice()).unwrap(), c);
        }
    }
}
