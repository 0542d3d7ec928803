//! `.occseq` reader/writer. Little-endian throughout:
//!
//! ```text
//! "OCCS" | version u32 = 1 | H u32 | W u32 | D u32 | num_classes u32
//!        | num_frames u32 | frame_dt_ms u32
//! per frame: x f32 | y f32 | yaw f32 | H·W·D label bytes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EgoPose, OccGrid, OccSequence};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OCCS";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 32;
pub const POSE_BYTES: usize = 12;

const MAX_VOXELS: usize = 1 << 31;

pub fn save_sequence<W: Write>(seq: &OccSequence, sink: &mut W) -> Result<()> {
    let [h, w, d] = seq.dims();
    let mut header = Vec::with_capacity(HEADER_BYTES);
    header.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        h as u32,
        w as u32,
        d as u32,
        seq.num_classes() as u32,
        seq.len() as u32,
        seq.frame_dt_ms(),
    ] {
        header.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&header)?;
    for (grid, pose) in seq.frames() {
        let mut p = [0u8; POSE_BYTES];
        p[0..4].copy_from_slice(&pose.x.to_le_bytes());
        p[4..8].copy_from_slice(&pose.y.to_le_bytes());
        p[8..12].copy_from_slice(&pose.yaw.to_le_bytes());
        sink.write_all(&p)?;
        sink.write_all(grid.labels())?;
    }
    sink.flush()?;
    Ok(())
}

/// Reads into `buf`, advancing `offset`; a short stream yields
/// [`Error::Truncated`] carrying the number of bytes actually available.
fn read_full<R: Read>(src: &mut R, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match src.read(&mut buf[filled..]) {
            Ok(0) => return Err(Error::Truncated { offset: *offset }),
            Ok(n) => {
                filled += n;
                *offset += n as u64;
            }
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes(b[i..i + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], i: usize) -> f32 {
    f32::from_le_bytes(b[i..i + 4].try_into().unwrap())
}

pub fn load_sequence<R: Read>(source: &mut R) -> Result<OccSequence> {
    let mut offset = 0u64;
    let mut header = [0u8; HEADER_BYTES];
    read_full(source, &mut header[..4], &mut offset)?;
    if &header[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&header[..4]))));
    }
    read_full(source, &mut header[4..], &mut offset)?;
    let version = u32_at(&header, 4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dims = [u32_at(&header, 8) as usize, u32_at(&header, 12) as usize, u32_at(&header, 16) as usize];
    let num_classes = u32_at(&header, 20);
    let num_frames = u32_at(&header, 24) as usize;
    let dt_ms = u32_at(&header, 28);
    if dims.contains(&0) || dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).is_none_or(|n| n > MAX_VOXELS) {
        return Err(Error::Format(format!("invalid dims {dims:?}")));
    }
    if num_classes == 0 || num_classes > 255 {
        return Err(Error::Format(format!("invalid num_classes {num_classes}")));
    }
    if num_frames == 0 {
        return Err(Error::Format("sequence has zero frames".into()));
    }
    if dt_ms == 0 {
        return Err(Error::Format("frame_dt_ms must be > 0".into()));
    }
    let n = dims[0] * dims[1] * dims[2];
    let mut frames = Vec::with_capacity(num_frames.min(4096));
    for k in 0..num_frames {
        let mut p = [0u8; POSE_BYTES];
        read_full(source, &mut p, &mut offset)?;
        let pose = EgoPose {
            x: f32_at(&p, 0),
            y: f32_at(&p, 4),
            yaw: f32_at(&p, 8),
        };
        if !pose.is_valid() {
            return Err(Error::Validation(format!("frame {k}: invalid pose {pose:?}")));
        }
        let mut labels = vec![0u8; n];
        read_full(source, &mut labels, &mut offset)?;
        let grid = OccGrid::new(dims, num_classes as u8, labels).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("frame {k}: {msg}")),
            e => e,
        })?;
        frames.push((grid, pose));
    }
    OccSequence::new(frames, dt_ms)
}

pub fn write_sequence_file(seq: &OccSequence, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    save_sequence(seq, &mut w)
}

pub fn read_sequence_file(path: &Path) -> Result<OccSequence> {
    let mut r = BufReader::new(File::open(path)?);
    load_sequence(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::occgrid::synth::{generate_synthetic_world, SceneConfig};

    fn tiny() -> OccSequence {
        let g = OccGrid::new([2, 2, 1], 3, vec![0, 1, 2, 0]).unwrap();
        OccSequence::new(vec![(g, EgoPose::default())], 500).unwrap()
    }

    fn hand_bytes() -> Vec<u8> {
        let mut b = b"OCCS".to_vec();
        for v in [1u32, 2, 2, 1, 3, 1, 500] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for _ in 0..3 {
            b.extend_from_slice(&0f32.to_le_bytes());
        }
        b.extend_from_slice(&[0, 1, 2, 0]);
        b
    }

    #[test]
    fn one_frame_file_length() {
        let mut out = Vec::new();
        save_sequence(&tiny(), &mut out).unwrap();
        // 4-byte magic + seven u32 header fields, one pose, four labels.
        assert_eq!(out.len(), (4 + 7 * 4) + 3 * 4 + 4);
        assert_eq!(out, hand_bytes());
    }

    #[test]
    fn parses_hand_built_stream() {
        let seq = load_sequence(&mut hand_bytes().as_slice()).unwrap();
        assert_eq!(seq.dims(), [2, 2, 1]);
        assert_eq!(seq.num_classes(), 3);
        assert_eq!(seq.frame_dt_ms(), 500);
        assert_eq!(seq.grid(0).labels(), &[0, 1, 2, 0]);
        assert_eq!(seq.pose(0), EgoPose::default());
    }

    #[test]
    fn bad_magic() {
        let mut b = hand_bytes();
        b[3] = b'X';
        assert!(matches!(load_sequence(&mut b.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn label_out_of_range() {
        let mut b = hand_bytes();
        let n = b.len();
        b[n - 1] = 3;
        assert!(matches!(load_sequence(&mut b.as_slice()), Err(Error::Validation(_))));
    }

    #[test]
    fn truncation_reports_offset() {
        let b = hand_bytes();
        let cut = HEADER_BYTES + POSE_BYTES + 2;
        match load_sequence(&mut &b[..cut]) {
            Err(Error::Truncated { offset }) => assert_eq!(offset, cut as u64),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    struct FullSink;
    impl Write for FullSink {
        fn write(&mut self, _: &[u8]) -> std::io::Result<usize> {
            Err(std::io::Error::new(std::io::ErrorKind::StorageFull, "full"))
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn io_failure_propagates() {
        let seq = tiny();
        let before = seq.clone();
        assert!(matches!(save_sequence(&seq, &mut FullSink), Err(Error::Io(_))));
        assert_eq!(seq, before);
    }

    #[test]
    fn generated_round_trip() {
        let cfg = SceneConfig {
            dims: [16, 16, 4],
            num_vehicles: 2,
            num_pedestrians: 2,
            seed: 3,
            ..Default::default()
        };
        let seq = generate_synthetic_world(&cfg, 4).unwrap();
        let mut bytes = Vec::new();
        save_sequence(&seq, &mut bytes).unwrap();
        let back = load_sequence(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.frames(), seq.frames());
        let mut again = Vec::new();
        save_sequence(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
    }
}
