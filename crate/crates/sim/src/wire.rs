//! Packet, IMU and ground-truth file formats.
//!
//! Packets (little-endian): `"LPKT"`, version `u16`, `cols u16`,
//! `start_col u16`, `t_start f64`, `rows u16`, then `rows × cols` range
//! ticks as `u16`, row-major. 512 ticks per meter, 0 means no return.
//!
//! IMU stream: `"LIMU"` followed by records of `t f64`, `accel 3×f32`,
//! `gyro 3×f32`.
//!
//! Poses: TUM text, `t x y z qx qy qz qw` per line.

use std::io::{self, BufRead, Read, Write};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use spinodom::{ColumnBlock, ImuSample, Pose};
use thiserror::Error;

use crate::raycast::{from_ticks, to_ticks};

pub const PACKET_MAGIC: [u8; 4] = *b"LPKT";
pub const IMU_MAGIC: [u8; 4] = *b"LIMU";
pub const WIRE_VERSION: u16 = 1;
pub const PACKET_HEADER_LEN: usize = 4 + 2 + 2 + 2 + 8 + 2;
pub const IMU_RECORD_LEN: usize = 8 + 12 + 12;
pub const DEFAULT_PACKET_COLS: usize = 16;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("framing error at byte {offset}: {reason}")]
    Framing { offset: u64, reason: String },
    #[error("unsupported wire version {version} at byte {offset}")]
    Version { offset: u64, version: u16 },
    #[error("line {line}: {reason}")]
    Text { line: usize, reason: String },
}

impl WireError {
    /// Byte offset for binary framing errors.
    pub fn offset(&self) -> Option<u64> {
        match self {
            WireError::Framing { offset, .. } | WireError::Version { offset, .. } => Some(*offset),
            _ => None,
        }
    }
}

/// Appends one packet holding the whole block.
pub fn encode_packet(block: &ColumnBlock, out: &mut Vec<u8>) {
    out.extend_from_slice(&PACKET_MAGIC);
    out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
    out.extend_from_slice(&(block.width as u16).to_le_bytes());
    out.extend_from_slice(&(block.start_col as u16).to_le_bytes());
    out.extend_from_slice(&block.t_start.to_le_bytes());
    out.extend_from_slice(&(block.rows as u16).to_le_bytes());
    for &r in &block.ranges {
        out.extend_from_slice(&to_ticks(f64::from(r)).to_le_bytes());
    }
}

/// Splits a block into packets of `cols_per_packet` columns.
pub fn encode_block(block: &ColumnBlock, cols_per_packet: usize, firing_interval: f64, total_cols: usize, out: &mut Vec<u8>) {
    let step = cols_per_packet.max(1);
    let mut j = 0;
    while j < block.width {
        let w = step.min(block.width - j);
        let mut ranges = Vec::with_capacity(block.rows * w);
        for r in 0..block.rows {
            ranges.extend_from_slice(&block.ranges[r * block.width + j..r * block.width + j + w]);
        }
        let packet = ColumnBlock::new(
            (block.start_col + j) % total_cols,
            block.rows,
            w,
            block.t_start + j as f64 * firing_interval,
            ranges,
        );
        encode_packet(&packet, out);
        j += w;
    }
}

/// Streaming packet decoder. Yields an error with the byte offset of the
/// offending packet when the stream is malformed or truncated.
pub struct PacketReader<R> {
    inner: R,
    offset: u64,
    failed: bool,
}

impl<R: Read> PacketReader<R> {
    pub fn new(inner: R) -> Self {
        PacketReader { inner, offset: 0, failed: false }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn read_packet(&mut self) -> Result<Option<ColumnBlock>, WireError> {
        let start = self.offset;
        let mut header = [0u8; PACKET_HEADER_LEN];
        let got = read_full(&mut self.inner, &mut header)?;
        if got == 0 {
            return Ok(None);
        }
        if got < PACKET_HEADER_LEN {
            return Err(WireError::Framing { offset: start, reason: format!("truncated header ({got} of {PACKET_HEADER_LEN} bytes)") });
        }
        if header[..4] != PACKET_MAGIC {
            return Err(WireError::Framing { offset: start, reason: "bad packet magic".into() });
        }
        let u16_at = |i: usize| u16::from_le_bytes([header[i], header[i + 1]]);
        let version = u16_at(4);
        if version != WIRE_VERSION {
            return Err(WireError::Version { offset: start, version });
        }
        let width = u16_at(6) as usize;
        let start_col = u16_at(8) as usize;
        let t_start = f64::from_le_bytes(header[10..18].try_into().expect("8 bytes"));
        let rows = u16_at(18) as usize;
        if width == 0 || rows == 0 || !t_start.is_finite() {
            return Err(WireError::Framing { offset: start, reason: "empty or non-finite packet header".into() });
        }
        let mut payload = vec![0u8; rows * width * 2];
        let got = read_full(&mut self.inner, &mut payload)?;
        if got < payload.len() {
            return Err(WireError::Framing {
                offset: start,
                reason: format!("truncated payload ({got} of {} bytes)", payload.len()),
            });
        }
        self.offset += (PACKET_HEADER_LEN + payload.len()) as u64;
        let ranges = payload.chunks_exact(2).map(|b| from_ticks(u16::from_le_bytes([b[0], b[1]]))).collect();
        Ok(Some(ColumnBlock::new(start_col, rows, width, t_start, ranges)))
    }
}

impl<R: Read> Iterator for PacketReader<R> {
    type Item = Result<ColumnBlock, WireError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.read_packet() {
            Ok(Some(b)) => Some(Ok(b)),
            Ok(None) => None,
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

/// Reads until `buf` is full or EOF; returns the byte count.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

pub fn write_imu<W: Write>(w: &mut W, samples: &[ImuSample]) -> io::Result<()> {
    w.write_all(&IMU_MAGIC)?;
    let mut buf = Vec::with_capacity(samples.len() * IMU_RECORD_LEN);
    for s in samples {
        buf.extend_from_slice(&s.time.to_le_bytes());
        for v in s.accel.iter().chain(s.gyro.iter()) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)
}

pub fn read_imu<R: Read>(mut r: R) -> Result<Vec<ImuSample>, WireError> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() < 4 || data[..4] != IMU_MAGIC {
        return Err(WireError::Framing { offset: 0, reason: "bad IMU magic".into() });
    }
    let body = &data[4..];
    let whole = body.len() / IMU_RECORD_LEN * IMU_RECORD_LEN;
    if whole != body.len() {
        return Err(WireError::Framing { offset: (4 + whole) as u64, reason: "truncated IMU record".into() });
    }
    let f = |b: &[u8], i: usize| f64::from(f32::from_le_bytes(b[i..i + 4].try_into().expect("4 bytes")));
    Ok(body
        .chunks_exact(IMU_RECORD_LEN)
        .map(|b| ImuSample {
            time: f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
            accel: Vector3::new(f(b, 8), f(b, 12), f(b, 16)),
            gyro: Vector3::new(f(b, 20), f(b, 24), f(b, 28)),
        })
        .collect())
}

/// One TUM line with fixed precision so identical poses give identical bytes.
pub fn tum_line(t: f64, pose: &Pose) -> String {
    let p = pose.translation;
    let q = pose.rotation.quaternion();
    format!(
        "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
        t, p.x, p.y, p.z, q.i, q.j, q.k, q.w
    )
}

pub fn write_tum<W: Write>(w: &mut W, poses: &[(f64, Pose)]) -> io::Result<()> {
    for (t, p) in poses {
        writeln!(w, "{}", tum_line(*t, p))?;
    }
    Ok(())
}

/// Parses TUM text. Blank lines and lines starting with `#` are skipped.
pub fn read_tum<R: BufRead>(r: R) -> Result<Vec<(f64, Pose)>, WireError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let s = line.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = s
            .split_whitespace()
            .map(|x| x.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| WireError::Text { line: i + 1, reason: e.to_string() })?;
        if vals.len() != 8 {
            return Err(WireError::Text { line: i + 1, reason: format!("expected 8 fields, found {}", vals.len()) });
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if !(q.norm() > 0.5) || vals.iter().any(|v| !v.is_finite()) {
            return Err(WireError::Text { line: i + 1, reason: "invalid pose".into() });
        }
        let pose = Pose::new(UnitQuaternion::from_quaternion(q), Vector3::new(vals[1], vals[2], vals[3]));
        out.push((vals[0], pose));
    }
    Ok(out)
}
