//! Versioned little-endian binary records for sensor frames and bundles.
//!
//! Every record starts with a 7-byte header: magic `SSFR`, a `u16` version
//! and a `u8` kind. The byte layout of each kind is documented in
//! `docs/frame-format.md`. Decoding is bit-exact: every `f64`/`f32` is
//! stored as its raw IEEE-754 bits.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::FormatError;
use crate::geometry::{Timestamp, Vec3};
use crate::scene::{Label, ObjectClass};
use crate::sensors::{CameraImage, LidarPoint, LidarSweep, RadarBuffer, RadarPoint};
use crate::staleness::{BundleTiming, FrameBundle, Provenance, StalenessAnnotations};

pub const MAGIC: [u8; 4] = *b"SSFR";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum RecordKind {
    LidarSweep = 1,
    CameraImage = 2,
    RadarBuffer = 3,
    Bundle = 4,
}

impl RecordKind {
    fn from_u8(b: u8) -> Result<Self, FormatError> {
        Ok(match b {
            1 => RecordKind::LidarSweep,
            2 => RecordKind::CameraImage,
            3 => RecordKind::RadarBuffer,
            4 => RecordKind::Bundle,
            other => return Err(FormatError::UnknownKind(other)),
        })
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn header(&mut self, kind: RecordKind) {
        self.buf.extend_from_slice(&MAGIC);
        self.u16(VERSION);
        self.u8(kind as u8);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn vec3(&mut self, v: &Vec3) {
        self.f64(v.x);
        self.f64(v.y);
        self.f64(v.z);
    }
    fn len(&mut self, n: usize) {
        self.u64(n as u64);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        if self.buf.len() < N {
            return Err(FormatError::Truncated);
        }
        let (head, rest) = self.buf.split_at(N);
        self.buf = rest;
        Ok(head.try_into().expect("split_at returned N bytes"))
    }
    fn header(&mut self, expected: RecordKind) -> Result<(), FormatError> {
        if self.take::<4>()? != MAGIC {
            return Err(FormatError::BadMagic);
        }
        let version = self.u16()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let kind = RecordKind::from_u8(self.u8()?)?;
        if kind != expected {
            return Err(FormatError::UnknownKind(kind as u8));
        }
        Ok(())
    }
    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take()?))
    }
    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn i64(&mut self) -> Result<i64, FormatError> {
        Ok(i64::from_le_bytes(self.take()?))
    }
    fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take()?))
    }
    fn ts(&mut self) -> Result<Timestamp, FormatError> {
        self.f64().map(Timestamp)
    }
    fn vec3(&mut self) -> Result<Vec3, FormatError> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }
    /// Element count, rejected early when the remaining bytes cannot hold it.
    fn len(&mut self, min_elem_bytes: usize) -> Result<usize, FormatError> {
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| FormatError::Truncated)?;
        if n.saturating_mul(min_elem_bytes) > self.buf.len() {
            return Err(FormatError::Truncated);
        }
        Ok(n)
    }
    fn finish(self) -> Result<(), FormatError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(FormatError::TrailingBytes)
        }
    }
}

/// Reads the kind byte of a record without decoding the body.
pub fn peek_kind(bytes: &[u8]) -> Result<RecordKind, FormatError> {
    let mut r = Reader { buf: bytes };
    if r.take::<4>()? != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    RecordKind::from_u8(r.u8()?)
}

fn put_sweep(w: &mut Writer, s: &LidarSweep) {
    w.f64(s.sweep_start.secs());
    w.f64(s.t_l.secs());
    w.len(s.points.len());
    for p in &s.points {
        w.vec3(&p.position);
        w.f64(p.intensity);
        w.f64(p.timestamp.secs());
        w.f64(p.azimuth);
        w.i64(p.object_id.map_or(-1, i64::from));
    }
}

fn get_sweep(r: &mut Reader) -> Result<LidarSweep, FormatError> {
    let sweep_start = r.ts()?;
    let t_l = r.ts()?;
    let n = r.len(56)?;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let position = r.vec3()?;
        let intensity = r.f64()?;
        let timestamp = r.ts()?;
        let azimuth = r.f64()?;
        let id = r.i64()?;
        let object_id = if id < 0 { None } else { Some(u32::try_from(id).map_err(|_| FormatError::Truncated)?) };
        points.push(LidarPoint { position, intensity, timestamp, azimuth, object_id });
    }
    Ok(LidarSweep { points, sweep_start, t_l })
}

fn put_camera(w: &mut Writer, c: &CameraImage) {
    w.u32(c.camera_id);
    w.f64(c.t_c.secs());
    w.f64(c.row_time);
    w.f64(c.exposure);
    w.u32(c.width);
    w.u32(c.height);
    for p in &c.pixels {
        w.f32(*p);
    }
}

fn get_camera(r: &mut Reader) -> Result<CameraImage, FormatError> {
    let camera_id = r.u32()?;
    let t_c = r.ts()?;
    let row_time = r.f64()?;
    let exposure = r.f64()?;
    let width = r.u32()?;
    let height = r.u32()?;
    let n = (width as usize).checked_mul(height as usize).ok_or(FormatError::Truncated)?;
    if n.saturating_mul(4) > r.buf.len() {
        return Err(FormatError::Truncated);
    }
    let pixels = (0..n).map(|_| r.f32()).collect::<Result<_, _>>()?;
    Ok(CameraImage { camera_id, t_c, row_time, exposure, width, height, pixels })
}

fn put_radar(w: &mut Writer, b: &RadarBuffer) {
    w.f64(b.t_r.secs());
    w.len(b.points.len());
    for p in &b.points {
        w.vec3(&p.position);
        w.f64(p.rcs);
        w.f64(p.snr);
        w.f64(p.doppler);
        w.f64(p.timestamp.secs());
        w.u32(p.radar_id);
    }
}

fn get_radar(r: &mut Reader) -> Result<RadarBuffer, FormatError> {
    let t_r = r.ts()?;
    let n = r.len(60)?;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push(RadarPoint {
            position: r.vec3()?,
            rcs: r.f64()?,
            snr: r.f64()?,
            doppler: r.f64()?,
            timestamp: r.ts()?,
            radar_id: r.u32()?,
        });
    }
    Ok(RadarBuffer { points, t_r })
}

fn put_f64s(w: &mut Writer, xs: &[f64]) {
    w.len(xs.len());
    for x in xs {
        w.f64(*x);
    }
}

fn get_f64s(r: &mut Reader) -> Result<Vec<f64>, FormatError> {
    let n = r.len(8)?;
    (0..n).map(|_| r.f64()).collect()
}

fn put_label(w: &mut Writer, l: &Label) {
    w.u32(l.object_id);
    w.u8(l.class.index() as u8);
    w.vec3(&l.center);
    w.vec3(&l.extents);
    w.f64(l.yaw);
    w.vec3(&l.velocity);
    for b in l.box_2d {
        w.f64(b);
    }
}

fn get_label(r: &mut Reader) -> Result<Label, FormatError> {
    let object_id = r.u32()?;
    let class = *ObjectClass::ALL.get(r.u8()? as usize).ok_or(FormatError::Truncated)?;
    Ok(Label {
        object_id,
        class,
        center: r.vec3()?,
        extents: r.vec3()?,
        yaw: r.f64()?,
        velocity: r.vec3()?,
        box_2d: [r.f64()?, r.f64()?, r.f64()?, r.f64()?],
    })
}

pub fn encode_sweep(s: &LidarSweep) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(RecordKind::LidarSweep);
    put_sweep(&mut w, s);
    w.buf
}

pub fn decode_sweep(bytes: &[u8]) -> Result<LidarSweep, FormatError> {
    let mut r = Reader { buf: bytes };
    r.header(RecordKind::LidarSweep)?;
    let s = get_sweep(&mut r)?;
    r.finish()?;
    Ok(s)
}

pub fn encode_camera(c: &CameraImage) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(RecordKind::CameraImage);
    put_camera(&mut w, c);
    w.buf
}

pub fn decode_camera(bytes: &[u8]) -> Result<CameraImage, FormatError> {
    let mut r = Reader { buf: bytes };
    r.header(RecordKind::CameraImage)?;
    let c = get_camera(&mut r)?;
    r.finish()?;
    Ok(c)
}

pub fn encode_radar(b: &RadarBuffer) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(RecordKind::RadarBuffer);
    put_radar(&mut w, b);
    w.buf
}

pub fn decode_radar(bytes: &[u8]) -> Result<RadarBuffer, FormatError> {
    let mut r = Reader { buf: bytes };
    r.header(RecordKind::RadarBuffer)?;
    let b = get_radar(&mut r)?;
    r.finish()?;
    Ok(b)
}

pub fn encode_bundle(b: &FrameBundle) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(RecordKind::Bundle);
    w.u64(b.frame_index as u64);
    w.f64(b.t_c.secs());
    w.u8(match b.provenance {
        Provenance::Original => 0,
        Provenance::Augmented => 1,
    });
    w.f64(b.staleness.camera);
    w.f64(b.staleness.lidar);
    w.f64(b.staleness.radar);
    put_camera(&mut w, &b.camera);
    put_sweep(&mut w, &b.lidar);
    put_f64s(&mut w, &b.lidar_offsets);
    put_radar(&mut w, &b.radar);
    put_f64s(&mut w, &b.radar_offsets);
    w.len(b.labels.len());
    for l in b.labels.iter() {
        put_label(&mut w, l);
    }
    w.buf
}

pub fn decode_bundle(bytes: &[u8]) -> Result<FrameBundle, FormatError> {
    let mut r = Reader { buf: bytes };
    r.header(RecordKind::Bundle)?;
    let frame_index = usize::try_from(r.u64()?).map_err(|_| FormatError::Truncated)?;
    let t_c = r.ts()?;
    let provenance = match r.u8()? {
        0 => Provenance::Original,
        1 => Provenance::Augmented,
        _ => return Err(FormatError::Truncated),
    };
    let staleness = StalenessAnnotations { camera: r.f64()?, lidar: r.f64()?, radar: r.f64()? };
    let camera = Arc::new(get_camera(&mut r)?);
    let lidar = Arc::new(get_sweep(&mut r)?);
    let lidar_offsets = get_f64s(&mut r)?;
    let radar = get_radar(&mut r)?;
    let radar_offsets = get_f64s(&mut r)?;
    let n = r.len(117)?;
    let labels = Arc::new((0..n).map(|_| get_label(&mut r)).collect::<Result<Vec<_>, _>>()?);
    r.finish()?;
    Ok(FrameBundle { frame_index, t_c, camera, lidar, lidar_offsets, radar, radar_offsets, labels, staleness, provenance })
}

/// Concatenates records, each prefixed by its `u64` little-endian length.
pub fn write_container<B: AsRef<[u8]>>(records: impl IntoIterator<Item = B>) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        let r = r.as_ref();
        out.extend_from_slice(&(r.len() as u64).to_le_bytes());
        out.extend_from_slice(r);
    }
    out
}

/// Splits a container back into its records.
pub fn read_container(bytes: &[u8]) -> Result<Vec<&[u8]>, FormatError> {
    let mut out = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        let (len, tail) = rest.split_first_chunk::<8>().ok_or(FormatError::Truncated)?;
        let len = usize::try_from(u64::from_le_bytes(*len)).map_err(|_| FormatError::Truncated)?;
        if tail.len() < len {
            return Err(FormatError::Truncated);
        }
        let (record, tail) = tail.split_at(len);
        out.push(record);
        rest = tail;
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct TimingRow {
    frame: usize,
    t_c: f64,
    t_l: f64,
    t_r: f64,
}

fn csv_error(e: csv::Error) -> FormatError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    FormatError::Csv { line, message: e.to_string() }
}

/// `frame,t_c,t_l,t_r`, one line per frame.
pub fn timing_log_csv(log: &[BundleTiming]) -> Result<Vec<u8>, FormatError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (frame, t) in log.iter().enumerate() {
        w.serialize(TimingRow { frame, t_c: t.t_c.secs(), t_l: t.t_l.secs(), t_r: t.t_r.secs() }).map_err(csv_error)?;
    }
    if log.is_empty() {
        w.write_record(["frame", "t_c", "t_l", "t_r"]).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| FormatError::Io(e.into_error()))
}

pub fn parse_timing_log(bytes: &[u8]) -> Result<Vec<BundleTiming>, FormatError> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().map_err(csv_error)?;
    if header != vec!["frame", "t_c", "t_l", "t_r"] {
        return Err(FormatError::Csv { line: 1, message: "expected header `frame,t_c,t_l,t_r`".into() });
    }
    let mut out = Vec::new();
    for row in r.deserialize::<TimingRow>() {
        let row = row.map_err(csv_error)?;
        if ![row.t_c, row.t_l, row.t_r].iter().all(|v| v.is_finite()) {
            return Err(FormatError::Csv { line: out.len() + 2, message: "non-finite timestamp".into() });
        }
        out.push(BundleTiming { t_c: Timestamp(row.t_c), t_l: Timestamp(row.t_l), t_r: Timestamp(row.t_r) });
    }
    Ok(out)
}
