//! Ingest, persistence, export and evaluation.
//!
//! # Wire protocol (version 1)
//!
//! Every message is a 10-byte header followed by a payload. All integers are
//! little-endian.
//!
//! | bytes | field                                    |
//! |-------|------------------------------------------|
//! | 4     | magic `OFSM`                             |
//! | 1     | version (1)                              |
//! | 1     | type: 0 hello, 1 frame, 2 bye            |
//! | 4     | payload length `u32`                     |
//!
//! Hello carries a `u32` agent id, bye an empty payload. A frame payload is:
//!
//! ```text
//! u32 agent_id | u32 frame_id | f64 timestamp
//! f64 fx | f64 fy | f64 cx | f64 cy | u32 width | u32 height
//! u32 n | n x (f32 x, f32 y)
//! u32 d | d x f32                         global descriptor
//! u8 has_oracle   [n x u64]               ground-truth point ids
//! u8 has_kp_desc  [u32 dim | n*dim x f32] keypoint descriptors
//! ```
//!
//! The server answers every message with one status byte: 0 accepted,
//! 1 malformed, 2 unsupported version. After a non-zero status the
//! connection is closed. Acknowledgment of a frame is sent only once the
//! frame is in the engine queue, so a full queue delays the sender.
//!
//! # Index snapshot (version 1)
//!
//! ```text
//! "OFHN" | u32 version | u32 dim | u32 max_connections | f64 level_mult
//! u32 ef_construction | u32 ef_search | u64 max_elements | u64 seed
//! u64 count | u8 has_entry | u32 entry | u32 top_layer
//! per node: u64 image_id | u32 layers | dim x f32
//!           per layer: u32 degree | degree x u32 node
//! ```
//!
//! # Reconstruction export (version 1)
//!
//! Plain text, one record per line, reals printed with 17 significant
//! digits so that re-import is exact:
//!
//! ```text
//! # otf-sfm export v1
//! [cameras]
//! camera_id fx fy cx cy width height
//! [images]
//! image_id camera_id qw qx qy qz tx ty tz submap_id
//! [points]
//! point_id x y z n image_id:keypoint:u:v ...
//! ```
//!
//! Camera ids are agent ids; poses map world points into the camera frame.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    Engine, EngineConfig, EngineMetrics, FinalReport, FrameEvent, FramePacket, KeypointDescriptors,
};
use crate::geometry::{estimate_similarity_umeyama, project, CameraIntrinsics, Pose, Vec2, Vec3};
use crate::retrieval::{HnswIndex, HnswParams};
use crate::synthstream::{SceneSpec, SyntheticScene};
use crate::{AgentId, ImageId, PointId, SubmapId};

pub const WIRE_MAGIC: &[u8; 4] = b"OFSM";
pub const WIRE_VERSION: u8 = 1;
pub const SNAPSHOT_MAGIC: &[u8; 4] = b"OFHN";
pub const SNAPSHOT_VERSION: u32 = 1;
pub const EXPORT_HEADER: &str = "# otf-sfm export v1";
/// Largest accepted wire payload (64 MiB).
pub const MAX_PAYLOAD: u32 = 64 << 20;

pub const ACK_OK: u8 = 0;
pub const ACK_MALFORMED: u8 = 1;
pub const ACK_BAD_VERSION: u8 = 2;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("record {index}: {reason}")]
    Record { index: usize, reason: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("alignment impossible: {common} common images")]
    AlignmentImpossible { common: usize },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("engine: {0}")]
    Engine(#[from] crate::engine::EngineError),
    #[error("engine queue closed")]
    QueueClosed,
}

fn malformed<T>(msg: impl Into<String>) -> Result<T, IoError> {
    Err(IoError::Malformed(msg.into()))
}

/// Little-endian cursor over a byte slice.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        if self.buf.len() - self.pos < n {
            return malformed(format!("need {n} bytes at offset {}, {} left", self.pos, self.buf.len() - self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], IoError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32, IoError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, IoError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn flag(&mut self) -> Result<bool, IoError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => malformed(format!("flag byte {b}")),
        }
    }

    /// Checks that `count` items of `size` bytes fit before allocating.
    fn expect(&self, count: usize, size: usize) -> Result<(), IoError> {
        match count.checked_mul(size) {
            Some(n) if n <= self.buf.len() - self.pos => Ok(()),
            _ => malformed(format!("{count} items of {size} bytes exceed the buffer")),
        }
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>, IoError> {
        self.expect(count, 4)?;
        (0..count).map(|_| self.f32()).collect()
    }

    fn finish(&self) -> Result<(), IoError> {
        if self.pos != self.buf.len() {
            return malformed(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32, IoError> {
    u32::try_from(n).map_err(|_| IoError::Malformed(format!("{what} too long")))
}

pub fn encode_frame(p: &FramePacket) -> Result<Vec<u8>, IoError> {
    let n = p.keypoints.len();
    let mut out = Vec::with_capacity(64 + n * 8 + p.descriptor.len() * 4);
    out.extend(p.agent_id.to_le_bytes());
    out.extend(p.frame_id.to_le_bytes());
    out.extend(p.timestamp.to_le_bytes());
    let k = &p.intrinsics;
    for v in [k.fx, k.fy, k.cx, k.cy] {
        out.extend(v.to_le_bytes());
    }
    out.extend(k.width.to_le_bytes());
    out.extend(k.height.to_le_bytes());
    out.extend(len_u32(n, "keypoint list")?.to_le_bytes());
    for [x, y] in &p.keypoints {
        out.extend(x.to_le_bytes());
        out.extend(y.to_le_bytes());
    }
    out.extend(len_u32(p.descriptor.len(), "descriptor")?.to_le_bytes());
    for v in &p.descriptor {
        out.extend(v.to_le_bytes());
    }
    match &p.oracle {
        Some(o) => {
            if o.len() != n {
                return malformed("oracle block length differs from keypoint count");
            }
            out.push(1);
            for id in o {
                out.extend(id.to_le_bytes());
            }
        }
        None => out.push(0),
    }
    match &p.keypoint_descriptors {
        Some(kd) => {
            if kd.values.len() != kd.dim as usize * n {
                return malformed("keypoint descriptor block has the wrong size");
            }
            out.push(1);
            out.extend(kd.dim.to_le_bytes());
            for v in &kd.values {
                out.extend(v.to_le_bytes());
            }
        }
        None => out.push(0),
    }
    Ok(out)
}

pub fn decode_frame(payload: &[u8]) -> Result<FramePacket, IoError> {
    let mut r = Reader::new(payload);
    let agent_id = r.u32()?;
    let frame_id = r.u32()?;
    let timestamp = r.f64()?;
    let intrinsics = CameraIntrinsics { fx: r.f64()?, fy: r.f64()?, cx: r.f64()?, cy: r.f64()?, width: r.u32()?, height: r.u32()? };
    let n = r.u32()? as usize;
    r.expect(n, 8)?;
    let mut keypoints = Vec::with_capacity(n);
    for _ in 0..n {
        keypoints.push([r.f32()?, r.f32()?]);
    }
    let d = r.u32()? as usize;
    let descriptor = r.f32s(d)?;
    let oracle = if r.flag()? {
        r.expect(n, 8)?;
        Some((0..n).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?)
    } else {
        None
    };
    let keypoint_descriptors = if r.flag()? {
        let dim = r.u32()?;
        let count = (dim as usize).checked_mul(n).ok_or_else(|| IoError::Malformed("descriptor block overflow".into()))?;
        Some(KeypointDescriptors { dim, values: r.f32s(count)? })
    } else {
        None
    };
    r.finish()?;
    Ok(FramePacket { agent_id, frame_id, timestamp, intrinsics, keypoints, descriptor, oracle, keypoint_descriptors })
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Hello { agent_id: AgentId },
    Frame(FramePacket),
    Bye,
}

impl WireMessage {
    pub fn msg_type(&self) -> u8 {
        match self {
            WireMessage::Hello { .. } => 0,
            WireMessage::Frame(_) => 1,
            WireMessage::Bye => 2,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, IoError> {
        let payload = match self {
            WireMessage::Hello { agent_id } => agent_id.to_le_bytes().to_vec(),
            WireMessage::Frame(p) => encode_frame(p)?,
            WireMessage::Bye => Vec::new(),
        };
        let len = len_u32(payload.len(), "payload")?;
        if len > MAX_PAYLOAD {
            return malformed("payload too large");
        }
        let mut out = Vec::with_capacity(10 + payload.len());
        out.extend(WIRE_MAGIC);
        out.push(WIRE_VERSION);
        out.push(self.msg_type());
        out.extend(len.to_le_bytes());
        out.extend(payload);
        Ok(out)
    }

    /// Decodes one message from the front of `buf`; returns it with the
    /// number of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(WireMessage, usize), IoError> {
        let mut r = Reader::new(buf);
        let header: [u8; 10] = r.array()?;
        let (msg_type, len) = parse_header(&header)?;
        let payload = r.take(len as usize)?;
        Ok((decode_payload(msg_type, payload)?, 10 + len as usize))
    }

    /// Reads one message; `Ok(None)` on a clean end of stream.
    pub fn read_from(reader: &mut impl Read) -> Result<Option<WireMessage>, IoError> {
        let mut header = [0u8; 10];
        let mut got = 0;
        while got < header.len() {
            match reader.read(&mut header[got..])? {
                0 if got == 0 => return Ok(None),
                0 => return malformed("truncated header"),
                k => got += k,
            }
        }
        let (msg_type, len) = parse_header(&header)?;
        let mut payload = vec![0u8; len as usize];
        reader.read_exact(&mut payload).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => IoError::Malformed("truncated payload".into()),
            _ => IoError::Io(e),
        })?;
        decode_payload(msg_type, &payload).map(Some)
    }
}

fn parse_header(h: &[u8; 10]) -> Result<(u8, u32), IoError> {
    if &h[..4] != WIRE_MAGIC {
        return Err(IoError::BadMagic);
    }
    if h[4] != WIRE_VERSION {
        return Err(IoError::UnsupportedVersion(h[4] as u32));
    }
    let len = u32::from_le_bytes(h[6..10].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return malformed(format!("payload length {len} exceeds the limit"));
    }
    Ok((h[5], len))
}

fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<WireMessage, IoError> {
    match msg_type {
        0 => {
            let mut r = Reader::new(payload);
            let agent_id = r.u32()?;
            r.finish()?;
            Ok(WireMessage::Hello { agent_id })
        }
        1 => Ok(WireMessage::Frame(decode_frame(payload)?)),
        2 if payload.is_empty() => Ok(WireMessage::Bye),
        2 => malformed("bye carries a payload"),
        t => malformed(format!("unknown message type {t}")),
    }
}

// ---------------------------------------------------------------------------
// Live ingest

/// Running listener. Dropping the handle does not stop it; call `shutdown`.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections. Open connections run to completion.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Listens on `addr`, one thread per connection, pushing frames into
/// `queue` in arrival order.
pub fn serve(addr: impl ToSocketAddrs, queue: SyncSender<FramePacket>) -> Result<ServerHandle, IoError> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let thread = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let q = queue.clone();
                    std::thread::spawn(move || {
                        if let Err(e) = handle_connection(stream, q) {
                            log::warn!("connection closed: {e}");
                        }
                    });
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    });
    Ok(ServerHandle { addr: local, stop, thread: Some(thread) })
}

fn handle_connection(mut stream: TcpStream, queue: SyncSender<FramePacket>) -> Result<(), IoError> {
    let mut reader = BufReader::new(stream.try_clone()?);
    loop {
        let msg = match WireMessage::read_from(&mut reader) {
            Ok(Some(m)) => m,
            Ok(None) => return Ok(()),
            Err(e) => {
                let status = if matches!(e, IoError::UnsupportedVersion(_)) { ACK_BAD_VERSION } else { ACK_MALFORMED };
                let _ = stream.write_all(&[status]);
                return Err(e);
            }
        };
        match msg {
            WireMessage::Hello { .. } => stream.write_all(&[ACK_OK])?,
            WireMessage::Frame(p) => {
                queue.send(p).map_err(|_| IoError::QueueClosed)?;
                stream.write_all(&[ACK_OK])?;
            }
            WireMessage::Bye => {
                stream.write_all(&[ACK_OK])?;
                return Ok(());
            }
        }
    }
}

/// Blocking client for the wire protocol.
pub struct Client {
    stream: TcpStream,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, IoError> {
        Ok(Client { stream: TcpStream::connect(addr)? })
    }

    /// Sends one message and waits for its status byte.
    pub fn send(&mut self, msg: &WireMessage) -> Result<u8, IoError> {
        self.send_raw(&msg.encode()?)
    }

    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<u8, IoError> {
        self.stream.write_all(bytes)?;
        let mut ack = [0u8; 1];
        self.stream.read_exact(&mut ack)?;
        Ok(ack[0])
    }
}

// ---------------------------------------------------------------------------
// Datasets

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STREAM_FILE: &str = "stream.ofsm";
pub const GROUND_TRUTH_FILE: &str = "groundtruth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub agent_id: AgentId,
    pub frame_id: u32,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub descriptor_dim: usize,
    pub scene: Option<SceneSpec>,
    pub frames: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthImage {
    pub image_id: ImageId,
    pub agent_id: AgentId,
    /// World-to-camera rotation as `[w, x, y, z]`.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl GroundTruthImage {
    pub fn pose(&self) -> Pose {
        Pose::new(quat(self.rotation), Vec3::from(self.translation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scene_diameter: f64,
    pub images: Vec<GroundTruthImage>,
}

fn quat([w, x, y, z]: [f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z))
}

fn quat_wxyz(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

impl GroundTruth {
    pub fn from_scene(scene: &SyntheticScene) -> Self {
        GroundTruth {
            scene_diameter: scene.spec.diameter(),
            images: scene
                .frames
                .iter()
                .map(|f| GroundTruthImage {
                    image_id: f.image_id,
                    agent_id: f.agent_id,
                    rotation: quat_wxyz(&f.pose.rotation),
                    translation: f.pose.translation.into(),
                })
                .collect(),
        }
    }

    pub fn poses(&self) -> BTreeMap<ImageId, Pose> {
        self.images.iter().map(|g| (g.image_id, g.pose())).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub packets: Vec<FramePacket>,
}

/// Orders packets by timestamp, then agent, then frame.
pub fn interleave(packets: &mut [FramePacket]) {
    packets.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then(a.agent_id.cmp(&b.agent_id)).then(a.frame_id.cmp(&b.frame_id)));
}

pub fn write_dataset(
    dir: &Path,
    packets: &[FramePacket],
    scene: Option<&SceneSpec>,
    ground_truth: Option<&GroundTruth>,
) -> Result<Manifest, IoError> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        version: 1,
        descriptor_dim: packets.first().map_or(0, |p| p.descriptor.len()),
        scene: scene.cloned(),
        frames: packets
            .iter()
            .map(|p| ManifestEntry { agent_id: p.agent_id, frame_id: p.frame_id, timestamp: p.timestamp })
            .collect(),
    };
    let mut stream = std::io::BufWriter::new(std::fs::File::create(dir.join(STREAM_FILE))?);
    for p in packets {
        stream.write_all(&WireMessage::Frame(p.clone()).encode()?)?;
    }
    stream.flush()?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    if let Some(gt) = ground_truth {
        std::fs::write(dir.join(GROUND_TRUTH_FILE), serde_json::to_string_pretty(gt)?)?;
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, IoError> {
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.version != 1 {
        return Err(IoError::UnsupportedVersion(manifest.version));
    }
    let mut reader = BufReader::new(std::fs::File::open(dir.join(STREAM_FILE))?);
    let mut packets = Vec::with_capacity(manifest.frames.len());
    for (index, entry) in manifest.frames.iter().enumerate() {
        let record = |reason: String| IoError::Record { index, reason };
        let p = match WireMessage::read_from(&mut reader) {
            Ok(Some(WireMessage::Frame(p))) => p,
            Ok(Some(_)) => return Err(record("not a frame message".into())),
            Ok(None) => return Err(record("missing".into())),
            Err(e) => return Err(record(e.to_string())),
        };
        if p.agent_id != entry.agent_id || p.frame_id != entry.frame_id {
            return Err(record(format!("stream holds {}/{}, manifest lists {}/{}", p.agent_id, p.frame_id, entry.agent_id, entry.frame_id)));
        }
        packets.push(p);
    }
    if !reader.fill_buf()?.is_empty() {
        return Err(IoError::Record { index: manifest.frames.len(), reason: "stream has records beyond the manifest".into() });
    }
    Ok(Dataset { manifest, packets })
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth, IoError> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayReport {
    pub packets: usize,
}

/// Pushes a dataset into the engine queue: manifest order for one agent,
/// timestamp order across agents, `delay` between frames.
pub fn replay(dir: &Path, queue: &SyncSender<FramePacket>, delay: Duration) -> Result<ReplayReport, IoError> {
    let mut data = read_dataset(dir)?;
    let agents: std::collections::BTreeSet<AgentId> = data.packets.iter().map(|p| p.agent_id).collect();
    if agents.len() > 1 {
        interleave(&mut data.packets);
    }
    let packets = data.packets.len();
    for p in data.packets {
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
        queue.send(p).map_err(|_| IoError::QueueClosed)?;
    }
    Ok(ReplayReport { packets })
}

pub struct RunOutcome {
    pub engine: Engine,
    pub events: Vec<FrameEvent>,
    /// Packets the engine refused, with the reason.
    pub rejected: Vec<(usize, String)>,
}

/// Single consumer loop: processes packets until the queue closes.
pub fn consume(engine: &mut Engine, queue: Receiver<FramePacket>) -> (Vec<FrameEvent>, Vec<(usize, String)>) {
    let mut events = Vec::new();
    let mut rejected = Vec::new();
    for (i, p) in queue.into_iter().enumerate() {
        match engine.process_frame(&p) {
            Ok(ev) => events.push(ev),
            Err(e) => {
                log::warn!("packet {i} rejected: {e}");
                rejected.push((i, e.to_string()));
            }
        }
    }
    (events, rejected)
}

/// Replays a dataset through a fresh engine (ingest on its own thread).
pub fn run_replay(dir: &Path, config: EngineConfig, delay: Duration) -> Result<RunOutcome, IoError> {
    let mut engine = Engine::new(config)?;
    let (tx, rx) = sync_channel(16);
    let dir = dir.to_path_buf();
    let ingest = std::thread::spawn(move || replay(&dir, &tx, delay));
    let (events, rejected) = consume(&mut engine, rx);
    ingest.join().expect("replay thread panicked")?;
    Ok(RunOutcome { engine, events, rejected })
}

// ---------------------------------------------------------------------------
// Index snapshots

pub fn write_hnsw_snapshot(index: &HnswIndex, w: &mut impl Write) -> Result<(), IoError> {
    let p = &index.params;
    let u32_of = |v: usize, what: &str| len_u32(v, what);
    let mut out = Vec::new();
    out.extend(SNAPSHOT_MAGIC);
    out.extend(SNAPSHOT_VERSION.to_le_bytes());
    out.extend(u32_of(index.dim, "dimension")?.to_le_bytes());
    out.extend(u32_of(p.max_connections, "max_connections")?.to_le_bytes());
    out.extend(p.level_mult.to_le_bytes());
    out.extend(u32_of(p.ef_construction, "ef_construction")?.to_le_bytes());
    out.extend(u32_of(p.ef_search, "ef_search")?.to_le_bytes());
    out.extend((p.max_elements as u64).to_le_bytes());
    out.extend(p.seed.to_le_bytes());
    out.extend((index.ids.len() as u64).to_le_bytes());
    out.push(index.entry_point.is_some() as u8);
    out.extend(index.entry_point.unwrap_or(0).to_le_bytes());
    out.extend(u32_of(index.top_layer, "top_layer")?.to_le_bytes());
    for (node, id) in index.ids.iter().enumerate() {
        out.extend(id.0.to_le_bytes());
        out.extend(u32_of(index.links[node].len(), "layers")?.to_le_bytes());
        for v in index.vector(node as u32) {
            out.extend(v.to_le_bytes());
        }
        for layer in &index.links[node] {
            out.extend(u32_of(layer.len(), "degree")?.to_le_bytes());
            for n in layer {
                out.extend(n.to_le_bytes());
            }
        }
    }
    w.write_all(&out)?;
    Ok(())
}

pub fn read_hnsw_snapshot(r: &mut impl Read) -> Result<HnswIndex, IoError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut r = Reader::new(&buf);
    if &r.array::<4>()? != SNAPSHOT_MAGIC {
        return Err(IoError::BadMagic);
    }
    let version = r.u32()?;
    if version != SNAPSHOT_VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let dim = r.u32()? as usize;
    let max_connections = r.u32()? as usize;
    let level_mult = r.f64()?;
    let ef_construction = r.u32()? as usize;
    let ef_search = r.u32()? as usize;
    let max_elements = r.u64()? as usize;
    let seed = r.u64()?;
    let params = HnswParams { max_elements, ef_construction, max_connections, level_mult, ef_search, seed };
    let mut index = HnswIndex::new(dim, params).map_err(|e| IoError::Malformed(e.to_string()))?;
    let count = r.u64()? as usize;
    if count > max_elements {
        return malformed("more nodes than capacity");
    }
    let has_entry = r.flag()?;
    let entry = r.u32()?;
    index.entry_point = has_entry.then_some(entry);
    index.top_layer = r.u32()? as usize;
    r.expect(count, 12 + dim * 4)?;
    for node in 0..count {
        let id = ImageId(r.u64()?);
        let layers = r.u32()? as usize;
        r.expect(layers, 4)?;
        index.vectors.extend(r.f32s(dim)?);
        let mut links = Vec::with_capacity(layers);
        for _ in 0..layers {
            let degree = r.u32()? as usize;
            r.expect(degree, 4)?;
            let adj = (0..degree).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            if adj.iter().any(|&n| n as usize >= count) {
                return malformed(format!("node {node} links past the node count"));
            }
            links.push(adj);
        }
        if index.by_id.insert(id, node as u32).is_some() {
            return malformed(format!("duplicate image {id}"));
        }
        index.ids.push(id);
        index.links.push(links);
    }
    r.finish()?;
    if (count == 0) == has_entry || index.entry_point.is_some_and(|e| e as usize >= count) {
        return malformed("inconsistent entry point");
    }
    index.check_invariants().map_err(IoError::Malformed)?;
    Ok(index)
}

// ---------------------------------------------------------------------------
// Reconstruction export

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExportObservation {
    pub image_id: ImageId,
    pub keypoint: u32,
    pub pixel: Vec2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportImage {
    pub camera_id: u32,
    pub pose: Pose,
    pub submap: SubmapId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportPoint {
    pub xyz: Vec3,
    pub track: Vec<ExportObservation>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReconstructionExport {
    pub cameras: BTreeMap<u32, CameraIntrinsics>,
    pub images: BTreeMap<ImageId, ExportImage>,
    pub points: BTreeMap<PointId, ExportPoint>,
}

/// One observation's reprojection residual, `None` when the point is behind the camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub point: PointId,
    pub image: ImageId,
    pub residual: Option<Vec2>,
}

fn real(s: &mut String, v: f64) {
    write!(s, " {v:.16e}").unwrap();
}

impl ReconstructionExport {
    pub fn from_engine(engine: &Engine) -> Self {
        let mut ex = ReconstructionExport::default();
        for (agent, k) in engine.agent_intrinsics() {
            ex.cameras.insert(*agent, *k);
        }
        for s in engine.registry().submaps.values() {
            for (id, r) in &s.images {
                ex.images.insert(*id, ExportImage { camera_id: id.agent(), pose: r.pose, submap: s.id });
            }
            for (pid, t) in &s.tracks {
                let track = t
                    .observations
                    .iter()
                    .map(|(img, o)| ExportObservation { image_id: *img, keypoint: o.keypoint, pixel: o.pixel })
                    .collect();
                ex.points.insert(*pid, ExportPoint { xyz: t.xyz, track });
            }
        }
        ex
    }

    pub fn validate(&self) -> Result<(), IoError> {
        for (id, im) in &self.images {
            if !self.cameras.contains_key(&im.camera_id) {
                return malformed(format!("image {id} references missing camera {}", im.camera_id));
            }
        }
        for (pid, p) in &self.points {
            for o in &p.track {
                if !self.images.contains_key(&o.image_id) {
                    return malformed(format!("point {} references missing image {}", pid.0, o.image_id));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(EXPORT_HEADER);
        s.push_str("\n[cameras]\n");
        for (id, k) in &self.cameras {
            write!(s, "{id}").unwrap();
            for v in [k.fx, k.fy, k.cx, k.cy] {
                real(&mut s, v);
            }
            writeln!(s, " {} {}", k.width, k.height).unwrap();
        }
        s.push_str("[images]\n");
        for (id, im) in &self.images {
            write!(s, "{} {}", id.0, im.camera_id).unwrap();
            for v in quat_wxyz(&im.pose.rotation) {
                real(&mut s, v);
            }
            for v in im.pose.translation.iter() {
                real(&mut s, *v);
            }
            writeln!(s, " {}", im.submap.0).unwrap();
        }
        s.push_str("[points]\n");
        for (pid, p) in &self.points {
            write!(s, "{}", pid.0).unwrap();
            for v in p.xyz.iter() {
                real(&mut s, *v);
            }
            write!(s, " {}", p.track.len()).unwrap();
            for o in &p.track {
                write!(s, " {}:{}:{:.16e}:{:.16e}", o.image_id.0, o.keypoint, o.pixel.x, o.pixel.y).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, IoError> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Cameras,
            Images,
            Points,
        }
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == EXPORT_HEADER => {}
            _ => return Err(IoError::Parse { line: 1, reason: "missing export header".into() }),
        }
        let mut ex = ReconstructionExport::default();
        let mut section = Section::None;
        for (i, line) in lines {
            let line_no = i + 1;
            let err = |reason: String| IoError::Parse { line: line_no, reason };
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[cameras]" => section = Section::Cameras,
                "[images]" => section = Section::Images,
                "[points]" => section = Section::Points,
                _ => {
                    let f: Vec<&str> = line.split_whitespace().collect();
                    let num = |k: usize| -> Result<f64, IoError> {
                        f.get(k).ok_or_else(|| err(format!("missing field {k}")))?.parse().map_err(|e| err(format!("field {k}: {e}")))
                    };
                    let int = |k: usize| -> Result<u64, IoError> {
                        f.get(k).ok_or_else(|| err(format!("missing field {k}")))?.parse().map_err(|e| err(format!("field {k}: {e}")))
                    };
                    match section {
                        Section::None => return Err(err("record outside a section".into())),
                        Section::Cameras => {
                            if f.len() != 7 {
                                return Err(err(format!("camera needs 7 fields, got {}", f.len())));
                            }
                            let k = CameraIntrinsics {
                                fx: num(1)?,
                                fy: num(2)?,
                                cx: num(3)?,
                                cy: num(4)?,
                                width: int(5)? as u32,
                                height: int(6)? as u32,
                            };
                            if ex.cameras.insert(int(0)? as u32, k).is_some() {
                                return Err(err("duplicate camera".into()));
                            }
                        }
                        Section::Images => {
                            if f.len() != 10 {
                                return Err(err(format!("image needs 10 fields, got {}", f.len())));
                            }
                            let pose = Pose::new(quat([num(2)?, num(3)?, num(4)?, num(5)?]), Vec3::new(num(6)?, num(7)?, num(8)?));
                            let im = ExportImage { camera_id: int(1)? as u32, pose, submap: SubmapId(int(9)? as u32) };
                            if ex.images.insert(ImageId(int(0)?), im).is_some() {
                                return Err(err("duplicate image".into()));
                            }
                        }
                        Section::Points => {
                            let n = int(4)? as usize;
                            if f.len() != 5 + n {
                                return Err(err(format!("point lists {} observations, expected {n}", f.len() - 5)));
                            }
                            let mut track = Vec::with_capacity(n);
                            for tok in &f[5..] {
                                let parts: Vec<&str> = tok.split(':').collect();
                                let bad = |e: String| err(format!("observation {tok}: {e}"));
                                if parts.len() != 4 {
                                    return Err(bad("expected image:keypoint:u:v".into()));
                                }
                                track.push(ExportObservation {
                                    image_id: ImageId(parts[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?),
                                    keypoint: parts[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                                    pixel: Vec2::new(
                                        parts[2].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                                        parts[3].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                                    ),
                                });
                            }
                            let p = ExportPoint { xyz: Vec3::new(num(1)?, num(2)?, num(3)?), track };
                            if ex.points.insert(PointId(int(0)?), p).is_some() {
                                return Err(err("duplicate point".into()));
                            }
                        }
                    }
                }
            }
        }
        ex.validate()?;
        Ok(ex)
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Reprojection residuals in point, then track order.
    pub fn residuals(&self) -> Vec<Residual> {
        let mut out = Vec::new();
        for (pid, p) in &self.points {
            for o in &p.track {
                let im = &self.images[&o.image_id];
                let k = &self.cameras[&im.camera_id];
                let residual = project(k, &im.pose, &p.xyz).ok().map(|px| px - o.pixel);
                out.push(Residual { point: *pid, image: o.image_id, residual });
            }
        }
        out
    }

    pub fn mean_reprojection_error(&self) -> f64 {
        let errs: Vec<f64> = self.residuals().iter().filter_map(|r| r.residual.map(|v| v.norm())).collect();
        if errs.is_empty() {
            0.0
        } else {
            errs.iter().sum::<f64>() / errs.len() as f64
        }
    }

    pub fn mean_track_length(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        self.points.values().map(|p| p.track.len()).sum::<usize>() as f64 / self.points.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub ground_truth_images: usize,
    pub registered_images: usize,
    /// Images whose pose was compared after alignment.
    pub aligned_images: usize,
    pub aligned_submaps: usize,
    pub mre: f64,
    pub mtl: f64,
    /// Mean rotation discrepancy after alignment, degrees.
    pub mrd_deg: f64,
    pub max_rotation_error_deg: f64,
    /// RMS camera-center error after alignment, scene units.
    pub ate: f64,
    /// ATE relative to the scene diameter.
    pub ate_ratio: f64,
}

/// Compares an export with ground truth. Each submap is aligned to ground
/// truth by a similarity fitted to camera centers; submaps with fewer than
/// three common images are skipped.
pub fn evaluate(export: &ReconstructionExport, gt: &GroundTruth) -> Result<Evaluation, IoError> {
    let truth = gt.poses();
    let mut by_submap: BTreeMap<SubmapId, Vec<(ImageId, &ExportImage)>> = BTreeMap::new();
    for (id, im) in &export.images {
        if truth.contains_key(id) {
            by_submap.entry(im.submap).or_default().push((*id, im));
        }
    }
    let common: usize = by_submap.values().map(Vec::len).sum();
    let (mut rot_sum, mut rot_max, mut sq_sum, mut n, mut submaps) = (0.0, 0.0f64, 0.0, 0usize, 0usize);
    for images in by_submap.values() {
        if images.len() < 3 {
            continue;
        }
        let src: Vec<Vec3> = images.iter().map(|(_, im)| im.pose.center()).collect();
        let dst: Vec<Vec3> = images.iter().map(|(id, _)| truth[id].center()).collect();
        let Ok(t) = estimate_similarity_umeyama(&src, &dst) else { continue };
        submaps += 1;
        for (id, im) in images {
            let aligned = t.apply_pose(&im.pose);
            let g = &truth[id];
            let angle = (aligned.rotation * g.rotation.inverse()).angle().to_degrees();
            rot_sum += angle;
            rot_max = rot_max.max(angle);
            sq_sum += (aligned.center() - g.center()).norm_squared();
            n += 1;
        }
    }
    if n == 0 {
        return Err(IoError::AlignmentImpossible { common });
    }
    let ate = (sq_sum / n as f64).sqrt();
    Ok(Evaluation {
        ground_truth_images: truth.len(),
        registered_images: export.images.len(),
        aligned_images: n,
        aligned_submaps: submaps,
        mre: export.mean_reprojection_error(),
        mtl: export.mean_track_length(),
        mrd_deg: rot_sum / n as f64,
        max_rotation_error_deg: rot_max,
        ate,
        ate_ratio: if gt.scene_diameter > 0.0 { ate / gt.scene_diameter } else { f64::NAN },
    })
}

// ---------------------------------------------------------------------------
// Metrics report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub summary: FinalReport,
    pub frame_times_s: Vec<f64>,
    pub submap_timeline: Vec<usize>,
    pub metrics: EngineMetrics,
    pub evaluation: Option<Evaluation>,
}

impl MetricsReport {
    pub fn new(engine: &Engine, summary: FinalReport, evaluation: Option<Evaluation>) -> Self {
        let m = engine.metrics();
        MetricsReport {
            seed: engine.config().seed,
            summary,
            frame_times_s: m.frames.iter().map(|f| f.wall_time_s).collect(),
            submap_timeline: m.frames.iter().map(|f| f.submap_count).collect(),
            metrics: m.clone(),
            evaluation,
        }
    }

    pub fn to_json(&self) -> Result<String, IoError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthstream::{generate, render_packets};

    fn sample_packet() -> FramePacket {
        FramePacket {
            agent_id: 3,
            frame_id: 17,
            timestamp: 2.5,
            intrinsics: CameraIntrinsics { fx: 500.0, fy: 501.0, cx: 320.0, cy: 240.0, width: 640, height: 480 },
            keypoints: vec![[1.0, 2.0], [300.5, 200.25]],
            descriptor: vec![0.5, -0.5, 0.25],
            oracle: Some(vec![7, u64::MAX]),
            keypoint_descriptors: Some(KeypointDescriptors { dim: 2, values: vec![1.0, 2.0, 3.0, 4.0] }),
        }
    }

    #[test]
    fn frame_message_round_trips() {
        let m = WireMessage::Frame(sample_packet());
        let bytes = m.encode().unwrap();
        assert_eq!(&bytes[..4], b"OFSM");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize, bytes.len() - 10);
        let (back, used) = WireMessage::decode(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, m);
    }

    #[test]
    fn hello_and_bye_layout() {
        let h = WireMessage::Hello { agent_id: 258 }.encode().unwrap();
        assert_eq!(h, [b'O', b'F', b'S', b'M', 1, 0, 4, 0, 0, 0, 2, 1, 0, 0]);
        let b = WireMessage::Bye.encode().unwrap();
        assert_eq!(b, [b'O', b'F', b'S', b'M', 1, 2, 0, 0, 0, 0]);
    }

    #[test]
    fn rejects_bad_headers_and_truncation() {
        let mut bytes = WireMessage::Frame(sample_packet()).encode().unwrap();
        assert!(matches!(WireMessage::decode(&bytes[..bytes.len() - 1]), Err(IoError::Malformed(_))));
        bytes[4] = 9;
        assert!(matches!(WireMessage::decode(&bytes), Err(IoError::UnsupportedVersion(9))));
        bytes[0] = b'X';
        assert!(matches!(WireMessage::decode(&bytes), Err(IoError::BadMagic)));
        // A keypoint count far beyond the payload must not allocate.
        let mut p = encode_frame(&sample_packet()).unwrap();
        p[56..60].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_frame(&p).is_err());
    }

    #[test]
    fn server_acknowledges_and_enqueues() {
        let (tx, rx) = sync_channel(4);
        let server = serve("127.0.0.1:0", tx).unwrap();
        let addr = server.local_addr();
        let mut c = Client::connect(addr).unwrap();
        assert_eq!(c.send(&WireMessage::Hello { agent_id: 3 }).unwrap(), ACK_OK);
        assert_eq!(c.send(&WireMessage::Frame(sample_packet())).unwrap(), ACK_OK);
        assert_eq!(rx.recv().unwrap(), sample_packet());
        assert_eq!(c.send(&WireMessage::Bye).unwrap(), ACK_OK);

        let mut bad = Client::connect(addr).unwrap();
        assert_eq!(bad.send_raw(b"NOPE\x01\x00\x00\x00\x00\x00").unwrap(), ACK_MALFORMED);
        let mut old = Client::connect(addr).unwrap();
        assert_eq!(old.send_raw(b"OFSM\x07\x00\x00\x00\x00\x00").unwrap(), ACK_BAD_VERSION);
        server.shutdown();
    }

    #[test]
    fn dataset_round_trip_and_truncation() {
        let scene = generate(&SceneSpec::two_agent(4)).unwrap();
        let mut packets = render_packets(&scene);
        interleave(&mut packets);
        let dir = tempfile::tempdir().unwrap();
        let gt = GroundTruth::from_scene(&scene);
        write_dataset(dir.path(), &packets, Some(&scene.spec), Some(&gt)).unwrap();
        let data = read_dataset(dir.path()).unwrap();
        assert_eq!(data.packets, packets);
        assert_eq!(read_ground_truth(&dir.path().join(GROUND_TRUTH_FILE)).unwrap(), gt);

        let (tx, rx) = sync_channel(100);
        assert_eq!(replay(dir.path(), &tx, Duration::ZERO).unwrap().packets, 8);
        drop(tx);
        let got: Vec<FramePacket> = rx.into_iter().collect();
        assert!(got.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));

        let stream = dir.path().join(STREAM_FILE);
        let bytes = std::fs::read(&stream).unwrap();
        std::fs::write(&stream, &bytes[..bytes.len() - 5]).unwrap();
        match read_dataset(dir.path()) {
            Err(IoError::Record { index, .. }) => assert_eq!(index, 7),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let mut index = HnswIndex::new(8, HnswParams { seed: 5, ..Default::default() }).unwrap();
        let scene = generate(&SceneSpec::single_agent(40)).unwrap();
        for (i, f) in scene.frames.iter().enumerate() {
            let d = crate::synthstream::make_descriptor(f.image_id, &f.visible, 8, 0.01, i as u64).unwrap();
            index.insert(&d).unwrap();
        }
        let mut bytes = Vec::new();
        write_hnsw_snapshot(&index, &mut bytes).unwrap();
        let back = read_hnsw_snapshot(&mut bytes.as_slice()).unwrap();
        let mut again = Vec::new();
        write_hnsw_snapshot(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
        let q = index.vector(3).to_vec();
        assert_eq!(index.query_top_n(&q, 10).unwrap(), back.query_top_n(&q, 10).unwrap());
        assert!(read_hnsw_snapshot(&mut &bytes[..bytes.len() - 1]).is_err());
    }

    fn toy_export() -> ReconstructionExport {
        let k = CameraIntrinsics { fx: 500.0, fy: 500.0, cx: 320.0, cy: 240.0, width: 640, height: 480 };
        let mut ex = ReconstructionExport::default();
        ex.cameras.insert(0, k);
        for i in 0..4u64 {
            let pose = Pose::look_at(&Vec3::new(i as f64, -10.0 + 0.5 * (i * i) as f64, 0.3 * i as f64), &Vec3::zeros(), &Vec3::new(0.0, 0.0, -1.0));
            ex.images.insert(ImageId(i), ExportImage { camera_id: 0, pose, submap: SubmapId(0) });
        }
        for j in 0..5u64 {
            let xyz = Vec3::new(j as f64 * 0.3 - 0.6, 0.1 * j as f64, 0.2);
            let track = (0..4u64)
                .map(|i| {
                    let px = project(&k, &ex.images[&ImageId(i)].pose, &xyz).unwrap();
                    ExportObservation { image_id: ImageId(i), keypoint: j as u32, pixel: px + Vec2::new(0.1, -0.2) }
                })
                .collect();
            ex.points.insert(PointId(j), ExportPoint { xyz, track });
        }
        ex
    }

    #[test]
    fn export_text_round_trips_exactly() {
        let ex = toy_export();
        let text = ex.to_text();
        let back = ReconstructionExport::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        for (a, b) in ex.residuals().iter().zip(back.residuals()) {
            assert!((a.residual.unwrap() - b.residual.unwrap()).norm() <= 1e-9);
        }
        assert!((ex.mean_reprojection_error() - 0.05f64.sqrt()).abs() < 1e-9);
        assert_eq!(ex.mean_track_length(), 4.0);
    }

    #[test]
    fn export_rejects_dangling_references() {
        let mut ex = toy_export();
        ex.images.remove(&ImageId(2));
        assert!(ReconstructionExport::from_text(&ex.to_text()).is_err());
        assert!(ReconstructionExport::from_text("[cameras]\n").is_err());
    }

    #[test]
    fn evaluation_absorbs_the_gauge() {
        let ex = toy_export();
        let gt = GroundTruth {
            scene_diameter: 20.0,
            images: ex
                .images
                .iter()
                .map(|(id, im)| GroundTruthImage {
                    image_id: *id,
                    agent_id: 0,
                    rotation: quat_wxyz(&im.pose.rotation),
                    translation: im.pose.translation.into(),
                })
                .collect(),
        };
        let e = evaluate(&ex, &gt).unwrap();
        assert!(e.mrd_deg < 1e-6 && e.ate < 1e-9, "{e:?}");

        let t = crate::geometry::SimilarityTransform::new(
            2.5,
            UnitQuaternion::from_euler_angles(0.3, -0.2, 1.0),
            Vec3::new(4.0, -1.0, 2.0),
        );
        let mut moved = ex.clone();
        for im in moved.images.values_mut() {
            im.pose = t.apply_pose(&im.pose);
        }
        let e = evaluate(&moved, &gt).unwrap();
        assert!(e.mrd_deg < 1e-6 && e.ate < 1e-9, "{e:?}");

        let mut few = ex.clone();
        few.images.retain(|id, _| id.0 < 2);
        few.points.clear();
        assert!(matches!(evaluate(&few, &gt), Err(IoError::AlignmentImpossible { common: 2 })));
    }
}
