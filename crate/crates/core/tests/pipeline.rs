use std::sync::mpsc::sync_channel;
use std::time::Duration;

use otf_sfm::engine::{Engine, EngineConfig, FrameOutcome};
use otf_sfm::io::{
    consume, interleave, read_dataset, read_hnsw_snapshot, run_replay, serve, write_dataset, write_hnsw_snapshot, Client,
    GroundTruth, IoError, ReconstructionExport, WireMessage, ACK_BAD_VERSION, ACK_MALFORMED, ACK_OK, STREAM_FILE,
};
use otf_sfm::synthstream::{generate, render_packets, SceneSpec};

fn short_scene(frames: usize) -> (SceneSpec, otf_sfm::synthstream::SyntheticScene) {
    // A slice of a dense orbit keeps neighboring views close together.
    let mut spec = SceneSpec { seed: 9, ..SceneSpec::single_agent(150) };
    let a = &mut spec.agents[0];
    a.end_angle_deg = a.start_angle_deg + 2.4 * (frames - 1) as f64;
    a.frames = frames;
    let scene = generate(&spec).unwrap();
    (spec, scene)
}

#[test]
fn live_ingest_reconstructs_what_it_receives() {
    let (_, scene) = short_scene(12);
    let packets = render_packets(&scene);
    let (tx, rx) = sync_channel(4);
    let server = serve("127.0.0.1:0", tx).unwrap();
    let addr = server.local_addr();
    let sender = std::thread::spawn(move || {
        let mut client = Client::connect(addr).unwrap();
        assert_eq!(client.send(&WireMessage::Hello { agent_id: 0 }).unwrap(), ACK_OK);
        for p in packets {
            assert_eq!(client.send(&WireMessage::Frame(p)).unwrap(), ACK_OK);
        }
        assert_eq!(client.send(&WireMessage::Bye).unwrap(), ACK_OK);
    });
    let mut engine = Engine::new(EngineConfig::default()).unwrap();
    let consumer = std::thread::spawn(move || {
        let (events, rejected) = consume(&mut engine, rx);
        (engine, events, rejected)
    });
    sender.join().unwrap();
    server.shutdown();
    let (mut engine, events, rejected) = consumer.join().unwrap();
    assert!(rejected.is_empty());
    assert_eq!(events.len(), 12);
    assert!(events.iter().filter(|e| !matches!(e.outcome, FrameOutcome::Pooled)).count() >= 10);
    let report = engine.finalize();
    assert_eq!(report.frames, 12);
    assert!(report.mre < 2.0, "{report:?}");
}

#[test]
fn server_reports_bad_messages() {
    let (tx, _rx) = sync_channel(1);
    let server = serve("127.0.0.1:0", tx).unwrap();

    let mut bytes = WireMessage::Bye.encode().unwrap();
    bytes[4] = 9;
    assert_eq!(Client::connect(server.local_addr()).unwrap().send_raw(&bytes).unwrap(), ACK_BAD_VERSION);

    let mut bytes = WireMessage::Bye.encode().unwrap();
    bytes[0] = b'X';
    assert_eq!(Client::connect(server.local_addr()).unwrap().send_raw(&bytes).unwrap(), ACK_MALFORMED);
    server.shutdown();
}

#[test]
fn corrupted_stream_names_the_record() {
    let (spec, scene) = short_scene(5);
    let dir = tempfile::tempdir().unwrap();
    let mut packets = render_packets(&scene);
    interleave(&mut packets);
    write_dataset(dir.path(), &packets, Some(&spec), Some(&GroundTruth::from_scene(&scene))).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap().packets, packets);

    let path = dir.path().join(STREAM_FILE);
    let mut raw = std::fs::read(&path).unwrap();
    let first = WireMessage::Frame(packets[0].clone()).encode().unwrap().len();
    let second = WireMessage::Frame(packets[1].clone()).encode().unwrap().len();
    raw[first + second] = b'Z';
    std::fs::write(&path, raw).unwrap();
    match read_dataset(dir.path()) {
        Err(IoError::Record { index, .. }) => assert_eq!(index, 2),
        other => panic!("expected a record error, got {other:?}"),
    }
}

#[test]
fn replay_is_repeatable_and_export_survives_disk() {
    let (spec, scene) = short_scene(10);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &render_packets(&scene), Some(&spec), None).unwrap();
    let run = |delay| {
        let mut out = run_replay(dir.path(), EngineConfig::default(), delay).unwrap();
        out.engine.finalize();
        ReconstructionExport::from_engine(&out.engine)
    };
    let a = run(Duration::ZERO);
    let b = run(Duration::from_millis(1));
    assert_eq!(a, b);
    a.validate().unwrap();
    let file = dir.path().join("export.txt");
    a.write(&file).unwrap();
    assert_eq!(ReconstructionExport::read(&file).unwrap(), a);
}

#[test]
fn engine_index_snapshot_round_trips() {
    let (_, scene) = short_scene(8);
    let mut engine = Engine::new(EngineConfig::default()).unwrap();
    for p in render_packets(&scene) {
        engine.process_frame(&p).unwrap();
    }
    let mut buf = Vec::new();
    write_hnsw_snapshot(engine.index(), &mut buf).unwrap();
    let back = read_hnsw_snapshot(&mut buf.as_slice()).unwrap();
    assert_eq!(back.len(), engine.index().len());
    let q = back.vector(3).to_vec();
    assert_eq!(back.query_top_n(&q, 5).unwrap(), engine.index().query_top_n(&q, 5).unwrap());
    let mut again = Vec::new();
    write_hnsw_snapshot(&back, &mut again).unwrap();
    assert_eq!(again, buf);
}
