use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use otf_sfm::engine::{Engine, EngineConfig};
use otf_sfm::io::{
    evaluate, interleave, read_ground_truth, run_replay, serve, write_dataset, GroundTruth, MetricsReport,
    ReconstructionExport, GROUND_TRUTH_FILE,
};
use otf_sfm::retrieval::{exhaustive_query, recall, GlobalDescriptor, HnswIndex};
use otf_sfm::synthstream::{generate, render_packets, SceneSpec};
use otf_sfm::ImageId;

/// Settings file: every field optional, flags override.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct Config {
    engine: EngineConfig,
    scene: SceneSpec,
}

#[derive(Parser)]
#[command(name = "otf-sfm", version, about = "On-the-fly multi-agent structure from motion")]
struct Cli {
    /// TOML settings file with optional [engine] and [scene] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the engine and the scene generator.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a ground-truth sidecar.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Frames per agent.
        #[arg(long)]
        frames: Option<usize>,
        /// 1 for a single orbit, 2 for the converging two-agent layout.
        #[arg(long)]
        agents: Option<usize>,
    },
    /// Run a dataset through the engine and write export and metrics.
    Replay {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        delay_ms: u64,
    },
    /// Accept frames over TCP and reconstruct them live.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many frames.
        #[arg(long)]
        max_frames: Option<usize>,
        #[arg(long, default_value_t = 16)]
        queue: usize,
    },
    /// Compare an export against a ground-truth sidecar.
    Eval {
        #[arg(long)]
        export: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
    },
    /// HNSW versus exhaustive retrieval, as CSV.
    BenchRetrieval {
        #[arg(long, value_delimiter = ',', default_value = "1000,2000,4000,8000")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        queries: usize,
        #[arg(long, default_value_t = 256)]
        dim: usize,
        #[arg(long, default_value_t = 30)]
        top_n: usize,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => toml::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.engine.seed = s;
        cfg.scene.seed = s;
    }
    Ok(cfg)
}

fn write_outputs(engine: &mut Engine, out: &Path, ground_truth: Option<GroundTruth>) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let summary = engine.finalize();
    let export = ReconstructionExport::from_engine(engine);
    export.write(&out.join("export.txt"))?;
    let evaluation = match ground_truth {
        Some(gt) => match evaluate(&export, &gt) {
            Ok(e) => Some(e),
            Err(e) => {
                log::warn!("evaluation skipped: {e}");
                None
            }
        },
        None => None,
    };
    let report = MetricsReport::new(engine, summary, evaluation);
    std::fs::write(out.join("metrics.json"), report.to_json()?)?;
    let s = &report.summary;
    println!(
        "frames {} registered {} submaps {} points {} mre {:.4} mfre {:.4} amre {:.4} mtl {:.2} mean frame time {:.3}s",
        s.frames, s.registered, s.submap_count, s.points, s.mre, s.mfre, s.amre, s.mtl, s.mean_frame_time_s
    );
    if let Some(e) = &report.evaluation {
        println!("mrd {:.4} deg ate {:.5} ({:.3e} of diameter)", e.mrd_deg, e.ate, e.ate_ratio);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut cfg = load_config(cli.config.as_deref(), cli.seed)?;
    println!("seed {}", cfg.engine.seed);

    match cli.command {
        Command::Gen { out, frames, agents } => {
            let seed = cfg.scene.seed;
            if frames.is_some() || agents.is_some() {
                let n = frames.unwrap_or(150);
                cfg.scene = match agents.unwrap_or(1) {
                    1 => SceneSpec::single_agent(n),
                    2 => SceneSpec::two_agent(n),
                    a => bail!("unsupported agent count {a}"),
                };
                cfg.scene.seed = seed;
            }
            let scene = generate(&cfg.scene)?;
            let mut packets = render_packets(&scene);
            interleave(&mut packets);
            write_dataset(&out, &packets, Some(&scene.spec), Some(&GroundTruth::from_scene(&scene)))?;
            println!("wrote {} frames to {}", packets.len(), out.display());
        }
        Command::Replay { dataset, out, delay_ms } => {
            let mut run = run_replay(&dataset, cfg.engine, Duration::from_millis(delay_ms))?;
            if !run.rejected.is_empty() {
                println!("{} packets rejected", run.rejected.len());
            }
            let gt_path = dataset.join(GROUND_TRUTH_FILE);
            let gt = if gt_path.exists() { Some(read_ground_truth(&gt_path)?) } else { None };
            write_outputs(&mut run.engine, &out, gt)?;
        }
        Command::Serve { bind, out, max_frames, queue } => {
            let mut engine = Engine::new(cfg.engine)?;
            let (tx, rx) = sync_channel(queue.max(1));
            let server = serve(bind.as_str(), tx)?;
            println!("listening on {}", server.local_addr());
            let mut processed = 0;
            for packet in rx.iter() {
                match engine.process_frame(&packet) {
                    Ok(ev) => log::info!("{} {:?} in {:.3}s", ev.image_id, ev.outcome, ev.wall_time_s),
                    Err(e) => log::warn!("frame rejected: {e}"),
                }
                processed += 1;
                if max_frames.is_some_and(|m| processed >= m) {
                    break;
                }
            }
            server.shutdown();
            write_outputs(&mut engine, &out, None)?;
        }
        Command::Eval { export, ground_truth } => {
            let ex = ReconstructionExport::read(&export)?;
            let gt = read_ground_truth(&ground_truth)?;
            println!("{}", serde_json::to_string_pretty(&evaluate(&ex, &gt)?)?);
        }
        Command::BenchRetrieval { sizes, queries, dim, top_n } => bench_retrieval(&cfg, &sizes, queries, dim, top_n)?,
    }
    Ok(())
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize, id: u64) -> Result<GlobalDescriptor> {
    let v = (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Ok(GlobalDescriptor::new(ImageId(id), v)?)
}

fn bench_retrieval(cfg: &Config, sizes: &[usize], queries: usize, dim: usize, top_n: usize) -> Result<()> {
    println!("n,recall,hnsw_query_us,exhaustive_query_us,speedup");
    let max = sizes.iter().copied().max().unwrap_or(0);
    let mut state = ChaCha8Rng::seed_from_u64(cfg.engine.seed);
    let data: Vec<GlobalDescriptor> = (0..max).map(|i| random_unit(&mut state, dim, i as u64)).collect::<Result<_>>()?;
    let probes: Vec<GlobalDescriptor> =
        (0..queries).map(|i| random_unit(&mut state, dim, u64::MAX - i as u64)).collect::<Result<_>>()?;
    let params = otf_sfm::retrieval::HnswParams { max_elements: max.max(1), ..cfg.engine.hnsw };
    let mut index = HnswIndex::new(dim, params)?;
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    for n in sorted {
        while index.len() < n {
            index.insert(&data[index.len()])?;
        }
        let (mut t_h, mut t_e, mut rec) = (Duration::ZERO, Duration::ZERO, 0.0);
        for q in &probes {
            let t = Instant::now();
            let approx = index.query_top_n(q.values(), top_n)?;
            t_h += t.elapsed();
            let t = Instant::now();
            let exact = exhaustive_query(data[..n].iter(), q, top_n);
            t_e += t.elapsed();
            rec += recall(&approx, &exact);
        }
        let k = probes.len().max(1) as f64;
        let (h, e) = (t_h.as_secs_f64() * 1e6 / k, t_e.as_secs_f64() * 1e6 / k);
        println!("{n},{:.4},{h:.1},{e:.1},{:.2}", rec / k, e / h);
    }
    Ok(())
}
