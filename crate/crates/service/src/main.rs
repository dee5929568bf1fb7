use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::RngCore;

use champ::bus::{self, BusConfig, Calibration, DeviceProfile, DEFAULT_FRAME_BYTES};
use champ::cartridge::Catalog;
use champ::experiments::{self, ExperimentReport, DEFAULT_LATENCY_FRAMES, DEFAULT_SCALING_FRAMES};
use champ::gallery::{encrypt_gallery, Gallery, KEY_LEN};
use champ::scenario::{Scenario, DEFAULT_INITIAL};
use champ_service::api::SlotAssignment;
use champ_service::plane::{load_gallery, resolve_key};
use champ_service::{ApiRequest, Client, ControlCommand, ControlPlane, RequestBody, ServerEvent, ServiceConfig};

const DEFAULT_ADDR: &str = "127.0.0.1:7878";

#[derive(Parser)]
#[command(name = "champ", version, about = "Hot-swappable accelerator pipeline simulator")]
struct Cli {
    /// Seed for every random choice in the run.
    #[arg(long, global = true, env = "CHAMP_SEED", default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the live service with its control API.
    Serve(ServeArgs),
    /// Play a hot-swap scenario file in simulated time.
    RunScenario {
        file: PathBuf,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Fit a contention profile to an `n,fps` table.
    Calibrate {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        profile: String,
        /// Profiles file to add the result to.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(subcommand)]
    Experiment(Experiment),
    #[command(subcommand)]
    Gallery(GalleryCmd),
    /// Plug a cartridge into a running service.
    Plug {
        #[arg(long)]
        slot: u32,
        #[arg(long)]
        preset: String,
        #[command(flatten)]
        conn: ConnArgs,
    },
    /// Pull the cartridge out of a slot.
    Unplug {
        #[arg(long)]
        slot: u32,
        #[command(flatten)]
        conn: ConnArgs,
    },
    /// Move cartridges between slots, e.g. `--map 0:1,1:0`.
    Reorder {
        #[arg(long, value_delimiter = ',', value_parser = parse_assignment)]
        map: Vec<SlotAssignment>,
        #[command(flatten)]
        conn: ConnArgs,
    },
    /// Change the source frame rate.
    Rate {
        #[arg(long)]
        fps: f64,
        #[command(flatten)]
        conn: ConnArgs,
    },
    /// Schedule a scenario file on the running service.
    Schedule {
        path: PathBuf,
        #[command(flatten)]
        conn: ConnArgs,
    },
    /// Swap in a gallery for database cartridges plugged from now on.
    LoadGallery {
        path: PathBuf,
        #[arg(long)]
        key_ref: Option<String>,
        #[command(flatten)]
        conn: ConnArgs,
    },
    /// Ask the service to stop.
    Shutdown {
        #[command(flatten)]
        conn: ConnArgs,
    },
    /// Stream topology, metrics and alerts as JSON lines.
    Top {
        /// Stop after this many events.
        #[arg(long)]
        count: Option<usize>,
        #[command(flatten)]
        conn: ConnArgs,
    },
}

#[derive(Args)]
struct ServeArgs {
    /// Catalog JSON; the built-in presets when omitted.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_ADDR)]
    listen: String,
    #[arg(long)]
    ws_listen: Option<String>,
    /// Presets for slots 0.. at boot; `none` for an empty bus.
    #[arg(long, value_delimiter = ',')]
    initial: Option<Vec<String>>,
    #[arg(long, default_value_t = 30.0)]
    source_fps: f64,
    /// Wall-clock step of the simulation driver, milliseconds.
    #[arg(long, default_value_t = 5)]
    tick_ms: u64,
}

#[derive(Args)]
struct ConnArgs {
    #[arg(long, default_value = DEFAULT_ADDR)]
    connect: String,
}

#[derive(Args)]
struct OutputArgs {
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write the summary table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Experiment {
    /// Broadcast frame rate against device count.
    Scaling {
        #[arg(long, default_value = "coral")]
        profile: String,
        /// Profiles file from `calibrate --out`; built-in tables otherwise.
        #[arg(long)]
        profiles: Option<PathBuf>,
        /// Device counts, e.g. `1-5` or `1,2,4`.
        #[arg(long, default_value = "1-5", value_parser = parse_range)]
        n: DeviceRange,
        #[arg(long, default_value_t = DEFAULT_SCALING_FRAMES)]
        frames: u64,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// End-to-end latency of a straight pipeline.
    Latency {
        /// Per-stage mean latency in ms.
        #[arg(long, value_delimiter = ',', default_value = "30,30,30")]
        stages: Vec<u32>,
        #[arg(long, default_value_t = DEFAULT_LATENCY_FRAMES)]
        frames: u64,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Same as `run-scenario`.
    Hotswap {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// System power extrapolation.
    Power {
        #[arg(long, default_value_t = 5)]
        devices: u32,
        #[arg(long, default_value_t = 1.5)]
        watts: f64,
        #[arg(long, default_value_t = 2.5)]
        host_watts: f64,
        #[command(flatten)]
        out: OutputArgs,
    },
}

#[derive(Subcommand)]
enum GalleryCmd {
    /// Encrypt a plaintext gallery into a sealed container.
    Seal {
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// `env:NAME` or `file:PATH` holding a hex key.
        #[arg(long)]
        key_ref: String,
        #[arg(long, default_value = "default")]
        key_id: String,
    },
    /// Print a fresh random key as hex.
    Keygen,
    /// Decrypt (if sealed) and summarize a gallery file.
    Inspect {
        path: PathBuf,
        #[arg(long)]
        key_ref: Option<String>,
    },
}

#[derive(Clone)]
struct DeviceRange(Vec<usize>);

fn parse_range(s: &str) -> Result<DeviceRange, String> {
    let bad = || format!("bad device range `{s}`");
    if let Some((a, b)) = s.split_once('-') {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if a == 0 || a > b {
            return Err(bad());
        }
        return Ok(DeviceRange((a..=b).collect()));
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>().map(DeviceRange)
}

fn parse_assignment(s: &str) -> Result<SlotAssignment, String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected FROM:TO, got `{s}`"))?;
    Ok(SlotAssignment {
        from: a.trim().parse().map_err(|e| format!("{a}: {e}"))?,
        to: b.trim().parse().map_err(|e| format!("{b}: {e}"))?,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("champ: {e}");
            ExitCode::from(2)
        }
    }
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn run(cli: Cli) -> AnyResult<ExitCode> {
    let seed = cli.seed;
    match cli.command {
        Command::Serve(args) => serve(args, seed),
        Command::RunScenario { file, catalog, out } => {
            let report = hotswap(&file, catalog.as_deref(), seed)?;
            emit(&report, &out)
        }
        Command::Calibrate { table, profile, out } => calibrate(&table, &profile, out.as_deref()),
        Command::Experiment(e) => {
            let (report, out) = match e {
                Experiment::Scaling {
                    profile,
                    profiles,
                    n,
                    frames,
                    out,
                } => {
                    let profiles = load_profiles(profiles.as_deref())?;
                    (experiments::run_scaling_named(&profile, &profiles, &n.0, frames, seed)?, out)
                }
                Experiment::Latency { stages, frames, out } => (experiments::run_latency(&stages, frames, seed)?, out),
                Experiment::Hotswap { scenario, catalog, out } => (hotswap(&scenario, catalog.as_deref(), seed)?, out),
                Experiment::Power {
                    devices,
                    watts,
                    host_watts,
                    out,
                } => (experiments::run_power(devices, watts, host_watts, seed)?, out),
            };
            emit(&report, &out)
        }
        Command::Gallery(g) => gallery(g),
        Command::Plug { slot, preset, conn } => remote(&conn, ControlCommand::Insert { slot, preset }),
        Command::Unplug { slot, conn } => remote(&conn, ControlCommand::Remove { slot }),
        Command::Reorder { map, conn } => remote(&conn, ControlCommand::Reorder { assignments: map }),
        Command::Rate { fps, conn } => remote(&conn, ControlCommand::SetSourceRate { fps }),
        Command::Schedule { path, conn } => remote(
            &conn,
            ControlCommand::RunScenario {
                path: absolute(&path)?,
            },
        ),
        Command::LoadGallery { path, key_ref, conn } => remote(
            &conn,
            ControlCommand::LoadGallery {
                path: absolute(&path)?,
                key_ref,
            },
        ),
        Command::Shutdown { conn } => remote(&conn, ControlCommand::Shutdown),
        Command::Top { count, conn } => top(&conn, count),
    }
}

fn read_catalog(path: Option<&Path>) -> AnyResult<Catalog> {
    Ok(match path {
        Some(p) => Catalog::from_json(&fs::read_to_string(p)?)?,
        None => Catalog::builtin(),
    })
}

fn hotswap(file: &Path, catalog: Option<&Path>, seed: u64) -> AnyResult<ExperimentReport> {
    let scenario = Scenario::from_json(&fs::read_to_string(file)?)?;
    Ok(experiments::run_hotswap(&scenario, &read_catalog(catalog)?, seed)?)
}

fn emit(report: &ExperimentReport, out: &OutputArgs) -> AnyResult<ExitCode> {
    match &out.report {
        Some(p) => fs::write(p, report.to_json())?,
        None => print!("{}", report.to_json()),
    }
    if let Some(p) = &out.csv {
        fs::write(p, report.to_csv())?;
    }
    for e in &report.expectations {
        eprintln!(
            "{} {}: expected {} observed {} ({})",
            if e.pass { "PASS" } else { "FAIL" },
            e.name,
            e.expected,
            e.observed,
            e.tolerance
        );
    }
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn load_profiles(path: Option<&Path>) -> AnyResult<BTreeMap<String, DeviceProfile>> {
    let cals: BTreeMap<String, Calibration> = match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => experiments::builtin_profiles()?,
    };
    Ok(cals.into_iter().map(|(k, c)| (k, c.profile)).collect())
}

fn calibrate(table: &Path, name: &str, out: Option<&Path>) -> AnyResult<ExitCode> {
    let rows = bus::parse_table_csv(&fs::read_to_string(table)?)?;
    let cal = bus::calibrate(name, &rows, &BusConfig::default(), DEFAULT_FRAME_BYTES)?;
    if !cal.clamped.is_empty() {
        eprintln!("note: clamped to zero: {}", cal.clamped.join(", "));
    }
    match out {
        Some(p) => {
            let mut all: BTreeMap<String, Calibration> = match fs::read_to_string(p) {
                Ok(text) => serde_json::from_str(&text)?,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
                Err(e) => return Err(e.into()),
            };
            all.insert(name.to_string(), cal);
            let mut text = serde_json::to_string_pretty(&all)?;
            text.push('\n');
            fs::write(p, text)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&cal)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn gallery(cmd: GalleryCmd) -> AnyResult<ExitCode> {
    match cmd {
        GalleryCmd::Seal {
            input,
            output,
            key_ref,
            key_id,
        } => {
            let g = Gallery::from_json(&fs::read(&input)?)?;
            let key = resolve_key(&key_ref)?;
            let sealed = encrypt_gallery(&g, &key_id, &key, &mut rand::rngs::OsRng)?;
            fs::write(&output, sealed.to_bytes())?;
            eprintln!("sealed {} templates into {}", g.len(), output.display());
        }
        GalleryCmd::Keygen => {
            let mut key = [0u8; KEY_LEN];
            rand::rngs::OsRng.fill_bytes(&mut key);
            println!("{}", hex::encode(key));
        }
        GalleryCmd::Inspect { path, key_ref } => {
            let g = load_gallery(&path, key_ref.as_deref())?;
            let dims: std::collections::BTreeSet<usize> = g.templates().iter().map(|t| t.dim()).collect();
            println!(
                "{}",
                serde_json::json!({"templates": g.len(), "dims": dims.into_iter().collect::<Vec<_>>()})
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn absolute(p: &Path) -> AnyResult<String> {
    Ok(std::path::absolute(p)?.to_string_lossy().into_owned())
}

fn runtime() -> AnyResult<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn serve(args: ServeArgs, seed: u64) -> AnyResult<ExitCode> {
    let initial = match args.initial {
        None => DEFAULT_INITIAL.iter().map(|s| s.to_string()).collect(),
        Some(v) if v.len() == 1 && v[0] == "none" => Vec::new(),
        Some(v) => v,
    };
    let config = ServiceConfig {
        catalog: read_catalog(args.catalog.as_deref())?,
        seed,
        initial,
        source_fps: args.source_fps,
        ..ServiceConfig::default()
    };
    let plane = ControlPlane::new(config)?;
    runtime()?.block_on(async move {
        let tcp = tokio::net::TcpListener::bind(&args.listen).await?;
        eprintln!("champ: NDJSON control on {}", tcp.local_addr()?);
        let ws = match &args.ws_listen {
            Some(addr) => {
                let l = tokio::net::TcpListener::bind(addr).await?;
                eprintln!("champ: WebSocket control on {}", l.local_addr()?);
                Some(l)
            }
            None => None,
        };
        let clock = plane.spawn_clock(Duration::from_millis(args.tick_ms.max(1)));
        let ws_task = ws.map(|l| tokio::spawn(champ_service::serve_ws(plane.clone(), l)));
        let mut shutdown = plane.shutdown_signal();
        tokio::select! {
            r = champ_service::serve_tcp(plane.clone(), tcp) => r?,
            _ = tokio::signal::ctrl_c() => {}
            _ = shutdown.wait_for(|s| *s) => {}
        }
        clock.abort();
        if let Some(t) = ws_task {
            t.abort();
        }
        AnyResult::Ok(ExitCode::SUCCESS)
    })
}

fn remote(conn: &ConnArgs, command: ControlCommand) -> AnyResult<ExitCode> {
    runtime()?.block_on(async {
        let mut client = Client::connect(&conn.connect).await?;
        let id = format!("cli-{:016x}", rand::random::<u64>());
        let reply = client.request(&ApiRequest::command(id, command)).await?;
        println!("{}", reply.to_line());
        Ok(match reply {
            ServerEvent::Ack { .. } => ExitCode::SUCCESS,
            _ => ExitCode::FAILURE,
        })
    })
}

fn top(conn: &ConnArgs, count: Option<usize>) -> AnyResult<ExitCode> {
    runtime()?.block_on(async {
        let mut client = Client::connect(&conn.connect).await?;
        client
            .send(&ApiRequest {
                request_id: None,
                body: RequestBody::Subscribe,
            })
            .await?;
        let mut seen = 0;
        while count.is_none_or(|c| seen < c) {
            let Some(ev) = client.next_event().await? else { break };
            if matches!(ev, ServerEvent::Ack { .. }) {
                continue;
            }
            println!("{}", ev.to_line());
            seen += 1;
        }
        Ok(ExitCode::SUCCESS)
    })
}
