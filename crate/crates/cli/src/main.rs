use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use tokio::net::TcpListener;
use vsplit_cli::{cmd_classify, cmd_simulate, cmd_split, load_scenario, load_split_dir, split_from_args, CliError, SplitArgs};
use vsplit_core::mapping::DEFAULT_REGION_THRESHOLD;
use vsplit_hub::Hub;

#[derive(Parser)]
#[command(name = "vsplit", version, about = "Split a single-screen web application across a master and a slave device")]
struct Cli {
    /// Log debug detail (session transitions are logged at info).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print each body element's class, role changes and semantic links.
    Classify { input: PathBuf },
    /// Split a document into master.html, slave.html and manifest.json.
    Split {
        #[command(flatten)]
        split: SplitFlags,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a split application and its /sync hub.
    Serve {
        /// Directory written by `split`.
        #[arg(long, conflicts_with_all = ["input", "query"])]
        dir: Option<PathBuf>,
        input: Option<PathBuf>,
        #[arg(long)]
        query: Option<PathBuf>,
        #[arg(long)]
        geometry: Option<PathBuf>,
        #[arg(long)]
        base_url: Option<String>,
        #[arg(long, default_value_t = DEFAULT_REGION_THRESHOLD)]
        region_threshold: f64,
        #[arg(long)]
        session_id: Option<String>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
        host: IpAddr,
        /// Serve /runtime/*.js from this directory.
        #[arg(long)]
        runtime_dir: Option<PathBuf>,
    },
    /// Run a scenario through the simulator and check its expectations.
    Simulate {
        scenario: PathBuf,
        /// Where to write the transcript.
        #[arg(long, default_value = "transcript.json")]
        transcript: PathBuf,
    },
}

#[derive(Args)]
struct SplitFlags {
    input: PathBuf,
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    geometry: Option<PathBuf>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long, default_value_t = DEFAULT_REGION_THRESHOLD)]
    region_threshold: f64,
    /// Fixed session id; makes the output reproducible.
    #[arg(long)]
    session_id: Option<String>,
    /// Websocket URL written into the pages' runtime configuration.
    #[arg(long)]
    hub_url: Option<String>,
}

impl From<SplitFlags> for SplitArgs {
    fn from(f: SplitFlags) -> Self {
        SplitArgs {
            input: f.input,
            query: f.query,
            geometry: f.geometry,
            base_url: f.base_url,
            region_threshold: f.region_threshold,
            session_id: f.session_id,
            hub_url: f.hub_url,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { tracing::Level::DEBUG } else { tracing::Level::INFO };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(1, CliError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Classify { input } => {
            print!("{}", cmd_classify(&input)?.render());
        }
        Command::Split { split, out } => {
            let manifest = cmd_split(&split.into(), &out)?;
            println!(
                "session {}: {} hidden, {} mirrored, {} shared -> {}",
                manifest.manifest.session,
                manifest.manifest.hidden_count,
                manifest.manifest.mirrored_count,
                manifest.manifest.shared_count,
                out.display()
            );
        }
        Command::Serve { dir, input, query, geometry, base_url, region_threshold, session_id, port, host, runtime_dir } => {
            let (session, app) = match (dir, input, query) {
                (Some(dir), _, _) => load_split_dir(&dir)?,
                (None, Some(input), Some(query)) => {
                    let args = SplitArgs {
                        input,
                        query,
                        geometry,
                        base_url,
                        region_threshold,
                        session_id,
                        hub_url: Some(format!("ws://{}/sync", SocketAddr::new(host, port))),
                    };
                    let pipeline = split_from_args(&args)?;
                    (pipeline.result.session_id.clone(), pipeline.app)
                }
                _ => return Err(CliError::BadInput("serve needs --dir, or an input document and --query".into()).into()),
            };
            let mut hub = Hub::default().with_app(&session, app);
            if let Some(dir) = runtime_dir {
                hub = hub.with_runtime_dir(dir);
            }
            serve(hub, SocketAddr::new(host, port), &session)?;
        }
        Command::Simulate { scenario, transcript } => {
            let scenario = load_scenario(&scenario)?;
            let report = cmd_simulate(&scenario)?;
            let text = serde_json::to_string_pretty(&report.to_json()).expect("report serializes");
            std::fs::write(&transcript, text + "\n").with_context(|| format!("writing {}", transcript.display()))?;
            if report.passed() {
                println!("PASS {}", report.name);
            } else {
                println!("FAIL {}", report.name);
                for f in &report.failures {
                    println!("  {f}");
                }
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn serve(hub: Hub, addr: SocketAddr, session: &str) -> anyhow::Result<()> {
    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    runtime.block_on(async {
        let listener = TcpListener::bind(addr).await.map_err(|source| CliError::PortBusy { port: addr.port(), source })?;
        tracing::info!(%addr, session, "serving /app/master.html, /app/slave.html and /sync");
        vsplit_hub::serve(listener, hub, async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("interrupted; shutting down");
        })
        .await
        .context("serving")?;
        Ok(())
    })
}
