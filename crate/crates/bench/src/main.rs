use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use scbr_bench::bench::DEFAULT_BATCH;
use scbr_bench::stats::write_stats_csv;
use scbr_bench::verify::{verify_with, VerifyOptions};
use scbr_bench::{bench_match, report_stats, write_csv, BenchConfig, BenchError, Mode};
use scbr_core::publisher::PublisherSecrets;
use scbr_core::workload::{gen_entries, gen_publications, write_pubs, write_subs};
use scbr_core::{ClientId, PubId, PublicationHeader, Subscription};
use scbr_net::{
    client_subscribe, producer_publish, run_broker, run_publisher, BrokerConfig, Config, Endpoint, Listener,
    PublisherConfig,
};

const DEFAULT_CONFIG: &str = "scbr.conf";

#[derive(Parser)]
#[command(name = "scbr", version, about = "Content-based routing over encrypted subscriptions")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long, default_value = "e100a1")]
    workload: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output file; stdout when omitted (a directory for `gen`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write subscription and publication datasets as JSON lines.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        subs: usize,
        #[arg(long, default_value_t = 1_000)]
        pubs: usize,
    },
    /// Match latency per mode and database size, as CSV.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1000,2500,5000,10000,25000,50000,100000")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_BATCH)]
        batch: usize,
        #[arg(long, value_enum, default_value = "PLAIN")]
        mode: Vec<Mode>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Compare every engine against a linear scan.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2_000)]
        subs: usize,
        #[arg(long, default_value_t = 500)]
        pubs: usize,
        /// Drop one index edge first; the check must then fail.
        #[arg(long)]
        corrupt_index: bool,
    },
    /// Index shape and footprint per database size, as CSV.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1000,10000,100000")]
        sizes: Vec<usize>,
    },
    /// Generate publisher keys and a config file for a local deployment.
    Keygen {
        #[arg(long, default_value = ".")]
        dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        version: u64,
        /// Clients admitted by the publisher.
        #[arg(long, value_delimiter = ',')]
        allow: Vec<String>,
        #[arg(long, default_value_t = 7100)]
        base_port: u16,
    },
    /// Run the broker described by the config.
    Broker {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the publisher described by the config.
    Publisher {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Subscribe or publish.
    Client {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(subcommand)]
        action: ClientAction,
    },
}

#[derive(Subcommand)]
enum ClientAction {
    /// Register subscriptions, then print deliveries until interrupted.
    Subscribe {
        #[arg(long)]
        id: String,
        /// Subscription text, e.g. 'symbol="HAL"&price<50'. Repeatable.
        #[arg(long = "sub", required = true)]
        subs: Vec<String>,
    },
    /// Publish one message through the broker.
    Publish {
        #[arg(long)]
        id: String,
        #[arg(long)]
        header: String,
        #[arg(long, default_value = "")]
        payload: String,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("{0}")]
    Other(String),
    /// Already reported on stderr.
    #[error("verification failed")]
    Verify,
}

fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| other(format!("{}: {e}", p.display())))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_config(path: Option<PathBuf>) -> Result<Config, CliError> {
    let path = path.unwrap_or_else(|| Config::locate(Path::new(DEFAULT_CONFIG)));
    Config::load(&path).map_err(other)
}

fn park_forever() -> ! {
    loop {
        std::thread::park();
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Gen { common, subs, pubs } => {
            let spec = scbr_bench::workload(&common.workload, common.seed)?;
            let dir = common.out.unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&dir).map_err(other)?;
            let sp = dir.join(format!("{}-subs.jsonl", spec.name));
            let pp = dir.join(format!("{}-pubs.jsonl", spec.name));
            let f = BufWriter::new(File::create(&sp).map_err(other)?);
            write_subs(f, &spec, &gen_entries(&spec, subs)).map_err(other)?;
            let f = BufWriter::new(File::create(&pp).map_err(other)?);
            write_pubs(f, &spec, &gen_publications(&spec, pubs)).map_err(other)?;
            eprintln!("wrote {} and {}", sp.display(), pp.display());
        }
        Cmd::Bench {
            common,
            sizes,
            batch,
            mode,
            reps,
        } => {
            let mut cfg = BenchConfig::new(common.workload);
            cfg.sizes = sizes;
            cfg.batch = batch;
            cfg.modes = mode;
            cfg.reps = reps;
            cfg.seed = common.seed;
            let records = bench_match(&cfg)?;
            write_csv(output(&common.out)?, &records).map_err(other)?;
        }
        Cmd::Verify {
            common,
            subs,
            pubs,
            corrupt_index,
        } => {
            scbr_bench::workload(&common.workload, common.seed)?;
            let keys = scbr_bench::bench::BenchKeys::generate(common.seed);
            let report = verify_with(&common.workload, subs, pubs, common.seed, &keys, VerifyOptions { corrupt_index })?;
            let mut out = output(&common.out)?;
            writeln!(out, "{}", report.summary()).map_err(other)?;
            if !report.ok() {
                eprint!("{}", report.diff_dump());
                return Err(CliError::Verify);
            }
        }
        Cmd::Stats { common, sizes } => {
            let rows = report_stats(&common.workload, &sizes, common.seed)?;
            write_stats_csv(output(&common.out)?, &rows).map_err(other)?;
        }
        Cmd::Keygen {
            dir,
            version,
            allow,
            base_port,
        } => {
            let secrets = PublisherSecrets::generate(&mut ChaCha20Rng::from_entropy()).map_err(other)?;
            let keys = scbr_net::config::write_key_material(&dir, &secrets, version).map_err(other)?;
            let mut cfg = Config {
                keys,
                ..Config::default()
            };
            for (i, role) in [scbr_net::Role::Broker, scbr_net::Role::Publisher, scbr_net::Role::Client]
                .into_iter()
                .enumerate()
            {
                cfg.endpoints.push(Endpoint {
                    host: "127.0.0.1".into(),
                    port: base_port + i as u16,
                    role,
                });
            }
            for c in allow {
                cfg.policy.allow(ClientId::new(c).map_err(other)?);
            }
            let path = dir.join(DEFAULT_CONFIG);
            std::fs::write(&path, cfg.to_lines()).map_err(other)?;
            eprintln!("wrote keys and {}", path.display());
        }
        Cmd::Broker { config } => {
            let cfg = load_config(config)?;
            let addr = cfg.endpoint_addr(scbr_net::Role::Broker).map_err(other)?;
            let handle = run_broker(BrokerConfig::new(addr, cfg.provisioning_blob().map_err(other)?)).map_err(other)?;
            eprintln!("broker listening on {}", handle.local_addr());
            park_forever();
        }
        Cmd::Publisher { config } => {
            let cfg = load_config(config)?;
            let mut pc = PublisherConfig::new(
                cfg.endpoint_addr(scbr_net::Role::Publisher).map_err(other)?,
                cfg.endpoint_addr(scbr_net::Role::Broker).map_err(other)?,
                cfg.publisher_secrets().map_err(other)?,
                cfg.policy.clone(),
            );
            pc.timeout = cfg.timeout;
            let handle = run_publisher(pc).map_err(other)?;
            eprintln!("publisher listening on {}", handle.local_addr());
            park_forever();
        }
        Cmd::Client { config, action } => {
            let cfg = load_config(config)?;
            match action {
                ClientAction::Subscribe { id, subs } => {
                    let client = ClientId::new(id).map_err(other)?;
                    let listen = cfg.endpoint_addr(scbr_net::Role::Client).map_err(other)?;
                    let listener = Listener::bind(&listen, |d| {
                        println!("{} {}", d.id, String::from_utf8_lossy(&d.payload));
                    })
                    .map_err(other)?;
                    let publisher = cfg.endpoint_addr(scbr_net::Role::Publisher).map_err(other)?;
                    let pk = cfg.public_key().map_err(other)?;
                    let mut rng = ChaCha20Rng::from_entropy();
                    for text in subs {
                        let s = Subscription::parse(&text).map_err(other)?;
                        let sid = client_subscribe(
                            &mut rng,
                            &publisher,
                            &pk,
                            client.clone(),
                            &listener.reply_addr(),
                            &s,
                            cfg.timeout,
                        )
                        .map_err(other)?;
                        eprintln!("subscribed {sid}");
                    }
                    park_forever();
                }
                ClientAction::Publish { id, header, payload } => {
                    let h = PublicationHeader::parse(&header).map_err(other)?;
                    producer_publish(
                        &cfg.endpoint_addr(scbr_net::Role::Broker).map_err(other)?,
                        &cfg.sym_key().map_err(other)?,
                        PubId::new(id).map_err(other)?,
                        &h,
                        payload.into_bytes(),
                        cfg.timeout,
                    )
                    .map_err(other)?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Verify) => ExitCode::from(1),
        Err(e @ CliError::Bench(BenchError::UnknownWorkload(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
