//! `dan`: run a server, fetch run sets, and operate a live server.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde_json::Value as Json;

use dan_core::backend::gen_dataset;
use dan_core::config::ServerConfig;
use dan_core::loadgen::run_bench;
use dan_core::model::{parse_cache_key_string, CalibKey};
use dan_core::monitor::Severity;
use dan_core::schemagen::run_schemagen;
use dan_core::server::Server;
use dan_core::wire::{Client, ClientError};

#[derive(Debug, Parser)]
#[command(name = "dan", version, about = "Tiered cache server for calibration run sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a server until killed.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fetch one run set.
    Get {
        #[arg(long)]
        addr: String,
        #[arg(long)]
        table: String,
        #[arg(long)]
        run: u64,
        #[arg(long, default_value = "")]
        variant: String,
        /// Write the object here; otherwise only the metadata is printed.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 60_000)]
        timeout_ms: u64,
    },
    /// Write a synthetic pedestal/gain run set into a data directory.
    GenData {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        table: String,
        #[arg(long)]
        run: u64,
        #[arg(long, default_value = "")]
        variant: String,
        #[arg(long)]
        rows: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Concurrent GET load with server counter deltas.
    Bench {
        #[arg(long)]
        addr: String,
        #[arg(long, default_value_t = 1)]
        clients: usize,
        #[arg(long, default_value_t = 1)]
        requests: usize,
        /// Key as TABLE/RUN/VARIANT; repeatable.
        #[arg(long = "key", value_parser = parse_key)]
        keys: Vec<CalibKey>,
        #[arg(long, default_value_t = 60_000)]
        timeout_ms: u64,
    },
    /// Print the server's statistics document.
    Stats {
        #[arg(long)]
        addr: String,
        #[arg(long, default_value_t = 10_000)]
        timeout_ms: u64,
    },
    /// Print pushed events as XML lines.
    Subscribe {
        #[arg(long)]
        addr: String,
        #[arg(long, default_value = "I", value_parser = parse_severity)]
        min_severity: Severity,
        /// Exit after this many events.
        #[arg(long)]
        count: Option<u64>,
    },
    /// Change a runtime parameter.
    SetConfig {
        #[arg(long)]
        addr: String,
        #[arg(long)]
        param: String,
        #[arg(long)]
        value: String,
        #[arg(long, default_value_t = 10_000)]
        timeout_ms: u64,
    },
    /// Generate interface and mapping files from a schema document.
    Schemagen {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_key(s: &str) -> Result<CalibKey, String> {
    parse_cache_key_string(s).ok_or_else(|| format!("{s:?} is not TABLE/RUN/VARIANT"))
}

fn parse_severity(s: &str) -> Result<Severity, String> {
    s.parse().map_err(|e: dan_core::monitor::UnknownSeverity| e.to_string())
}

/// A failed command: exit status 1 for request errors, 2 for usage.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn request(e: impl std::fmt::Display) -> Self {
        Self { code: 1, message: e.to_string() }
    }

    fn usage(e: impl std::fmt::Display) -> Self {
        Self { code: 2, message: e.to_string() }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        Failure::request(e)
    }
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Serve { config } => {
            let config = ServerConfig::load(&config).map_err(Failure::usage)?;
            let server = Server::start(config).map_err(Failure::request)?;
            println!("listening on {}", server.local_addr());
            let _ = std::io::stdout().flush();
            server.wait();
            Ok(())
        }
        Command::Get { addr, table, run, variant, out, timeout_ms } => {
            let key = CalibKey::new(table, run, variant).map_err(Failure::usage)?;
            let mut client = Client::connect(&addr, Duration::from_millis(timeout_ms))?;
            let resp = client.get(&key)?;
            if let Some(path) = out {
                std::fs::write(&path, &resp.payload)
                    .map_err(|e| Failure::request(format!("{}: {e}", path.display())))?;
            }
            print_json(&resp.meta);
            Ok(())
        }
        Command::GenData { root, table, run, variant, rows, seed } => {
            let key = CalibKey::new(table, run, variant).map_err(Failure::usage)?;
            let path = gen_dataset(&root, &key, rows, seed).map_err(Failure::request)?;
            let size = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
            println!("{} {size}", path.display());
            Ok(())
        }
        Command::Bench { addr, clients, requests, keys, timeout_ms } => {
            if keys.is_empty() && clients > 0 && requests > 0 {
                return Err(Failure::usage("bench needs at least one --key"));
            }
            let report = run_bench(&addr, clients, requests, &keys, Duration::from_millis(timeout_ms))?;
            print_json(&report);
            print!("{}", report.to_table());
            if report.failures > 0 {
                return Err(Failure::request(format!("{} requests failed", report.failures)));
            }
            Ok(())
        }
        Command::Stats { addr, timeout_ms } => {
            let mut client = Client::connect(&addr, Duration::from_millis(timeout_ms))?;
            print_json(&client.stats()?);
            Ok(())
        }
        Command::Subscribe { addr, min_severity, count } => {
            let mut client = Client::connect(&addr, Duration::from_secs(10))?;
            client.subscribe(min_severity)?;
            let mut seen = 0;
            let stdout = std::io::stdout();
            while count.is_none_or(|n| seen < n) {
                if let Some(line) = client.next_event(Duration::from_secs(1))? {
                    let mut out = stdout.lock();
                    let _ = writeln!(out, "{line}");
                    let _ = out.flush();
                    seen += 1;
                }
            }
            Ok(())
        }
        Command::SetConfig { addr, param, value, timeout_ms } => {
            // Numbers go as JSON numbers, anything else as a string.
            let value = serde_json::from_str::<Json>(&value)
                .ok()
                .filter(Json::is_number)
                .unwrap_or(Json::String(value));
            let mut client = Client::connect(&addr, Duration::from_millis(timeout_ms))?;
            print_json(&client.set_config(&param, value)?);
            Ok(())
        }
        Command::Schemagen { schema, out } => {
            let written = run_schemagen(&schema, &out).map_err(Failure::request)?;
            for p in written {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("dan: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
