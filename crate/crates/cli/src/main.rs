//! `ddcs` command-line front end. Every command goes through the HTTP
//! service: the one named by `--server`, or an in-process instance on a
//! loopback port.
//!
//! Exit codes: 0 pass, 1 assertion or verification failure, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use clap::{Args, Parser, Subcommand};
use ddcs_client::api::{CheckRequest, GridRequest, ProveRequest, RunRequest};
use ddcs_client::{Client, ClientError};
use ddcs_service::core::balance_mht::RecordKey;
use ddcs_service::core::harness::{ProofQuery, StateBundle};
use ddcs_service::core::types::{ClientId, PairKey};

#[derive(Parser)]
#[command(name = "ddcs", version, about = "Ledger-less digital currency simulator and verifier")]
struct Cli {
    /// Service URL; an in-process service is started when omitted.
    #[arg(long, global = true, env = "DDCS_SERVER")]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and check its expectations.
    Run {
        scenario: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the event log here.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Export the final state into this directory.
        #[arg(long)]
        state: Option<PathBuf>,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Check a grid file against the client state in a state directory.
    VerifyGrid { grid: PathBuf, state: PathBuf },
    /// Print the temporal balance table of a state directory.
    ExportBalances {
        state: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit a verification object for a query against a state directory.
    Prove(ProveArgs),
    /// Verify a verification object.
    Check {
        vo: PathBuf,
        /// Key directory file, e.g. `keys.txt` of a state directory.
        #[arg(long)]
        keys: PathBuf,
        /// State directory supplying the latest roots for freshness.
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Run the HTTP service in the foreground.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Args)]
struct ProveArgs {
    state: PathBuf,
    /// Transaction inclusion for this pair, e.g. `1:2`.
    #[arg(long, conflicts_with = "balances", requires = "seq")]
    pair: Option<PairKey>,
    /// First pair sequence number.
    #[arg(long)]
    seq: Option<u64>,
    /// Last pair sequence number; defaults to `--seq`.
    #[arg(long = "to-seq", requires = "seq")]
    to_seq: Option<u64>,
    /// Balance history range query instead.
    #[arg(long, required_unless_present = "pair")]
    balances: bool,
    /// Earliest business time, inclusive.
    #[arg(long, requires = "balances")]
    from: Option<u64>,
    /// Latest business time, inclusive.
    #[arg(long, requires = "balances")]
    until: Option<u64>,
    /// Answering client; required for balance queries.
    #[arg(long)]
    subject: Option<ClientId>,
    /// Write the VO here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A problem with the invocation or its inputs rather than with what was
/// verified.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

enum Verdict {
    Pass,
    Fail,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match rt.block_on(dispatch(cli)) {
        Ok(Verdict::Pass) => ExitCode::SUCCESS,
        Ok(Verdict::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_usage = e.downcast_ref::<Usage>().is_some()
                || e.downcast_ref::<ClientError>().is_some_and(ClientError::is_client_fault);
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}

async fn connect(server: Option<String>) -> Result<Client> {
    match server {
        Some(url) => Ok(Client::new(url)),
        None => {
            let (addr, _task) = ddcs_service::spawn("127.0.0.1:0")
                .await
                .context("starting the in-process service")?;
            Ok(Client::new(format!("http://{addr}")))
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn read_state(dir: &Path) -> Result<StateBundle> {
    StateBundle::read_dir(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

async fn dispatch(cli: Cli) -> Result<Verdict> {
    if let Command::Serve { addr } = &cli.command {
        return serve(addr).await;
    }
    let client = connect(cli.server).await?;
    match cli.command {
        Command::Run {
            scenario,
            seed,
            log,
            state,
            json,
        } => {
            let text = read_text(&scenario)?;
            let resp = client
                .run(&RunRequest {
                    scenario: text,
                    seed,
                    include_state: state.is_some(),
                })
                .await?;
            if let Some(p) = &log {
                fs::write(p, resp.report.log.to_text()).with_context(|| format!("writing {}", p.display()))?;
            }
            if let (Some(dir), Some(bundle)) = (&state, &resp.state) {
                bundle.write_dir(dir)?;
            }
            let r = &resp.report;
            if json {
                println!("{}", serde_json::to_string_pretty(r)?);
            } else {
                for f in r.failures() {
                    println!("FAIL step {}: {}: {}", f.index + 1, f.step, f.detail);
                }
                if let Some(why) = &r.aborted {
                    println!("aborted: {why}");
                }
                let detected = r.detections.iter().filter(|d| d.detected).count();
                println!(
                    "{} {} steps, {} alerts, {}/{} faults detected, {} events, seed {}",
                    if resp.passed { "PASS" } else { "FAIL" },
                    r.steps.len(),
                    r.alerts.len(),
                    detected,
                    r.detections.len(),
                    r.events_processed,
                    r.seed
                );
            }
            Ok(if resp.passed { Verdict::Pass } else { Verdict::Fail })
        }
        Command::VerifyGrid { grid, state } => {
            let req = GridRequest {
                grid: Some(read_text(&grid)?),
                state: read_state(&state)?,
            };
            let r = client.verify_grid(&req).await?;
            if r.matches {
                println!("grid matches state");
                return Ok(Verdict::Pass);
            }
            for (row, col) in &r.cells {
                println!("mismatch at ({row}, {col})");
            }
            let ids = |v: &[ClientId]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
            println!("rows: {}", ids(&r.rows));
            println!("columns: {}", ids(&r.columns));
            Ok(Verdict::Fail)
        }
        Command::ExportBalances { state, out } => {
            let tsv = client.export_balances(read_state(&state)?).await?;
            emit(out.as_deref(), &tsv)?;
            Ok(Verdict::Pass)
        }
        Command::Prove(args) => {
            let query = match args.pair {
                Some(pair) => {
                    let lo = args.seq.ok_or_else(|| usage("--pair needs --seq"))?;
                    ProofQuery::Pair {
                        pair,
                        lo,
                        hi: args.to_seq.unwrap_or(lo),
                    }
                }
                None => ProofQuery::Balances {
                    lo: RecordKey::new(args.from.unwrap_or(0), 0),
                    hi: RecordKey::new(args.until.unwrap_or(u64::MAX), u64::MAX),
                },
            };
            let req = ProveRequest {
                state: read_state(&args.state)?,
                subject: args.subject,
                query,
            };
            let vo = client.prove(&req).await?.vo;
            emit(args.out.as_deref(), &format!("{vo}\n"))?;
            Ok(Verdict::Pass)
        }
        Command::Check { vo, keys, state } => {
            let raw = fs::read(&vo).map_err(|e| usage(format!("{}: {e}", vo.display())))?;
            // Accept the base64 text `prove` writes, or raw VO bytes.
            let encoded = match std::str::from_utf8(&raw) {
                Ok(t) if B64.decode(t.trim()).is_ok() => t.trim().to_string(),
                _ => B64.encode(&raw),
            };
            let req = CheckRequest {
                vo: encoded,
                keys: read_text(&keys)?,
                state: state.as_deref().map(read_state).transpose()?,
            };
            let r = match client.check(&req).await {
                Ok(r) => r,
                Err(ClientError::Api { status: 400, kind, message }) if kind == "state" => {
                    println!("FAIL unreadable verification object: {message}");
                    return Ok(Verdict::Fail);
                }
                Err(e) => return Err(e.into()),
            };
            let v = r.verdict;
            println!(
                "{} correct={} complete={} fresh={}",
                if r.ok { "PASS" } else { "FAIL" },
                v.correct,
                v.complete,
                v.fresh
            );
            Ok(if r.ok { Verdict::Pass } else { Verdict::Fail })
        }
        Command::Serve { .. } => unreachable!("handled above"),
    }
}

async fn serve(addr: &str) -> Result<Verdict> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| usage(format!("binding {addr}: {e}")))?;
    ddcs_service::serve(listener, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(Verdict::Pass)
}
