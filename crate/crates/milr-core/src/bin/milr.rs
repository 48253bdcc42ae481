//! Command-line front end: sidecar management, detection/recovery, fault
//! injection, and the experiment harness.

use clap::{Args, Parser, Subcommand};
use milr_core::dataset::{load_cifar_bin, load_mnist_idx};
use milr_core::experiment::{
    availability_curve, run_rber, run_whole_layer, run_whole_weight, storage_report, Arm,
    AvailabilityParams, EvalSet, TrialResult, write_box_csv, write_curve_csv, write_layer_csv,
    write_trials_csv,
};
use milr_core::fault::{
    inject_bitflips, inject_whole_weight, write_flip_records,
};
use milr_core::milr::sidecar::{load_sidecar, save_sidecar};
use milr_core::milr::{detect, initialize, recover, MilrConfig};
use milr_core::network::{builtin, Network};
use milr_core::rng::SplitMix64;
use milr_core::weights::{load_weights, save_weights};
use milr_core::{Dtype, MilrError, Result};
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "milr", version, about = "Self-healing CNN inference toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct NetArgs {
    /// Built-in architecture (mnist, cifar-small, cifar-large) with random
    /// weights, or a path to a weights file.
    #[arg(long, default_value = "mnist")]
    network: String,
    /// Element type for built-in networks.
    #[arg(long, default_value = "f32")]
    dtype: String,
    /// Weight seed for built-in networks.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl NetArgs {
    fn load(&self) -> Result<Network> {
        let dtype = match self.dtype.as_str() {
            "f32" => Dtype::F32,
            "f64" => Dtype::F64,
            other => return Err(MilrError::Domain(format!("unknown dtype '{other}'"))),
        };
        match self.network.as_str() {
            name @ ("mnist" | "cifar-small" | "cifar-large") => builtin(name, dtype, self.seed),
            path => load_weights(path),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// MNIST IDX image file (requires --labels).
    #[arg(long)]
    images: Option<PathBuf>,
    /// MNIST IDX label file.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// CIFAR-10 binary batch file.
    #[arg(long)]
    cifar: Option<PathBuf>,
    /// Cap on evaluation samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Synthetic evaluation set size when no dataset is given.
    #[arg(long, default_value_t = 200)]
    eval_count: usize,
    /// Seed for the synthetic evaluation set.
    #[arg(long, default_value_t = 7)]
    eval_seed: u64,
}

impl EvalArgs {
    fn load(&self, net: &Network) -> Result<EvalSet> {
        if let (Some(img), Some(lbl)) = (&self.images, &self.labels) {
            let ds = load_mnist_idx(img, lbl, net.dtype())?;
            Ok(EvalSet::from_dataset(ds, self.limit))
        } else if let Some(path) = &self.cifar {
            let ds = load_cifar_bin(path, net.dtype())?;
            Ok(EvalSet::from_dataset(ds, self.limit))
        } else {
            EvalSet::synthetic(net, self.eval_count, self.eval_seed)
        }
    }
}

#[derive(Args)]
struct StateArgs {
    /// Recovery sidecar file produced by `init`.
    #[arg(long)]
    state: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Print the layer table of a network.
    Show {
        #[command(flatten)]
        net: NetArgs,
    },
    /// Initialize recovery state for a network and write the sidecar.
    Init {
        #[command(flatten)]
        net: NetArgs,
        /// Output sidecar path.
        #[arg(long)]
        out: PathBuf,
        /// Also write the network weights here.
        #[arg(long)]
        save_weights: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
    /// Compare a network against its sidecar; nonzero exit if corrupted.
    Detect {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        state: StateArgs,
    },
    /// Detect and heal a corrupted network, rewriting the weights file.
    Recover {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        state: StateArgs,
        /// Where to write the healed weights (defaults to the input file).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where to write the updated sidecar (defaults to --state). Solved
        /// parameters are only bit-approximate, so recovery re-anchors the
        /// healed layers' detection records.
        #[arg(long)]
        state_out: Option<PathBuf>,
    },
    /// Inject faults into a weights file.
    Inject {
        #[command(flatten)]
        net: NetArgs,
        /// Fault model: bitflip or whole-weight.
        #[arg(long, default_value = "bitflip")]
        model: String,
        /// Per-bit (bitflip) or per-weight (whole-weight) probability.
        #[arg(long)]
        rate: f64,
        /// Injection seed.
        #[arg(long, default_value_t = 1)]
        inject_seed: u64,
        /// Where to write the corrupted weights.
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON-lines record of the flipped bits.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Classify an evaluation set and print accuracy.
    Predict {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Fault-injection campaigns with CSV output.
    Experiment {
        #[command(subcommand)]
        kind: Experiment,
    },
    /// Availability/accuracy trade-off curve.
    Availability {
        #[arg(long, default_value_t = 0.010)]
        detect_s: f64,
        #[arg(long, default_value_t = 2.0)]
        detect_runs: f64,
        #[arg(long, default_value_t = 0.017)]
        recover_s: f64,
        #[arg(long, default_value_t = 3600.0)]
        time_between_errors_s: f64,
        #[arg(long, default_value_t = 1.0)]
        accuracy_clean: f64,
        #[arg(long, default_value_t = 0.5)]
        accuracy_at_anchor: f64,
        #[arg(long, default_value_t = 100.0)]
        errors_at_anchor: f64,
        /// Grid resolution over (0, 1).
        #[arg(long, default_value_t = 99)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Byte accounting: raw backup vs ECC vs recovery sidecar.
    StorageReport {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
}

#[derive(Args)]
struct CampaignArgs {
    #[command(flatten)]
    net: NetArgs,
    #[command(flatten)]
    eval: EvalArgs,
    /// Comma-separated error rates.
    #[arg(long, value_delimiter = ',', default_value = "0,1e-7,1e-6,1e-5")]
    rates: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 42)]
    trial_seed: u64,
    /// CSV output path (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-(arm, rate) box-plot statistics here.
    #[arg(long)]
    box_out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    batch: usize,
}

#[derive(Subcommand)]
enum Experiment {
    /// Independent bit flips across protection arms.
    Rber {
        #[command(flatten)]
        campaign: CampaignArgs,
        /// Comma-separated arms: none, ecc, milr, ecc+milr.
        #[arg(long, value_delimiter = ',', default_value = "none,ecc,milr,ecc+milr")]
        arms: Vec<String>,
    },
    /// Whole-weight corruption (arms none and milr).
    WholeWeight {
        #[command(flatten)]
        campaign: CampaignArgs,
    },
    /// Whole-layer corruption, one parameterized layer at a time.
    WholeLayer {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value_t = 42)]
        trial_seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
}

fn out_writer(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    })
}

fn emit_campaign(
    trials: &[TrialResult],
    out: &Option<PathBuf>,
    box_out: &Option<PathBuf>,
) -> Result<()> {
    write_trials_csv(&mut out_writer(out)?, trials)?;
    if let Some(p) = box_out {
        write_box_csv(&mut std::fs::File::create(p)?, trials)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Show { net } => {
            let net = net.load()?;
            println!("{:<3} {:<10} {:>12} {:>20}", "#", "layer", "params", "output shape");
            for (idx, row) in net.table_rows().iter().enumerate() {
                println!(
                    "{:<3} {:<10} {:>12} {:>20}",
                    idx,
                    row.name,
                    row.trainable,
                    format!("{:?}", row.output_shape)
                );
            }
            println!("total parameters: {}", net.param_count());
        }
        Command::Init { net, out, save_weights: weights_out, batch } => {
            let net = net.load()?;
            let state = initialize(&net, MilrConfig { batch, ..MilrConfig::default() })?;
            save_sidecar(&state, &out)?;
            if let Some(p) = weights_out {
                save_weights(&net, p)?;
            }
            println!(
                "initialized: {} checkpoints, sidecar {} bytes",
                state.checkpoints.len(),
                state.plan_cost_bytes
            );
        }
        Command::Detect { net, state } => {
            let net = net.load()?;
            let state = load_sidecar(&state.state)?;
            let log = detect(&net, &state)?;
            if log.is_clean() {
                println!("clean");
            } else {
                for entry in &log.entries {
                    println!(
                        "layer {} corrupted (bracket {}..{})",
                        entry.layer, entry.prev_ckpt, entry.next_ckpt
                    );
                }
                return Ok(1);
            }
        }
        Command::Recover { net, state, out, state_out } => {
            let path = net.network.clone();
            let state_path = state.state.clone();
            let mut network = net.load()?;
            let mut state = load_sidecar(&state_path)?;
            let log = detect(&network, &state)?;
            if log.is_clean() {
                println!("clean; nothing to recover");
                return Ok(0);
            }
            let report = recover(&mut network, &mut state, &log)?;
            for (layer, outcome) in &report.outcomes {
                println!("layer {layer}: {outcome:?}");
            }
            save_weights(&network, out.unwrap_or(PathBuf::from(path)))?;
            save_sidecar(&state, state_out.unwrap_or(state_path))?;
            if !report.all_recovered() {
                return Ok(1);
            }
        }
        Command::Inject { net, model, rate, inject_seed, out, records } => {
            let mut network = net.load()?;
            let mut rng = SplitMix64::new(inject_seed);
            let recs = match model.as_str() {
                "bitflip" => inject_bitflips(&mut network, rate, &mut rng),
                "whole-weight" => inject_whole_weight(&mut network, rate, &mut rng),
                other => return Err(MilrError::Domain(format!("unknown fault model '{other}'"))),
            };
            save_weights(&network, &out)?;
            if let Some(p) = records {
                write_flip_records(&mut std::fs::File::create(p)?, &recs)?;
            }
            println!("{} bits flipped", recs.len());
        }
        Command::Predict { net, eval } => {
            let net = net.load()?;
            let eval = eval.load(&net)?;
            println!("accuracy: {:.4}", eval.accuracy(&net)?);
        }
        Command::Experiment { kind } => match kind {
            Experiment::Rber { campaign, arms } => {
                let net = campaign.net.load()?;
                let state = initialize(&net, MilrConfig {
                    batch: campaign.batch,
                    ..MilrConfig::default()
                })?;
                let eval = campaign.eval.load(&net)?;
                let arms = arms
                    .iter()
                    .map(|s| Arm::parse(s))
                    .collect::<Result<Vec<_>>>()?;
                let trials = run_rber(
                    &net,
                    &state,
                    &eval,
                    arms,
                    campaign.rates.clone(),
                    campaign.trials,
                    campaign.trial_seed,
                )?;
                emit_campaign(&trials, &campaign.out, &campaign.box_out)?;
            }
            Experiment::WholeWeight { campaign } => {
                let net = campaign.net.load()?;
                let state = initialize(&net, MilrConfig {
                    batch: campaign.batch,
                    ..MilrConfig::default()
                })?;
                let eval = campaign.eval.load(&net)?;
                let trials = run_whole_weight(
                    &net,
                    &state,
                    &eval,
                    campaign.rates.clone(),
                    campaign.trials,
                    campaign.trial_seed,
                )?;
                emit_campaign(&trials, &campaign.out, &campaign.box_out)?;
            }
            Experiment::WholeLayer { net, eval, trial_seed, tolerance, out, batch } => {
                let net = net.load()?;
                let state = initialize(&net, MilrConfig { batch, ..MilrConfig::default() })?;
                let eval = eval.load(&net)?;
                let rows = run_whole_layer(&net, &state, &eval, trial_seed, tolerance)?;
                write_layer_csv(&mut out_writer(&out)?, &rows)?;
            }
        },
        Command::Availability {
            detect_s,
            detect_runs,
            recover_s,
            time_between_errors_s,
            accuracy_clean,
            accuracy_at_anchor,
            errors_at_anchor,
            points,
            out,
        } => {
            let params = AvailabilityParams {
                detect_s,
                detect_runs,
                recover_s,
                time_between_errors_s,
                accuracy_clean,
                accuracy_at_anchor,
                errors_at_anchor,
            };
            let grid: Vec<f64> = (1..=points)
                .map(|i| i as f64 / (points + 1) as f64)
                .collect();
            let curve = availability_curve(&params, &grid)?;
            write_curve_csv(&mut out_writer(&out)?, &curve)?;
        }
        Command::StorageReport { net, batch } => {
            let net = net.load()?;
            let state = initialize(&net, MilrConfig { batch, ..MilrConfig::default() })?;
            let report = storage_report(&net, &state);
            println!("backup_bytes:        {}", report.backup_bytes);
            println!("ecc_bytes:           {}", report.ecc_bytes);
            println!("milr_bytes:          {}", report.milr_bytes);
            println!("ecc_plus_milr_bytes: {}", report.ecc_plus_milr_bytes);
        }
    }
    Ok(0)
}

fn main() {
    match run(Cli::parse()) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
