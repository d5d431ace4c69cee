//! Command-line interface. Logs go to stderr; data and reports to stdout or
//! to files named with --out. Errors print a single machine-parsable line
//! `error: <kind>: <message>` and exit nonzero.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::evalkit::{bfr_windowed, monte_carlo, McModel};
use crate::presets::{self, Preset};
use crate::randles;
use crate::signals::{add_noise, read_record, write_record, DischargeRecord, SampledSignal, SegmentPlan};
use crate::sre;
use crate::thevenin::{self, GridSpec, ObserverMatrix};
use crate::warburg;

#[derive(Parser)]
#[command(
    name = "battid",
    version,
    about = "Battery-cell equivalent-circuit simulation and identification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonSim {
    /// Parameter preset: mrandles, m1, or m2
    #[arg(long)]
    preset: String,
    /// Sampling period in seconds
    #[arg(long, default_value_t = presets::DEFAULT_TS)]
    ts: f64,
    /// Record duration in seconds
    #[arg(long, default_value_t = presets::DEFAULT_DURATION_S)]
    duration: f64,
    /// Additive measurement noise level in dB; omit for a clean record
    #[arg(long)]
    snr: Option<f64>,
    /// Noise seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a preset cell under the standard pulse train
    Simulate(CommonSim),
    /// Identify a model from a CSV record
    Identify {
        /// Input CSV with header t,i_bat,v_bat
        input: PathBuf,
        /// Model structure: sre, randles, or thevenin
        #[arg(long)]
        model: String,
        /// Dynamic order (diffusion states for randles, RC pairs for
        /// thevenin)
        #[arg(long, default_value_t = 1)]
        order: usize,
        /// Segment lengths like 20000,20000,10000 (one segment when omitted)
        #[arg(long)]
        segments: Option<String>,
        /// Single observer eigenvalue set like 0.5 or 0.4,0.7 (grid search
        /// when omitted; thevenin only)
        #[arg(long)]
        observer: Option<String>,
    },
    /// Report the diffusion approximation error against the exact response
    Approx {
        /// State-space order
        #[arg(long, default_value_t = 7)]
        order: usize,
        /// Number of impulse samples to match
        #[arg(long, default_value_t = 10_000)]
        kmax: usize,
        /// Sampling period in seconds
        #[arg(long, default_value_t = 1.0)]
        ts: f64,
    },
    /// Print the frequency response of the diffusion approximation as CSV
    Bode {
        #[arg(long, default_value_t = 7)]
        order: usize,
        #[arg(long, default_value_t = 10_000)]
        kmax: usize,
        /// Normalized angular frequencies in rad/sample, log-spaced
        #[arg(long, default_value_t = 1e-3)]
        wmin: f64,
        #[arg(long, default_value_t = 1.0)]
        wmax: f64,
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Best-fit-rate between a reference record and a simulated one
    Bfr {
        reference: PathBuf,
        simulated: PathBuf,
        /// Segment lengths for windowed scores
        #[arg(long)]
        segments: Option<String>,
    },
    /// Repeated identification on noisy copies of a clean record
    Montecarlo {
        input: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 1)]
        order: usize,
        #[arg(long)]
        segments: Option<String>,
        /// Observer eigenvalues (thevenin only; required here so every
        /// trial fits the same structure)
        #[arg(long)]
        observer: Option<String>,
        #[arg(long, default_value_t = 30.0)]
        snr: f64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Validates a run configuration, collecting every violation instead of
/// stopping at the first.
pub fn validate_run(ts: f64, duration: f64, snr: Option<f64>, trials: usize) -> Result<()> {
    let mut problems = Vec::new();
    if !(ts.is_finite() && ts > 0.0) {
        problems.push(format!("ts must be positive and finite, got {ts}"));
    }
    if !(duration.is_finite() && duration > 0.0) {
        problems.push(format!("duration must be positive and finite, got {duration}"));
    }
    if let Some(s) = snr {
        if !s.is_finite() {
            problems.push(format!("snr must be finite, got {s}"));
        }
    }
    if trials == 0 {
        problems.push("trials must be at least 1".into());
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems))
    }
}

fn parse_segments(spec: Option<&str>, record_len: usize, min_len: usize) -> Result<SegmentPlan> {
    match spec {
        None => Ok(SegmentPlan::single(record_len)),
        Some(s) => {
            let lengths: Vec<usize> = s
                .split(',')
                .map(|tok| {
                    tok.trim().parse::<usize>().map_err(|_| {
                        Error::InvalidArgument(format!("bad segment length '{tok}'"))
                    })
                })
                .collect::<Result<_>>()?;
            SegmentPlan::new(lengths, min_len, record_len)
        }
    }
}

fn parse_observer(spec: &str) -> Result<ObserverMatrix> {
    let eigs: Vec<f64> = spec
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad eigenvalue '{tok}'")))
        })
        .collect::<Result<_>>()?;
    ObserverMatrix::from_real(&eigs)
}

fn emit_csv(out: Option<&PathBuf>, current: &SampledSignal, voltage: &SampledSignal) -> Result<()> {
    match out {
        Some(path) => {
            let record = DischargeRecord::new(current.clone(), voltage.clone())?;
            write_record(&record, path)
        }
        None => {
            let ts = current.ts();
            println!("t,i_bat,v_bat");
            for (k, (&i, &v)) in current.values().iter().zip(voltage.values()).enumerate() {
                println!("{},{},{}", k as f64 * ts, i, v);
            }
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            validate_run(c.ts, c.duration, c.snr, 1)?;
            let preset = Preset::parse(&c.preset)?;
            let current = presets::default_pulse_train(c.duration, c.ts)?;
            eprintln!(
                "simulating preset {} over {} samples at ts = {} s",
                preset.name(),
                current.len(),
                c.ts
            );
            let clean = presets::simulate_preset(preset, &current, None)?;
            let voltage = match c.snr {
                Some(snr) => add_noise(&clean, snr, c.seed)?,
                None => clean,
            };
            emit_csv(c.out.as_ref(), &current, &voltage)
        }
        Command::Identify {
            input,
            model,
            order,
            segments,
            observer,
        } => {
            let record = read_record(&input)?;
            let (current, voltage) = (record.current, record.voltage);
            let plan = parse_segments(segments.as_deref(), current.len(), 3)?;
            eprintln!(
                "identifying {} from {} samples in {} segment(s)",
                model,
                current.len(),
                plan.lengths().len()
            );
            match model.as_str() {
                "sre" => {
                    let fits = sre::sre_identify(&current, &voltage, &plan)?;
                    for (s, f) in fits.iter().enumerate() {
                        print!("segment {}:", s + 1);
                        if let Some(o) = f.params.ocv0 {
                            print!(" ocv0 = {o:.6} V,");
                        }
                        println!(
                            " c0 = {:.4} F, r0 = {:.6} ohm (residual rms {:.3e})",
                            f.params.c0, f.params.r0, f.residual_rms
                        );
                    }
                    Ok(())
                }
                "randles" => {
                    let real = warburg::normalized_warburg(
                        order,
                        presets::PRESET_WARBURG_KMAX,
                        current.ts(),
                    )?;
                    let fits = randles::randles_identify(&real, &current, &voltage, &plan)?;
                    for (s, f) in fits.iter().enumerate() {
                        print!("segment {}:", s + 1);
                        if let Some(o) = f.params.ocv0 {
                            print!(" ocv0 = {o:.6} V,");
                        }
                        println!(
                            " c0 = {:.4} F, a_w = {:.6}, r_b = {:.6} ohm (residual rms {:.3e})",
                            1.0 / f.params.inv_c0,
                            f.params.a_w(current.ts()),
                            f.params.rb,
                            f.residual_rms
                        );
                    }
                    Ok(())
                }
                "thevenin" => {
                    let (obs, fits) = match observer {
                        Some(spec) => {
                            let obs = parse_observer(&spec)?;
                            if obs.order() != order {
                                return Err(Error::InvalidArgument(format!(
                                    "observer has order {}, expected {}",
                                    obs.order(),
                                    order
                                )));
                            }
                            let fits =
                                thevenin::thevenin_identify(&obs, &current, &voltage, &plan)?;
                            (obs, fits)
                        }
                        None => {
                            let grid = GridSpec::default_for_order(order)?;
                            eprintln!(
                                "searching {} observer candidates",
                                grid.candidates.len()
                            );
                            thevenin::observer_search(&grid, &current, &voltage, &plan)?
                        }
                    };
                    eprintln!("observer eigenvalues: {:?}", obs.eigenvalues());
                    for (s, f) in fits.iter().enumerate() {
                        print!("segment {}:", s + 1);
                        if let Some(o) = f.params.ocv0 {
                            print!(" ocv0 = {o:.6} V,");
                        }
                        print!(
                            " c0 = {:.4} F, r0 = {:.6} ohm",
                            1.0 / f.params.inv_c0,
                            f.params.r0
                        );
                        let rc = thevenin::extract_rc(&obs, &f.params, current.ts())?;
                        if rc.valid {
                            for (j, (r, c)) in rc.pairs.iter().enumerate() {
                                print!(", r{} = {:.6} ohm, c{} = {:.4} F", j + 1, r, j + 1, c);
                            }
                        } else {
                            print!(", no passive RC equivalent");
                        }
                        println!(" (residual rms {:.3e})", f.residual_rms);
                        if !f.jacobi.converged {
                            eprintln!(
                                "warning: segment {} iteration stopped after {} steps without converging",
                                s + 1,
                                f.jacobi.iterations
                            );
                        }
                        if f.jacobi.non_monotone {
                            eprintln!(
                                "warning: segment {} cost did not decrease monotonically",
                                s + 1
                            );
                        }
                    }
                    Ok(())
                }
                other => Err(Error::InvalidArgument(format!(
                    "unknown model '{other}' (expected sre, randles, or thevenin)"
                ))),
            }
        }
        Command::Approx { order, kmax, ts } => {
            let real = warburg::normalized_warburg(order, kmax, ts)?;
            let w = warburg::warburg_impulse(1.0, ts, kmax)?;
            let w_hat = warburg::realization_impulse(&real, kmax);
            let e = warburg::relative_error(&w[..], &w_hat)?;
            println!("order = {order}, samples = {kmax}, E = {e:.4} %");
            Ok(())
        }
        Command::Bode {
            order,
            kmax,
            wmin,
            wmax,
            points,
            out,
        } => {
            if !(wmin > 0.0 && wmax > wmin && points >= 2) {
                return Err(Error::InvalidArgument(
                    "need 0 < wmin < wmax and at least 2 points".into(),
                ));
            }
            let real = warburg::normalized_warburg(order, kmax, 1.0)?;
            let ws: Vec<f64> = (0..points)
                .map(|k| {
                    wmin * (wmax / wmin).powf(k as f64 / (points - 1) as f64)
                })
                .collect();
            let resp = warburg::freq_response(&real, &ws);
            let mut lines = String::from("w,mag_db,phase_deg,ideal_mag_db,ideal_phase_deg\n");
            for (k, &w) in ws.iter().enumerate() {
                let h = resp[k];
                let ideal = warburg::ideal_warburg_response(w);
                lines.push_str(&format!(
                    "{},{},{},{},{}\n",
                    w,
                    20.0 * h.norm().log10(),
                    h.arg().to_degrees(),
                    20.0 * ideal.norm().log10(),
                    ideal.arg().to_degrees()
                ));
            }
            match out {
                Some(path) => std::fs::write(&path, lines).map_err(|e| Error::Io {
                    path: path.display().to_string(),
                    source: e,
                }),
                None => {
                    print!("{lines}");
                    Ok(())
                }
            }
        }
        Command::Bfr {
            reference,
            simulated,
            segments,
        } => {
            let vref = read_record(&reference)?.voltage;
            let vsim = read_record(&simulated)?.voltage;
            let plan = parse_segments(segments.as_deref(), vref.len(), 1)?;
            let rep = bfr_windowed(&vref, &vsim, &plan)?;
            for (k, w) in rep.windows.iter().enumerate() {
                println!("window {}: BFR = {:.4} %", k + 1, w);
            }
            println!("overall: BFR = {:.4} %", rep.overall);
            Ok(())
        }
        Command::Montecarlo {
            input,
            model,
            order,
            segments,
            observer,
            snr,
            trials,
            seed,
        } => {
            validate_run(1.0, 1.0, Some(snr), trials)?;
            let record = read_record(&input)?;
            let (current, voltage) = (record.current, record.voltage);
            let plan = parse_segments(segments.as_deref(), current.len(), 3)?;
            let mc_model = match model.as_str() {
                "sre" => McModel::Sre,
                "randles" => McModel::Randles {
                    realization: warburg::normalized_warburg(
                        order,
                        presets::PRESET_WARBURG_KMAX,
                        current.ts(),
                    )?,
                },
                "thevenin" => {
                    let spec = observer.ok_or_else(|| {
                        Error::InvalidArgument(
                            "montecarlo with thevenin needs --observer".into(),
                        )
                    })?;
                    McModel::Thevenin {
                        observer: parse_observer(&spec)?,
                    }
                }
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown model '{other}' (expected sre, randles, or thevenin)"
                    )))
                }
            };
            eprintln!("{trials} trials at {snr} dB, base seed {seed}");
            let rep = monte_carlo(&mc_model, &current, &voltage, &plan, snr, trials, seed)?;
            println!(
                "trials = {}, failures = {}, snr = {} dB",
                rep.trials, rep.failures, rep.snr_db
            );
            for p in &rep.params {
                println!("{}: mean = {:.6}, std = {:.3e}", p.name, p.mean, p.std);
            }
            println!("bfr: mean = {:.4} %, std = {:.3e}", rep.bfr_mean, rep.bfr_std);
            Ok(())
        }
    }
}

/// Entry point used by the binary.
pub fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
