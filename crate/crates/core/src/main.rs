//! Command-line driver: mesh inspection, single-cell restitution, spiral
//! initiation, coupled runs, predefined sweeps, and offline
//! re-classification of archived voltage fields.

use std::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cardioem::cell::{
    dynamic_restitution, max_restitution_slope, standard_cl_ladder, SlopeFamily, Tissue, Variant,
};
use cardioem::mesh::write_mesh;
use cardioem::sim::{
    init_spiral, load_checkpoint, read_field, run_coupled, run_sweep, write_analysis_csv,
    write_verdict_csv, Experiment, ExperimentConfig, OnlineClassifier, SimError, SweepTable,
};

#[derive(Parser)]
#[command(
    name = "cardioem",
    version,
    about = "Coupled cardiac electromechanics on embedded meshes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the mesh pair for a configuration and report its shape.
    Mesh {
        #[arg(long)]
        config: PathBuf,
        /// Also write the meshes into the experiment's output directory.
        #[arg(long)]
        write: bool,
    },
    /// Single-cell dynamic restitution and its maximum slope.
    Cell {
        /// control | failing
        #[arg(long, default_value = "control")]
        tissue: String,
        /// 1.1 | 1.4 | 1.8
        #[arg(long, default_value = "1.1")]
        slope: String,
        #[arg(long, default_value_t = 0.02)]
        dt: f64,
        /// Beats paced at each cycle length.
        #[arg(long, default_value_t = 8)]
        beats: usize,
    },
    /// Run the initiation protocol and write its checkpoint.
    Init {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<output_dir>/init.ck`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the configured experiment from its checkpoint, initiating first
    /// if the checkpoint does not exist yet.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Redo initiation even if a checkpoint exists.
        #[arg(long)]
        force_init: bool,
    },
    /// Run a predefined sweep: patch-size | density | summary.
    Sweep {
        #[arg(long)]
        table: String,
        /// Fine-mesh target edge, mm.
        #[arg(long, default_value_t = 0.42)]
        edge: f64,
        /// Refinements between the mechanics and electrophysiology meshes.
        #[arg(long, default_value_t = 3)]
        levels: usize,
        /// Directory for per-row outputs, checkpoints, and the verdict CSV.
        #[arg(long, default_value = "out/sweep")]
        root: PathBuf,
    },
    /// Re-run the stability classifier over archived voltage fields.
    Classify {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<output_dir>/fields`.
        #[arg(long)]
        fields: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = e.source();
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn default_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    cfg.experiment.output_dir.join("init.ck")
}

fn run(cmd: Cmd) -> Result<ExitCode, Box<dyn Error>> {
    match cmd {
        Cmd::Mesh { config, write } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let exp = Experiment::build(cfg)?;
            println!(
                "coarse: {} elements, {} vertices, mean edge {:.3} mm",
                exp.coarse.n_tris(),
                exp.coarse.n_nodes(),
                exp.coarse.mean_edge_length()
            );
            println!(
                "fine:   {} elements, {} vertices, mean edge {:.3} mm",
                exp.fine.n_tris(),
                exp.fine.n_nodes(),
                exp.fine.mean_edge_length()
            );
            if let Some(c) = &exp.carve {
                println!(
                    "carved: {:.2}% of the tissue in {} patches",
                    100.0 * c.achieved_fraction,
                    c.n_patches
                );
            }
            if write {
                let dir = &exp.config.experiment.output_dir;
                std::fs::create_dir_all(dir)?;
                write_mesh(&exp.coarse, &dir.join("coarse"))?;
                write_mesh(&exp.fine, &dir.join("fine"))?;
                println!("meshes written under {}", dir.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Cell {
            tissue,
            slope,
            dt,
            beats,
        } => {
            let tissue = match tissue.as_str() {
                "control" => Tissue::Control,
                "failing" => Tissue::Failing,
                other => return Err(format!("unknown tissue '{other}'").into()),
            };
            let slope = match slope.as_str() {
                "1.1" => SlopeFamily::Slope11,
                "1.4" => SlopeFamily::Slope14,
                "1.8" => SlopeFamily::Slope18,
                other => return Err(format!("unknown slope family '{other}'").into()),
            };
            let variant = Variant { tissue, slope };
            let p = variant.params();
            let points = dynamic_restitution(&p, &standard_cl_ladder(), beats, dt)?;
            println!("cycle_length_ms,di_ms,apd90_ms");
            for pt in &points {
                println!("{},{:.2},{:.2}", pt.cycle_length, pt.di, pt.apd90);
            }
            println!(
                "# {}: max restitution slope {:.3}",
                variant,
                max_restitution_slope(&points)
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Init { config, checkpoint } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let path = checkpoint.unwrap_or_else(|| default_checkpoint(&cfg));
            let exp = Experiment::build(cfg)?;
            let ck = init_spiral(&exp, &path)?;
            println!(
                "checkpoint at t = {} ms written to {}",
                ck.t_ms,
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Run {
            config,
            checkpoint,
            force_init,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let path = checkpoint.unwrap_or_else(|| default_checkpoint(&cfg));
            let exp = Experiment::build(cfg)?;
            let ck = if force_init || !path.exists() {
                init_spiral(&exp, &path)?
            } else {
                load_checkpoint(&path, exp.config.fingerprint())?
            };
            let out = run_coupled(&exp, &ck)?;
            match &out.verdict {
                Some(v) => {
                    println!("classification: {}", v.classification.label());
                    if let Some(t) = v.first_breakup_ms {
                        println!("first breakup:  {t:.0} ms");
                    }
                    println!("terminated:     {}", v.terminated);
                }
                None => println!("run too short for a stability verdict"),
            }
            println!(
                "{} reaction-diffusion steps, {} mechanics solves, {:.1} s wall",
                out.stats.ep_steps, out.stats.mech_solves, out.stats.wall_s
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep {
            table,
            edge,
            levels,
            root,
        } => {
            let Some(table) = SweepTable::by_name(&table, &root, edge, levels) else {
                return Err(format!(
                    "unknown table '{table}'; use patch-size, density, or summary"
                )
                .into());
            };
            std::fs::create_dir_all(&root)?;
            let outcomes = run_sweep(&table, &root.join("checkpoints"))?;
            let csv = root.join(format!("{}-verdicts.csv", table.name));
            write_verdict_csv(&outcomes, &csv)?;

            let mut errors = 0;
            let mut mismatches = 0;
            for o in &outcomes {
                let status = match (&o.error, o.matches()) {
                    (Some(e), _) => {
                        errors += 1;
                        format!("ERROR: {e}")
                    }
                    (None, Some(true)) => format!(
                        "{} (matches published)",
                        o.observed.unwrap().label()
                    ),
                    (None, Some(false)) => {
                        mismatches += 1;
                        format!(
                            "{} (published: {})",
                            o.observed.unwrap().label(),
                            o.expected.label()
                        )
                    }
                    (None, None) => "no verdict".to_string(),
                };
                println!("{:<40} {status}", o.id);
            }
            println!(
                "\n{} rows: {} matched, {mismatches} mismatched, {errors} failed; CSV at {}",
                outcomes.len(),
                outcomes.len() - mismatches - errors,
                csv.display()
            );
            Ok(if errors == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Cmd::Classify { config, fields } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let dir = fields.unwrap_or_else(|| cfg.experiment.output_dir.join("fields"));
            let exp = Experiment::build(cfg)?;

            let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension().is_some_and(|x| x == "bin")
                        && p.file_name()
                            .and_then(|n| n.to_str())
                            .is_some_and(|n| n.starts_with("field_"))
                })
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(SimError::Config(format!(
                    "no field files under {} (run with keep_fields = true)",
                    dir.display()
                ))
                .into());
            }

            let mut classifier = OnlineClassifier::new(&exp.fine);
            for p in &paths {
                let (t, v) = read_field(p)?;
                classifier.push(t, &v);
            }
            let verdict = classifier.finish()?;
            let out = exp.config.experiment.output_dir.join("analysis.csv");
            write_analysis_csv(&verdict.series, &out)?;
            println!("classification: {}", verdict.classification.label());
            if let Some(t) = verdict.first_breakup_ms {
                println!("first breakup:  {t:.0} ms");
            }
            println!("terminated:     {}", verdict.terminated);
            println!(
                "{} fields classified; analysis at {}",
                paths.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
