use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use licw::config::SuiteConfig;
use licw::image_io::{load_image, save_image};
use licw::plotdata::emit_plotdata;
use licw::suite::{load_images, run_suite};
use licw::synth::SyntheticSpec;
use licw::{HarnessError, Result};
use licw_core::analysis::{eci, ldmr_cdmr, perf_variation, DoSet};
use licw_core::attacks::{arda, srda, AttackConfig};
use licw_core::models::{load_checkpoint, save_checkpoint, CompressionModel, Family};
use licw_core::optim::{adversarial_finetune, online_update, train_rd, AdversarialConfig, LrSchedule, TrainConfig};

#[derive(Parser)]
#[command(name = "licw", version, about = "Rate-distortion attack workbench for toy learned image codecs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one submodel on R + lambda * D.
    Train(TrainArgs),
    /// Craft an adversarial example.
    #[command(subcommand)]
    Attack(AttackCmd),
    /// Rate and distortion of an image, and their change under an adversarial version.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        adv: Option<PathBuf>,
    },
    /// Entropy causal intervention on an adversarial pair.
    Eci {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        adv: PathBuf,
    },
    /// Layer-wise distance magnification for an image pair.
    Ldmr {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        adv: PathBuf,
    },
    /// Adversarial training or online updating.
    #[command(subcommand)]
    Defend(DefendCmd),
    /// Run a full suite from a JSON config and write reports and figure data.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Print the default configuration and exit.
        #[arg(long)]
        print_default: bool,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        surface_steps: Option<usize>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Training images (PPM, PNG or raw float).
    #[arg(long, num_args = 0..)]
    images: Vec<PathBuf>,
    /// Number of synthetic 128x128 textures to add.
    #[arg(long, default_value_t = 0)]
    synthetic: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DataArgs {
    fn load(&self) -> Result<Vec<licw_core::diffcore::Tensor>> {
        let spec = (self.synthetic > 0).then_some(SyntheticSpec { count: self.synthetic, height: 128, width: 128, seed: self.seed });
        let images = load_images(&self.images, spec.as_ref())?;
        if images.is_empty() {
            return Err(HarnessError::Config("no training images: pass --images or --synthetic".into()));
        }
        Ok(images.into_iter().map(|r| r.pixels).collect())
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    family: Family,
    #[arg(long)]
    lambda: f64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    crop: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    gamma_r: f64,
    #[arg(long)]
    gamma_d: f64,
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,
    #[arg(long, default_value_t = 64)]
    surface_steps: usize,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Output path; `.ppm`/`.png` quantize to 8 bits, anything else is raw float.
    #[arg(long)]
    out: PathBuf,
}

impl AttackArgs {
    fn config(&self) -> AttackConfig {
        AttackConfig { epsilon: self.epsilon, surface_steps: self.surface_steps, tau: self.tau, ..AttackConfig::new(self.gamma_r, self.gamma_d) }
    }
}

#[derive(Subcommand)]
enum AttackCmd {
    Srda {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        args: AttackArgs,
    },
    Arda {
        #[arg(long, num_args = 1..)]
        models: Vec<PathBuf>,
        #[command(flatten)]
        args: AttackArgs,
    },
}

#[derive(Subcommand)]
enum DefendCmd {
    /// Adversarial finetuning with the joint direction sampler.
    At {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 64)]
        crop: usize,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize the pixels of a (possibly attacked) input for R + lambda * D.
    Online {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 64)]
        iters: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn attack_report(model: &CompressionModel, args: &AttackArgs, x_a: &licw_core::diffcore::Tensor, x: &licw_core::diffcore::Tensor) -> Result<()> {
    let r = perf_variation(model, x, x_a)?;
    println!("{}: dR {:+.4} bpp, dD {:+.3} (MSE), PSNR {:.2} -> {:.2} dB", model.family(), r.delta_rate, r.delta_distortion, r.psnr, r.psnr_adv);
    save_image(x_a, &args.out)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(a) => {
            let data = a.data.load()?;
            let mut model = CompressionModel::new(a.family, a.lambda, a.data.seed)?;
            let cfg = TrainConfig {
                lambda: a.lambda,
                steps: a.steps,
                crop: a.crop,
                batch: a.batch,
                lr: LrSchedule::last_tenth(a.lr, a.lr / 10.0, a.steps),
                seed: a.data.seed,
            };
            let trace = train_rd(&mut model, &data, &cfg)?;
            if let Some(last) = trace.rows.last() {
                println!("step {}: rate {:.4} bpp, distortion {:.3}, loss {:.4}", last.step, last.rate, last.distortion, last.total);
            }
            save_checkpoint(&model, &a.out)?;
        }
        Command::Attack(AttackCmd::Srda { model, args }) => {
            let model = load_checkpoint(&model)?;
            let x = load_image(&args.image)?.pixels;
            let res = srda(&model, &x, &args.config())?;
            attack_report(&model, &args, &res.x_a, &x)?;
        }
        Command::Attack(AttackCmd::Arda { models, args }) => {
            let models = models.iter().map(load_checkpoint).collect::<licw_core::Result<Vec<_>>>()?;
            let x = load_image(&args.image)?.pixels;
            let res = arda(&models, &x, &args.config())?;
            for m in &models {
                attack_report(m, &args, &res.x_a, &x)?;
            }
        }
        Command::Eval { model, image, adv } => {
            let model = load_checkpoint(&model)?;
            let x = load_image(&image)?.pixels;
            let rd = model.evaluate(&x)?;
            println!("{} lambda {}: {:.4} bpp ({:.4} y + {:.4} z), MSE {:.3}", model.family(), model.lambda(), rd.bpp, rd.bpp_y, rd.bpp_z, rd.mse);
            if let Some(adv) = adv {
                let r = perf_variation(&model, &x, &load_image(&adv)?.pixels)?;
                println!("dR {:+.4} bpp, dD {:+.3}, PSNR {:.2} -> {:.2} dB", r.delta_rate, r.delta_distortion, r.psnr, r.psnr_adv);
            }
        }
        Command::Eci { model, image, adv } => {
            let model = load_checkpoint(&model)?;
            let (x, x_a) = (load_image(&image)?.pixels, load_image(&adv)?.pixels);
            let mut sets = vec![DoSet::NONE];
            sets.extend(DoSet::singles(model.family()));
            sets.push(DoSet::all_for(model.family()));
            println!("interventions,delta_mean,scale,bitrate_z,bitrate_y,total");
            for d in sets {
                let r = eci(&model, &x, &x_a, d)?;
                let o = licw::report::opt;
                println!("{d},{},{},{},{},{}", o(r.delta_mean), o(r.scale), o(r.bitrate_z), r.bitrate_y, r.total);
            }
        }
        Command::Ldmr { model, image, adv } => {
            let model = load_checkpoint(&model)?;
            let p = ldmr_cdmr(&model, &load_image(&image)?.pixels, &load_image(&adv)?.pixels)?;
            print!("{}", p.to_csv());
        }
        Command::Defend(DefendCmd::At { model, iters, batch, crop, data, out }) => {
            let base = load_checkpoint(&model)?;
            let cfg = AdversarialConfig {
                iters,
                batch,
                crop,
                lr: LrSchedule::last_tenth(1e-4, 1e-5, iters),
                seed: data.seed,
                ..AdversarialConfig::default()
            };
            let (defended, trace) = adversarial_finetune(&base, &data.load()?, &cfg)?;
            if let Some(last) = trace.rows.last() {
                println!("iteration {}: loss {:.4}", last.step, last.total);
            }
            save_checkpoint(&defended, &out)?;
        }
        Command::Defend(DefendCmd::Online { model, image, iters, lr, out }) => {
            let model = load_checkpoint(&model)?;
            let x = load_image(&image)?.pixels;
            let res = online_update(&model, &x, model.lambda(), iters, lr)?;
            println!("loss {:.4} -> {:.4} (best at iteration {})", res.initial_loss, res.best_loss, res.best_iteration);
            save_image(&res.x_u, &out)?;
        }
        Command::Report { config, print_default, output_dir, workers, seed, epsilon, surface_steps } => {
            if print_default {
                println!("{}", SuiteConfig::default().to_json());
                return Ok(true);
            }
            let path = config.ok_or_else(|| HarnessError::Config("--config is required".into()))?;
            let mut cfg = SuiteConfig::load(&path)?;
            cfg.output_dir = output_dir.unwrap_or(cfg.output_dir);
            cfg.workers = workers.or(cfg.workers);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.epsilon = epsilon.unwrap_or(cfg.epsilon);
            cfg.surface_steps = surface_steps.unwrap_or(cfg.surface_steps);
            let bundle = run_suite(&cfg)?;
            let files = emit_plotdata(&bundle, &cfg.output_dir.join("plotdata"))?;
            println!(
                "{} reports, {} tasks computed, {} resumed, {} failed; {} figure files in {}",
                bundle.reports.len(),
                bundle.computed,
                bundle.resumed,
                bundle.failures.len(),
                files.len(),
                cfg.output_dir.display()
            );
            for (task, err) in &bundle.failures {
                eprintln!("failed: {task}: {err}");
            }
            return Ok(bundle.failures.is_empty());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
