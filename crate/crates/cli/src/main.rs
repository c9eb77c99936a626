use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use awp_core::config::ExperimentConfig;
use awp_core::data::Dataset;
use awp_core::landscape::{
    compare_csv, flatness, grid, perturb_compare, profile_1d, profile_1d_csv, profile_2d, profile_2d_csv,
    sample_direction,
};
use awp_core::network::Network;
use awp_core::rng::derive_seed;
use awp_core::svg::{line_plot, Series};
use awp_core::trainer::{load_checkpoint, prepare_ssl, save_checkpoint, CheckpointRecord, Trainer};
use awp_core::{Error, Result};

#[derive(Parser)]
#[command(name = "awp-lab", version, about = "Adversarial training with weight perturbation on small networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, best.ckpt, last.ckpt.
    Train(Common),
    /// Weight loss landscape of a checkpoint along random directions.
    Landscape(Common),
    /// Adversarial loss under AWP and RWP perturbations of a checkpoint.
    PerturbCompare(Common),
    /// Histogram of one layer's weights.
    Histogram(Common),
    /// List every config key with its default.
    Keys,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of landscape directions.
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    /// Overrides the `checkpoint` key.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn setup(args: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(ckpt) = &args.checkpoint {
        cfg.set("checkpoint", &ckpt.to_string_lossy())?;
    }
    fs::create_dir_all(&args.out).map_err(|source| Error::Io {
        path: args.out.clone(),
        source,
    })?;
    write(&args.out.join("config.resolved"), &cfg.resolved())?;
    Ok(cfg)
}

fn template(cfg: &ExperimentConfig, data: &Dataset) -> Result<Network> {
    cfg.network(data.example_shape(), data.classes)
}

fn load_model(cfg: &ExperimentConfig, data: &Dataset) -> Result<Network> {
    let (net, _) = load_checkpoint(&cfg.path("checkpoint")?, &template(cfg, data)?)?;
    Ok(net)
}

/// The seeded subset the analysis commands measure on.
fn analysis_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let (train, test) = cfg.datasets()?;
    let ds = if cfg.get("landscape_split") == "test" { test } else { train };
    Ok(ds.subset(cfg.usize("landscape_subset"), derive_seed(cfg.u64("seed"), 0x5B)))
}

fn train(args: &Common) -> Result<()> {
    let cfg = setup(args)?;
    let tc = cfg.train_config()?;
    let (train, test) = cfg.datasets()?;
    let net = template(&cfg, &train)?;
    let trainer = Trainer::new(tc.clone())?;
    let outcome = if tc.ssl.is_some() {
        let ssl = prepare_ssl(&net, &train, &test, &tc)?;
        trainer.fit(net, &ssl.labeled, &test, ssl.pseudo.as_ref())?
    } else {
        trainer.fit(net, &train, &test, None)?
    };
    let m = &outcome.metrics;
    write(&args.out.join("metrics.csv"), &m.to_csv())?;
    let last_epoch = m.last().map_or(tc.epochs, |e| e.epoch);
    let best_epoch = m.best_epoch.unwrap_or(last_epoch);
    for (name, net, epoch) in [("best.ckpt", &outcome.best, best_epoch), ("last.ckpt", &outcome.last, last_epoch)] {
        let rec = CheckpointRecord::from_network(net, epoch, outcome.rng_state, cfg.pairs());
        save_checkpoint(&args.out.join(name), &rec)?;
    }
    if cfg.switch("svg") {
        let pts = |f: fn(&awp_core::trainer::EpochMetrics) -> f64| -> Vec<(f64, f64)> {
            m.epochs.iter().map(|e| (e.epoch as f64, f(e))).collect()
        };
        let (tr, te, gap) = (pts(|e| e.train_rob), pts(|e| e.test_rob), pts(|e| e.gap));
        let svg = line_plot(
            "robustness",
            "epoch",
            "%",
            &[
                Series { label: "train", points: &tr },
                Series { label: "test", points: &te },
                Series { label: "gap", points: &gap },
            ],
        );
        write(&args.out.join("metrics.svg"), &svg)?;
    }
    if let Some(e) = m.last() {
        println!(
            "epoch {}: train {:.2}% test {:.2}% natural {:.2}% gap {:.2}; best epoch {best_epoch}",
            e.epoch, e.train_rob, e.test_rob, e.nat_acc, e.gap
        );
    }
    Ok(())
}

fn landscape(args: &Common) -> Result<()> {
    let cfg = setup(args)?;
    if args.repeat == 0 {
        return Err(Error::Invalid("--repeat must be >= 1".into()));
    }
    let data = analysis_data(&cfg)?;
    let net = load_model(&cfg, &data)?;
    let attack = cfg.eval_attack();
    let seed = cfg.u64("seed");
    let alphas = grid(cfg.f64("alpha_min"), cfg.f64("alpha_max"), cfg.usize("alpha_steps"))?;
    let first = cfg.u64("direction_seed");
    let mut summary = String::from("direction,seed,max_rise,mean_rise\n");
    let mut curves = Vec::new();
    for r in 0..args.repeat {
        let dseed = first + 2 * r as u64;
        let d = sample_direction(&net, dseed)?;
        let name = format!("profile_{:02}", r + 1);
        if cfg.get("landscape_dims") == "2" {
            let e = sample_direction(&net, dseed + 1)?;
            let betas = grid(cfg.f64("beta_min"), cfg.f64("beta_max"), cfg.usize("beta_steps"))?;
            let p = profile_2d(&net, &data, &d, &e, &alphas, &betas, &attack, seed)?;
            write(&args.out.join(format!("{name}_2d.csv")), &profile_2d_csv(&p))?;
        } else {
            let p = profile_1d(&net, &data, &d, &alphas, &attack, seed)?;
            let f = flatness(&p)?;
            summary.push_str(&format!("{},{dseed},{},{}\n", r + 1, f.max_rise, f.mean_rise));
            write(&args.out.join(format!("{name}.csv")), &profile_1d_csv(&p))?;
            curves.push((name, p.alphas.iter().copied().zip(p.losses.iter().copied()).collect::<Vec<_>>()));
        }
    }
    if !curves.is_empty() {
        write(&args.out.join("flatness.csv"), &summary)?;
        if cfg.switch("svg") {
            let series: Vec<Series> = curves
                .iter()
                .map(|(n, pts)| Series { label: n, points: pts })
                .collect();
            write(&args.out.join("landscape.svg"), &line_plot("weight loss landscape", "alpha", "adversarial loss", &series))?;
        }
    }
    Ok(())
}

fn compare(args: &Common) -> Result<()> {
    let cfg = setup(args)?;
    let data = analysis_data(&cfg)?;
    let net = load_model(&cfg, &data)?;
    let rows = perturb_compare(
        &net,
        &data,
        &cfg.reals("gammas"),
        cfg.awp_config(),
        cfg.usize("rwp_draws"),
        &cfg.eval_attack(),
        cfg.u64("seed"),
    )?;
    write(&args.out.join("compare.csv"), &compare_csv(&rows))?;
    if cfg.switch("svg") {
        let pick = |s: &str| -> Vec<(f64, f64)> {
            rows.iter().filter(|r| r.strategy == s).map(|r| (r.gamma, r.loss)).collect()
        };
        let (a, r) = (pick("awp"), pick("rwp"));
        let svg = line_plot(
            "perturbed adversarial loss",
            "gamma",
            "loss",
            &[Series { label: "awp", points: &a }, Series { label: "rwp", points: &r }],
        );
        write(&args.out.join("compare.svg"), &svg)?;
    }
    Ok(())
}

fn histogram(args: &Common) -> Result<()> {
    let cfg = setup(args)?;
    let (train, _) = cfg.datasets()?;
    let net = load_model(&cfg, &train)?;
    let l = net.resolve_layer(cfg.get("layer"))?;
    let h = net.weight_histogram(l, cfg.usize("bins"))?;
    let mut out = String::from("bin_left,bin_right,count\n");
    for (i, c) in h.counts.iter().enumerate() {
        out.push_str(&format!("{},{},{c}\n", h.edges[i], h.edges[i + 1]));
    }
    write(&args.out.join("histogram.csv"), &out)
}

fn keys() {
    for (k, d, doc) in ExperimentConfig::documentation() {
        println!("{k} = {d}\t# {doc}");
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("AWP_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Invalid(format!("AWP_LAB_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Train(a) => train(a),
        Command::Landscape(a) => landscape(a),
        Command::PerturbCompare(a) => compare(a),
        Command::Histogram(a) => histogram(a),
        Command::Keys => {
            keys();
            Ok(())
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
