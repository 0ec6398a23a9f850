use std::io::Write;
use std::path::{Path, PathBuf};

use qfat::data::{read_jsonl, write_jsonl};
use qfat::envlab::{self, plot, EnvKind, RolloutConfig};
use qfat::gmm::{sample_vanilla, scale_variances, GmmParams};
use qfat::modes::{find_modes, sample_mode, ModeFinderConfig, ModeNoise};
use qfat::policy::{Policy, PolicyConfig, SamplerSpec};
use qfat::trainer::{self, TrainConfig};
use qfat::{bench as qbench, rng, Error};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{Common, EnvArg, SamplerArg, SamplerFlags};

pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn invalid(msg: impl Into<String>) -> Self {
        CliError { code: 1, message: msg.into() }
    }

    fn numerical(msg: impl Into<String>) -> Self {
        CliError { code: 2, message: msg.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFiniteLoss { .. } => CliError::numerical(e.to_string()),
            _ => CliError::invalid(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::invalid(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::invalid(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn env_kind(e: EnvArg) -> EnvKind {
    match e {
        EnvArg::Multiroute => EnvKind::Multiroute,
        EnvArg::Sequencing => EnvKind::Sequencing,
    }
}

fn setup_threads(common: &Common) -> CliResult {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::invalid("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::invalid(format!("cannot start thread pool: {e}")))?;
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> CliResult {
    if !path.is_file() {
        return Err(CliError::invalid(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn require_parent(path: &Path) -> CliResult {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(CliError::invalid(format!("output directory {} does not exist", p.display())))
        }
        _ => Ok(()),
    }
}

fn ensure_dir(path: &Path) -> CliResult {
    if path.exists() && !path.is_dir() {
        return Err(CliError::invalid(format!("{} exists and is not a directory", path.display())));
    }
    require_parent(path)?;
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> CliResult<T> {
    require_file(path, what)?;
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::invalid(format!("{what} {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// `none`, `fixed[:sd]` or `laplace[:temperature]`.
pub fn parse_mode_noise(s: &str) -> CliResult<ModeNoise> {
    let (kind, value) = match s.split_once(':') {
        Some((k, v)) => {
            let v: f64 = v.parse().map_err(|_| CliError::invalid(format!("bad mode-noise value in {s:?}")))?;
            (k, Some(v))
        }
        None => (s, None),
    };
    let noise = match kind {
        "none" if value.is_none() => ModeNoise::None,
        "fixed" => ModeNoise::Fixed(value.unwrap_or(0.01)),
        "laplace" => ModeNoise::Laplace(value.unwrap_or(1.0)),
        _ => return Err(CliError::invalid(format!("--mode-noise must be none, fixed[:sd] or laplace[:t], got {s:?}"))),
    };
    Ok(noise)
}

fn sampler_spec(f: &SamplerFlags) -> CliResult<SamplerSpec> {
    let spec = match f.sampler {
        SamplerArg::Vanilla | SamplerArg::Mode if f.alpha.is_some() => {
            return Err(CliError::invalid("--alpha only applies to --sampler scaled"));
        }
        SamplerArg::Vanilla | SamplerArg::Scaled if f.mode_noise.is_some() => {
            return Err(CliError::invalid("--mode-noise only applies to --sampler mode"));
        }
        SamplerArg::Vanilla => SamplerSpec::Vanilla,
        SamplerArg::Scaled => SamplerSpec::Scaled {
            alpha: f.alpha.ok_or_else(|| CliError::invalid("--sampler scaled needs --alpha"))?,
        },
        SamplerArg::Mode => SamplerSpec::Mode { noise: parse_mode_noise(f.mode_noise.as_deref().unwrap_or("none"))? },
    };
    spec.validate()?;
    Ok(spec)
}

pub fn gen_data(env: EnvArg, n: usize, noise_std: f64, out: &Path, common: &Common) -> CliResult {
    setup_threads(common)?;
    require_parent(out)?;
    let kind = env_kind(env);
    let mut rng = rng::substream(common.seed, "data");
    let trajs = match kind {
        EnvKind::Multiroute => envlab::generate_multiroute_demos(n, noise_std, &mut rng)?.0,
        EnvKind::Sequencing => envlab::generate_sequencing_demos(n, noise_std, &mut rng)?.0,
    };
    write_jsonl(out, &trajs)?;
    write_json(
        &trainer::sidecar_path(out),
        &json!({"command": "gen-data", "env": kind, "n": n, "noise_std": noise_std, "seed": common.seed}),
    )?;
    eprintln!("wrote {} trajectories to {}", trajs.len(), out.display());
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainFile {
    pub policy: PolicyConfig,
    pub train: TrainConfig,
}

pub fn train(config: &Path, dataset: &Path, out: &Path, common: &Common) -> CliResult {
    setup_threads(common)?;
    let mut cfg: TrainFile = read_json(config, "config")?;
    require_file(dataset, "dataset")?;
    ensure_dir(out)?;
    cfg.train.seed = common.seed;
    cfg.policy.validate()?;
    cfg.train.validate()?;
    let trajs = read_jsonl(dataset)?;
    let prepared = trainer::prepare(&trajs, &cfg.policy, &cfg.train)?;
    if prepared.skipped > 0 {
        eprintln!("skipped {} trajectories shorter than the window layout", prepared.skipped);
    }
    if cfg.train.min_lr.is_none() {
        eprintln!("note: min_lr absent, learning rate held constant at {}", cfg.train.max_lr);
    }
    let policy = Policy::new(cfg.policy.clone(), &mut rng::substream(common.seed, "init"))?;
    let outcome = trainer::train(policy, &prepared, &cfg.train, |row, _| {
        eprintln!(
            "epoch {:>4}  train_nll {:>9.4}  val_nll {:>9}  active {:>5}  lr {:.2e}",
            row.epoch,
            row.train_nll,
            row.val_nll.map_or("-".into(), |v| format!("{v:.4}")),
            row.mean_active_mixtures.map_or("-".into(), |v| format!("{v:.2}")),
            row.lr
        );
    })?;
    let meta = json!({"seed": common.seed, "train": cfg.train, "dataset": dataset});
    trainer::save_policy(&out.join("best.qfat"), &outcome.best, &prepared.normalizer, meta.clone())?;
    trainer::save_policy(&out.join("final.qfat"), &outcome.last, &prepared.normalizer, meta)?;
    trainer::write_log_csv(&out.join("train_log.csv"), &outcome.log)?;
    write_json(
        &out.join("train_summary.json"),
        &json!({
            "command": "train",
            "seed": common.seed,
            "config": cfg,
            "dataset": dataset,
            "skipped_trajectories": prepared.skipped,
            "train_windows": prepared.train.len(),
            "val_windows": prepared.val.len(),
            "best_epoch": outcome.best_epoch,
            "best_val_nll": outcome.best_val_nll,
            "constant_lr": outcome.constant_lr,
            "log": outcome.log,
        }),
    )?;
    eprintln!("best epoch {} (val NLL {:.4}); outputs in {}", outcome.best_epoch, outcome.best_val_nll, out.display());
    Ok(())
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub env: EnvArg,
    pub episodes: usize,
    pub sampler: &'a SamplerFlags,
    pub conditional: bool,
    pub dataset: Option<&'a Path>,
    pub process_noise: f64,
    pub out: &'a Path,
    pub common: &'a Common,
}

pub fn eval(a: EvalArgs) -> CliResult {
    setup_threads(a.common)?;
    let sampler = sampler_spec(a.sampler)?;
    require_file(a.checkpoint, "checkpoint")?;
    let references = match (a.conditional, a.dataset) {
        (true, Some(p)) => {
            require_file(p, "dataset")?;
            read_jsonl(p)?
        }
        (true, None) => return Err(CliError::invalid("--conditional needs --dataset with reference demonstrations")),
        (false, Some(_)) => return Err(CliError::invalid("--dataset only applies with --conditional")),
        (false, None) => Vec::new(),
    };
    ensure_dir(a.out)?;
    let (policy, side) = trainer::load_policy(a.checkpoint, None)?;
    let cfg = RolloutConfig {
        env: env_kind(a.env),
        episodes: a.episodes,
        seed: a.common.seed,
        sampler,
        conditional: a.conditional,
        process_noise: a.process_noise,
        active_threshold: trainer::ACTIVE_THRESHOLD,
    };
    let report = envlab::rollout(&policy, &side.normalizer, &cfg, &references)?;
    #[derive(Serialize)]
    struct EvalOutput<'r> {
        command: &'static str,
        seed: u64,
        checkpoint: PathBuf,
        dataset: Option<PathBuf>,
        rollout: &'r RolloutConfig,
        policy: &'r PolicyConfig,
        #[serde(flatten)]
        report: &'r envlab::RolloutReport,
    }
    write_json(
        &a.out.join("report.json"),
        &EvalOutput {
            command: "eval",
            seed: a.common.seed,
            checkpoint: a.checkpoint.to_path_buf(),
            dataset: a.dataset.map(Path::to_path_buf),
            rollout: &cfg,
            policy: &side.config,
            report: &report,
        },
    )?;
    plot::write_trajectories_csv(&a.out.join("trajectories.csv"), &report)?;
    let svg = plot::rollout_svg(&report);
    let header = format!("<!-- {} -->\n", serde_json::to_string(&cfg)?.replace("--", "- -"));
    std::fs::write(a.out.join("rollout.svg"), header + &svg)?;
    println!(
        "success {:.3}  entropy {:.3} bits  jitter {:.3e}  unimodal {:.3}",
        report.success_rate, report.behavioral_entropy_bits, report.mean_jitter, report.unimodal_fraction
    );
    if report.degraded_queries > 0 {
        return Err(CliError::numerical(format!(
            "mode finding degraded on {} policy queries (report written)",
            report.degraded_queries
        )));
    }
    Ok(())
}

/// A bare mixture, or a mixture with mode-finder settings.
#[derive(Deserialize)]
#[serde(untagged)]
enum ModesInput {
    WithFinder { gmm: GmmParams, #[serde(default)] finder: ModeFinderConfig },
    Bare(GmmParams),
}

impl ModesInput {
    fn split(self) -> (GmmParams, ModeFinderConfig) {
        match self {
            ModesInput::WithFinder { gmm, finder } => (gmm, finder),
            ModesInput::Bare(g) => (g, ModeFinderConfig::default()),
        }
    }
}

pub fn modes(config: &Path, out: Option<&Path>, common: &Common) -> CliResult {
    setup_threads(common)?;
    let input: ModesInput = read_json(config, "mixture")?;
    if let Some(o) = out {
        require_parent(o)?;
    }
    let (gmm, finder) = input.split();
    finder.validate()?;
    let set = find_modes(&gmm, &finder, &mut rng::substream(common.seed, "modes"))?;
    let value = json!({
        "command": "modes",
        "seed": common.seed,
        "gmm": gmm,
        "finder": finder,
        "result": set.to_json(),
    });
    match out {
        Some(p) => write_json(p, &value)?,
        None => println!("{}", serde_json::to_string_pretty(&value)?),
    }
    if set.degraded {
        return Err(CliError::numerical("mode finding degraded to the heaviest component mean"));
    }
    Ok(())
}

pub fn sample_viz(config: &Path, n: usize, alpha: f64, mode_noise: &str, out: &Path, common: &Common) -> CliResult {
    setup_threads(common)?;
    let input: ModesInput = read_json(config, "mixture")?;
    let noise = parse_mode_noise(mode_noise)?;
    SamplerSpec::Scaled { alpha }.validate()?;
    if n == 0 {
        return Err(CliError::invalid("--n must be at least 1"));
    }
    ensure_dir(out)?;
    let (gmm, finder) = input.split();
    finder.validate()?;
    let mut rng = rng::substream(common.seed, "sampling");
    let vanilla = sample_vanilla(&gmm, &mut rng, n);
    let scaled = sample_vanilla(&scale_variances(&gmm, alpha)?, &mut rng, n);
    let set = find_modes(&gmm, &finder, &mut rng)?;
    let mode = (0..n)
        .map(|_| sample_mode(&set, &mut rng, noise).map(|s| s.action))
        .collect::<qfat::Result<Vec<_>>>()?;
    let groups: [(&str, &[Vec<f64>]); 3] = [("vanilla", &vanilla), ("scaled", &scaled), ("mode", &mode)];
    let mut csv = std::io::BufWriter::new(std::fs::File::create(out.join("samples.csv"))?);
    let dims: Vec<String> = (0..gmm.dim()).map(|j| format!("x{j}")).collect();
    writeln!(csv, "sampler,index,{}", dims.join(","))?;
    for (name, pts) in &groups {
        for (i, p) in pts.iter().enumerate() {
            let vals: Vec<String> = p.iter().map(f64::to_string).collect();
            writeln!(csv, "{name},{i},{}", vals.join(","))?;
        }
    }
    csv.flush()?;
    let all = vanilla.iter().flat_map(|p| p.iter().take(2)).copied();
    let (lo, hi) = all.fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(v), h.max(v)));
    let pad = 0.05 * (hi - lo).max(1e-9);
    let header = format!("<!-- seed {} alpha {} mode-noise {} -->\n", common.seed, alpha, mode_noise);
    std::fs::write(out.join("samples.svg"), header + &plot::scatter_svg(&groups, lo - pad, hi + pad))?;
    write_json(
        &out.join("samples.json"),
        &json!({
            "command": "sample-viz",
            "seed": common.seed,
            "n": n,
            "alpha": alpha,
            "mode_noise": noise,
            "gmm": gmm,
            "finder": finder,
            "modes": set.to_json(),
        }),
    )?;
    if set.degraded {
        return Err(CliError::numerical("mode finding degraded to the heaviest component mean"));
    }
    Ok(())
}

pub fn bench(config: Option<&Path>, reps: usize, out: Option<&Path>, common: &Common) -> CliResult {
    setup_threads(common)?;
    let cfg = match config {
        Some(p) => read_json::<PolicyConfig>(p, "policy config")?,
        None => qbench::kitchen_config(),
    };
    if let Some(o) = out {
        require_parent(o)?;
    }
    let report = qbench::run(&cfg, reps, common.seed)?;
    println!("{:<18} {:>10} {:>10}", "component", "mean_ms", "p95_ms");
    for t in &report.timings {
        println!("{:<18} {:>10.4} {:>10.4}", t.component, t.mean_ms, t.p95_ms);
    }
    println!("head decode + vanilla sampling = {:.2}% of backbone forward", 100.0 * report.head_plus_vanilla_over_backbone);
    if let Some(o) = out {
        write_json(o, &json!({"command": "bench", "seed": common.seed, "reps": reps, "report": report}))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_noise_parsing() {
        assert_eq!(parse_mode_noise("none").ok().map(|n| n == ModeNoise::None), Some(true));
        assert!(matches!(parse_mode_noise("fixed:0.2"), Ok(ModeNoise::Fixed(v)) if v == 0.2));
        assert!(matches!(parse_mode_noise("laplace"), Ok(ModeNoise::Laplace(v)) if v == 1.0));
        assert!(parse_mode_noise("none:1").is_err());
        assert!(parse_mode_noise("gauss").is_err());
    }
}
