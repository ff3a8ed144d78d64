use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use latentsr_core::autoencoder::Autoencoder;
use latentsr_core::config::RunConfig;
use latentsr_core::cost::{
    autoencoder_params, denoiser_cost, unet_cost, CostReport, MoeCostMode, REFERENCE_ROWS,
};
use latentsr_core::data::{load_pairs, load_ppm, save_pairs, save_ppm, synth};
use latentsr_core::denoiser::DenoiserModel;
use latentsr_core::manifest::write_manifest;
use latentsr_core::metrics::MetricReport;
use latentsr_core::pipeline;
use latentsr_core::train;

use crate::Common;

/// Load the config, then apply flag overrides on the TOML tree so that
/// any key can be overridden from the command line.
pub(crate) fn load_config(common: &Common) -> Result<RunConfig> {
    let base_text = match &common.config {
        Some(path) => std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => RunConfig::desk_default().to_toml(),
    };
    let mut tree: toml::Value = base_text.parse().context("parsing config")?;

    let mut set = |dotted: &str, value: toml::Value| -> Result<()> {
        let (section, key) = dotted
            .split_once('.')
            .with_context(|| format!("override {dotted:?} must be section.key"))?;
        let table = tree
            .as_table_mut()
            .context("config root must be a table")?
            .entry(section)
            .or_insert_with(|| toml::Value::Table(Default::default()));
        table
            .as_table_mut()
            .with_context(|| format!("section {section:?} is not a table"))?
            .insert(key.to_string(), value);
        Ok(())
    };

    for o in &common.overrides {
        let (key, raw) = o
            .split_once('=')
            .with_context(|| format!("--set {o:?} must be KEY=VALUE"))?;
        // Parse the value as TOML so numbers/bools/arrays work.
        let value: toml::Value = raw
            .parse()
            .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
        set(key.trim(), value)?;
    }
    if let Some(seed) = common.seed {
        set("run.seed", toml::Value::Integer(seed as i64))?;
    }
    if let Some(dir) = &common.out_dir {
        set("run.out_dir", toml::Value::String(dir.clone()))?;
    }
    if let Some(dir) = &common.dataset_dir {
        set("data.dataset_dir", toml::Value::String(dir.clone()))?;
    }
    if common.disable_sampling_moe {
        set("denoiser.disable_sampling_moe", toml::Value::Boolean(true))?;
    }
    if common.disable_space_moe {
        set("denoiser.disable_space_moe", toml::Value::Boolean(true))?;
    }
    if let Some(mode) = &common.decoder_mode {
        set("autoencoder.decoder_mode", toml::Value::String(mode.clone()))?;
    }
    let text = toml::to_string(&tree).context("serializing config")?;
    Ok(RunConfig::parse(&text)?)
}

fn stage1_ckpt(cfg: &RunConfig) -> PathBuf {
    cfg.out_path("stage1.ckpt")
}

fn stage2_ckpt(cfg: &RunConfig) -> Result<PathBuf> {
    Ok(cfg.out_path(&format!("autoencoder_{}.ckpt", cfg.decoder_mode()?.name())))
}

fn pairs_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_path("pairs.tarc")
}

pub(crate) fn gen_data(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let total = cfg.data.n_train + cfg.data.n_holdout;
    let (train_dir, holdout_dir) = pipeline::dataset_dirs(&cfg);
    std::fs::create_dir_all(&train_dir)?;
    std::fs::create_dir_all(&holdout_dir)?;

    // Per-sample seed streams make samples independent of worker
    // layout; each worker synthesizes and writes its own index range
    // (tensors are single-threaded, so nothing crosses threads).
    let write_range = |lo: usize, hi: usize| -> latentsr_core::Result<()> {
        for i in lo..hi {
            let pair = synth::make_pair(cfg.data.hr_size, cfg.data.scale, cfg.run.seed, i)?;
            let (dir, local) = if i < cfg.data.n_train {
                (&train_dir, i)
            } else {
                (&holdout_dir, i - cfg.data.n_train)
            };
            save_ppm(&dir.join(format!("hr_{local:05}.ppm")), &pair.hr)?;
            save_ppm(&dir.join(format!("lr_{local:05}.ppm")), &pair.lr)?;
        }
        Ok(())
    };
    let threads = cfg.run.threads.min(total.max(1));
    if threads <= 1 {
        write_range(0, total)?;
    } else {
        let chunk = total.div_ceil(threads);
        std::thread::scope(|scope| -> latentsr_core::Result<()> {
            let mut handles = Vec::new();
            for ti in 0..threads {
                let lo = ti * chunk;
                let hi = ((ti + 1) * chunk).min(total);
                if lo >= hi {
                    continue;
                }
                let write_range = &write_range;
                handles.push(scope.spawn(move || write_range(lo, hi)));
            }
            for h in handles {
                h.join().expect("worker panicked")?;
            }
            Ok(())
        })?;
    }
    write_manifest(&cfg, "gen-data", &[])?;
    println!(
        "wrote {} train + {} holdout pairs ({}x{} -> x{}) to {}",
        cfg.data.n_train,
        cfg.data.n_holdout,
        cfg.lr_size(),
        cfg.lr_size(),
        cfg.data.scale,
        cfg.data.dataset_dir
    );
    Ok(())
}

fn load_train_split(cfg: &RunConfig) -> Result<Vec<latentsr_core::data::ImagePair>> {
    let (train_dir, _) = pipeline::dataset_dirs(cfg);
    if !train_dir.exists() {
        bail!(
            "dataset path {} does not exist; run `latentsr gen-data` first",
            train_dir.display()
        );
    }
    Ok(pipeline::load_split(&train_dir, cfg.data.scale)?)
}

pub(crate) fn train_stage1(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dataset = load_train_split(&cfg)?;
    let autoencoder = Autoencoder::<f32>::new(&cfg.vq_config(), cfg.decoder_mode()?, cfg.run.seed)?;
    let schedule = cfg.noise_schedule()?;
    let mut model =
        DenoiserModel::<f32>::new(&cfg.unet_config(), cfg.stage_partition()?, cfg.run.seed)?;
    eprintln!(
        "stage 1: {} steps, batch {}, {} train images, {} stage experts x {} space experts",
        cfg.train_stage1.steps,
        cfg.train_stage1.batch_size,
        dataset.len(),
        cfg.num_stages(),
        cfg.unet_config().num_space_experts,
    );
    let (log, opt) = train::train_stage1(&dataset, &mut model, &autoencoder, &schedule, &cfg)?;
    std::fs::create_dir_all(&cfg.run.out_dir)?;
    log.write_jsonl(&cfg.out_path("loss_stage1.jsonl"))?;
    train::save_checkpoint(
        &stage1_ckpt(&cfg),
        "denoiser",
        &model,
        &[
            ("config_hash", cfg.hash()),
            ("seed", cfg.run.seed.to_string()),
        ],
        Some(&opt),
    )?;
    write_manifest(&cfg, "train-stage1", &[])?;
    let w = cfg.train_stage1.smooth_window;
    println!(
        "stage 1 done: smoothed loss {:.4} -> {:.4}; checkpoint {}",
        log.initial_smoothed(w),
        log.final_smoothed(w),
        stage1_ckpt(&cfg).display()
    );
    Ok(())
}

fn load_merged_denoiser(cfg: &RunConfig) -> Result<DenoiserModel<f32>> {
    let path = stage1_ckpt(cfg);
    if !path.exists() {
        bail!(
            "stage-1 checkpoint {} not found; run `latentsr train-stage1` first",
            path.display()
        );
    }
    let mut model =
        DenoiserModel::<f32>::new(&cfg.unet_config(), cfg.stage_partition()?, cfg.run.seed)?;
    train::load_checkpoint(&path, "denoiser", &mut model)?;
    Ok(model.merged()?)
}

fn generate_pairs(cfg: &RunConfig, steps: usize) -> Result<Vec<latentsr_core::data::LrLatentPair>> {
    let dataset = load_train_split(cfg)?;
    let model = load_merged_denoiser(cfg)?;
    let schedule = cfg.noise_schedule()?;
    let n = cfg.infer.n_pairs.min(dataset.len());
    let lrs: Vec<_> = dataset[..n].iter().map(|p| p.lr.clone()).collect();
    eprintln!("generating {n} pairs at {steps} steps each");
    let pairs = pipeline::gen_lr_latent_pairs(
        &model,
        &schedule,
        &lrs,
        cfg.latent_size(),
        cfg.vq_config().z_channels,
        steps,
        cfg.run.seed ^ 0x9a17,
    )?;
    Ok(pairs)
}

pub(crate) fn gen_pairs(common: &Common, steps: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    let steps = steps.unwrap_or(cfg.infer.pair_gen_steps);
    let pairs = generate_pairs(&cfg, steps)?;
    std::fs::create_dir_all(&cfg.run.out_dir)?;
    save_pairs(&pairs_path(&cfg), &pairs)?;
    write_manifest(&cfg, "gen-pairs", &[&stage1_ckpt(&cfg)])?;
    let stds = pipeline::latent_channel_stds(&pairs);
    println!(
        "wrote {} pairs to {} (latent channel stds {:?})",
        pairs.len(),
        pairs_path(&cfg).display(),
        stds.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>()
    );
    Ok(())
}

pub(crate) fn train_stage2(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let path = pairs_path(&cfg);
    let pairs = if path.exists() {
        load_pairs(&path)?
    } else {
        eprintln!("pair archive {} missing; generating", path.display());
        let pairs = generate_pairs(&cfg, cfg.infer.pair_gen_steps)?;
        std::fs::create_dir_all(&cfg.run.out_dir)?;
        save_pairs(&path, &pairs)?;
        pairs
    };
    let dataset = load_train_split(&cfg)?;
    let items = train::stage2_items(&pairs, &dataset)?;
    let mode = cfg.decoder_mode()?;
    let mut model = Autoencoder::<f32>::new(&cfg.vq_config(), mode, cfg.run.seed)?;
    eprintln!(
        "stage 2 ({}): {} steps, batch {}, {} items",
        mode.name(),
        cfg.train_stage2.steps,
        cfg.train_stage2.batch_size,
        items.len()
    );
    let (log, opt) = train::train_stage2(&items, &mut model, &cfg)?;
    log.write_jsonl(&cfg.out_path("loss_stage2.jsonl"))?;
    train::save_checkpoint(
        &stage2_ckpt(&cfg)?,
        "autoencoder",
        &model,
        &[
            ("config_hash", cfg.hash()),
            ("seed", cfg.run.seed.to_string()),
            ("decoder_mode", mode.name().to_string()),
        ],
        Some(&opt),
    )?;
    write_manifest(&cfg, "train-stage2", &[&path])?;
    let w = cfg.train_stage2.smooth_window;
    println!(
        "stage 2 done: smoothed L1 {:.4} -> {:.4}; checkpoint {}",
        log.initial_smoothed(w),
        log.final_smoothed(w),
        stage2_ckpt(&cfg)?.display()
    );
    Ok(())
}

fn load_autoencoder(cfg: &RunConfig) -> Result<Autoencoder<f32>> {
    let mode = cfg.decoder_mode()?;
    let mut model = Autoencoder::<f32>::new(&cfg.vq_config(), mode, cfg.run.seed)?;
    let path = stage2_ckpt(cfg)?;
    if !path.exists() {
        bail!(
            "decoder checkpoint {} not found; run `latentsr train-stage2` first",
            path.display()
        );
    }
    train::load_checkpoint(&path, "autoencoder", &mut model)?;
    Ok(model)
}

pub(crate) fn infer(
    common: &Common,
    input: &Path,
    output: &Path,
    steps: Option<usize>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let steps = steps.unwrap_or(cfg.infer.steps);
    let lr = load_ppm(input)?;
    let (h, w) = (lr.shape()[1], lr.shape()[2]);
    if h != w {
        bail!("only square inputs are supported, got {h}x{w}");
    }
    let out_size = h * cfg.data.scale;
    let model = load_merged_denoiser(&cfg)?;
    let autoencoder = load_autoencoder(&cfg)?;
    let schedule = cfg.noise_schedule()?;
    let sr = pipeline::infer_one(
        &model,
        &autoencoder,
        &schedule,
        &lr,
        out_size,
        steps,
        cfg.run.seed,
    )?;
    if let Some(parent) = output.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_ppm(output, &sr)?;
    write_manifest(&cfg, "infer", &[input, &stage1_ckpt(&cfg), &stage2_ckpt(&cfg)?])?;
    println!(
        "{} -> {} ({}x{} -> {}x{}, {} steps)",
        input.display(),
        output.display(),
        h,
        w,
        out_size,
        out_size,
        steps
    );
    Ok(())
}

pub(crate) fn eval(common: &Common, pred_dir: &Path, ref_dir: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let rows = pipeline::eval_dirs(pred_dir, ref_dir)?;
    let agg = pipeline::eval_aggregate(&rows);
    println!("{:<24} {:>10} {:>8} {:>8}", "image", "psnr_y", "ssim", "lsd");
    for (name, r) in &rows {
        println!(
            "{:<24} {:>10.3} {:>8.4} {:>8.4}",
            name, r.psnr_y, r.ssim, r.log_spectral_distance
        );
    }
    println!(
        "{:<24} {:>10.3} {:>8.4} {:>8.4}",
        "mean", agg.psnr_y, agg.ssim, agg.log_spectral_distance
    );
    // Machine-readable line-delimited records alongside the table.
    std::fs::create_dir_all(&cfg.run.out_dir)?;
    let mut out = String::new();
    for (name, r) in &rows {
        out.push_str(&serde_json::to_string(&EvalRow { image: name, report: *r })?);
        out.push('\n');
    }
    out.push_str(&serde_json::to_string(&EvalRow {
        image: "mean",
        report: agg,
    })?);
    out.push('\n');
    std::fs::write(cfg.out_path("eval.jsonl"), out)?;
    write_manifest(&cfg, "eval", &[])?;
    Ok(())
}

#[derive(serde::Serialize)]
struct EvalRow<'a> {
    image: &'a str,
    report: MetricReport,
}

pub(crate) fn flops(common: &Common, steps: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    let steps = steps.unwrap_or(cfg.infer.steps) as u64;
    let unet = cfg.unet_config();
    let stage_experts = cfg.num_stages();
    let merged = denoiser_cost(&unet, stage_experts, MoeCostMode::Merged);
    let routed = denoiser_cost(&unet, stage_experts, MoeCostMode::Routed);
    let mut single_cfg = unet.clone();
    single_cfg.num_space_experts = 1;
    let single = unet_cost(&single_cfg, MoeCostMode::Routed);
    let ae_params = autoencoder_params(&cfg.vq_config(), cfg.decoder_mode()?);

    let m = |v: u64| v as f64 / 1e6;
    println!("configured model ({} stage experts):", stage_experts);
    println!(
        "  {:<34} {:>12} {:>16} {:>16}",
        "build", "params (M)", "MACs/step (M)", "total MACs (M)"
    );
    let row = |name: &str, r: CostReport| {
        println!(
            "  {:<34} {:>12.3} {:>16.3} {:>16.3}",
            name,
            m(r.param_count),
            m(r.flops_per_step),
            m(r.total_flops(steps))
        );
    };
    row("denoiser (training, routed FFNs)", routed);
    row("denoiser (inference, merged FFNs)", merged);
    row(
        "single-FFN baseline (one expert)",
        CostReport {
            param_count: single.param_count,
            flops_per_step: single.flops_per_step,
        },
    );
    println!("  {:<34} {:>12.3}", "autoencoder (params only)", m(ae_params));
    println!(
        "  merged-vs-baseline MACs/step equal: {}",
        merged.flops_per_step == single.flops_per_step
    );
    println!();
    println!("published large-scale comparison (params M / per-step T / total T @200):");
    for (name, p, f, t) in REFERENCE_ROWS {
        println!("  {name:<34} {p:>10.2} {f:>8.4} {t:>8.2}");
    }

    std::fs::create_dir_all(&cfg.run.out_dir)?;
    let mut out = String::new();
    for (name, r) in [
        ("denoiser_routed", routed),
        ("denoiser_merged", merged),
        ("single_ffn_baseline", single),
    ] {
        out.push_str(&serde_json::to_string(&serde_json::json!({
            "build": name,
            "param_count": r.param_count,
            "flops_per_step": r.flops_per_step,
            "total_flops": r.total_flops(steps),
            "steps": steps,
        }))?);
        out.push('\n');
    }
    out.push_str(&serde_json::to_string(&serde_json::json!({
        "build": "autoencoder",
        "param_count": ae_params,
    }))?);
    out.push('\n');
    std::fs::write(cfg.out_path("flops.jsonl"), out)?;
    write_manifest(&cfg, "flops", &[])?;
    Ok(())
}
