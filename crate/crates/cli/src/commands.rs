use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use featsharp::data::{synthetic_dataset, SyntheticSpec};
use featsharp::featurizer::{phi_s_apply, Featurizer, ToyFeaturizer};
use featsharp::gradient_suite::{run_suite, STEP, TOLERANCE};
use featsharp::metrics::{cost_model, cost_proof_check, throughput_bench, tiling_error, write_throughput_csv, MetricsReport};
use featsharp::numerics::bilinear_resample;
use featsharp::trainer::{evaluate, train, Checkpoint};
use featsharp::upsampler::{Upsampler, UpsamplerConfig, UpsamplerKind};
use featsharp::{Grid, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, RunConfig};
use crate::dataset::{grid_to_rgb, ingest_dataset, load_image, resize_center_crop};
use crate::pca::{enlarge, pca_rgb, side_by_side};

/// Shared state of every command.
pub struct RunContext {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl RunContext {
    pub fn new(config: RunConfig, out: PathBuf) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self { config, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn build(model: &ModelConfig) -> Result<(ToyFeaturizer, Upsampler)> {
    let f = ToyFeaturizer::new(model.featurizer.clone())?;
    let up = Upsampler::new(model.upsampler.clone(), &f, model.train.factor)?;
    Ok((f, up))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_train(ctx: &RunContext) -> Result<()> {
    let model = ctx.config.model();
    let (f, up) = build(&model)?;
    let data = ingest_dataset(&ctx.config.data.train, up.image_side())?;
    log::info!(
        "training {} on {} images for {} steps",
        up.kind(),
        data.images.len(),
        model.train.steps
    );
    let config_json = model.to_json();
    let every = ctx.config.checkpoint_every;
    let total = model.train.steps;
    let outcome = train(&model.train, &up, &f, &data.images, &config_json, |step, loss, t| {
        if step % 100 == 0 || step == total {
            log::info!("step {step}/{total} loss {loss:.6}");
        }
        if every.is_some_and(|e| e > 0 && step % e == 0 && step < total) {
            t.checkpoint(&config_json)
                .save(&ctx.path(&format!("checkpoint_step{step}.fskp")))?;
        }
        Ok(())
    })?;
    outcome.checkpoint.save(&ctx.path("checkpoint.fskp"))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        csv.push_str(&format!("{},{l:?}\n", i + 1));
    }
    write_text(&ctx.path("losses.csv"), &csv)?;
    println!("wrote {}", ctx.path("checkpoint.fskp").display());
    Ok(())
}

/// Model configuration, parameters and statistics from the configured
/// checkpoint, or a fresh initialization with statistics fit on `images`.
fn load_or_init(ctx: &RunContext, images: Option<&[Grid]>) -> Result<(ModelConfig, ParamStore, Option<featsharp::DistributionStats>)> {
    match &ctx.config.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            let model = ModelConfig::from_json(&ck.config_json)?;
            Ok((model, ck.params, Some(ck.stats)))
        }
        None => {
            let model = ctx.config.model();
            let (f, up) = build(&model)?;
            let store = up.init_store(&mut ChaCha8Rng::seed_from_u64(model.train.seed));
            let stats = match images {
                Some(imgs) => {
                    let globals = imgs
                        .iter()
                        .map(|i| up.prepare(&f, i).map(|p| p.global))
                        .collect::<featsharp::Result<Vec<_>>>()?;
                    Some(featsharp::featurizer::phi_s_fit(&globals)?)
                }
                None => None,
            };
            Ok((model, store, stats))
        }
    }
}

pub fn cmd_eval(ctx: &RunContext) -> Result<MetricsReport> {
    let model0 = ctx.config.model();
    let (_, up0) = build(&model0)?;
    let data = ingest_dataset(&ctx.config.data.eval, up0.image_side())?;
    let (model, store, stats) = load_or_init(ctx, Some(&data.images))?;
    let (f, up) = build(&model)?;
    if up.image_side() != up0.image_side() {
        bail!("checkpoint was trained at a different image size than the configured one");
    }
    let stats = stats.expect("statistics are always available for eval");
    let mut report = evaluate(&model.train, &up, &store, &stats, &f, &data.images)?;
    report.config_digest = featsharp::trainer::config_digest(&model.to_json());
    report.tiling_error = tiling_rows(ctx, &f)?;
    report.cost = (1..=ctx.config.cost.rows.max(1))
        .map(|x| cost_model(x as i64, 1.0))
        .collect::<featsharp::Result<_>>()?;
    let csv = ctx.path("metrics.csv");
    report.write_csv(BufWriter::new(fs::File::create(&csv)?))?;
    write_text(&ctx.path("metrics.json"), &report.to_json()?)?;
    println!(
        "{}: fidelity {:.4} tv {:.5} crf {:.5} mmd2 {:.5}",
        report.upsampler, report.fidelity, report.tv, report.crf, report.mmd2
    );
    Ok(report)
}

fn input_image(ctx: &RunContext, side: usize) -> Result<Grid> {
    match &ctx.config.image {
        Some(p) => resize_center_crop(&load_image(p)?, side),
        None => Ok(synthetic_dataset(&SyntheticSpec {
            count: 1,
            side,
            seed: ctx.config.train.seed,
        })?
        .remove(0)),
    }
}

/// Upsampled features of one image for every path, rendered with one shared
/// PCA projection: `lowres.png`, `<kind>.png`, and `comparison.png` (image,
/// low-res, then the five paths).
pub fn cmd_upsample(ctx: &RunContext) -> Result<()> {
    let (model, trained, stats) = load_or_init(ctx, None)?;
    let f = ToyFeaturizer::new(model.featurizer.clone())?;
    let z = model.train.factor;
    let side = f.input_resolution() * z;
    let img = input_image(ctx, side)?;
    let mut maps = Vec::new();
    let mut names = Vec::new();
    let mut lowres = None;
    let mut stats = stats;
    for kind in UpsamplerKind::ALL {
        let mut cfg = UpsamplerConfig::new(kind);
        if kind == model.upsampler.kind {
            cfg = model.upsampler.clone();
        } else {
            cfg.debias = model.upsampler.debias;
        }
        let up = Upsampler::new(cfg, &f, z)?;
        let prep = up.prepare(&f, &img)?;
        let s = stats.get_or_insert_with(|| {
            featsharp::featurizer::phi_s_fit(std::slice::from_ref(&prep.global)).expect("fit on one map")
        });
        // Trained values where names match; fresh initialization elsewhere.
        let mut store = up.init_store(&mut ChaCha8Rng::seed_from_u64(model.train.seed));
        for (name, p) in store.iter_mut() {
            if let Ok(v) = trained.value(name) {
                if v.shape() == p.value.shape() {
                    p.value = v.clone();
                }
            }
        }
        if lowres.is_none() {
            lowres = Some(phi_s_apply(&prep.global, s)?);
        }
        maps.push(up.upsample_grid(&store, &prep, s)?);
        names.push(kind.as_str());
    }
    let lowres = lowres.expect("at least one path");
    let mut all: Vec<&Grid> = vec![&lowres];
    all.extend(maps.iter());
    let rendered = pca_rgb(&all)?;
    let view = 4 * maps[0].width() as u32;
    let mut panels = vec![enlarge(&grid_to_rgb(&bilinear_resample(&img, view as usize, view as usize)?), view)];
    for (i, r) in rendered.iter().enumerate() {
        let name = if i == 0 { "lowres" } else { names[i - 1] };
        let big = enlarge(r, view);
        big.save(ctx.path(&format!("{name}.png")))?;
        panels.push(big);
    }
    side_by_side(&panels).save(ctx.path("comparison.png"))?;
    println!("wrote {} images to {}", panels.len() + 1, ctx.out.display());
    Ok(())
}

fn tiling_rows(ctx: &RunContext, f: &ToyFeaturizer) -> Result<Vec<(usize, f64)>> {
    let max_u = ctx.config.tiling_levels.iter().copied().max().unwrap_or(1);
    let img = input_image(ctx, f.input_resolution() * max_u)?;
    Ok(tiling_error(f, &img, &ctx.config.tiling_levels)?)
}

pub fn cmd_tiling_error(ctx: &RunContext) -> Result<Vec<(usize, f64)>> {
    let f = ToyFeaturizer::new(ctx.config.featurizer.clone())?;
    let rows = tiling_rows(ctx, &f)?;
    let mut csv = String::from("tiles_per_side,mse\n");
    for (u, mse) in &rows {
        csv.push_str(&format!("{u},{mse:e}\n"));
        println!("u={u} mse={mse:e}");
    }
    write_text(&ctx.path("tiling_error.csv"), &csv)?;
    Ok(rows)
}

pub fn cmd_cost(ctx: &RunContext) -> Result<()> {
    let cfg = &ctx.config.cost;
    let mut csv = String::from("x,progressive,final_level,brute_force\n");
    for x in 1..=cfg.rows.max(1) {
        let p = cost_model(x as i64, 1.0)?;
        csv.push_str(&format!("{},{},{},{}\n", p.x, p.progressive, p.final_level, p.brute_force));
    }
    write_text(&ctx.path("cost.csv"), &csv)?;
    let ok = cost_proof_check(cfg.max_x);
    println!("cost proof check up to x={}: {}", cfg.max_x, if ok { "ok" } else { "FAILED" });
    if cfg.throughput {
        let f = ToyFeaturizer::new(ctx.config.featurizer.clone())?;
        let img0 = synthetic_dataset(&SyntheticSpec {
            count: 1,
            side: f.input_resolution(),
            seed: ctx.config.train.seed,
        })?
        .remove(0);
        let mut cases = Vec::new();
        for &z in &cfg.throughput_factors {
            cases.push(("base_hires".to_string(), z, 1));
            cases.push(("featsharp".to_string(), z, UpsamplerKind::FeatSharp.featurizer_calls(z)));
        }
        let rows = throughput_bench(&cases, |name, z| {
            let img = bilinear_resample(&img0, f.input_resolution() * z, f.input_resolution() * z)?;
            if name == "base_hires" {
                return f.at_resolution(img.height())?.featurize(&img);
            }
            let up = Upsampler::new(UpsamplerConfig::new(UpsamplerKind::FeatSharp), &f, z)?;
            let store = up.init_store(&mut ChaCha8Rng::seed_from_u64(0));
            let prep = up.prepare(&f, &img)?;
            let stats = featsharp::DistributionStats::identity(f.channels());
            up.upsample_grid(&store, &prep, &stats)
        })?;
        write_throughput_csv(&rows, BufWriter::new(fs::File::create(ctx.path("throughput.csv"))?))?;
    }
    if !ok {
        bail!("cost inequality check failed");
    }
    Ok(())
}

pub fn cmd_gradcheck(ctx: &RunContext) -> Result<()> {
    let cases = run_suite(STEP)?;
    let mut csv = String::from("config,parameter,entries,max_rel_error\n");
    let mut failures = 0;
    for case in &cases {
        for p in &case.report.params {
            csv.push_str(&format!("{},{},{},{:e}\n", case.label, p.name, p.entries, p.max_rel_error));
            if p.max_rel_error >= TOLERANCE {
                failures += 1;
                println!("FAIL {} {}: {:e}", case.label, p.name, p.max_rel_error);
            }
        }
        println!("{:<32} max relative error {:.2e}", case.label, case.report.max_rel_error());
    }
    write_text(&ctx.path("gradcheck.csv"), &csv)?;
    if failures > 0 {
        bail!("{failures} parameters failed the gradient check");
    }
    Ok(())
}
