use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Result;
use log::info;
use rvqcomm::codec::{usage_histogram, CodecConfig, CodecModel};
use rvqcomm::datagen::{
    generate_scene, load_tensor, save_tensor, write_scenes, CorpusManifest, SceneSpec,
    SyntheticCorpus,
};
use rvqcomm::sim::{
    median, run_round, run_sweep, sweep_csv, BundleDirProvider, FidelityMetrics, ModelProvider,
    SimWorld, SweepPoint, SweepTable,
};
use rvqcomm::tensor::FeatureMap;
use rvqcomm::trainer::{
    load_checkpoint, save_checkpoint, Checkpoint, Corpus, LossReport, Trainer, TrainingConfig,
};
use rvqcomm::wire::{load_bundle, pack, save_bundle, unpack, Payload};
use rvqcomm::Error;

use crate::{
    Cli, CodecArgs, Command, CorpusArgs, DecodeArgs, EncodeArgs, GenArgs, RoundtripArgs, SceneArgs,
    SimulateArgs, StatsArgs, SweepArgs, TrainArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()).into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()?;
    create_dir(&cli.output_dir)?;
    info!(
        "seed {} threads {} output dir {}",
        cli.seed,
        cli.threads,
        cli.output_dir.display()
    );
    match &cli.command {
        Command::Gen(a) => gen(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Encode(a) => encode(cli, a),
        Command::Decode(a) => decode(cli, a),
        Command::Roundtrip(a) => roundtrip(cli, a),
        Command::Stats(a) => stats(cli, a),
        Command::Sweep(a) => sweep(cli, a),
        Command::Simulate(a) => simulate(cli, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    info!("wrote {}", path.display());
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?)
}

fn scene_spec(a: &SceneArgs, seed: u64) -> Result<SceneSpec> {
    let spec = SceneSpec {
        height: a.height,
        width: a.width,
        channels: a.channels,
        background_fraction: a.background_fraction,
        n_blobs: a.blobs,
        seed,
        ..SceneSpec::default()
    };
    spec.validate()?;
    Ok(spec)
}

fn corpus(a: &CorpusArgs) -> Result<Box<dyn Corpus>> {
    match (&a.corpus, a.synthetic) {
        (Some(path), _) => {
            let c = CorpusManifest::load(path)?.corpus(a.split.as_deref());
            info!("corpus {} ({} maps)", path.display(), c.len());
            Ok(Box::new(c))
        }
        (None, Some(n)) => {
            let spec = scene_spec(&a.scene, a.first_scene)?;
            info!(
                "synthetic corpus: {n} scenes from seed {}, {spec:?}",
                a.first_scene
            );
            Ok(Box::new(SyntheticCorpus::range(spec, a.first_scene, n)?))
        }
        (None, None) => {
            Err(Error::Config("either --corpus or --synthetic is required".into()).into())
        }
    }
}

fn codec_config(a: &CodecArgs, channels: usize) -> Result<CodecConfig> {
    let cfg = CodecConfig {
        channels,
        reduction_ratio: a.crr,
        stages: a.nq,
        codebook_size: a.k,
        ema_alpha: a.alpha.unwrap_or(CodecConfig::default().ema_alpha),
        groups: a.groups,
        ..CodecConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn describe(model: &CodecModel) -> String {
    let c = model.config();
    format!(
        "C={} C_r={} n_q={} K={} groups={} codebook hash {:#018x}",
        c.channels,
        c.reduced_channels(),
        c.stages,
        c.codebook_size,
        c.groups,
        model.codebooks().content_hash()
    )
}

fn gen(cli: &Cli, a: &GenArgs) -> Result<()> {
    let first = a.first_scene.unwrap_or(cli.seed);
    let spec = scene_spec(&a.scene, first)?;
    info!("resolved scene spec: {spec:?}");
    let mut manifest = CorpusManifest::default();
    let seeds: Vec<u64> = (first..first + a.count as u64).collect();
    write_scenes(&cli.output_dir, &spec, &seeds, &a.split, &mut manifest)?;
    if a.test_count > 0 {
        let next = first + a.count as u64;
        let test: Vec<u64> = (next..next + a.test_count as u64).collect();
        write_scenes(&cli.output_dir, &spec, &test, "test", &mut manifest)?;
    }
    let path = cli.output_dir.join("manifest.toml");
    manifest.save(&path)?;
    println!(
        "generated {} scenes ({}x{}x{}) into {}",
        manifest.entries.len(),
        spec.height,
        spec.width,
        spec.channels,
        cli.output_dir.display()
    );
    Ok(())
}

fn losses_csv(history: &[LossReport]) -> String {
    let stages = history.first().map_or(0, |r| r.per_stage_residual.len());
    let mut out = String::from("epoch,recon_mse,commit_loss,ortho_loss,total");
    for s in 0..stages {
        out += &format!(",residual_stage{s}");
    }
    out.push('\n');
    for r in history {
        out += &format!(
            "{},{},{},{},{}",
            r.epoch, r.recon_mse, r.commit_loss, r.ortho_loss, r.total
        );
        for e in &r.per_stage_residual {
            out += &format!(",{e}");
        }
        out.push('\n');
    }
    out
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let data = corpus(&a.data)?;
    if data.is_empty() {
        return Err(Error::Config("training corpus is empty".into()).into());
    }
    let mut cfg = match &a.config {
        Some(path) => TrainingConfig::load_manifest(path)?,
        None => TrainingConfig::default(),
    };
    cfg.seed = cli.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(alpha) = a.codec.alpha {
        cfg.ema_alpha = alpha;
    }
    cfg.validate()?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            info!(
                "resuming {} after epoch {} (step {})",
                path.display(),
                ck.epochs_done,
                ck.step
            );
            Trainer::resume(
                ck.model,
                data.as_ref(),
                &cfg,
                ck.optimizer,
                ck.epochs_done,
                ck.step,
            )?
        }
        None => {
            let channels = data.get(0)?.channels();
            let model = CodecModel::new(codec_config(&a.codec, channels)?, cfg.seed)?;
            Trainer::new(&model, data.as_ref(), &cfg)?
        }
    };
    info!("resolved codec config: {:?}", trainer.model().config());
    info!("resolved training config:\n{}", cfg.to_manifest_string());

    while trainer.epochs_done() < cfg.epochs {
        let r = trainer.run_epoch()?;
        info!(
            "epoch {} recon {:.6} commit {:.6} ortho {:.6} residual {:?}",
            r.epoch, r.recon_mse, r.commit_loss, r.ortho_loss, r.per_stage_residual
        );
        if let Some(path) = &a.checkpoint {
            let ck = Checkpoint {
                model: trainer.model().clone(),
                epochs_done: trainer.epochs_done(),
                step: trainer.step(),
                optimizer: trainer.optimizer().clone(),
            };
            save_checkpoint(&ck, cli.output_dir.join(path))?;
        }
    }
    let (model, history) = trainer.finish()?;
    let bundle = cli.output_dir.join(&a.out);
    save_bundle(&model, &bundle)?;
    write_file(&cli.output_dir.join("losses.csv"), losses_csv(&history))?;
    println!("trained {}", describe(&model));
    println!("bundle written to {}", bundle.display());
    Ok(())
}

fn encode(cli: &Cli, a: &EncodeArgs) -> Result<()> {
    let model = load_bundle(&a.bundle)?;
    let map = load_tensor(&a.input)?;
    info!("codec {}", describe(&model));
    let idx = model.encode(&map)?;
    let payload = pack(&idx, model.codebooks().content_hash(), a.frame, a.agent)?;
    let bytes = payload.to_bytes();
    write_file(&cli.output_dir.join(&a.out), &bytes)?;
    println!(
        "{} pixels, {} bitstream bits, {} bytes on the wire",
        idx.num_pixels(),
        payload.header.bitstream_bits(),
        bytes.len()
    );
    Ok(())
}

fn decode(cli: &Cli, a: &DecodeArgs) -> Result<()> {
    let model = load_bundle(&a.bundle)?;
    let payload = Payload::from_bytes(&read_file(&a.payload)?)?;
    info!("codec {}", describe(&model));
    let idx = unpack(&payload, model.codebooks())?;
    let map = model.decompress(&idx)?;
    save_tensor(&map, cli.output_dir.join(&a.out))?;
    println!(
        "decoded frame {} from agent {} into {}x{}x{}",
        payload.header.frame_id,
        payload.header.agent_id,
        map.height(),
        map.width(),
        map.channels()
    );
    if let Some(r) = &a.reference {
        let m = FidelityMetrics::measure(&load_tensor(r)?, &map)?;
        println!(
            "mse {:.6} cosine {:.4} psnr {:.2} dB",
            m.mse, m.cosine, m.psnr
        );
    }
    Ok(())
}

fn roundtrip(cli: &Cli, a: &RoundtripArgs) -> Result<()> {
    let map = match &a.input {
        Some(p) => load_tensor(p)?,
        None => generate_scene(&scene_spec(&a.scene, cli.seed)?)?,
    };
    let model = match &a.bundle {
        Some(p) => load_bundle(p)?,
        None => {
            let mut m = CodecModel::new(codec_config(&a.codec, map.channels())?, cli.seed)?;
            m.freeze();
            m
        }
    };
    info!("codec {}", describe(&model));
    let sent = model.encode(&map)?;
    let bytes = pack(&sent, model.codebooks().content_hash(), 0, 0)?.to_bytes();
    let received = unpack(&Payload::from_bytes(&bytes)?, model.codebooks())?;
    let identical = sent == received;
    let m = FidelityMetrics::measure(&map, &model.decompress(&received)?)?;
    println!("payload bytes: {}", bytes.len());
    println!("indices identical: {identical}");
    println!(
        "mse {:.6} cosine {:.4} psnr {:.2} dB",
        m.mse, m.cosine, m.psnr
    );
    if !identical {
        return Err(Error::CorruptPayload("indices changed across the wire".into()).into());
    }
    Ok(())
}

fn stats(cli: &Cli, a: &StatsArgs) -> Result<()> {
    let model = load_bundle(&a.bundle)?;
    let data = corpus(&a.data)?;
    info!("codec {}, stage {}", describe(&model), a.stage);
    let k = model.config().codebook_size;
    let mut share = vec![0.0; k];
    let mut pixels = 0usize;
    for i in 0..data.len() {
        let map = data.get(i)?;
        let idx = model.encode(&map)?;
        let hist = usage_histogram(model.codebooks(), &idx, a.stage)?;
        for (s, h) in share.iter_mut().zip(hist) {
            *s += h * idx.num_pixels() as f64;
        }
        pixels += idx.num_pixels();
    }
    if pixels == 0 {
        return Err(Error::Config("stats needs at least one map".into()).into());
    }
    share.iter_mut().for_each(|s| *s /= pixels as f64);
    let mut csv = String::from("code,share\n");
    for (code, s) in share.iter().enumerate() {
        csv += &format!("{code},{s}\n");
    }
    write_file(
        &cli.output_dir.join(format!("usage_stage{}.csv", a.stage)),
        csv,
    )?;
    let (top, top_share) =
        share.iter().enumerate().fold(
            (0, -1.0),
            |best, (c, &s)| if s > best.1 { (c, s) } else { best },
        );
    println!(
        "stage {} usage over {} maps ({} pixels)",
        a.stage,
        data.len(),
        pixels
    );
    for (code, s) in share.iter().enumerate().filter(|(_, s)| **s > 0.0) {
        println!(
            "{code:>6} {s:>8.4} {}",
            "#".repeat((s * 50.0).round() as usize)
        );
    }
    println!("top code {top} share: {top_share:.4}");
    Ok(())
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let points = SweepPoint::grid(&a.k, &a.nq, &a.crr, &a.alpha);
    let maps: Vec<FeatureMap> = if a.data.corpus.is_some() || a.data.synthetic.is_some() {
        let data = corpus(&a.data)?;
        (0..data.len())
            .map(|i| Ok(data.get(i)?.into_owned()))
            .collect::<Result<_>>()?
    } else {
        vec![generate_scene(&scene_spec(
            &a.data.scene,
            a.data.first_scene,
        )?)?]
    };
    let base = CodecConfig {
        groups: a.groups,
        ..CodecConfig::default()
    };
    struct NoModels;
    impl ModelProvider for NoModels {
        fn model(&self, _: &SweepPoint) -> rvqcomm::Result<Option<Arc<CodecModel>>> {
            Ok(None)
        }
    }
    let rows = match &a.bundles {
        Some(dir) => run_sweep(&points, &maps, &base, &BundleDirProvider::new(dir.clone()))?,
        None => run_sweep(&points, &maps, &base, &NoModels)?,
    };
    info!(
        "sweep over {} points, {} evaluation maps",
        points.len(),
        maps.len()
    );
    write_file(&cli.output_dir.join("sweep.csv"), sweep_csv(&rows))?;
    print!("{}", SweepTable(&rows));
    Ok(())
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let world = SimWorld::load(&a.world)?;
    info!("resolved world: {world:?}");
    let mut links = String::new();
    let mut agents = String::new();
    let mut mses = Vec::new();
    for frame in a.first_frame..a.first_frame + a.frames {
        let r = run_round(&world, frame)?;
        print!("{r}");
        let (l, g) = (r.links_csv(), r.agents_csv());
        let skip = if links.is_empty() { 0 } else { 1 };
        links.extend(l.lines().skip(skip).map(|s| format!("{s}\n")));
        agents.extend(g.lines().skip(skip).map(|s| format!("{s}\n")));
        mses.extend(r.links.iter().filter_map(|l| l.fidelity.map(|m| m.mse)));
    }
    write_file(&out_path(cli, "links.csv"), links)?;
    write_file(&out_path(cli, "agents.csv"), agents)?;
    if let Some(m) = median(&mses) {
        println!("median link mse over {} deliveries: {m:.6}", mses.len());
    }
    Ok(())
}

fn out_path(cli: &Cli, name: &str) -> PathBuf {
    cli.output_dir.join(name)
}
