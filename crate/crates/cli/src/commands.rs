use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rekvc::converter::checkpoint::write_checkpoint;
use rekvc::converter::{gradient_check, ConverterConfig, GradCheckSetup};
use rekvc::decoupler::{fit_decoupler, DecouplerModel};
use rekvc::demo::{run_demo, DemoConfig};
use rekvc::evalkit::{
    codebook_stats, corpus_checksum, generate_corpus, speaker_similarity_proxy, write_corpus,
    SyntheticCorpusSpec,
};
use rekvc::format::{read_codebook, read_features, write_codebook, write_features};
use rekvc::kmeans::{fit, Codebook, KMeansConfig};
use rekvc::losses::LossReport;
use rekvc::sampler::{PairConfig, PairSampler};
use rekvc::teacher::{
    load_pool, read_manifest, write_manifest, ManifestEntry, MatchingPool, Similarity,
};
use rekvc::{Error, FeatureMatrix, Result};

use crate::*;

pub const TOKENIZER_FILES: [&str; 3] = ["small.vtc", "medium.vtc", "large.vtc"];

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::FitKmeans(a) => fit_kmeans(a),
        Command::FitDecoupler(a) => fit_decoupler_cmd(a),
        Command::Encode(a) => encode(a),
        Command::BuildPool(a) => build_pool(a),
        Command::KnnConvert(a) => knn_convert(a),
        Command::FitTokenizers(a) => fit_tokenizers(a),
        Command::MakePairs(a) => make_pairs(a),
        Command::TrainToy(a) => train_toy(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_all(paths: &[PathBuf]) -> Result<Vec<FeatureMatrix>> {
    paths.iter().map(read_features).collect()
}

fn pooled(paths: &[PathBuf]) -> Result<FeatureMatrix> {
    let mats = read_all(paths)?;
    FeatureMatrix::concat(&mats.iter().collect::<Vec<_>>())
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let spec = SyntheticCorpusSpec {
        num_speakers: a.speakers,
        frames_per_speaker: a.frames,
        dim: a.dim,
        content_archetypes: a.archetypes,
        speaker_offset_scale: a.offset_scale,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    let corpus = generate_corpus(&spec)?;
    let manifest = write_corpus(&a.output, &corpus)?;
    println!("manifest\t{}", manifest.display());
    println!("sha256\t{}", corpus_checksum(&corpus));
    Ok(())
}

fn fit_kmeans(a: FitKmeansArgs) -> Result<()> {
    let points = pooled(&a.input)?;
    let cfg = KMeansConfig {
        max_iters: a.max_iters,
        tol: a.tol,
        ..KMeansConfig::with_seed(a.seed)
    };
    let cb = fit(&points, a.centroids, &cfg)?;
    write_codebook(&cb, &a.output)?;
    println!("iterations\t{}", cb.distortion_trace().len());
    println!("distortion\t{}", cb.distortion());
    Ok(())
}

fn fit_decoupler_cmd(a: FitDecouplerArgs) -> Result<()> {
    let corpus = read_all(&a.input)?;
    let model = fit_decoupler(&corpus, a.k1, a.k2, &KMeansConfig::with_seed(a.seed))?;
    model.save(&a.output)?;
    let r = model.distortion_report(&corpus)?;
    println!("stage1_mse\t{}", r.stage1_mse);
    println!("stage2_mse\t{}", r.stage2_mse);
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let model = DecouplerModel::load(&a.model)?;
    let enc = model.encode(&read_features(&a.input)?)?;
    write_features(&enc.enhanced, &a.output)?;
    if let Some(path) = a.ids {
        let mut text = String::from("content_id\tresidual_id\n");
        for (c, r) in enc.content_ids.iter().zip(&enc.residual_ids) {
            writeln!(text, "{c}\t{r}").unwrap();
        }
        write_text(&path, &text)?;
    }
    Ok(())
}

fn build_pool(a: BuildPoolArgs) -> Result<()> {
    let pool = load_pool(&a.manifest, a.k, Similarity::Cosine)?;
    create_dir(&a.output)?;
    let mut entries = Vec::new();
    for spk in pool.speaker_ids() {
        let frames = pool.speaker_frames(spk).expect("listed speaker");
        let name = PathBuf::from(format!("{spk}.vtf"));
        write_features(frames, a.output.join(&name))?;
        println!("{spk}\t{}", frames.frames());
        entries.push(ManifestEntry {
            speaker: spk.to_string(),
            path: name,
        });
    }
    write_manifest(a.output.join(rekvc::evalkit::MANIFEST_FILE), &entries)
}

fn similarity(s: SimilarityArg) -> Similarity {
    match s {
        SimilarityArg::Cosine => Similarity::Cosine,
        SimilarityArg::Euclidean => Similarity::NegSquaredEuclidean,
    }
}

fn knn_convert(a: KnnConvertArgs) -> Result<()> {
    let pool = load_pool(&a.pool, a.k, similarity(a.similarity))?;
    let out = pool.knn_convert(&a.speaker, &read_features(&a.input)?)?;
    write_features(&out, &a.output)
}

fn fit_tokenizers(a: FitTokenizersArgs) -> Result<()> {
    let sizes = &a.codebooks;
    if sizes.len() != 3 || !(sizes[0] >= 1 && sizes[0] < sizes[1] && sizes[1] < sizes[2]) {
        return Err(Error::InvalidConfig(format!(
            "codebook sizes {sizes:?} must strictly increase"
        )));
    }
    let points = pooled(&a.input)?;
    create_dir(&a.output)?;
    for (j, (&k, name)) in sizes.iter().zip(TOKENIZER_FILES).enumerate() {
        let cb = fit(&points, k, &KMeansConfig::with_seed(a.seed + j as u64))?;
        write_codebook(&cb, a.output.join(name))?;
        println!("{name}\t{k}\t{}", cb.distortion());
    }
    Ok(())
}

fn read_tokenizers(dir: &Path) -> Result<[Codebook; 3]> {
    let [a, b, c] = TOKENIZER_FILES.map(|f| read_codebook(dir.join(f)));
    Ok([a?, b?, c?])
}

fn make_pairs(a: MakePairsArgs) -> Result<()> {
    let decoupler = DecouplerModel::load(&a.decoupler)?;
    let tokenizers = read_tokenizers(&a.tokenizers)?;
    let pool: Option<MatchingPool> = match &a.pool {
        Some(p) => Some(load_pool(p, a.k, Similarity::Cosine)?),
        None => None,
    };
    let sources = read_manifest(&a.manifest)?;
    if sources.is_empty() {
        return Err(Error::Empty("source manifest"));
    }
    let utterances = sources
        .iter()
        .map(|e| read_features(&e.path))
        .collect::<Result<Vec<_>>>()?;
    let cfg = PairConfig {
        p_conversion: a.p_conversion,
        min_frames: a.min_frames,
        ..PairConfig::with_prompt_seconds(a.prompt_seconds, utterances[0].hop_us())
    };
    let sampler = PairSampler::new(&decoupler, pool.as_ref(), &tokenizers, cfg)?;
    create_dir(&a.output)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut index = String::from("pair\tmode\tspeaker\tsource\tprompt_start\tprompt_len\tframes\n");
    for i in 0..a.count {
        let s = rng.random_range(0..utterances.len());
        let pair = sampler.make_pair(&utterances[s], &mut rng)?;
        pair.check_invariants()?;
        let stem = format!("pair{i:05}");
        write_features(
            &pair.converter_input,
            a.output.join(format!("{stem}.input.vtf")),
        )?;
        write_features(
            &pair.aligned_target()?,
            a.output.join(format!("{stem}.target.vtf")),
        )?;
        let ids = pair.aligned_ids();
        let mut text = String::from("mask\tsmall\tmedium\tlarge\n");
        for (t, m) in pair.loss_mask().iter().enumerate() {
            writeln!(
                text,
                "{}\t{}\t{}\t{}",
                u8::from(*m),
                ids[0][t],
                ids[1][t],
                ids[2][t]
            )
            .unwrap();
        }
        write_text(&a.output.join(format!("{stem}.ids.tsv")), &text)?;
        writeln!(
            index,
            "{stem}\t{}\t{}\t{}\t{}\t{}\t{}",
            pair.mode,
            pair.speaker.as_deref().unwrap_or("-"),
            sources[s].path.display(),
            pair.prompt_start,
            pair.prompt_len(),
            pair.converter_input.frames()
        )
        .unwrap();
    }
    write_text(&a.output.join("pairs.tsv"), &index)
}

fn train_toy(a: TrainToyArgs) -> Result<()> {
    let mut cfg = DemoConfig::default();
    cfg.corpus.seed = a.seed;
    cfg.optimizer.seed = a.seed;
    cfg.optimizer.steps = a.steps;
    cfg.optimizer.learning_rate = a.lr;
    cfg.optimizer.batch_size = a.batch_size;
    cfg.p_conversion = a.p_conversion;
    cfg.prompt_frames = a.prompt_frames;
    cfg.converter.max_len = cfg
        .converter
        .max_len
        .max(a.prompt_frames + cfg.utterance_frames);
    cfg.holdout_frames = cfg.holdout_frames.max(a.prompt_frames);
    cfg.converter.attention = !a.no_attention;
    if a.steps == 0 {
        return Err(Error::InvalidConfig("--steps must be >= 1".into()));
    }
    let outcome = run_demo(&cfg)?;
    if let Some(path) = &a.log {
        let mut text = format!("step\t{}\n", LossReport::TSV_HEADER);
        for (i, r) in outcome.history.iter().enumerate() {
            writeln!(text, "{}\t{}", i + 1, r.to_tsv()).unwrap();
        }
        write_text(path, &text)?;
    }
    if let Some(path) = &a.output {
        write_checkpoint(&outcome.model, path)?;
    }
    let (to_target, to_source) = outcome.mean_proxies();
    println!("initial_smoothed_loss\t{}", outcome.initial_smoothed);
    println!("final_smoothed_loss\t{}", outcome.final_smoothed);
    println!("loss_ratio\t{}", outcome.loss_ratio());
    println!("proxy_to_target\t{to_target}");
    println!("proxy_to_source\t{to_source}");
    println!(
        "pairs_won\t{}/{}",
        outcome.pairs_won(),
        outcome.evaluations.len()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let inputs = read_all(&a.input)?;
    if let Some(dir) = &a.decoupler {
        let r = DecouplerModel::load(dir)?.distortion_report(&inputs)?;
        println!("stage1_mse\t{}", r.stage1_mse);
        println!("stage2_mse\t{}", r.stage2_mse);
        println!("content_utilization\t{}", r.content_utilization);
        println!("residual_utilization\t{}", r.residual_utilization);
    }
    for path in &a.codebook {
        let s = codebook_stats(&read_codebook(path)?, &inputs)?;
        println!("utilization\t{}\t{}", path.display(), s.utilization);
        println!("perplexity\t{}\t{}", path.display(), s.perplexity);
    }
    if let Some(path) = &a.reference {
        let reference = read_features(path)?;
        for (p, m) in a.input.iter().zip(&inputs) {
            println!(
                "proxy\t{}\t{}",
                p.display(),
                speaker_similarity_proxy(m, &reference)?
            );
        }
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    let config = match a.config {
        GradConfig::Tiny => ConverterConfig::tiny(4),
        GradConfig::Default => ConverterConfig {
            max_len: 16,
            ..ConverterConfig::new(4)
        },
    };
    let r = gradient_check(&config, &GradCheckSetup::default(), a.seed)?;
    println!("params\t{}", r.num_params);
    println!("max_relative_error\t{:e}", r.max_relative_error);
    if r.max_relative_error < a.tolerance {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "max relative error {:e} at parameter {} exceeds {:e}",
            r.max_relative_error, r.worst_index, a.tolerance
        )))
    }
}
