use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context, Result};
use steervec::corpus::{
    generate_synthetic_corpus, load_corpus, save_corpus, Cell, CorpusFormat, LanguageTag, ParallelCorpus,
    SyntheticCorpus, SyntheticSpec,
};
use steervec::eval::{
    diff_reports, layer_ablation, run_eval, steer_only_eval, synthetic_prompts, EvalPrompt, LanguageIdentifier,
};
use steervec::model::{load_model, pretrain_toy, save_model, LayerHook, Model, ModelConfig, PretrainOptions};
use steervec::steering::{
    load_learned, lsi_build, make_hook, save_learned, synthetic_contrast_pairs, LearnedSteering, LsiArtifacts,
    LsiOptions, ProbeSample, RepresentationTable, SteeringArtifact, SteeringMode,
};
use steervec::steertrain::{make_steering_trainset, train_learned_steering, write_loss_log, PairSampling, TrainConfig};
use steervec::vectors::{build_bank, cluster_languages, load_bank, save_bank, LanguageVectorBank};

use crate::manifest::{sibling, RunManifest};
use crate::*;

/// Offset between `--seed` and the held-out stream used for prompts, so
/// prompts never share a stream with the training corpus.
const PROMPT_STREAM: u64 = 1000;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynth(a) => gen_synth(&a),
        Command::Pretrain(a) => pretrain(&a),
        Command::BuildVectors(a) => build_vectors(&a),
        Command::AddLang(a) => add_lang(&a),
        Command::Steer(a) => steer(&a),
        Command::TrainSteer(a) => train_steer(&a),
        Command::Eval(a) => eval(&a),
        Command::SteerOnlyEval(a) => steer_only(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Cluster(a) => cluster(&a),
        Command::LsiBuild(a) => lsi(&a),
        Command::ReportDiff(a) => report_diff(&a),
    }
}

fn corpus_of(args: &CorpusArgs, m: &mut RunManifest) -> Result<ParallelCorpus> {
    let format: CorpusFormat = args.format.parse()?;
    m.input(&args.corpus)?;
    load_corpus(&args.corpus, format).with_context(|| format!("loading corpus {}", args.corpus.display()))
}

fn model_of(path: &Path, m: &mut RunManifest) -> Result<Model> {
    m.input(path)?;
    let mut model = load_model(path).with_context(|| format!("loading model {}", path.display()))?;
    model.freeze();
    Ok(model)
}

fn bank_of(path: &Path, m: &mut RunManifest) -> Result<LanguageVectorBank> {
    m.input(path)?;
    load_bank(path).with_context(|| format!("loading bank {}", path.display()))
}

fn synth_of(path: &Path, m: &mut RunManifest) -> Result<SyntheticCorpus> {
    m.input(path)?;
    let spec: SyntheticSpec = serde_json::from_slice(&std::fs::read(path)?)
        .with_context(|| format!("parsing synthetic spec {}", path.display()))?;
    Ok(generate_synthetic_corpus(&spec)?)
}

fn json_bytes(value: &impl serde::Serialize) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn gen_synth(a: &GenSynthArgs) -> Result<()> {
    let mut m = RunManifest::new("gen-synth", a)?;
    m.seed("corpus", a.seed);
    let spec = SyntheticSpec {
        n_languages: a.languages,
        n_families: a.families,
        content_alphabet: a.alphabet,
        samples: a.samples,
        min_len: a.min_len,
        max_len: a.max_len,
        seed: a.seed,
    };
    let syn = generate_synthetic_corpus(&spec)?;
    save_corpus(&syn.corpus, &a.out, CorpusFormat::Jsonl)?;
    m.record_output(&a.out);
    let spec_out = a.spec_out.clone().unwrap_or_else(|| sibling(&a.out, "synth.json"));
    m.output(&spec_out, &json_bytes(&spec)?)?;
    m.finish(&a.out)?;
    log::info!(
        "wrote {} samples x {} languages to {}",
        syn.corpus.len(),
        a.languages,
        a.out.display()
    );
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let mut m = RunManifest::new("pretrain", a)?;
    m.seed("init", a.seed);
    m.seed("shuffle", a.seed);
    let corpus = corpus_of(&a.corpus, &mut m)?;
    let vocab = corpus
        .languages()
        .iter()
        .filter_map(|t| t.script.token_range())
        .map(|(_, hi)| hi as usize)
        .max()
        .context("pretraining needs languages with token ranges")?;
    let config = ModelConfig {
        d_model: a.d_model,
        n_layers: a.n_layers,
        n_heads: a.heads,
        vocab_size: vocab,
        max_seq_len: a.max_seq_len,
        seed: a.seed,
    };
    let opts = PretrainOptions {
        epochs: a.epochs,
        lr: a.lr,
        batch: a.batch,
        weight_decay: a.weight_decay,
        seed: a.seed,
        ..Default::default()
    };
    let (model, report) = pretrain_toy(config, &corpus, &opts)?;
    save_model(&model, &a.out)?;
    m.record_output(&a.out);
    m.output(&sibling(&a.out, "pretrain.json"), &json_bytes(&report)?)?;
    m.finish(&a.out)?;
    log::info!("loss {:.4} -> {:.4}", report.initial_loss, report.final_loss);
    Ok(())
}

fn build_vectors(a: &BuildVectorsArgs) -> Result<()> {
    let mut m = RunManifest::new("build-vectors", a)?;
    let model = model_of(&a.model, &mut m)?;
    let corpus = corpus_of(&a.corpus, &mut m)?;
    let bank = build_bank(&model, &corpus)?;
    save_bank(&bank, &a.out)?;
    m.record_output(&a.out);
    m.finish(&a.out)?;
    log::info!("bank with {} languages written to {}", bank.len(), a.out.display());
    Ok(())
}

fn add_lang(a: &AddLangArgs) -> Result<()> {
    let mut m = RunManifest::new("add-lang", a)?;
    let model = model_of(&a.model, &mut m)?;
    let bank = bank_of(&a.bank, &mut m)?;
    let corpus = corpus_of(&a.corpus, &mut m)?;
    let tag = corpus
        .language(&a.lang)
        .cloned()
        .with_context(|| format!("corpus has no language {}", a.lang))?;
    let slice = corpus.slice(&a.lang)?;
    let bank = bank.add_language(&model, tag, &slice)?;
    save_bank(&bank, &a.out)?;
    m.record_output(&a.out);
    m.finish(&a.out)?;
    Ok(())
}

/// Loaded steering artifacts; borrowed as a `SteeringArtifact`.
struct Loaded {
    bank: Option<LanguageVectorBank>,
    learned: Option<(RepresentationTable, LearnedSteering)>,
    lsi: Option<LsiArtifacts>,
}

impl Loaded {
    fn load(a: &ArtifactArgs, m: &mut RunManifest) -> Result<Self> {
        let bank = a.bank.as_deref().map(|p| bank_of(p, m)).transpose()?;
        let learned = match (&a.learned, &bank) {
            (Some(p), Some(b)) => {
                m.input(p)?;
                Some((RepresentationTable::from_bank(b)?, load_learned(p)?))
            }
            _ => None,
        };
        let lsi = match &a.lsi {
            Some(p) => {
                m.input(p)?;
                Some(serde_json::from_slice(&std::fs::read(p)?).with_context(|| format!("parsing {}", p.display()))?)
            }
            None => None,
        };
        Ok(Loaded { bank, learned, lsi })
    }

    fn artifact(&self) -> Option<SteeringArtifact<'_>> {
        if let Some((reps, params)) = &self.learned {
            return Some(SteeringArtifact::Learned { reps, params });
        }
        if let Some(lsi) = &self.lsi {
            return Some(SteeringArtifact::Lsi(lsi));
        }
        self.bank.as_ref().map(SteeringArtifact::Bank)
    }
}

fn steer(a: &SteerArgs) -> Result<()> {
    let mut m = RunManifest::new("steer", a)?;
    let model = model_of(&a.model, &mut m)?;
    let loaded = Loaded::load(&a.artifact, &mut m)?;
    let config = a.steering.config(SteeringMode::Cross)?;
    let hook = match loaded.artifact() {
        Some(art) => Some(make_hook(art, &config, &a.target, a.source.as_deref())?),
        None => None,
    };
    let out = model.generate(&a.prompt, hook.as_ref().map(|h| h as &dyn LayerHook<f32>), a.max_new)?;
    let generated = &out[a.prompt.len()..];
    let text: Vec<String> = generated.iter().map(u32::to_string).collect();
    println!("{}", text.join(","));
    if let Some(path) = &a.out {
        let body = serde_json::json!({ "prompt": a.prompt, "generated": generated });
        m.output(path, &json_bytes(&body)?)?;
        m.finish(path)?;
    }
    Ok(())
}

fn train_steer(a: &TrainSteerArgs) -> Result<()> {
    let mut m = RunManifest::new("train-steer", a)?;
    m.seed("pairs", a.seed);
    m.seed("init", a.seed);
    let model = model_of(&a.model, &mut m)?;
    let bank = bank_of(&a.bank, &mut m)?;
    let corpus = corpus_of(&a.corpus, &mut m)?;
    let sampling = PairSampling {
        items: a.items,
        mono_fraction: a.mono_fraction,
        deny: a.deny.iter().cloned().collect(),
        ..Default::default()
    };
    let trainset = make_steering_trainset(&corpus, &sampling, a.seed)?;
    let config = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        dropout: a.dropout,
        rank: a.rank,
        batch: a.batch,
        seed: a.seed,
    };
    let steering = a.steering.config(SteeringMode::Cross)?;
    let (params, curve) = train_learned_steering(&model, &bank, &trainset, &config, &steering)?;
    save_learned(&params, &a.out)?;
    m.record_output(&a.out);
    let log_path = a.loss_log.clone().unwrap_or_else(|| sibling(&a.out, "loss.jsonl"));
    write_loss_log(&curve, &log_path)?;
    m.record_output(&log_path);
    m.finish(&a.out)?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        log::info!("{} steps, loss {:.4} -> {:.4}", curve.len(), first.loss, last.loss);
    }
    Ok(())
}

fn parse_pairs(spec: &str, codes: &[String]) -> Result<Vec<(String, String)>> {
    if spec == "all" {
        let mut out = Vec::new();
        for s in codes {
            for t in codes {
                if s != t {
                    out.push((s.clone(), t.clone()));
                }
            }
        }
        return Ok(out);
    }
    spec.split(',')
        .map(|p| match p.split_once(':') {
            Some((s, t)) => Ok((s.trim().to_string(), t.trim().to_string())),
            None => bail!("pair {p:?} is not source:target"),
        })
        .collect()
}

/// Prompts and the identifier that scores their generations.
fn prompts_of(a: &PromptArgs, loaded: &Loaded, m: &mut RunManifest) -> Result<(Vec<EvalPrompt>, LanguageIdentifier)> {
    m.seed("prompts", a.seed);
    if let Some(path) = &a.synth {
        let syn = synth_of(path, m)?;
        let pairs = parse_pairs(&a.pairs, &syn.codes())?;
        let prompts = synthetic_prompts(&syn, &pairs, a.n, a.prompt_len, PROMPT_STREAM + a.seed)?;
        let id = LanguageIdentifier::TokenRange {
            languages: syn.corpus.languages().to_vec(),
        };
        return Ok((prompts, id));
    }
    let Some(path) = &a.prompts else {
        bail!("one of --synth or --prompts is required");
    };
    m.input(path)?;
    let text = std::fs::read_to_string(path)?;
    let prompts = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<Vec<EvalPrompt>, _>>()
        .with_context(|| format!("parsing prompts {}", path.display()))?;
    let Some(bank) = &loaded.bank else {
        bail!("--prompts needs --bank to know the language token ranges");
    };
    let languages: Vec<LanguageTag> = bank.languages().into_iter().cloned().collect();
    Ok((prompts, LanguageIdentifier::TokenRange { languages }))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let mut m = RunManifest::new("eval", a)?;
    let model = model_of(&a.model, &mut m)?;
    let loaded = Loaded::load(&a.artifact, &mut m)?;
    let (prompts, id) = prompts_of(&a.prompts, &loaded, &mut m)?;
    let config = a.steering.config(SteeringMode::Cross)?;
    let report = run_eval(&model, loaded.artifact(), &config, &prompts, &id, a.prompts.max_new)?;
    m.output(&a.out, format!("{}\n", report.to_json()?).as_bytes())?;
    m.finish(&a.out)?;
    log::info!("{} runs over {} prompts", report.runs.len(), report.n_prompts);
    Ok(())
}

fn steer_only(a: &SteerOnlyEvalArgs) -> Result<()> {
    let e = &a.eval;
    let mut m = RunManifest::new("steer-only-eval", a)?;
    let model = model_of(&e.model, &mut m)?;
    let loaded = Loaded::load(&e.artifact, &mut m)?;
    let Some(artifact) = loaded.artifact() else {
        bail!("steer-only-eval needs --bank, --learned or --lsi");
    };
    let (prompts, id) = prompts_of(&e.prompts, &loaded, &mut m)?;
    let config = e.steering.config(SteeringMode::SteerOnly)?;
    let report = steer_only_eval(&model, artifact, &config, &prompts, &id, &a.alphas, e.prompts.max_new)?;
    m.output(&e.out, format!("{}\n", report.to_json()?).as_bytes())?;
    m.finish(&e.out)?;
    for alpha in &a.alphas {
        let f: Vec<f64> = report
            .runs
            .iter()
            .filter(|r| r.alpha == *alpha)
            .filter_map(|r| r.target_token_fraction)
            .collect();
        if !f.is_empty() {
            let min = f.iter().copied().fold(f64::INFINITY, f64::min);
            let mean = f.iter().sum::<f64>() / f.len() as f64;
            println!("alpha {alpha}: target fraction mean {mean:.3}, min over pairs {min:.3}");
        }
    }
    Ok(())
}

fn ablate(a: &EvalArgs) -> Result<()> {
    let mut m = RunManifest::new("ablate", a)?;
    let model = model_of(&a.model, &mut m)?;
    let loaded = Loaded::load(&a.artifact, &mut m)?;
    let Some(artifact) = loaded.artifact() else {
        bail!("ablate needs --bank, --learned or --lsi");
    };
    let (prompts, id) = prompts_of(&a.prompts, &loaded, &mut m)?;
    let config = a.steering.config(SteeringMode::Cross)?;
    let table = layer_ablation(&model, artifact, &config, &prompts, &id, a.prompts.max_new)?;
    m.output(&a.out, &json_bytes(&table)?)?;
    let text = table.render_text();
    m.output(&sibling(&a.out, "txt"), text.as_bytes())?;
    m.finish(&a.out)?;
    print!("{text}");
    Ok(())
}

fn cluster(a: &ClusterArgs) -> Result<()> {
    let mut m = RunManifest::new("cluster", a)?;
    let bank = bank_of(&a.bank, &mut m)?;
    let layer = match a.layer.as_str() {
        "last" => None,
        n => Some(n.parse::<usize>().with_context(|| format!("--layer {n:?}"))?),
    };
    let dendro = cluster_languages(&bank, layer)?;
    m.output(&a.out, &json_bytes(&dendro)?)?;
    let text = dendro.render_text();
    m.output(&sibling(&a.out, "txt"), text.as_bytes())?;
    m.finish(&a.out)?;
    print!("{text}");
    Ok(())
}

fn lsi(a: &LsiBuildArgs) -> Result<()> {
    let mut m = RunManifest::new("lsi-build", a)?;
    m.seed("split", a.seed);
    let model = model_of(&a.model, &mut m)?;
    let syn = synth_of(&a.synth, &mut m)?;
    let codes = syn.codes();
    let mut probe = Vec::new();
    for code in &codes {
        for (_, cell) in syn.corpus.slice(code)?.into_iter().take(a.probe_samples) {
            if let Cell::Tokens(t) = cell {
                probe.push(ProbeSample {
                    code: code.clone(),
                    tokens: t.clone(),
                });
            }
        }
    }
    let instr = a.instruction_lang.clone().unwrap_or_else(|| codes[0].clone());
    let contrast = synthetic_contrast_pairs(&syn, &instr, a.contrast, a.contrast_len, PROMPT_STREAM + 1 + a.seed)?;
    let opts = LsiOptions {
        tau: a.tau,
        gamma: a.gamma,
        seed: a.seed,
        ..Default::default()
    };
    let art = lsi_build(&model, &probe, &contrast, &opts)?;
    m.output(&a.out, &json_bytes(&art)?)?;
    m.finish(&a.out)?;
    let acc: Vec<String> = art.probe_accuracy.iter().map(|x| format!("{x:.3}")).collect();
    println!("probe accuracy per layer {} (chance {:.3})", acc.join(" "), art.chance);
    Ok(())
}

fn report_diff(a: &ReportDiffArgs) -> Result<()> {
    let load = |p: &Path| -> Result<steervec::eval::EvalReport> {
        Ok(steervec::eval::EvalReport::from_json(&std::fs::read_to_string(p)?)?)
    };
    let (ra, rb) = (load(&a.a)?, load(&a.b)?);
    let deltas = diff_reports(&ra, &rb);
    let changed: BTreeSet<(String, String)> = deltas.iter().map(|d| (d.source.clone(), d.target.clone())).collect();
    for d in &deltas {
        let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{}->{} alpha={} {}: {} -> {} ({})",
            d.source,
            d.target,
            d.alpha,
            d.field,
            f(d.a),
            f(d.b),
            f(d.delta)
        );
    }
    println!("{} changed cells across {} pairs", deltas.len(), changed.len());
    if let Some(out) = &a.out {
        let mut m = RunManifest::new("report-diff", a)?;
        m.input(&a.a)?;
        m.input(&a.b)?;
        m.output(out, &json_bytes(&deltas)?)?;
        m.finish(out)?;
    }
    Ok(())
}
