use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use mmtrust::analyze::{corpus_cooccurrence, cross_apply};
use mmtrust::explain::{summarize, Explainer, ShapMethod};
use mmtrust::forest::{evaluate_protocol, fit, holdout, Forest, ForestConfig, Target, TrainingSet};
use mmtrust::stats::{self, Scale};
use mmtrust::synth::{
    generate_dataset, DatasetOptions, EndpointConfig, HttpChatClient, OfflineGenerator, Preset,
    RemoteGenerator, SynthProfile, TurnGenerator,
};
use mmtrust::timeline::{self, OverlapPolicy, TimingConfig};
use mmtrust::transcript::parse_lines;
use mmtrust::{AugmentedTranscript, BehaviorLexicon, Corpus, CorpusMeta, LabeledSample, Level, Trait};

use crate::args::*;
use crate::config::FileConfig;
use crate::failure::Failure;

struct Ctx {
    cfg: FileConfig,
    lex: BehaviorLexicon,
    seed: u64,
    strict: bool,
    out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let g = cli.global;
    let cfg = match &g.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let lex = match g.lexicon.as_ref().or(cfg.lexicon.as_ref()) {
        Some(p) => BehaviorLexicon::load(p).map_err(|e| Failure::core(p.display(), e))?,
        None => BehaviorLexicon::builtin().clone(),
    };
    let ctx = Ctx {
        seed: g.seed.or(cfg.seed).unwrap_or(0),
        strict: g.strict_tags || cfg.strict_tags.unwrap_or(false),
        out: g.out,
        lex,
        cfg,
    };
    match cli.command {
        Command::Gen(a) => gen(&ctx, a),
        Command::Parse(a) => parse(&ctx, a),
        Command::Featurize(a) => featurize(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Explain(a) => explain(&ctx, a),
        Command::Apply(a) => apply(&ctx, a),
        Command::Cooc(a) => cooc(&ctx, a),
        Command::Timeline(a) => timeline_cmd(&ctx, a),
        Command::Stats(a) => stats_cmd(&ctx, a),
    }
}

fn parse_flag<T: FromStr<Err = String>>(flag: &str, value: &str) -> Result<T, Failure> {
    value.parse().map_err(|e| Failure::Usage(format!("--{flag}: {e}")))
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

/// Refuses an output path that would overwrite one of the inputs.
fn guard_out(out: Option<&Path>, inputs: &[&Path]) -> Result<(), Failure> {
    if let Some(out) = out {
        if let Some(i) = inputs.iter().find(|i| same_file(out, i)) {
            return Err(Failure::Usage(format!(
                "--out {} would overwrite the input {}",
                out.display(),
                i.display()
            )));
        }
    }
    Ok(())
}

fn emit(ctx: &Ctx, text: &str, inputs: &[&Path]) -> Result<(), Failure> {
    guard_out(ctx.out.as_deref(), inputs)?;
    match &ctx.out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn is_corpus_file(text: &str) -> bool {
    text.lines()
        .find(|l| !l.trim().is_empty())
        .and_then(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .is_some_and(|v| v.get("format").is_some())
}

/// Loads a corpus JSONL or a plain file with one turn per line. Plain lines
/// become unlabeled turns named `line-N`. Every malformed line is reported
/// on stderr before failing.
fn load_turns(ctx: &Ctx, path: &Path) -> Result<Corpus, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        let message = format!("{}: {e}", path.display());
        if path.exists() {
            Failure::Runtime(message)
        } else {
            Failure::Input(message)
        }
    })?;
    let corpus = if is_corpus_file(&text) {
        Corpus::from_jsonl(&text, &ctx.lex).map_err(|e| Failure::core(path.display(), e))?
    } else {
        let meta = CorpusMeta {
            trait_: Trait::None,
            gendered: false,
            provenance: "text".into(),
            created_unix: 0,
            preset: None,
        };
        let mut corpus = Corpus::new(meta, &ctx.lex);
        let mut bad = 0;
        for (line, result) in parse_lines(&text) {
            match result {
                Ok(t) => {
                    let s = LabeledSample::new(
                        format!("line-{line}"),
                        Trait::None,
                        None,
                        None,
                        t.source(),
                        &ctx.lex,
                    )
                    .expect("already parsed");
                    corpus.samples.push(s);
                }
                Err(e) => {
                    eprintln!("{}:{line}: {e}", path.display());
                    bad += 1;
                }
            }
        }
        if bad > 0 {
            return Err(Failure::Input(format!(
                "{}: {bad} malformed turn(s)",
                path.display()
            )));
        }
        corpus
    };
    if ctx.strict {
        if let Some((id, tag)) = corpus.unknown_tags().next() {
            return Err(Failure::Input(format!(
                "{}: turn {id}: unknown {} tag `{}` at offset {}",
                path.display(),
                tag.channel,
                tag.name,
                tag.offset
            )));
        }
    }
    Ok(corpus)
}

fn at<E: Into<mmtrust::Error>>(path: &Path) -> impl Fn(E) -> Failure + '_ {
    move |e| Failure::core(path.display(), e)
}

fn feature_names(lex: &BehaviorLexicon) -> Vec<String> {
    let v = lex.vocabulary();
    (0..v.len()).map(|i| v.name(i).to_string()).collect()
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn gen(ctx: &Ctx, a: GenArgs) -> Result<(), Failure> {
    let cfg = &ctx.cfg;
    let preset = match (a.preset.as_ref().or(cfg.preset.as_ref()), &a.trait_) {
        (Some(p), t) => {
            let p: Preset = parse_flag("preset", p)?;
            if let Some(t) = t {
                let t: Trait = parse_flag("trait", t)?;
                if t != p.trait_() {
                    return Err(Failure::Usage(format!("--trait {t} contradicts preset {p}")));
                }
            }
            p
        }
        (None, Some(t)) => match parse_flag::<Trait>("trait", t)? {
            Trait::Ability => Preset::NeutralAbility,
            Trait::Benevolence => Preset::NeutralBenevolence,
            Trait::None => Preset::Control,
        },
        (None, None) => return Err(Failure::Usage("gen needs --preset or --trait".into())),
    };
    let generator = match (a.generator, &cfg.generator) {
        (Some(g), _) => g,
        (None, Some(g)) => match g.as_str() {
            "offline" => Generator::Offline,
            "remote" => Generator::Remote,
            _ => return Err(Failure::Usage(format!("unknown generator `{g}`"))),
        },
        (None, None) => Generator::Offline,
    };
    let out = ctx
        .out
        .clone()
        .ok_or_else(|| Failure::Usage("gen needs --out".into()))?;
    let resume = if a.resume && out.exists() {
        Some(Corpus::load(&out, &ctx.lex).map_err(|e| Failure::core(out.display(), e))?)
    } else {
        None
    };
    let mut opts = DatasetOptions {
        size: a.size.or(cfg.size),
        parallelism: a.parallelism.or(cfg.parallelism).unwrap_or(4),
        ..Default::default()
    };

    let corpus = match generator {
        Generator::Offline => {
            let profile = SynthProfile::for_trait(preset.trait_(), ctx.seed)
                .compile(&ctx.lex)
                .map_err(|e| Failure::core("lexicon", e))?;
            let g = OfflineGenerator::new(profile);
            build(ctx, preset, &g, &opts, resume)?
        }
        Generator::Remote => {
            let endpoint = a.endpoint.as_ref().or(cfg.endpoint.as_ref());
            let model = a.model.as_ref().or(cfg.model.as_ref());
            let (Some(endpoint), Some(model)) = (endpoint, model) else {
                return Err(Failure::Usage(
                    "the remote generator needs --endpoint and --model".into(),
                ));
            };
            let key = a
                .api_key_env
                .clone()
                .or(cfg.api_key_env.clone())
                .unwrap_or_else(|| "OPENAI_API_KEY".into());
            let config = EndpointConfig {
                api_key_env: (!key.is_empty()).then_some(key),
                ..EndpointConfig::new(endpoint, model)
            };
            let client = HttpChatClient::new(config).map_err(|e| Failure::core(endpoint, e))?;
            opts.created_unix = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs());
            opts.checkpoint = Some(out.clone());
            let g = RemoteGenerator::new(&client, &ctx.lex);
            build(ctx, preset, &g, &opts, resume)?
        }
    };
    if ctx.strict {
        if let Some((id, tag)) = corpus.unknown_tags().next() {
            return Err(Failure::Input(format!(
                "turn {id}: unknown {} tag `{}` at offset {}",
                tag.channel, tag.name, tag.offset
            )));
        }
    }
    corpus.save(&out).map_err(|e| Failure::core(out.display(), e))?;
    eprintln!("wrote {} turns to {}", corpus.len(), out.display());
    Ok(())
}

fn build(
    ctx: &Ctx,
    preset: Preset,
    g: &dyn TurnGenerator,
    opts: &DatasetOptions,
    resume: Option<Corpus>,
) -> Result<Corpus, Failure> {
    generate_dataset(preset, g, &ctx.lex, opts, resume)
        .map_err(|e| Failure::core(format!("preset {preset}"), e))
}

fn parse(ctx: &Ctx, a: InputArgs) -> Result<(), Failure> {
    let corpus = load_turns(ctx, &a.input)?;
    let known: u64 = corpus.samples.iter().map(|s| s.features.l1()).sum();
    let mut unknown: BTreeMap<(String, String), (usize, String)> = BTreeMap::new();
    for (id, tag) in corpus.unknown_tags() {
        let e = unknown
            .entry((tag.channel.to_string(), tag.name.clone()))
            .or_insert((0, id.to_string()));
        e.0 += 1;
    }
    let total_unknown: usize = unknown.values().map(|v| v.0).sum();
    let mut out = format!(
        "{}: {} turns, {} known tags, {} unknown tags\n",
        a.input.display(),
        corpus.len(),
        known,
        total_unknown
    );
    if !unknown.is_empty() {
        out.push_str("channel\ttag\tcount\tfirst turn\n");
        for ((channel, name), (n, first)) in &unknown {
            let _ = writeln!(out, "{channel}\t{name}\t{n}\t{first}");
        }
    }
    emit(ctx, &out, &[&a.input])
}

fn featurize(ctx: &Ctx, a: InputArgs) -> Result<(), Failure> {
    let corpus = load_turns(ctx, &a.input)?;
    emit(ctx, &corpus.feature_table(&ctx.lex), &[&a.input])
}

fn forest_config(ctx: &Ctx, f: &ForestArgs) -> Result<(Target, ForestConfig), Failure> {
    let target = match f.target.as_ref().or(ctx.cfg.target.as_ref()) {
        Some(t) => parse_flag("target", t)?,
        None => Target::Level,
    };
    let n_trees = f.trees.or(ctx.cfg.trees).unwrap_or(100);
    if n_trees == 0 {
        return Err(Failure::Usage("--trees must be positive".into()));
    }
    Ok((
        target,
        ForestConfig {
            n_trees,
            seed: ctx.seed,
            ..Default::default()
        },
    ))
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<(), Failure> {
    guard_out(a.save_model.as_deref(), &[&a.input])?;
    let corpus = load_turns(ctx, &a.input)?;
    let (target, config) = forest_config(ctx, &a.forest)?;
    let seeds = a.seeds.or(ctx.cfg.seeds).unwrap_or(20);
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be positive".into()));
    }
    let samples: Vec<&LabeledSample> = corpus.samples.iter().collect();
    let report = evaluate_protocol(&samples, target, &config, seeds)
        .map_err(|e| Failure::core(a.input.display(), e))?;
    if let Some(path) = &a.save_model {
        let forest = fit(&samples, target, &config, &corpus.vocabulary)
            .map_err(|e| Failure::core(a.input.display(), e))?;
        forest.save(path).map_err(|e| Failure::core(path.display(), e))?;
    }
    let text = match a.format {
        Format::Text => report.render(),
        Format::Json => report.to_json() + "\n",
    };
    emit(ctx, &text, &[&a.input])
}

fn load_forest(path: &Path, corpus: &Corpus) -> Result<Forest, Failure> {
    let forest = Forest::load(path).map_err(|e| Failure::core(path.display(), e))?;
    if forest.vocabulary != corpus.vocabulary {
        return Err(Failure::Input(format!(
            "{}: model vocabulary {} does not match the corpus vocabulary {}",
            path.display(),
            forest.vocabulary,
            corpus.vocabulary
        )));
    }
    Ok(forest)
}

fn explain(ctx: &Ctx, a: ExplainArgs) -> Result<(), Failure> {
    let method: ShapMethod = parse_flag("method", &a.method)?;
    let corpus = load_turns(ctx, &a.input)?;
    let (forest, background, explained): (Forest, Vec<usize>, Vec<usize>) = match &a.forest {
        Some(path) => {
            let forest = load_forest(path, &corpus)?;
            let all: Vec<usize> = (0..corpus.len()).collect();
            (forest, all.clone(), all)
        }
        None => {
            let (target, config) = forest_config(ctx, &a.train)?;
            let samples: Vec<&LabeledSample> = corpus.samples.iter().collect();
            let data = TrainingSet::from_samples(&samples, target).map_err(at(&a.input))?;
            let (tr, te) = holdout(&data.y, data.n_classes, ctx.seed).map_err(at(&a.input))?;
            let train: Vec<&LabeledSample> = tr.iter().map(|&i| samples[i]).collect();
            let forest = fit(&train, target, &config, &corpus.vocabulary).map_err(at(&a.input))?;
            (forest, tr, te)
        }
    };
    let row = |i: usize| corpus.samples[i].features.counts();
    let bg: Vec<&[u32]> = background.iter().map(|&i| row(i)).collect();
    let explainer = Explainer::new(&forest, &bg, method).map_err(at(&a.input))?;
    let batch: Vec<(&str, &[u32])> = explained
        .iter()
        .map(|&i| (corpus.samples[i].turn_id.as_str(), row(i)))
        .collect();
    let attributions = explainer.explain_batch(&batch).map_err(at(&a.input))?;
    let inputs: Vec<&[u32]> = batch.iter().map(|(_, x)| *x).collect();
    let summary = summarize(
        &attributions,
        &inputs,
        &forest.labels,
        &feature_names(&ctx.lex),
        method,
    );
    let text = match a.format {
        TableFormat::Text => summary.render(a.top),
        TableFormat::Tsv => summary.to_table(),
        TableFormat::Json => summary.to_json() + "\n",
    };
    let mut inputs: Vec<&Path> = vec![&a.input];
    inputs.extend(a.forest.as_deref());
    emit(ctx, &text, &inputs)
}

fn apply(ctx: &Ctx, a: ApplyArgs) -> Result<(), Failure> {
    let corpus = load_turns(ctx, &a.input)?;
    let forest = load_forest(&a.forest, &corpus)?;
    let name = a.name.clone().unwrap_or_else(|| stem(&a.forest));
    let report = cross_apply(&forest, &corpus, &name, &stem(&a.input))
        .map_err(|e| Failure::core(a.input.display(), e))?;
    let text = match a.format {
        Format::Text => report.render(),
        Format::Json => report.to_json() + "\n",
    };
    emit(ctx, &text, &[&a.input, &a.forest])
}

fn cooc(ctx: &Ctx, a: CoocArgs) -> Result<(), Failure> {
    let corpus = load_turns(ctx, &a.input)?;
    let report = corpus_cooccurrence(&corpus, &feature_names(&ctx.lex), a.min_count)
        .map_err(|e| Failure::core(a.input.display(), e))?;
    let text = match a.format {
        Format::Text => report.render(a.top),
        Format::Json => report.to_json() + "\n",
    };
    emit(ctx, &text, &[&a.input])
}

fn file_name(turn_id: &str) -> String {
    let safe: String = turn_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    format!("{safe}.json")
}

fn timeline_cmd(ctx: &Ctx, a: TimelineArgs) -> Result<(), Failure> {
    let cfg = &ctx.cfg;
    let overlap = match a.overlap_policy.as_ref().or(cfg.overlap_policy.as_ref()) {
        Some(p) => parse_flag::<OverlapPolicy>("overlap-policy", p)?,
        None => OverlapPolicy::Queue,
    };
    let defaults = TimingConfig::default();
    let timing = TimingConfig {
        words_per_minute: a.rate.or(cfg.rate).unwrap_or(defaults.words_per_minute),
        pause_ms: a.pause_ms.or(cfg.pause_ms).unwrap_or(defaults.pause_ms),
        overlap,
        strict: ctx.strict,
    };
    let turns: Vec<(String, String)> = match (&a.turn, &a.input) {
        (Some(raw), _) => vec![("turn".into(), raw.clone())],
        (None, Some(path)) => {
            let corpus = load_turns(ctx, path)?;
            let all = corpus.samples.into_iter().map(|s| (s.turn_id, s.raw));
            match &a.id {
                Some(id) => {
                    let picked: Vec<_> = all.filter(|(t, _)| t == id).collect();
                    if picked.is_empty() {
                        return Err(Failure::Input(format!(
                            "{}: no turn with id `{id}`",
                            path.display()
                        )));
                    }
                    picked
                }
                None => all.collect(),
            }
        }
        (None, None) => unreachable!("clap requires an input"),
    };
    let compiled = turns
        .iter()
        .map(|(id, raw)| {
            let t = AugmentedTranscript::parse(raw).map_err(|e| Failure::core(format!("turn {id}"), e))?;
            let tl = timeline::compile(&t, &ctx.lex, &timing)
                .map_err(|e| Failure::core(format!("turn {id}"), e))?;
            Ok((id.as_str(), tl))
        })
        .collect::<Result<Vec<_>, Failure>>()?;

    let inputs: Vec<&Path> = a.input.as_deref().into_iter().collect();
    if let [(_, tl)] = compiled.as_slice() {
        return emit(ctx, &tl.to_json(), &inputs);
    }
    let dir = ctx.out.as_ref().ok_or_else(|| {
        Failure::Usage(format!(
            "{} turns need an --out directory (or select one with --id)",
            compiled.len()
        ))
    })?;
    guard_out(Some(dir), &inputs)?;
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    for (id, tl) in &compiled {
        let path = dir.join(file_name(id));
        tl.export(&path).map_err(|e| Failure::core(format!("turn {id}"), e))?;
    }
    eprintln!("wrote {} timelines to {}", compiled.len(), dir.display());
    Ok(())
}

const SCALES: [Scale; 4] = [Scale::Ability, Scale::Benevolence, Scale::Trust, Scale::HumanLikeness];

fn stats_cmd(ctx: &Ctx, a: StatsArgs) -> Result<(), Failure> {
    let delimiter = match a.delimiter {
        Some(c) if c.is_ascii() => c as u8,
        Some(c) => return Err(Failure::Usage(format!("--delimiter `{c}` is not ASCII"))),
        None if a.input.extension().is_some_and(|e| e == "tsv") => b'\t',
        None => b',',
    };
    let file = std::fs::File::open(&a.input).map_err(|e| {
        Failure::Input(format!("{}: {e}", a.input.display()))
    })?;
    let records = stats::read_ratings(file, delimiter).map_err(at(&a.input))?;
    let table = stats::score_table(&records).map_err(at(&a.input))?;

    let mut blocks: Vec<Option<&str>> = records.iter().map(|r| r.block.as_deref()).collect();
    blocks.sort();
    blocks.dedup();
    let mut text = table.render();
    let mut analyses = Vec::new();
    for block in blocks {
        let in_block: Vec<&stats::RatingRecord> =
            records.iter().filter(|r| r.block.as_deref() == block).collect();
        for scale in SCALES {
            let mut items: Vec<&str> = in_block
                .iter()
                .map(|r| r.item.as_str())
                .filter(|i| stats::scale_of(i) == scale)
                .collect();
            items.sort();
            items.dedup();
            if items.is_empty() {
                continue;
            }
            let labels: Vec<String> = Level::ALL
                .iter()
                .filter(|l| in_block.iter().any(|r| r.condition == **l && items.contains(&r.item.as_str())))
                .map(|l| l.to_string())
                .collect();
            if labels.len() < 2 {
                continue;
            }
            let (_, matrix) = stats::condition_matrix(&records, block, &items).map_err(at(&a.input))?;
            let result = stats::rm_anova(&matrix).map_err(at(&a.input))?;
            let _ = write!(text, "\n{:?}", scale);
            if let Some(b) = block {
                let _ = write!(text, " [{b}]");
            }
            let _ = writeln!(text, " ({}), n = {}", items.join(", "), result.n);
            text.push_str(&result.render(&labels));
            analyses.push(serde_json::json!({
                "block": block,
                "scale": scale,
                "items": items,
                "conditions": labels,
                "result": result,
            }));
        }
    }
    if a.format == Format::Json {
        text = serde_json::to_string_pretty(&serde_json::json!({
            "scores": table,
            "anova": analyses,
        }))
        .expect("stats serialize")
            + "\n";
    }
    emit(ctx, &text, &[&a.input])
}
