//! Corpus generation: dataset presets, prompt assembly, the remote chat
//! generator and the offline synthesizer.

pub mod offline;
pub mod prompt;
pub mod remote;

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::SynthError;
use crate::featurize::{Corpus, CorpusMeta, Gender, LabeledSample, Level, Trait};
use crate::lexicon::BehaviorLexicon;

pub use offline::{CompiledProfile, FeatureRef, SynthProfile};
pub use prompt::{build_prompt, build_user_message, PromptSpec};
pub use remote::{generate_remote, ChatBackend, EndpointConfig, HttpChatClient};

pub const OFFLINE_PROVENANCE: &str = "offline-synth";

/// The two communication intents of the park-exit scenario.
pub const DEFAULT_INTENTS: [&str; 2] = ["take the indicated route", "take a safer detour"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    NeutralAbility,
    NeutralBenevolence,
    GenderAbility,
    GenderBenevolence,
    Control,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::NeutralAbility,
        Preset::NeutralBenevolence,
        Preset::GenderAbility,
        Preset::GenderBenevolence,
        Preset::Control,
    ];

    pub fn size(self) -> usize {
        match self {
            Preset::NeutralAbility | Preset::NeutralBenevolence | Preset::Control => 2000,
            Preset::GenderAbility | Preset::GenderBenevolence => 4000,
        }
    }

    pub fn trait_(self) -> Trait {
        match self {
            Preset::NeutralAbility | Preset::GenderAbility => Trait::Ability,
            Preset::NeutralBenevolence | Preset::GenderBenevolence => Trait::Benevolence,
            Preset::Control => Trait::None,
        }
    }

    pub fn gendered(self) -> bool {
        matches!(self, Preset::GenderAbility | Preset::GenderBenevolence)
    }

    fn slug(self) -> &'static str {
        match self {
            Preset::NeutralAbility => "na",
            Preset::NeutralBenevolence => "nb",
            Preset::GenderAbility => "ga",
            Preset::GenderBenevolence => "gb",
            Preset::Control => "ctl",
        }
    }

    /// Stratification cells; turn `i` belongs to cell `i % cells.len()`.
    pub fn cells(self) -> Vec<(Option<Level>, Option<Gender>)> {
        let levels: Vec<Option<Level>> = if self.trait_() == Trait::None {
            vec![None]
        } else {
            Level::ALL.iter().copied().map(Some).collect()
        };
        let genders: Vec<Option<Gender>> = if self.gendered() {
            Gender::ALL.iter().copied().map(Some).collect()
        } else {
            vec![None]
        };
        levels
            .iter()
            .flat_map(|&l| genders.iter().map(move |&g| (l, g)))
            .collect()
    }

    pub fn turn_id(self, index: usize) -> String {
        format!("{}-{index:05}", self.slug())
    }

    /// Prompt spec for every turn, in turn order. Intents rotate once per
    /// full pass over the cells.
    pub fn plan(self, size: usize, intents: &[String]) -> Vec<PromptSpec> {
        let cells = self.cells();
        (0..size)
            .map(|i| {
                let (level, gender) = cells[i % cells.len()];
                let intent = &intents[(i / cells.len()) % intents.len()];
                PromptSpec::new(self.trait_(), level, gender, intent)
            })
            .collect()
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_alphanumeric())
            .collect::<String>()
            .to_lowercase();
        Preset::ALL
            .into_iter()
            .find(|p| p.to_string().to_lowercase() == key || p.slug() == key)
            .ok_or_else(|| format!("unknown preset `{s}`"))
    }
}

/// Source of raw turn strings.
pub trait TurnGenerator: Sync {
    fn generate(&self, turn_index: usize, spec: &PromptSpec) -> Result<String, SynthError>;
    fn provenance(&self) -> String;
}

pub struct OfflineGenerator {
    profile: CompiledProfile,
}

impl OfflineGenerator {
    pub fn new(profile: CompiledProfile) -> Self {
        OfflineGenerator { profile }
    }

    pub fn for_preset(preset: Preset, seed: u64, lex: &BehaviorLexicon) -> Self {
        let profile = SynthProfile::for_trait(preset.trait_(), seed)
            .compile(lex)
            .expect("built-in profiles are valid");
        OfflineGenerator { profile }
    }

    pub fn profile(&self) -> &CompiledProfile {
        &self.profile
    }
}

impl TurnGenerator for OfflineGenerator {
    fn generate(&self, turn_index: usize, spec: &PromptSpec) -> Result<String, SynthError> {
        self.profile.generate(spec, turn_index as u64)
    }

    fn provenance(&self) -> String {
        OFFLINE_PROVENANCE.into()
    }
}

pub struct RemoteGenerator<'a> {
    backend: &'a dyn ChatBackend,
    lexicon: &'a BehaviorLexicon,
}

impl<'a> RemoteGenerator<'a> {
    pub fn new(backend: &'a dyn ChatBackend, lexicon: &'a BehaviorLexicon) -> Self {
        RemoteGenerator { backend, lexicon }
    }
}

impl TurnGenerator for RemoteGenerator<'_> {
    fn generate(&self, _turn_index: usize, spec: &PromptSpec) -> Result<String, SynthError> {
        generate_remote(spec, self.lexicon, self.backend)
    }

    fn provenance(&self) -> String {
        self.backend.model_name().to_string()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetOptions {
    pub intents: Vec<String>,
    /// Overrides the preset size.
    pub size: Option<usize>,
    /// Concurrent generation requests.
    pub parallelism: usize,
    pub created_unix: u64,
    /// Partial corpus written after every chunk so an interrupted run can
    /// resume.
    pub checkpoint: Option<PathBuf>,
    pub chunk_size: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            intents: DEFAULT_INTENTS.iter().map(|s| s.to_string()).collect(),
            size: None,
            parallelism: 4,
            created_unix: 0,
            checkpoint: None,
            chunk_size: 200,
        }
    }
}

/// Builds a preset corpus. Turns already present in `resume` (matched by
/// turn id) are kept; output order is by turn index regardless of
/// completion order.
pub fn generate_dataset(
    preset: Preset,
    generator: &dyn TurnGenerator,
    lex: &BehaviorLexicon,
    opts: &DatasetOptions,
    resume: Option<Corpus>,
) -> Result<Corpus, SynthError> {
    let size = opts.size.unwrap_or(preset.size());
    let intents = if opts.intents.is_empty() {
        DEFAULT_INTENTS.iter().map(|s| s.to_string()).collect()
    } else {
        opts.intents.clone()
    };
    let plan = preset.plan(size, &intents);

    let meta = CorpusMeta {
        trait_: preset.trait_(),
        gendered: preset.gendered(),
        provenance: generator.provenance(),
        created_unix: opts.created_unix,
        preset: Some(preset.to_string()),
    };
    let mut done: Vec<Option<LabeledSample>> = vec![None; size];
    if let Some(prev) = resume {
        let index: HashMap<String, usize> = (0..size).map(|i| (preset.turn_id(i), i)).collect();
        for s in prev.samples {
            if let Some(&i) = index.get(&s.turn_id) {
                done[i] = Some(s);
            }
        }
    }
    let pending: Vec<usize> = (0..size).filter(|&i| done[i].is_none()).collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallelism.max(1))
        .build()
        .map_err(|e| SynthError::Transport {
            attempts: 0,
            message: e.to_string(),
        })?;
    let mut failures = Vec::new();
    for chunk in pending.chunks(opts.chunk_size.max(1)) {
        let results: Vec<(usize, Result<LabeledSample, String>)> = pool.install(|| {
            chunk
                .par_iter()
                .map(|&i| {
                    let spec = &plan[i];
                    let r = generator
                        .generate(i, spec)
                        .map_err(|e| e.to_string())
                        .and_then(|raw| {
                            LabeledSample::new(
                                preset.turn_id(i),
                                spec.trait_,
                                spec.level,
                                spec.gender,
                                raw,
                                lex,
                            )
                            .map_err(|e| format!("unparsable turn: {e}"))
                        });
                    (i, r)
                })
                .collect()
        });
        for (i, r) in results {
            match r {
                Ok(s) => done[i] = Some(s),
                Err(e) => failures.push((i, e)),
            }
        }
        if let Some(path) = &opts.checkpoint {
            let mut partial = Corpus::new(meta.clone(), lex);
            partial.samples = done.iter().flatten().cloned().collect();
            partial.save(path)?;
        }
    }
    if !failures.is_empty() {
        return Err(SynthError::Turns(failures));
    }
    let mut corpus = Corpus::new(meta, lex);
    corpus.samples = done.into_iter().map(|s| s.expect("all turns generated")).collect();
    Ok(corpus)
}
