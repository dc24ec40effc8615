//! Deterministic offline turn synthesizer.
//!
//! Each class (trait level, optionally crossed with gender) owns a
//! categorical distribution over the feature vocabulary. A class's
//! distribution puts mass on its own signature features and on shared
//! background features, and none on any other class's signatures, so the
//! generating class is recoverable from the tag counts.

use std::collections::{BTreeSet, HashMap};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::SynthError;
use crate::featurize::{Gender, Level, Trait};
use crate::lexicon::{BehaviorLexicon, Channel, FEATURE_DIM};
use crate::transcript::AugmentedTranscript;

use super::prompt::PromptSpec;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureRef {
    pub channel: Channel,
    pub name: String,
}

impl FeatureRef {
    pub fn new(channel: Channel, name: &str) -> Self {
        FeatureRef {
            channel,
            name: name.to_string(),
        }
    }
}

fn refs(channel: Channel, names: &[&str]) -> Vec<FeatureRef> {
    names.iter().map(|n| FeatureRef::new(channel, n)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelProfile {
    pub level: Level,
    pub signature: Vec<FeatureRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderProfile {
    pub gender: Gender,
    pub signature: Vec<FeatureRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthProfile {
    /// Trait the profile answers for; `None` yields control turns drawn
    /// from `control_mixture` over the level classes.
    #[serde(rename = "trait")]
    pub trait_: Trait,
    pub levels: Vec<LevelProfile>,
    #[serde(default)]
    pub genders: Vec<GenderProfile>,
    #[serde(default)]
    pub control_mixture: Vec<(Level, f64)>,
    /// Inclusive range of tags per turn, drawn uniformly.
    pub min_tags: usize,
    pub max_tags: usize,
    /// Share of a class's probability mass on its level signature.
    pub signature_mass: f64,
    /// Share on the gender signature when the turn is gendered.
    pub gender_mass: f64,
    /// Feature pairs that are always emitted together.
    #[serde(default)]
    pub couplings: Vec<(FeatureRef, FeatureRef)>,
    pub seed: u64,
}

impl SynthProfile {
    /// Ability classes: confident delivery for High, hesitation for Low.
    /// Every level signature has four features.
    pub fn ability(seed: u64) -> Self {
        use Channel::*;
        let levels = vec![
            LevelProfile {
                level: Level::Low,
                signature: [
                    refs(Facial, &["confused"]),
                    refs(Audio, &["pause", "deep inhale", "confused intonation"]),
                ]
                .concat(),
            },
            LevelProfile {
                level: Level::Medium,
                signature: [
                    refs(Facial, &["happy"]),
                    refs(Gesture, &["Pointing", "Talking 3", "Thankful"]),
                ]
                .concat(),
            },
            LevelProfile {
                level: Level::High,
                signature: [
                    refs(Facial, &["confident"]),
                    refs(Audio, &["sharp exhale", "thoughtful"]),
                    refs(Gesture, &["Head Nod Yes"]),
                ]
                .concat(),
            },
        ];
        SynthProfile {
            trait_: Trait::Ability,
            levels,
            genders: default_genders(),
            control_mixture: Vec::new(),
            min_tags: 3,
            max_tags: 7,
            signature_mass: 0.7,
            gender_mass: 0.2,
            couplings: vec![(
                FeatureRef::new(Audio, "hesitant"),
                FeatureRef::new(Audio, "whisper"),
            )],
            seed,
        }
    }

    /// Benevolence classes: concern for High, detachment for Low.
    pub fn benevolence(seed: u64) -> Self {
        use Channel::*;
        let levels = vec![
            LevelProfile {
                level: Level::Low,
                signature: [
                    refs(Facial, &["neutral", "confused"]),
                    refs(Gesture, &["Dismissing Gesture", "Shrugging"]),
                ]
                .concat(),
            },
            LevelProfile {
                level: Level::Medium,
                signature: [
                    refs(Facial, &["happy"]),
                    refs(Gesture, &["Thankful", "Talking 3", "Pointing"]),
                ]
                .concat(),
            },
            LevelProfile {
                level: Level::High,
                signature: [
                    refs(Facial, &["scared"]),
                    refs(Audio, &["sharp exhale", "urgent"]),
                    refs(Gesture, &["Head Nod Yes"]),
                ]
                .concat(),
            },
        ];
        SynthProfile {
            trait_: Trait::Benevolence,
            levels,
            genders: default_genders(),
            control_mixture: Vec::new(),
            min_tags: 3,
            max_tags: 7,
            signature_mass: 0.7,
            gender_mass: 0.2,
            couplings: vec![(
                FeatureRef::new(Audio, "hesitant"),
                FeatureRef::new(Audio, "whisper"),
            )],
            seed,
        }
    }

    /// Control turns: ability classes mixed with a strong lean to High.
    pub fn control(seed: u64) -> Self {
        SynthProfile {
            trait_: Trait::None,
            control_mixture: vec![(Level::Low, 0.02), (Level::Medium, 0.08), (Level::High, 0.9)],
            genders: Vec::new(),
            ..SynthProfile::ability(seed)
        }
    }

    pub fn for_trait(trait_: Trait, seed: u64) -> Self {
        match trait_ {
            Trait::Ability => Self::ability(seed),
            Trait::Benevolence => Self::benevolence(seed),
            Trait::None => Self::control(seed),
        }
    }

    pub fn compile(&self, lex: &BehaviorLexicon) -> Result<CompiledProfile, SynthError> {
        CompiledProfile::new(self.clone(), lex)
    }
}

fn default_genders() -> Vec<GenderProfile> {
    use Channel::*;
    vec![
        GenderProfile {
            gender: Gender::Male,
            signature: [
                refs(Audio, &["clears throat"]),
                refs(Gesture, &["Thoughtful Head Shake", "Salute"]),
            ]
            .concat(),
        },
        GenderProfile {
            gender: Gender::Female,
            signature: [
                refs(Audio, &["excited intonation"]),
                refs(Gesture, &["Thinking", "Waving"]),
            ]
            .concat(),
        },
    ]
}

/// A profile resolved against a lexicon.
#[derive(Debug, Clone)]
pub struct CompiledProfile {
    profile: SynthProfile,
    level_sigs: HashMap<Level, Vec<usize>>,
    gender_sigs: HashMap<Gender, Vec<usize>>,
    background: Vec<usize>,
    couplings: Vec<(usize, usize)>,
    names: Vec<(Channel, String)>,
}

impl CompiledProfile {
    fn new(profile: SynthProfile, lex: &BehaviorLexicon) -> Result<Self, SynthError> {
        let invalid = |msg: String| SynthError::MissingClass(msg);
        let resolve = |r: &FeatureRef| {
            lex.resolve(&r.name, r.channel)
                .ok_or_else(|| invalid(format!("unknown {} feature `{}` in profile", r.channel, r.name)))
        };
        let resolve_all = |rs: &[FeatureRef]| -> Result<Vec<usize>, SynthError> {
            let v: BTreeSet<usize> = rs.iter().map(resolve).collect::<Result<_, _>>()?;
            if v.is_empty() {
                return Err(invalid("empty signature set".into()));
            }
            Ok(v.into_iter().collect())
        };
        if profile.min_tags == 0 || profile.min_tags > profile.max_tags {
            return Err(invalid(format!(
                "bad tag range {}..={}",
                profile.min_tags, profile.max_tags
            )));
        }

        let mut level_sigs = HashMap::new();
        for lp in &profile.levels {
            level_sigs.insert(lp.level, resolve_all(&lp.signature)?);
        }
        let mut gender_sigs = HashMap::new();
        for gp in &profile.genders {
            gender_sigs.insert(gp.gender, resolve_all(&gp.signature)?);
        }
        let mut owner: HashMap<usize, String> = HashMap::new();
        let groups = level_sigs
            .iter()
            .map(|(l, s)| (l.to_string(), s))
            .chain(gender_sigs.iter().map(|(g, s)| (g.to_string(), s)));
        for (label, sig) in groups {
            for &f in sig {
                if let Some(other) = owner.insert(f, label.clone()) {
                    return Err(invalid(format!(
                        "feature {} is a signature of both {other} and {label}",
                        lex.vocabulary().name(f)
                    )));
                }
            }
        }
        let background: Vec<usize> = (0..FEATURE_DIM).filter(|f| !owner.contains_key(f)).collect();
        let mut couplings = Vec::new();
        for (a, b) in &profile.couplings {
            let (a, b) = (resolve(a)?, resolve(b)?);
            if owner.get(&a) != owner.get(&b) {
                return Err(invalid(format!(
                    "coupled features {} and {} belong to different classes",
                    lex.vocabulary().name(a),
                    lex.vocabulary().name(b)
                )));
            }
            couplings.push((a, b));
        }
        if profile.trait_ == Trait::None {
            if profile.control_mixture.is_empty() {
                return Err(invalid("control profile needs a level mixture".into()));
            }
            for (l, w) in &profile.control_mixture {
                if !level_sigs.contains_key(l) || w.is_nan() || *w < 0.0 {
                    return Err(invalid(format!("bad control mixture entry {l}")));
                }
            }
        }
        let names = lex
            .vocabulary()
            .entries()
            .iter()
            .map(|e| (e.channel, e.name.clone()))
            .collect();
        Ok(CompiledProfile {
            profile,
            level_sigs,
            gender_sigs,
            background,
            couplings,
            names,
        })
    }

    pub fn profile(&self) -> &SynthProfile {
        &self.profile
    }

    pub fn level_signature(&self, level: Level) -> Option<&[usize]> {
        self.level_sigs.get(&level).map(Vec::as_slice)
    }

    pub fn gender_signature(&self, gender: Gender) -> Option<&[usize]> {
        self.gender_sigs.get(&gender).map(Vec::as_slice)
    }

    /// Categorical distribution of one class over the vocabulary.
    pub fn distribution(&self, level: Level, gender: Option<Gender>) -> Result<Vec<f64>, SynthError> {
        let level_sig = self
            .level_sigs
            .get(&level)
            .ok_or_else(|| SynthError::MissingClass(level.to_string()))?;
        let mut weights = vec![0.0; FEATURE_DIM];
        let mut spread = |features: &[usize], mass: f64| {
            for &f in features {
                weights[f] += mass / features.len() as f64;
            }
        };
        let mut background_mass = 1.0 - self.profile.signature_mass;
        spread(level_sig, self.profile.signature_mass);
        if let Some(g) = gender {
            let sig = self
                .gender_sigs
                .get(&g)
                .ok_or_else(|| SynthError::MissingClass(format!("{level}/{g}")))?;
            spread(sig, self.profile.gender_mass);
            background_mass -= self.profile.gender_mass;
        }
        spread(&self.background, background_mass);
        Ok(weights)
    }

    fn check_spec(&self, spec: &PromptSpec) -> Result<(), SynthError> {
        if spec.trait_ != self.profile.trait_ {
            return Err(SynthError::MissingClass(spec.class_label()));
        }
        Ok(())
    }

    /// One synthetic turn. Deterministic in (profile seed, turn index, spec).
    pub fn generate(&self, spec: &PromptSpec, turn_index: u64) -> Result<String, SynthError> {
        self.check_spec(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.profile.seed);
        rng.set_stream(turn_index);

        let level = match (spec.trait_, spec.level) {
            (Trait::None, _) => {
                let weights: Vec<f64> = self.profile.control_mixture.iter().map(|(_, w)| *w).collect();
                let pick = WeightedIndex::new(&weights)
                    .map_err(|e| SynthError::MissingClass(format!("control mixture: {e}")))?;
                self.profile.control_mixture[pick.sample(&mut rng)].0
            }
            (_, Some(l)) => l,
            (_, None) => return Err(SynthError::MissingClass(spec.class_label())),
        };
        let weights = self.distribution(level, spec.gender)?;
        let dist = WeightedIndex::new(&weights).expect("weights are positive");

        let n = rng.random_range(self.profile.min_tags..=self.profile.max_tags);
        let mut tags = vec![*self.level_sigs[&level].choose(&mut rng).expect("nonempty")];
        if let Some(g) = spec.gender {
            tags.push(*self.gender_sigs[&g].choose(&mut rng).expect("nonempty"));
        }
        while tags.len() < n {
            tags.push(dist.sample(&mut rng));
        }
        for &(a, b) in &self.couplings {
            match (tags.contains(&a), tags.contains(&b)) {
                (true, false) => tags.push(b),
                (false, true) => tags.push(a),
                _ => {}
            }
        }
        tags.shuffle(&mut rng);

        let text = render_turn(&tags, &self.names, level, &spec.intent, &mut rng);
        debug_assert!(AugmentedTranscript::parse(&text).is_ok());
        Ok(text)
    }
}

const ROUTE: &[&str] = &[
    "Go left and follow the exit sign.",
    "The exit sign points to the fastest way out.",
    "Head straight for the sign.",
    "That path should get you out quickly.",
    "Follow the marked route.",
];
const DETOUR: &[&str] = &[
    "Take the detour on the right.",
    "The side path is the safer choice.",
    "Skip the main path, it may hide traps.",
    "Go around through the trees.",
    "The detour is longer but it is safe.",
];
const OPENERS_LOW: &[&str] = &["Uh...", "Hmm, I think...", "Maybe...", "Well... I'm not sure."];
const OPENERS_MEDIUM: &[&str] = &["Okay.", "Alright,", "So,"];
const OPENERS_HIGH: &[&str] = &["Yes.", "Listen.", "Trust me.", "Right, NOW."];
const CLOSERS_LOW: &[&str] = &["I guess...", "If that helps?"];
const CLOSERS_MEDIUM: &[&str] = &["Let's move.", "See you there."];
const CLOSERS_HIGH: &[&str] = &["Go NOW!", "You've got this."];

fn render_turn(
    tags: &[usize],
    names: &[(Channel, String)],
    level: Level,
    intent: &str,
    rng: &mut ChaCha8Rng,
) -> String {
    let bank = if intent.to_lowercase().contains("detour") {
        DETOUR
    } else {
        ROUTE
    };
    let (openers, closers) = match level {
        Level::Low => (OPENERS_LOW, CLOSERS_LOW),
        Level::Medium => (OPENERS_MEDIUM, CLOSERS_MEDIUM),
        Level::High => (OPENERS_HIGH, CLOSERS_HIGH),
    };
    let mut chunks: Vec<&str> = vec![openers.choose(rng).expect("nonempty")];
    let sentences = rng.random_range(1..=2);
    chunks.extend(bank.choose_multiple(rng, sentences).copied());
    if rng.random_bool(0.5) {
        chunks.push(closers.choose(rng).expect("nonempty"));
    }

    let mut slots: Vec<Vec<usize>> = vec![Vec::new(); chunks.len()];
    for &t in tags {
        slots[rng.random_range(0..chunks.len())].push(t);
    }

    let mut out = String::new();
    for (chunk, slot) in chunks.iter().zip(&slots) {
        for &t in slot {
            if !out.is_empty() && !out.ends_with(' ') {
                out.push(' ');
            }
            let (channel, name) = &names[t];
            match channel {
                Channel::Facial => out.push_str(&format!("{{f: {name}}}")),
                Channel::Gesture => out.push_str(&format!("{{g: {name}}}")),
                Channel::Audio => out.push_str(&format!("[{name}]")),
            }
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(chunk);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::featurize;

    fn lex() -> &'static BehaviorLexicon {
        BehaviorLexicon::builtin()
    }

    fn spec(level: Level, gender: Option<Gender>) -> PromptSpec {
        PromptSpec::new(Trait::Ability, Some(level), gender, "take a safer detour")
    }

    #[test]
    fn distributions_sum_to_one() {
        for p in [SynthProfile::ability(0), SynthProfile::benevolence(0)] {
            let c = p.compile(lex()).unwrap();
            for level in Level::ALL {
                for gender in [None, Some(Gender::Male), Some(Gender::Female)] {
                    let d = c.distribution(*level, gender).unwrap();
                    let s: f64 = d.iter().sum();
                    assert!((s - 1.0).abs() < 1e-12, "{s}");
                    assert!(d.iter().all(|&w| w >= 0.0));
                }
            }
        }
    }

    #[test]
    fn signatures_are_disjoint_and_exclusive() {
        let c = SynthProfile::ability(0).compile(lex()).unwrap();
        let high = c.distribution(Level::High, None).unwrap();
        for &f in c.level_signature(Level::Low).unwrap() {
            assert_eq!(high[f], 0.0);
        }
    }

    #[test]
    fn high_turn_hits_a_signature() {
        let c = SynthProfile::ability(0).compile(lex()).unwrap();
        let raw = c.generate(&spec(Level::High, None), 0).unwrap();
        let t = AugmentedTranscript::parse(&raw).unwrap();
        let f = featurize(&t, lex());
        assert!(f.unknown.is_empty());
        let confident = lex().feature_index(Channel::Facial, "confident").unwrap();
        let nod = lex().feature_index(Channel::Gesture, "Head Nod Yes").unwrap();
        let sig = c.level_signature(Level::High).unwrap();
        assert!(sig.contains(&confident) && sig.contains(&nod));
        assert!(sig.iter().any(|&i| f.vector.get(i) > 0), "{raw}");
    }

    #[test]
    fn deterministic_per_seed_and_index() {
        let c = SynthProfile::ability(0).compile(lex()).unwrap();
        let s = spec(Level::Low, Some(Gender::Female));
        assert_eq!(c.generate(&s, 5).unwrap(), c.generate(&s, 5).unwrap());
        let other = SynthProfile::ability(1).compile(lex()).unwrap();
        let differs = (0..10).any(|i| c.generate(&s, i).unwrap() != other.generate(&s, i).unwrap());
        assert!(differs);
    }

    #[test]
    fn coupled_pair_always_together() {
        let c = SynthProfile::ability(3).compile(lex()).unwrap();
        let hes = lex().feature_index(Channel::Audio, "hesitant").unwrap();
        let wh = lex().feature_index(Channel::Audio, "whisper").unwrap();
        for i in 0..300 {
            let raw = c.generate(&spec(Level::Low, None), i).unwrap();
            let f = featurize(&AugmentedTranscript::parse(&raw).unwrap(), lex()).vector;
            assert_eq!(f.get(hes) > 0, f.get(wh) > 0, "{raw}");
        }
    }

    #[test]
    fn missing_class_and_bad_profiles() {
        let c = SynthProfile::ability(0).compile(lex()).unwrap();
        let ben = PromptSpec::new(Trait::Benevolence, Some(Level::Low), None, "x");
        assert!(matches!(c.generate(&ben, 0), Err(SynthError::MissingClass(_))));

        let mut p = SynthProfile::ability(0);
        p.levels.retain(|l| l.level != Level::Medium);
        let c = p.compile(lex()).unwrap();
        assert!(matches!(
            c.generate(&spec(Level::Medium, None), 0),
            Err(SynthError::MissingClass(_))
        ));

        let mut p = SynthProfile::ability(0);
        p.levels[0].signature.push(FeatureRef::new(Channel::Facial, "confident"));
        assert!(p.compile(lex()).is_err());

        let mut p = SynthProfile::ability(0);
        p.couplings.push((
            FeatureRef::new(Channel::Facial, "scared"),
            FeatureRef::new(Channel::Facial, "confident"),
        ));
        assert!(p.compile(lex()).is_err());
    }

    #[test]
    fn control_turns_generate() {
        let c = SynthProfile::control(0).compile(lex()).unwrap();
        let s = PromptSpec::new(Trait::None, None, None, "take the indicated route");
        for i in 0..20 {
            let raw = c.generate(&s, i).unwrap();
            assert!(AugmentedTranscript::parse(&raw).is_ok());
        }
    }
}
