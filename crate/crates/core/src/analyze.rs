//! Corpus-level analyses: applying a trained classifier to another corpus
//! and tag co-occurrence.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::AnalyzeError;
use crate::featurize::{Corpus, Gender, Level};
use crate::forest::{Forest, Target};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    pub stratum: String,
    pub n: usize,
    pub counts: Vec<usize>,
    pub percentages: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossApplyReport {
    pub classifier: String,
    pub corpus: String,
    pub labels: Vec<String>,
    pub total: usize,
    pub counts: Vec<usize>,
    pub percentages: Vec<f64>,
    /// Field the strata come from (`level` or `gender`), if any.
    pub stratum_field: Option<String>,
    pub strata: Vec<StratumRow>,
}

fn percent(counts: &[usize], n: usize) -> Vec<f64> {
    counts.iter().map(|&c| 100.0 * c as f64 / n as f64).collect()
}

/// Classifies every sample of `corpus`. When the corpus carries the label
/// the classifier does not predict, results are broken down by it.
pub fn cross_apply(
    forest: &Forest,
    corpus: &Corpus,
    classifier: &str,
    corpus_name: &str,
) -> Result<CrossApplyReport, AnalyzeError> {
    if forest.vocabulary != corpus.vocabulary {
        return Err(AnalyzeError::VocabularyMismatch {
            model: forest.vocabulary.clone(),
            corpus: corpus.vocabulary.clone(),
        });
    }
    if corpus.is_empty() {
        return Err(AnalyzeError::EmptyCorpus);
    }
    let k = forest.n_classes();
    let xs: Vec<&[u32]> = corpus.samples.iter().map(|s| s.features.counts()).collect();
    let preds = forest.predict_batch(&xs);

    let mut counts = vec![0; k];
    for p in &preds {
        counts[p.label] += 1;
    }

    let strata_of = |field: &str, names: Vec<String>, keys: Vec<Option<usize>>| {
        let mut rows: Vec<StratumRow> = names
            .into_iter()
            .map(|stratum| StratumRow {
                stratum,
                n: 0,
                counts: vec![0; k],
                percentages: vec![0.0; k],
            })
            .collect();
        for (key, p) in keys.iter().zip(&preds) {
            if let Some(i) = key {
                rows[*i].n += 1;
                rows[*i].counts[p.label] += 1;
            }
        }
        rows.retain(|r| r.n > 0);
        for r in &mut rows {
            r.percentages = percent(&r.counts, r.n);
        }
        (Some(field.to_string()), rows)
    };
    let has_level = corpus.samples.iter().any(|s| s.level.is_some());
    let has_gender = corpus.samples.iter().any(|s| s.gender.is_some());
    let (stratum_field, strata) = match forest.target {
        Some(Target::Gender) if has_level => strata_of(
            "level",
            Level::ALL.iter().map(|l| l.to_string()).collect(),
            corpus.samples.iter().map(|s| s.level.map(|l| l as usize)).collect(),
        ),
        Some(Target::Level) if has_gender => strata_of(
            "gender",
            Gender::ALL.iter().map(|g| g.to_string()).collect(),
            corpus.samples.iter().map(|s| s.gender.map(|g| g as usize)).collect(),
        ),
        _ => (None, Vec::new()),
    };

    Ok(CrossApplyReport {
        classifier: classifier.to_string(),
        corpus: corpus_name.to_string(),
        labels: forest.labels.clone(),
        total: preds.len(),
        percentages: percent(&counts, preds.len()),
        counts,
        stratum_field,
        strata,
    })
}

impl CrossApplyReport {
    pub fn render(&self) -> String {
        let mut out = format!(
            "{} applied to {} ({} samples)\n",
            self.classifier, self.corpus, self.total
        );
        for (l, (p, c)) in self.labels.iter().zip(self.percentages.iter().zip(&self.counts)) {
            let _ = writeln!(out, "  {p:6.2}% classified as {l} ({c})");
        }
        if let Some(field) = &self.stratum_field {
            let _ = writeln!(out, "by {field}:");
            for r in &self.strata {
                let shares: Vec<String> = self
                    .labels
                    .iter()
                    .zip(&r.percentages)
                    .map(|(l, p)| format!("{p:.2}% {l}"))
                    .collect();
                let _ = writeln!(out, "  {:<8} n={:<5} {}", r.stratum, r.n, shares.join(", "));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStat {
    pub a: usize,
    pub b: usize,
    pub name_a: String,
    pub name_b: String,
    pub joint: usize,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceReport {
    pub n: usize,
    pub min_count: usize,
    pub names: Vec<String>,
    /// Samples in which each feature is present.
    pub presence: Vec<usize>,
    /// Symmetric joint-presence counts.
    pub joint: Vec<Vec<usize>>,
    /// Symmetric phi matrix; `None` where a feature is always or never present.
    pub phi: Vec<Vec<Option<f64>>>,
    /// Off-diagonal pairs with `joint >= min_count`, by phi descending.
    pub ranked: Vec<PairStat>,
}

/// Phi coefficient of a 2x2 table given joint and marginal presence counts.
pub fn phi_coefficient(n: usize, both: usize, a: usize, b: usize) -> Option<f64> {
    let (n, both, a, b) = (n as f64, both as f64, a as f64, b as f64);
    let denom = a * (n - a) * b * (n - b);
    (denom > 0.0).then(|| (both * n - a * b) / denom.sqrt())
}

pub fn cooccurrence(
    vectors: &[&[u32]],
    names: &[String],
    min_count: usize,
) -> Result<CooccurrenceReport, AnalyzeError> {
    if vectors.is_empty() {
        return Err(AnalyzeError::EmptyCorpus);
    }
    let d = names.len();
    let n = vectors.len();
    let mut joint = vec![vec![0usize; d]; d];
    for v in vectors {
        let present: Vec<usize> = (0..d).filter(|&j| v[j] > 0).collect();
        for (x, &i) in present.iter().enumerate() {
            for &j in &present[x..] {
                joint[i][j] += 1;
            }
        }
    }
    for i in 1..d {
        let (upper, lower) = joint.split_at_mut(i);
        for (j, row) in upper.iter().enumerate() {
            lower[0][j] = row[i];
        }
    }
    let presence: Vec<usize> = (0..d).map(|i| joint[i][i]).collect();
    let phi: Vec<Vec<Option<f64>>> = (0..d)
        .into_par_iter()
        .map(|i| {
            (0..d)
                .map(|j| phi_coefficient(n, joint[i][j], presence[i], presence[j]))
                .collect()
        })
        .collect();
    let mut ranked: Vec<PairStat> = Vec::new();
    for i in 0..d {
        for j in i + 1..d {
            if joint[i][j] < min_count {
                continue;
            }
            if let Some(p) = phi[i][j] {
                ranked.push(PairStat {
                    a: i,
                    b: j,
                    name_a: names[i].clone(),
                    name_b: names[j].clone(),
                    joint: joint[i][j],
                    phi: p,
                });
            }
        }
    }
    ranked.sort_by(|x, y| y.phi.total_cmp(&x.phi).then((x.a, x.b).cmp(&(y.a, y.b))));
    Ok(CooccurrenceReport {
        n,
        min_count,
        names: names.to_vec(),
        presence,
        joint,
        phi,
        ranked,
    })
}

pub fn corpus_cooccurrence(
    corpus: &Corpus,
    names: &[String],
    min_count: usize,
) -> Result<CooccurrenceReport, AnalyzeError> {
    let xs: Vec<&[u32]> = corpus.samples.iter().map(|s| s.features.counts()).collect();
    cooccurrence(&xs, names, min_count)
}

impl CooccurrenceReport {
    pub fn render(&self, top: usize) -> String {
        let mut out = format!(
            "co-occurrence over {} samples (pairs with >= {} joint occurrences)\n",
            self.n, self.min_count
        );
        let _ = writeln!(out, "{:>4}  {:<28} {:<28} {:>6} {:>8}", "rank", "a", "b", "joint", "phi");
        for (r, p) in self.ranked.iter().take(top).enumerate() {
            let _ = writeln!(
                out,
                "{:>4}  {:<28} {:<28} {:>6} {:>8.4}",
                r + 1,
                p.name_a,
                p.name_b,
                p.joint,
                p.phi
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::{CorpusMeta, LabeledSample, Trait};
    use crate::forest::{Node, Tree};
    use crate::lexicon::BehaviorLexicon;

    fn names(d: usize) -> Vec<String> {
        (0..d).map(|i| format!("f{i}")).collect()
    }

    #[test]
    fn phi_values() {
        assert_eq!(phi_coefficient(10, 4, 4, 4), Some(1.0));
        assert_eq!(phi_coefficient(10, 0, 5, 5), Some(-1.0));
        assert_eq!(phi_coefficient(4, 1, 2, 2), Some(0.0));
        assert_eq!(phi_coefficient(10, 0, 0, 3), None);
        assert_eq!(phi_coefficient(10, 3, 10, 3), None);
    }

    #[test]
    fn engineered_pair_ranks_first() {
        let rows: Vec<Vec<u32>> = (0..40u32)
            .map(|i| {
                let ab = u32::from(i % 3 == 0);
                vec![ab, ab * 2, i % 2, u32::from(i % 5 == 0)]
            })
            .collect();
        let xs: Vec<&[u32]> = rows.iter().map(Vec::as_slice).collect();
        let r = cooccurrence(&xs, &names(4), 1).unwrap();
        assert_eq!((r.ranked[0].a, r.ranked[0].b), (0, 1));
        assert_eq!(r.ranked[0].phi, 1.0);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(r.phi[i][j], r.phi[j][i]);
                assert_eq!(r.joint[i][j], r.joint[j][i]);
                if let Some(p) = r.phi[i][j] {
                    assert!(p.abs() <= 1.0 + 1e-12);
                }
            }
        }
        assert!(r.ranked.iter().all(|p| p.a < p.b));
        let strict = cooccurrence(&xs, &names(4), 14).unwrap();
        assert!(strict.ranked.iter().all(|p| p.joint >= 14));
        assert!(matches!(cooccurrence(&[], &names(4), 1), Err(AnalyzeError::EmptyCorpus)));
    }

    fn corpus_with(levels: &[Level]) -> Corpus {
        let lex = BehaviorLexicon::builtin();
        let meta = CorpusMeta {
            trait_: Trait::Ability,
            gendered: false,
            provenance: "test".into(),
            created_unix: 0,
            preset: None,
        };
        let mut c = Corpus::new(meta, lex);
        for (i, l) in levels.iter().enumerate() {
            let raw = if i % 2 == 0 { "{f: happy} Go." } else { "Go." };
            c.samples.push(
                LabeledSample::new(format!("t{i}"), Trait::Ability, Some(*l), None, raw, lex).unwrap(),
            );
        }
        c
    }

    fn happy_forest(vocabulary: &str) -> Forest {
        let lex = BehaviorLexicon::builtin();
        let happy = lex.feature_index(crate::Channel::Facial, "happy").unwrap();
        let tree = Tree {
            nodes: vec![
                Node::Split {
                    feature: happy,
                    threshold: 0.5,
                    left: 1,
                    right: 2,
                    cover: 2.0,
                },
                Node::Leaf { counts: vec![1.0, 0.0] },
                Node::Leaf { counts: vec![0.0, 1.0] },
            ],
        };
        let mut f = Forest::from_trees(
            Gender::ALL.iter().map(|g| g.to_string()).collect(),
            crate::FEATURE_DIM,
            vec![tree],
        );
        f.target = Some(Target::Gender);
        f.vocabulary = vocabulary.to_string();
        f
    }

    #[test]
    fn cross_apply_distribution_and_strata() {
        let c = corpus_with(&[Level::Low, Level::Low, Level::High, Level::High, Level::High]);
        let f = happy_forest(&c.vocabulary);
        let r = cross_apply(&f, &c, "gender", "neutral").unwrap();
        assert_eq!(r.total, 5);
        assert_eq!(r.counts, vec![2, 3]);
        assert!((r.percentages.iter().sum::<f64>() - 100.0).abs() < 1e-9);
        assert_eq!(r.stratum_field.as_deref(), Some("level"));
        assert_eq!(r.strata.len(), 2);
        assert_eq!(r.strata.iter().map(|s| s.n).sum::<usize>(), 5);
        assert_eq!(r.strata[1].counts, vec![1, 2]);
        assert!(r.render().contains("60.00% classified as Female"));
    }

    #[test]
    fn cross_apply_rejects_other_vocabulary() {
        let c = corpus_with(&[Level::Low]);
        let f = happy_forest("deadbeef");
        assert!(matches!(
            cross_apply(&f, &c, "g", "c"),
            Err(AnalyzeError::VocabularyMismatch { .. })
        ));
    }
}
