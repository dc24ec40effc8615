//! Likert scoring, repeated-measures ANOVA with Mauchly's test, and
//! Bonferroni-corrected paired comparisons.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::StatsError;
use crate::featurize::Level;

pub mod dist {
    //! Distribution tails from the log-gamma function and the regularized
    //! incomplete beta and gamma functions.

    const LANCZOS_G: f64 = 7.0;
    const LANCZOS: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];

    pub fn ln_gamma(x: f64) -> f64 {
        if x < 0.5 {
            let pi = std::f64::consts::PI;
            return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
        }
        let x = x - 1.0;
        let mut a = LANCZOS[0];
        let t = x + LANCZOS_G + 0.5;
        for (i, c) in LANCZOS.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }

    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;
    const MAX_ITER: usize = 10_000;

    fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
        let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
        let mut c = 1.0;
        let mut d = 1.0 - qab * x / qap;
        if d.abs() < TINY {
            d = TINY;
        }
        d = 1.0 / d;
        let mut h = d;
        for m in 1..=MAX_ITER {
            let m = m as f64;
            let m2 = 2.0 * m;
            let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
            d = 1.0 + aa * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + aa / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
            let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
            d = 1.0 + aa * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + aa / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < EPS {
                break;
            }
        }
        h
    }

    /// Regularized incomplete beta `I_x(a, b)`.
    pub fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
        let front = ln_front.exp();
        if x < (a + 1.0) / (a + b + 2.0) {
            front * beta_cf(a, b, x) / a
        } else {
            1.0 - front * beta_cf(b, a, 1.0 - x) / b
        }
    }

    /// Regularized upper incomplete gamma `Q(a, x)`.
    pub fn gamma_q(a: f64, x: f64) -> f64 {
        if x <= 0.0 {
            return 1.0;
        }
        let ln_front = -x + a * x.ln() - ln_gamma(a);
        if x < a + 1.0 {
            let mut sum = 1.0 / a;
            let mut del = sum;
            let mut ap = a;
            for _ in 0..MAX_ITER {
                ap += 1.0;
                del *= x / ap;
                sum += del;
                if del.abs() < sum.abs() * EPS {
                    break;
                }
            }
            1.0 - sum * ln_front.exp()
        } else {
            let mut b = x + 1.0 - a;
            let mut c = 1.0 / TINY;
            let mut d = 1.0 / b;
            let mut h = d;
            for i in 1..=MAX_ITER {
                let an = -(i as f64) * (i as f64 - a);
                b += 2.0;
                d = an * d + b;
                if d.abs() < TINY {
                    d = TINY;
                }
                c = b + an / c;
                if c.abs() < TINY {
                    c = TINY;
                }
                d = 1.0 / d;
                let del = d * c;
                h *= del;
                if (del - 1.0).abs() < EPS {
                    break;
                }
            }
            ln_front.exp() * h
        }
    }

    /// `P(F > f)` for an F distribution with `(d1, d2)` degrees of freedom.
    pub fn f_sf(f: f64, d1: f64, d2: f64) -> f64 {
        if f <= 0.0 {
            return 1.0;
        }
        beta_inc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))
    }

    /// `P(X > x)` for a chi-square distribution with `k` degrees of freedom.
    pub fn chi2_sf(x: f64, k: f64) -> f64 {
        gamma_q(k / 2.0, x / 2.0)
    }

    /// Two-sided p-value of Student's t.
    pub fn t_two_sided(t: f64, df: f64) -> f64 {
        beta_inc(df / 2.0, 0.5, df / (df + t * t))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub participant: String,
    /// Instructed trait of the rated stimulus, when the study has blocks.
    #[serde(default)]
    pub block: Option<String>,
    pub condition: Level,
    pub item: String,
    pub response: i8,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    participant: String,
    condition: String,
    item: String,
    response: String,
    #[serde(default)]
    block: Option<String>,
}

/// Reads a header-led delimited file with columns `participant, condition,
/// item, response` and an optional `block`.
pub fn read_ratings<R: Read>(reader: R, delimiter: u8) -> Result<Vec<RatingRecord>, StatsError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in rdr.deserialize::<RawRecord>().enumerate() {
        let line = i + 2;
        let raw = row.map_err(|e| StatsError::Record {
            line,
            message: e.to_string(),
        })?;
        let bad = |message: String| StatsError::Record { line, message };
        let condition: Level = raw
            .condition
            .parse()
            .map_err(|_| bad(format!("unknown condition `{}`", raw.condition)))?;
        let response: i8 = raw
            .response
            .parse()
            .map_err(|_| bad(format!("response `{}` is not an integer", raw.response)))?;
        if !(-2..=2).contains(&response) {
            return Err(bad(format!("response {response} outside [-2, 2]")));
        }
        let block = raw.block.filter(|b| !b.is_empty());
        let key = (raw.participant.clone(), block.clone(), condition, raw.item.clone());
        if !seen.insert(key) {
            return Err(bad(format!(
                "duplicate rating for participant {}, condition {condition}, item {}",
                raw.participant, raw.item
            )));
        }
        out.push(RatingRecord {
            participant: raw.participant,
            block,
            condition,
            item: raw.item,
            response,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scale {
    Ability,
    Benevolence,
    Trust,
    HumanLikeness,
    Other,
}

/// Questionnaire items and the scale each belongs to.
pub const ITEMS: &[(&str, Scale)] = &[
    ("ability_knowledge", Scale::Ability),
    ("ability_capable", Scale::Ability),
    ("benevolence_help", Scale::Benevolence),
    ("benevolence_needs", Scale::Benevolence),
    ("trust_follow", Scale::Trust),
    ("human_behavior", Scale::HumanLikeness),
];

pub fn scale_of(item: &str) -> Scale {
    ITEMS
        .iter()
        .find(|(id, _)| *id == item)
        .map_or(Scale::Other, |(_, s)| *s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub label: String,
    /// True for scale means computed from item rows.
    pub aggregate: bool,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    /// `(block, condition)` per column.
    pub columns: Vec<(Option<String>, Level)>,
    pub rows: Vec<ScoreRow>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean response per item and column, plus scale means for the ability and
/// benevolence items.
pub fn score_table(records: &[RatingRecord]) -> Result<ScoreTable, StatsError> {
    let blocks: BTreeSet<Option<String>> = records.iter().map(|r| r.block.clone()).collect();
    let mut columns = Vec::new();
    for b in &blocks {
        for &l in Level::ALL.iter() {
            if records.iter().any(|r| &r.block == b && r.condition == l) {
                columns.push((b.clone(), l));
            }
        }
    }
    let mut items: Vec<&str> = records.iter().map(|r| r.item.as_str()).collect();
    items.sort_by_key(|i| {
        let pos = ITEMS.iter().position(|(id, _)| id == i).unwrap_or(ITEMS.len());
        (scale_of(i), pos, i.to_string())
    });
    items.dedup();

    let mut cells: BTreeMap<(&str, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        let col = columns
            .iter()
            .position(|(b, l)| b == &r.block && *l == r.condition)
            .expect("column exists");
        cells.entry((r.item.as_str(), col)).or_default().push(r.response as f64);
    }
    let item_row = |item: &str| -> Result<Vec<f64>, StatsError> {
        (0..columns.len())
            .map(|c| {
                cells.get(&(item, c)).map(|v| mean(v)).ok_or_else(|| {
                    let (b, l) = &columns[c];
                    StatsError::EmptyCell {
                        condition: match b {
                            Some(b) => format!("{b}/{l}"),
                            None => l.to_string(),
                        },
                        item: item.to_string(),
                    }
                })
            })
            .collect()
    };

    let mut rows = Vec::new();
    let mut i = 0;
    while i < items.len() {
        let scale = scale_of(items[i]);
        let group: Vec<&str> = items[i..]
            .iter()
            .take_while(|it| scale_of(it) == scale)
            .copied()
            .collect();
        let mut values = Vec::new();
        for it in &group {
            let v = item_row(it)?;
            rows.push(ScoreRow {
                label: it.to_string(),
                aggregate: false,
                values: v.clone(),
            });
            values.push(v);
        }
        let label = match scale {
            Scale::Ability => Some("Mean Ability"),
            Scale::Benevolence => Some("Mean Benevolence"),
            _ => None,
        };
        if let Some(label) = label {
            let agg = (0..columns.len())
                .map(|c| values.iter().map(|v| v[c]).sum::<f64>() / values.len() as f64)
                .collect();
            rows.push(ScoreRow {
                label: label.to_string(),
                aggregate: true,
                values: agg,
            });
        }
        i += group.len();
    }
    Ok(ScoreTable { columns, rows })
}

impl ScoreTable {
    pub fn value(&self, label: &str, block: Option<&str>, level: Level) -> Option<f64> {
        let c = self
            .columns
            .iter()
            .position(|(b, l)| b.as_deref() == block && *l == level)?;
        self.rows.iter().find(|r| r.label == label).map(|r| r.values[c])
    }

    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(4).max(18);
        let mut out = String::new();
        let blocks: Vec<&Option<String>> = {
            let mut b: Vec<_> = self.columns.iter().map(|(b, _)| b).collect();
            b.dedup();
            b
        };
        if blocks.iter().any(|b| b.is_some()) {
            let _ = write!(out, "{:width$}", "");
            for b in blocks {
                let span = self.columns.iter().filter(|(x, _)| x == b).count();
                let name = b.as_deref().unwrap_or("-");
                let _ = write!(out, " | {:^w$}", name, w = span * 8 - 1);
            }
            out.push('\n');
        }
        let _ = write!(out, "{:width$}", "Instructed behavior");
        for (_, l) in &self.columns {
            let _ = write!(out, " {:>7}", l.as_str());
        }
        out.push('\n');
        for r in &self.rows {
            let label = if r.aggregate {
                format!("{:>width$}", r.label)
            } else {
                format!("{:width$}", r.label)
            };
            out.push_str(&label);
            for v in &r.values {
                let _ = write!(out, " {v:>7.2}");
            }
            out.push('\n');
        }
        out
    }
}

/// Per-subject mean response in each condition over `items` (all items when
/// empty), restricted to `block`.
pub fn condition_matrix(
    records: &[RatingRecord],
    block: Option<&str>,
    items: &[&str],
) -> Result<(Vec<String>, Vec<Vec<f64>>), StatsError> {
    let mut acc: BTreeMap<&str, [Vec<f64>; 3]> = BTreeMap::new();
    for r in records {
        if r.block.as_deref() != block || (!items.is_empty() && !items.contains(&r.item.as_str())) {
            continue;
        }
        acc.entry(r.participant.as_str()).or_default()[r.condition as usize].push(r.response as f64);
    }
    let present: Vec<Level> = Level::ALL
        .iter()
        .copied()
        .filter(|&l| acc.values().any(|c| !c[l as usize].is_empty()))
        .collect();
    let mut subjects = Vec::new();
    let mut rows = Vec::new();
    for (p, conds) in &acc {
        let row: Option<Vec<f64>> = present
            .iter()
            .map(|&l| {
                let v = &conds[l as usize];
                (!v.is_empty()).then(|| mean(v))
            })
            .collect();
        let row = row.ok_or_else(|| {
            StatsError::IncompleteDesign(format!("participant {p} lacks a rated condition"))
        })?;
        subjects.push(p.to_string());
        rows.push(row);
    }
    Ok((subjects, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mauchly {
    pub w: f64,
    pub chi_square: f64,
    pub df: f64,
    pub p: f64,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub a: usize,
    pub b: usize,
    pub mean_difference: f64,
    pub t: Option<f64>,
    pub df: f64,
    pub p_raw: Option<f64>,
    pub p_bonferroni: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmAnovaResult {
    pub n: usize,
    pub k: usize,
    pub means: Vec<f64>,
    pub ss_conditions: f64,
    pub ss_subjects: f64,
    pub ss_error: f64,
    pub df_num: f64,
    pub df_den: f64,
    /// `None` when the error term vanishes.
    pub f: Option<f64>,
    pub p: Option<f64>,
    pub degenerate: bool,
    pub mauchly: Option<Mauchly>,
    /// Greenhouse-Geisser epsilon, reported but not applied.
    pub gg_epsilon: Option<f64>,
    pub pairwise: Vec<PairwiseComparison>,
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn determinant(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("nonempty");
        if a[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        det *= a[col][col];
        for r in col + 1..n {
            let factor = a[r][col] / a[col][col];
            let (top, bottom) = a.split_at_mut(r);
            for (x, p) in bottom[0][col..].iter_mut().zip(&top[col][col..]) {
                *x -= factor * p;
            }
        }
    }
    det
}

/// Orthonormal Helmert contrasts, `k` rows by `k - 1` columns.
fn helmert(k: usize) -> Vec<Vec<f64>> {
    let mut c = vec![vec![0.0; k - 1]; k];
    for j in 0..k - 1 {
        let norm = ((j + 1) as f64 * (j + 2) as f64).sqrt();
        for row in c.iter_mut().take(j + 1) {
            row[j] = 1.0 / norm;
        }
        c[j + 1][j] = -((j + 1) as f64) / norm;
    }
    c
}

fn mauchly(data: &[Vec<f64>]) -> (Option<Mauchly>, Option<f64>) {
    let n = data.len();
    let k = data[0].len();
    let p = k - 1;
    if p == 1 {
        return (
            Some(Mauchly {
                w: 1.0,
                chi_square: 0.0,
                df: 0.0,
                p: 1.0,
                note: Some("two conditions: one difference variable, sphericity holds trivially".into()),
            }),
            Some(1.0),
        );
    }
    let c = helmert(k);
    // Contrast scores per subject, then their sample covariance.
    let scores: Vec<Vec<f64>> = data
        .iter()
        .map(|row| (0..p).map(|j| (0..k).map(|i| row[i] * c[i][j]).sum()).collect())
        .collect();
    let means: Vec<f64> = (0..p).map(|j| scores.iter().map(|s| s[j]).sum::<f64>() / n as f64).collect();
    let mut t = vec![vec![0.0; p]; p];
    for s in &scores {
        for a in 0..p {
            for b in 0..p {
                t[a][b] += (s[a] - means[a]) * (s[b] - means[b]) / (n as f64 - 1.0);
            }
        }
    }
    let trace: f64 = (0..p).map(|i| t[i][i]).sum();
    if trace <= 0.0 {
        return (None, None);
    }
    let pf = p as f64;
    let w = determinant(&t) / (trace / pf).powi(p as i32);
    let tr_sq: f64 = (0..p)
        .map(|i| (0..p).map(|j| t[i][j] * t[j][i]).sum::<f64>())
        .sum();
    let eps = trace * trace / (pf * tr_sq);
    let factor = (n as f64 - 1.0) - (2.0 * pf * pf + pf + 2.0) / (6.0 * pf);
    let chi_square = -factor * w.ln();
    let df = pf * (pf + 1.0) / 2.0 - 1.0;
    (
        Some(Mauchly {
            w,
            chi_square,
            df,
            p: dist::chi2_sf(chi_square, df),
            note: None,
        }),
        Some(eps),
    )
}

/// One-way repeated-measures ANOVA on an `n` subjects by `k` conditions
/// matrix.
pub fn rm_anova(data: &[Vec<f64>]) -> Result<RmAnovaResult, StatsError> {
    let n = data.len();
    let k = data.first().map_or(0, Vec::len);
    if k < 2 {
        return Err(StatsError::IncompleteDesign(format!("need at least 2 conditions, found {k}")));
    }
    if let Some(i) = data.iter().position(|r| r.len() != k) {
        return Err(StatsError::IncompleteDesign(format!(
            "subject {i} has {} conditions, expected {k}",
            data[i].len()
        )));
    }
    if n < k || n < 2 {
        return Err(StatsError::TooFewSubjects {
            needed: k.max(2),
            found: n,
        });
    }
    let (nf, kf) = (n as f64, k as f64);
    let grand = data.iter().flatten().sum::<f64>() / (nf * kf);
    let means: Vec<f64> = (0..k).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
    let ss_total: f64 = data.iter().flatten().map(|x| (x - grand).powi(2)).sum();
    let ss_conditions = nf * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_subjects = kf * data.iter().map(|r| (mean(r) - grand).powi(2)).sum::<f64>();
    let ss_error = (ss_total - ss_conditions - ss_subjects).max(0.0);
    let df_num = kf - 1.0;
    let df_den = (kf - 1.0) * (nf - 1.0);
    let degenerate = ss_error <= 1e-12 * ss_total.max(f64::MIN_POSITIVE) || ss_total == 0.0;
    let (f, p) = if degenerate {
        (None, None)
    } else {
        let f = (ss_conditions / df_num) / (ss_error / df_den);
        (Some(f), Some(dist::f_sf(f, df_num, df_den)))
    };
    let (mauchly, gg_epsilon) = mauchly(data);

    let m = (k * (k - 1) / 2) as f64;
    let mut pairwise = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let d: Vec<f64> = data.iter().map(|r| r[a] - r[b]).collect();
            let md = mean(&d);
            let sd = (d.iter().map(|x| (x - md).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
            let df = nf - 1.0;
            let t = (sd > 0.0).then(|| md / (sd / nf.sqrt()));
            let p_raw = t.map(|t| dist::t_two_sided(t, df));
            pairwise.push(PairwiseComparison {
                a,
                b,
                mean_difference: md,
                t,
                df,
                p_raw,
                p_bonferroni: p_raw.map(|p| (p * m).min(1.0)),
            });
        }
    }
    Ok(RmAnovaResult {
        n,
        k,
        means,
        ss_conditions,
        ss_subjects,
        ss_error,
        df_num,
        df_den,
        f,
        p,
        degenerate,
        mauchly,
        gg_epsilon,
        pairwise,
    })
}

/// `p < .001` or `p = .042`.
pub fn format_p(p: f64) -> String {
    if p < 0.001 {
        "p < .001".into()
    } else {
        let s = format!("{p:.3}");
        format!("p = {}", s.strip_prefix('0').unwrap_or(&s))
    }
}

impl RmAnovaResult {
    pub fn render(&self, labels: &[String]) -> String {
        let mut out = String::new();
        let name = |i: usize| labels.get(i).cloned().unwrap_or_else(|| format!("c{i}"));
        match (self.f, self.p) {
            (Some(f), Some(p)) => {
                let _ = writeln!(out, "F({}, {}) = {f:.2}, {}", self.df_num, self.df_den, format_p(p));
            }
            _ => {
                let _ = writeln!(
                    out,
                    "degenerate design: no residual variance (df {}, {}), F not defined",
                    self.df_num, self.df_den
                );
            }
        }
        let means: Vec<String> = self
            .means
            .iter()
            .enumerate()
            .map(|(i, m)| format!("{} {m:.2}", name(i)))
            .collect();
        let _ = writeln!(out, "means: {}", means.join(", "));
        match &self.mauchly {
            Some(m) => {
                let _ = write!(
                    out,
                    "Mauchly W = {:.4}, chi2({}) = {:.3}, {}",
                    m.w,
                    m.df,
                    m.chi_square,
                    format_p(m.p)
                );
                if let Some(note) = &m.note {
                    let _ = write!(out, " ({note})");
                }
                out.push('\n');
            }
            None => out.push_str("Mauchly W undefined (no variance in condition differences)\n"),
        }
        if let Some(e) = self.gg_epsilon {
            let _ = writeln!(out, "Greenhouse-Geisser epsilon = {e:.4} (not applied)");
        }
        let _ = writeln!(out, "pairwise (paired t, Bonferroni x{}):", self.pairwise.len());
        for c in &self.pairwise {
            let t = c.t.map_or_else(|| "NA".into(), |t| format!("{t:.3}"));
            let p = c.p_bonferroni.map_or_else(|| "NA".into(), format_p);
            let _ = writeln!(
                out,
                "  {} - {}: diff {:.3}, t({}) = {t}, {p}",
                name(c.a),
                name(c.b),
                c.mean_difference,
                c.df
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}
