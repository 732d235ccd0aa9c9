//! One-way ANOVA, per-dialect means and ANOVA-ranked feature selection.

use std::collections::BTreeMap;
use std::io::Write;

use thiserror::Error;

use crate::par;
use crate::prosody::{Feature, FeatureVector, FEATURE_COUNT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("DegenerateInput: {0}")]
    DegenerateInput(String),
    #[error("EmptyGroup: no rows for dialect `{0}`")]
    EmptyGroup(String),
    #[error("LengthMismatch: {features} feature rows but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("InvalidK: k = {0} must lie in 1..=14")]
    InvalidK(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnovaResult {
    /// `f64::INFINITY` when groups differ but have no spread of their own.
    pub f_stat: f64,
    pub p_value: f64,
    pub df_between: usize,
    pub df_within: usize,
}

pub fn anova_oneway<G: AsRef<[f64]>>(groups: &[G]) -> Result<AnovaResult, StatsError> {
    let k = groups.len();
    if k < 2 {
        return Err(StatsError::DegenerateInput(format!("need at least 2 groups, got {k}")));
    }
    if let Some(g) = groups.iter().find(|g| g.as_ref().len() < 2) {
        return Err(StatsError::DegenerateInput(format!(
            "every group needs at least 2 values, one has {}",
            g.as_ref().len()
        )));
    }
    let n: usize = groups.iter().map(|g| g.as_ref().len()).sum();
    let grand = groups.iter().flat_map(|g| g.as_ref()).sum::<f64>() / n as f64;
    let first = groups[0].as_ref()[0];
    if groups.iter().flat_map(|g| g.as_ref()).all(|&x| x == first) {
        return Err(StatsError::DegenerateInput("all values are identical".into()));
    }

    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for g in groups {
        let g = g.as_ref();
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ssb += g.len() as f64 * (m - grand) * (m - grand);
        ssw += g.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    }
    let df_between = k - 1;
    let df_within = n - k;
    let (f_stat, p_value) = if ssw == 0.0 {
        (f64::INFINITY, 0.0)
    } else {
        let f = (ssb / df_between as f64) / (ssw / df_within as f64);
        (f, f_survival(f, df_between as f64, df_within as f64))
    };
    Ok(AnovaResult {
        f_stat,
        p_value,
        df_between,
        df_within,
    })
}

/// Upper tail of the F distribution, P(X > f).
pub fn f_survival(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))
}

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
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
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// I_x(a, b), via the Lentz continued fraction.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // the fraction converges fast for x < (a+1)/(a+b+2); use symmetry otherwise
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
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

fn check_lengths<S>(features: &[FeatureVector], labels: &[S]) -> Result<(), StatsError> {
    if features.len() != labels.len() {
        return Err(StatsError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    Ok(())
}

/// Rows grouped by label, labels in sorted order.
fn group_rows<'a, S: AsRef<str>>(features: &'a [FeatureVector], labels: &'a [S]) -> BTreeMap<&'a str, Vec<&'a FeatureVector>> {
    let mut groups: BTreeMap<&str, Vec<&FeatureVector>> = BTreeMap::new();
    for (f, l) in features.iter().zip(labels) {
        groups.entry(l.as_ref()).or_default().push(f);
    }
    groups
}

/// Feature × dialect means, dialects in the order requested.
#[derive(Debug, Clone, PartialEq)]
pub struct MeansTable {
    pub dialects: Vec<String>,
    /// `means[d][f]` for dialect `d` and feature index `f`.
    pub means: Vec<[f64; FEATURE_COUNT]>,
}

impl MeansTable {
    pub fn get(&self, dialect: &str, feature: Feature) -> Option<f64> {
        let d = self.dialects.iter().position(|x| x == dialect)?;
        Some(self.means[d][feature.index()])
    }

    /// The dialect with the largest mean for `feature` (first on ties).
    pub fn argmax(&self, feature: Feature) -> Option<&str> {
        let mut best: Option<(usize, f64)> = None;
        for (d, row) in self.means.iter().enumerate() {
            let v = row[feature.index()];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((d, v));
            }
        }
        best.map(|(d, _)| self.dialects[d].as_str())
    }

    /// `feature,<dialect>...` with one row per feature.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "feature")?;
        for d in &self.dialects {
            write!(out, ",{d}")?;
        }
        writeln!(out)?;
        for f in Feature::ALL {
            write!(out, "{f}")?;
            for row in &self.means {
                write!(out, ",{}", row[f.index()])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// `dialect,pct_v,delta_c`: one point per dialect.
    pub fn write_scatter_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "dialect,pct_v,delta_c")?;
        for (d, row) in self.dialects.iter().zip(&self.means) {
            writeln!(out, "{d},{},{}", row[Feature::PctV.index()], row[Feature::DeltaC.index()])?;
        }
        Ok(())
    }
}

pub fn dialect_means<S: AsRef<str>>(
    features: &[FeatureVector],
    labels: &[S],
    dialects: &[impl AsRef<str>],
) -> Result<MeansTable, StatsError> {
    check_lengths(features, labels)?;
    let groups = group_rows(features, labels);
    let mut means = Vec::with_capacity(dialects.len());
    for d in dialects {
        let rows = groups
            .get(d.as_ref())
            .ok_or_else(|| StatsError::EmptyGroup(d.as_ref().to_string()))?;
        let mut acc = [0.0; FEATURE_COUNT];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.to_array()) {
                *a += v;
            }
        }
        means.push(acc.map(|a| a / rows.len() as f64));
    }
    Ok(MeansTable {
        dialects: dialects.iter().map(|d| d.as_ref().to_string()).collect(),
        means,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedFeature {
    pub feature: Feature,
    pub f_stat: f64,
}

/// The `k` features with the largest F across classes; ties keep canonical order.
pub fn rank_features<S: AsRef<str> + Sync>(
    features: &[FeatureVector],
    labels: &[S],
    k: usize,
) -> Result<Vec<RankedFeature>, StatsError> {
    if !(1..=FEATURE_COUNT).contains(&k) {
        return Err(StatsError::InvalidK(k));
    }
    check_lengths(features, labels)?;
    let groups = group_rows(features, labels);
    let scored = par::map(&Feature::ALL, |&f| {
        let values: Vec<Vec<f64>> = groups.values().map(|rows| rows.iter().map(|r| r.get(f)).collect()).collect();
        anova_oneway(&values)
            .map(|a| RankedFeature { feature: f, f_stat: a.f_stat })
            .map_err(|e| match e {
                StatsError::DegenerateInput(why) => StatsError::DegenerateInput(format!("feature {f}: {why}")),
                other => other,
            })
    });
    let mut ranked = scored.into_iter().collect::<Result<Vec<_>, _>>()?;
    // stable sort keeps canonical order among equal F
    ranked.sort_by(|a, b| b.f_stat.total_cmp(&a.f_stat));
    ranked.truncate(k);
    Ok(ranked)
}

/// One row of the significance table.
#[derive(Debug, Clone, PartialEq)]
pub struct AnovaRow {
    pub feature: Feature,
    /// `all` or `A vs B`.
    pub comparison: String,
    pub result: Result<AnovaResult, StatsError>,
    /// Set on the pair formed by the lowest- and highest-mean dialects.
    pub extreme_pair: bool,
}

/// Per feature: one ANOVA over all dialects plus one per dialect pair.
pub fn anova_table<S: AsRef<str> + Sync>(
    features: &[FeatureVector],
    labels: &[S],
    dialects: &[impl AsRef<str> + Sync],
) -> Result<Vec<AnovaRow>, StatsError> {
    let means = dialect_means(features, labels, dialects)?;
    let groups = group_rows(features, labels);
    let names: Vec<&str> = dialects.iter().map(|d| d.as_ref()).collect();
    let per_feature = par::map(&Feature::ALL, |&f| {
        let column = |d: &str| -> Vec<f64> { groups[d].iter().map(|r| r.get(f)).collect() };
        let (mut lo, mut hi) = (0, 0);
        for d in 0..names.len() {
            let v = means.means[d][f.index()];
            if v < means.means[lo][f.index()] {
                lo = d;
            }
            if v > means.means[hi][f.index()] {
                hi = d;
            }
        }
        let mut rows = vec![AnovaRow {
            feature: f,
            comparison: "all".into(),
            result: anova_oneway(&names.iter().map(|d| column(d)).collect::<Vec<_>>()),
            extreme_pair: false,
        }];
        for a in 0..names.len() {
            for b in a + 1..names.len() {
                rows.push(AnovaRow {
                    feature: f,
                    comparison: format!("{} vs {}", names[a], names[b]),
                    result: anova_oneway(&[column(names[a]), column(names[b])]),
                    extreme_pair: lo != hi && (a, b) == (lo.min(hi), lo.max(hi)),
                });
            }
        }
        rows
    });
    Ok(per_feature.into_iter().flatten().collect())
}

pub fn write_anova_csv<W: Write>(rows: &[AnovaRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "feature,comparison,F,df_b,df_w,p,extreme_pair")?;
    for r in rows {
        match &r.result {
            Ok(a) => writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.feature, r.comparison, a.f_stat, a.df_between, a.df_within, a.p_value, r.extreme_pair
            )?,
            Err(_) => writeln!(out, "{},{},NA,NA,NA,NA,{}", r.feature, r.comparison, r.extreme_pair)?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Simpson quadrature of the F density, an independent route to the tail.
    fn f_tail_by_quadrature(f: f64, d1: f64, d2: f64) -> f64 {
        let ln_b = ln_gamma(d1 / 2.0) + ln_gamma(d2 / 2.0) - ln_gamma((d1 + d2) / 2.0);
        let pdf = |x: f64| {
            if x <= 0.0 {
                return 0.0;
            }
            ((d1 / 2.0) * (d1 / d2).ln() + (d1 / 2.0 - 1.0) * x.ln()
                - ((d1 + d2) / 2.0) * (1.0 + d1 * x / d2).ln()
                - ln_b)
                .exp()
        };
        // substitute x = f + u/(1-u) to map the tail onto [0, 1)
        let n = 200_000;
        let h = 1.0 / n as f64;
        let g = |u: f64| {
            if u >= 1.0 {
                0.0
            } else {
                pdf(f + u / (1.0 - u)) / ((1.0 - u) * (1.0 - u))
            }
        };
        let mut s = g(0.0) + g(1.0);
        for i in 1..n {
            s += g(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn worked_anova() {
        let r = anova_oneway(&[vec![1.0, 2.0, 3.0], vec![2.0, 3.0, 4.0]]).unwrap();
        assert!((r.f_stat - 1.5).abs() < 1e-12);
        assert_eq!((r.df_between, r.df_within), (1, 4));
        assert!((r.p_value - 0.288).abs() < 1e-3, "p = {}", r.p_value);
        assert!((r.p_value - f_tail_by_quadrature(1.5, 1.0, 4.0)).abs() < 1e-6);
    }

    #[test]
    fn identical_values_are_degenerate() {
        assert!(matches!(
            anova_oneway(&[vec![5.0; 3], vec![5.0; 3]]),
            Err(StatsError::DegenerateInput(_))
        ));
        assert!(matches!(anova_oneway(&[vec![1.0, 2.0]]), Err(StatsError::DegenerateInput(_))));
        assert!(matches!(
            anova_oneway(&[vec![1.0, 2.0], vec![3.0]]),
            Err(StatsError::DegenerateInput(_))
        ));
    }

    #[test]
    fn equal_means_give_zero_f() {
        let r = anova_oneway(&[vec![1.0, 1.0, 2.0, 2.0], vec![1.0, 2.0, 1.0, 2.0]]).unwrap();
        assert_eq!(r.f_stat, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn zero_within_variance_is_infinite_f() {
        let r = anova_oneway(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        assert!(r.f_stat.is_infinite());
        assert_eq!(r.p_value, 0.0);
    }

    #[test]
    fn p_values_match_quadrature() {
        for &(f, d1, d2) in &[(0.7, 2.0, 10.0), (3.2, 4.0, 395.0), (12.0, 1.0, 7.0), (2.0, 9.0, 3.0)] {
            let p = f_survival(f, d1, d2);
            let q = f_tail_by_quadrature(f, d1, d2);
            assert!((p - q).abs() < 1e-6, "F({d1},{d2}) at {f}: {p} vs {q}");
        }
    }

    #[test]
    fn ln_gamma_at_integers() {
        let mut fact = 1.0f64;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-10);
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    fn fv(pct_v: f64, range: f64) -> FeatureVector {
        FeatureVector {
            pct_v,
            pitch_range: range,
            ..Default::default()
        }
    }

    #[test]
    fn means_per_dialect() {
        let rows = [fv(40.0, 1.0), fv(44.0, 3.0), fv(30.0, 2.0)];
        let labels = ["A", "A", "B"];
        let t = dialect_means(&rows, &labels, &["A", "B"]).unwrap();
        assert_eq!(t.get("A", Feature::PctV), Some(42.0));
        assert_eq!(t.get("B", Feature::PctV), Some(30.0));
        assert_eq!(t.argmax(Feature::PctV), Some("A"));
        assert_eq!(
            dialect_means(&rows, &labels, &["A", "C"]),
            Err(StatsError::EmptyGroup("C".into()))
        );
    }

    #[test]
    fn planted_feature_ranks_first() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let noise = (i % 5) as f64;
            let mut a = FeatureVector::from_array(std::array::from_fn(|j| noise + j as f64));
            let mut b = a;
            a.pitch_range = 1.0 + noise * 0.1;
            b.pitch_range = 5.0 + noise * 0.1;
            rows.extend([a, b]);
            labels.extend(["a", "b"]);
        }
        let ranked = rank_features(&rows, &labels, 14).unwrap();
        assert_eq!(ranked[0].feature, Feature::PitchRange);
        // every other feature is identically distributed: F = 0, canonical order kept
        let rest: Vec<Feature> = ranked[1..].iter().map(|r| r.feature).collect();
        let expected: Vec<Feature> = Feature::ALL.into_iter().filter(|&f| f != Feature::PitchRange).collect();
        assert_eq!(rest, expected);
        assert_eq!(rank_features(&rows, &labels, 0), Err(StatsError::InvalidK(0)));
    }

    #[test]
    fn anova_table_marks_extreme_pair() {
        let rows: Vec<FeatureVector> = [1.0, 2.0, 5.0, 6.0, 9.0, 10.0]
            .iter()
            .map(|&v| FeatureVector::from_array([v; FEATURE_COUNT]))
            .collect();
        let labels = ["lo", "lo", "mid", "mid", "hi", "hi"];
        let table = anova_table(&rows, &labels, &["lo", "mid", "hi"]).unwrap();
        assert_eq!(table.len(), FEATURE_COUNT * 4);
        let marked: Vec<&str> = table
            .iter()
            .filter(|r| r.feature == Feature::PctV && r.extreme_pair)
            .map(|r| r.comparison.as_str())
            .collect();
        assert_eq!(marked, vec!["lo vs hi"]);
    }
}
