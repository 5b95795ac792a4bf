//! Category frequencies, diff tables between two models, and plot data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotation::{CategoryAssignment, Taxonomy};
use crate::diffing::{Histogram, LatentDiff};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Class,
    Category,
}

/// Normalized frequencies (percent) of categories and classes for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryFrequencies {
    pub model: String,
    /// Category code to percentage.
    pub categories: BTreeMap<String, f64>,
    /// Class letter to percentage.
    pub classes: BTreeMap<char, f64>,
    /// Latent counts per category, when built from counts.
    pub counts: BTreeMap<String, usize>,
    /// Assigned latents (the percentage denominator).
    pub total: usize,
    /// Latents without a category; not in the denominator.
    pub unassigned: usize,
}

fn class_of(code: &str) -> char {
    code.chars().next().unwrap_or('?')
}

impl CategoryFrequencies {
    pub fn from_counts(model: &str, counts: BTreeMap<String, usize>, unassigned: usize, taxonomy: &Taxonomy) -> Result<Self> {
        let total: usize = counts.values().sum();
        if total == 0 {
            return Err(Error::Input(format!("no assigned latents for {model}")));
        }
        if let Some(bad) = counts.keys().find(|c| !taxonomy.contains(c)) {
            return Err(Error::Input(format!("category {bad} is not in the taxonomy")));
        }
        let categories: BTreeMap<String, f64> =
            counts.iter().map(|(c, &n)| (c.clone(), 100.0 * n as f64 / total as f64)).collect();
        let mut class_counts: BTreeMap<char, usize> = BTreeMap::new();
        for (c, &n) in &counts {
            *class_counts.entry(class_of(c)).or_default() += n;
        }
        let classes = class_counts.into_iter().map(|(k, n)| (k, 100.0 * n as f64 / total as f64)).collect();
        Ok(Self {
            model: model.into(),
            categories,
            classes,
            counts,
            total,
            unassigned,
        })
    }

    /// Frequencies given directly as percentages at one level; class
    /// percentages are summed from categories when `level` is `Category`.
    pub fn from_percentages(model: &str, level: Level, values: BTreeMap<String, f64>, taxonomy: &Taxonomy) -> Result<Self> {
        let mut f = Self {
            model: model.into(),
            categories: BTreeMap::new(),
            classes: BTreeMap::new(),
            counts: BTreeMap::new(),
            total: 0,
            unassigned: 0,
        };
        for (k, v) in values {
            match level {
                Level::Class => {
                    let letter = single_letter(&k).filter(|&l| taxonomy.class(l).is_some());
                    let letter = letter.ok_or_else(|| Error::Input(format!("class {k} is not in the taxonomy")))?;
                    f.classes.insert(letter, v);
                }
                Level::Category => {
                    if !taxonomy.contains(&k) {
                        return Err(Error::Input(format!("category {k} is not in the taxonomy")));
                    }
                    *f.classes.entry(class_of(&k)).or_default() += v;
                    f.categories.insert(k, v);
                }
            }
        }
        Ok(f)
    }
}

fn single_letter(s: &str) -> Option<char> {
    let mut it = s.chars();
    match (it.next(), it.next()) {
        (Some(c), None) => Some(c),
        _ => None,
    }
}

/// Counts assigned categories. Unassigned latents are reported but excluded
/// from the percentages.
pub fn aggregate(model: &str, assignments: &[CategoryAssignment], unassigned: usize, taxonomy: &Taxonomy) -> Result<CategoryFrequencies> {
    if assignments.is_empty() {
        return Err(Error::Input(format!("no category assignments for {model}")));
    }
    let mut counts = BTreeMap::new();
    for a in assignments {
        if !taxonomy.contains(&a.code) {
            return Err(Error::Assignment {
                latent: a.latent,
                reason: format!("code {} is not in the taxonomy", a.code),
            });
        }
        *counts.entry(a.code.clone()).or_default() += 1;
    }
    CategoryFrequencies::from_counts(model, counts, unassigned, taxonomy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffRow {
    /// Class letter or category code.
    pub key: String,
    pub name: String,
    pub freq_base: f64,
    pub freq_target: f64,
    /// Percentage points, target minus base.
    pub diff: f64,
    /// Relative change in percent; `None` when the base frequency is zero.
    pub change: Option<f64>,
}

/// One row per class or category of the taxonomy, sorted by change
/// descending. Rows with zero base and positive target come first, rows
/// absent from both models last; ties keep taxonomy order.
pub fn diff_table(base: &CategoryFrequencies, target: &CategoryFrequencies, level: Level, taxonomy: &Taxonomy) -> Result<Vec<DiffRow>> {
    for f in [base, target] {
        if let Some(bad) = f.categories.keys().find(|c| !taxonomy.contains(c)) {
            return Err(Error::Input(format!("{}: category {bad} is not in the taxonomy", f.model)));
        }
        if let Some(bad) = f.classes.keys().find(|&&c| taxonomy.class(c).is_none()) {
            return Err(Error::Input(format!("{}: class {bad} is not in the taxonomy", f.model)));
        }
    }
    let entries: Vec<(String, String, f64, f64)> = match level {
        Level::Class => taxonomy
            .classes
            .iter()
            .map(|c| {
                let get = |f: &CategoryFrequencies| f.classes.get(&c.letter).copied().unwrap_or(0.0);
                (c.letter.to_string(), c.name.clone(), get(base), get(target))
            })
            .collect(),
        Level::Category => taxonomy
            .categories
            .iter()
            .map(|c| {
                let get = |f: &CategoryFrequencies| f.categories.get(&c.code).copied().unwrap_or(0.0);
                (c.code.clone(), c.name.clone(), get(base), get(target))
            })
            .collect(),
    };
    let mut rows: Vec<DiffRow> = entries
        .into_iter()
        .map(|(key, name, b, t)| DiffRow {
            key,
            name,
            freq_base: b,
            freq_target: t,
            diff: t - b,
            change: (b > 0.0).then(|| 100.0 * (t - b) / b),
        })
        .collect();
    let rank = |r: &DiffRow| match r.change {
        Some(c) => c,
        None if r.freq_target > 0.0 => f64::INFINITY,
        None => f64::NEG_INFINITY,
    };
    rows.sort_by(|x, y| rank(y).total_cmp(&rank(x)));
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Markdown,
    Csv,
}

pub const UNDEFINED_CHANGE: &str = "n/a";

fn signed(v: f64, decimals: usize) -> String {
    let s = format!("{v:.decimals$}");
    if v >= 0.0 && !s.starts_with('-') {
        format!("+{s}")
    } else {
        s
    }
}

/// Markdown table with frequencies rounded to two decimals and change to
/// one, or CSV with full precision.
pub fn render_rows(rows: &[DiffRow], format: Format, base: &str, target: &str) -> Result<String> {
    match format {
        Format::Markdown => {
            let mut s = format!("| Name | {base} | {target} | Diff | Change |\n| --- | ---: | ---: | ---: | ---: |\n");
            for r in rows {
                let change = r.change.map_or(UNDEFINED_CHANGE.to_string(), |c| format!("{}%", signed(c, 1)));
                s.push_str(&format!(
                    "| {} | {:.2} | {:.2} | {} | {} |\n",
                    r.name.replace('|', "\\|"),
                    r.freq_base,
                    r.freq_target,
                    signed(r.diff, 2),
                    change
                ));
            }
            s.push_str("\nChanges are computed from unrounded frequencies; values are rounded for display only.\n");
            Ok(s)
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let fmt = |e: csv::Error| Error::Format(e.to_string());
            w.write_record(["key", "name", "freq_base", "freq_target", "diff", "change"]).map_err(fmt)?;
            for r in rows {
                w.write_record([
                    r.key.clone(),
                    r.name.clone(),
                    format!("{}", r.freq_base),
                    format!("{}", r.freq_target),
                    format!("{}", r.diff),
                    r.change.map_or(UNDEFINED_CHANGE.to_string(), |c| format!("{c}")),
                ])
                .map_err(fmt)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
        }
    }
}

pub fn render(rows: &[DiffRow], format: Format, base: &str, target: &str, path: &Path) -> Result<()> {
    let text = render_rows(rows, format, base, target)?;
    fs::write(path, text).map_err(Error::io(path))
}

/// Parses rows written by [`render`] in CSV form.
pub fn read_csv_rows(text: &str) -> Result<Vec<DiffRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let bad = |what: &str| Error::Format(format!("bad {what} in diff table"));
    let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        if rec.len() != 6 {
            return Err(bad("row width"));
        }
        out.push(DiffRow {
            key: rec[0].to_string(),
            name: rec[1].to_string(),
            freq_base: num(&rec[2], "freq_base")?,
            freq_target: num(&rec[3], "freq_target")?,
            diff: num(&rec[4], "diff")?,
            change: if &rec[5] == UNDEFINED_CHANGE { None } else { Some(num(&rec[5], "change")?) },
        });
    }
    Ok(out)
}

/// Writes the Δ_norm histogram (`bin_start, bin_end, count`) and the ν
/// scatter (`latent, nu_eps, nu_r, tag`) as tab-separated files. Only
/// latents with both coefficients defined appear in the scatter.
pub fn emit_plot_data(diffs: &[LatentDiff], bins: usize, histogram_path: &Path, scatter_path: &Path) -> Result<()> {
    let h = Histogram::of(diffs.iter().map(|d| d.delta_norm), bins);
    let mut s = String::from("bin_start\tbin_end\tcount\n");
    for (i, c) in h.counts.iter().enumerate() {
        let (lo, hi) = h.edges(i);
        s.push_str(&format!("{lo}\t{hi}\t{c}\n"));
    }
    fs::write(histogram_path, s).map_err(Error::io(histogram_path))?;
    let mut s = String::from("latent\tnu_eps\tnu_r\ttag\n");
    for d in diffs {
        if let (Some(e), Some(r)) = (d.nu_eps, d.nu_r) {
            s.push_str(&format!("{}\t{e}\t{r}\t{}\n", d.latent, d.classification.as_str()));
        }
    }
    fs::write(scatter_path, s).map_err(Error::io(scatter_path))
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (v * s).round() / s
}

/// Smallest total `N ≤ max_total` and integer counts with
/// `round(100 · count / N, decimals) == p` for every percentage `p`.
/// Useful for turning published, rounded percentage columns back into the
/// exact fractions they came from.
pub fn recover_counts(percentages: &[f64], decimals: i32, max_total: usize) -> Option<(usize, Vec<usize>)> {
    let tol = 0.5 * 10f64.powi(-decimals) + 1e-9;
    'totals: for n in 1..=max_total {
        let mut counts = Vec::with_capacity(percentages.len());
        for &p in percentages {
            let c = (p * n as f64 / 100.0).round();
            if c < 0.0 || (round_to(100.0 * c / n as f64, decimals) - p).abs() > 1e-9 || (100.0 * c / n as f64 - p).abs() > tol {
                continue 'totals;
            }
            counts.push(c as usize);
        }
        return Some((n, counts));
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffing::Classification;
    use proptest::prelude::*;

    fn assign(codes: &[&str]) -> Vec<CategoryAssignment> {
        codes
            .iter()
            .enumerate()
            .map(|(i, c)| CategoryAssignment { latent: i, code: c.to_string(), rationale: String::new() })
            .collect()
    }

    #[test]
    fn aggregate_examples() {
        let t = Taxonomy::standard();
        let f = aggregate("m", &assign(&["A.4"; 4]), 0, &t).unwrap();
        assert_eq!(f.categories["A.4"], 100.0);
        assert_eq!(f.classes[&'A'], 100.0);
        let f = aggregate("m", &assign(&["A.1", "A.1", "G.24", "G.24"]), 3, &t).unwrap();
        assert_eq!(f.categories["A.1"], 50.0);
        assert_eq!(f.classes[&'G'], 50.0);
        assert_eq!((f.total, f.unassigned), (4, 3));
        assert!(aggregate("m", &[], 0, &t).is_err());
        assert!(aggregate("m", &assign(&["Z.99"]), 0, &t).is_err());
    }

    #[test]
    fn identical_inputs_give_zero_rows() {
        let t = Taxonomy::standard();
        let f = aggregate("m", &assign(&["A.1", "B.7", "B.8", "G.30"]), 0, &t).unwrap();
        for level in [Level::Class, Level::Category] {
            let rows = diff_table(&f, &f, level, &t).unwrap();
            assert!(rows.iter().all(|r| r.diff == 0.0 && r.change.is_none_or(|c| c == 0.0)));
        }
    }

    #[test]
    fn zero_base_marker_and_order() {
        let t = Taxonomy::standard();
        let base = aggregate("b", &assign(&["A.1", "B.7"]), 0, &t).unwrap();
        let target = aggregate("t", &assign(&["A.1", "C.10", "C.10"]), 0, &t).unwrap();
        let rows = diff_table(&base, &target, Level::Class, &t).unwrap();
        assert_eq!(rows[0].key, "C");
        assert_eq!(rows[0].change, None);
        assert_eq!(rows.len(), 7);
        let md = render_rows(&rows, Format::Markdown, "b", "t").unwrap();
        assert!(md.contains(UNDEFINED_CHANGE));
        let changes: Vec<f64> = rows.iter().filter_map(|r| r.change).collect();
        assert!(changes.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn render_formats() {
        let t = Taxonomy::standard();
        let md = render_rows(&[], Format::Markdown, "a", "b").unwrap();
        assert_eq!(md.lines().filter(|l| l.starts_with('|')).count(), 2);
        let csv = render_rows(&[], Format::Csv, "a", "b").unwrap();
        assert_eq!(csv.lines().count(), 1);

        let base = aggregate("b", &assign(&["A.1", "B.7", "A.6"]), 0, &t).unwrap();
        let target = aggregate("t", &assign(&["A.1", "C.10", "E.19", "E.19", "F.22", "A.6", "A.6"]), 0, &t).unwrap();
        let rows = diff_table(&base, &target, Level::Category, &t).unwrap();
        let md = render_rows(&rows, Format::Markdown, "b", "t").unwrap();
        let widths: Vec<usize> = md.lines().filter(|l| l.starts_with('|')).map(|l| l.matches(" | ").count()).collect();
        assert!(widths.iter().all(|&w| w == widths[0]));
        let csv = render_rows(&rows, Format::Csv, "b", "t").unwrap();
        assert_eq!(read_csv_rows(&csv).unwrap(), rows);
    }

    #[test]
    fn plot_data_files() {
        let dir = tempfile::tempdir().unwrap();
        let diffs: Vec<LatentDiff> = (0..6)
            .map(|j| LatentDiff {
                latent: j,
                norm_a: 1.0,
                norm_b: 1.0,
                delta_norm: 0.5,
                nu_eps: (j < 2).then_some(0.1),
                nu_r: (j < 2).then_some(0.2),
                classification: Classification::Shared,
            })
            .collect();
        let (h, s) = (dir.path().join("h.tsv"), dir.path().join("s.tsv"));
        emit_plot_data(&diffs, 50, &h, &s).unwrap();
        let hist = fs::read_to_string(&h).unwrap();
        let counts: Vec<usize> = hist.lines().skip(1).map(|l| l.split('\t').nth(2).unwrap().parse().unwrap()).collect();
        assert_eq!(counts.len(), 50);
        assert_eq!(counts.iter().sum::<usize>(), 6);
        assert_eq!(counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(fs::read_to_string(&s).unwrap().lines().count(), 1 + 2);
    }

    #[test]
    fn class_counts_back_solve_published_column() {
        let t = Taxonomy::standard();
        let counts = [("A.1", 19), ("B.7", 8), ("C.10", 16), ("D.14", 11), ("E.18", 10), ("F.21", 4), ("G.24", 21)];
        let f = CategoryFrequencies::from_counts("SimPO", counts.iter().map(|(c, n)| (c.to_string(), *n)).collect(), 0, &t).unwrap();
        let published = [('A', 21.35), ('B', 8.99), ('C', 17.98), ('D', 12.36), ('E', 11.24), ('F', 4.49), ('G', 23.60)];
        for (k, v) in published {
            assert!((f.classes[&k] - v).abs() <= 0.005, "{k}: {}", f.classes[&k]);
        }
        let pcts: Vec<f64> = published.iter().map(|p| p.1).collect();
        assert_eq!(recover_counts(&pcts, 2, 500).unwrap(), (89, vec![19, 8, 16, 11, 10, 4, 21]));
    }

    #[test]
    fn count_recovery() {
        assert_eq!(recover_counts(&[50.0, 50.0], 2, 10), Some((2, vec![1, 1])));
        let (n, c) = recover_counts(&[33.33, 66.67], 2, 100).unwrap();
        assert_eq!((n, c), (3, vec![1, 2]));
        assert_eq!(recover_counts(&[33.3333], 2, 100), None);
    }

    proptest! {
        #[test]
        fn frequency_invariants(codes in proptest::collection::vec(0usize..30, 1..200)) {
            let t = Taxonomy::standard();
            let a: Vec<CategoryAssignment> = codes.iter().enumerate()
                .map(|(i, &c)| CategoryAssignment { latent: i, code: t.categories[c].code.clone(), rationale: String::new() })
                .collect();
            let f = aggregate("m", &a, 0, &t).unwrap();
            prop_assert!((f.classes.values().sum::<f64>() - 100.0).abs() <= 0.1);
            for (k, v) in &f.classes {
                let s: f64 = f.categories.iter().filter(|(c, _)| class_of(c) == *k).map(|(_, v)| v).sum();
                prop_assert!((s - v).abs() <= 0.05);
            }
            for (c, n) in &f.counts {
                prop_assert!((f.categories[c] - 100.0 * *n as f64 / f.total as f64).abs() < 1e-12);
            }
        }

        #[test]
        fn diff_antisymmetry_and_class_sums(x in proptest::collection::vec(0usize..30, 1..80), y in proptest::collection::vec(0usize..30, 1..80)) {
            let t = Taxonomy::standard();
            let mk = |v: &[usize]| aggregate("m", &v.iter().enumerate().map(|(i, &c)| CategoryAssignment { latent: i, code: t.categories[c].code.clone(), rationale: String::new() }).collect::<Vec<_>>(), 0, &t).unwrap();
            let (b, g) = (mk(&x), mk(&y));
            let fwd = diff_table(&b, &g, Level::Category, &t).unwrap();
            let back = diff_table(&g, &b, Level::Category, &t).unwrap();
            for r in &fwd {
                let s = back.iter().find(|q| q.key == r.key).unwrap();
                prop_assert_eq!(r.diff, -s.diff);
            }
            let classes = diff_table(&b, &g, Level::Class, &t).unwrap();
            for c in &classes {
                let s: f64 = fwd.iter().filter(|r| r.key.starts_with(&c.key)).map(|r| r.diff).sum();
                prop_assert!((s - c.diff).abs() <= 0.05);
            }
        }
    }
}
