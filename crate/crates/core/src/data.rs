//! Molecule records, text formats, size distribution and synthetic templates.
//!
//! Two formats are supported. XYZ is the usual multi-record layout
//!
//! ```text
//! <N>
//! <comment: free text, optional key=value tokens such as label=hf s=0.46>
//! <El> <x> <y> <z> [charge]      (N lines)
//! ```
//!
//! and the manifest holds one molecule per line:
//!
//! ```text
//! manifest := { line "\n" }
//! line     := "#" text | record
//! record   := elements ";" coords ";" charges ";" [ s ] ";" [ label ]
//! elements := symbol { " " symbol }
//! coords   := float { " " float }          (3N values, x1 y1 z1 x2 ...)
//! charges  := int { " " int }              (N values)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::autoencoder::{Geometry, MAX_ABS_CHARGE};
use crate::error::{Error, Result};
use crate::geometry;
use crate::scalar::Scalar;

/// Ordered element symbols; the position is the type index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary(Vec<String>);

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new(["H", "C", "N", "O", "F"]).expect("default vocabulary is valid")
    }
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(symbols: impl IntoIterator<Item = S>) -> Result<Self> {
        let v: Vec<String> = symbols
            .into_iter()
            .map(|s| s.as_ref().to_string())
            .collect();
        if v.is_empty() {
            return Err(Error::invalid("vocabulary is empty"));
        }
        for (i, s) in v.iter().enumerate() {
            if s.is_empty() || s.contains(char::is_whitespace) || s.contains([';', ',']) {
                return Err(Error::invalid(format!("bad element symbol `{s}`")));
            }
            if v[..i].contains(s) {
                return Err(Error::invalid(format!(
                    "duplicate element `{s}` in vocabulary"
                )));
            }
        }
        Ok(Self(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.0
    }

    pub fn index_of(&self, symbol: &str) -> Result<usize> {
        self.0
            .iter()
            .position(|s| s == symbol)
            .ok_or_else(|| Error::UnknownElement(symbol.to_string()))
    }

    pub fn symbol(&self, index: usize) -> Result<&str> {
        self.0.get(index).map(String::as_str).ok_or_else(|| {
            Error::invalid(format!(
                "type index {index} outside vocabulary of {}",
                self.len()
            ))
        })
    }

    /// Comma-separated form used in checkpoint metadata.
    pub fn to_csv(&self) -> String {
        self.0.join(",")
    }

    pub fn from_csv(s: &str) -> Result<Self> {
        Self::new(s.split(',').map(str::trim))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Molecule {
    pub elements: Vec<String>,
    pub coords: Vec<[f64; 3]>,
    pub charges: Vec<i32>,
    /// Optional scalar property (the conditioning value).
    pub property: Option<f64>,
    pub label: Option<String>,
}

impl Molecule {
    pub fn new(elements: Vec<String>, coords: Vec<[f64; 3]>, charges: Vec<i32>) -> Result<Self> {
        let m = Self {
            elements,
            coords,
            charges,
            property: None,
            label: None,
        };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        let n = self.elements.len();
        if n == 0 || self.coords.len() != n || self.charges.len() != n {
            return Err(Error::invalid(format!(
                "molecule needs N >= 1 with {} elements, {} coordinates, {} charges",
                n,
                self.coords.len(),
                self.charges.len()
            )));
        }
        if self.coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("molecule coordinates".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.elements.len()
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn with_property(mut self, s: f64) -> Self {
        self.property = Some(s);
        self
    }

    pub fn coords_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(self.n(), 3, |i, a| T::of(self.coords[i][a]))
    }

    pub fn type_indices(&self, vocab: &Vocabulary) -> Result<Vec<usize>> {
        self.elements.iter().map(|e| vocab.index_of(e)).collect()
    }

    /// Network form with coordinates as given.
    pub fn to_geometry<T: Scalar>(&self, vocab: &Vocabulary) -> Result<Geometry<T>> {
        Geometry::new(
            self.coords_tensor(),
            self.type_indices(vocab)?,
            self.charges.clone(),
            self.property,
        )
    }

    pub fn from_geometry<T: Scalar>(g: &Geometry<T>, vocab: &Vocabulary) -> Result<Self> {
        let elements = g
            .types
            .iter()
            .map(|&t| vocab.symbol(t).map(str::to_string))
            .collect::<Result<_>>()?;
        let coords = (0..g.n())
            .map(|i| [0, 1, 2].map(|a| g.x.get(i, a).as_f64()))
            .collect();
        let mut m = Molecule::new(elements, coords, g.charges.clone())?;
        m.property = g.condition;
        Ok(m)
    }

    /// Pairwise distances sorted ascending.
    pub fn sorted_distances(&self) -> Vec<f64> {
        let n = self.n();
        let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                d.push(distance(&self.coords[i], &self.coords[j]));
            }
        }
        d.sort_by(f64::total_cmp);
        d
    }

    pub fn sorted_elements(&self) -> Vec<String> {
        let mut e = self.elements.clone();
        e.sort();
        e
    }
}

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `[one-hot(type) | charge]` with width `|vocab| + 1`.
pub fn featurize(m: &Molecule, vocab: &Vocabulary) -> Result<Tensor<f64>> {
    Ok(m.to_geometry::<f64>(vocab)?.features(vocab.len()))
}

/// Root-mean-square distance of the atoms from their centroid, in Å.
pub fn condition_value(m: &Molecule) -> f64 {
    let x: Tensor<f64> = geometry::project_cog(&m.coords_tensor());
    let sq: f64 = x.values().iter().map(|v| v * v).sum();
    (sq / m.n() as f64).sqrt()
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

/// Parse a multi-record XYZ text. Line numbers in errors are 1-based.
pub fn parse_xyz(text: &str, vocab: &Vocabulary) -> Result<Vec<Molecule>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let record = out.len() + 1;
        let head = i + 1;
        let n: usize = lines[i].trim().parse().map_err(|_| {
            parse_err(
                head,
                format!(
                    "record {record}: malformed atom count `{}`",
                    lines[i].trim()
                ),
            )
        })?;
        if n == 0 {
            return Err(parse_err(
                head,
                format!("record {record}: atom count must be >= 1"),
            ));
        }
        if i + 2 + n > lines.len() {
            let have = lines.len().saturating_sub(i + 2);
            return Err(parse_err(
                head,
                format!("record {record}: truncated, claims {n} atoms but only {have} follow"),
            ));
        }
        let comment = lines[i + 1];
        let mut elements = Vec::with_capacity(n);
        let mut coords = Vec::with_capacity(n);
        let mut charges = Vec::with_capacity(n);
        for (k, raw) in lines[i + 2..i + 2 + n].iter().enumerate() {
            let ln = i + 3 + k;
            let f: Vec<&str> = raw.split_whitespace().collect();
            if f.len() < 4 || f.len() > 5 {
                return Err(parse_err(
                    ln,
                    format!("record {record}: expected `El x y z [charge]`, got {} fields (record claims {n} atoms)", f.len()),
                ));
            }
            vocab.index_of(f[0]).map_err(|_| {
                parse_err(ln, format!("record {record}: unknown element `{}`", f[0]))
            })?;
            let mut c = [0.0; 3];
            for a in 0..3 {
                c[a] = f[a + 1].parse().map_err(|_| {
                    parse_err(
                        ln,
                        format!("record {record}: bad coordinate `{}`", f[a + 1]),
                    )
                })?;
            }
            if c.iter().any(|v: &f64| !v.is_finite()) {
                return Err(parse_err(
                    ln,
                    format!("record {record}: non-finite coordinate"),
                ));
            }
            let q = match f.get(4) {
                Some(s) => s
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.fract() == 0.0 && v.abs() <= MAX_ABS_CHARGE as f64)
                    .map(|v| v as i32)
                    .ok_or_else(|| parse_err(ln, format!("record {record}: charge `{s}` is not an integer in [-{MAX_ABS_CHARGE}, {MAX_ABS_CHARGE}]")))?,
                None => 0,
            };
            elements.push(f[0].to_string());
            coords.push(c);
            charges.push(q);
        }
        let mut m = Molecule::new(elements, coords, charges)?;
        for tok in comment.split_whitespace() {
            if let Some(v) = tok.strip_prefix("label=") {
                m.label = Some(v.to_string());
            } else if let Some(v) = tok.strip_prefix("s=") {
                m.property = Some(v.parse().map_err(|_| {
                    parse_err(i + 2, format!("record {record}: bad condition `{v}`"))
                })?);
            }
        }
        out.push(m);
        i += 2 + n;
    }
    Ok(out)
}

/// XYZ text with 6-decimal coordinates; the charge column is written only
/// for records with a nonzero charge.
pub fn format_xyz(molecules: &[Molecule], extra_comment: &str) -> String {
    let mut s = String::new();
    for m in molecules {
        let _ = writeln!(s, "{}", m.n());
        let mut comment = Vec::new();
        if let Some(l) = &m.label {
            comment.push(format!("label={l}"));
        }
        if let Some(p) = m.property {
            comment.push(format!("s={p}"));
        }
        if !extra_comment.is_empty() {
            comment.push(extra_comment.to_string());
        }
        let _ = writeln!(s, "{}", comment.join(" "));
        let charged = m.charges.iter().any(|&q| q != 0);
        for ((e, c), q) in m.elements.iter().zip(&m.coords).zip(&m.charges) {
            let _ = write!(s, "{e} {:.6} {:.6} {:.6}", c[0], c[1], c[2]);
            if charged {
                let _ = write!(s, " {q}");
            }
            s.push('\n');
        }
    }
    s
}

pub fn write_xyz(molecules: &[Molecule], path: &Path, extra_comment: &str) -> Result<()> {
    std::fs::write(path, format_xyz(molecules, extra_comment)).map_err(|e| Error::io(path, e))
}

pub fn read_xyz(path: &Path, vocab: &Vocabulary) -> Result<Vec<Molecule>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text, vocab)
}

/// Manifest text; floats use the shortest exact representation.
pub fn format_manifest(molecules: &[Molecule]) -> String {
    let mut s = String::from("# elements;coords;charges;s;label\n");
    for m in molecules {
        let coords: Vec<String> = m
            .coords
            .iter()
            .flatten()
            .map(|v| format!("{v:?}"))
            .collect();
        let charges: Vec<String> = m.charges.iter().map(|q| q.to_string()).collect();
        let _ = writeln!(
            s,
            "{};{};{};{};{}",
            m.elements.join(" "),
            coords.join(" "),
            charges.join(" "),
            m.property.map(|p| format!("{p:?}")).unwrap_or_default(),
            m.label.as_deref().unwrap_or("")
        );
    }
    s
}

pub fn parse_manifest(text: &str, vocab: &Vocabulary) -> Result<Vec<Molecule>> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let ln = k + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(';').collect();
        if f.len() != 5 {
            return Err(parse_err(
                ln,
                format!("expected 5 `;`-separated fields, got {}", f.len()),
            ));
        }
        let elements: Vec<String> = f[0].split_whitespace().map(str::to_string).collect();
        for e in &elements {
            vocab
                .index_of(e)
                .map_err(|_| parse_err(ln, format!("unknown element `{e}`")))?;
        }
        let flat: Vec<f64> = f[1]
            .split_whitespace()
            .map(|v| {
                v.parse()
                    .map_err(|_| parse_err(ln, format!("bad coordinate `{v}`")))
            })
            .collect::<Result<_>>()?;
        if flat.len() != 3 * elements.len() {
            return Err(parse_err(
                ln,
                format!(
                    "{} elements need {} coordinates, got {}",
                    elements.len(),
                    3 * elements.len(),
                    flat.len()
                ),
            ));
        }
        let charges: Vec<i32> = f[2]
            .split_whitespace()
            .map(|v| {
                v.parse()
                    .map_err(|_| parse_err(ln, format!("bad charge `{v}`")))
            })
            .collect::<Result<_>>()?;
        let coords = flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let mut m =
            Molecule::new(elements, coords, charges).map_err(|e| parse_err(ln, e.to_string()))?;
        if !f[3].trim().is_empty() {
            m.property = Some(
                f[3].trim()
                    .parse()
                    .map_err(|_| parse_err(ln, format!("bad condition `{}`", f[3])))?,
            );
        }
        if !f[4].trim().is_empty() {
            m.label = Some(f[4].trim().to_string());
        }
        out.push(m);
    }
    Ok(out)
}

/// Load a dataset, choosing the format by extension (`.xyz` or manifest).
pub fn read_dataset(path: &Path, vocab: &Vocabulary) -> Result<Vec<Molecule>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("xyz"))
    {
        parse_xyz(&text, vocab)
    } else {
        parse_manifest(&text, vocab)
    }
}

pub fn write_dataset(molecules: &[Molecule], path: &Path) -> Result<()> {
    let text = if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("xyz"))
    {
        format_xyz(molecules, "")
    } else {
        format_manifest(molecules)
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Empirical distribution of molecule sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeDistribution {
    support: Vec<usize>,
    probs: Vec<f64>,
}

impl SizeDistribution {
    pub fn from_sizes(sizes: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut counts = BTreeMap::new();
        let mut total = 0usize;
        for n in sizes {
            if n == 0 {
                return Err(Error::invalid("molecule size 0 in size distribution"));
            }
            *counts.entry(n).or_insert(0usize) += 1;
            total += 1;
        }
        if total == 0 {
            return Err(Error::invalid("size distribution of an empty dataset"));
        }
        let (support, probs) = counts
            .into_iter()
            .map(|(n, c)| (n, c as f64 / total as f64))
            .unzip();
        Ok(Self { support, probs })
    }

    pub fn from_dataset(molecules: &[Molecule]) -> Result<Self> {
        Self::from_sizes(molecules.iter().map(Molecule::n))
    }

    /// Explicit support and probabilities (e.g. from a checkpoint).
    pub fn from_parts(support: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != probs.len() || support.contains(&0) {
            return Err(Error::invalid(
                "size distribution needs matching, nonempty support and probabilities",
            ));
        }
        if probs.iter().any(|p| !(*p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "size probabilities must be >= 0 and sum to 1",
            ));
        }
        Ok(Self { support, probs })
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, n: usize) -> f64 {
        self.support
            .iter()
            .position(|&s| s == n)
            .map_or(0.0, |i| self.probs[i])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let w = WeightedIndex::new(&self.probs).expect("validated weights");
        self.support[w.sample(rng)]
    }
}

/// A rigid reference geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub name: String,
    pub molecule: Molecule,
}

impl Template {
    pub fn new(name: &str, elements: &[&str], coords: Vec<[f64; 3]>) -> Self {
        let n = elements.len();
        let molecule = Molecule::new(
            elements.iter().map(|s| s.to_string()).collect(),
            coords,
            vec![0; n],
        )
        .expect("template shape")
        .with_label(name);
        Self {
            name: name.to_string(),
            molecule,
        }
    }
}

/// Linear HF (0.92 Å), bent H2O (0.96 Å, 104.5°) and tetrahedral CH4 (1.09 Å).
pub fn default_templates() -> Vec<Template> {
    let half = (104.5f64 / 2.0).to_radians();
    let r_oh = 0.96;
    let water = vec![
        [0.0, 0.0, 0.0],
        [r_oh * half.sin(), r_oh * half.cos(), 0.0],
        [-r_oh * half.sin(), r_oh * half.cos(), 0.0],
    ];
    let t = 1.09 / 3f64.sqrt();
    let methane = vec![
        [0.0, 0.0, 0.0],
        [t, t, t],
        [t, -t, -t],
        [-t, t, -t],
        [-t, -t, t],
    ];
    vec![
        Template::new("hf", &["H", "F"], vec![[0.0, 0.0, 0.0], [0.92, 0.0, 0.0]]),
        Template::new("water", &["O", "H", "H"], water),
        Template::new("methane", &["C", "H", "H", "H", "H"], methane),
    ]
}

/// Templates from XYZ records, named by their `label=` token or position.
pub fn templates_from_molecules(ms: Vec<Molecule>) -> Vec<Template> {
    ms.into_iter()
        .enumerate()
        .map(|(i, m)| {
            let name = m.label.clone().unwrap_or_else(|| format!("template{i}"));
            Template {
                molecule: m.with_label(name.clone()),
                name,
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub templates: Vec<Template>,
    /// Standard deviation of the per-coordinate Gaussian jitter, in Å.
    pub jitter: f64,
    pub count: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            templates: default_templates(),
            jitter: 0.02,
            count: 2000,
        }
    }
}

/// Each sample: a uniformly chosen template, a random rotation, centring,
/// then coordinate jitter. The template name is kept as the label and the
/// radius of gyration as the property.
pub fn gen_synthetic_templates<R: Rng + ?Sized>(
    cfg: &SyntheticConfig,
    rng: &mut R,
) -> Result<Vec<Molecule>> {
    if cfg.templates.len() < 2 {
        return Err(Error::invalid(format!(
            "synthetic data needs at least 2 templates, got {}",
            cfg.templates.len()
        )));
    }
    if !(cfg.jitter >= 0.0 && cfg.jitter.is_finite()) {
        return Err(Error::invalid(format!(
            "jitter must be finite and >= 0, got {}",
            cfg.jitter
        )));
    }
    let noise = Normal::new(0.0, cfg.jitter).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let t = &cfg.templates[rng.random_range(0..cfg.templates.len())];
        let rot = geometry::random_rotation(rng);
        let x: Tensor<f64> =
            geometry::project_cog(&geometry::rotate(&t.molecule.coords_tensor(), &rot));
        let coords: Vec<[f64; 3]> = (0..x.rows())
            .map(|i| {
                let mut c = [x.get(i, 0), x.get(i, 1), x.get(i, 2)];
                if cfg.jitter > 0.0 {
                    for v in &mut c {
                        *v += noise.sample(rng);
                    }
                }
                c
            })
            .collect();
        let mut m = Molecule::new(
            t.molecule.elements.clone(),
            coords,
            t.molecule.charges.clone(),
        )?
        .with_label(&t.name);
        m.property = Some(condition_value(&m));
        out.push(m);
    }
    Ok(out)
}

/// Index of the first template with the same element multiset whose sorted
/// pairwise distances all lie within `tol` of the molecule's.
pub fn match_template(m: &Molecule, templates: &[Template], tol: f64) -> Option<usize> {
    let elems = m.sorted_elements();
    let dists = m.sorted_distances();
    templates.iter().position(|t| {
        t.molecule.sorted_elements() == elems
            && t.molecule
                .sorted_distances()
                .iter()
                .zip(&dists)
                .all(|(a, b)| (a - b).abs() <= tol)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::default()
    }

    #[test]
    fn single_atom_record() {
        let ms = parse_xyz("1\n\nH 0 0 0\n", &vocab()).unwrap();
        assert_eq!(ms.len(), 1);
        assert_eq!(ms[0].n(), 1);
        assert_eq!(ms[0].charges, vec![0]);
        assert_eq!(format_xyz(&ms, "").lines().count(), 3);
    }

    #[test]
    fn truncated_record_names_record_and_line() {
        let text = "1\n\nH 0 0 0\n3\nsecond\nO 0 0 0\nH 1 0 0\n";
        match parse_xyz(text, &vocab()) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("record 2"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_record_followed_by_more_text() {
        // the third "atom" line is actually the next record's count
        let text = "3\n\nO 0 0 0\nH 1 0 0\n1\n\nH 0 0 0\n";
        assert!(matches!(
            parse_xyz(text, &vocab()),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn malformed_count_and_unknown_element() {
        assert!(matches!(
            parse_xyz("x\n\nH 0 0 0\n", &vocab()),
            Err(Error::Parse { line: 1, .. })
        ));
        match parse_xyz("1\n\nXe 0 0 0\n", &vocab()) {
            Err(Error::Parse { line: 3, msg }) => assert!(msg.contains("Xe")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn charge_column_and_comment_tokens() {
        let ms = parse_xyz("2\nlabel=ion s=0.5\nO 0 0 0 -1\nH 0.96 0 0 0\n", &vocab()).unwrap();
        assert_eq!(ms[0].charges, vec![-1, 0]);
        assert_eq!(ms[0].label.as_deref(), Some("ion"));
        assert_eq!(ms[0].property, Some(0.5));
    }

    #[test]
    fn xyz_round_trip_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ms = gen_synthetic_templates(
            &SyntheticConfig {
                count: 20,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        let once = parse_xyz(&format_xyz(&ms, ""), &vocab()).unwrap();
        for (a, b) in ms.iter().zip(&once) {
            for (ca, cb) in a.coords.iter().zip(&b.coords) {
                for k in 0..3 {
                    assert!((ca[k] - cb[k]).abs() <= 5e-7 + 1e-12);
                }
            }
        }
        let twice = parse_xyz(&format_xyz(&once, ""), &vocab()).unwrap();
        assert_eq!(once, twice);
        assert_eq!(format_xyz(&[], ""), "");
    }

    #[test]
    fn manifest_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ms = gen_synthetic_templates(
            &SyntheticConfig {
                count: 10,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(parse_manifest(&format_manifest(&ms), &vocab()).unwrap(), ms);
        assert!(matches!(
            parse_manifest("H;0 0;0;;\n", &vocab()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn featurize_examples() {
        let h = Molecule::new(vec!["H".into()], vec![[0.0; 3]], vec![0]).unwrap();
        assert_eq!(
            featurize(&h, &vocab()).unwrap().values(),
            &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
        let o = Molecule::new(vec!["O".into()], vec![[0.0; 3]], vec![-1]).unwrap();
        assert_eq!(
            featurize(&o, &vocab()).unwrap().values(),
            &[0.0, 0.0, 0.0, 1.0, 0.0, -1.0]
        );
        let s = Molecule::new(vec!["S".into()], vec![[0.0; 3]], vec![0]).unwrap();
        assert!(matches!(featurize(&s, &vocab()), Err(Error::UnknownElement(e)) if e == "S"));
    }

    #[test]
    fn size_distribution_examples() {
        let d = SizeDistribution::from_sizes([2, 2, 3]).unwrap();
        assert!((d.prob(2) - 2.0 / 3.0).abs() < 1e-15);
        assert!((d.prob(3) - 1.0 / 3.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 100_000;
        let twos = (0..draws).filter(|_| d.sample(&mut rng) == 2).count();
        assert!((twos as f64 / draws as f64 - 2.0 / 3.0).abs() < 0.01);
        let single = SizeDistribution::from_sizes([7]).unwrap();
        assert!((0..100).all(|_| single.sample(&mut rng) == 7));
        assert!(SizeDistribution::from_sizes([]).is_err());
    }

    #[test]
    fn templates_have_the_stated_geometry() {
        let t = default_templates();
        assert!((t[0].molecule.sorted_distances()[0] - 0.92).abs() < 1e-12);
        let w = &t[1].molecule;
        let (oh1, oh2) = (
            distance(&w.coords[0], &w.coords[1]),
            distance(&w.coords[0], &w.coords[2]),
        );
        assert!((oh1 - 0.96).abs() < 1e-12 && (oh2 - 0.96).abs() < 1e-12);
        let hh = distance(&w.coords[1], &w.coords[2]);
        let angle = (1.0 - hh * hh / (2.0 * 0.96 * 0.96)).acos().to_degrees();
        assert!((angle - 104.5).abs() < 1e-9);
        let m = &t[2].molecule;
        for i in 1..5 {
            assert!((distance(&m.coords[0], &m.coords[i]) - 1.09).abs() < 1e-12);
            for j in i + 1..5 {
                let c = (m.coords[i]
                    .iter()
                    .zip(&m.coords[j])
                    .map(|(a, b)| a * b)
                    .sum::<f64>())
                    / (1.09 * 1.09);
                assert!((c + 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_jitter_samples_match_templates_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = SyntheticConfig {
            jitter: 0.0,
            count: 30,
            ..Default::default()
        };
        let ms = gen_synthetic_templates(&cfg, &mut rng).unwrap();
        for m in &ms {
            let t = cfg
                .templates
                .iter()
                .find(|t| Some(&t.name) == m.label.as_ref())
                .unwrap();
            for (a, b) in t
                .molecule
                .sorted_distances()
                .iter()
                .zip(m.sorted_distances())
            {
                assert!((a - b).abs() < 1e-12);
            }
            assert!(match_template(m, &cfg.templates, 1e-9).is_some());
        }
        assert!(gen_synthetic_templates(
            &SyntheticConfig {
                templates: default_templates()[..1].to_vec(),
                ..cfg
            },
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn synthetic_generation_is_seed_deterministic() {
        let cfg = SyntheticConfig {
            count: 15,
            ..Default::default()
        };
        let a = gen_synthetic_templates(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gen_synthetic_templates(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
    }

    #[test]
    fn radius_of_gyration_examples() {
        let one = Molecule::new(vec!["C".into()], vec![[1.0, 2.0, 3.0]], vec![0]).unwrap();
        assert_eq!(condition_value(&one), 0.0);
        let two = Molecule::new(
            vec!["H".into(), "H".into()],
            vec![[0.0; 3], [2.0, 0.0, 0.0]],
            vec![0, 0],
        )
        .unwrap();
        assert!((condition_value(&two) - 1.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rot = geometry::random_rotation(&mut rng);
        let moved = Molecule {
            coords: geometry::transform(&two.coords_tensor::<f64>(), &rot, [3.0, -1.0, 2.0])
                .values()
                .chunks(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect(),
            ..two.clone()
        };
        assert!((condition_value(&moved) - 1.0).abs() < 1e-12);
    }
}
