//! Bond inference from distances and the stability, validity and uniqueness
//! metrics computed from it.
//!
//! Validity here is a proxy (valency within bounds and a connected bond
//! graph), and uniqueness compares Weisfeiler-Lehman graph hashes rather than
//! canonical SMILES.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{distance, Molecule};
use crate::error::{Error, Result};

const DEFAULT_BONDS: &str = include_str!("../fixtures/bond_lengths.txt");
const DEFAULT_VALENCY: &str = include_str!("../fixtures/valency.txt");

pub const WL_ROUNDS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BondRef {
    pub length: f64,
    pub margin: f64,
}

/// Reference length and margin per unordered element pair and bond order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct BondLengthTable {
    entries: BTreeMap<(String, String, u8), BondRef>,
    elements: HashSet<String>,
}

fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty() && !l.starts_with('#')).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

impl BondLengthTable {
    /// Parse `element element order length margin` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut t = Self::default();
        for (ln, f) in data_lines(text) {
            let bad = |msg: &str| Error::Parse {
                line: ln,
                msg: msg.to_string(),
            };
            if f.len() != 5 {
                return Err(bad("expected `element element order length margin`"));
            }
            let order: u8 = f[2]
                .parse()
                .map_err(|_| bad("bond order must be 1, 2 or 3"))?;
            if !(1..=3).contains(&order) {
                return Err(bad("bond order must be 1, 2 or 3"));
            }
            let length: f64 = f[3].parse().map_err(|_| bad("bad length"))?;
            let margin: f64 = f[4].parse().map_err(|_| bad("bad margin"))?;
            if !(length > 0.0 && margin > 0.0 && length.is_finite() && margin.is_finite()) {
                return Err(bad("length and margin must be positive"));
            }
            let (a, b) = pair_key(f[0], f[1]);
            t.elements.insert(a.clone());
            t.elements.insert(b.clone());
            if t.entries
                .insert((a, b, order), BondRef { length, margin })
                .is_some()
            {
                return Err(bad("duplicate entry"));
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn get(&self, a: &str, b: &str, order: u8) -> Option<BondRef> {
        let (a, b) = pair_key(a, b);
        self.entries.get(&(a, b, order)).copied()
    }

    pub fn knows(&self, element: &str) -> bool {
        self.elements.contains(element)
    }

    /// Highest order whose reference lies within its margin of `d`, else 0.
    pub fn order(&self, a: &str, b: &str, d: f64) -> u8 {
        (1..=3)
            .rev()
            .find(|&o| {
                self.get(a, b, o)
                    .is_some_and(|r| (d - r.length).abs() <= r.margin)
            })
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ValencyTable(BTreeMap<String, u32>);

impl ValencyTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = BTreeMap::new();
        for (ln, f) in data_lines(text) {
            let bad = |msg: &str| Error::Parse {
                line: ln,
                msg: msg.to_string(),
            };
            if f.len() != 2 {
                return Err(bad("expected `element valency`"));
            }
            let v = f[1].parse().map_err(|_| bad("bad valency"))?;
            if m.insert(f[0].to_string(), v).is_some() {
                return Err(bad("duplicate element"));
            }
        }
        Ok(Self(m))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn get(&self, element: &str) -> Result<u32> {
        self.0
            .get(element)
            .copied()
            .ok_or_else(|| Error::UnknownElement(element.to_string()))
    }
}

/// Bond and valency tables used together by every metric.
#[derive(Clone, Debug, PartialEq)]
pub struct ChemTables {
    pub bonds: BondLengthTable,
    pub valency: ValencyTable,
}

impl Default for ChemTables {
    fn default() -> Self {
        Self {
            bonds: BondLengthTable::parse(DEFAULT_BONDS).expect("shipped bond table parses"),
            valency: ValencyTable::parse(DEFAULT_VALENCY).expect("shipped valency table parses"),
        }
    }
}

/// Symmetric bond-order matrix with zero diagonal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BondGraph {
    n: usize,
    order: Vec<u8>,
}

impl BondGraph {
    pub fn from_orders(n: usize, order: Vec<u8>) -> Result<Self> {
        if order.len() != n * n {
            return Err(Error::invalid("bond order matrix must be N x N"));
        }
        for i in 0..n {
            if order[i * n + i] != 0
                || (0..n).any(|j| order[i * n + j] != order[j * n + i] || order[i * n + j] > 3)
            {
                return Err(Error::invalid(
                    "bond order matrix must be symmetric with zero diagonal and entries <= 3",
                ));
            }
        }
        Ok(Self { n, order })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn order(&self, i: usize, j: usize) -> u8 {
        self.order[i * self.n + j]
    }

    pub fn valency(&self, i: usize) -> u32 {
        (0..self.n).map(|j| u32::from(self.order(i, j))).sum()
    }

    pub fn valencies(&self) -> Vec<u32> {
        (0..self.n).map(|i| self.valency(i)).collect()
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return false;
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for j in 0..self.n {
                if self.order(i, j) > 0 && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// `P A P^T` for the permutation `new[i] = old[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let order = (0..n * n)
            .map(|k| self.order(perm[k / n], perm[k % n]))
            .collect();
        Self { n, order }
    }
}

pub fn predict_bonds(
    coords: &[[f64; 3]],
    elements: &[String],
    table: &BondLengthTable,
) -> Result<BondGraph> {
    if coords.len() != elements.len() {
        return Err(Error::invalid("coordinates and elements differ in length"));
    }
    if let Some(e) = elements.iter().find(|e| !table.knows(e)) {
        return Err(Error::UnknownElement(e.clone()));
    }
    if coords.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("coordinates for bond inference".into()));
    }
    let n = elements.len();
    let mut order = vec![0u8; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let o = table.order(&elements[i], &elements[j], distance(&coords[i], &coords[j]));
            order[i * n + j] = o;
            order[j * n + i] = o;
        }
    }
    Ok(BondGraph { n, order })
}

pub fn molecule_bonds(m: &Molecule, tables: &ChemTables) -> Result<BondGraph> {
    predict_bonds(&m.coords, &m.elements, &tables.bonds)
}

fn stable_atoms(bg: &BondGraph, elements: &[String], valency: &ValencyTable) -> Result<usize> {
    let mut ok = 0;
    for (i, e) in elements.iter().enumerate() {
        if bg.valency(i) == valency.get(e)? {
            ok += 1;
        }
    }
    Ok(ok)
}

/// Fraction of atoms whose bond-order sum equals the table valency.
pub fn atom_stability(bg: &BondGraph, elements: &[String], valency: &ValencyTable) -> Result<f64> {
    if elements.is_empty() || elements.len() != bg.n() {
        return Err(Error::invalid(
            "atom stability needs a nonempty molecule matching its bond graph",
        ));
    }
    Ok(stable_atoms(bg, elements, valency)? as f64 / elements.len() as f64)
}

pub fn molecule_stability(
    bg: &BondGraph,
    elements: &[String],
    valency: &ValencyTable,
) -> Result<bool> {
    Ok(atom_stability(bg, elements, valency)? == 1.0)
}

/// Valency within bounds for every atom and a connected bond graph.
pub fn validity_proxy(bg: &BondGraph, elements: &[String], valency: &ValencyTable) -> Result<bool> {
    for (i, e) in elements.iter().enumerate() {
        if bg.valency(i) > valency.get(e)? {
            return Ok(false);
        }
    }
    Ok(bg.is_connected())
}

fn hex(d: impl AsRef<[u8]>) -> String {
    d.as_ref().iter().map(|b| format!("{b:02x}")).collect()
}

/// Permutation-invariant hash: sorted element multiset plus the multiset of
/// colours after three rounds of bond-order-aware WL refinement.
pub fn wl_hash(bg: &BondGraph, elements: &[String]) -> String {
    let n = bg.n();
    let mut colours: Vec<String> = elements.to_vec();
    for _ in 0..WL_ROUNDS {
        colours = (0..n)
            .map(|i| {
                let mut nb: Vec<String> = (0..n)
                    .filter(|&j| bg.order(i, j) > 0)
                    .map(|j| format!("{}:{}", bg.order(i, j), colours[j]))
                    .collect();
                nb.sort();
                let mut h = Sha256::new();
                h.update(colours[i].as_bytes());
                for s in &nb {
                    h.update(b"|");
                    h.update(s.as_bytes());
                }
                hex(h.finalize())
            })
            .collect();
    }
    let mut elems = elements.to_vec();
    elems.sort();
    colours.sort();
    let mut h = Sha256::new();
    h.update(elems.join(",").as_bytes());
    h.update(b"#");
    h.update(colours.join(",").as_bytes());
    hex(h.finalize())
}

/// Distinct hashes divided by the number of graphs.
pub fn uniqueness(graphs: &[(BondGraph, Vec<String>)]) -> Result<f64> {
    if graphs.is_empty() {
        return Err(Error::invalid("uniqueness of an empty set"));
    }
    let keys: HashSet<String> = graphs.iter().map(|(g, e)| wl_hash(g, e)).collect();
    Ok(keys.len() as f64 / graphs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    /// Stable atoms over all atoms.
    pub atom_stability: f64,
    pub molecule_stability: f64,
    pub validity: f64,
    pub uniqueness: f64,
    /// Distinct hashes among valid molecules over all molecules.
    pub validity_x_uniqueness: f64,
}

pub fn evaluate_set(molecules: &[Molecule], tables: &ChemTables) -> Result<MetricsReport> {
    if molecules.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty set of molecules"));
    }
    let (mut atoms, mut stable, mut stable_mols, mut valid) = (0usize, 0usize, 0usize, 0usize);
    let mut all_keys = HashSet::new();
    let mut valid_keys = HashSet::new();
    for m in molecules {
        let bg = molecule_bonds(m, tables)?;
        let s = stable_atoms(&bg, &m.elements, &tables.valency)?;
        atoms += m.n();
        stable += s;
        stable_mols += usize::from(s == m.n());
        let key = wl_hash(&bg, &m.elements);
        if validity_proxy(&bg, &m.elements, &tables.valency)? {
            valid += 1;
            valid_keys.insert(key.clone());
        }
        all_keys.insert(key);
    }
    let total = molecules.len() as f64;
    Ok(MetricsReport {
        samples: molecules.len(),
        atom_stability: stable as f64 / atoms as f64,
        molecule_stability: stable_mols as f64 / total,
        validity: valid as f64 / total,
        uniqueness: all_keys.len() as f64 / total,
        validity_x_uniqueness: valid_keys.len() as f64 / total,
    })
}
