//! Hypernym -> hyponym taxonomy stored as a DAG.
//!
//! A term may have several hypernyms, so the structure is not forced into a
//! tree. Term identity is the exact NFC-normalized string.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Normalize a term to its canonical (NFC) form.
pub fn normalize_term(term: &str) -> String {
    term.nfc().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Parents,
    Children,
    Ancestors,
    Descendants,
    Siblings,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Taxonomy {
    nodes: BTreeSet<String>,
    children: BTreeMap<String, BTreeSet<String>>,
    parents: BTreeMap<String, BTreeSet<String>>,
}

impl Taxonomy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.children.values().map(BTreeSet::len).sum()
    }

    pub fn contains(&self, term: &str) -> bool {
        self.nodes.contains(&normalize_term(term))
    }

    pub fn has_edge(&self, hyper: &str, hypo: &str) -> bool {
        self.children
            .get(&normalize_term(hyper))
            .is_some_and(|c| c.contains(&normalize_term(hypo)))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(String::as_str)
    }

    /// All edges in lexicographic (hyper, hypo) order.
    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.children
            .iter()
            .flat_map(|(h, cs)| cs.iter().map(move |c| (h.as_str(), c.as_str())))
    }

    pub fn roots(&self) -> BTreeSet<String> {
        self.nodes
            .iter()
            .filter(|n| self.parents.get(*n).is_none_or(BTreeSet::is_empty))
            .cloned()
            .collect()
    }

    pub fn add_node(&mut self, term: &str) {
        self.nodes.insert(normalize_term(term));
    }

    /// Insert `hyper -> hypo`. Idempotent; rejects self loops and cycles.
    pub fn add_edge(&mut self, hyper: &str, hypo: &str) -> Result<()> {
        let hyper = normalize_term(hyper);
        let hypo = normalize_term(hypo);
        if hyper == hypo {
            return Err(Error::SelfLoop(hyper));
        }
        if self.children.get(&hyper).is_some_and(|c| c.contains(&hypo)) {
            return Ok(());
        }
        if self.reaches(&hypo, &hyper) {
            return Err(Error::Cycle { hyper, hypo });
        }
        self.nodes.insert(hyper.clone());
        self.nodes.insert(hypo.clone());
        self.children
            .entry(hyper.clone())
            .or_default()
            .insert(hypo.clone());
        self.parents.entry(hypo).or_default().insert(hyper);
        Ok(())
    }

    /// Whether `to` is reachable from `from` following hypernym -> hyponym edges.
    fn reaches(&self, from: &str, to: &str) -> bool {
        if !self.nodes.contains(from) || !self.nodes.contains(to) {
            return false;
        }
        let mut stack = vec![from];
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            if !seen.insert(n) {
                continue;
            }
            if let Some(cs) = self.children.get(n) {
                stack.extend(cs.iter().map(String::as_str));
            }
        }
        false
    }

    fn closure(
        &self,
        start: &str,
        next: &BTreeMap<String, BTreeSet<String>>,
    ) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<&str> = next
            .get(start)
            .map(|s| s.iter().map(String::as_str).collect())
            .unwrap_or_default();
        while let Some(n) = stack.pop() {
            if out.insert(n.to_string()) {
                if let Some(s) = next.get(n) {
                    stack.extend(s.iter().map(String::as_str));
                }
            }
        }
        out
    }

    /// Structural neighbours of `term`. The query term itself is never included.
    pub fn relatives(&self, term: &str, kind: Relation) -> Result<BTreeSet<String>> {
        let term = normalize_term(term);
        if !self.nodes.contains(&term) {
            return Err(Error::UnknownTerm(term));
        }
        let direct = |map: &BTreeMap<String, BTreeSet<String>>| {
            map.get(&term).cloned().unwrap_or_default()
        };
        let out = match kind {
            Relation::Parents => direct(&self.parents),
            Relation::Children => direct(&self.children),
            Relation::Ancestors => self.closure(&term, &self.parents),
            Relation::Descendants => self.closure(&term, &self.children),
            Relation::Siblings => {
                let mut s = BTreeSet::new();
                for p in direct(&self.parents) {
                    if let Some(cs) = self.children.get(&p) {
                        s.extend(cs.iter().filter(|c| **c != term).cloned());
                    }
                }
                s
            }
        };
        Ok(out)
    }

    /// Nodes grouped by the length of the longest path from any root.
    ///
    /// Every edge crosses at least one level, so parents always come before
    /// their children. Levels are sorted lexicographically.
    pub fn level_order_levels(&self) -> Vec<Vec<String>> {
        let mut depth: BTreeMap<&str, usize> = BTreeMap::new();
        let mut indegree: BTreeMap<&str, usize> = self
            .nodes
            .iter()
            .map(|n| (n.as_str(), self.parents.get(n).map_or(0, BTreeSet::len)))
            .collect();
        let mut queue: VecDeque<&str> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(n, _)| *n)
            .collect();
        for n in &queue {
            depth.insert(n, 0);
        }
        while let Some(n) = queue.pop_front() {
            let dn = depth[n];
            if let Some(cs) = self.children.get(n) {
                for c in cs {
                    let dc = depth.entry(c.as_str()).or_insert(0);
                    *dc = (*dc).max(dn + 1);
                    let deg = indegree.get_mut(c.as_str()).expect("child is a node");
                    *deg -= 1;
                    if *deg == 0 {
                        queue.push_back(c.as_str());
                    }
                }
            }
        }
        let max = depth.values().copied().max();
        let mut levels = vec![Vec::new(); max.map_or(0, |m| m + 1)];
        for (n, d) in depth {
            levels[d].push(n.to_string());
        }
        levels
    }

    /// Kahn's algorithm over the whole graph.
    pub fn is_acyclic(&self) -> bool {
        let total: usize = self.level_order_levels().iter().map(Vec::len).sum();
        total == self.nodes.len()
    }

    pub fn parse_edges(text: &str) -> Result<Self> {
        let mut tax = Taxonomy::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 {
                return Err(Error::parse(
                    line_no,
                    format!("expected `hypernym<TAB>hyponym`, got {} field(s)", fields.len()),
                ));
            }
            if fields.iter().any(|f| f.is_empty()) {
                return Err(Error::parse(line_no, "empty term"));
            }
            tax.add_edge(fields[0], fields[1])?;
        }
        Ok(tax)
    }

    pub fn load_edges(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_edges(&text).map_err(|e| e.with_path(path))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (h, c) in self.edges() {
            let _ = writeln!(out, "{h}\t{c}");
        }
        out
    }

    pub fn save_edges(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}
