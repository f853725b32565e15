//! Symmetric synonym groups per field, loaded from a line-oriented text file.
//!
//! File format: one group per line, `<category>: term, term, ...` where the
//! category is `unit`, `sample` or `test`. Lines starting with `#` and blank
//! lines are ignored. Terms are normalized on load; a term may belong to at
//! most one group per category.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Field, ReferenceRecord};
use crate::text::normalize_text;

const SEED: &str = include_str!("../data/seed_synonyms.txt");

#[derive(Debug, Clone, Default, PartialEq)]
struct Category {
    groups: Vec<Vec<String>>,
    lookup: HashMap<String, usize>,
}

impl Category {
    fn push_group(&mut self, field: Field, terms: Vec<String>) -> Result<()> {
        let mut group: Vec<String> = Vec::with_capacity(terms.len());
        for t in terms {
            if !t.is_empty() && !group.contains(&t) {
                group.push(t);
            }
        }
        if group.is_empty() {
            return Ok(());
        }
        let id = self.groups.len();
        for t in &group {
            if self.lookup.contains_key(t) {
                return Err(Error::Overlap {
                    field,
                    term: t.clone(),
                });
            }
        }
        for t in &group {
            self.lookup.insert(t.clone(), id);
        }
        self.groups.push(group);
        Ok(())
    }
}

/// Synonym groups for the test, sample and unit fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDictionary", into = "RawDictionary")]
pub struct SynonymDictionary {
    categories: [Category; 3],
}

#[derive(Serialize, Deserialize)]
struct RawDictionary {
    test: Vec<Vec<String>>,
    sample: Vec<Vec<String>>,
    unit: Vec<Vec<String>>,
}

impl TryFrom<RawDictionary> for SynonymDictionary {
    type Error = Error;

    fn try_from(raw: RawDictionary) -> Result<Self> {
        SynonymDictionary::from_groups(raw.test, raw.sample, raw.unit)
    }
}

impl From<SynonymDictionary> for RawDictionary {
    fn from(d: SynonymDictionary) -> Self {
        let [t, s, u] = d.categories;
        RawDictionary {
            test: t.groups,
            sample: s.groups,
            unit: u.groups,
        }
    }
}

impl SynonymDictionary {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The dictionary shipped with the crate (unit notation variants, sample
    /// aliases and a handful of test-name abbreviations).
    pub fn seed() -> Self {
        Self::parse(SEED).expect("bundled seed dictionary is valid")
    }

    pub fn from_groups<S: AsRef<str>>(
        test: Vec<Vec<S>>,
        sample: Vec<Vec<S>>,
        unit: Vec<Vec<S>>,
    ) -> Result<Self> {
        let mut d = Self::default();
        for (field, groups) in [(Field::Test, test), (Field::Sample, sample), (Field::Unit, unit)] {
            for g in groups {
                let terms = g.iter().map(|t| normalize_text(t.as_ref())).collect();
                d.categories[field.index()].push_group(field, terms)?;
            }
        }
        Ok(d)
    }

    pub fn parse(source: &str) -> Result<Self> {
        let mut d = Self::default();
        for (i, line) in source.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (prefix, rest) = line.split_once(':').ok_or_else(|| Error::Parse {
                line: line_no,
                message: "expected '<category>: term, term, ...'".into(),
            })?;
            let field: Field = prefix.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("unknown category '{}'", prefix.trim()),
            })?;
            let terms: Vec<String> = rest
                .split(',')
                .map(normalize_text)
                .filter(|t| !t.is_empty())
                .collect();
            if terms.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "group has no terms".into(),
                });
            }
            d.categories[field.index()].push_group(field, terms)?;
        }
        Ok(d)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text)
    }

    /// Serializes back to the line format accepted by [`parse`](Self::parse).
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for field in [Field::Unit, Field::Sample, Field::Test] {
            for g in self.groups(field) {
                let _ = writeln!(out, "{}: {}", field, g.join(", "));
            }
        }
        out
    }

    pub fn groups(&self, field: Field) -> &[Vec<String>] {
        &self.categories[field.index()].groups
    }

    /// Group index of an already-normalized term.
    pub fn group_id(&self, normalized: &str, field: Field) -> Option<usize> {
        self.categories[field.index()].lookup.get(normalized).copied()
    }

    /// Members of the group containing an already-normalized term, if any.
    pub fn members(&self, normalized: &str, field: Field) -> Option<&[String]> {
        self.group_id(normalized, field)
            .map(|id| self.categories[field.index()].groups[id].as_slice())
    }

    /// The group containing `normalize(term)`, or the singleton `{normalize(term)}`.
    pub fn synonym_group_of(&self, term: &str, field: Field) -> Vec<String> {
        let n = normalize_text(term);
        match self.members(&n, field) {
            Some(m) => m.to_vec(),
            None => vec![n],
        }
    }

    /// True when the two already-normalized terms are equal or share a group.
    pub fn equivalent(&self, a: &str, b: &str, field: Field) -> bool {
        if a == b {
            return true;
        }
        match (self.group_id(a, field), self.group_id(b, field)) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        }
    }

    pub fn len(&self, field: Field) -> usize {
        self.groups(field).len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.iter().all(|c| c.groups.is_empty())
    }

    /// Folds reference-record test synonyms into the test groups. A record's
    /// test name and synonyms become one group; groups that end up sharing a
    /// term are merged.
    pub fn merge_record_synonyms(&mut self, records: &[ReferenceRecord]) {
        let cat = &mut self.categories[Field::Test.index()];
        let mut groups: Vec<Vec<String>> = std::mem::take(&mut cat.groups);
        let mut lookup: HashMap<String, usize> = std::mem::take(&mut cat.lookup);
        // union-find over group ids; merged groups are emptied
        let mut parent: Vec<usize> = (0..groups.len()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for r in records {
            if r.synonyms.is_empty() {
                continue;
            }
            let mut terms = vec![r.triad.test().to_string()];
            terms.extend(r.synonyms.iter().cloned());
            let mut root: Option<usize> = None;
            for t in &terms {
                if let Some(&g) = lookup.get(t) {
                    let g = find(&mut parent, g);
                    root = Some(match root {
                        None => g,
                        Some(r0) if r0 == g => r0,
                        Some(r0) => {
                            let (keep, gone) = (r0.min(g), r0.max(g));
                            parent[gone] = keep;
                            let moved = std::mem::take(&mut groups[gone]);
                            for m in moved {
                                if !groups[keep].contains(&m) {
                                    groups[keep].push(m);
                                }
                            }
                            keep
                        }
                    });
                }
            }
            let root = root.unwrap_or_else(|| {
                groups.push(Vec::new());
                parent.push(groups.len() - 1);
                groups.len() - 1
            });
            for t in terms {
                if t.is_empty() {
                    continue;
                }
                if !groups[root].contains(&t) {
                    groups[root].push(t.clone());
                }
                lookup.insert(t, root);
            }
        }
        // compact and rebuild the lookup
        let mut compact = Category::default();
        for g in groups.into_iter().filter(|g| !g.is_empty()) {
            compact
                .push_group(Field::Test, g)
                .expect("merged groups are disjoint");
        }
        *cat = compact;
    }
}
