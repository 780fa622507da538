//! Class hierarchy and the multi-label annotation model.
//!
//! A [`Taxonomy`] is a forest of classes linked child-to-parent. Classes with
//! children are *parents*; all others are *leaves*. An [`AnnotationSet`] holds
//! per-instance label sets plus optional image-level verification lists, and
//! caches the per-class image counts every other module reads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of hierarchy levels, counting the root level.
pub const MAX_LEVELS: usize = 5;

/// Dense class index in `[0, C)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub usize);

impl ClassId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<usize> for ClassId {
    fn from(i: usize) -> Self {
        ClassId(i)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    names: Vec<String>,
    parent: Vec<Option<ClassId>>,
    depth: Vec<usize>,
    children: Vec<Vec<ClassId>>,
}

impl Taxonomy {
    /// Builds a validated taxonomy. `parent[i]` is the parent of class `i`.
    pub fn new(names: Vec<String>, parent: Vec<Option<ClassId>>) -> Result<Self> {
        assert_eq!(names.len(), parent.len(), "one parent slot per class");
        let n = names.len();
        for (class, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                if p.index() >= n {
                    return Err(Error::DanglingParent {
                        class,
                        parent: p.index() as i64,
                    });
                }
            }
        }

        let mut depth = vec![usize::MAX; n];
        for start in 0..n {
            if depth[start] != usize::MAX {
                continue;
            }
            // Walk up until a root or an already-resolved class.
            let mut chain = vec![start];
            let mut cur = start;
            let base = loop {
                match parent[cur] {
                    None => break 0,
                    Some(p) => {
                        let p = p.index();
                        if depth[p] != usize::MAX {
                            break depth[p] + 1;
                        }
                        if chain.contains(&p) {
                            return Err(Error::Cycle(p));
                        }
                        chain.push(p);
                        cur = p;
                    }
                }
            };
            // chain[last] is the topmost unresolved class.
            let top = chain.len() - 1;
            for (k, &c) in chain.iter().enumerate() {
                depth[c] = base + (top - k);
            }
        }

        for (class, &d) in depth.iter().enumerate() {
            if d + 1 > MAX_LEVELS {
                return Err(Error::TooDeep {
                    class,
                    levels: d + 1,
                    max: MAX_LEVELS,
                });
            }
        }

        let mut children = vec![Vec::new(); n];
        for (c, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[p.index()].push(ClassId(c));
            }
        }

        Ok(Taxonomy {
            names,
            parent,
            depth,
            children,
        })
    }

    /// A taxonomy with `n` unrelated root classes named `c0`, `c1`, ...
    pub fn flat(n: usize) -> Self {
        let names = (0..n).map(|i| format!("c{i}")).collect();
        Taxonomy::new(names, vec![None; n]).expect("flat taxonomy is always valid")
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, c: ClassId) -> &str {
        &self.names[c.index()]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parent(&self, c: ClassId) -> Option<ClassId> {
        self.parent[c.index()]
    }

    /// Zero for roots.
    pub fn depth(&self, c: ClassId) -> usize {
        self.depth[c.index()]
    }

    pub fn children(&self, c: ClassId) -> &[ClassId] {
        &self.children[c.index()]
    }

    pub fn is_leaf(&self, c: ClassId) -> bool {
        self.children[c.index()].is_empty()
    }

    pub fn leaves(&self) -> Vec<ClassId> {
        self.ids().filter(|&c| self.is_leaf(c)).collect()
    }

    pub fn parents(&self) -> Vec<ClassId> {
        self.ids().filter(|&c| !self.is_leaf(c)).collect()
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> {
        (0..self.names.len()).map(ClassId)
    }

    /// Strict ancestors ordered from the immediate parent up to the root.
    pub fn ancestors(&self, c: ClassId) -> Vec<ClassId> {
        let mut out = Vec::with_capacity(self.depth(c));
        let mut cur = self.parent(c);
        while let Some(p) = cur {
            out.push(p);
            cur = self.parent(p);
        }
        out
    }

    /// True when `a` is a strict ancestor of `c`.
    pub fn is_ancestor(&self, a: ClassId, c: ClassId) -> bool {
        let mut cur = self.parent(c);
        while let Some(p) = cur {
            if p == a {
                return true;
            }
            cur = self.parent(p);
        }
        false
    }

    /// `c` together with all of its ancestors.
    pub fn closure(&self, c: ClassId) -> Vec<ClassId> {
        let mut out = vec![c];
        out.extend(self.ancestors(c));
        out
    }

    pub fn validate_id(&self, id: usize) -> Result<ClassId> {
        if id < self.num_classes() {
            Ok(ClassId(id))
        } else {
            Err(Error::InvalidClass {
                id,
                num_classes: self.num_classes(),
            })
        }
    }

    /// Reads `index<TAB>name<TAB>parent_index` rows; `-1` marks a root. A first
    /// line whose leading field is not an integer is treated as a header.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }

    pub fn parse_tsv(text: &str, origin: &Path) -> Result<Self> {
        let mut rows: BTreeMap<usize, (String, i64, usize)> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if lineno == 1 && fields[0].trim().parse::<i64>().is_err() {
                continue;
            }
            if fields.len() != 3 {
                return Err(Error::parse(
                    origin,
                    lineno,
                    format!("expected 3 tab-separated fields, found {}", fields.len()),
                ));
            }
            let index: usize = fields[0]
                .trim()
                .parse()
                .map_err(|_| Error::parse(origin, lineno, format!("bad index {:?}", fields[0])))?;
            let parent: i64 = fields[2]
                .trim()
                .parse()
                .map_err(|_| Error::parse(origin, lineno, format!("bad parent {:?}", fields[2])))?;
            if parent < -1 {
                return Err(Error::parse(origin, lineno, "parent must be -1 or a class index"));
            }
            if rows
                .insert(index, (fields[1].to_string(), parent, lineno))
                .is_some()
            {
                return Err(Error::parse(origin, lineno, format!("duplicate index {index}")));
            }
        }

        let n = rows.len();
        let mut names = Vec::with_capacity(n);
        let mut parent = Vec::with_capacity(n);
        for (expected, (index, (name, p, lineno))) in rows.into_iter().enumerate() {
            if index != expected {
                return Err(Error::parse(
                    origin,
                    lineno,
                    format!("class indices must be contiguous from 0; missing {expected}"),
                ));
            }
            if p >= n as i64 {
                return Err(Error::DanglingParent {
                    class: index,
                    parent: p,
                });
            }
            names.push(name);
            parent.push(if p < 0 { None } else { Some(ClassId(p as usize)) });
        }
        Taxonomy::new(names, parent)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("index\tname\tparent_index\n");
        for c in self.ids() {
            let p = self.parent(c).map_or(-1, |p| p.index() as i64);
            out.push_str(&format!("{}\t{}\t{}\n", c, self.name(c), p));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// One annotated object (a "box" without geometry).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub image_id: String,
    pub labels: BTreeSet<ClassId>,
}

impl Instance {
    pub fn new(image_id: impl Into<String>, labels: impl IntoIterator<Item = ClassId>) -> Self {
        Instance {
            image_id: image_id.into(),
            labels: labels.into_iter().collect(),
        }
    }
}

/// Image-level verification lists.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImageLabels {
    pub verified_exist: BTreeSet<ClassId>,
    pub verified_not_exist: BTreeSet<ClassId>,
}

/// How a class stands with respect to an image's verification lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verification {
    Exists,
    NotExists,
    Unverified,
}

/// Per-class statistics derived from an annotation set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCounts {
    /// `n_i`: distinct images with at least one instance carrying class `i`.
    pub images: Vec<u64>,
    /// Instances carrying class `i`; diagnostics only.
    pub instances: Vec<u64>,
    /// `N`: distinct images.
    pub total_images: u64,
}

/// Counts images (not instances) per class.
pub fn compute_counts(instances: &[Instance], num_classes: usize) -> ClassCounts {
    let mut per_image: BTreeMap<&str, BTreeSet<ClassId>> = BTreeMap::new();
    let mut inst = vec![0u64; num_classes];
    for instance in instances {
        let entry = per_image.entry(instance.image_id.as_str()).or_default();
        for &l in &instance.labels {
            inst[l.index()] += 1;
            entry.insert(l);
        }
    }
    let mut images = vec![0u64; num_classes];
    for labels in per_image.values() {
        for l in labels {
            images[l.index()] += 1;
        }
    }
    ClassCounts {
        images,
        instances: inst,
        total_images: per_image.len() as u64,
    }
}

/// Largest per-class image count divided by the smallest nonzero one.
pub fn imbalance_magnitude(counts: &[u64]) -> Result<f64> {
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().filter(|&n| n > 0).min();
    match min {
        Some(min) if max > 0 => Ok(max as f64 / min as f64),
        _ => Err(Error::NoPositiveCounts),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    image_id: String,
    labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    verified_exist: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    verified_not_exist: Option<Vec<usize>>,
}

/// Immutable collection of annotated instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationSet {
    num_classes: usize,
    instances: Vec<Instance>,
    image_labels: BTreeMap<String, ImageLabels>,
    image_ids: Vec<String>,
    instance_image: Vec<usize>,
    image_instances: Vec<Vec<usize>>,
    counts: ClassCounts,
}

impl AnnotationSet {
    /// Images without an `image_labels` entry treat every class as verified-exist.
    pub fn new(
        num_classes: usize,
        instances: Vec<Instance>,
        image_labels: BTreeMap<String, ImageLabels>,
    ) -> Result<Self> {
        let check = |c: &ClassId| -> Result<()> {
            if c.index() >= num_classes {
                Err(Error::InvalidClass {
                    id: c.index(),
                    num_classes,
                })
            } else {
                Ok(())
            }
        };
        for (k, inst) in instances.iter().enumerate() {
            if inst.labels.is_empty() {
                return Err(Error::Annotation(format!(
                    "instance {k} on image {:?} has no labels",
                    inst.image_id
                )));
            }
            inst.labels.iter().try_for_each(check)?;
        }
        for (image, lists) in &image_labels {
            lists.verified_exist.iter().try_for_each(check)?;
            lists.verified_not_exist.iter().try_for_each(check)?;
            if let Some(c) = lists.verified_exist.intersection(&lists.verified_not_exist).next() {
                return Err(Error::Annotation(format!(
                    "image {image:?} lists class {c} as both verified-exist and verified-not-exist"
                )));
            }
        }

        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut image_ids = Vec::new();
        let mut image_instances: Vec<Vec<usize>> = Vec::new();
        let mut instance_image = Vec::with_capacity(instances.len());
        for (k, inst) in instances.iter().enumerate() {
            let idx = *index.entry(inst.image_id.as_str()).or_insert_with(|| {
                image_ids.push(inst.image_id.clone());
                image_instances.push(Vec::new());
                image_ids.len() - 1
            });
            image_instances[idx].push(k);
            instance_image.push(idx);
        }

        let counts = compute_counts(&instances, num_classes);
        Ok(AnnotationSet {
            num_classes,
            instances,
            image_labels,
            image_ids,
            instance_image,
            image_instances,
            counts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn counts(&self) -> &ClassCounts {
        &self.counts
    }

    /// Distinct image ids in order of first appearance.
    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn num_images(&self) -> usize {
        self.image_ids.len()
    }

    /// Index into [`Self::image_ids`] of the image holding instance `k`.
    pub fn image_of(&self, k: usize) -> usize {
        self.instance_image[k]
    }

    /// Instance indices belonging to image `idx`.
    pub fn instances_of(&self, idx: usize) -> &[usize] {
        &self.image_instances[idx]
    }

    pub fn image_labels(&self) -> &BTreeMap<String, ImageLabels> {
        &self.image_labels
    }

    pub fn verification(&self, image_id: &str, c: ClassId) -> Verification {
        match self.image_labels.get(image_id) {
            None => Verification::Exists,
            Some(lists) if lists.verified_exist.contains(&c) => Verification::Exists,
            Some(lists) if lists.verified_not_exist.contains(&c) => Verification::NotExists,
            Some(_) => Verification::Unverified,
        }
    }

    /// The sub-collection made of the given images (indices into
    /// [`Self::image_ids`]), in the order given.
    pub fn select_images(&self, images: &[usize]) -> AnnotationSet {
        let mut instances = Vec::new();
        let mut labels = BTreeMap::new();
        for &img in images {
            let id = &self.image_ids[img];
            for &k in &self.image_instances[img] {
                instances.push(self.instances[k].clone());
            }
            if let Some(l) = self.image_labels.get(id) {
                labels.insert(id.clone(), l.clone());
            }
        }
        AnnotationSet::new(self.num_classes, instances, labels)
            .expect("subset of a valid annotation set is valid")
    }

    /// One JSON object per line; repeated image ids merge their verification lists.
    pub fn load(path: &Path, num_classes: usize) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut instances = Vec::new();
        let mut image_labels: BTreeMap<String, ImageLabels> = BTreeMap::new();
        let to_ids = |v: &[usize], lineno: usize| -> Result<Vec<ClassId>> {
            v.iter()
                .map(|&id| {
                    if id < num_classes {
                        Ok(ClassId(id))
                    } else {
                        Err(Error::parse(
                            path,
                            lineno,
                            format!("class id {id} out of range for {num_classes} classes"),
                        ))
                    }
                })
                .collect()
        };
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
            if rec.labels.is_empty() {
                return Err(Error::parse(path, lineno, "instance has no labels"));
            }
            if rec.verified_exist.is_some() || rec.verified_not_exist.is_some() {
                let entry = image_labels.entry(rec.image_id.clone()).or_default();
                if let Some(v) = &rec.verified_exist {
                    entry.verified_exist.extend(to_ids(v, lineno)?);
                }
                if let Some(v) = &rec.verified_not_exist {
                    entry.verified_not_exist.extend(to_ids(v, lineno)?);
                }
            }
            instances.push(Instance::new(rec.image_id, to_ids(&rec.labels, lineno)?));
        }
        AnnotationSet::new(num_classes, instances, image_labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for inst in &self.instances {
            let lists = self.image_labels.get(&inst.image_id);
            let rec = Record {
                image_id: inst.image_id.clone(),
                labels: inst.labels.iter().map(|c| c.index()).collect(),
                verified_exist: lists.map(|l| l.verified_exist.iter().map(|c| c.index()).collect()),
                verified_not_exist: lists
                    .map(|l| l.verified_not_exist.iter().map(|c| c.index()).collect()),
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
