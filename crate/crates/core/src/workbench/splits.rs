//! Split-file directories.
//!
//! A directory holds
//!
//! * `states.txt`, `objects.txt`: one vocabulary token per line;
//! * `train_pairs.txt`, `{val,test}_{seen,unseen}_pairs.txt`: one
//!   `state object` pair per line;
//! * `samples.txt`: one `id state object split` record per line, where
//!   `split` is `train`, `val` or `test`;
//! * optionally `features.txt`: one `id v1 v2 ...` row per sample.
//!
//! Blank lines and lines starting with `#` are ignored.

use std::collections::{BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{CompositionSpace, Pair, World};
use crate::numeric::Tensor;
use crate::training::Split;

use super::synthetic::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub const ALL: [SplitTag; 3] = [SplitTag::Train, SplitTag::Val, SplitTag::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::Integrity(format!("unknown split tag '{other}'"))),
        }
    }
}

/// Pair and sample counts of one split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub seen_pairs: usize,
    pub unseen_pairs: usize,
    pub samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: SplitCounts,
    pub val: SplitCounts,
    pub test: SplitCounts,
}

impl SplitManifest {
    pub fn get(&self, tag: SplitTag) -> SplitCounts {
        match tag {
            SplitTag::Train => self.train,
            SplitTag::Val => self.val,
            SplitTag::Test => self.test,
        }
    }

    /// Table rows in the order train `|Ys| |X|`, val `|Ys| |Yu| |X|`,
    /// test `|Ys| |Yu| |X|`.
    pub fn row(&self) -> [usize; 8] {
        [
            self.train.seen_pairs,
            self.train.samples,
            self.val.seen_pairs,
            self.val.unseen_pairs,
            self.val.samples,
            self.test.seen_pairs,
            self.test.unseen_pairs,
            self.test.samples,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: String,
    pub pair: Pair,
    pub split: SplitTag,
}

/// Contents of a split directory after validation.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitFiles {
    pub states: Vec<String>,
    pub objects: Vec<String>,
    pub train_pairs: Vec<Pair>,
    pub val_seen: Vec<Pair>,
    pub val_unseen: Vec<Pair>,
    pub test_seen: Vec<Pair>,
    pub test_unseen: Vec<Pair>,
    pub samples: Vec<SampleRecord>,
}

impl SplitFiles {
    pub fn manifest(&self) -> SplitManifest {
        let count = |tag| self.samples.iter().filter(|r| r.split == tag).count();
        SplitManifest {
            train: SplitCounts { seen_pairs: self.train_pairs.len(), unseen_pairs: 0, samples: count(SplitTag::Train) },
            val: SplitCounts {
                seen_pairs: self.val_seen.len(),
                unseen_pairs: self.val_unseen.len(),
                samples: count(SplitTag::Val),
            },
            test: SplitCounts {
                seen_pairs: self.test_seen.len(),
                unseen_pairs: self.test_unseen.len(),
                samples: count(SplitTag::Test),
            },
        }
    }

    /// Closed-world space of one split: its seen and unseen pair lists.
    pub fn space(&self, tag: SplitTag) -> Result<CompositionSpace> {
        let (seen, unseen): (&[Pair], &[Pair]) = match tag {
            SplitTag::Train => (&self.train_pairs, &[]),
            SplitTag::Val => (&self.val_seen, &self.val_unseen),
            SplitTag::Test => (&self.test_seen, &self.test_unseen),
        };
        CompositionSpace::new(
            self.states.clone(),
            self.objects.clone(),
            seen.iter().copied(),
            unseen.iter().copied(),
            World::Closed,
        )
    }

    fn validate(&self) -> Result<()> {
        let train: BTreeSet<Pair> = self.train_pairs.iter().copied().collect();
        for (tag, seen, unseen) in [
            (SplitTag::Val, &self.val_seen, &self.val_unseen),
            (SplitTag::Test, &self.test_seen, &self.test_unseen),
        ] {
            if let Some(p) = seen.iter().find(|p| !train.contains(p)) {
                return Err(Error::Integrity(format!(
                    "{tag} seen pair ({}) is not a training pair",
                    self.pair_name(*p)
                )));
            }
            if let Some(p) = unseen.iter().find(|p| train.contains(p) || seen.contains(p)) {
                return Err(Error::Integrity(format!(
                    "{tag} unseen pair ({}) overlaps the seen pairs",
                    self.pair_name(*p)
                )));
            }
        }
        let set = |ps: &[&Vec<Pair>]| -> BTreeSet<Pair> { ps.iter().flat_map(|v| v.iter().copied()).collect() };
        let val = set(&[&self.val_seen, &self.val_unseen]);
        let test = set(&[&self.test_seen, &self.test_unseen]);
        let mut ids = BTreeSet::new();
        for r in &self.samples {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Integrity(format!("duplicate sample id '{}'", r.id)));
            }
            let allowed = match r.split {
                SplitTag::Train => train.contains(&r.pair),
                SplitTag::Val => val.contains(&r.pair),
                SplitTag::Test => test.contains(&r.pair),
            };
            if !allowed {
                return Err(Error::Integrity(format!(
                    "sample '{}' has pair ({}) outside the {} pair lists",
                    r.id,
                    self.pair_name(r.pair),
                    r.split
                )));
            }
        }
        Ok(())
    }

    fn pair_name(&self, p: Pair) -> String {
        format!("{} {}", self.states[p.state], self.objects[p.object])
    }
}

/// Reads and validates a split directory.
pub fn load_splits(dir: &Path) -> Result<SplitFiles> {
    let states = read_vocab(&dir.join("states.txt"))?;
    let objects = read_vocab(&dir.join("objects.txt"))?;
    let vocab = Vocab::new(&states, &objects);
    let pairs = |name: &str| read_pairs(&dir.join(name), &vocab);
    let mut files = SplitFiles {
        train_pairs: pairs("train_pairs.txt")?,
        val_seen: pairs("val_seen_pairs.txt")?,
        val_unseen: pairs("val_unseen_pairs.txt")?,
        test_seen: pairs("test_seen_pairs.txt")?,
        test_unseen: pairs("test_unseen_pairs.txt")?,
        samples: read_samples(&dir.join("samples.txt"), &vocab)?,
        states,
        objects,
    };
    files.train_pairs.sort();
    files.val_seen.sort();
    files.val_unseen.sort();
    files.test_seen.sort();
    files.test_unseen.sort();
    files.validate()?;
    Ok(files)
}

/// Writes every file except `features.txt`.
pub fn write_splits(dir: &Path, files: &SplitFiles) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("states.txt"), lines(files.states.iter()))?;
    fs::write(dir.join("objects.txt"), lines(files.objects.iter()))?;
    let pair_lines = |ps: &[Pair]| lines(ps.iter().map(|p| files.pair_name(*p)));
    fs::write(dir.join("train_pairs.txt"), pair_lines(&files.train_pairs))?;
    fs::write(dir.join("val_seen_pairs.txt"), pair_lines(&files.val_seen))?;
    fs::write(dir.join("val_unseen_pairs.txt"), pair_lines(&files.val_unseen))?;
    fs::write(dir.join("test_seen_pairs.txt"), pair_lines(&files.test_seen))?;
    fs::write(dir.join("test_unseen_pairs.txt"), pair_lines(&files.test_unseen))?;
    let samples = files
        .samples
        .iter()
        .map(|r| format!("{} {} {}", r.id, files.pair_name(r.pair), r.split));
    fs::write(dir.join("samples.txt"), lines(samples))?;
    Ok(())
}

/// Writes a generated dataset as a split directory with features.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let mut files = SplitFiles {
        states: ds.space.states().to_vec(),
        objects: ds.space.objects().to_vec(),
        train_pairs: ds.space.seen().to_vec(),
        val_seen: Vec::new(),
        val_unseen: Vec::new(),
        test_seen: Vec::new(),
        test_unseen: Vec::new(),
        samples: Vec::new(),
    };
    let mut features = String::new();
    for (tag, split) in [(SplitTag::Train, &ds.train), (SplitTag::Val, &ds.val), (SplitTag::Test, &ds.test)] {
        let mut seen = BTreeSet::new();
        let mut unseen = BTreeSet::new();
        for (i, &p) in split.labels.iter().enumerate() {
            if ds.space.is_seen(p) {
                seen.insert(p);
            } else {
                unseen.insert(p);
            }
            let id = format!("{tag}_{i:06}");
            features.push_str(&id);
            for v in split.x.row(i) {
                write!(features, " {v}").expect("string write");
            }
            features.push('\n');
            files.samples.push(SampleRecord { id, pair: p, split: tag });
        }
        match tag {
            SplitTag::Train => {}
            SplitTag::Val => (files.val_seen, files.val_unseen) = (seen.into_iter().collect(), unseen.into_iter().collect()),
            SplitTag::Test => (files.test_seen, files.test_unseen) = (seen.into_iter().collect(), unseen.into_iter().collect()),
        }
    }
    files.validate()?;
    write_splits(dir, &files)?;
    fs::write(dir.join("features.txt"), features)?;
    Ok(())
}

/// Loads a split directory that carries `features.txt` as a dataset.
///
/// The returned space holds the training pairs as seen and the union of
/// the validation and test unseen pairs as unseen.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let files = load_splits(dir)?;
    let path = dir.join("features.txt");
    let text = fs::read_to_string(&path)?;
    let mut rows: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut width = None;
    for (n, line) in content_lines(&text) {
        let mut it = line.split_whitespace();
        let id = it.next().expect("non-empty line");
        let row = it
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Integrity(format!("{}:{n}: {e}", path.display())))?;
        if *width.get_or_insert(row.len()) != row.len() || row.is_empty() {
            return Err(Error::Integrity(format!("{}:{n}: ragged feature row", path.display())));
        }
        rows.insert(id, row);
    }
    let width = width.ok_or_else(|| Error::Integrity(format!("{} is empty", path.display())))?;
    let split = |tag: SplitTag| -> Result<Split> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for r in files.samples.iter().filter(|r| r.split == tag) {
            let row = rows
                .get(r.id.as_str())
                .ok_or_else(|| Error::Integrity(format!("no features for sample '{}'", r.id)))?;
            data.extend_from_slice(row);
            labels.push(r.pair);
        }
        if labels.is_empty() {
            return Ok(Split { x: Tensor::zeros(&[1, width]), labels, layers: None });
        }
        Split::new(Tensor::new(vec![labels.len(), width], data)?, labels)
    };
    let space = CompositionSpace::new(
        files.states.clone(),
        files.objects.clone(),
        files.train_pairs.iter().copied(),
        files.val_unseen.iter().chain(&files.test_unseen).copied(),
        World::Closed,
    )?;
    Ok(Dataset {
        name: dir.file_name().map_or("dataset".into(), |n| n.to_string_lossy().into_owned()),
        space,
        train: split(SplitTag::Train)?,
        val: split(SplitTag::Val)?,
        test: split(SplitTag::Test)?,
    })
}

struct Vocab {
    states: HashMap<String, usize>,
    objects: HashMap<String, usize>,
}

impl Vocab {
    fn new(states: &[String], objects: &[String]) -> Self {
        let index = |v: &[String]| v.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { states: index(states), objects: index(objects) }
    }

    fn pair(&self, state: &str, object: &str, at: &str) -> Result<Pair> {
        let s = self
            .states
            .get(state)
            .ok_or_else(|| Error::Vocabulary(format!("{at}: unknown state '{state}'")))?;
        let o = self
            .objects
            .get(object)
            .ok_or_else(|| Error::Vocabulary(format!("{at}: unknown object '{object}'")))?;
        Ok(Pair::new(*s, *o))
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn lines<S: AsRef<str>>(items: impl Iterator<Item = S>) -> String {
    let mut out = String::new();
    for s in items {
        out.push_str(s.as_ref());
        out.push('\n');
    }
    out
}

fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (n, line) in content_lines(&text) {
        if line.split_whitespace().count() != 1 {
            return Err(Error::Integrity(format!("{}:{n}: expected one token", path.display())));
        }
        if !seen.insert(line.to_string()) {
            return Err(Error::Integrity(format!("{}:{n}: duplicate token '{line}'", path.display())));
        }
        out.push(line.to_string());
    }
    Ok(out)
}

fn read_pairs(path: &Path, vocab: &Vocab) -> Result<Vec<Pair>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeSet::new();
    for (n, line) in content_lines(&text) {
        let at = format!("{}:{n}", path.display());
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 2 {
            return Err(Error::Integrity(format!("{at}: expected 'state object'")));
        }
        if !out.insert(vocab.pair(f[0], f[1], &at)?) {
            return Err(Error::Integrity(format!("{at}: duplicate pair '{line}'")));
        }
    }
    Ok(out.into_iter().collect())
}

fn read_samples(path: &Path, vocab: &Vocab) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in content_lines(&text) {
        let at = format!("{}:{n}", path.display());
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(Error::Integrity(format!("{at}: expected 'id state object split'")));
        }
        out.push(SampleRecord {
            id: f[0].to_string(),
            pair: vocab.pair(f[1], f[2], &at)?,
            split: match f[3] {
                "train" => SplitTag::Train,
                "val" => SplitTag::Val,
                "test" => SplitTag::Test,
                other => return Err(Error::Integrity(format!("{at}: unknown split tag '{other}'"))),
            },
        });
    }
    Ok(out)
}
