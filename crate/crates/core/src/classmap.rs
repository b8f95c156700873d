//! Token-to-hypernym-class mapping.
//!
//! A token is mapped when its corpus frequency is at most `f` and one of its
//! synsets (in sense-frequency order) has a hypernym path reaching depth `d`
//! with a noun synset at that depth. The first such path wins.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wordnet::WordNetDb;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FreqThreshold {
    Finite(u64),
    Infinite,
}

impl FreqThreshold {
    pub fn admits(self, freq: u64) -> bool {
        match self {
            FreqThreshold::Finite(f) => freq <= f,
            FreqThreshold::Infinite => true,
        }
    }
}

impl fmt::Display for FreqThreshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FreqThreshold::Finite(v) => write!(f, "{v}"),
            FreqThreshold::Infinite => write!(f, "inf"),
        }
    }
}

impl FromStr for FreqThreshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(FreqThreshold::Infinite),
            v => v
                .parse()
                .map(FreqThreshold::Finite)
                .map_err(|_| Error::Config(format!("bad frequency threshold `{s}`"))),
        }
    }
}

impl Serialize for FreqThreshold {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            FreqThreshold::Finite(v) => s.serialize_u64(*v),
            FreqThreshold::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for FreqThreshold {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(FreqThreshold::Finite(v)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// `depth` is 1-based: depth 1 is the root of a hypernym path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMapParams {
    pub depth: usize,
    pub freq_threshold: FreqThreshold,
}

impl ClassMapParams {
    pub fn new(depth: usize, freq_threshold: FreqThreshold) -> Result<Self> {
        let p = ClassMapParams {
            depth,
            freq_threshold,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("class-map depth must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenFrequencies {
    counts: HashMap<String, u64>,
    total: u64,
}

impl TokenFrequencies {
    pub fn get(&self, token: &str) -> u64 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.counts.contains_key(token)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn add(&mut self, token: &str, count: u64) {
        if count == 0 {
            return;
        }
        *self.counts.entry(token.to_string()).or_insert(0) += count;
        self.total += count;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Tokens ordered by descending count, ties broken lexicographically.
    pub fn sorted(&self) -> Vec<(&str, u64)> {
        let mut v: Vec<_> = self.iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for (tok, n) in self.sorted() {
            writeln!(w, "{tok}\t{n}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R, origin: &Path) -> Result<Self> {
        let mut f = TokenFrequencies::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let (tok, n) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(origin, i + 1, "expected token<TAB>count"))?;
            let n: u64 = n
                .trim()
                .parse()
                .map_err(|_| Error::parse(origin, i + 1, "bad count"))?;
            if n == 0 {
                return Err(Error::parse(origin, i + 1, "counts must be positive"));
            }
            f.add(tok, n);
        }
        Ok(f)
    }
}

impl<S: AsRef<str>> FromIterator<S> for TokenFrequencies {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        let mut f = TokenFrequencies::default();
        for t in iter {
            f.add(t.as_ref(), 1);
        }
        f
    }
}

/// Exact occurrence counts over a whitespace-tokenized stream.
pub fn count_frequencies<I, S>(tokens: I) -> TokenFrequencies
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    tokens.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub wordnet: String,
    pub corpus: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    mapping: BTreeMap<String, String>,
    pub params: ClassMapParams,
    pub provenance: Provenance,
}

impl ClassMap {
    pub fn new(params: ClassMapParams, provenance: Provenance) -> Self {
        ClassMap {
            mapping: BTreeMap::new(),
            params,
            provenance,
        }
    }

    pub fn insert(&mut self, token: impl Into<String>, class: impl Into<String>) {
        self.mapping.insert(token.into(), class.into());
    }

    pub fn class_of(&self, token: &str) -> Option<&str> {
        self.mapping.get(token).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    /// Pairs in lexicographic token order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.mapping.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.mapping.keys().map(String::as_str)
    }

    pub fn header(&self) -> String {
        format!(
            "# d={} f={} wordnet={} corpus={}",
            self.params.depth, self.params.freq_threshold, self.provenance.wordnet, self.provenance.corpus
        )
    }

    /// `extra_header` lines are written verbatim after the parameter header
    /// and must start with `#`.
    pub fn write_tsv<W: Write>(&self, mut w: W, extra_header: &[String]) -> Result<()> {
        writeln!(w, "{}", self.header())?;
        for h in extra_header {
            writeln!(w, "{h}")?;
        }
        for (tok, class) in self.iter() {
            writeln!(w, "{tok}\t{class}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>, extra_header: &[String]) -> Result<()> {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf, extra_header)?;
        fs::write(path, buf)?;
        Ok(())
    }

    /// Returns the map and any header lines beyond the parameter header.
    pub fn read_tsv<R: BufRead>(r: R, origin: &Path) -> Result<(Self, Vec<String>)> {
        let mut lines = r.lines().enumerate();
        let header = match lines.next() {
            Some((_, l)) => l?,
            None => return Err(Error::parse(origin, 1, "empty class map")),
        };
        let (params, provenance) =
            parse_header(&header).ok_or_else(|| Error::parse(origin, 1, "bad class map header"))?;
        let mut map = ClassMap::new(params, provenance);
        let mut extra = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.starts_with('#') {
                extra.push(line);
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (tok, class) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(origin, i + 1, "expected token<TAB>class"))?;
            map.insert(tok, class);
        }
        Ok((map, extra))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Vec<String>)> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|source| Error::Load {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_tsv(std::io::BufReader::new(file), path)
    }
}

fn parse_header(line: &str) -> Option<(ClassMapParams, Provenance)> {
    let body = line.strip_prefix('#')?;
    let mut depth = None;
    let mut f = None;
    let mut wordnet = None;
    let mut corpus = None;
    for kv in body.split_whitespace() {
        let (k, v) = kv.split_once('=')?;
        match k {
            "d" => depth = v.parse().ok(),
            "f" => f = v.parse().ok(),
            "wordnet" => wordnet = Some(v.to_string()),
            "corpus" => corpus = Some(v.to_string()),
            _ => {}
        }
    }
    Some((
        ClassMapParams {
            depth: depth?,
            freq_threshold: f?,
        },
        Provenance {
            wordnet: wordnet?,
            corpus: corpus?,
        },
    ))
}

/// Hypernym class of a single token, ignoring frequency.
pub fn token_class<'a>(db: &'a WordNetDb, token: &str, depth: usize) -> Option<&'a str> {
    for synset in db.synsets_for(token) {
        // ids come from the database itself, so lookup cannot fail
        let paths = db.hypernym_paths(&synset.id).ok()?;
        for path in paths {
            if let Some(s) = path.at_depth(depth) {
                if s.is_noun() {
                    return Some(s.id.as_str());
                }
            }
        }
    }
    None
}

pub fn build_classmap(
    freqs: &TokenFrequencies,
    db: &WordNetDb,
    params: ClassMapParams,
    corpus_id: &str,
) -> Result<ClassMap> {
    params.validate()?;
    let mut map = ClassMap::new(
        params,
        Provenance {
            wordnet: db.version().to_string(),
            corpus: corpus_id.to_string(),
        },
    );
    for (token, freq) in freqs.iter() {
        if !params.freq_threshold.admits(freq) {
            continue;
        }
        if let Some(class) = token_class(db, token, params.depth) {
            map.insert(token, class);
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMapStats {
    pub num_classes: usize,
    pub num_mapped_tokens: usize,
    /// class size → number of classes of that size
    pub class_size_histogram: BTreeMap<usize, usize>,
}

pub fn classmap_stats(map: &ClassMap) -> ClassMapStats {
    let mut sizes: HashMap<&str, usize> = HashMap::new();
    for (_, class) in map.iter() {
        *sizes.entry(class).or_insert(0) += 1;
    }
    let mut class_size_histogram = BTreeMap::new();
    for &n in sizes.values() {
        *class_size_histogram.entry(n).or_insert(0) += 1;
    }
    ClassMapStats {
        num_classes: sizes.len(),
        num_mapped_tokens: map.len(),
        class_size_histogram,
    }
}
