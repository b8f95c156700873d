//! In-memory WordNet noun graph loaded from a WNDB distribution (or from the
//! line-oriented fixture format used by the test suite).
//!
//! Synsets are named `lemma.pos.NN` following the usual convention: the first
//! lemma of the synset, its part-of-speech tag, and the 1-based position of the
//! synset among that lemma's senses in the index file.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pos {
    Noun,
    Verb,
    Adj,
    AdjSatellite,
    Adv,
}

impl Pos {
    pub fn tag(self) -> char {
        match self {
            Pos::Noun => 'n',
            Pos::Verb => 'v',
            Pos::Adj => 'a',
            Pos::AdjSatellite => 's',
            Pos::Adv => 'r',
        }
    }

    pub fn from_tag(tag: &str) -> Option<Pos> {
        match tag {
            "n" => Some(Pos::Noun),
            "v" => Some(Pos::Verb),
            "a" => Some(Pos::Adj),
            "s" => Some(Pos::AdjSatellite),
            "r" => Some(Pos::Adv),
            _ => None,
        }
    }

    /// The WNDB file family holding synsets of this tag (satellites live in `data.adj`).
    fn file_family(self) -> PosFile {
        match self {
            Pos::Noun => PosFile::Noun,
            Pos::Verb => PosFile::Verb,
            Pos::Adj | Pos::AdjSatellite => PosFile::Adj,
            Pos::Adv => PosFile::Adv,
        }
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum PosFile {
    Noun,
    Verb,
    Adj,
    Adv,
}

impl PosFile {
    const ALL: [PosFile; 4] = [PosFile::Noun, PosFile::Verb, PosFile::Adj, PosFile::Adv];

    fn suffix(self) -> &'static str {
        match self {
            PosFile::Noun => "noun",
            PosFile::Verb => "verb",
            PosFile::Adj => "adj",
            PosFile::Adv => "adv",
        }
    }

    fn from_pointer_tag(tag: &str) -> Option<PosFile> {
        Pos::from_tag(tag).map(Pos::file_family)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Synset {
    pub id: String,
    pub pos: Pos,
    pub lemmas: Vec<String>,
    pub hypernym_ids: Vec<String>,
}

impl Synset {
    pub fn is_noun(&self) -> bool {
        self.pos == Pos::Noun
    }
}

/// A root-to-synset chain of hypernym edges. Depths are 1-based: the root sits
/// at depth 1 and the queried synset at depth `len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HypernymPath<'a> {
    pub synsets: Vec<&'a Synset>,
}

impl<'a> HypernymPath<'a> {
    pub fn len(&self) -> usize {
        self.synsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.synsets.is_empty()
    }

    pub fn at_depth(&self, depth: usize) -> Option<&'a Synset> {
        depth.checked_sub(1).and_then(|i| self.synsets.get(i).copied())
    }

    pub fn root(&self) -> &'a Synset {
        self.synsets[0]
    }

    pub fn target(&self) -> &'a Synset {
        self.synsets[self.synsets.len() - 1]
    }

    pub fn ids(&self) -> Vec<&'a str> {
        self.synsets.iter().map(|s| s.id.as_str()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct WordNetDb {
    synsets: Vec<Synset>,
    parents: Vec<Vec<usize>>,
    by_id: HashMap<String, usize>,
    by_lemma: HashMap<String, Vec<usize>>,
    version: String,
}

/// Normalize a surface form the way WNDB index files store lemmas.
pub fn normalize_lemma(word: &str) -> String {
    word.trim().to_lowercase().replace(' ', "_")
}

impl WordNetDb {
    /// Load a database from either a WNDB directory or a fixture file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.is_file() {
            Self::load_fixture(path)
        } else {
            Self::load_wndb(path)
        }
    }

    pub fn load_fixture(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Load {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_fixture_str(&text, path)
    }

    /// Parse the fixture format: `synset_id<TAB>lemma1,lemma2<TAB>hypernym_id1,hypernym_id2`.
    /// Sense order for a lemma is the order in which its synsets appear.
    pub fn from_fixture_str(text: &str, origin: impl AsRef<Path>) -> Result<Self> {
        let origin = origin.as_ref();
        let mut synsets = Vec::new();
        let mut by_id = HashMap::new();
        let mut version = String::from("fixture");
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.trim_end_matches('\r');
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("wordnet=") {
                    version = v.trim().to_string();
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(origin, lineno, "expected 3 tab-separated fields"));
            }
            let id = fields[0].trim().to_string();
            let pos = parse_synset_id(&id)
                .ok_or_else(|| Error::parse(origin, lineno, format!("bad synset id `{id}`")))?;
            let lemmas = split_list(fields[1]);
            if lemmas.is_empty() {
                return Err(Error::parse(origin, lineno, "synset without lemmas"));
            }
            let hypernym_ids = split_list(fields[2]);
            if by_id.insert(id.clone(), synsets.len()).is_some() {
                return Err(Error::parse(origin, lineno, format!("duplicate synset `{id}`")));
            }
            synsets.push(Synset {
                id,
                pos,
                lemmas,
                hypernym_ids,
            });
        }

        let mut parents = Vec::with_capacity(synsets.len());
        for s in &synsets {
            let mut ps = Vec::with_capacity(s.hypernym_ids.len());
            for h in &s.hypernym_ids {
                let idx = by_id.get(h).ok_or_else(|| Error::UnknownSynset(h.clone()))?;
                ps.push(*idx);
            }
            parents.push(ps);
        }

        let mut by_lemma: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, s) in synsets.iter().enumerate() {
            for l in &s.lemmas {
                let senses = by_lemma.entry(normalize_lemma(l)).or_default();
                if !senses.contains(&i) {
                    senses.push(i);
                }
            }
        }

        Ok(WordNetDb {
            synsets,
            parents,
            by_id,
            by_lemma,
            version,
        })
    }

    /// Load the WNDB `index.*` / `data.*` files. `index.noun` and `data.noun`
    /// are required; the other parts of speech are loaded when present.
    pub fn load_wndb(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut raw: Vec<RawSynset> = Vec::new();
        let mut by_offset: HashMap<(PosFile, u64), usize> = HashMap::new();
        let mut indexes: Vec<(PosFile, Vec<(String, Vec<u64>)>)> = Vec::new();
        let mut version = None;

        for family in PosFile::ALL {
            let data_path = dir.join(format!("data.{}", family.suffix()));
            let index_path = dir.join(format!("index.{}", family.suffix()));
            if family != PosFile::Noun && !(data_path.is_file() && index_path.is_file()) {
                continue;
            }
            let data = read_file(&data_path)?;
            let index = read_file(&index_path)?;
            if version.is_none() {
                version = detect_version(&data);
            }
            parse_data_file(&data, &data_path, family, &mut raw, &mut by_offset)?;
            indexes.push((family, parse_index_file(&index, &index_path)?));
        }

        // sense lists keyed by (lemma, file family), used to derive synset names
        let mut senses: HashMap<(&str, PosFile), &[u64]> = HashMap::new();
        for (family, entries) in &indexes {
            for (lemma, offsets) in entries {
                senses.insert((lemma.as_str(), *family), offsets.as_slice());
            }
        }

        let mut synsets = Vec::with_capacity(raw.len());
        let mut by_id = HashMap::with_capacity(raw.len());
        for r in &raw {
            let first = strip_adj_marker(&r.lemmas[0]).to_lowercase();
            let family = r.pos.file_family();
            let sense = senses
                .get(&(first.as_str(), family))
                .and_then(|offs| offs.iter().position(|&o| o == r.offset))
                .ok_or_else(|| {
                    Error::Consistency(format!(
                        "synset {:08} ({}) missing from index.{}",
                        r.offset,
                        first,
                        family.suffix()
                    ))
                })?;
            let id = format!("{}.{}.{:02}", first, r.pos.tag(), sense + 1);
            by_id.insert(id.clone(), synsets.len());
            synsets.push(Synset {
                id,
                pos: r.pos,
                lemmas: r.lemmas.iter().map(|l| strip_adj_marker(l).to_string()).collect(),
                hypernym_ids: Vec::new(),
            });
        }

        let mut parents = Vec::with_capacity(raw.len());
        for (i, r) in raw.iter().enumerate() {
            let mut ps = Vec::with_capacity(r.hypernyms.len());
            for key in &r.hypernyms {
                let idx = by_offset.get(key).copied().ok_or_else(|| {
                    Error::Consistency(format!(
                        "hypernym pointer to missing synset {:08} in data.{}",
                        key.1,
                        key.0.suffix()
                    ))
                })?;
                ps.push(idx);
            }
            synsets[i].hypernym_ids = ps.iter().map(|&p| synsets[p].id.clone()).collect();
            parents.push(ps);
        }

        let mut by_lemma: HashMap<String, Vec<usize>> = HashMap::new();
        for (family, entries) in &indexes {
            for (lemma, offsets) in entries {
                let list = by_lemma.entry(lemma.clone()).or_default();
                for off in offsets {
                    if let Some(&idx) = by_offset.get(&(*family, *off)) {
                        list.push(idx);
                    }
                }
            }
        }

        Ok(WordNetDb {
            synsets,
            parents,
            by_id,
            by_lemma,
            version: version.unwrap_or_else(|| "unknown".to_string()),
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn len(&self) -> usize {
        self.synsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.synsets.is_empty()
    }

    pub fn noun_count(&self) -> usize {
        self.synsets.iter().filter(|s| s.is_noun()).count()
    }

    pub fn synsets(&self) -> impl Iterator<Item = &Synset> {
        self.synsets.iter()
    }

    pub fn synset(&self, id: &str) -> Option<&Synset> {
        self.by_id.get(id).map(|&i| &self.synsets[i])
    }

    /// Synsets containing `word`, in index (sense-frequency) order. Nouns come
    /// first, then verbs, adjectives and adverbs.
    pub fn synsets_for(&self, word: &str) -> Vec<&Synset> {
        self.by_lemma
            .get(&normalize_lemma(word))
            .map(|ids| ids.iter().map(|&i| &self.synsets[i]).collect())
            .unwrap_or_default()
    }

    /// Every root-to-synset hypernym chain, enumerated depth-first over the
    /// stored order of hypernym pointers.
    pub fn hypernym_paths(&self, id: &str) -> Result<Vec<HypernymPath<'_>>> {
        let idx = *self
            .by_id
            .get(id)
            .ok_or_else(|| Error::UnknownSynset(id.to_string()))?;
        let mut stack = Vec::new();
        let raw = self.paths_from(idx, &mut stack);
        Ok(raw
            .into_iter()
            .map(|p| HypernymPath {
                synsets: p.into_iter().map(|i| &self.synsets[i]).collect(),
            })
            .collect())
    }

    fn paths_from(&self, idx: usize, stack: &mut Vec<usize>) -> Vec<Vec<usize>> {
        let parents: Vec<usize> = self.parents[idx]
            .iter()
            .copied()
            .filter(|p| !stack.contains(p) && *p != idx)
            .collect();
        if parents.is_empty() {
            return vec![vec![idx]];
        }
        stack.push(idx);
        let mut out = Vec::new();
        for p in parents {
            for mut path in self.paths_from(p, stack) {
                path.push(idx);
                out.push(path);
            }
        }
        stack.pop();
        out
    }
}

fn split_list(field: &str) -> Vec<String> {
    field
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// `lemma.pos.NN` → pos
fn parse_synset_id(id: &str) -> Option<Pos> {
    let mut parts = id.rsplitn(3, '.');
    let num = parts.next()?;
    let pos = parts.next()?;
    let lemma = parts.next()?;
    if lemma.is_empty() || num.parse::<u32>().is_err() {
        return None;
    }
    Pos::from_tag(pos)
}

fn strip_adj_marker(lemma: &str) -> &str {
    // adjective lemmas may carry a syntactic marker: `(a)`, `(p)` or `(ip)`
    match lemma.find('(') {
        Some(i) if lemma.ends_with(')') => &lemma[..i],
        _ => lemma,
    }
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })
}

fn detect_version(data: &str) -> Option<String> {
    for line in data.lines().take_while(|l| l.starts_with("  ")) {
        if let Some(i) = line.find("WordNet ") {
            let v: String = line[i + 8..]
                .chars()
                .take_while(|c| c.is_ascii_digit() || *c == '.')
                .collect();
            if !v.is_empty() {
                return Some(v.trim_end_matches('.').to_string());
            }
        }
    }
    None
}

struct RawSynset {
    offset: u64,
    pos: Pos,
    lemmas: Vec<String>,
    hypernyms: Vec<(PosFile, u64)>,
}

fn parse_data_file(
    text: &str,
    path: &PathBuf,
    family: PosFile,
    out: &mut Vec<RawSynset>,
    by_offset: &mut HashMap<(PosFile, u64), usize>,
) -> Result<()> {
    for (lineno, line) in text.lines().enumerate() {
        if line.starts_with("  ") || line.trim().is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        let err = |msg: &str| Error::parse(path, lineno, msg);
        let line = line.split(" | ").next().unwrap_or(line);
        let mut tok = line.split_ascii_whitespace();
        let mut next = |what: &str| tok.next().ok_or_else(|| err(&format!("missing {what}")));

        let offset: u64 = next("offset")?.parse().map_err(|_| err("bad synset offset"))?;
        let _lex_filenum = next("lex_filenum")?;
        let pos = Pos::from_tag(next("ss_type")?).ok_or_else(|| err("bad ss_type"))?;
        let w_cnt = usize::from_str_radix(next("w_cnt")?, 16).map_err(|_| err("bad w_cnt"))?;
        let mut lemmas = Vec::with_capacity(w_cnt);
        for _ in 0..w_cnt {
            lemmas.push(next("word")?.to_string());
            next("lex_id")?;
        }
        if lemmas.is_empty() {
            return Err(err("synset without words"));
        }
        let p_cnt: usize = next("p_cnt")?.parse().map_err(|_| err("bad p_cnt"))?;
        let mut hypernyms = Vec::new();
        for _ in 0..p_cnt {
            let symbol = next("pointer symbol")?;
            let target: u64 = next("pointer offset")?
                .parse()
                .map_err(|_| err("bad pointer offset"))?;
            let target_pos = next("pointer pos")?;
            next("source/target")?;
            if symbol == "@" || symbol == "@i" {
                let fam = PosFile::from_pointer_tag(target_pos)
                    .ok_or_else(|| err("bad pointer pos"))?;
                hypernyms.push((fam, target));
            }
        }
        by_offset.insert((family, offset), out.len());
        out.push(RawSynset {
            offset,
            pos,
            lemmas,
            hypernyms,
        });
    }
    Ok(())
}

fn parse_index_file(text: &str, path: &PathBuf) -> Result<Vec<(String, Vec<u64>)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.starts_with("  ") || line.trim().is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        let err = |msg: &str| Error::parse(path, lineno, msg);
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if fields.len() < 4 {
            return Err(err("truncated index record"));
        }
        let synset_cnt: usize = fields[2].parse().map_err(|_| err("bad synset_cnt"))?;
        let p_cnt: usize = fields[3].parse().map_err(|_| err("bad p_cnt"))?;
        // lemma pos synset_cnt p_cnt [ptr_symbol...] sense_cnt tagsense_cnt offsets...
        let start = 4 + p_cnt + 2;
        if fields.len() != start + synset_cnt {
            return Err(err("synset count does not match offsets"));
        }
        let offsets = fields[start..]
            .iter()
            .map(|f| f.parse::<u64>().map_err(|_| err("bad synset offset")))
            .collect::<Result<Vec<_>>>()?;
        out.push((fields[0].to_string(), offsets));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIAMOND: &str = "\
entity.n.01\tentity\t
a.n.01\ta\tentity.n.01
b.n.01\tb\tentity.n.01
c.n.01\tc,see\ta.n.01,b.n.01
c.n.02\tc\tentity.n.01
run.v.01\trun,c\t
";

    fn db() -> WordNetDb {
        WordNetDb::from_fixture_str(DIAMOND, "diamond").unwrap()
    }

    #[test]
    fn fixture_sense_order_is_file_order() {
        let db = db();
        let ids: Vec<_> = db.synsets_for("C").iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids, ["c.n.01", "c.n.02", "run.v.01"]);
        assert!(db.synsets_for("zzzxqy").is_empty());
    }

    #[test]
    fn diamond_yields_two_paths_in_parent_order() {
        let db = db();
        let paths = db.hypernym_paths("c.n.01").unwrap();
        let ids: Vec<_> = paths.iter().map(|p| p.ids()).collect();
        assert_eq!(
            ids,
            vec![
                vec!["entity.n.01", "a.n.01", "c.n.01"],
                vec!["entity.n.01", "b.n.01", "c.n.01"]
            ]
        );
        assert_eq!(paths[0].at_depth(1).unwrap().id, "entity.n.01");
        assert!(paths[0].at_depth(0).is_none());
        assert!(paths[0].at_depth(4).is_none());
    }

    #[test]
    fn root_path_is_itself() {
        let db = db();
        let paths = db.hypernym_paths("entity.n.01").unwrap();
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].ids(), vec!["entity.n.01"]);
    }

    #[test]
    fn unknown_synset_is_lookup_error() {
        assert!(matches!(
            db().hypernym_paths("nope.n.01"),
            Err(Error::UnknownSynset(_))
        ));
    }

    #[test]
    fn multiword_lookup_uses_underscores() {
        let db = WordNetDb::from_fixture_str("ice_cream.n.01\tice_cream,Ice_Cream\t\n", "x").unwrap();
        assert_eq!(db.synsets_for("Ice Cream").len(), 1);
    }

    #[test]
    fn fixture_errors_carry_line_numbers() {
        let err = WordNetDb::from_fixture_str("a.n.01\ta\t\nbroken line\n", "f.tsv").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let err = WordNetDb::from_fixture_str("a.x.01\ta\t\n", "f.tsv").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn dangling_hypernym_is_rejected() {
        let err = WordNetDb::from_fixture_str("a.n.01\ta\tmissing.n.01\n", "f").unwrap_err();
        assert!(matches!(err, Error::UnknownSynset(_)));
    }

    #[test]
    fn empty_directory_is_load_error_naming_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = WordNetDb::load(dir.path()).unwrap_err();
        match err {
            Error::Load { path, .. } => assert!(path.ends_with("data.noun")),
            other => panic!("unexpected {other:?}"),
        }
    }

    const MINI_DATA_NOUN: &str = "  1 This software and database is being provided to you, the LICENSEE, by WordNet 3.0 Copyright 2006\n\
00001740 03 n 01 entity 0 001 ~ 00002000 n 0000 | that which exists\n\
00002000 03 n 02 thing 0 object 0 001 @ 00001740 n 0000 | a thing\n\
00003000 03 n 01 thing 0 002 @ 00002000 n 0000 @i 00001740 n 0000 | another thing\n";

    const MINI_INDEX_NOUN: &str = "  1 header\n\
entity n 1 1 ~ 1 0 00001740  \n\
object n 1 1 @ 1 0 00002000  \n\
thing n 2 2 @ ~ 2 0 00003000 00002000  \n";

    fn write_mini(dir: &Path, data: &str, index: &str) {
        fs::write(dir.join("data.noun"), data).unwrap();
        fs::write(dir.join("index.noun"), index).unwrap();
    }

    #[test]
    fn wndb_names_follow_index_sense_order() {
        let dir = tempfile::tempdir().unwrap();
        write_mini(dir.path(), MINI_DATA_NOUN, MINI_INDEX_NOUN);
        let db = WordNetDb::load(dir.path()).unwrap();
        assert_eq!(db.version(), "3.0");
        assert_eq!(db.noun_count(), 3);
        let ids: Vec<_> = db.synsets_for("thing").iter().map(|s| s.id.clone()).collect();
        // 00003000 is listed first in the index, so it is thing.n.01
        assert_eq!(ids, ["thing.n.01", "thing.n.02"]);
        let t1 = db.synset("thing.n.01").unwrap();
        assert_eq!(t1.hypernym_ids, ["thing.n.02", "entity.n.01"]);
        let paths = db.hypernym_paths("thing.n.01").unwrap();
        assert_eq!(paths.len(), 2);
        assert_eq!(paths[0].ids(), ["entity.n.01", "thing.n.02", "thing.n.01"]);
        assert_eq!(paths[1].ids(), ["entity.n.01", "thing.n.01"]);
    }

    #[test]
    fn malformed_wndb_record_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let bad = MINI_DATA_NOUN.replace("00002000 03 n 02", "00002000 03 n zz");
        write_mini(dir.path(), &bad, MINI_INDEX_NOUN);
        match WordNetDb::load(dir.path()).unwrap_err() {
            Error::Parse { line, path, .. } => {
                assert_eq!(line, 3);
                assert!(path.ends_with("data.noun"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn crlf_files_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        write_mini(
            dir.path(),
            &MINI_DATA_NOUN.replace('\n', "\r\n"),
            &MINI_INDEX_NOUN.replace('\n', "\r\n"),
        );
        let db = WordNetDb::load(dir.path()).unwrap();
        assert_eq!(db.synsets_for("thing").len(), 2);
    }

    #[test]
    fn adjective_markers_are_stripped() {
        assert_eq!(strip_adj_marker("galore(ip)"), "galore");
        assert_eq!(strip_adj_marker("iron"), "iron");
    }
}
