//! Partitioned vocabulary and batch-level hypernym substitution.
//!
//! Id layout: token ids occupy `0..n_tokens` (`<unk>` = 0, `<eos>` = 1, then
//! tokens by descending training frequency, ties lexicographic), and class ids
//! occupy `n_tokens..n_tokens + n_classes`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::classmap::{ClassMap, TokenFrequencies};
use crate::corpus::{EOS, UNK};
use crate::error::{Error, Result};

pub type TokenId = u32;

/// Which of the three disjoint id spaces an id belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subset {
    /// Tokens with a hypernym class (V_x).
    Mapped,
    /// Tokens without one, including specials (V_¬x).
    Unmapped,
    /// Hypernym classes (V_h).
    Class,
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::Mapped => "x",
            Subset::Unmapped => "notx",
            Subset::Class => "h",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabPartition {
    names: Vec<String>,
    subsets: Vec<Subset>,
    ids: HashMap<String, TokenId>,
    class_ids: HashMap<String, TokenId>,
    class_of: Vec<Option<TokenId>>,
    members: Vec<Vec<TokenId>>,
    freqs: Vec<u64>,
    n_tokens: usize,
}

pub fn build_partition(
    freqs: &TokenFrequencies,
    map: &ClassMap,
    unk_threshold: u64,
) -> Result<VocabPartition> {
    for tok in map.tokens() {
        if !freqs.contains(tok) {
            return Err(Error::Consistency(format!(
                "class map token `{tok}` does not occur in the frequency table"
            )));
        }
    }

    let mut unk_count = 0u64;
    let mut eos_count = 0u64;
    let mut kept: Vec<(&str, u64)> = Vec::new();
    for (tok, n) in freqs.sorted() {
        match tok {
            UNK => unk_count += n,
            EOS => eos_count += n,
            _ if n < unk_threshold => unk_count += n,
            _ => kept.push((tok, n)),
        }
    }

    let mut names = vec![UNK.to_string(), EOS.to_string()];
    let mut token_freqs = vec![unk_count, eos_count];
    names.extend(kept.iter().map(|(t, _)| t.to_string()));
    token_freqs.extend(kept.iter().map(|(_, n)| *n));
    let n_tokens = names.len();

    // classes ordered by total member frequency, ties lexicographic
    let mut class_totals: BTreeMap<&str, u64> = BTreeMap::new();
    for (tok, n) in &kept {
        if let Some(c) = map.class_of(tok) {
            *class_totals.entry(c).or_insert(0) += n;
        }
    }
    let mut classes: Vec<(&str, u64)> = class_totals.into_iter().collect();
    classes.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut class_ids = HashMap::new();
    for (i, (c, n)) in classes.iter().enumerate() {
        class_ids.insert(c.to_string(), (n_tokens + i) as TokenId);
        names.push(c.to_string());
        token_freqs.push(*n);
    }

    let ids: HashMap<String, TokenId> = names[..n_tokens]
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as TokenId))
        .collect();

    let mut subsets = vec![Subset::Unmapped; n_tokens];
    subsets.extend(std::iter::repeat_n(Subset::Class, classes.len()));
    let mut class_of = vec![None; n_tokens];
    let mut members = vec![Vec::new(); classes.len()];
    for (id, name) in names[..n_tokens].iter().enumerate().skip(2) {
        if let Some(c) = map.class_of(name) {
            let cid = class_ids[c];
            subsets[id] = Subset::Mapped;
            class_of[id] = Some(cid);
            members[cid as usize - n_tokens].push(id as TokenId);
        }
    }

    Ok(VocabPartition {
        names,
        subsets,
        ids,
        class_ids,
        class_of,
        members,
        freqs: token_freqs,
        n_tokens,
    })
}

/// Partition from literal `(token, count)` and `(token, class)` pairs, with no
/// unk collapsing. Handy for small hand-built vocabularies.
pub fn partition_from_pairs(freqs: &[(&str, u64)], mapping: &[(&str, &str)]) -> Result<VocabPartition> {
    use crate::classmap::{ClassMapParams, FreqThreshold, Provenance};
    let mut table = TokenFrequencies::default();
    for (t, n) in freqs {
        table.add(t, *n);
    }
    let mut map = ClassMap::new(
        ClassMapParams::new(1, FreqThreshold::Infinite)?,
        Provenance {
            wordnet: "none".into(),
            corpus: "pairs".into(),
        },
    );
    for (t, c) in mapping {
        map.insert(*t, *c);
    }
    build_partition(&table, &map, 0)
}

impl VocabPartition {
    /// Size of the union vocabulary V_x ∪ V_¬x ∪ V_h.
    pub fn vocab_size(&self) -> usize {
        self.names.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_classes(&self) -> usize {
        self.names.len() - self.n_tokens
    }

    pub fn unk_id(&self) -> TokenId {
        0
    }

    pub fn eos_id(&self) -> TokenId {
        1
    }

    pub fn subset(&self, id: TokenId) -> Option<Subset> {
        self.subsets.get(id as usize).copied()
    }

    pub fn is_mapped(&self, id: TokenId) -> bool {
        self.subset(id) == Some(Subset::Mapped)
    }

    pub fn is_token(&self, id: TokenId) -> bool {
        (id as usize) < self.n_tokens
    }

    pub fn class_of(&self, id: TokenId) -> Option<TokenId> {
        self.class_of.get(id as usize).copied().flatten()
    }

    /// Member tokens of a class id, in id order.
    pub fn members(&self, class: TokenId) -> &[TokenId] {
        let i = (class as usize)
            .checked_sub(self.n_tokens)
            .expect("not a class id");
        &self.members[i]
    }

    pub fn name(&self, id: TokenId) -> &str {
        &self.names[id as usize]
    }

    /// Training-corpus frequency of a token id (or total member frequency of a class).
    pub fn frequency(&self, id: TokenId) -> u64 {
        self.freqs[id as usize]
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn class_id(&self, class: &str) -> Option<TokenId> {
        self.class_ids.get(class).copied()
    }

    /// Unknown tokens map to `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens
            .iter()
            .map(|t| self.token_id(t.as_ref()).unwrap_or(self.unk_id()))
            .collect()
    }

    pub fn ids_in(&self, subset: Subset) -> impl Iterator<Item = TokenId> + '_ {
        self.subsets
            .iter()
            .enumerate()
            .filter(move |(_, s)| **s == subset)
            .map(|(i, _)| i as TokenId)
    }

    /// Writes `id<TAB>token_or_class<TAB>{x|notx|h}` rows.
    pub fn write_tsv<W: Write>(&self, mut w: W, header: &[String]) -> Result<()> {
        for h in header {
            writeln!(w, "{h}")?;
        }
        for (i, (name, subset)) in self.names.iter().zip(&self.subsets).enumerate() {
            writeln!(w, "{i}\t{name}\t{subset}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Token,
    Hcp,
}

impl StepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::Token => "token",
            StepKind::Hcp => "hcp",
        }
    }
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Row-major `[batch_size × seq_len]` inputs and next-token targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub kind: StepKind,
}

impl Batch {
    pub fn new(
        batch_size: usize,
        seq_len: usize,
        inputs: Vec<TokenId>,
        targets: Vec<TokenId>,
        kind: StepKind,
    ) -> Result<Self> {
        let n = batch_size * seq_len;
        if inputs.len() != n || targets.len() != n {
            return Err(Error::Validation(format!(
                "expected {n} ids for a {batch_size}x{seq_len} batch, got {} inputs and {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Batch {
            batch_size,
            seq_len,
            inputs,
            targets,
            kind,
        })
    }

    /// Check that every id is legal for the batch's step kind.
    pub fn validate(&self, part: &VocabPartition) -> Result<()> {
        for &id in self.inputs.iter().chain(&self.targets) {
            let ok = match (self.kind, part.subset(id)) {
                (_, None) => false,
                (StepKind::Token, Some(s)) => s != Subset::Class,
                (StepKind::Hcp, Some(s)) => s != Subset::Mapped,
            };
            if !ok {
                return Err(Error::Validation(format!(
                    "id {id} is not valid in a {} batch",
                    self.kind
                )));
            }
        }
        Ok(())
    }
}

/// Replace every V_x id (inputs and targets) by its hypernym class and mark the
/// batch as an HCP step. Applying it twice changes nothing.
pub fn substitute(batch: &Batch, part: &VocabPartition) -> Result<Batch> {
    let map = |ids: &[TokenId]| -> Result<Vec<TokenId>> {
        ids.iter()
            .map(|&id| match part.subset(id) {
                None => Err(Error::Validation(format!(
                    "id {id} outside vocabulary of {}",
                    part.vocab_size()
                ))),
                Some(Subset::Mapped) => Ok(part.class_of(id).expect("mapped id has a class")),
                Some(_) => Ok(id),
            })
            .collect()
    };
    Ok(Batch {
        batch_size: batch.batch_size,
        seq_len: batch.seq_len,
        inputs: map(&batch.inputs)?,
        targets: map(&batch.targets)?,
        kind: StepKind::Hcp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classmap::{count_frequencies, ClassMapParams, FreqThreshold, Provenance};
    use proptest::prelude::*;

    fn toy() -> (TokenFrequencies, ClassMap) {
        let freqs = count_frequencies(
            "iron is a metal and magnesium is a metal too iron iron".split_whitespace(),
        );
        let mut map = ClassMap::new(
            ClassMapParams::new(6, FreqThreshold::Infinite).unwrap(),
            Provenance {
                wordnet: "fixture".into(),
                corpus: "toy".into(),
            },
        );
        map.insert("iron", "metallic_element.n.01");
        map.insert("magnesium", "metallic_element.n.01");
        (freqs, map)
    }

    #[test]
    fn partition_is_disjoint_and_total() {
        let (freqs, map) = toy();
        let part = build_partition(&freqs, &map, 1).unwrap();
        let x: Vec<_> = part.ids_in(Subset::Mapped).collect();
        let notx: Vec<_> = part.ids_in(Subset::Unmapped).collect();
        let h: Vec<_> = part.ids_in(Subset::Class).collect();
        assert_eq!(x.len(), 2);
        // is a metal and too + <unk> <eos>
        assert_eq!(notx.len(), 7);
        assert_eq!(h.len(), 1);
        assert_eq!(x.len() + notx.len(), part.n_tokens());
        assert!(h.iter().all(|&c| !part.is_token(c)));
        for &id in &x {
            assert_eq!(part.class_of(id), Some(h[0]));
        }
        assert_eq!(part.members(h[0]).len(), 2);
        // iron is most frequent
        assert_eq!(part.name(2), "iron");
        assert_eq!(part.frequency(h[0]), 4);
    }

    #[test]
    fn rare_tokens_collapse_to_unk() {
        let (freqs, map) = toy();
        let part = build_partition(&freqs, &map, 2).unwrap();
        assert_eq!(part.token_id("magnesium"), None);
        assert_eq!(part.encode(&["magnesium"]), vec![part.unk_id()]);
        assert_eq!(part.ids_in(Subset::Mapped).count(), 1);
        // and, too, magnesium collapse
        assert_eq!(part.frequency(part.unk_id()), 3);
    }

    #[test]
    fn empty_classmap_puts_everything_in_notx() {
        let (freqs, map) = toy();
        let empty = ClassMap::new(map.params, map.provenance.clone());
        let part = build_partition(&freqs, &empty, 1).unwrap();
        assert_eq!(part.n_classes(), 0);
        assert_eq!(part.ids_in(Subset::Mapped).count(), 0);
        assert_eq!(part.ids_in(Subset::Unmapped).count(), part.vocab_size());
    }

    #[test]
    fn classmap_key_missing_from_freqs_is_error() {
        let (freqs, mut map) = toy();
        map.insert("desk", "instrumentality.n.03");
        assert!(matches!(
            build_partition(&freqs, &map, 1),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn substitute_replaces_mapped_ids() {
        let (freqs, map) = toy();
        let part = build_partition(&freqs, &map, 1).unwrap();
        let ids = part.encode(&["iron", "is", "a"]);
        let tg = part.encode(&["is", "a", "metal"]);
        let b = Batch::new(1, 3, ids.clone(), tg.clone(), StepKind::Token).unwrap();
        let s = substitute(&b, &part).unwrap();
        let class = part.class_id("metallic_element.n.01").unwrap();
        assert_eq!(s.inputs, vec![class, ids[1], ids[2]]);
        assert_eq!(s.targets, tg);
        assert_eq!(s.kind, StepKind::Hcp);
        s.validate(&part).unwrap();
        assert!(b.validate(&part).is_ok());
    }

    #[test]
    fn substitute_without_mapped_ids_only_flips_kind() {
        let (freqs, map) = toy();
        let part = build_partition(&freqs, &map, 1).unwrap();
        let ids = part.encode(&["is", "a"]);
        let b = Batch::new(1, 2, ids.clone(), ids.clone(), StepKind::Token).unwrap();
        let s = substitute(&b, &part).unwrap();
        assert_eq!(s.inputs, b.inputs);
        assert_eq!(s.kind, StepKind::Hcp);
    }

    #[test]
    fn out_of_vocab_id_is_rejected() {
        let (freqs, map) = toy();
        let part = build_partition(&freqs, &map, 1).unwrap();
        let bad = part.vocab_size() as TokenId;
        let b = Batch::new(1, 1, vec![bad], vec![0], StepKind::Token).unwrap();
        assert!(matches!(substitute(&b, &part), Err(Error::Validation(_))));
        assert!(b.validate(&part).is_err());
        let class = part.class_id("metallic_element.n.01").unwrap();
        let b = Batch::new(1, 1, vec![class], vec![0], StepKind::Token).unwrap();
        assert!(b.validate(&part).is_err());
    }

    #[test]
    fn vocab_tsv_rows() {
        let (freqs, map) = toy();
        let part = build_partition(&freqs, &map, 1).unwrap();
        let mut buf = Vec::new();
        part.write_tsv(&mut buf, &[]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "0\t<unk>\tnotx");
        assert_eq!(lines[2], "2\tiron\tx");
        assert_eq!(*lines.last().unwrap(), "9\tmetallic_element.n.01\th");
    }

    proptest! {
        #[test]
        fn substitution_is_idempotent_and_shape_preserving(
            words in proptest::collection::vec(0usize..9, 1..40)
        ) {
            let (freqs, map) = toy();
            let part = build_partition(&freqs, &map, 1).unwrap();
            let ids: Vec<TokenId> = words.iter().map(|&w| w as TokenId).collect();
            let b = Batch::new(1, ids.len(), ids.clone(), ids.clone(), StepKind::Token).unwrap();
            let once = substitute(&b, &part).unwrap();
            let twice = substitute(&once, &part).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(once.inputs.len(), b.inputs.len());
            prop_assert!(once.inputs.iter().all(|&id| !part.is_mapped(id)));
            let pre: std::collections::HashSet<_> = b.inputs.iter().collect();
            let img: std::collections::HashSet<_> = once.inputs.iter().collect();
            prop_assert!(img.len() <= pre.len());
        }
    }
}
