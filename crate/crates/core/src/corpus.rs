//! Plain-text corpora: UTF-8, whitespace tokenized, one document per
//! blank-line separated block. Each non-empty line ends with `<eos>`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

pub fn tokenize(text: &str, add_eos: bool) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let before = out.len();
        out.extend(line.split_whitespace().map(str::to_string));
        if add_eos && out.len() > before {
            out.push(EOS.to_string());
        }
    }
    out
}

pub fn read_tokens(path: impl AsRef<Path>, add_eos: bool) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(tokenize(&text, add_eos))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eos_only_after_nonempty_lines() {
        let toks = tokenize(" = Title = \n\nthe cat sat\n  \n<unk> ran\n", true);
        assert_eq!(
            toks,
            ["=", "Title", "=", EOS, "the", "cat", "sat", EOS, UNK, "ran", EOS]
        );
        assert_eq!(tokenize("a b\nc", false), ["a", "b", "c"]);
    }
}
