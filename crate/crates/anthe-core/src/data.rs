//! Corpus handling: tab-separated parallel text, char/word vocabularies
//! with reserved ids, deterministic splits, padded token batches, and
//! synthetic copy/reverse tasks.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenizerKind {
    Char,
    Word,
}

impl TokenizerKind {
    pub fn name(self) -> &'static str {
        match self {
            TokenizerKind::Char => "char",
            TokenizerKind::Word => "word",
        }
    }

    pub fn parse(s: &str) -> Result<TokenizerKind> {
        match s {
            "char" => Ok(TokenizerKind::Char),
            "word" => Ok(TokenizerKind::Word),
            other => Err(Error::config(format!(
                "unknown tokenizer {other:?}; expected char or word"
            ))),
        }
    }

    fn split(self, text: &str) -> Vec<String> {
        match self {
            TokenizerKind::Char => text.chars().map(String::from).collect(),
            TokenizerKind::Word => text.split_whitespace().map(String::from).collect(),
        }
    }
}

/// One source/target sentence pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub source: String,
    pub target: String,
}

/// Token/id bijection over ids `4..len`; ids 0..3 are reserved for
/// pad/bos/eos/unk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    kind: TokenizerKind,
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds from the given pairs (both sides), in first-appearance order
    /// so identical corpora give identical vocabularies.
    pub fn build(pairs: &[Pair], kind: TokenizerKind) -> Vocabulary {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = HashMap::new();
        for (i, t) in RESERVED.iter().enumerate() {
            token_to_id.insert(t.to_string(), i);
        }
        for pair in pairs {
            for side in [&pair.source, &pair.target] {
                for tok in kind.split(side) {
                    if !token_to_id.contains_key(&tok) {
                        token_to_id.insert(tok.clone(), id_to_token.len());
                        id_to_token.push(tok);
                    }
                }
            }
        }
        Vocabulary {
            kind,
            token_to_id,
            id_to_token,
        }
    }

    /// Rebuilds from a serialized token list (reserved entries included).
    pub fn from_tokens(tokens: Vec<String>, kind: TokenizerKind) -> Result<Vocabulary> {
        if tokens.len() < RESERVED.len()
            || tokens[..RESERVED.len()] != RESERVED.map(String::from)
        {
            return Err(Error::data("vocabulary list must start with reserved ids"));
        }
        let mut token_to_id = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary {
            kind,
            token_to_id,
            id_to_token: tokens,
        })
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids are always present
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Token ids with `<bos>`/`<eos>` wrapping; unknown tokens map to unk.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        for tok in self.kind.split(text) {
            ids.push(*self.token_to_id.get(&tok).unwrap_or(&UNK));
        }
        ids.push(EOS);
        ids
    }

    /// Inverse of encode, skipping reserved ids.
    pub fn decode(&self, ids: &[usize]) -> String {
        let sep = match self.kind {
            TokenizerKind::Char => "",
            TokenizerKind::Word => " ",
        };
        ids.iter()
            .filter(|&&i| i >= RESERVED.len())
            .map(|&i| self.id_to_token[i].as_str())
            .collect::<Vec<_>>()
            .join(sep)
    }
}

/// Reads a UTF-8 TSV corpus: one `source<TAB>target` pair per line.
pub fn read_corpus(path: &Path) -> Result<Vec<Pair>> {
    let text = std::fs::read_to_string(path)?;
    parse_corpus(&text)
}

pub fn parse_corpus(text: &str) -> Result<Vec<Pair>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let Some((source, target)) = line.split_once('\t') else {
            return Err(Error::parse(format!(
                "line {}: expected source<TAB>target, got {line:?}",
                i + 1
            )));
        };
        pairs.push(Pair {
            source: source.to_string(),
            target: target.to_string(),
        });
    }
    if pairs.is_empty() {
        return Err(Error::data("corpus is empty"));
    }
    Ok(pairs)
}

/// Deterministic 80/10/10 split: line indices are shuffled under the seed,
/// then cut at 80% and 90%.
pub fn split_corpus(pairs: &[Pair], seed: u64) -> (Vec<Pair>, Vec<Pair>, Vec<Pair>) {
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n = pairs.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let take = |slice: &[usize]| -> Vec<Pair> {
        slice.iter().map(|&i| pairs[i].clone()).collect()
    };
    (
        take(&idx[..n_train]),
        take(&idx[n_train..n_train + n_val]),
        take(&idx[n_train + n_val..]),
    )
}

/// A padded batch. Target-out is target-in shifted left by one; masks mark
/// real (non-pad) tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub t_src: usize,
    pub t_tgt: usize,
    pub src: Vec<usize>,
    pub src_mask: Vec<bool>,
    pub tgt_in: Vec<usize>,
    pub tgt_in_mask: Vec<bool>,
    pub tgt_out: Vec<usize>,
    pub tgt_out_mask: Vec<bool>,
}

impl TokenBatch {
    /// Builds one batch from encoded rows, padding to the longest row.
    pub fn from_rows(src_rows: &[Vec<usize>], tgt_rows: &[Vec<usize>]) -> Result<TokenBatch> {
        if src_rows.is_empty() || src_rows.len() != tgt_rows.len() {
            return Err(Error::dimension(format!(
                "batch needs matching non-empty row sets, got {} and {}",
                src_rows.len(),
                tgt_rows.len()
            )));
        }
        if tgt_rows.iter().any(|r| r.len() < 2) {
            return Err(Error::data("target rows need at least bos+eos"));
        }
        let b = src_rows.len();
        let t_src = src_rows.iter().map(Vec::len).max().unwrap();
        // Teacher forcing drops one position: in = row[..len-1], out = row[1..].
        let t_tgt = tgt_rows.iter().map(|r| r.len() - 1).max().unwrap();
        let mut out = TokenBatch {
            batch: b,
            t_src,
            t_tgt,
            src: vec![PAD; b * t_src],
            src_mask: vec![false; b * t_src],
            tgt_in: vec![PAD; b * t_tgt],
            tgt_in_mask: vec![false; b * t_tgt],
            tgt_out: vec![PAD; b * t_tgt],
            tgt_out_mask: vec![false; b * t_tgt],
        };
        for (r, row) in src_rows.iter().enumerate() {
            for (j, &id) in row.iter().enumerate() {
                out.src[r * t_src + j] = id;
                out.src_mask[r * t_src + j] = true;
            }
        }
        for (r, row) in tgt_rows.iter().enumerate() {
            for j in 0..row.len() - 1 {
                out.tgt_in[r * t_tgt + j] = row[j];
                out.tgt_in_mask[r * t_tgt + j] = true;
                out.tgt_out[r * t_tgt + j] = row[j + 1];
                out.tgt_out_mask[r * t_tgt + j] = true;
            }
        }
        Ok(out)
    }

    /// Count of real target-out tokens (the cross-entropy denominator).
    pub fn target_tokens(&self) -> usize {
        self.tgt_out_mask.iter().filter(|&&m| m).count()
    }
}

/// Encodes pairs and chunks them into padded batches, in order.
pub fn make_batches(
    pairs: &[Pair],
    vocab: &Vocabulary,
    batch_size: usize,
) -> Result<Vec<TokenBatch>> {
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be positive"));
    }
    pairs
        .chunks(batch_size)
        .map(|chunk| {
            let src: Vec<Vec<usize>> = chunk.iter().map(|p| vocab.encode(&p.source)).collect();
            let tgt: Vec<Vec<usize>> = chunk.iter().map(|p| vocab.encode(&p.target)).collect();
            TokenBatch::from_rows(&src, &tgt)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Copy,
    Reverse,
}

impl SynthKind {
    pub fn parse(s: &str) -> Result<SynthKind> {
        match s {
            "copy" => Ok(SynthKind::Copy),
            "reverse" => Ok(SynthKind::Reverse),
            other => Err(Error::config(format!(
                "unknown task {other:?}; expected copy or reverse"
            ))),
        }
    }
}

/// Generates a synthetic parallel corpus as TSV text: uniformly sampled
/// source strings over the alphabet, targets copied or reversed.
pub fn synth_task(
    kind: SynthKind,
    n_pairs: usize,
    len_range: (usize, usize),
    alphabet: &str,
    seed: u64,
) -> Result<String> {
    let chars: Vec<char> = alphabet.chars().collect();
    if chars.is_empty() {
        return Err(Error::contract("alphabet must be nonempty"));
    }
    if chars.iter().any(|c| *c == '\t' || *c == '\n') {
        return Err(Error::contract("alphabet must not contain tab or newline"));
    }
    let (lo, hi) = len_range;
    if lo < 1 || hi < lo {
        return Err(Error::contract(format!(
            "length range must satisfy 1 <= lo <= hi, got {lo}..={hi}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for _ in 0..n_pairs {
        let len = rng.gen_range(lo..=hi);
        let source: String = (0..len).map(|_| chars[rng.gen_range(0..chars.len())]).collect();
        let target: String = match kind {
            SynthKind::Copy => source.clone(),
            SynthKind::Reverse => source.chars().rev().collect(),
        };
        writeln!(out, "{source}\t{target}").expect("string writes cannot fail");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_line_corpus_splits_eight_one_one() {
        let pairs: Vec<Pair> = (0..10)
            .map(|i| Pair {
                source: format!("s{i}"),
                target: format!("t{i}"),
            })
            .collect();
        let (train, val, test) = split_corpus(&pairs, 7);
        assert_eq!((train.len(), val.len(), test.len()), (8, 1, 1));
        // No pair lost or duplicated.
        let mut all: Vec<&str> = train
            .iter()
            .chain(&val)
            .chain(&test)
            .map(|p| p.source.as_str())
            .collect();
        all.sort();
        let mut want: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        want.sort();
        assert_eq!(all, want.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn identical_seed_gives_identical_splits_and_vocabulary() {
        let pairs = parse_corpus("ab\tba\ncd\tdc\nef\tfe\ngh\thg\nij\tji\nkl\tlk\nmn\tnm\nop\tpo\nqr\trq\nst\tts\n").unwrap();
        let a = split_corpus(&pairs, 3);
        let b = split_corpus(&pairs, 3);
        assert_eq!(a, b);
        let va = Vocabulary::build(&a.0, TokenizerKind::Char);
        let vb = Vocabulary::build(&b.0, TokenizerKind::Char);
        assert_eq!(va, vb);
        let c = split_corpus(&pairs, 4);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn char_tokenizer_wraps_with_bos_eos() {
        let pairs = parse_corpus("ab\tba").unwrap();
        let vocab = Vocabulary::build(&pairs, TokenizerKind::Char);
        // Reserved 0..3, then a=4, b=5 in appearance order.
        assert_eq!(vocab.encode("ab"), vec![BOS, 4, 5, EOS]);
        assert_eq!(vocab.decode(&[BOS, 4, 5, EOS]), "ab");
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let pairs = parse_corpus("ab\tba").unwrap();
        let vocab = Vocabulary::build(&pairs, TokenizerKind::Char);
        assert_eq!(vocab.encode("az"), vec![BOS, 4, UNK, EOS]);
    }

    #[test]
    fn word_tokenizer_splits_on_whitespace() {
        let pairs = parse_corpus("the cat\tcat the").unwrap();
        let vocab = Vocabulary::build(&pairs, TokenizerKind::Word);
        assert_eq!(vocab.len(), 6);
        assert_eq!(vocab.encode("the cat"), vec![BOS, 4, 5, EOS]);
        assert_eq!(vocab.decode(&vocab.encode("cat the")), "cat the");
    }

    #[test]
    fn missing_tab_is_a_parse_error_with_line_number() {
        let err = parse_corpus("ab\tba\nbad line\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse_corpus("").is_err());
    }

    #[test]
    fn batch_shifts_target_and_masks_padding() {
        let src = vec![vec![BOS, 4, EOS], vec![BOS, 4, 5, 6, EOS]];
        let tgt = vec![vec![BOS, 7, EOS], vec![BOS, 7, 8, EOS]];
        let b = TokenBatch::from_rows(&src, &tgt).unwrap();
        assert_eq!((b.batch, b.t_src, b.t_tgt), (2, 5, 3));
        assert_eq!(&b.src[..5], &[BOS, 4, EOS, PAD, PAD]);
        assert_eq!(&b.src_mask[..5], &[true, true, true, false, false]);
        // Row 0: in [bos, 7], out [7, eos], one pad column.
        assert_eq!(&b.tgt_in[..3], &[BOS, 7, PAD]);
        assert_eq!(&b.tgt_out[..3], &[7, EOS, PAD]);
        assert_eq!(&b.tgt_out_mask[..3], &[true, true, false]);
        // Row 1 fills the width exactly.
        assert_eq!(&b.tgt_in[3..], &[BOS, 7, 8]);
        assert_eq!(&b.tgt_out[3..], &[7, 8, EOS]);
        assert_eq!(b.target_tokens(), 5);
    }

    #[test]
    fn synth_copy_and_reverse_lines() {
        let copy = synth_task(SynthKind::Copy, 3, (3, 3), "abc", 1).unwrap();
        for line in copy.lines() {
            let (s, t) = line.split_once('\t').unwrap();
            assert_eq!(s, t);
            assert_eq!(s.len(), 3);
        }
        let rev = synth_task(SynthKind::Reverse, 3, (2, 4), "abc", 2).unwrap();
        for line in rev.lines() {
            let (s, t) = line.split_once('\t').unwrap();
            assert_eq!(t, s.chars().rev().collect::<String>());
        }
    }

    #[test]
    fn synth_is_reproducible_under_seed() {
        let a = synth_task(SynthKind::Copy, 512, (1, 8), "abcdefgh", 42).unwrap();
        let b = synth_task(SynthKind::Copy, 512, (1, 8), "abcdefgh", 42).unwrap();
        let c = synth_task(SynthKind::Copy, 512, (1, 8), "abcdefgh", 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.lines().count(), 512);
    }

    #[test]
    fn synth_rejects_bad_inputs() {
        assert!(synth_task(SynthKind::Copy, 1, (1, 2), "", 0).is_err());
        assert!(synth_task(SynthKind::Copy, 1, (0, 2), "ab", 0).is_err());
        assert!(synth_task(SynthKind::Copy, 1, (3, 2), "ab", 0).is_err());
        assert!(synth_task(SynthKind::Copy, 1, (1, 2), "a\tb", 0).is_err());
    }

    #[test]
    fn vocabulary_round_trips_through_token_list() {
        let pairs = parse_corpus("hey you\tyou hey").unwrap();
        let vocab = Vocabulary::build(&pairs, TokenizerKind::Word);
        let rebuilt =
            Vocabulary::from_tokens(vocab.tokens().to_vec(), TokenizerKind::Word).unwrap();
        assert_eq!(vocab, rebuilt);
        assert!(Vocabulary::from_tokens(vec!["x".into()], TokenizerKind::Word).is_err());
    }
}
