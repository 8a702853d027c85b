//! Frequency-ordered word vocabulary with unknown-word thresholding.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "</s>";

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    freq: Vec<u64>,
    index: HashMap<String, usize>,
    unk_id: usize,
    eos_id: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from whitespace-tokenized lines, one sentence per
    /// line. Words seen more than `min_count` times are kept; the rest map to
    /// [`UNK`]. Every sentence ends with [`EOS`].
    ///
    /// Entries (specials included) are ordered by descending count, ties by
    /// first occurrence. Specials with a zero count go last.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>, min_count: u64) -> Result<Self> {
        // word -> (count, first position)
        let mut counts: HashMap<&str, (u64, usize)> = HashMap::new();
        let mut pos = 0usize;
        let mut sentences = 0u64;
        let mut first_eos = None;
        for line in lines {
            let mut any = false;
            for w in line.split_whitespace() {
                counts.entry(w).or_insert((0, pos)).0 += 1;
                pos += 1;
                any = true;
            }
            if any {
                sentences += 1;
                first_eos.get_or_insert(pos);
                pos += 1;
            }
        }
        if sentences == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut unk = (0u64, usize::MAX);
        let mut entries: Vec<(String, u64, usize, u8)> = Vec::new();
        for (w, (c, first)) in counts {
            if w == UNK || w == EOS || c <= min_count {
                unk.0 += c;
                unk.1 = unk.1.min(first);
            } else {
                entries.push((w.to_string(), c, first, 0));
            }
        }
        entries.push((EOS.to_string(), sentences, first_eos.unwrap(), 1));
        entries.push((UNK.to_string(), unk.0, if unk.0 == 0 { usize::MAX } else { unk.1 }, 2));
        entries.sort_by(|a, b| {
            let za = a.1 == 0;
            let zb = b.1 == 0;
            za.cmp(&zb).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3))
        });
        Ok(Self::from_entries(
            entries.into_iter().map(|(w, c, _, _)| (w, c)).collect(),
        ))
    }

    fn from_entries(entries: Vec<(String, u64)>) -> Self {
        let (words, freq): (Vec<String>, Vec<u64>) = entries.into_iter().unzip();
        let index: HashMap<String, usize> = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let unk_id = index[UNK];
        let eos_id = index[EOS];
        Self {
            words,
            freq,
            index,
            unk_id,
            eos_id,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn eos_id(&self) -> usize {
        self.eos_id
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Training count of an id.
    pub fn freq(&self, id: usize) -> u64 {
        self.freq[id]
    }

    pub fn freqs(&self) -> &[u64] {
        &self.freq
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(self.unk_id)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Ids of one sentence followed by the end-of-sentence id. Blank lines
    /// produce nothing.
    pub fn encode_line(&self, line: &str, out: &mut Vec<u32>) {
        let before = out.len();
        out.extend(line.split_whitespace().map(|w| self.id(w) as u32));
        if out.len() > before {
            out.push(self.eos_id as u32);
        }
    }

    pub fn encode<'a>(&self, lines: impl IntoIterator<Item = &'a str>) -> Vec<u32> {
        let mut out = Vec::new();
        for line in lines {
            self.encode_line(line, &mut out);
        }
        out
    }

    /// Tab-separated `word<TAB>count` lines in id order.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (w, c) in self.words.iter().zip(&self.freq) {
            writeln!(s, "{w}\t{c}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (w, c) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("vocabulary line {}: expected word<TAB>count", n + 1)))?;
            let c: u64 = c
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("vocabulary line {}: bad count {c:?}", n + 1)))?;
            entries.push((w.to_string(), c));
        }
        for special in [UNK, EOS] {
            if !entries.iter().any(|(w, _)| w == special) {
                return Err(Error::Format(format!("vocabulary lacks {special}")));
            }
        }
        Ok(Self::from_entries(entries))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Fraction of tokens in `stream` that are the unknown symbol.
    pub fn oov_rate(&self, stream: &[u32]) -> f64 {
        if stream.is_empty() {
            return 0.0;
        }
        stream.iter().filter(|&&t| t as usize == self.unk_id).count() as f64 / stream.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_keeps_words_above_min_count() {
        let v = Vocabulary::build(["a a a a b b b b c"], 3).unwrap();
        assert_eq!(v.len(), 4);
        assert!(v.contains("a") && v.contains("b") && !v.contains("c"));
        assert_eq!(v.id("c"), v.unk_id());
        assert_eq!(v.freq(v.unk_id()), 1);
        // a and b tie on count; a occurs first
        assert_eq!(&v.words()[..2], ["a", "b"]);
    }

    #[test]
    fn frequency_order() {
        let v = Vocabulary::build(["x y y"], 0).unwrap();
        assert_eq!(v.words(), ["y", "x", EOS, UNK]);
        assert_eq!(v.freq(v.unk_id()), 0);
    }

    #[test]
    fn freq_non_increasing_and_file_round_trip() {
        let lines = ["the cat sat on the mat", "the dog", "a cat"];
        let v = Vocabulary::build(lines, 0).unwrap();
        assert!(v.freqs().windows(2).all(|w| w[0] >= w[1] || w[1] == 0));
        assert_eq!(v.word(0), "the");
        assert_eq!(Vocabulary::parse(&v.to_file_string()).unwrap(), v);
        let ids = v.encode(lines);
        assert_eq!(ids.len(), 6 + 2 + 2 + 3);
        assert_eq!(ids.iter().filter(|&&i| i as usize == v.eos_id()).count(), 3);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(Vocabulary::build(["", "  "], 0), Err(Error::EmptyCorpus)));
    }
}
