//! Byte-pair encoding: greedy merge learning over word types and in-order
//! merge application.
//!
//! Words are split into characters with [`END_OF_WORD`] appended to the last
//! one, so sub-word sequences can be inverted by concatenation.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
/// Stand-in for characters outside the learned inventory.
pub const UNKNOWN_CHAR: &str = "<unkc>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    /// Character inventory of the training data; `None` accepts everything.
    inventory: Option<BTreeSet<char>>,
}

/// Sub-word units of a line and, per unit, whether it ends a word.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Segmentation {
    pub units: Vec<String>,
    pub word_end: Vec<bool>,
}

fn initial_symbols(word: &str, inventory: Option<&BTreeSet<char>>) -> Vec<String> {
    let n = word.chars().count();
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            let mut s = match inventory {
                Some(inv) if !inv.contains(&c) => UNKNOWN_CHAR.to_string(),
                _ => c.to_string(),
            };
            if i + 1 == n {
                s.push_str(END_OF_WORD);
            }
            s
        })
        .collect()
}

/// Replaces every non-overlapping occurrence of `(left, right)`, scanning left to right.
fn merge_word<S: Clone + PartialEq>(symbols: &[S], left: &S, right: &S, merged: &S) -> Vec<S> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == *left && symbols[i + 1] == *right {
            out.push(merged.clone());
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

type PairKey = (u32, u32);

/// Learns up to `num_codes` merges from whitespace-tokenized lines. Learning
/// stops early when no adjacent pair is left. Count ties go to the
/// lexicographically smallest pair.
pub fn learn_bpe<'a>(lines: impl IntoIterator<Item = &'a str>, num_codes: i64) -> Result<BpeModel> {
    if num_codes < 0 {
        return Err(Error::InvalidArgument(format!(
            "number of codes {num_codes} is negative"
        )));
    }
    let mut word_freq: HashMap<&str, i64> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    let mut inventory = BTreeSet::new();
    for line in lines {
        for w in line.split_whitespace() {
            let e = word_freq.entry(w).or_insert_with(|| {
                order.push(w);
                0
            });
            *e += 1;
            inventory.extend(w.chars());
        }
    }
    if order.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut symbols: Vec<String> = Vec::new();
    let mut symbol_ids: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: String, symbols: &mut Vec<String>| -> u32 {
        *symbol_ids.entry(s.clone()).or_insert_with(|| {
            symbols.push(s);
            symbols.len() as u32 - 1
        })
    };
    let mut words: Vec<Vec<u32>> = Vec::with_capacity(order.len());
    let freqs: Vec<i64> = order.iter().map(|w| word_freq[w]).collect();
    for w in &order {
        let syms = initial_symbols(w, None);
        words.push(syms.into_iter().map(|s| intern(s, &mut symbols)).collect());
    }

    let mut counts: HashMap<PairKey, i64> = HashMap::new();
    let mut occurs: HashMap<PairKey, HashSet<usize>> = HashMap::new();
    for (wi, syms) in words.iter().enumerate() {
        for p in syms.windows(2) {
            *counts.entry((p[0], p[1])).or_default() += freqs[wi];
            occurs.entry((p[0], p[1])).or_default().insert(wi);
        }
    }
    let mut heap: BinaryHeap<(i64, Reverse<(String, String)>, PairKey)> = counts
        .iter()
        .map(|(&k, &c)| {
            (
                c,
                Reverse((symbols[k.0 as usize].clone(), symbols[k.1 as usize].clone())),
                k,
            )
        })
        .collect();

    let mut merges = Vec::new();
    while (merges.len() as i64) < num_codes {
        let Some((c, Reverse((ls, rs)), key)) = heap.pop() else {
            break;
        };
        if c <= 0 || counts.get(&key).copied() != Some(c) {
            continue;
        }
        let merged = intern(format!("{ls}{rs}"), &mut symbols);
        merges.push((ls, rs));
        let affected: Vec<usize> = occurs.remove(&key).map(|s| s.into_iter().collect()).unwrap_or_default();
        let mut touched: HashSet<PairKey> = HashSet::new();
        for wi in affected {
            let old = &words[wi];
            let new = merge_word(old, &key.0, &key.1, &merged);
            let f = freqs[wi];
            for p in old.windows(2) {
                let k = (p[0], p[1]);
                *counts.get_mut(&k).unwrap() -= f;
                touched.insert(k);
            }
            for p in new.windows(2) {
                let k = (p[0], p[1]);
                *counts.entry(k).or_default() += f;
                occurs.entry(k).or_default().insert(wi);
                touched.insert(k);
            }
            words[wi] = new;
        }
        counts.remove(&key);
        for k in touched {
            if let Some(&c) = counts.get(&k) {
                if c > 0 {
                    heap.push((
                        c,
                        Reverse((symbols[k.0 as usize].clone(), symbols[k.1 as usize].clone())),
                        k,
                    ));
                }
            }
        }
    }
    Ok(BpeModel::new(merges, Some(inventory)))
}

impl BpeModel {
    pub fn new(merges: Vec<(String, String)>, inventory: Option<BTreeSet<char>>) -> Self {
        let ranks = merges.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        Self {
            merges,
            ranks,
            inventory,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn inventory(&self) -> Option<&BTreeSet<char>> {
        self.inventory.as_ref()
    }

    /// Sub-word units of one word. Merges are applied in learned order, which
    /// reproduces the segmentation seen during learning.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = initial_symbols(word, self.inventory.as_ref());
        let mut last: Option<usize> = None;
        loop {
            let next = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).copied())
                .filter(|&r| last.is_none_or(|l| r > l))
                .min();
            let Some(r) = next else { break };
            let (l, rt) = &self.merges[r];
            syms = merge_word(&syms, l, rt, &format!("{l}{rt}"));
            last = Some(r);
        }
        syms
    }

    pub fn segment_line(&self, line: &str) -> Segmentation {
        let mut seg = Segmentation::default();
        for w in line.split_whitespace() {
            let units = self.segment_word(w);
            let n = units.len();
            seg.word_end.extend((0..n).map(|i| i + 1 == n));
            seg.units.extend(units);
        }
        seg
    }

    /// Model file: merge count on the first line, then `left right` per merge.
    pub fn to_file_string(&self) -> String {
        let mut s = format!("{}\n", self.merges.len());
        for (l, r) in &self.merges {
            writeln!(s, "{l} {r}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let count: usize = lines
            .next()
            .and_then(|h| h.trim().parse().ok())
            .ok_or_else(|| Error::Format("BPE model: missing merge count header".into()))?;
        let mut merges = Vec::with_capacity(count);
        for (n, line) in lines.enumerate().take(count) {
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("BPE model line {}: expected 'left right'", n + 2)))?;
            merges.push((l.to_string(), r.to_string()));
        }
        if merges.len() != count {
            return Err(Error::Format(format!(
                "BPE model: header says {count} merges, found {}",
                merges.len()
            )));
        }
        Ok(Self::new(merges, None))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Reassembles words from sub-word units by concatenation, splitting after
/// every end-of-word marker.
pub fn invert_units<S: AsRef<str>>(units: &[S]) -> String {
    let mut words = Vec::new();
    let mut cur = String::new();
    for u in units {
        let u = u.as_ref();
        match u.strip_suffix(END_OF_WORD) {
            Some(stem) => {
                cur.push_str(stem);
                words.push(std::mem::take(&mut cur));
            }
            None => cur.push_str(u),
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words.join(" ")
}
