//! Offline Belady MIN replay and per-insertion reuse labels.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::cachesim::CacheConfig;
use crate::trace::Trace;

pub const LABEL_CSV_HEADER: &str = "insertion_id,position,block,pc,set,label";

/// Exhaustive search is refused beyond these sizes.
pub const BRUTE_FORCE_MAX_LEN: usize = 14;
pub const BRUTE_FORCE_MAX_WAYS: usize = 3;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("brute-force search refused: {0}")]
    TooLarge(String),
    #[error("malformed label file at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `next_use[i]` is the next position holding the same block, if any.
pub type NextUseMap = Vec<Option<usize>>;

pub fn next_use_scan(blocks: &[u64]) -> NextUseMap {
    let mut next = vec![None; blocks.len()];
    let mut last_seen: HashMap<u64, usize> = HashMap::with_capacity(blocks.len());
    for i in (0..blocks.len()).rev() {
        next[i] = last_seen.insert(blocks[i], i);
    }
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReuseLabel {
    CacheFriendly,
    CacheAverse,
}

impl ReuseLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ReuseLabel::CacheFriendly => "friendly",
            ReuseLabel::CacheAverse => "averse",
        }
    }

    pub fn is_friendly(self) -> bool {
        self == ReuseLabel::CacheFriendly
    }

    pub fn from_friendly(friendly: bool) -> Self {
        if friendly {
            ReuseLabel::CacheFriendly
        } else {
            ReuseLabel::CacheAverse
        }
    }
}

impl fmt::Display for ReuseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledInsertion {
    pub insertion_id: u64,
    pub trace_position: usize,
    pub block: u64,
    pub pc: u64,
    pub set_index: usize,
    pub label: ReuseLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Eviction {
    pub position: usize,
    pub set_index: usize,
    pub way: usize,
    pub victim_block: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BeladyResult {
    pub hits: u64,
    pub misses: u64,
    pub evictions: Vec<Eviction>,
    pub insertions: Vec<LabeledInsertion>,
    /// Hits received by each insertion, same order as `insertions`.
    pub hits_per_insertion: Vec<u32>,
}

impl BeladyResult {
    pub fn friendly_fraction(&self) -> f64 {
        if self.insertions.is_empty() {
            return 0.0;
        }
        let friendly = self
            .insertions
            .iter()
            .filter(|i| i.label.is_friendly())
            .count();
        friendly as f64 / self.insertions.len() as f64
    }
}

#[derive(Clone, Copy)]
struct Resident {
    block: u64,
    next_use: Option<usize>,
    insertion: usize,
}

/// Set-local MIN over the demand stream: on a full-set miss evict the line
/// whose next use lies farthest ahead (never-reused lines first, lowest way
/// on ties). Every miss inserts.
pub fn belady_simulate(trace: &Trace, config: &CacheConfig) -> BeladyResult {
    let blocks = trace.blocks(&config.geometry);
    let next_use = next_use_scan(&blocks);
    let ways = config.associativity;
    let mut sets: Vec<Vec<Option<Resident>>> = vec![vec![None; ways]; config.num_sets];
    let mut out = BeladyResult {
        hits: 0,
        misses: 0,
        evictions: Vec::new(),
        insertions: Vec::new(),
        hits_per_insertion: Vec::new(),
    };

    for (pos, &block) in blocks.iter().enumerate() {
        let set_index = config.set_of(block);
        let set = &mut sets[set_index];
        if let Some(line) = set.iter_mut().flatten().find(|l| l.block == block) {
            line.next_use = next_use[pos];
            out.hits += 1;
            out.hits_per_insertion[line.insertion] += 1;
            continue;
        }
        out.misses += 1;
        let way = match set.iter().position(Option::is_none) {
            Some(way) => way,
            None => {
                let way = farthest_way(set);
                out.evictions.push(Eviction {
                    position: pos,
                    set_index,
                    way,
                    victim_block: set[way].map(|l| l.block).unwrap_or_default(),
                });
                way
            }
        };
        let insertion = out.insertions.len();
        set[way] = Some(Resident {
            block,
            next_use: next_use[pos],
            insertion,
        });
        out.insertions.push(LabeledInsertion {
            insertion_id: insertion as u64,
            trace_position: pos,
            block,
            pc: trace.accesses[pos].pc,
            set_index,
            label: ReuseLabel::CacheAverse,
        });
        out.hits_per_insertion.push(0);
    }
    for (ins, &hits) in out.insertions.iter_mut().zip(&out.hits_per_insertion) {
        ins.label = ReuseLabel::from_friendly(hits > 0);
    }
    out
}

fn farthest_way(set: &[Option<Resident>]) -> usize {
    let key = |l: &Option<Resident>| l.and_then(|l| l.next_use).unwrap_or(usize::MAX);
    let mut best = 0;
    for way in 1..set.len() {
        if key(&set[way]) > key(&set[best]) {
            best = way;
        }
    }
    best
}

/// Maximum hit count over every possible eviction choice. Exponential; only
/// for traces of at most 14 accesses on caches of at most 3 ways.
pub fn brute_force_optimal(trace: &Trace, config: &CacheConfig) -> Result<u64, OracleError> {
    if trace.len() > BRUTE_FORCE_MAX_LEN {
        return Err(OracleError::TooLarge(format!(
            "trace length {} exceeds {BRUTE_FORCE_MAX_LEN}",
            trace.len()
        )));
    }
    if config.associativity > BRUTE_FORCE_MAX_WAYS {
        return Err(OracleError::TooLarge(format!(
            "associativity {} exceeds {BRUTE_FORCE_MAX_WAYS}",
            config.associativity
        )));
    }
    let blocks = trace.blocks(&config.geometry);
    let mut sets: Vec<Vec<u64>> = vec![Vec::new(); config.num_sets];
    Ok(explore(&blocks, 0, &mut sets, config))
}

fn explore(blocks: &[u64], pos: usize, sets: &mut [Vec<u64>], config: &CacheConfig) -> u64 {
    let Some(&block) = blocks.get(pos) else {
        return 0;
    };
    let s = config.set_of(block);
    if sets[s].contains(&block) {
        return 1 + explore(blocks, pos + 1, sets, config);
    }
    if sets[s].len() < config.associativity {
        sets[s].push(block);
        let best = explore(blocks, pos + 1, sets, config);
        sets[s].pop();
        return best;
    }
    let mut best = 0;
    for way in 0..config.associativity {
        let old = std::mem::replace(&mut sets[s][way], block);
        best = best.max(explore(blocks, pos + 1, sets, config));
        sets[s][way] = old;
    }
    best
}

pub fn write_labels_csv<W: Write>(labels: &[LabeledInsertion], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{LABEL_CSV_HEADER}")?;
    for l in labels {
        writeln!(
            out,
            "{},{},{:#x},{:#x},{},{}",
            l.insertion_id, l.trace_position, l.block, l.pc, l.set_index, l.label
        )?;
    }
    Ok(())
}

pub fn read_labels_csv<R: BufRead>(input: R) -> Result<Vec<LabeledInsertion>, OracleError> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != LABEL_CSV_HEADER {
        return Err(OracleError::Format {
            line: 1,
            message: format!("expected header `{LABEL_CSV_HEADER}`"),
        });
    }
    let num = |s: &str| -> Option<u64> {
        let s = s.trim();
        match s.strip_prefix("0x") {
            Some(h) => u64::from_str_radix(h, 16).ok(),
            None => s.parse().ok(),
        }
    };
    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
        let bad = |message: &str| OracleError::Format {
            line: line_no,
            message: message.to_string(),
        };
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let label = match f[5].trim() {
            "friendly" => ReuseLabel::CacheFriendly,
            "averse" => ReuseLabel::CacheAverse,
            _ => return Err(bad("unknown label")),
        };
        out.push(LabeledInsertion {
            insertion_id: num(f[0]).ok_or_else(|| bad("bad insertion_id"))?,
            trace_position: num(f[1]).ok_or_else(|| bad("bad position"))? as usize,
            block: num(f[2]).ok_or_else(|| bad("bad block"))?,
            pc: num(f[3]).ok_or_else(|| bad("bad pc"))?,
            set_index: num(f[4]).ok_or_else(|| bad("bad set"))? as usize,
            label,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{gen_synthetic, BlockGeometry, Workload};

    fn cfg(sets: usize, ways: usize) -> CacheConfig {
        CacheConfig::new(sets, ways, BlockGeometry::default(), 0).unwrap()
    }

    #[test]
    fn next_use_examples() {
        let (a, b) = (1, 2);
        assert_eq!(next_use_scan(&[a, b, a]), vec![Some(2), None, None]);
        assert!(next_use_scan(&[]).is_empty());
        assert_eq!(next_use_scan(&[a, a, a]), vec![Some(1), Some(2), None]);
    }

    #[test]
    fn abca_two_way() {
        let c = cfg(1, 2);
        let t = Trace::from_blocks(&[1, 2, 3, 1], &c.geometry);
        let r = belady_simulate(&t, &c);
        assert_eq!(r.hits, 1);
        assert_eq!(r.evictions.len(), 1);
        assert_eq!(r.evictions[0].victim_block, 2);
        let labels: Vec<_> = r.insertions.iter().map(|i| i.label).collect();
        use ReuseLabel::*;
        assert_eq!(labels, vec![CacheFriendly, CacheAverse, CacheAverse]);
        assert_eq!(brute_force_optimal(&t, &c).unwrap(), 1);
    }

    #[test]
    fn brute_force_examples() {
        let one = cfg(1, 1);
        let t = |b: &[u64]| Trace::from_blocks(b, &one.geometry);
        assert_eq!(brute_force_optimal(&t(&[1, 1]), &one).unwrap(), 1);
        assert_eq!(brute_force_optimal(&t(&[1, 2, 1, 2]), &one).unwrap(), 0);
    }

    #[test]
    fn brute_force_refuses_large() {
        let c = cfg(1, 2);
        let long = Trace::from_blocks(&[0; 15], &c.geometry);
        assert!(matches!(brute_force_optimal(&long, &c), Err(OracleError::TooLarge(_))));
        let wide = cfg(1, 4);
        let short = Trace::from_blocks(&[0; 3], &wide.geometry);
        assert!(matches!(brute_force_optimal(&short, &wide), Err(OracleError::TooLarge(_))));
    }

    #[test]
    fn stream_all_averse() {
        let g = BlockGeometry::default();
        let t = gen_synthetic(&Workload::Stream { length: 200 }, &g, 3).unwrap();
        let r = belady_simulate(&t, &cfg(4, 2));
        assert_eq!(r.hits, 0);
        assert!(r.insertions.iter().all(|i| i.label == ReuseLabel::CacheAverse));
    }

    #[test]
    fn fitting_loop_all_friendly() {
        let g = BlockGeometry::default();
        let t = gen_synthetic(&Workload::Loop { working_set: 4, length: 40 }, &g, 3).unwrap();
        let r = belady_simulate(&t, &cfg(2, 2));
        assert_eq!(r.misses, 4);
        assert_eq!(r.insertions.len(), 4);
        assert!(r.insertions.iter().all(|i| i.label == ReuseLabel::CacheFriendly));
    }

    #[test]
    fn trace_end_residency() {
        // B stays resident until the end after one hit; C is never hit.
        let c = cfg(1, 2);
        let t = Trace::from_blocks(&[2, 2, 3], &c.geometry);
        let r = belady_simulate(&t, &c);
        use ReuseLabel::*;
        let labels: Vec<_> = r.insertions.iter().map(|i| i.label).collect();
        assert_eq!(labels, vec![CacheFriendly, CacheAverse]);
    }

    #[test]
    fn labels_csv_round_trip() {
        let c = cfg(2, 2);
        let t = Trace::from_blocks(&[1, 2, 3, 1, 5, 2], &c.geometry);
        let r = belady_simulate(&t, &c);
        let mut buf = Vec::new();
        write_labels_csv(&r.insertions, &mut buf).unwrap();
        assert_eq!(read_labels_csv(buf.as_slice()).unwrap(), r.insertions);
        assert!(read_labels_csv("nope\n".as_bytes()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn small_case() -> impl Strategy<Value = (Vec<u64>, usize, usize)> {
            (
                prop::collection::vec(0u64..6, 0..=14),
                prop::sample::select(vec![1usize, 2]),
                1usize..=3,
            )
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(256))]

            #[test]
            fn min_is_optimal((blocks, sets, ways) in small_case()) {
                let c = cfg(sets, ways);
                let t = Trace::from_blocks(&blocks, &c.geometry);
                prop_assert_eq!(belady_simulate(&t, &c).hits, brute_force_optimal(&t, &c).unwrap());
            }

            #[test]
            fn label_bookkeeping(blocks in prop::collection::vec(0u64..10, 0..60), ways in 1usize..4) {
                let c = cfg(2, ways);
                let t = Trace::from_blocks(&blocks, &c.geometry);
                let r = belady_simulate(&t, &c);
                prop_assert_eq!(r.hits + r.misses, blocks.len() as u64);
                prop_assert_eq!(r.insertions.len() as u64, r.misses);
                let mut friendly_hits = 0u64;
                for (ins, &h) in r.insertions.iter().zip(&r.hits_per_insertion) {
                    prop_assert_eq!(ins.label.is_friendly(), h > 0);
                    if ins.label.is_friendly() {
                        friendly_hits += h as u64;
                    }
                }
                prop_assert_eq!(friendly_hits, r.hits);
                prop_assert_eq!(&r, &belady_simulate(&t, &c));
            }

            #[test]
            fn next_use_definition(blocks in prop::collection::vec(0u64..5, 0..40)) {
                let next = next_use_scan(&blocks);
                for (i, n) in next.iter().enumerate() {
                    match *n {
                        Some(j) => {
                            prop_assert!(j > i);
                            prop_assert_eq!(blocks[j], blocks[i]);
                            prop_assert!(!blocks[i + 1..j].contains(&blocks[i]));
                        }
                        None => prop_assert!(!blocks[i + 1..].contains(&blocks[i])),
                    }
                }
            }
        }
    }
}
