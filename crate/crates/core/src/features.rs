//! Turns simulator event logs into model inputs: PC-history samples for the
//! replacement model, PC/page/offset histories for the prefetch model, and
//! positive/negative pairs for contrastive pretraining.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cachesim::{CacheEvent, MissType, STRIDE_CLAMP};
use crate::oracle::LabeledInsertion;
use crate::trace::{page_and_offset, BlockGeometry};

pub const PAD_ID: u32 = 0;
pub const OOV_ID: u32 = 1;
const RESERVED: u32 = 2;

/// `[set fraction, stride / 8, miss-type one-hot (4), core id]`
pub const CONTEXT_DIM: usize = 7;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("cannot build a vocabulary from an empty event list")]
    EmptyVocab,
    #[error("label for insertion {insertion_id} at position {position} does not join to the event log: {reason}")]
    Unjoinable {
        insertion_id: u64,
        position: usize,
        reason: String,
    },
}

/// Dense token ids for PCs or pages. Id 0 is padding, id 1 is out-of-vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    forward: HashMap<u64, u32>,
    reverse: Vec<u64>,
}

impl Vocab {
    /// Assigns ids in first-appearance order to every value seen at least
    /// `min_count` times.
    pub fn from_values<I>(values: I, min_count: usize) -> Result<Self, FeatureError>
    where
        I: IntoIterator<Item = u64>,
    {
        let mut counts: HashMap<u64, usize> = HashMap::new();
        let mut order = Vec::new();
        for v in values {
            let c = counts.entry(v).or_insert(0);
            if *c == 0 {
                order.push(v);
            }
            *c += 1;
        }
        if order.is_empty() {
            return Err(FeatureError::EmptyVocab);
        }
        let reverse: Vec<u64> = order
            .into_iter()
            .filter(|v| counts[v] >= min_count.max(1))
            .collect();
        Ok(Self::from_ordered(reverse))
    }

    /// Rebuilds a vocabulary from its values in id order (ids 2, 3, ...).
    pub fn from_ordered(reverse: Vec<u64>) -> Self {
        let forward = reverse
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, i as u32 + RESERVED))
            .collect();
        Self { forward, reverse }
    }

    pub fn lookup(&self, value: u64) -> u32 {
        self.forward.get(&value).copied().unwrap_or(OOV_ID)
    }

    pub fn value_of(&self, id: u32) -> Option<u64> {
        id.checked_sub(RESERVED)
            .and_then(|i| self.reverse.get(i as usize).copied())
    }

    pub fn size(&self) -> usize {
        self.reverse.len() + RESERVED as usize
    }

    pub fn values(&self) -> &[u64] {
        &self.reverse
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabField {
    Pc,
    Page,
}

/// Builds a vocabulary over the demand events of a (training) event log.
pub fn build_vocab(
    events: &[CacheEvent],
    field: VocabField,
    geometry: &BlockGeometry,
    min_count: usize,
) -> Result<Vocab, FeatureError> {
    let values = events
        .iter()
        .filter(|e| e.miss_type.is_demand())
        .map(|e| match field {
            VocabField::Pc => e.pc,
            VocabField::Page => page_and_offset(e.block, geometry).0,
        });
    Vocab::from_values(values, min_count)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabs {
    pub pc: Vocab,
    pub page: Vocab,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementSample {
    /// Trace position of the insertion.
    pub position: usize,
    pub insertion_id: u64,
    pub set_index: usize,
    pub block: u64,
    pub pc_history: Vec<u32>,
    pub context: [f64; CONTEXT_DIM],
    /// 1.0 for cache-friendly, 0.0 for cache-averse.
    pub label: f64,
}

impl ReplacementSample {
    pub fn is_friendly(&self) -> bool {
        self.label >= 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefetchTarget {
    pub page: u32,
    pub offset: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefetchSample {
    /// Trace position of the newest access in the histories.
    pub position: usize,
    pub set_index: usize,
    pub block: u64,
    pub pc_history: Vec<u32>,
    pub page_history: Vec<u32>,
    /// Offset tokens are `offset + 1`; 0 pads.
    pub offset_history: Vec<u32>,
    /// Page and offset of the next demand access, when there is one.
    pub target: Option<PrefetchTarget>,
}

/// Demand events indexed by trace position.
pub fn demand_events(events: &[CacheEvent]) -> Vec<&CacheEvent> {
    events.iter().filter(|e| e.miss_type.is_demand()).collect()
}

pub fn encode_context(
    set_index: usize,
    num_sets: usize,
    stride_id: i8,
    miss_type: MissType,
    core_id: u16,
) -> [f64; CONTEXT_DIM] {
    let mut ctx = [0.0; CONTEXT_DIM];
    ctx[0] = set_index as f64 / num_sets.max(1) as f64;
    ctx[1] = stride_id as f64 / STRIDE_CLAMP as f64;
    ctx[2 + miss_type.index()] = 1.0;
    ctx[6] = core_id as f64;
    ctx
}

fn left_padded<F: Fn(usize) -> u32>(end: usize, h: usize, token: F) -> Vec<u32> {
    let start = (end + 1).saturating_sub(h);
    let mut out = vec![PAD_ID; h - (end + 1 - start)];
    out.extend((start..=end).map(token));
    out
}

/// One labeled sample per insertion. Labels join to the demand event at the
/// same trace position, and the blocks must agree.
pub fn extract_replacement_samples(
    events: &[CacheEvent],
    labels: &[LabeledInsertion],
    vocabs: &Vocabs,
    num_sets: usize,
    h: usize,
) -> Result<Vec<ReplacementSample>, FeatureError> {
    let demand = demand_events(events);
    let mut out = Vec::with_capacity(labels.len());
    for l in labels {
        let unjoinable = |reason: String| FeatureError::Unjoinable {
            insertion_id: l.insertion_id,
            position: l.trace_position,
            reason,
        };
        let ev = demand
            .get(l.trace_position)
            .ok_or_else(|| unjoinable(format!("log has {} demand events", demand.len())))?;
        if ev.block != l.block {
            return Err(unjoinable(format!(
                "event block {:#x} differs from label block {:#x}",
                ev.block, l.block
            )));
        }
        out.push(ReplacementSample {
            position: l.trace_position,
            insertion_id: l.insertion_id,
            set_index: l.set_index,
            block: l.block,
            pc_history: left_padded(l.trace_position, h, |i| vocabs.pc.lookup(demand[i].pc)),
            context: encode_context(ev.set_index, num_sets, ev.stride_id, ev.miss_type, ev.core_id),
            label: if l.label.is_friendly() { 1.0 } else { 0.0 },
        });
    }
    out.sort_by_key(|s| s.position);
    Ok(out)
}

/// Prefetch-model view of the demand stream ending at `position`, padded on
/// the left near the start of the trace.
pub fn prefetch_view(
    demand: &[&CacheEvent],
    position: usize,
    vocabs: &Vocabs,
    geometry: &BlockGeometry,
    h: usize,
) -> PrefetchSample {
    let page_tok = |i: usize| vocabs.page.lookup(page_and_offset(demand[i].block, geometry).0);
    let off_tok = |i: usize| page_and_offset(demand[i].block, geometry).1 as u32 + 1;
    let target = demand.get(position + 1).map(|next| {
        let (page, offset) = page_and_offset(next.block, geometry);
        PrefetchTarget {
            page: vocabs.page.lookup(page),
            offset: offset as u32,
        }
    });
    PrefetchSample {
        position,
        set_index: demand[position].set_index,
        block: demand[position].block,
        pc_history: left_padded(position, h, |i| vocabs.pc.lookup(demand[i].pc)),
        page_history: left_padded(position, h, page_tok),
        offset_history: left_padded(position, h, off_tok),
        target,
    }
}

/// One sample per demand position `i >= h - 1` that has a successor.
pub fn extract_prefetch_samples(
    events: &[CacheEvent],
    vocabs: &Vocabs,
    geometry: &BlockGeometry,
    h: usize,
) -> Vec<PrefetchSample> {
    let demand = demand_events(events);
    if h == 0 || demand.len() < h + 1 {
        return Vec::new();
    }
    (h - 1..demand.len() - 1)
        .map(|i| prefetch_view(&demand, i, vocabs, geometry, h))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairConfig {
    /// Maximum distance (in demand accesses) from prefetch context to insertion.
    pub window: usize,
    pub negatives_per_positive: usize,
    /// Stricter pairing: the insertion must be of the same block as the
    /// prefetch context, not merely the same set.
    pub same_block: bool,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            window: 32,
            negatives_per_positive: 4,
            same_block: false,
        }
    }
}

/// A replacement/prefetch pairing. Samples are referenced by trace position,
/// which is unique within each sample list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSample {
    pub pair_id: usize,
    pub is_positive: bool,
    pub repl_ref: usize,
    pub pf_ref: usize,
    /// `pair_id` of the positive this pair belongs to.
    pub group: usize,
}

/// Positives pair every prefetch context at `i` with every insertion at `j`
/// in the same set where `0 < j - i <= window`. Each positive is followed by
/// `k` negatives: the same insertion against prefetch contexts drawn
/// uniformly from outside its window.
pub fn make_pairs(
    repl: &[ReplacementSample],
    pf: &[PrefetchSample],
    cfg: &PairConfig,
    seed: u64,
) -> Vec<PairSample> {
    let mut repl_pos: Vec<(usize, usize, u64)> =
        repl.iter().map(|s| (s.position, s.set_index, s.block)).collect();
    repl_pos.sort_unstable();
    let mut pf_pos: Vec<(usize, usize, u64)> =
        pf.iter().map(|s| (s.position, s.set_index, s.block)).collect();
    pf_pos.sort_unstable();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &(j, set, block) in &repl_pos {
        let lo = pf_pos.partition_point(|p| p.0 + cfg.window < j);
        let hi = pf_pos.partition_point(|p| p.0 < j);
        let outside = pf_pos.len() - (hi - lo);
        for &(i, pf_set, pf_block) in &pf_pos[lo..hi] {
            let linked = if cfg.same_block {
                pf_block == block
            } else {
                pf_set == set
            };
            if !linked {
                continue;
            }
            let group = out.len();
            out.push(PairSample {
                pair_id: group,
                is_positive: true,
                repl_ref: j,
                pf_ref: i,
                group,
            });
            if outside == 0 {
                continue;
            }
            for _ in 0..cfg.negatives_per_positive {
                let mut r = rng.gen_range(0..outside);
                if r >= lo {
                    r += hi - lo;
                }
                out.push(PairSample {
                    pair_id: out.len(),
                    is_positive: false,
                    repl_ref: j,
                    pf_ref: pf_pos[r].0,
                    group,
                });
            }
        }
    }
    out
}

pub fn write_pairs_csv<W: Write>(pairs: &[PairSample], mut out: W) -> std::io::Result<()> {
    writeln!(out, "pair_id,pos,repl_ref,pf_ref")?;
    for p in pairs {
        writeln!(
            out,
            "{},{},{},{}",
            p.pair_id,
            u8::from(p.is_positive),
            p.repl_ref,
            p.pf_ref
        )?;
    }
    Ok(())
}

fn join_tokens(t: &[u32]) -> String {
    t.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

pub fn write_replacement_samples_csv<W: Write>(
    samples: &[ReplacementSample],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "position,insertion_id,set,label,pc_history,context")?;
    for s in samples {
        let ctx: Vec<String> = s.context.iter().map(|v| v.to_string()).collect();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            s.position,
            s.insertion_id,
            s.set_index,
            s.label,
            join_tokens(&s.pc_history),
            ctx.join(" ")
        )?;
    }
    Ok(())
}

pub fn write_prefetch_samples_csv<W: Write>(
    samples: &[PrefetchSample],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(
        out,
        "position,set,pc_history,page_history,offset_history,target_page,target_offset"
    )?;
    for s in samples {
        let (tp, to) = s
            .target
            .map(|t| (t.page.to_string(), t.offset.to_string()))
            .unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.position,
            s.set_index,
            join_tokens(&s.pc_history),
            join_tokens(&s.page_history),
            join_tokens(&s.offset_history),
            tp,
            to
        )?;
    }
    Ok(())
}
