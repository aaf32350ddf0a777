//! Set-associative cache simulator with pluggable replacement policies and
//! prefetchers. Every demand access and every prefetch fill is logged as a
//! [`CacheEvent`].

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use thiserror::Error;

use crate::trace::{block_of, BlockGeometry, MemoryAccess, Trace};

/// Largest magnitude recorded in [`CacheEvent::stride_id`].
pub const STRIDE_CLAMP: i64 = 8;

pub const EVENT_CSV_HEADER: &str =
    "event,cycle,block,pc,core,miss_type,stride,set,is_insertion,insertion_id";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid cache configuration: {0}")]
    Config(String),
    #[error("policy chose way {way} of {associativity} at event {event_index}")]
    BadVictim {
        event_index: usize,
        way: usize,
        associativity: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CacheConfig {
    pub num_sets: usize,
    pub associativity: usize,
    pub geometry: BlockGeometry,
    pub prefetch_degree: usize,
}

impl CacheConfig {
    pub fn new(
        num_sets: usize,
        associativity: usize,
        geometry: BlockGeometry,
        prefetch_degree: usize,
    ) -> Result<Self, SimError> {
        if num_sets == 0 || !num_sets.is_power_of_two() {
            return Err(SimError::Config(format!(
                "set count {num_sets} must be a power of two"
            )));
        }
        if associativity == 0 {
            return Err(SimError::Config("associativity must be at least 1".into()));
        }
        Ok(Self {
            num_sets,
            associativity,
            geometry,
            prefetch_degree,
        })
    }

    pub fn set_of(&self, block: u64) -> usize {
        (block % self.num_sets as u64) as usize
    }

    pub fn capacity_blocks(&self) -> usize {
        self.num_sets * self.associativity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheLineState {
    pub block: u64,
    pub valid: bool,
    pub last_touch: u64,
    pub inserted_by_prefetch: bool,
    /// Demand hits received since insertion.
    pub demand_hits: u32,
    pub insertion_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MissType {
    Hit,
    DemandMiss,
    PrefetchFill,
    /// Demand hit on a prefetched line that had not been demanded yet.
    PrefetchHit,
}

impl MissType {
    pub const ALL: [MissType; 4] = [
        MissType::Hit,
        MissType::DemandMiss,
        MissType::PrefetchFill,
        MissType::PrefetchHit,
    ];

    pub fn index(self) -> usize {
        match self {
            MissType::Hit => 0,
            MissType::DemandMiss => 1,
            MissType::PrefetchFill => 2,
            MissType::PrefetchHit => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MissType::Hit => "hit",
            MissType::DemandMiss => "demand_miss",
            MissType::PrefetchFill => "prefetch_fill",
            MissType::PrefetchHit => "prefetch_hit",
        }
    }

    pub fn is_demand(self) -> bool {
        self != MissType::PrefetchFill
    }
}

impl fmt::Display for MissType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// State snapshot logged at every tag lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEvent {
    pub event_index: usize,
    /// Trace position of the demand access that produced (or triggered) this event.
    pub position: usize,
    pub cycle: u64,
    pub block: u64,
    pub pc: u64,
    pub core_id: u16,
    pub miss_type: MissType,
    pub stride_id: i8,
    pub set_index: usize,
    pub is_insertion: bool,
    pub insertion_id: Option<u64>,
    pub way: usize,
    pub evicted_block: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimResult {
    pub demand_hits: u64,
    pub demand_misses: u64,
    pub prefetch_issued: u64,
    pub prefetch_useful: u64,
    pub events: Vec<CacheEvent>,
    /// Cache contents at the end of the run, `set * associativity + way`.
    pub final_lines: Vec<CacheLineState>,
}

impl SimResult {
    /// Demand events only; the i-th element is trace position i.
    pub fn demand_events(&self) -> impl Iterator<Item = &CacheEvent> {
        self.events.iter().filter(|e| e.miss_type.is_demand())
    }
}

/// What a policy callback knows about the access being serviced.
#[derive(Debug, Clone, Copy)]
pub struct AccessContext<'a> {
    pub position: usize,
    pub event_index: usize,
    pub access: &'a MemoryAccess,
    pub block: u64,
    pub set_index: usize,
    pub stride_id: i8,
    pub is_prefetch: bool,
}

pub trait ReplacementPolicy {
    /// Called for every demand access before the tag lookup.
    fn on_access(&mut self, _ctx: &AccessContext<'_>) {}
    /// Called on a demand hit, after the simulator refreshed `last_touch`.
    fn on_hit(&mut self, _ctx: &AccessContext<'_>, _way: usize) {}
    /// Called once the new line sits in `way`.
    fn on_insert(&mut self, _ctx: &AccessContext<'_>, _way: usize) {}
    /// Picks the way to evict from a full set.
    fn choose_victim(&mut self, ctx: &AccessContext<'_>, lines: &[CacheLineState]) -> usize;
}

/// Way with the smallest `last_touch`; ties go to the lowest way index.
pub fn lru_choose_victim(lines: &[CacheLineState]) -> usize {
    let mut best = 0;
    for (way, line) in lines.iter().enumerate().skip(1) {
        if line.last_touch < lines[best].last_touch {
            best = way;
        }
    }
    best
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Lru;

impl ReplacementPolicy for Lru {
    fn choose_victim(&mut self, _ctx: &AccessContext<'_>, lines: &[CacheLineState]) -> usize {
        lru_choose_victim(lines)
    }
}

/// Evicts the most recently used line. Only useful as a pessimal reference.
#[derive(Debug, Default, Clone, Copy)]
pub struct Mru;

impl ReplacementPolicy for Mru {
    fn choose_victim(&mut self, _ctx: &AccessContext<'_>, lines: &[CacheLineState]) -> usize {
        let mut best = 0;
        for (way, line) in lines.iter().enumerate().skip(1) {
            if line.last_touch > lines[best].last_touch {
                best = way;
            }
        }
        best
    }
}

pub trait Prefetcher {
    /// Observes a demand access and returns candidate blocks to prefetch.
    fn observe(&mut self, access: &MemoryAccess, block: u64, hit: bool) -> Vec<u64>;
}

/// Per-PC stride history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StrideEntry {
    pub last_block: u64,
    pub last_stride: i64,
}

pub type StrideHistory = HashMap<u64, StrideEntry>;

/// Emits `block + stride, ..., block + degree * stride` once a PC shows the
/// same non-zero stride twice in a row. Updates `history` in place.
pub fn stride_prefetcher_observe(
    history: &mut StrideHistory,
    pc: u64,
    block: u64,
    degree: usize,
) -> Vec<u64> {
    let mut out = Vec::new();
    match history.get_mut(&pc) {
        None => {
            history.insert(
                pc,
                StrideEntry {
                    last_block: block,
                    last_stride: 0,
                },
            );
        }
        Some(entry) => {
            let stride = block.wrapping_sub(entry.last_block) as i64;
            if stride != 0 && stride == entry.last_stride {
                for k in 1..=degree as i64 {
                    if let Some(target) = (block as i64).checked_add(stride * k) {
                        if target >= 0 {
                            out.push(target as u64);
                        }
                    }
                }
            }
            entry.last_block = block;
            entry.last_stride = stride;
        }
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct StridePrefetcher {
    pub degree: usize,
    pub history: StrideHistory,
}

impl StridePrefetcher {
    pub fn new(degree: usize) -> Self {
        Self {
            degree,
            history: HashMap::new(),
        }
    }
}

impl Prefetcher for StridePrefetcher {
    fn observe(&mut self, access: &MemoryAccess, block: u64, _hit: bool) -> Vec<u64> {
        stride_prefetcher_observe(&mut self.history, access.pc, block, self.degree)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NextLinePrefetcher {
    pub degree: usize,
}

impl Prefetcher for NextLinePrefetcher {
    fn observe(&mut self, _access: &MemoryAccess, block: u64, _hit: bool) -> Vec<u64> {
        (1..=self.degree as u64).map(|k| block + k).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PrefetchTrigger {
    #[default]
    AllAccesses,
    MissesOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SimOptions {
    pub prefetch_trigger: PrefetchTrigger,
}

struct Cache {
    assoc: usize,
    lines: Vec<CacheLineState>,
}

impl Cache {
    fn set(&self, set: usize) -> &[CacheLineState] {
        &self.lines[set * self.assoc..(set + 1) * self.assoc]
    }

    fn lookup(&self, set: usize, block: u64) -> Option<usize> {
        self.set(set)
            .iter()
            .position(|l| l.valid && l.block == block)
    }

    fn line_mut(&mut self, set: usize, way: usize) -> &mut CacheLineState {
        &mut self.lines[set * self.assoc + way]
    }
}

/// Replays `trace` through the cache.
pub fn simulate(
    trace: &Trace,
    config: &CacheConfig,
    policy: &mut dyn ReplacementPolicy,
    mut prefetcher: Option<&mut dyn Prefetcher>,
    options: &SimOptions,
) -> Result<SimResult, SimError> {
    let assoc = config.associativity;
    let mut cache = Cache {
        assoc,
        lines: vec![CacheLineState::default(); config.num_sets * assoc],
    };
    let mut result = SimResult {
        demand_hits: 0,
        demand_misses: 0,
        prefetch_issued: 0,
        prefetch_useful: 0,
        events: Vec::with_capacity(trace.len()),
        final_lines: Vec::new(),
    };
    let mut clock = 0u64;
    let mut next_insertion = 0u64;
    let mut last_block_by_pc: HashMap<u64, u64> = HashMap::new();

    for (position, access) in trace.accesses.iter().enumerate() {
        let block = block_of(access.address, &config.geometry);
        let set_index = config.set_of(block);
        let stride_id = match last_block_by_pc.insert(access.pc, block) {
            Some(prev) => (block.wrapping_sub(prev) as i64).clamp(-STRIDE_CLAMP, STRIDE_CLAMP) as i8,
            None => 0,
        };
        let ctx = AccessContext {
            position,
            event_index: result.events.len(),
            access,
            block,
            set_index,
            stride_id,
            is_prefetch: false,
        };
        clock += 1;
        policy.on_access(&ctx);

        let hit = match cache.lookup(set_index, block) {
            Some(way) => {
                let line = cache.line_mut(set_index, way);
                let miss_type = if line.inserted_by_prefetch && line.demand_hits == 0 {
                    result.prefetch_useful += 1;
                    MissType::PrefetchHit
                } else {
                    MissType::Hit
                };
                line.demand_hits += 1;
                line.last_touch = clock;
                result.demand_hits += 1;
                policy.on_hit(&ctx, way);
                result.events.push(CacheEvent {
                    event_index: ctx.event_index,
                    position,
                    cycle: access.cycle,
                    block,
                    pc: access.pc,
                    core_id: access.core_id,
                    miss_type,
                    stride_id,
                    set_index,
                    is_insertion: false,
                    insertion_id: None,
                    way,
                    evicted_block: None,
                });
                true
            }
            None => {
                result.demand_misses += 1;
                let (way, evicted) = fill(&mut cache, policy, &ctx, config)?;
                let id = next_insertion;
                next_insertion += 1;
                *cache.line_mut(set_index, way) = CacheLineState {
                    block,
                    valid: true,
                    last_touch: clock,
                    inserted_by_prefetch: false,
                    demand_hits: 0,
                    insertion_id: id,
                };
                policy.on_insert(&ctx, way);
                result.events.push(CacheEvent {
                    event_index: ctx.event_index,
                    position,
                    cycle: access.cycle,
                    block,
                    pc: access.pc,
                    core_id: access.core_id,
                    miss_type: MissType::DemandMiss,
                    stride_id,
                    set_index,
                    is_insertion: true,
                    insertion_id: Some(id),
                    way,
                    evicted_block: evicted,
                });
                false
            }
        };

        let Some(pf) = prefetcher.as_deref_mut() else {
            continue;
        };
        if hit && options.prefetch_trigger == PrefetchTrigger::MissesOnly {
            continue;
        }
        let mut candidates = pf.observe(access, block, hit);
        candidates.truncate(config.prefetch_degree);
        let mut issued_now: Vec<u64> = Vec::with_capacity(candidates.len());
        for target in candidates {
            let target_set = config.set_of(target);
            if issued_now.contains(&target) || cache.lookup(target_set, target).is_some() {
                continue;
            }
            issued_now.push(target);
            let pctx = AccessContext {
                position,
                event_index: result.events.len(),
                access,
                block: target,
                set_index: target_set,
                stride_id,
                is_prefetch: true,
            };
            clock += 1;
            let (way, evicted) = fill(&mut cache, policy, &pctx, config)?;
            let id = next_insertion;
            next_insertion += 1;
            *cache.line_mut(target_set, way) = CacheLineState {
                block: target,
                valid: true,
                last_touch: clock,
                inserted_by_prefetch: true,
                demand_hits: 0,
                insertion_id: id,
            };
            result.prefetch_issued += 1;
            policy.on_insert(&pctx, way);
            result.events.push(CacheEvent {
                event_index: pctx.event_index,
                position,
                cycle: access.cycle,
                block: target,
                pc: access.pc,
                core_id: access.core_id,
                miss_type: MissType::PrefetchFill,
                stride_id,
                set_index: target_set,
                is_insertion: true,
                insertion_id: Some(id),
                way,
                evicted_block: evicted,
            });
        }
    }
    result.final_lines = cache.lines;
    Ok(result)
}

/// Finds a way for a new line: the lowest invalid way, else the policy's victim.
fn fill(
    cache: &mut Cache,
    policy: &mut dyn ReplacementPolicy,
    ctx: &AccessContext<'_>,
    config: &CacheConfig,
) -> Result<(usize, Option<u64>), SimError> {
    let lines = cache.set(ctx.set_index);
    if let Some(way) = lines.iter().position(|l| !l.valid) {
        return Ok((way, None));
    }
    let way = policy.choose_victim(ctx, lines);
    if way >= config.associativity {
        return Err(SimError::BadVictim {
            event_index: ctx.event_index,
            way,
            associativity: config.associativity,
        });
    }
    Ok((way, Some(lines[way].block)))
}

/// Fraction of issued prefetches that saw at least one demand hit.
pub fn useful_prefetch_ratio(result: &SimResult) -> f64 {
    if result.prefetch_issued == 0 {
        0.0
    } else {
        result.prefetch_useful as f64 / result.prefetch_issued as f64
    }
}

pub fn write_events_csv<W: Write>(events: &[CacheEvent], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{EVENT_CSV_HEADER}")?;
    for e in events {
        let id = e.insertion_id.map(|i| i.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{:#x},{:#x},{},{},{},{},{},{}",
            e.event_index,
            e.cycle,
            e.block,
            e.pc,
            e.core_id,
            e.miss_type,
            e.stride_id,
            e.set_index,
            u8::from(e.is_insertion),
            id
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_set(assoc: usize) -> CacheConfig {
        CacheConfig::new(1, assoc, BlockGeometry::default(), 0).unwrap()
    }

    fn run(blocks: &[u64], cfg: &CacheConfig) -> SimResult {
        let t = Trace::from_blocks(blocks, &cfg.geometry);
        simulate(&t, cfg, &mut Lru, None, &SimOptions::default()).unwrap()
    }

    /// Step-by-step LRU replay over a recency list, independent of `simulate`.
    fn lru_replay_hits(blocks: &[u64], cfg: &CacheConfig) -> u64 {
        let mut sets: Vec<Vec<u64>> = vec![Vec::new(); cfg.num_sets];
        let mut hits = 0;
        for &b in blocks {
            let s = &mut sets[cfg.set_of(b)];
            if let Some(i) = s.iter().position(|&x| x == b) {
                s.remove(i);
                hits += 1;
            } else if s.len() == cfg.associativity {
                s.remove(0);
            }
            s.push(b);
        }
        hits
    }

    #[test]
    fn cold_miss_then_hit() {
        let r = run(&[5, 5], &one_set(1));
        assert_eq!((r.demand_hits, r.demand_misses), (1, 1));
    }

    #[test]
    fn two_way_lru_sequence() {
        let cfg = one_set(2);
        let (a, b, c) = (1, 2, 3);
        let blocks = [a, b, a, c, b];
        let r = run(&blocks, &cfg);
        assert_eq!(lru_replay_hits(&blocks, &cfg), 1);
        assert_eq!((r.demand_hits, r.demand_misses), (1, 4));
        assert_eq!(r.events[2].miss_type, MissType::Hit);
        assert_eq!(r.events[3].evicted_block, Some(b));
    }

    #[test]
    fn lru_victim_rule() {
        let lines = |touches: &[u64]| -> Vec<CacheLineState> {
            touches
                .iter()
                .map(|&t| CacheLineState { valid: true, last_touch: t, ..Default::default() })
                .collect()
        };
        assert_eq!(lru_choose_victim(&lines(&[5, 2, 9, 1])), 3);
        assert_eq!(lru_choose_victim(&lines(&[4, 4])), 0);
        assert_eq!(lru_choose_victim(&lines(&[7])), 0);
    }

    #[test]
    fn stride_prefetcher_rules() {
        let mut h = StrideHistory::new();
        assert!(stride_prefetcher_observe(&mut h, 1, 10, 1).is_empty());
        assert!(stride_prefetcher_observe(&mut h, 1, 12, 1).is_empty());
        assert_eq!(stride_prefetcher_observe(&mut h, 1, 14, 1), vec![16]);

        let mut h = StrideHistory::new();
        stride_prefetcher_observe(&mut h, 1, 10, 1);
        stride_prefetcher_observe(&mut h, 1, 12, 1);
        assert!(stride_prefetcher_observe(&mut h, 1, 15, 1).is_empty());

        let mut h = StrideHistory::new();
        stride_prefetcher_observe(&mut h, 1, 10, 3);
        stride_prefetcher_observe(&mut h, 1, 7, 3);
        assert_eq!(stride_prefetcher_observe(&mut h, 1, 4, 3), vec![1]);
    }

    #[test]
    fn next_line_single_trigger() {
        let cfg = CacheConfig::new(16, 4, BlockGeometry::default(), 1).unwrap();
        let t = Trace::from_blocks(&[100], &cfg.geometry);
        let mut pf = NextLinePrefetcher { degree: 1 };
        let r = simulate(&t, &cfg, &mut Lru, Some(&mut pf), &SimOptions::default()).unwrap();
        assert_eq!(r.prefetch_issued, 1);
        assert_eq!(r.demand_misses, 1);
        assert_eq!(r.events[1].block, 101);
        assert_eq!(r.events[1].miss_type, MissType::PrefetchFill);
        assert_eq!(r.events[1].pc, t.accesses[0].pc);
        assert!(r.events[1].is_insertion);
    }

    #[test]
    fn useful_ratio_basic() {
        let mut r = run(&[], &one_set(1));
        assert_eq!(useful_prefetch_ratio(&r), 0.0);
        r.prefetch_issued = 4;
        r.prefetch_useful = 1;
        assert_eq!(useful_prefetch_ratio(&r), 0.25);
    }

    /// Replays next-line prefetching into an unbounded cache with a plain set.
    #[test]
    fn loop_next_line_useful_ratio_matches_replay() {
        let blocks = [0u64, 1, 2, 3].repeat(4);
        let (mut resident, mut issued, mut useful) =
            (std::collections::HashSet::new(), 0u64, 0u64);
        let mut prefetched_unused = std::collections::HashSet::new();
        for &b in &blocks {
            if !resident.insert(b) && prefetched_unused.remove(&b) {
                useful += 1;
            }
            if resident.insert(b + 1) {
                issued += 1;
                prefetched_unused.insert(b + 1);
            }
        }
        let cfg = CacheConfig::new(64, 16, BlockGeometry::default(), 1).unwrap();
        let t = Trace::from_blocks(&blocks, &cfg.geometry);
        let mut pf = NextLinePrefetcher { degree: 1 };
        let r = simulate(&t, &cfg, &mut Lru, Some(&mut pf), &SimOptions::default()).unwrap();
        assert_eq!((r.prefetch_issued, r.prefetch_useful), (issued, useful));
        assert_eq!(useful_prefetch_ratio(&r), 0.75);
    }

    #[test]
    fn misses_only_trigger() {
        let cfg = CacheConfig::new(64, 16, BlockGeometry::default(), 1).unwrap();
        let t = Trace::from_blocks(&[0, 0, 0], &cfg.geometry);
        let opts = SimOptions { prefetch_trigger: PrefetchTrigger::MissesOnly };
        let mut pf = NextLinePrefetcher { degree: 1 };
        let r = simulate(&t, &cfg, &mut Lru, Some(&mut pf), &opts).unwrap();
        assert_eq!(r.prefetch_issued, 1);
    }

    struct Broken;
    impl ReplacementPolicy for Broken {
        fn choose_victim(&mut self, _: &AccessContext<'_>, lines: &[CacheLineState]) -> usize {
            lines.len()
        }
    }

    #[test]
    fn out_of_range_victim_is_fault() {
        let cfg = one_set(1);
        let t = Trace::from_blocks(&[1, 2], &cfg.geometry);
        match simulate(&t, &cfg, &mut Broken, None, &SimOptions::default()) {
            Err(SimError::BadVictim { event_index, way, .. }) => assert_eq!((event_index, way), (1, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let g = BlockGeometry::default();
        assert!(CacheConfig::new(0, 1, g, 0).is_err());
        assert!(CacheConfig::new(6, 1, g, 0).is_err());
        assert!(CacheConfig::new(8, 0, g, 0).is_err());
    }

    #[test]
    fn event_csv_layout() {
        let r = run(&[1, 1], &one_set(1));
        let mut buf = Vec::new();
        write_events_csv(&r.events, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], EVENT_CSV_HEADER);
        assert_eq!(lines[1], "0,0,0x1,0x400000,0,demand_miss,0,0,1,0");
        assert_eq!(lines[2], "1,1,0x1,0x400000,0,hit,0,0,0,");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn small_case() -> impl Strategy<Value = (Vec<u64>, usize, usize)> {
            (
                prop::collection::vec(0u64..24, 0..80),
                prop::sample::select(vec![1usize, 2, 4]),
                1usize..4,
            )
        }

        proptest! {
            #[test]
            fn lru_matches_recency_replay((blocks, sets, ways) in small_case()) {
                let cfg = CacheConfig::new(sets, ways, BlockGeometry::default(), 0).unwrap();
                let r = run(&blocks, &cfg);
                prop_assert_eq!(r.demand_hits, lru_replay_hits(&blocks, &cfg));
                prop_assert_eq!(r.demand_hits + r.demand_misses, blocks.len() as u64);
            }

            #[test]
            fn events_reconstruct_final_contents(
                (blocks, sets, ways) in small_case(),
                degree in 0usize..3,
            ) {
                let cfg = CacheConfig::new(sets, ways, BlockGeometry::default(), degree).unwrap();
                let t = Trace::from_blocks(&blocks, &cfg.geometry);
                let mut pf = NextLinePrefetcher { degree: 2 };
                let r = simulate(&t, &cfg, &mut Lru, Some(&mut pf), &SimOptions::default()).unwrap();
                let mut replay: Vec<Option<u64>> = vec![None; sets * ways];
                for e in &r.events {
                    let slot = &mut replay[e.set_index * ways + e.way];
                    if e.is_insertion {
                        prop_assert_eq!(*slot, e.evicted_block);
                        *slot = Some(e.block);
                    } else {
                        prop_assert_eq!(*slot, Some(e.block));
                    }
                }
                let actual: Vec<Option<u64>> = r.final_lines.iter()
                    .map(|l| l.valid.then_some(l.block)).collect();
                prop_assert_eq!(replay, actual);
                prop_assert!(r.prefetch_useful <= r.prefetch_issued);
                prop_assert_eq!(r.demand_events().count(), blocks.len());
                for e in &r.events {
                    let expect = matches!(e.miss_type, MissType::DemandMiss | MissType::PrefetchFill);
                    prop_assert_eq!(e.is_insertion, expect);
                    prop_assert_eq!(e.insertion_id.is_some(), e.is_insertion);
                }
            }

            #[test]
            fn prefetch_degree_irrelevant_without_prefetcher(
                (blocks, sets, ways) in small_case(),
                degree in 0usize..8,
            ) {
                let a = CacheConfig::new(sets, ways, BlockGeometry::default(), 0).unwrap();
                let b = CacheConfig { prefetch_degree: degree, ..a };
                prop_assert_eq!(run(&blocks, &a), run(&blocks, &b));
            }
        }
    }
}
