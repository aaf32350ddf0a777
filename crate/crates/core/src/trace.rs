//! Trace data model, CSV trace files, block/page arithmetic and synthetic
//! workload generators.

use std::fmt;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const TRACE_HEADER: &str = "cycle,core,pc,addr,kind";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{message} at line {line}, column {column}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("cycle count decreases at line {line}")]
    NonMonotonic { line: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Load,
    Store,
}

impl AccessKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AccessKind::Load => "load",
            AccessKind::Store => "store",
        }
    }
}

/// One demand access from a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemoryAccess {
    pub cycle: u64,
    pub core_id: u16,
    pub pc: u64,
    pub address: u64,
    pub kind: AccessKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub accesses: Vec<MemoryAccess>,
    pub source_name: String,
}

impl Trace {
    pub fn new(source_name: impl Into<String>, accesses: Vec<MemoryAccess>) -> Self {
        Self {
            accesses,
            source_name: source_name.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.accesses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accesses.is_empty()
    }

    /// Block numbers of every access, in trace order.
    pub fn blocks(&self, geometry: &BlockGeometry) -> Vec<u64> {
        self.accesses
            .iter()
            .map(|a| block_of(a.address, geometry))
            .collect()
    }

    /// Builds a trace from bare block numbers (one PC, one cycle per access).
    /// Mostly useful for tests and hand-constructed examples.
    pub fn from_blocks(blocks: &[u64], geometry: &BlockGeometry) -> Self {
        let accesses = blocks
            .iter()
            .enumerate()
            .map(|(i, &b)| MemoryAccess {
                cycle: i as u64,
                core_id: 0,
                pc: 0x400000,
                address: b * geometry.block_size_bytes,
                kind: AccessKind::Load,
            })
            .collect();
        Self::new("blocks", accesses)
    }
}

/// Block and page sizes, both powers of two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockGeometry {
    pub block_size_bytes: u64,
    pub page_size_bytes: u64,
}

impl Default for BlockGeometry {
    fn default() -> Self {
        Self {
            block_size_bytes: 64,
            page_size_bytes: 4096,
        }
    }
}

impl BlockGeometry {
    pub fn new(block_size_bytes: u64, page_size_bytes: u64) -> Result<Self, TraceError> {
        if !block_size_bytes.is_power_of_two() || !page_size_bytes.is_power_of_two() {
            return Err(TraceError::Config(format!(
                "block size {block_size_bytes} and page size {page_size_bytes} must be powers of two"
            )));
        }
        if page_size_bytes < block_size_bytes {
            return Err(TraceError::Config(format!(
                "page size {page_size_bytes} is smaller than block size {block_size_bytes}"
            )));
        }
        Ok(Self {
            block_size_bytes,
            page_size_bytes,
        })
    }

    pub fn blocks_per_page(&self) -> u64 {
        self.page_size_bytes / self.block_size_bytes
    }
}

pub fn block_of(address: u64, geometry: &BlockGeometry) -> u64 {
    address / geometry.block_size_bytes
}

/// Splits a block number into (page, offset-in-blocks).
pub fn page_and_offset(block: u64, geometry: &BlockGeometry) -> (u64, u64) {
    let per_page = geometry.blocks_per_page();
    (block / per_page, block % per_page)
}

// ---------------------------------------------------------------------------
// CSV trace files

fn parse_u64(field: &str) -> Option<u64> {
    let field = field.trim();
    if let Some(hex) = field
        .strip_prefix("0x")
        .or_else(|| field.strip_prefix("0X"))
    {
        u64::from_str_radix(hex, 16).ok()
    } else {
        field.parse().ok()
    }
}

/// Parses a CSV trace with header `cycle,core,pc,addr,kind`.
///
/// Line numbers in errors are 1-based and count the header as line 1.
pub fn parse_trace<R: BufRead>(
    input: R,
    source_name: &str,
    _geometry: &BlockGeometry,
) -> Result<Trace, TraceError> {
    let mut lines = input.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => {
            return Err(TraceError::Parse {
                line: 1,
                column: 1,
                message: "missing header".into(),
            })
        }
    };
    let header = header.trim_end_matches('\r');
    if header.trim() != TRACE_HEADER {
        return Err(TraceError::Parse {
            line: 1,
            column: 1,
            message: format!("expected header `{TRACE_HEADER}`"),
        });
    }

    let mut accesses = Vec::new();
    let mut last_cycle = 0u64;
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(TraceError::Parse {
                line: line_no,
                column: fields.len().min(5) + 1,
                message: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let bad = |column: usize, what: &str| TraceError::Parse {
            line: line_no,
            column,
            message: format!("invalid {what} `{}`", fields[column - 1].trim()),
        };
        let cycle = parse_u64(fields[0]).ok_or_else(|| bad(1, "cycle"))?;
        let core_id = fields[1]
            .trim()
            .parse::<u16>()
            .map_err(|_| bad(2, "core"))?;
        let pc = parse_u64(fields[2]).ok_or_else(|| bad(3, "pc"))?;
        let address = parse_u64(fields[3]).ok_or_else(|| bad(4, "addr"))?;
        let kind = match fields[4].trim().to_ascii_lowercase().as_str() {
            "load" => AccessKind::Load,
            "store" => AccessKind::Store,
            _ => {
                return Err(TraceError::Parse {
                    line: line_no,
                    column: 5,
                    message: "unknown kind".into(),
                })
            }
        };
        if !accesses.is_empty() && cycle < last_cycle {
            return Err(TraceError::NonMonotonic { line: line_no });
        }
        last_cycle = cycle;
        accesses.push(MemoryAccess {
            cycle,
            core_id,
            pc,
            address,
            kind,
        });
    }
    Ok(Trace::new(source_name, accesses))
}

pub fn write_trace<W: Write>(trace: &Trace, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for a in &trace.accesses {
        writeln!(
            out,
            "{},{},{:#x},{:#x},{}",
            a.cycle,
            a.core_id,
            a.pc,
            a.address,
            a.kind.as_str()
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic workloads

/// Pages used by the looping phases of [`Workload::Coupled`].
pub const COUPLED_LOOP_PAGES: usize = 4;
/// Blocks per loop region in [`Workload::Coupled`].
pub const COUPLED_REGION_BLOCKS: u64 = 8;
/// Consecutive passes over one loop region before moving to the next.
pub const COUPLED_REGION_PASSES: usize = 2;

const LOOP_PC: u64 = 0x401000;
const STREAM_PC: u64 = 0x402000;
const STRIDE_PC: u64 = 0x403000;
const COUPLED_PC: u64 = 0x404000;
const STREAM_BASE_BLOCK: u64 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WorkloadKind {
    Loop,
    Stream,
    Stride,
    Mixed,
    Coupled,
}

impl WorkloadKind {
    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::Loop => "loop",
            WorkloadKind::Stream => "stream",
            WorkloadKind::Stride => "stride",
            WorkloadKind::Mixed => "mixed",
            WorkloadKind::Coupled => "coupled",
        }
    }
}

/// Generator parameters, one variant per workload kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Workload {
    /// Cycles over blocks `0..working_set`.
    Loop { working_set: u64, length: usize },
    /// Touches `length` distinct blocks once each.
    Stream { length: usize },
    /// Constant block stride from a single PC.
    Stride { stride: i64, length: usize },
    /// A looping PC and a streaming PC interleaved at random.
    Mixed {
        working_set: u64,
        length: usize,
        stream_fraction: f64,
    },
    /// A single PC alternating looping and streaming phases. Loop phases walk
    /// a small pool of recurring pages; stream phases walk fresh pages with
    /// the same in-page offset pattern, so only the page stream tells the
    /// phases apart.
    Coupled { phases: usize, phase_len: usize },
}

impl Workload {
    pub fn kind(&self) -> WorkloadKind {
        match self {
            Workload::Loop { .. } => WorkloadKind::Loop,
            Workload::Stream { .. } => WorkloadKind::Stream,
            Workload::Stride { .. } => WorkloadKind::Stride,
            Workload::Mixed { .. } => WorkloadKind::Mixed,
            Workload::Coupled { .. } => WorkloadKind::Coupled,
        }
    }

    fn validate(&self, geometry: &BlockGeometry) -> Result<(), TraceError> {
        let err = |m: String| Err(TraceError::Config(m));
        match *self {
            Workload::Loop {
                working_set,
                length,
            } => {
                if working_set == 0 {
                    return err("loop working set must be at least 1".into());
                }
                if (length as u64) < working_set {
                    return err(format!(
                        "loop length {length} is shorter than working set {working_set}"
                    ));
                }
            }
            Workload::Stream { .. } => {}
            Workload::Stride { stride, .. } => {
                if stride == 0 {
                    return err("stride must be non-zero".into());
                }
            }
            Workload::Mixed {
                working_set,
                stream_fraction,
                ..
            } => {
                if working_set == 0 {
                    return err("mixed working set must be at least 1".into());
                }
                if !(0.0..=1.0).contains(&stream_fraction) {
                    return err(format!("stream fraction {stream_fraction} outside [0, 1]"));
                }
            }
            Workload::Coupled { phases, phase_len } => {
                if phases == 0 {
                    return err("coupled workload needs at least one phase".into());
                }
                let min_len = COUPLED_REGION_BLOCKS as usize * COUPLED_REGION_PASSES;
                if phase_len < min_len {
                    return err(format!(
                        "coupled phase length {phase_len} is below {min_len}"
                    ));
                }
                if geometry.blocks_per_page() < COUPLED_REGION_BLOCKS {
                    return err("coupled workload needs at least 8 blocks per page".into());
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Workload::Loop {
                working_set,
                length,
            } => write!(f, "loop(working_set={working_set},length={length})"),
            Workload::Stream { length } => write!(f, "stream(length={length})"),
            Workload::Stride { stride, length } => {
                write!(f, "stride(stride={stride},length={length})")
            }
            Workload::Mixed {
                working_set,
                length,
                stream_fraction,
            } => write!(
                f,
                "mixed(working_set={working_set},length={length},stream_fraction={stream_fraction})"
            ),
            Workload::Coupled { phases, phase_len } => {
                write!(f, "coupled(phases={phases},phase_len={phase_len})")
            }
        }
    }
}

struct Emitter {
    rng: ChaCha8Rng,
    cycle: u64,
    block_size: u64,
    out: Vec<MemoryAccess>,
}

impl Emitter {
    fn push(&mut self, pc: u64, block: u64, kind: AccessKind) {
        self.cycle += self.rng.gen_range(1..=4u64);
        self.out.push(MemoryAccess {
            cycle: self.cycle,
            core_id: 0,
            pc,
            address: block * self.block_size,
            kind,
        });
    }
}

/// Generates a deterministic synthetic trace for `(workload, seed)`.
pub fn gen_synthetic(
    workload: &Workload,
    geometry: &BlockGeometry,
    seed: u64,
) -> Result<Trace, TraceError> {
    workload.validate(geometry)?;
    let mut em = Emitter {
        rng: ChaCha8Rng::seed_from_u64(seed),
        cycle: 0,
        block_size: geometry.block_size_bytes,
        out: Vec::new(),
    };
    match *workload {
        Workload::Loop {
            working_set,
            length,
        } => {
            for i in 0..length as u64 {
                em.push(LOOP_PC, i % working_set, AccessKind::Load);
            }
        }
        Workload::Stream { length } => {
            for i in 0..length as u64 {
                em.push(STREAM_PC, STREAM_BASE_BLOCK + i, AccessKind::Load);
            }
        }
        Workload::Stride { stride, length } => {
            let base = STREAM_BASE_BLOCK as i64;
            for i in 0..length as i64 {
                em.push(STRIDE_PC, (base + i * stride) as u64, AccessKind::Load);
            }
        }
        Workload::Mixed {
            working_set,
            length,
            stream_fraction,
        } => {
            let mut loop_pos = 0u64;
            let mut stream_pos = 0u64;
            for _ in 0..length {
                let kind = if em.rng.gen_bool(0.2) {
                    AccessKind::Store
                } else {
                    AccessKind::Load
                };
                if em.rng.gen_bool(stream_fraction) {
                    em.push(STREAM_PC, STREAM_BASE_BLOCK + stream_pos, kind);
                    stream_pos += 1;
                } else {
                    em.push(LOOP_PC, loop_pos % working_set, kind);
                    loop_pos += 1;
                }
            }
        }
        Workload::Coupled { phases, phase_len } => {
            gen_coupled(&mut em, geometry, phases, phase_len);
        }
    }
    Ok(Trace::new(
        format!("{}-s{seed}", workload.kind().name()),
        em.out,
    ))
}

fn gen_coupled(em: &mut Emitter, geometry: &BlockGeometry, phases: usize, phase_len: usize) {
    let per_page = geometry.blocks_per_page();
    // Pages are drawn from one range so page-to-page jumps look alike in
    // both phases; the loop pool is fixed for the whole trace.
    let page_range = 1u64 << 16..1u64 << 28;
    let mut used = std::collections::HashSet::new();
    let mut fresh_page = |rng: &mut ChaCha8Rng| loop {
        let p = rng.gen_range(page_range.clone());
        if used.insert(p) {
            return p;
        }
    };
    let loop_pages: Vec<u64> = (0..COUPLED_LOOP_PAGES)
        .map(|_| fresh_page(&mut em.rng))
        .collect();

    let region_len = (COUPLED_REGION_BLOCKS as usize) * COUPLED_REGION_PASSES;
    let mut next_region = 0usize;
    for phase in 0..phases {
        if phase % 2 == 0 {
            // Split the phase into whole regions; the last one absorbs the
            // remainder so every region is passed over at least twice.
            let regions = phase_len / region_len;
            let mut emitted = 0;
            for r in 0..regions {
                let page = loop_pages[next_region % loop_pages.len()];
                next_region += 1;
                let len = if r + 1 == regions {
                    phase_len - emitted
                } else {
                    region_len
                };
                for i in 0..len as u64 {
                    let offset = i % COUPLED_REGION_BLOCKS;
                    em.push(COUPLED_PC, page * per_page + offset, AccessKind::Load);
                }
                emitted += len;
            }
        } else {
            let mut page = fresh_page(&mut em.rng);
            for i in 0..phase_len as u64 {
                let offset = i % COUPLED_REGION_BLOCKS;
                if i > 0 && offset == 0 {
                    page = fresh_page(&mut em.rng);
                }
                em.push(COUPLED_PC, page * per_page + offset, AccessKind::Load);
            }
        }
    }
}
