use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Packet<P> {
    pub flow_id: u32,
    pub sequence_id: u64,
    pub payload: P,
}

/// Streaming reorder buffer: releases packet `i` as soon as every packet
/// before it has arrived.
#[derive(Debug, Clone)]
pub struct Reorderer<P> {
    next: u64,
    pending: BTreeMap<u64, Packet<P>>,
    max_buffered: usize,
}

impl<P> Reorderer<P> {
    pub fn new(first_sequence_id: u64) -> Self {
        Reorderer {
            next: first_sequence_id,
            pending: BTreeMap::new(),
            max_buffered: 0,
        }
    }

    /// Accepts one packet and returns the packets that became releasable.
    pub fn push(&mut self, p: Packet<P>) -> Result<Vec<Packet<P>>> {
        let id = p.sequence_id;
        if id < self.next || self.pending.contains_key(&id) {
            return Err(Error::Protocol(format!("duplicate sequence id {id}")));
        }
        self.pending.insert(id, p);
        self.max_buffered = self.max_buffered.max(self.pending.len());
        let mut out = Vec::new();
        while let Some(p) = self.pending.remove(&self.next) {
            out.push(p);
            self.next += 1;
        }
        Ok(out)
    }

    /// Ends the stream; any held packet means a sequence id never arrived.
    pub fn finish(self) -> Result<usize> {
        if let Some((&id, _)) = self.pending.iter().next() {
            return Err(Error::Protocol(format!(
                "missing sequence id {} before {id}",
                self.next
            )));
        }
        Ok(self.max_buffered)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReorderOutput<P> {
    pub packets: Vec<Packet<P>>,
    /// Most packets held at once, counting the one just received.
    pub max_buffered: usize,
}

/// Restores sequence order of one stream whose ids form a contiguous range.
pub fn reorder_stream<P>(packets: impl IntoIterator<Item = Packet<P>>) -> Result<ReorderOutput<P>> {
    let packets: Vec<Packet<P>> = packets.into_iter().collect();
    let first = packets.iter().map(|p| p.sequence_id).min().unwrap_or(0);
    let mut r = Reorderer::new(first);
    let mut out = Vec::with_capacity(packets.len());
    for p in packets {
        out.extend(r.push(p)?);
    }
    let max_buffered = r.finish()?;
    Ok(ReorderOutput {
        packets: out,
        max_buffered,
    })
}

/// Diagonally striped bank mapping of element `(row, col)` in a tensor with
/// `cols` columns: `bank = (row + col) mod banks`,
/// `offset = row * ceil(cols / banks) + col / banks`.
pub fn diagonal_bank_address(row: u64, col: u64, cols: u64, banks: u64) -> (u64, u64) {
    assert!(banks >= 1, "at least one bank");
    ((row + col) % banks, row * cols.div_ceil(banks) + col / banks)
}

/// Checks that half-open ranges are pairwise disjoint and cover `[0, space)`.
pub fn check_ranges(ranges: &[(u64, u64)], space: u64) -> Result<()> {
    let mut sorted: Vec<(u64, u64, usize)> = ranges.iter().enumerate().map(|(i, &(lo, hi))| (lo, hi, i)).collect();
    sorted.sort_unstable();
    let mut cursor = 0;
    for (lo, hi, i) in sorted {
        if lo > hi {
            return Err(Error::Config(format!("range {i} is reversed: [{lo}, {hi})")));
        }
        if lo < cursor {
            return Err(Error::Config(format!("range {i} overlaps at address {lo}")));
        }
        if lo > cursor {
            return Err(Error::Config(format!("addresses [{cursor}, {lo}) are uncovered")));
        }
        cursor = hi;
    }
    if cursor < space {
        return Err(Error::Config(format!("addresses [{cursor}, {space}) are uncovered")));
    }
    Ok(())
}

/// The unit whose range accepts `address`; every other unit drops it.
pub fn predicate_partition(address: u64, ranges: &[(u64, u64)]) -> Result<u32> {
    let mut owner = None;
    for (i, &(lo, hi)) in ranges.iter().enumerate() {
        if lo <= address && address < hi {
            if let Some(prev) = owner {
                return Err(Error::Config(format!(
                    "address {address} accepted by units {prev} and {i}"
                )));
            }
            owner = Some(i as u32);
        }
    }
    owner.ok_or_else(|| Error::Config(format!("address {address} is not covered")))
}
