//! On-demand KV cache allocation.
//!
//! Each inference request owns a block table mapping its logical blocks to
//! physical blocks ([`Pbn`]) that live as `KvBlock` regions in the GPU's
//! reuse pool. Blocks are allocated only when a request's sequence crosses a
//! block boundary. Released blocks go to a LIFO free list and are handed out
//! again before the pool is asked for more; when the pool is short, the pool
//! itself evicts inactive tensors (urgent reclaim).

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::model::{ModelStatsTable, TensorId};
use crate::pool::{Pbn, PoolError, ReusePool};
use crate::Bytes;

pub const ALLOWED_BLOCK_SIZES: [u32; 3] = [8, 16, 32];
pub const DEFAULT_BLOCK_SIZE: u32 = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KvError {
    #[error("block size {0} tokens is not one of 8, 16, 32")]
    BadBlockSize(u32),
    #[error("bytes per token must be positive")]
    ZeroTokenBytes,
    #[error(transparent)]
    Pool(#[from] PoolError),
}

/// Logical-to-physical block mapping of one request.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KvBlockTable {
    pub blocks: Vec<Pbn>,
    /// Tokens the table has been sized for.
    pub tokens: u64,
}

/// What one allocation call did.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvStep {
    pub from_free_list: u64,
    pub from_pool: u64,
    /// Number of calls made into the pool (0 or 1).
    pub pool_calls: u64,
    pub reclaimed: Vec<TensorId>,
    /// `(request, blocks from the free list, blocks from the pool)`.
    pub per_request: Vec<(u64, u64, u64)>,
}

impl KvStep {
    pub fn blocks(&self) -> u64 {
        self.from_free_list + self.from_pool
    }
}

/// KV engine of one model instance.
#[derive(Clone, Debug, PartialEq)]
pub struct KvEngine {
    block_size_tokens: u32,
    bytes_per_token: Bytes,
    tables: BTreeMap<u64, KvBlockTable>,
    addresses: BTreeMap<Pbn, Bytes>,
    free_list: Vec<Pbn>,
    next_pbn: u64,
    pool_calls: u64,
}

impl KvEngine {
    pub fn new(block_size_tokens: u32, bytes_per_token: Bytes) -> Result<Self, KvError> {
        if !ALLOWED_BLOCK_SIZES.contains(&block_size_tokens) {
            return Err(KvError::BadBlockSize(block_size_tokens));
        }
        if bytes_per_token == 0 {
            return Err(KvError::ZeroTokenBytes);
        }
        Ok(KvEngine {
            block_size_tokens,
            bytes_per_token,
            tables: BTreeMap::new(),
            addresses: BTreeMap::new(),
            free_list: Vec::new(),
            next_pbn: 0,
            pool_calls: 0,
        })
    }

    pub fn block_size_tokens(&self) -> u32 {
        self.block_size_tokens
    }

    pub fn block_bytes(&self) -> Bytes {
        self.block_size_tokens as Bytes * self.bytes_per_token
    }

    pub fn blocks_for(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.block_size_tokens as u64)
    }

    pub fn table(&self, request_id: u64) -> Option<&KvBlockTable> {
        self.tables.get(&request_id)
    }

    /// Blocks held by the engine, in tables or on the free list.
    pub fn allocated_blocks(&self) -> usize {
        self.addresses.len()
    }

    pub fn free_list_len(&self) -> usize {
        self.free_list.len()
    }

    pub fn kv_bytes(&self) -> Bytes {
        self.addresses.len() as Bytes * self.block_bytes()
    }

    pub fn pool_calls(&self) -> u64 {
        self.pool_calls
    }

    /// Pool offset of the block holding `token` of a request.
    pub fn translate(&self, request_id: u64, token: u64) -> Option<Bytes> {
        let table = self.tables.get(&request_id)?;
        let block = table
            .blocks
            .get((token / self.block_size_tokens as u64) as usize)?;
        let within = token % self.block_size_tokens as u64;
        Some(self.addresses[block] + within * self.bytes_per_token)
    }

    /// Grows one request's table to hold `tokens`.
    pub fn ensure_capacity(
        &mut self,
        pool: &mut ReusePool,
        stats: &ModelStatsTable,
        request_id: u64,
        tokens: u64,
    ) -> Result<KvStep, KvError> {
        self.batch_allocate(pool, stats, &[(request_id, tokens)])
    }

    /// Grows several tables at once: free-list blocks are handed out in
    /// request order and the rest comes from a single pool call. Either every
    /// table grows or nothing changes.
    pub fn batch_allocate(
        &mut self,
        pool: &mut ReusePool,
        stats: &ModelStatsTable,
        requests: &[(u64, u64)],
    ) -> Result<KvStep, KvError> {
        let mut wanted: Vec<(u64, u64, u64)> = Vec::new();
        for &(id, tokens) in requests {
            let have = self.tables.get(&id).map_or(0, |t| t.blocks.len() as u64);
            let already: u64 = wanted.iter().filter(|w| w.0 == id).map(|w| w.1).sum();
            let need = self.blocks_for(tokens).saturating_sub(have + already);
            wanted.push((id, need, tokens));
        }
        let total: u64 = wanted.iter().map(|w| w.1).sum();
        let from_free = total.min(self.free_list.len() as u64);
        let fresh: Vec<Pbn> = (0..total - from_free)
            .map(|i| Pbn(self.next_pbn + i))
            .collect();

        let mut step = KvStep {
            from_free_list: from_free,
            from_pool: fresh.len() as u64,
            ..KvStep::default()
        };
        if !fresh.is_empty() {
            let grant = pool.allocate_kv_blocks(&fresh, self.block_bytes(), stats)?;
            self.pool_calls += 1;
            step.pool_calls = 1;
            step.reclaimed = grant.reclaimed;
            for (pbn, offset) in fresh.iter().zip(grant.offsets) {
                self.addresses.insert(*pbn, offset);
            }
            self.next_pbn += fresh.len() as u64;
        }

        let mut recycled = self
            .free_list
            .split_off(self.free_list.len() - from_free as usize);
        recycled.reverse();
        let mut supply = recycled.into_iter().chain(fresh);
        let mut recycled_left = from_free;
        for (id, need, tokens) in wanted {
            let table = self.tables.entry(id).or_default();
            table.blocks.extend(supply.by_ref().take(need as usize));
            table.tokens = table.tokens.max(tokens);
            let reused = need.min(recycled_left);
            recycled_left -= reused;
            step.per_request.push((id, reused, need - reused));
        }
        Ok(step)
    }

    /// Allocates `blocks` straight onto the free list, for eager reservation
    /// at instance start.
    pub fn reserve(
        &mut self,
        pool: &mut ReusePool,
        stats: &ModelStatsTable,
        blocks: u64,
    ) -> Result<KvStep, KvError> {
        let fresh: Vec<Pbn> = (0..blocks).map(|i| Pbn(self.next_pbn + i)).collect();
        if fresh.is_empty() {
            return Ok(KvStep::default());
        }
        let grant = pool.allocate_kv_blocks(&fresh, self.block_bytes(), stats)?;
        self.pool_calls += 1;
        self.next_pbn += blocks;
        for (pbn, offset) in fresh.iter().zip(grant.offsets) {
            self.addresses.insert(*pbn, offset);
        }
        self.free_list.extend(fresh.iter().rev());
        Ok(KvStep {
            from_pool: blocks,
            pool_calls: 1,
            reclaimed: grant.reclaimed,
            ..KvStep::default()
        })
    }

    /// Returns a finished request's blocks to the free list.
    pub fn release_request(&mut self, request_id: u64) -> usize {
        let Some(table) = self.tables.remove(&request_id) else {
            return 0;
        };
        let n = table.blocks.len();
        self.free_list.extend(table.blocks.into_iter().rev());
        n
    }

    /// Frees every block back to the pool; the engine is empty afterwards.
    pub fn teardown(&mut self, pool: &mut ReusePool) -> Result<usize, KvError> {
        let n = self.addresses.len();
        for offset in self.addresses.values() {
            pool.free_kv_block(*offset)?;
        }
        self.addresses.clear();
        self.tables.clear();
        self.free_list.clear();
        Ok(n)
    }

    /// Every block is in exactly one table or on the free list.
    pub fn check_invariants(&self) -> Result<(), alloc::string::String> {
        let mut seen = alloc::collections::BTreeSet::new();
        for pbn in self
            .tables
            .values()
            .flat_map(|t| &t.blocks)
            .chain(&self.free_list)
        {
            if !self.addresses.contains_key(pbn) {
                return Err(alloc::format!("{pbn:?} has no address"));
            }
            if !seen.insert(*pbn) {
                return Err(alloc::format!("{pbn:?} held twice"));
            }
        }
        if seen.len() != self.addresses.len() {
            return Err(alloc::format!(
                "{} addressed blocks, {} held",
                self.addresses.len(),
                seen.len()
            ));
        }
        for t in self.tables.values() {
            if (t.blocks.len() as u64) < self.blocks_for(t.tokens) {
                return Err(alloc::format!(
                    "table for {} tokens has {} blocks",
                    t.tokens,
                    t.blocks.len()
                ));
            }
        }
        Ok(())
    }
}
