//! Off-chip tensor store with a bandwidth/latency timing model, and the
//! reference-counted on-chip buffer pool.

use std::collections::{BTreeMap, HashMap};

use crate::stream::{DType, StreamValue, Tile};

use super::SimError;

/// A row-major 2-D tensor stored at a base address.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub rows: usize,
    pub cols: usize,
    pub dtype: DType,
    pub data: Vec<f32>,
}

/// Tensor store plus a token-bucket bandwidth model.
///
/// Time is tracked in byte-time units (`cycles * bw`) so queueing stays exact
/// in integers: a transfer of `n` bytes requested at cycle `t` starts at
/// `max(t * bw, busy)` and completes `latency` cycles after the bucket drains.
#[derive(Debug, Clone)]
pub struct OffChipMemory {
    regions: BTreeMap<u64, Region>,
    bw: u64,
    latency: u64,
    busy: u128,
    pub read_bytes: u64,
    pub write_bytes: u64,
    pub first_read: Option<u64>,
    pub last_write: Option<u64>,
    pub last_read_done: Option<u64>,
}

impl Default for OffChipMemory {
    fn default() -> Self {
        OffChipMemory::new()
    }
}

impl OffChipMemory {
    pub fn new() -> Self {
        OffChipMemory {
            regions: BTreeMap::new(),
            bw: 1,
            latency: 0,
            busy: 0,
            read_bytes: 0,
            write_bytes: 0,
            first_read: None,
            last_write: None,
            last_read_done: None,
        }
    }

    pub(crate) fn configure(&mut self, bw: u64, latency: u64) {
        self.bw = bw.max(1);
        self.latency = latency;
        self.busy = 0;
        self.read_bytes = 0;
        self.write_bytes = 0;
        self.first_read = None;
        self.last_write = None;
        self.last_read_done = None;
    }

    /// Stores a tensor at `base`, replacing any previous one.
    pub fn insert(&mut self, base: u64, rows: usize, cols: usize, dtype: DType, data: Vec<f32>) {
        assert_eq!(data.len(), rows * cols, "region element count");
        self.regions.insert(base, Region { rows, cols, dtype, data });
    }

    /// Reserves a zero-filled tensor at `base`.
    pub fn alloc(&mut self, base: u64, rows: usize, cols: usize, dtype: DType) {
        self.insert(base, rows, cols, dtype, vec![0.0; rows * cols]);
    }

    pub fn region(&self, base: u64) -> Option<&Region> {
        self.regions.get(&base)
    }

    fn locate(&self, base: u64, tile: [usize; 2], idx: i64) -> Result<(&Region, usize, usize), SimError> {
        let r = self
            .regions
            .get(&base)
            .ok_or_else(|| SimError::OutOfBounds(format!("no tensor stored at address {base:#x}")))?;
        if r.rows % tile[0] != 0 || r.cols % tile[1] != 0 {
            return Err(SimError::OutOfBounds(format!(
                "tensor at {base:#x} is {}x{}, not a multiple of tile {}x{}",
                r.rows, r.cols, tile[0], tile[1]
            )));
        }
        let gc = r.cols / tile[1];
        let n = (r.rows / tile[0]) * gc;
        if idx < 0 || idx as usize >= n {
            return Err(SimError::OutOfBounds(format!("tile {idx} outside {n} tiles at {base:#x}")));
        }
        let idx = idx as usize;
        Ok((r, (idx / gc) * tile[0], (idx % gc) * tile[1]))
    }

    /// Copies tile `idx` of the tensor at `base` without timing side effects.
    pub fn peek_tile(&self, base: u64, tile: [usize; 2], idx: i64) -> Result<Tile, SimError> {
        let (r, r0, c0) = self.locate(base, tile, idx)?;
        let mut data = Vec::with_capacity(tile[0] * tile[1]);
        for row in r0..r0 + tile[0] {
            data.extend_from_slice(&r.data[row * r.cols + c0..row * r.cols + c0 + tile[1]]);
        }
        Ok(Tile::new(tile[0], tile[1], r.dtype, data))
    }

    fn charge(&mut self, t: u64, bytes: u64) -> u64 {
        let bw = self.bw as u128;
        let start = (t as u128 * bw).max(self.busy);
        self.busy = start + bytes as u128;
        (self.busy.div_ceil(bw)) as u64 + self.latency
    }

    /// Timed read; returns the tile and its completion cycle.
    pub(crate) fn read(&mut self, t: u64, base: u64, tile: [usize; 2], idx: i64) -> Result<(Tile, u64), SimError> {
        let out = self.peek_tile(base, tile, idx)?;
        let bytes = out.bytes() as u64;
        let done = self.charge(t, bytes);
        self.read_bytes += bytes;
        self.first_read = Some(self.first_read.map_or(t, |f| f.min(t)));
        self.last_read_done = Some(self.last_read_done.map_or(done, |l| l.max(done)));
        Ok((out, done))
    }

    /// Timed write of `tile` into slot `idx`; returns the completion cycle.
    pub(crate) fn write(&mut self, t: u64, base: u64, idx: i64, tile: &Tile) -> Result<u64, SimError> {
        let (r0, c0, cols) = {
            let (r, r0, c0) = self.locate(base, [tile.rows, tile.cols], idx)?;
            (r0, c0, r.cols)
        };
        let region = self.regions.get_mut(&base).unwrap();
        for row in 0..tile.rows {
            let dst = (r0 + row) * cols + c0;
            region.data[dst..dst + tile.cols].copy_from_slice(tile.row(row));
        }
        let bytes = (tile.rows * tile.cols * region.dtype.size()) as u64;
        let done = self.charge(t, bytes);
        self.write_bytes += bytes;
        self.last_write = Some(self.last_write.map_or(done, |l| l.max(done)));
        Ok(done)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Buffer {
    pub dims: Vec<usize>,
    pub elems: Vec<StreamValue>,
    refs: usize,
    bytes: u64,
}

/// Live on-chip buffers with reference counts and a peak-bytes watermark.
#[derive(Debug, Default)]
pub(crate) struct OnChipPool {
    live: HashMap<u64, Buffer>,
    next: u64,
    pub live_bytes: u64,
    pub peak_bytes: u64,
    pub capacity: Option<u64>,
    pub freed: u64,
}

impl OnChipPool {
    pub fn new(capacity: Option<u64>) -> Self {
        OnChipPool { capacity, ..Default::default() }
    }

    pub fn alloc(&mut self, dims: Vec<usize>, elems: Vec<StreamValue>) -> Result<u64, SimError> {
        let bytes: u64 = elems.iter().map(|e| e.bytes() as u64).sum();
        if let Some(cap) = self.capacity {
            if self.live_bytes + bytes > cap {
                return Err(SimError::PoolExhausted { requested: bytes, live: self.live_bytes, capacity: cap });
            }
        }
        let id = self.next;
        self.next += 1;
        self.live.insert(id, Buffer { dims, elems, refs: 1, bytes });
        self.live_bytes += bytes;
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
        Ok(id)
    }

    pub fn get(&self, id: u64) -> Result<&Buffer, SimError> {
        self.live.get(&id).ok_or_else(|| SimError::runtime("pool", format!("buffer {id} is not live")))
    }

    pub fn retain(&mut self, id: u64, extra: usize) -> Result<(), SimError> {
        let b = self.live.get_mut(&id).ok_or_else(|| SimError::runtime("pool", format!("buffer {id} is not live")))?;
        b.refs += extra;
        Ok(())
    }

    pub fn release(&mut self, id: u64) -> Result<(), SimError> {
        let b = self.live.get_mut(&id).ok_or_else(|| SimError::runtime("pool", format!("double free of buffer {id}")))?;
        b.refs -= 1;
        if b.refs == 0 {
            self.live_bytes -= b.bytes;
            self.live.remove(&id);
            self.freed += 1;
        }
        Ok(())
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_then_load_round_trip() {
        let mut m = OffChipMemory::new();
        m.configure(64, 10);
        m.alloc(0, 16, 16, DType::Bf16);
        let t = Tile::new(16, 16, DType::Bf16, (0..256).map(|x| x as f32).collect());
        let w = m.write(0, 0, 0, &t).unwrap();
        let (back, r) = m.read(w, 0, [16, 16], 0).unwrap();
        assert_eq!(back, t);
        assert_eq!(w, 512 / 64 + 10);
        assert_eq!(r, w + 512 / 64 + 10);
        assert_eq!((m.read_bytes, m.write_bytes), (512, 512));
    }

    #[test]
    fn random_tile_order() {
        let mut m = OffChipMemory::new();
        m.insert(0x100, 3, 2, DType::F32, vec![0., 0., 1., 1., 2., 2.]);
        let got: Vec<f32> = [2, 0, 1].iter().map(|i| m.peek_tile(0x100, [1, 2], *i).unwrap().data[0]).collect();
        assert_eq!(got, vec![2.0, 0.0, 1.0]);
        assert!(m.peek_tile(0x100, [1, 2], 3).is_err());
    }

    #[test]
    fn bandwidth_bucket_queues() {
        let mut m = OffChipMemory::new();
        m.configure(100, 0);
        assert_eq!(m.charge(0, 250), 3);
        // second request at t=1 waits for the first 250 bytes to drain
        assert_eq!(m.charge(1, 100), 4);
        assert_eq!(m.charge(10, 100), 11);
    }

    #[test]
    fn pool_refcounts() {
        let mut p = OnChipPool::default();
        let id = p.alloc(vec![1], vec![StreamValue::Bool(true)]).unwrap();
        p.retain(id, 1).unwrap();
        p.release(id).unwrap();
        assert_eq!(p.live_count(), 1);
        p.release(id).unwrap();
        assert_eq!(p.live_count(), 0);
        assert!(p.release(id).is_err());
        assert_eq!(p.peak_bytes, 1);
    }
}
