//! Two-tier store for first-layer aggregation results shared across frames.
//!
//! The host tier keeps everything recorded. The device tier is a bounded
//! buffer resized per frame; its contents follow the order in which the next
//! frame uses them, and whatever does not fit stays host-only.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dtdg::Frame;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AggCacheKey {
    pub snapshot: usize,
    pub layer: usize,
    pub feature_epoch: u64,
}

impl AggCacheKey {
    pub fn layer0(snapshot: usize, feature_epoch: u64) -> Self {
        AggCacheKey {
            snapshot,
            layer: 0,
            feature_epoch,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Host,
    Device,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordOutcome {
    Stored,
    /// Did not fit the device buffer; the entry is kept host-side.
    Spilled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheHit {
    Device,
    Host,
    Miss,
}

#[derive(Clone, Debug)]
pub struct Fetched {
    pub matrix: Option<Arc<Matrix>>,
    pub hit: CacheHit,
    /// Bytes the transfer channel must carry to use this result.
    pub transfer_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounters {
    pub device_hits: u64,
    pub host_hits: u64,
    pub misses: u64,
    pub spills: u64,
    pub reallocations: u64,
    pub forced_shrinks: u64,
}

/// Bounded device-side buffer, entries kept in next-frame use order.
#[derive(Clone, Debug, Default)]
pub struct DeviceBuffer {
    capacity_bytes: u64,
    entries: Vec<(AggCacheKey, Arc<Matrix>)>,
    allocated_bytes: u64,
}

impl DeviceBuffer {
    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn allocated_bytes(&self) -> u64 {
        self.allocated_bytes
    }

    pub fn keys(&self) -> impl Iterator<Item = &AggCacheKey> {
        self.entries.iter().map(|(k, _)| k)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn find(&self, key: &AggCacheKey) -> Option<&Arc<Matrix>> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, m)| m)
    }

    fn try_push(&mut self, key: AggCacheKey, m: Arc<Matrix>) -> bool {
        let size = m.byte_size();
        if self.allocated_bytes + size > self.capacity_bytes {
            return false;
        }
        self.allocated_bytes += size;
        self.entries.push((key, m));
        true
    }
}

/// Per-frame peak device usage gathered while profiling, keyed by frame start.
pub type FramePeaks = BTreeMap<usize, u64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferPlan {
    /// Device bytes left over by the next frame's own peak.
    pub available_bytes: u64,
    /// Buffer size after applying the plan.
    pub buffer_bytes: u64,
    /// Keys kept on the device, in first-use order.
    pub retention: Vec<AggCacheKey>,
    /// The buffer had to grow for this frame.
    pub reallocated: bool,
    /// The buffer had to shrink because the frame itself needs the memory.
    pub forced_shrink: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ReuseCache {
    host: BTreeMap<AggCacheKey, Arc<Matrix>>,
    device: DeviceBuffer,
    counters: CacheCounters,
}

impl ReuseCache {
    pub fn new() -> Self {
        ReuseCache::default()
    }

    /// Cache with a device buffer of `capacity_bytes` already allocated.
    pub fn with_device_capacity(capacity_bytes: u64) -> Self {
        ReuseCache {
            device: DeviceBuffer {
                capacity_bytes,
                ..DeviceBuffer::default()
            },
            ..ReuseCache::default()
        }
    }

    pub fn device(&self) -> &DeviceBuffer {
        &self.device
    }

    pub fn counters(&self) -> &CacheCounters {
        &self.counters
    }

    pub fn host_len(&self) -> usize {
        self.host.len()
    }

    pub fn on_device(&self, key: &AggCacheKey) -> bool {
        self.device.find(key).is_some()
    }

    pub fn on_host(&self, key: &AggCacheKey) -> bool {
        self.host.contains_key(key)
    }

    pub fn contains(&self, key: &AggCacheKey) -> bool {
        self.host.contains_key(key) || self.device.find(key).is_some()
    }

    pub fn record(&mut self, key: AggCacheKey, matrix: Arc<Matrix>, tier: Tier) -> Result<RecordOutcome> {
        if key.layer != 0 {
            return Err(Error::Argument(format!(
                "only layer-0 aggregations are cacheable, got layer {}",
                key.layer
            )));
        }
        match tier {
            Tier::Host => {
                if self.host.contains_key(&key) {
                    return Err(Error::Duplicate(format!("{key:?} already on host")));
                }
                self.host.insert(key, matrix);
                Ok(RecordOutcome::Stored)
            }
            Tier::Device => {
                if self.device.find(&key).is_some() {
                    return Err(Error::Duplicate(format!("{key:?} already on device")));
                }
                if self.device.try_push(key, matrix.clone()) {
                    Ok(RecordOutcome::Stored)
                } else {
                    self.counters.spills += 1;
                    self.host.entry(key).or_insert(matrix);
                    Ok(RecordOutcome::Spilled)
                }
            }
        }
    }

    pub fn fetch(&mut self, key: &AggCacheKey) -> Fetched {
        if let Some(m) = self.device.find(key) {
            self.counters.device_hits += 1;
            return Fetched {
                matrix: Some(m.clone()),
                hit: CacheHit::Device,
                transfer_bytes: 0,
            };
        }
        if let Some(m) = self.host.get(key) {
            self.counters.host_hits += 1;
            return Fetched {
                matrix: Some(m.clone()),
                hit: CacheHit::Host,
                transfer_bytes: m.byte_size(),
            };
        }
        self.counters.misses += 1;
        Fetched {
            matrix: None,
            hit: CacheHit::Miss,
            transfer_bytes: 0,
        }
    }

    /// Drops the device copy of `key`; the host copy, if any, remains.
    pub fn evict(&mut self, key: &AggCacheKey) {
        if let Some(pos) = self.device.entries.iter().position(|(k, _)| k == key) {
            let (_, m) = self.device.entries.remove(pos);
            self.device.allocated_bytes -= m.byte_size();
        }
    }

    /// Removes every entry recorded under a feature epoch other than `current`.
    pub fn invalidate_except(&mut self, current: u64) {
        self.host.retain(|k, _| k.feature_epoch == current);
        let dev = std::mem::take(&mut self.device.entries);
        self.device.allocated_bytes = 0;
        for (k, m) in dev {
            if k.feature_epoch == current {
                self.device.allocated_bytes += m.byte_size();
                self.device.entries.push((k, m));
            }
        }
    }

    /// Sizes the device buffer for `next` and picks which results it keeps.
    ///
    /// The buffer gets whatever the frame leaves free. It grows only when the
    /// retained results need more than it holds, and shrinks only when the
    /// frame itself would otherwise run out of memory.
    pub fn plan_next_frame(
        &self,
        next: &Frame,
        peaks: &FramePeaks,
        device_total: u64,
        feature_epoch: u64,
    ) -> Result<BufferPlan> {
        let peak = *peaks.get(&next.start).ok_or_else(|| {
            Error::Planning(format!(
                "no memory statistics for frame starting at {}; fall back to host-only reuse",
                next.start
            ))
        })?;
        let available = device_total.saturating_sub(peak);
        let mut retention = Vec::new();
        let mut required = 0u64;
        for t in next.snapshots() {
            let key = AggCacheKey::layer0(t, feature_epoch);
            let size = match (self.device.find(&key), self.host.get(&key)) {
                (Some(m), _) | (None, Some(m)) => m.byte_size(),
                (None, None) => continue,
            };
            if required + size > available {
                break;
            }
            required += size;
            retention.push(key);
        }
        let current = self.device.capacity_bytes;
        let (buffer_bytes, reallocated, forced_shrink) = if required > current {
            (required, true, false)
        } else if available < current {
            (available, false, true)
        } else {
            (current, false, false)
        };
        Ok(BufferPlan {
            available_bytes: available,
            buffer_bytes,
            retention,
            reallocated,
            forced_shrink,
        })
    }

    /// Resizes the device buffer and rearranges it to `plan.retention`.
    /// With `promote`, retained host-only entries are copied over now and
    /// their bytes returned; otherwise they move on first use.
    pub fn apply_plan(&mut self, plan: &BufferPlan, promote: bool) -> u64 {
        if plan.reallocated {
            self.counters.reallocations += 1;
        }
        if plan.forced_shrink {
            self.counters.forced_shrinks += 1;
        }
        let old = std::mem::take(&mut self.device.entries);
        self.device.capacity_bytes = plan.buffer_bytes;
        self.device.allocated_bytes = 0;
        let mut promoted = 0;
        for key in &plan.retention {
            let resident = old.iter().find(|(k, _)| k == key).map(|(_, m)| m.clone());
            let m = match resident {
                Some(m) => m,
                None => match self.host.get(key).filter(|_| promote) {
                    Some(m) => {
                        promoted += m.byte_size();
                        m.clone()
                    }
                    None => continue,
                },
            };
            // demoted device-only entries survive on the host
            self.device.try_push(*key, m);
        }
        for (k, m) in old {
            if !plan.retention.contains(&k) {
                self.host.entry(k).or_insert(m);
            }
        }
        promoted
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MB: usize = 1 << 20;

    fn mat(bytes: usize) -> Arc<Matrix> {
        Arc::new(Matrix::zeros(bytes / 4, 1))
    }

    #[test]
    fn record_then_fetch() {
        let mut c = ReuseCache::new();
        let m = Arc::new(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap());
        c.record(AggCacheKey::layer0(0, 0), m.clone(), Tier::Host).unwrap();
        let f = c.fetch(&AggCacheKey::layer0(0, 0));
        assert_eq!(f.hit, CacheHit::Host);
        assert_eq!(*f.matrix.unwrap(), *m);
        assert!(matches!(
            c.record(AggCacheKey::layer0(0, 0), m, Tier::Host),
            Err(Error::Duplicate(_))
        ));
    }

    #[test]
    fn zero_device_capacity_spills() {
        let mut c = ReuseCache::with_device_capacity(0);
        let k = AggCacheKey::layer0(3, 0);
        assert_eq!(c.record(k, mat(64), Tier::Device).unwrap(), RecordOutcome::Spilled);
        assert_eq!(c.fetch(&k).hit, CacheHit::Host);
    }

    #[test]
    fn capacity_arithmetic() {
        let mut c = ReuseCache::with_device_capacity((2 * MB + MB / 2) as u64);
        let got: Vec<_> = (0..3)
            .map(|t| c.record(AggCacheKey::layer0(t, 0), mat(MB), Tier::Device).unwrap())
            .collect();
        assert_eq!(got, [RecordOutcome::Stored, RecordOutcome::Stored, RecordOutcome::Spilled]);
        assert_eq!(c.device().len(), 2);
    }

    #[test]
    fn fetch_tiers_and_bytes() {
        let mut c = ReuseCache::with_device_capacity(MB as u64);
        let hot = AggCacheKey::layer0(0, 0);
        let cold = AggCacheKey::layer0(1, 0);
        c.record(hot, mat(1024), Tier::Device).unwrap();
        c.record(cold, mat(4 * MB), Tier::Host).unwrap();
        let f = c.fetch(&hot);
        assert_eq!((f.hit, f.transfer_bytes), (CacheHit::Device, 0));
        let f = c.fetch(&cold);
        assert_eq!((f.hit, f.transfer_bytes), (CacheHit::Host, 4 * MB as u64));
        c.evict(&hot);
        c.invalidate_except(1);
        assert_eq!(c.fetch(&hot).hit, CacheHit::Miss);
        assert_eq!(c.counters().misses, 1);
    }

    #[test]
    fn layer_one_rejected() {
        let mut c = ReuseCache::new();
        let k = AggCacheKey {
            snapshot: 0,
            layer: 1,
            feature_epoch: 0,
        };
        assert!(c.record(k, mat(4), Tier::Host).is_err());
    }

    #[test]
    fn full_frame_leaves_no_room() {
        let c = ReuseCache::new();
        let f = Frame { start: 0, size: 4, stride: 1 };
        let plan = c.plan_next_frame(&f, &FramePeaks::from([(0, 100)]), 100, 0).unwrap();
        assert_eq!(plan.available_bytes, 0);
        assert!(plan.retention.is_empty());
        assert!(matches!(
            c.plan_next_frame(&f, &FramePeaks::new(), 100, 0),
            Err(Error::Planning(_))
        ));
    }

    #[test]
    fn stride_one_retains_shared() {
        let mut c = ReuseCache::with_device_capacity(1 << 30);
        for t in 0..4 {
            c.record(AggCacheKey::layer0(t, 0), mat(64), Tier::Device).unwrap();
        }
        let next = Frame { start: 1, size: 4, stride: 1 };
        let plan = c.plan_next_frame(&next, &FramePeaks::from([(1, 0)]), 1 << 30, 0).unwrap();
        let snaps: Vec<_> = plan.retention.iter().map(|k| k.snapshot).collect();
        assert_eq!(snaps, [1, 2, 3]);
        assert_eq!(c.apply_plan(&plan, true), 0);
        assert!(c.device().keys().all(|k| k.snapshot != 0));
        assert_eq!(c.fetch(&AggCacheKey::layer0(0, 0)).hit, CacheHit::Host);
    }

    #[test]
    fn shrinking_demand_stops_reallocating() {
        // demand per frame in entries: 1, 3, 2, 1
        let mut c = ReuseCache::new();
        for t in 0..8 {
            c.record(AggCacheKey::layer0(t, 0), mat(100), Tier::Host).unwrap();
        }
        let demand = [1usize, 3, 2, 1];
        let mut events = Vec::new();
        for (i, d) in demand.iter().enumerate() {
            let f = Frame { start: i, size: 8 - i, stride: 1 };
            let total = 10_000;
            let peak = total - (*d as u64) * 100;
            let plan = c.plan_next_frame(&f, &FramePeaks::from([(i, peak)]), total, 0).unwrap();
            c.apply_plan(&plan, true);
            events.push(plan.reallocated);
        }
        assert_eq!(events, [true, true, false, false]);
        assert_eq!(c.counters().forced_shrinks, 2);
    }
}
