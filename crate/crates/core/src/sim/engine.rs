use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    Host,
    Transfer,
    Compute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum EventKind {
    Decision,
    Prepare,
    Transfer,
    WeightEvolution,
    Gcn { layer: usize },
    Recurrent,
}

/// Time-breakdown bucket of an event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Host,
    Transfer,
    Gcn,
    Recurrent,
}

impl EventKind {
    pub fn resource(self) -> Resource {
        match self {
            EventKind::Decision | EventKind::Prepare => Resource::Host,
            EventKind::Transfer => Resource::Transfer,
            _ => Resource::Compute,
        }
    }

    pub fn category(self) -> Category {
        match self {
            EventKind::Decision | EventKind::Prepare => Category::Host,
            EventKind::Transfer => Category::Transfer,
            EventKind::Gcn { .. } => Category::Gcn,
            EventKind::WeightEvolution | EventKind::Recurrent => Category::Recurrent,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Preparing,
    Training,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub id: usize,
    pub epoch: usize,
    pub resource: Resource,
    /// Worker index on the host; always 0 on serial resources.
    pub lane: usize,
    pub kind: EventKind,
    pub frame: Option<usize>,
    /// Index of the partition inside its frame.
    pub partition: Option<usize>,
    pub first_snapshot: usize,
    pub snapshots: usize,
    pub start: f64,
    pub end: f64,
    /// Bytes for host and transfer events, work units for compute events.
    pub amount: f64,
    pub deps: Vec<usize>,
    pub prev_on_lane: Option<usize>,
}

impl Event {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSpan {
    pub index: usize,
    pub phase: Phase,
    pub start: f64,
    pub end: f64,
}

impl EpochSpan {
    pub fn span(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub host_workers: usize,
    pub events: Vec<Event>,
    pub epochs: Vec<EpochSpan>,
}

/// What an event is about, minus its timing.
#[derive(Clone, Debug)]
pub(crate) struct EventSpec {
    pub kind: EventKind,
    pub frame: Option<usize>,
    pub partition: Option<usize>,
    pub first_snapshot: usize,
    pub snapshots: usize,
    pub amount: f64,
    pub duration: f64,
    pub deps: Vec<usize>,
}

/// In-order list scheduler. An event starts once its dependencies have
/// finished, its lane is free and its epoch has begun.
#[derive(Debug)]
pub(crate) struct Scheduler {
    timeline: Timeline,
    host_free: Vec<(f64, Option<usize>)>,
    transfer_free: (f64, Option<usize>),
    compute_free: (f64, Option<usize>),
    epoch: usize,
    epoch_start: f64,
    phase: Phase,
}

impl Scheduler {
    pub fn new(host_workers: usize) -> Self {
        Scheduler {
            timeline: Timeline {
                host_workers,
                ..Timeline::default()
            },
            host_free: vec![(0.0, None); host_workers],
            transfer_free: (0.0, None),
            compute_free: (0.0, None),
            epoch: 0,
            epoch_start: 0.0,
            phase: Phase::Preparing,
        }
    }

    fn horizon(&self) -> f64 {
        self.timeline.events.iter().map(|e| e.end).fold(self.epoch_start, f64::max)
    }

    /// Opens a new epoch once everything scheduled so far has finished.
    pub fn begin_epoch(&mut self, phase: Phase) {
        if !self.timeline.epochs.is_empty() {
            self.close_epoch();
            self.epoch += 1;
        }
        self.epoch_start = self.horizon();
        self.phase = phase;
        self.timeline.epochs.push(EpochSpan {
            index: self.epoch,
            phase,
            start: self.epoch_start,
            end: self.epoch_start,
        });
    }

    fn close_epoch(&mut self) {
        let end = self.horizon();
        if let Some(last) = self.timeline.epochs.last_mut() {
            last.end = end;
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    #[cfg(test)]
    pub fn event(&self, id: usize) -> &Event {
        &self.timeline.events[id]
    }

    pub fn schedule(&mut self, spec: EventSpec) -> usize {
        let resource = spec.kind.resource();
        let ready = spec
            .deps
            .iter()
            .map(|&d| self.timeline.events[d].end)
            .fold(self.epoch_start, f64::max);
        let (lane, (free, prev)) = match resource {
            Resource::Host => {
                let mut best = 0;
                for (i, w) in self.host_free.iter().enumerate() {
                    if w.0 < self.host_free[best].0 {
                        best = i;
                    }
                }
                (best, self.host_free[best])
            }
            Resource::Transfer => (0, self.transfer_free),
            Resource::Compute => (0, self.compute_free),
        };
        let start = ready.max(free);
        let end = start + spec.duration;
        let id = self.timeline.events.len();
        let slot = (end, Some(id));
        match resource {
            Resource::Host => self.host_free[lane] = slot,
            Resource::Transfer => self.transfer_free = slot,
            Resource::Compute => self.compute_free = slot,
        }
        self.timeline.events.push(Event {
            id,
            epoch: self.epoch,
            resource,
            lane,
            kind: spec.kind,
            frame: spec.frame,
            partition: spec.partition,
            first_snapshot: spec.first_snapshot,
            snapshots: spec.snapshots,
            start,
            end,
            amount: spec.amount,
            deps: spec.deps,
            prev_on_lane: prev,
        });
        id
    }

    pub fn finish(mut self) -> Timeline {
        if !self.timeline.epochs.is_empty() {
            self.close_epoch();
        }
        self.timeline
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: EventKind, duration: f64, deps: Vec<usize>) -> EventSpec {
        EventSpec {
            kind,
            frame: None,
            partition: None,
            first_snapshot: 0,
            snapshots: 1,
            amount: 0.0,
            duration,
            deps,
        }
    }

    #[test]
    fn serial_resources_queue_in_order() {
        let mut s = Scheduler::new(2);
        s.begin_epoch(Phase::Training);
        let a = s.schedule(spec(EventKind::Transfer, 5.0, vec![]));
        let b = s.schedule(spec(EventKind::Transfer, 3.0, vec![]));
        assert_eq!(s.event(b).start, 5.0);
        let c = s.schedule(spec(EventKind::Gcn { layer: 0 }, 1.0, vec![a]));
        assert_eq!(s.event(c).start, 5.0);
        assert_eq!(s.event(b).prev_on_lane, Some(a));
    }

    #[test]
    fn host_picks_earliest_free_worker() {
        let mut s = Scheduler::new(2);
        s.begin_epoch(Phase::Training);
        let a = s.schedule(spec(EventKind::Prepare, 4.0, vec![]));
        let b = s.schedule(spec(EventKind::Prepare, 2.0, vec![]));
        let c = s.schedule(spec(EventKind::Prepare, 1.0, vec![]));
        assert_eq!((s.event(a).lane, s.event(b).lane, s.event(c).lane), (0, 1, 1));
        assert_eq!(s.event(c).start, 2.0);
    }

    #[test]
    fn epochs_are_barriers() {
        let mut s = Scheduler::new(1);
        s.begin_epoch(Phase::Preparing);
        s.schedule(spec(EventKind::Gcn { layer: 0 }, 7.0, vec![]));
        s.begin_epoch(Phase::Training);
        let b = s.schedule(spec(EventKind::Prepare, 1.0, vec![]));
        assert_eq!(s.event(b).start, 7.0);
        let t = s.finish();
        assert_eq!(t.epochs.len(), 2);
        assert_eq!((t.epochs[0].end, t.epochs[1].start, t.epochs[1].end), (7.0, 7.0, 8.0));
    }
}
