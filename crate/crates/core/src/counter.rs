//! Thread-local multiply-accumulate tally used by the instrumented forward.
//!
//! Kernels report their nominal MAC count once per call, on the calling
//! thread, before any work is farmed out. Counting is off unless a
//! [`CountingSession`] is alive on the current thread.

use std::cell::RefCell;

/// What a tallied multiply-accumulate belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    QueryProjection,
    KeyProjection,
    ValueProjection,
    Logits,
    Aggregate,
    OutputConv,
    Other,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::QueryProjection,
        Category::KeyProjection,
        Category::ValueProjection,
        Category::Logits,
        Category::Aggregate,
        Category::OutputConv,
        Category::Other,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    macs: [u64; 7],
    /// Non-MAC elementwise flops (softmax, normalization, bias).
    pub overhead_flops: u64,
}

impl Tally {
    pub fn macs(&self, cat: Category) -> u64 {
        self.macs[cat.slot()]
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.iter().sum()
    }
}

struct State {
    current: Category,
    tally: Tally,
}

thread_local! {
    static STATE: RefCell<Option<State>> = const { RefCell::new(None) };
}

/// Owns the counters for the current thread; dropped sessions stop counting.
pub struct CountingSession {
    _private: (),
}

impl CountingSession {
    pub fn start() -> Self {
        STATE.with(|s| {
            *s.borrow_mut() = Some(State {
                current: Category::Other,
                tally: Tally::default(),
            })
        });
        CountingSession { _private: () }
    }

    /// Attribute subsequent kernel calls to `cat`.
    pub fn set_category(&self, cat: Category) {
        STATE.with(|s| {
            if let Some(st) = s.borrow_mut().as_mut() {
                st.current = cat;
            }
        });
    }

    pub fn tally(&self) -> Tally {
        STATE.with(|s| {
            s.borrow()
                .as_ref()
                .map(|st| st.tally.clone())
                .unwrap_or_default()
        })
    }
}

impl Drop for CountingSession {
    fn drop(&mut self) {
        STATE.with(|s| *s.borrow_mut() = None);
    }
}

pub(crate) fn record_macs(macs: u64) {
    STATE.with(|s| {
        if let Some(st) = s.borrow_mut().as_mut() {
            st.tally.macs[st.current.slot()] += macs;
        }
    });
}

pub(crate) fn record_overhead(flops: u64) {
    STATE.with(|s| {
        if let Some(st) = s.borrow_mut().as_mut() {
            st.tally.overhead_flops += flops;
        }
    });
}
