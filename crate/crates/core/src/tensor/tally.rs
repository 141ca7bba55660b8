//! Arithmetic-work instrumentation. Operators report their MAC/FLOP cost
//! once per call, on the calling thread, computed in closed form from the
//! operand shapes. Parallel kernels therefore cannot perturb the tally and
//! two runs of the same computation produce identical results.
//!
//! Counting conventions (the analyzer mirrors these exactly):
//! - conv/linear: 1 MAC = 2 FLOPs, plus one FLOP per output element if
//!   a bias is present
//! - batchnorm (inference): 2 FLOPs per element
//! - relu / relu6 / add: 1 FLOP per output element
//! - sigmoid: 4 FLOPs per element
//! - softmax over channels: 5 FLOPs per element
//! - max/avg pooling: k*k FLOPs per output element; global average
//!   pooling: h*w per output element
//! - bilinear resize: 8 FLOPs per output element
//! - weighted merge of k inputs: (2k-1) FLOPs per output element plus 3k
//!   for normalizing the weights
//! - concat: 0

use std::cell::RefCell;

/// One operator invocation's contribution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpRecord {
    pub label: String,
    pub macs: u64,
    pub flops: u64,
}

/// Tally of multiply-accumulates and scalar floating operations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpTally {
    pub macs: u64,
    pub flops: u64,
    pub per_op: Vec<OpRecord>,
}

impl OpTally {
    pub fn check_totals(&self) -> bool {
        let m: u64 = self.per_op.iter().map(|r| r.macs).sum();
        let f: u64 = self.per_op.iter().map(|r| r.flops).sum();
        m == self.macs && f == self.flops
    }
}

thread_local! {
    static STACK: RefCell<Vec<OpTally>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` with instrumentation active and returns its result together
/// with the exact arithmetic tally. Nested scopes see their inner ops in
/// the outer tally as well.
pub fn tally_scope<R>(f: impl FnOnce() -> R) -> (R, OpTally) {
    STACK.with(|s| s.borrow_mut().push(OpTally::default()));
    let out = f();
    let tally = STACK.with(|s| s.borrow_mut().pop().expect("tally stack underflow"));
    (out, tally)
}

pub(crate) fn record(label: impl FnOnce() -> String, macs: u64, flops: u64) {
    STACK.with(|s| {
        let mut stack = s.borrow_mut();
        if stack.is_empty() {
            return;
        }
        let label = label();
        for frame in stack.iter_mut() {
            frame.macs += macs;
            frame.flops += flops;
            frame.per_op.push(OpRecord {
                label: label.clone(),
                macs,
                flops,
            });
        }
    });
}
