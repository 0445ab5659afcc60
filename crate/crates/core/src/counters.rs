//! Per-thread operation counters.
//!
//! Kernels and proxy functions bump these so tests can assert which code
//! paths a forward or backward pass touched and how much arithmetic it did.
//! Counters are thread-local: a test only sees work issued from its own
//! thread.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Multiply-accumulates issued by exact conv/linear forward kernels.
    pub exact_forward_macs: u64,
    /// Multiply-accumulates issued by exact kernels in the backward pass.
    pub exact_backward_macs: u64,
    /// Products simulated by the accurate approximate-hardware kernels.
    pub accurate_products: u64,
    /// Calls into accurate approximate-hardware kernels.
    pub accurate_kernel_calls: u64,
    /// Elements processed by pointwise functions (proxies, injection, relu).
    pub pointwise_elements: u64,
    /// Proxy activation evaluations (forward or recompute).
    pub proxy_calls: u64,
    /// Error-injection evaluations (forward or recompute).
    pub inject_calls: u64,
    /// Error-model calibrations, Type 1.
    pub type1_calibrations: u64,
    /// Error-model calibrations, Type 2.
    pub type2_calibrations: u64,
}

thread_local! {
    static COUNTERS: Cell<Counters> = Cell::new(Counters::default());
}

pub fn snapshot() -> Counters {
    COUNTERS.with(Cell::get)
}

pub fn reset() {
    COUNTERS.with(|c| c.set(Counters::default()));
}

pub(crate) fn bump(f: impl FnOnce(&mut Counters)) {
    COUNTERS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

impl Counters {
    /// Field-wise difference `self - earlier`.
    pub fn since(&self, earlier: &Counters) -> Counters {
        Counters {
            exact_forward_macs: self.exact_forward_macs - earlier.exact_forward_macs,
            exact_backward_macs: self.exact_backward_macs - earlier.exact_backward_macs,
            accurate_products: self.accurate_products - earlier.accurate_products,
            accurate_kernel_calls: self.accurate_kernel_calls - earlier.accurate_kernel_calls,
            pointwise_elements: self.pointwise_elements - earlier.pointwise_elements,
            proxy_calls: self.proxy_calls - earlier.proxy_calls,
            inject_calls: self.inject_calls - earlier.inject_calls,
            type1_calibrations: self.type1_calibrations - earlier.type1_calibrations,
            type2_calibrations: self.type2_calibrations - earlier.type2_calibrations,
        }
    }
}
