//! Scoped flush-to-zero for subnormal floats on the current thread.
//!
//! Subnormal operands slow x86 arithmetic by an order of magnitude, and
//! long f32 training runs produce many of them in activations and
//! gradients. Values below the normal range are negligible for training,
//! so hot loops may opt in with [`FlushDenormals::enable`]. Results stay
//! deterministic for a given build and platform.

/// Restores the previous floating-point control state when dropped.
pub struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

#[cfg(target_arch = "x86_64")]
#[allow(deprecated)]
impl FlushDenormals {
    /// Set flush-to-zero and denormals-are-zero on this thread.
    pub fn enable() -> Self {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        const FTZ_DAZ: u32 = 0x8040;
        // SAFETY: only the FTZ and DAZ bits of MXCSR change; both affect
        // subnormal handling and nothing else.
        unsafe {
            let saved = _mm_getcsr();
            _mm_setcsr(saved | FTZ_DAZ);
            Self { saved }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[allow(deprecated)]
impl Drop for FlushDenormals {
    fn drop(&mut self) {
        // SAFETY: restores the value read in `enable`.
        unsafe { std::arch::x86_64::_mm_setcsr(self.saved) }
    }
}

#[cfg(not(target_arch = "x86_64"))]
impl FlushDenormals {
    pub fn enable() -> Self {
        Self {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guard_is_scoped() {
        let tiny = std::hint::black_box(f32::MIN_POSITIVE);
        let half = std::hint::black_box(0.5f32);
        assert!(tiny * half > 0.0);
        {
            let _g = FlushDenormals::enable();
            #[cfg(target_arch = "x86_64")]
            assert_eq!(std::hint::black_box(tiny) * std::hint::black_box(half), 0.0);
        }
        assert!(std::hint::black_box(tiny) * std::hint::black_box(half) > 0.0);
    }
}
