//! Deliberate-fault switches used to prove the gradient suite catches
//! broken backward passes. Never armed in normal operation.

use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};

static CONV2D_INPUT_GRAD_SIGN: AtomicBool = AtomicBool::new(false);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negate the input gradient produced by `conv2d` backward.
    Conv2dInputGradSign,
}

impl FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conv2d-sign" => Ok(Fault::Conv2dInputGradSign),
            other => Err(format!("unknown fault `{other}` (expected conv2d-sign)")),
        }
    }
}

pub fn arm(fault: Fault) {
    match fault {
        Fault::Conv2dInputGradSign => CONV2D_INPUT_GRAD_SIGN.store(true, Ordering::SeqCst),
    }
}

pub fn disarm_all() {
    CONV2D_INPUT_GRAD_SIGN.store(false, Ordering::SeqCst);
}

pub(crate) fn conv2d_sign_flipped() -> bool {
    CONV2D_INPUT_GRAD_SIGN.load(Ordering::Relaxed)
}
