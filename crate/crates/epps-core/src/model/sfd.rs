//! Feature decoupling: each pyramid level is split by two
//! parameter-independent CBR stacks into a significant branch `s` (consumed
//! by the decoder) and an unimportant branch `u` (consumed only by the mutual
//! information loss). Parameter names carry `.s.` / `.u.` markers so the
//! branch partition can be audited by name.

use rand::RngCore;

use crate::autodiff::{Tape, Var};
use crate::nn::{Cbr, ParamStore};
use crate::scalar::Scalar;

pub struct Sfd {
    s_stack: [Cbr; 2],
    u_stack: [Cbr; 2],
}

impl Sfd {
    /// Channel-preserving decoupler for pyramid level `level` (1-based).
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut dyn RngCore,
        level: usize,
        channels: usize,
    ) -> Self {
        let branch = |store: &mut ParamStore<S>, rng: &mut dyn RngCore, tag: &str| {
            [
                Cbr::new(store, rng, &format!("sfd{level}.{tag}.0"), channels, channels, 3, 1),
                Cbr::new(store, rng, &format!("sfd{level}.{tag}.1"), channels, channels, 3, 1),
            ]
        };
        Sfd {
            s_stack: branch(store, rng, "s"),
            u_stack: branch(store, rng, "u"),
        }
    }

    /// Returns `(s, u)`, both shaped like the input.
    pub fn forward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        tape: &mut Tape<S>,
        f: Var,
        training: bool,
    ) -> (Var, Var) {
        let run = |stack: &[Cbr; 2], ps: &mut ParamStore<S>, tape: &mut Tape<S>| {
            let x = stack[0].forward(ps, tape, f, training);
            stack[1].forward(ps, tape, x, training)
        };
        (run(&self.s_stack, ps, tape), run(&self.u_stack, ps, tape))
    }
}
