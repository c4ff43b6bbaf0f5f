use crate::slots::SlotId;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Parameter groups, used for freezing and for slot-scoped updates.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Prompt(SlotId),
    SpanHead,
    BinaryHead,
}

/// Names and tape variables of the trainable parameters bound to a tape.
#[derive(Default, Debug)]
pub struct BindLog {
    pub entries: Vec<(String, Var)>,
}

pub(crate) fn bind_tensor<'a>(
    tape: &mut Tape<'a>,
    t: &'a Tensor,
    name: String,
    trainable: bool,
    log: &mut BindLog,
) -> Var {
    if trainable {
        let v = tape.param(t);
        log.entries.push((name, v));
        v
    } else {
        tape.constant_ref(t)
    }
}
