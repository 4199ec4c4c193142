use super::config::{BOS, EOS};
use super::TransformerModel;
use crate::error::Result;
use crate::numerics::Tape;
use crate::par::{self, ExecMode};

pub const DEFAULT_MAX_LEN: usize = 1024;

/// Argmax decoding until EOS or `max_len` tokens; EOS is not included in the output.
///
/// Output length is also capped by the positional table (`max_positions - 1`
/// tokens after BOS). Exact logit ties go to the lowest token id.
pub fn greedy_decode(model: &TransformerModel, source: &[u32], max_len: usize) -> Result<Vec<u32>> {
    let limit = max_len.min(model.config.max_positions - 1).max(1);
    let mut enc_tape = Tape::new();
    let mem = model.encode_on(&mut enc_tape, source, &mut None)?;
    let memory = enc_tape.to_tensor(mem);
    drop(enc_tape);

    let vocab = model.config.vocab_size;
    let mut prefix = vec![BOS];
    let mut out = Vec::new();
    while out.len() < limit {
        let mut tape = Tape::new();
        let m = tape.constant(memory.clone());
        let logits = model.decode_on(&mut tape, m, &prefix, &mut None)?;
        let last = &tape.value(logits)[(prefix.len() - 1) * vocab..];
        let next = argmax_lowest(last) as u32;
        if next == EOS {
            break;
        }
        out.push(next);
        prefix.push(next);
    }
    Ok(out)
}

/// Greedy translations of many sources, in input order.
pub fn decode_corpus<S: AsRef<[u32]> + Sync>(
    model: &TransformerModel,
    sources: &[S],
    max_len: usize,
    exec: ExecMode,
) -> Result<Vec<Vec<u32>>> {
    par::try_map(exec, sources, |_, s| greedy_decode(model, s.as_ref(), max_len))
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
