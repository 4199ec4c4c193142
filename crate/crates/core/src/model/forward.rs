use super::config::{BOS, EOS};
use super::layers::apply_dropout;
use super::TransformerModel;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::Rng;

/// Decoder input and labels for teacher forcing: `[BOS] + tgt` predicts `tgt + [EOS]`.
pub(crate) fn teacher_forcing(tgt: &[u32]) -> (Vec<u32>, Vec<usize>) {
    let mut input = Vec::with_capacity(tgt.len() + 1);
    input.push(BOS);
    input.extend_from_slice(tgt);
    let mut labels: Vec<usize> = tgt.iter().map(|&t| t as usize).collect();
    labels.push(EOS as usize);
    (input, labels)
}

impl TransformerModel {
    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.config.max_positions {
            return Err(Error::SequenceLength {
                len: tokens.len(),
                max: self.config.max_positions,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Argument(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embed<'a>(&'a self, tape: &mut Tape<'a>, table: &'a Tensor, tokens: &[u32]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let t = tape.bind(table);
        let e = tape.gather(t, &ids)?;
        let p = tape.bind(&self.pos_embed);
        let p = tape.gather(p, &positions)?;
        tape.add(e, p)
    }

    fn residual_dropout<'a>(&self, tape: &mut Tape<'a>, x: Var, dropout: &mut Option<&mut Rng>) -> Var {
        match dropout {
            Some(rng) if self.config.dropout > 0.0 => apply_dropout(tape, x, self.config.dropout, rng),
            _ => x,
        }
    }

    /// Encodes `src + [EOS]`; returns the final-normed memory `[len+1, d]`.
    pub(crate) fn encode_on<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        src: &[u32],
        dropout: &mut Option<&mut Rng>,
    ) -> Result<Var> {
        let mut tokens = src.to_vec();
        tokens.push(EOS);
        let h = self.config.n_heads;
        let mut x = self.embed(tape, &self.src_embed, &tokens)?;
        for layer in &self.encoder {
            let n = layer.self_norm.apply(tape, x)?;
            let a = layer.self_attn.apply(tape, n, n, h, false, dropout)?;
            let a = self.residual_dropout(tape, a, dropout);
            x = tape.add(x, a)?;
            let n = layer.ffn_norm.apply(tape, x)?;
            let f = layer.ffn.apply(tape, n, dropout)?;
            let f = self.residual_dropout(tape, f, dropout);
            x = tape.add(x, f)?;
        }
        self.encoder_norm.apply(tape, x)
    }

    /// Decoder logits `[len, vocab]` for a target-side input sequence.
    pub(crate) fn decode_on<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        memory: Var,
        tgt_in: &[u32],
        dropout: &mut Option<&mut Rng>,
    ) -> Result<Var> {
        let h = self.config.n_heads;
        let mut x = self.embed(tape, &self.tgt_embed, tgt_in)?;
        for layer in &self.decoder {
            let n = layer.self_norm.apply(tape, x)?;
            let a = layer.self_attn.apply(tape, n, n, h, true, dropout)?;
            let a = self.residual_dropout(tape, a, dropout);
            x = tape.add(x, a)?;
            let n = layer.cross_norm.apply(tape, x)?;
            let c = layer.cross_attn.apply(tape, n, memory, h, false, dropout)?;
            let c = self.residual_dropout(tape, c, dropout);
            x = tape.add(x, c)?;
            let n = layer.ffn_norm.apply(tape, x)?;
            let f = layer.ffn.apply(tape, n, dropout)?;
            let f = self.residual_dropout(tape, f, dropout);
            x = tape.add(x, f)?;
        }
        let x = self.decoder_norm.apply(tape, x)?;
        self.output.apply(tape, x, dropout)
    }

    /// Logits `[target_prefix.len(), vocab]`; position `t` sees `target_prefix[..=t]`.
    pub fn forward(&self, source: &[u32], target_prefix: &[u32]) -> Result<Tensor> {
        if source.len() + 1 > self.config.max_positions {
            return Err(Error::SequenceLength {
                len: source.len() + 1,
                max: self.config.max_positions,
            });
        }
        if target_prefix.is_empty() {
            return Err(Error::Argument("empty target prefix".into()));
        }
        let mut tape = Tape::new();
        let mem = self.encode_on(&mut tape, source, &mut None)?;
        let logits = self.decode_on(&mut tape, mem, target_prefix, &mut None)?;
        Ok(tape.to_tensor(logits))
    }

    /// Builds the teacher-forced loss for one pair on `tape`.
    pub(crate) fn loss_on<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        src: &[u32],
        tgt: &[u32],
        dropout: &mut Option<&mut Rng>,
    ) -> Result<Var> {
        if src.len() + 1 > self.config.max_positions || tgt.len() + 1 > self.config.max_positions {
            return Err(Error::SequenceLength {
                len: src.len().max(tgt.len()) + 1,
                max: self.config.max_positions,
            });
        }
        let (input, labels) = teacher_forcing(tgt);
        let mem = self.encode_on(tape, src, dropout)?;
        let logits = self.decode_on(tape, mem, &input, dropout)?;
        tape.cross_entropy(logits, &labels)
    }

    /// Teacher-forced mean token loss for one pair.
    pub fn loss(&self, src: &[u32], tgt: &[u32]) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.loss_on(&mut tape, src, tgt, &mut None)?;
        Ok(tape.scalar(l))
    }

    /// Loss and gradients of one pair, aligned with [`TransformerModel::trainable_names`].
    pub fn loss_and_grads(
        &self,
        src: &[u32],
        tgt: &[u32],
        dropout: Option<&mut Rng>,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut dropout = dropout;
        let mut tape = Tape::new();
        let l = self.loss_on(&mut tape, src, tgt, &mut dropout)?;
        let value = tape.scalar(l);
        tape.backward(l);
        let grads = self
            .tensors()
            .into_iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(_, t)| tape.grad_of(t).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect();
        Ok((value, grads))
    }
}
